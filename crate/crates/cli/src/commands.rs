//! The pipeline stages behind each subcommand. Every stage writes a JSON
//! document of the form `{command, config, results}` into the run directory
//! and returns its results.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use autodiff::Tensor;
use refgame_core::analysis::{analyze, kmeans, write_records_csv, AnalysisReport, ProtocolRecord};
use refgame_core::checkpoint::{load_model, save_model};
use refgame_core::eval::{game_table, play_games, sender_symbols, simclr_disc_table, ScoringTable};
use refgame_core::agents::extract_features;
use refgame_core::probe::{evaluate_probe, train_linear_probe, ProbeResult};
use refgame_core::train::{init_model, train_with, TrainConfig, TrainedModel};
use serde::{Deserialize, Serialize};
use shapeworld::{build_taxonomy, make_splits, Dataset, DatasetManifest, NodeId, Split, Splits, Taxonomy};

use crate::config::{RunConfig, Variant};
use crate::error::{config_err, io_err, CliError, Result};

/// Envelope shared by all JSON outputs.
#[derive(Serialize)]
struct Output<'a, T: Serialize> {
    command: &'a str,
    config: &'a RunConfig,
    results: &'a T,
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_output<T: Serialize>(run: &Run, file: &str, command: &str, results: &T) -> Result<PathBuf> {
    let path = run.dir.join(file);
    write_json(&path, &Output { command, config: &run.cfg, results })?;
    Ok(path)
}

/// An opened run directory `out_dir/run_id`.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Creates the directory on first use. A run id that already holds a
    /// run with different data, training or variant settings is rejected.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.run_dir();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let cfg_path = dir.join("config.json");
        if cfg_path.exists() {
            let text = std::fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
            let previous = RunConfig::from_json(&text)?;
            if previous.identity() != cfg.identity() {
                return config_err(format!(
                    "run id {:?} in {} was created with different data, training or variant settings; choose another run id",
                    cfg.run_id,
                    cfg.out_dir.display()
                ));
            }
        } else {
            write_json(&cfg_path, cfg)?;
        }
        Ok(Self { cfg: cfg.clone(), dir })
    }

    pub fn checkpoint_path(&self, v: &Variant) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{}.ckpt", v.slug()))
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    /// The run's dataset, generated from (and checked against) its manifest.
    pub fn splits(&self) -> Result<Splits> {
        let path = self.manifest_path();
        let d = &self.cfg.data;
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let m = DatasetManifest::from_json(&text)?;
            if m.seed != d.seed || m.taxonomy_config != d.taxonomy || m.render != d.render || m.counts != d.counts {
                return config_err(format!("{} does not match the data section of the config", path.display()));
            }
            Ok(m.generate()?)
        } else if d.generate {
            generate_data(self)
        } else {
            config_err(format!("no manifest at {}; run `refgame gen-data` first or set data.generate", path.display()))
        }
    }
}

fn generate_data(run: &Run) -> Result<Splits> {
    let d = &run.cfg.data;
    let splits = make_splits(&d.taxonomy, &d.counts, &d.render, d.seed)?;
    let path = run.manifest_path();
    std::fs::write(&path, splits.manifest.to_json()? + "\n").map_err(io_err(&path))?;
    if d.materialize {
        let dir = run.dir.join("data");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for split in [Split::Train, Split::Val, Split::Ood, Split::Blob] {
            splits.get(split).write_materialized(&dir.join(format!("{}.ckpt", split.name())))?;
        }
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub manifest: PathBuf,
    pub train_categories: usize,
    pub ood_categories: usize,
    pub images: BTreeMap<String, usize>,
    /// SHA-256 of each split's pixels, labels and ids.
    pub checksums: BTreeMap<String, String>,
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DataSummary> {
    let run = Run::open(cfg)?;
    let splits = generate_data(&run)?;
    let mut images = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Ood, Split::Blob] {
        images.insert(split.name().to_string(), splits.get(split).len());
        checksums.insert(split.name().to_string(), splits.get(split).checksum());
    }
    Ok(DataSummary {
        manifest: run.manifest_path(),
        train_categories: splits.manifest.train_categories.len(),
        ood_categories: splits.manifest.ood_categories.len(),
        images,
        checksums,
    })
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum MetricsLine<'a> {
    Config { config: &'a RunConfig },
    Epoch { variant: &'a str, epoch: usize, loss: f64, acc: f64 },
    Divergence { variant: &'a str, message: String },
}

/// Outcome of training one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedVariant {
    pub variant: String,
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    pub final_acc: f64,
    pub first_loss: f64,
    pub seconds: f64,
}

fn jsonl(w: &mut impl Write, line: &MetricsLine<'_>) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, line)?;
    w.write_all(b"\n")?;
    w.flush()
}

/// Trains every variant of the matrix, streaming epoch metrics to
/// `metrics.jsonl` and wall-clock times to `timing.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainedVariant>> {
    let run = Run::open(cfg)?;
    let splits = run.splits()?;
    let ckpt_dir = run.dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let metrics_path = run.dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    jsonl(&mut metrics, &MetricsLine::Config { config: cfg }).map_err(io_err(&metrics_path))?;
    let mut timing = BTreeMap::new();
    let mut trained = Vec::new();
    for v in &cfg.variants {
        let label = v.label();
        let tc = cfg.train_config(v);
        let start = Instant::now();
        let mut write_err = None;
        let mut epoch_seconds = Vec::new();
        let result = train_with(&tc, &splits.train, |m| {
            epoch_seconds.push(m.time);
            let line = MetricsLine::Epoch { variant: &label, epoch: m.epoch, loss: m.loss, acc: m.acc };
            if let Err(e) = jsonl(&mut metrics, &line) {
                write_err.get_or_insert(e);
            }
        });
        if let Some(e) = write_err {
            return Err(io_err(&metrics_path)(e));
        }
        let out = match result {
            Ok(out) => out,
            Err(e) => {
                if matches!(e, refgame_core::Error::Divergence { .. }) {
                    let line = MetricsLine::Divergence { variant: &label, message: e.to_string() };
                    jsonl(&mut metrics, &line).map_err(io_err(&metrics_path))?;
                }
                return Err(e.into());
            }
        };
        let seconds = start.elapsed().as_secs_f64();
        let path = run.checkpoint_path(v);
        save_model(&out.model, &tc, &path)?;
        let (first, last) = (&out.metrics[0], &out.metrics[out.metrics.len() - 1]);
        timing.insert(label.clone(), serde_json::json!({ "epoch_seconds": epoch_seconds, "total_seconds": seconds }));
        trained.push(TrainedVariant { variant: label, checkpoint: path, final_loss: last.loss, final_acc: last.acc, first_loss: first.loss, seconds });
    }
    write_json(&run.dir.join("timing.json"), &timing)?;
    Ok(trained)
}

/// A loaded checkpoint with its display label.
pub struct LoadedModel {
    pub label: String,
    pub file: String,
    pub model: TrainedModel,
    pub train: TrainConfig,
}

fn load_models(run: &Run, checkpoint: Option<&Path>) -> Result<Vec<LoadedModel>> {
    let paths: Vec<PathBuf> = match checkpoint {
        Some(p) => vec![p.to_path_buf()],
        None => run.cfg.variants.iter().map(|v| run.checkpoint_path(v)).collect(),
    };
    paths
        .iter()
        .map(|p| {
            if !p.exists() {
                return config_err(format!("missing checkpoint {}; run `refgame train` first", p.display()));
            }
            let (model, sidecar) = load_model(p)?;
            if sidecar.agents.encoder.image_size != run.cfg.data.render.image_size {
                return config_err(format!("{} was trained on {}px images", p.display(), sidecar.agents.encoder.image_size));
            }
            let file = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(LoadedModel { label: sidecar.train.variant_label(), file, model, train: sidecar.train })
        })
        .collect()
}

fn pixels(data: &Dataset) -> Vec<&Tensor> {
    data.samples.iter().map(|s| &s.pixels).collect()
}

/// Game scoring table: Sender/Receiver for game models, argmax-of-`s`
/// symbols scored against `z` for SimCLR.
pub fn scoring_table(model: &TrainedModel, images: &[&Tensor]) -> refgame_core::Result<ScoringTable> {
    match model {
        TrainedModel::Game(a) => game_table(a, images),
        TrainedModel::Simclr(s) => simclr_disc_table(s, images),
    }
}

/// Encoder outputs of the Sender (or of the single SimCLR encoder).
pub fn encoder_features(model: &TrainedModel, images: &[&Tensor]) -> refgame_core::Result<Vec<Vec<f64>>> {
    match model {
        TrainedModel::Game(a) => extract_features(&a.sender.encoder, &a.store, images),
        TrainedModel::Simclr(s) => extract_features(&s.encoder, &s.store, images),
    }
}

fn split_data(splits: &Splits, split: Split) -> Result<&Dataset> {
    let d = splits.get(split);
    if d.is_empty() {
        return config_err(format!("split {} is missing from the dataset", split.name()));
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub variant: String,
    pub checkpoint: String,
    pub n: usize,
    pub games: usize,
    pub chance: f64,
    pub accuracy: BTreeMap<String, f64>,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<EvalEntry>> {
    let run = Run::open(cfg)?;
    let splits = run.splits()?;
    let e = &cfg.eval;
    let data: Vec<(Split, &Dataset)> = e.splits.iter().map(|&s| Ok((s, split_data(&splits, s)?))).collect::<Result<_>>()?;
    for (s, d) in &data {
        if d.len() < e.n {
            return config_err(format!("split {} has {} images, fewer than n = {}", s.name(), d.len(), e.n));
        }
    }
    let mut entries = Vec::new();
    for m in load_models(&run, checkpoint)? {
        let mut accuracy = BTreeMap::new();
        for (s, d) in &data {
            let table = scoring_table(&m.model, &pixels(d))?;
            accuracy.insert(s.name().to_string(), play_games(&table, e.n, e.games, cfg.seed)?);
        }
        entries.push(EvalEntry { variant: m.label, checkpoint: m.file, n: e.n, games: e.games, chance: 1.0 / e.n as f64, accuracy });
    }
    write_output(&run, "eval.json", "eval", &entries)?;
    Ok(entries)
}

/// Where `analyze` takes its protocol from.
#[derive(Clone, Debug)]
pub enum AnalyzeInput {
    /// The run's checkpoints (or one explicit checkpoint).
    Checkpoints(Option<PathBuf>),
    /// A `sample_id,category_id,symbol` CSV file.
    Records(PathBuf),
    /// A `sample_id,category_id,f0,f1,...` CSV file clustered into `k` symbols.
    Features { path: PathBuf, k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisEntry {
    pub variant: String,
    /// `game`, `simclr-disc`, `simclr-kmeans`, `records` or `kmeans`.
    pub source: String,
    pub split: Option<String>,
    pub report: AnalysisReport,
}

fn records_for(data: &Dataset, symbols: &[usize]) -> Result<Vec<ProtocolRecord>> {
    data.samples
        .iter()
        .zip(symbols)
        .map(|(s, &symbol)| match s.category {
            Some(c) => Ok(ProtocolRecord { sample_id: s.sample_id, category_id: c.0, symbol }),
            None => config_err("uncategorised images cannot be analysed"),
        })
        .collect()
}

/// Reads a features CSV: header `sample_id,category_id,f0,...`.
pub fn read_features_csv(path: &Path) -> Result<(Vec<(u64, usize)>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let (mut ids, mut feats) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let bad = || CliError::Config(format!("{}: malformed row {}", path.display(), line + 2));
        if rec.len() < 3 {
            return Err(bad());
        }
        let sample_id = rec[0].trim().parse().map_err(|_| bad())?;
        let category = rec[1].trim().parse().map_err(|_| bad())?;
        let f = rec.iter().skip(2).map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        ids.push((sample_id, category));
        feats.push(f);
    }
    if feats.is_empty() {
        return config_err(format!("{} has no rows", path.display()));
    }
    Ok((ids, feats))
}

pub fn write_features_csv(path: &Path, data: &Dataset, features: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let dim = features.first().map_or(0, |f| f.len());
    let mut header = vec!["sample_id".to_string(), "category_id".to_string()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    let csv_err = |e: csv::Error| CliError::Config(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for (s, f) in data.samples.iter().zip(features) {
        let mut row = vec![s.sample_id.to_string(), s.category.map_or(String::new(), |c| c.0.to_string())];
        row.extend(f.iter().map(|v| format!("{v:e}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn check_categories(records: &[ProtocolRecord], taxonomy: &Taxonomy) -> Result<()> {
    for r in records {
        if taxonomy.category(NodeId(r.category_id)).is_err() {
            return config_err(format!("category id {} is not a leaf of the configured taxonomy", r.category_id));
        }
    }
    Ok(())
}

pub fn cmd_analyze(cfg: &RunConfig, input: &AnalyzeInput) -> Result<Vec<AnalysisEntry>> {
    let run = Run::open(cfg)?;
    let acfg = cfg.analysis_config();
    let mut entries = Vec::new();
    match input {
        AnalyzeInput::Records(path) => {
            let taxonomy = build_taxonomy(&cfg.data.taxonomy)?;
            let records = refgame_core::analysis::read_records_csv(path)?;
            check_categories(&records, &taxonomy)?;
            let name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            entries.push(AnalysisEntry { variant: name, source: "records".into(), split: None, report: analyze(&records, &taxonomy, &acfg)? });
        }
        AnalyzeInput::Features { path, k } => {
            let taxonomy = build_taxonomy(&cfg.data.taxonomy)?;
            let (ids, feats) = read_features_csv(path)?;
            let km = kmeans(&feats, *k, &cfg.analysis.kmeans, cfg.seed)?;
            let records: Vec<ProtocolRecord> =
                ids.iter().zip(&km.assignments).map(|(&(sample_id, category_id), &symbol)| ProtocolRecord { sample_id, category_id, symbol }).collect();
            check_categories(&records, &taxonomy)?;
            let name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            entries.push(AnalysisEntry { variant: name, source: "kmeans".into(), split: None, report: analyze(&records, &taxonomy, &acfg)? });
        }
        AnalyzeInput::Checkpoints(checkpoint) => {
            let splits = run.splits()?;
            let data: Vec<(Split, &Dataset)> =
                cfg.analysis.splits.iter().map(|&s| Ok((s, split_data(&splits, s)?))).collect::<Result<_>>()?;
            for m in load_models(&run, checkpoint.as_deref())? {
                let mut protocols: Vec<(&str, Split, Vec<usize>)> = Vec::new();
                match &m.model {
                    TrainedModel::Game(a) => {
                        for (s, d) in &data {
                            protocols.push(("game", *s, sender_symbols(a, &pixels(d))?));
                        }
                    }
                    TrainedModel::Simclr(sc) => {
                        for (s, d) in &data {
                            protocols.push(("simclr-disc", *s, simclr_disc_table(sc, &pixels(d))?.symbols));
                        }
                        let k = cfg.analysis.kmeans_k.unwrap_or(sc.config.channel.vocab_size);
                        let train_h = encoder_features(&m.model, &pixels(&splits.train))?;
                        let km = kmeans(&train_h, k, &cfg.analysis.kmeans, cfg.seed)?;
                        for (s, d) in &data {
                            protocols.push(("simclr-kmeans", *s, km.predict(&encoder_features(&m.model, &pixels(d))?)));
                        }
                    }
                }
                for (source, split, symbols) in protocols {
                    let records = records_for(splits.get(split), &symbols)?;
                    let csv_path = run.dir.join(format!("records-{}-{}-{}.csv", m.file.trim_end_matches(".ckpt"), source, split.name()));
                    write_records_csv(&records, &csv_path)?;
                    let report = analyze(&records, &splits.taxonomy, &acfg)?;
                    entries.push(AnalysisEntry { variant: m.label.clone(), source: source.into(), split: Some(split.name().into()), report });
                }
            }
        }
    }
    write_output(&run, "analysis.json", "analyze", &entries)?;
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub variant: String,
    /// `trained` or `random-init`.
    pub encoder: String,
    pub classes: usize,
    pub in_distribution: ProbeResult,
    pub transfer: ProbeResult,
}

/// Probe on `train` features, scored on `test` features, with classes
/// indexed by position in `leaves`.
fn probe_split(model: &TrainedModel, train: &Dataset, test: &Dataset, leaves: &[NodeId], cfg: &RunConfig) -> Result<ProbeResult> {
    let label = |d: &Dataset| -> Result<Vec<usize>> {
        d.samples
            .iter()
            .map(|s| s.category.and_then(|c| leaves.iter().position(|&l| l == c)).ok_or_else(|| CliError::Config("probe image outside the probe classes".into())))
            .collect()
    };
    let (ytr, yte) = (label(train)?, label(test)?);
    let xtr = encoder_features(model, &pixels(train))?;
    let xte = encoder_features(model, &pixels(test))?;
    let probe = train_linear_probe(&xtr, &ytr, leaves.len(), &cfg.probe_config())?;
    Ok(evaluate_probe(&probe, &xte, &yte)?)
}

/// Linear probes on frozen Sender-encoder features: in-distribution
/// (train → val categories of the run's world) and transfer (the same
/// categories re-rendered with `probe.transfer_render`).
pub fn cmd_probe(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<ProbeEntry>> {
    let run = Run::open(cfg)?;
    let splits = run.splits()?;
    let d = &cfg.data;
    let shifted = make_splits(&d.taxonomy, &d.counts, &cfg.probe.transfer_render, d.seed)?;
    let leaves = splits.manifest.train_categories.clone();
    let mut entries = Vec::new();
    for m in load_models(&run, checkpoint)? {
        let mut encoders = vec![("trained", m.model)];
        if cfg.probe.random_init_baseline {
            encoders.push(("random-init", init_model(&m.train)?));
        }
        for (kind, model) in &encoders {
            entries.push(ProbeEntry {
                variant: m.label.clone(),
                encoder: kind.to_string(),
                classes: leaves.len(),
                in_distribution: probe_split(model, &splits.train, &splits.val, &leaves, cfg)?,
                transfer: probe_split(model, &shifted.train, &shifted.val, &leaves, cfg)?,
            });
        }
    }
    write_output(&run, "probe.json", "probe", &entries)?;
    Ok(entries)
}

/// Everything one pipeline pass reports.
#[derive(Clone, Debug)]
pub struct PipelineResults {
    pub train: Vec<TrainedVariant>,
    pub eval: Vec<EvalEntry>,
    pub analysis: Vec<AnalysisEntry>,
    pub probe: Vec<ProbeEntry>,
}

impl PipelineResults {
    /// Flat `variant/metric` map of every reported number.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for t in &self.train {
            m.insert(format!("{}/train.final_loss", t.variant), t.final_loss);
            m.insert(format!("{}/train.final_acc", t.variant), t.final_acc);
        }
        for e in &self.eval {
            for (split, acc) in &e.accuracy {
                m.insert(format!("{}/eval.{split}", e.variant), *acc);
            }
        }
        for a in &self.analysis {
            let key = format!("{}/{}.{}", a.variant, a.source, a.split.as_deref().unwrap_or("all"));
            let r = &a.report;
            m.insert(format!("{key}.protocol_size"), r.protocol_size as f64);
            m.insert(format!("{key}.nmi"), r.nmi);
            if let Some(w) = r.wnsim {
                m.insert(format!("{key}.wnsim"), w);
            }
            if let Some(p) = r.nmi_test.p_value {
                m.insert(format!("{key}.nmi_p"), p);
            }
            if let Some(p) = r.wnsim_test.p_value {
                m.insert(format!("{key}.wnsim_p"), p);
            }
        }
        for p in &self.probe {
            m.insert(format!("{}/probe.{}.in_distribution", p.variant, p.encoder), p.in_distribution.top1);
            m.insert(format!("{}/probe.{}.transfer", p.variant, p.encoder), p.transfer.top1);
        }
        m
    }
}

/// Train, eval, analyze and probe in sequence.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineResults> {
    Ok(PipelineResults {
        train: cmd_train(cfg)?,
        eval: cmd_eval(cfg, None)?,
        analysis: cmd_analyze(cfg, &AnalyzeInput::Checkpoints(None))?,
        probe: cmd_probe(cfg, None)?,
    })
}

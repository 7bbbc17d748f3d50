//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Set `REFGAME_ACCEPTANCE_DIR` to keep the run outputs in that directory.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use autodiff::{grad_check, grad_check_params, GradCheck, Graph, ParamId, Rng, Tensor, Var};
use refgame_cli::commands::{AnalysisEntry, EvalEntry, ProbeEntry, TrainedVariant};
use refgame_cli::config::{RunConfig, Variant};
use refgame_cli::{cmd_analyze, cmd_eval, cmd_probe, cmd_seeds, cmd_train, AnalyzeInput};
use refgame_core::agents::{AgentsConfig, Architecture, ChannelConfig, EncoderConfig, GameAgents, SimClr};
use refgame_core::analysis::{normalized_mutual_information, permutation_test, wnsim, ProtocolRecord, Statistic, WnSim};
use refgame_core::channel::{gumbel_softmax_rows, Noise};
use refgame_core::game::{assemble_batch, game_loss, ntxent_loss, simclr_loss};
use shapeworld::{build_taxonomy, ImageSample, NodeId, Split, TaxonomyConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn run_check<'a>(f: Box<dyn FnOnce() -> Result<Verdict, String> + 'a>) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => verdict(false, format!("error: {e}")),
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> autodiff::Result<Var> {
    let c = g.constant(Tensor::randn(g.shape(y), 1.0, &mut Rng::seed_from(seed)));
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

type OpCheck = (&'static str, Box<dyn Fn(&mut Graph, Var) -> autodiff::Result<Var>>, Tensor);

fn op_checks() -> Vec<OpCheck> {
    let mut rng = Rng::seed_from(2024);
    let mut r = |shape: &[usize], sd: f64| Tensor::randn(shape, sd, &mut rng);
    let (w, x, other, bias) = (r(&[4, 3], 1.0), r(&[5, 4], 1.0), r(&[5, 3], 1.0), r(&[3], 1.0));
    let (img, kern, cbias) = (r(&[2, 2, 6, 6], 1.0), r(&[3, 2, 3, 3], 0.5), r(&[3], 0.5));
    let (bn_x, bn_x4) = (r(&[6, 3], 1.3), r(&[4, 3, 2, 2], 1.3));
    let gamma = Tensor::new(&[3], vec![0.7, 1.4, -0.9]).unwrap();
    let anchor = r(&[2, 3], 1.0);
    let mut v: Vec<OpCheck> = Vec::new();
    let (w1, x1) = (w.clone(), x.clone());
    v.push(("matmul (lhs)", Box::new(move |g, a| { let b = g.constant(w1.clone()); let y = g.matmul(a, b)?; weighted_sum(g, y, 1) }), x.clone()));
    v.push(("matmul (rhs)", Box::new(move |g, b| { let a = g.constant(x1.clone()); let y = g.matmul(a, b)?; weighted_sum(g, y, 1) }), w.clone()));
    let x2 = r(&[5, 3], 1.0);
    v.push(("add_bias", Box::new(move |g, b| { let a = g.constant(x2.clone()); let y = g.add_bias(a, b)?; weighted_sum(g, y, 2) }), bias.clone()));
    let o = other.clone();
    v.push(("mul / add / scale", Box::new(move |g, a| { let c = g.constant(o.clone()); let y = g.mul(a, c)?; let z = g.add(y, a)?; let z = g.scale(z, -1.7); weighted_sum(g, z, 3) }), r(&[5, 3], 1.0)));
    v.push(("relu", Box::new(|g, a| { let y = g.relu(a); weighted_sum(g, y, 4) }), r(&[5, 3], 1.0)));
    for axis in [0, 1] {
        v.push(("softmax", Box::new(move |g, a| { let y = g.softmax(a, axis)?; weighted_sum(g, y, 5) }), r(&[5, 3], 1.0)));
        v.push(("log_softmax", Box::new(move |g, a| { let y = g.log_softmax(a, axis)?; weighted_sum(g, y, 6) }), r(&[5, 3], 1.0)));
    }
    let o = other.clone();
    v.push(("cosine_matrix (lhs)", Box::new(move |g, a| { let b = g.constant(o.clone()); let y = g.cosine_matrix(a, b, 1e-8)?; weighted_sum(g, y, 7) }), r(&[4, 3], 1.0)));
    v.push(("cosine_matrix (rhs)", Box::new(move |g, b| { let a = g.constant(anchor.clone()); let y = g.cosine_matrix(a, b, 1e-8)?; weighted_sum(g, y, 7) }), r(&[5, 3], 1.0)));
    let u = r(&[6], 1.0);
    v.push(("cosine_similarity", Box::new(move |g, a| { let b = g.constant(u.clone()); g.cosine_similarity(a, b, 1e-8) }), r(&[6], 1.0)));
    v.push(("cross_entropy", Box::new(|g, a| g.cross_entropy(a, &[1, 0, 2, 2, 1])), r(&[5, 3], 1.0)));
    v.push(("cross_entropy_excluding_self", Box::new(|g, a| g.cross_entropy_excluding_self(a, &[1, 0, 3, 2])), r(&[4, 4], 2.0)));
    v.push(("mean", Box::new(|g, a| Ok(g.mean(a))), r(&[5, 3], 1.0)));
    v.push(("reshape / flatten", Box::new(|g, a| { let y = g.reshape(a, &[3, 2, 2])?; let f = g.flatten(y)?; weighted_sum(g, f, 8) }), r(&[2, 6], 1.0)));
    for xs in [bn_x, bn_x4] {
        let (g1, b1) = (gamma.clone(), bias.clone());
        v.push(("batch_norm train (input)", Box::new(move |g, x| { let gv = g.constant(g1.clone()); let bv = g.constant(b1.clone()); let (y, _) = g.batch_norm_train(x, gv, bv, 1e-5)?; weighted_sum(g, y, 9) }), xs.clone()));
        let (x2, b2) = (xs.clone(), bias.clone());
        v.push(("batch_norm train (gamma)", Box::new(move |g, gm| { let xv = g.constant(x2.clone()); let bv = g.constant(b2.clone()); let (y, _) = g.batch_norm_train(xv, gm, bv, 1e-5)?; weighted_sum(g, y, 9) }), gamma.clone()));
        let (x3, g3) = (xs.clone(), gamma.clone());
        v.push(("batch_norm train (beta)", Box::new(move |g, bt| { let xv = g.constant(x3.clone()); let gv = g.constant(g3.clone()); let (y, _) = g.batch_norm_train(xv, gv, bt, 1e-5)?; weighted_sum(g, y, 9) }), bias.clone()));
        let (g4, b4) = (gamma.clone(), bias.clone());
        v.push(("batch_norm eval", Box::new(move |g, x| { let gv = g.constant(g4.clone()); let bv = g.constant(b4.clone()); let y = g.batch_norm_eval(x, gv, bv, &[0.3, -0.1, 0.0], &[2.0, 0.5, 1.0], 1e-5)?; weighted_sum(g, y, 10) }), xs));
    }
    for (stride, pad) in [(1, 1), (2, 0)] {
        let (k, b) = (kern.clone(), cbias.clone());
        v.push(("conv2d (input)", Box::new(move |g, x| { let kv = g.constant(k.clone()); let bv = g.constant(b.clone()); let y = g.conv2d(x, kv, Some(bv), stride, pad)?; weighted_sum(g, y, 11) }), img.clone()));
        let (i, b) = (img.clone(), cbias.clone());
        v.push(("conv2d (kernel)", Box::new(move |g, k| { let xv = g.constant(i.clone()); let bv = g.constant(b.clone()); let y = g.conv2d(xv, k, Some(bv), stride, pad)?; weighted_sum(g, y, 11) }), kern.clone()));
        let (i, k) = (img.clone(), kern.clone());
        v.push(("conv2d (bias)", Box::new(move |g, b| { let xv = g.constant(i.clone()); let kv = g.constant(k.clone()); let y = g.conv2d(xv, kv, Some(b), stride, pad)?; weighted_sum(g, y, 11) }), cbias.clone()));
    }
    v.push(("max_pool2d", Box::new(|g, x| { let y = g.max_pool2d(x, 2)?; weighted_sum(g, y, 12) }), img.clone()));
    v.push((
        "gumbel-softmax relaxation",
        Box::new(|g, x| {
            let mut noise = Rng::seed_from(13);
            let y = gumbel_softmax_rows(g, x, 5.0, Noise::Sample(&mut noise), false).map_err(|e| autodiff::Error::Checkpoint(e.to_string()))?;
            weighted_sum(g, y, 13)
        }),
        r(&[3, 6], 2.0),
    ));
    v.push((
        "nt-xent",
        Box::new(|g, z| ntxent_loss(g, z, 0.1).map_err(|e| autodiff::Error::Checkpoint(e.to_string()))),
        r(&[6, 5], 1.0),
    ));
    v
}

fn tiny_agents(arch: Architecture, shared: bool) -> AgentsConfig {
    AgentsConfig {
        encoder: EncoderConfig { architecture: arch, channels: vec![2, 3], hidden: vec![6], output_dim: 8, image_size: 8 },
        channel: ChannelConfig { vocab_size: 5, ..ChannelConfig::default() },
        hidden_dim: 6,
        embed_dim: 4,
        shared,
    }
}

fn random_samples(n: usize, size: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = Rng::seed_from(seed);
    (0..n).map(|i| ImageSample { pixels: Tensor::uniform(&[3, size, size], 1.0, &mut rng), category: None, sample_id: i as u64, split: Split::Train }).collect()
}

fn trainable(store: &autodiff::ParamStore) -> Vec<ParamId> {
    store.ids().filter(|&id| store.get(id).requires_grad).collect()
}

fn end_to_end_errors() -> Result<Vec<(String, f64)>, String> {
    let samples = random_samples(4, 8, 3);
    let refs: Vec<&ImageSample> = samples.iter().collect();
    let batch = assemble_batch(&refs, Some(&shapeworld::AugmentConfig::default()), &mut Rng::seed_from(2)).map_err(s)?;
    let mut out = Vec::new();
    for (arch, shared) in [(Architecture::SmallCnn, false), (Architecture::SmallCnn, true), (Architecture::Mlp, false)] {
        let agents = GameAgents::new(&tiny_agents(arch, shared), &mut Rng::seed_from(11)).map_err(s)?;
        let f = |g: &mut Graph, store: &autodiff::ParamStore| {
            let mut a = agents.clone();
            a.store = store.clone();
            let mut noise = Rng::seed_from(77);
            Ok(game_loss(g, &a, &batch, Noise::Sample(&mut noise)).map_err(|e| autodiff::Error::Checkpoint(e.to_string()))?.loss)
        };
        let (err, _) = grad_check_params(&agents.store, &trainable(&agents.store), f, 6, &mut Rng::seed_from(5), GradCheck::default()).map_err(s)?;
        out.push((format!("game loss {arch:?}{}", if shared { " shared" } else { "" }), err));
    }
    let model = SimClr::new(&tiny_agents(Architecture::SmallCnn, true), &mut Rng::seed_from(12)).map_err(s)?;
    let f = |g: &mut Graph, store: &autodiff::ParamStore| {
        let mut m = model.clone();
        m.store = store.clone();
        Ok(simclr_loss(g, &m, &batch).map_err(|e| autodiff::Error::Checkpoint(e.to_string()))?.loss)
    };
    let (err, _) = grad_check_params(&model.store, &trainable(&model.store), f, 6, &mut Rng::seed_from(6), GradCheck::default()).map_err(s)?;
    out.push(("simclr loss".into(), err));
    Ok(out)
}

fn criterion_gradients() -> Result<Verdict, String> {
    let start = Instant::now();
    let mut worst_op = ("", 0.0f64);
    let mut failures = Vec::new();
    for (name, f, x) in op_checks() {
        let err = grad_check(f, &x, GradCheck::default()).map_err(s)?;
        if err > worst_op.1 {
            worst_op = (name, err);
        }
        if !(err < 1e-5) {
            failures.push(format!("{name} {err:.1e}"));
        }
    }
    let e2e = end_to_end_errors()?;
    for (name, err) in &e2e {
        if !(*err < 1e-4) {
            failures.push(format!("{name} {err:.1e}"));
        }
    }
    let worst_e2e = e2e.iter().map(|e| e.1).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    Ok(verdict(
        pass,
        format!(
            "max per-op rel err {:.1e} ({}), max end-to-end {:.1e}, {:.1}s{}",
            worst_op.1,
            worst_op.0,
            worst_e2e,
            secs,
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    ))
}

// ------------------------------------------------------------------ oracles

fn recs(pairs: &[(usize, usize)]) -> Vec<ProtocolRecord> {
    pairs.iter().enumerate().map(|(i, &(c, s))| ProtocolRecord { sample_id: i as u64, category_id: c, symbol: s }).collect()
}

/// nMI straight from joint frequencies.
fn brute_force_nmi(pairs: &[(usize, usize)]) -> f64 {
    let n = pairs.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pc: HashMap<usize, f64> = HashMap::new();
    let mut ps: HashMap<usize, f64> = HashMap::new();
    for &(c, s) in pairs {
        *joint.entry((c, s)).or_default() += 1.0 / n;
        *pc.entry(c).or_default() += 1.0 / n;
        *ps.entry(s).or_default() += 1.0 / n;
    }
    let h = |ps: Vec<f64>| -> f64 { ps.iter().map(|p| -p * p.ln()).sum() };
    let (hc, hs, hj) = (h(pc.into_values().collect()), h(ps.into_values().collect()), h(joint.into_values().collect()));
    (hc + hs - hj) / ((hc + hs) / 2.0)
}

fn criterion_oracles() -> Result<Verdict, String> {
    // Categories (a, a, b, b) with symbols (0, 0, 0, 1).
    let pairs = [(0, 0), (0, 0), (1, 0), (1, 1)];
    let nmi = normalized_mutual_information(&recs(&pairs)).map_err(s)?;
    let nmi_ok = (nmi - brute_force_nmi(&pairs)).abs() <= 1e-9;

    let t = build_taxonomy(&TaxonomyConfig::default()).map_err(s)?;
    let leaves: Vec<NodeId> = t.train_leaves();
    let (x, sib) = leaves
        .iter()
        .flat_map(|&a| leaves.iter().map(move |&b| (a, b)))
        .find(|&(a, b)| a != b && t.node(a).unwrap().parent == t.node(b).unwrap().parent)
        .ok_or("no sibling leaves")?;
    let w = match wnsim(&recs(&[(x.0, 2), (x.0, 2), (sib.0, 2)]), &t).map_err(s)? {
        WnSim::Value { value, .. } => value,
        WnSim::NoPairs => f64::NAN,
    };
    let w_ok = (w - 5.0 / 9.0).abs() <= 1e-12;

    let mut g = Graph::new();
    let z = g.constant(Tensor::new(&[4, 3], [0.3, -1.0, 2.0].repeat(4)).map_err(s)?);
    let l = ntxent_loss(&mut g, z, 0.1).map_err(s)?;
    let nt = g.value(l).item();
    let nt_ok = (nt - 3f64.ln()).abs() <= 1e-9;

    let bij: Vec<(usize, usize)> = (0..200).map(|i| (i % 10, i % 10)).collect();
    let p = permutation_test(&recs(&bij), Statistic::Nmi, None, 999, 0.01, 1).map_err(s)?.p_value;
    let p_ok = p == Some(0.001);

    Ok(verdict(
        nmi_ok && w_ok && nt_ok && p_ok,
        format!("nMI {nmi:.12} vs brute force; WNsim {w:.15} vs 5/9; NT-Xent {nt:.12} vs ln 3; p {p:?} vs 0.001"),
    ))
}

// ------------------------------------------------------------- full run

struct MainRun {
    train: Vec<TrainedVariant>,
    eval: Vec<EvalEntry>,
    analysis: Vec<AnalysisEntry>,
    probe: Vec<ProbeEntry>,
    dir: PathBuf,
}

const GAME: &str = "+aug-shared";
const DEGENERATE: &str = "-aug+shared";

fn main_config(out: &Path) -> RunConfig {
    RunConfig {
        run_id: "acceptance".into(),
        out_dir: out.to_path_buf(),
        variants: vec![Variant::game(true, false), Variant::game(false, true), Variant::simclr()],
        ..RunConfig::default()
    }
}

fn main_run(out: &Path) -> Result<MainRun, String> {
    let cfg = main_config(out);
    eprintln!("training {} variants for {} epochs each", cfg.variants.len(), cfg.train.epochs);
    let train = cmd_train(&cfg).map_err(s)?;
    for t in &train {
        eprintln!("  {}: final loss {:.4}, acc {:.4}, {:.0}s", t.variant, t.final_loss, t.final_acc, t.seconds);
    }
    let eval = cmd_eval(&cfg, None).map_err(s)?;
    let analysis = cmd_analyze(&cfg, &AnalyzeInput::Checkpoints(None)).map_err(s)?;
    let probe = cmd_probe(&cfg, None).map_err(s)?;
    Ok(MainRun { train, eval, analysis, probe, dir: cfg.run_dir() })
}

impl MainRun {
    fn eval(&self, variant: &str) -> Result<&EvalEntry, String> {
        self.eval.iter().find(|e| e.variant == variant).ok_or(format!("no eval for {variant}"))
    }

    fn accuracy(&self, variant: &str, split: &str) -> Result<f64, String> {
        self.eval(variant)?.accuracy.get(split).copied().ok_or(format!("no {split} accuracy for {variant}"))
    }

    fn analysis(&self, variant: &str, source: &str, split: &str) -> Result<&AnalysisEntry, String> {
        self.analysis
            .iter()
            .find(|a| a.variant == variant && a.source == source && a.split.as_deref() == Some(split))
            .ok_or(format!("no {source} analysis for {variant} on {split}"))
    }

    fn probe(&self, variant: &str, encoder: &str) -> Result<&ProbeEntry, String> {
        self.probe.iter().find(|p| p.variant == variant && p.encoder == encoder).ok_or(format!("no {encoder} probe for {variant}"))
    }
}

fn criterion_trainability(r: &MainRun) -> Result<Verdict, String> {
    let e = r.eval(GAME)?;
    let val = r.accuracy(GAME, "val")?;
    let secs = r.train.iter().find(|t| t.variant == GAME).ok_or("no training record")?.seconds;
    Ok(verdict(
        val >= 0.60 && secs <= 1800.0,
        format!("val accuracy {val:.4} ({:.1}x chance {:.5}, threshold 0.60), training {:.1} min (limit 30)", val / e.chance, e.chance, secs / 60.0),
    ))
}

fn criterion_ood(r: &MainRun) -> Result<Verdict, String> {
    let e = r.eval(GAME)?;
    let ood = r.accuracy(GAME, "ood")?;
    Ok(verdict(ood >= 10.0 * e.chance, format!("OOD accuracy {ood:.4} = {:.1}x chance (threshold 10x)", ood / e.chance)))
}

fn criterion_blob(r: &MainRun) -> Result<Verdict, String> {
    let e = r.eval(GAME)?;
    let blob = r.accuracy(GAME, "blob")?;
    Ok(verdict(blob <= 2.0 * e.chance, format!("blob accuracy {blob:.4} over {} games = {:.2}x chance (limit 2x)", e.games, blob / e.chance)))
}

fn criterion_degenerate(r: &MainRun) -> Result<Verdict, String> {
    let aug = r.accuracy(GAME, "blob")?;
    let deg = r.accuracy(DEGENERATE, "blob")?;
    Ok(verdict(deg > aug, format!("blob accuracy {DEGENERATE} {deg:.4} vs {GAME} {aug:.4}")))
}

fn criterion_significance(r: &MainRun) -> Result<Verdict, String> {
    let a = r.analysis(GAME, "game", "val")?;
    let rep = &a.report;
    let trained_ok = rep.nmi_test.significant && rep.wnsim_test.significant;
    // Random-symbol control on the same images and categories.
    let path = r.dir.join("records-aug-noshared-game-val.csv");
    let records = refgame_core::analysis::read_records_csv(&path).map_err(s)?;
    let vocab = RunConfig::default().train.agents.channel.vocab_size;
    let taxonomy = build_taxonomy(&RunConfig::default().data.taxonomy).map_err(s)?;
    let mut non_significant = 0;
    for trial in 0..100u64 {
        let mut rng = Rng::stream(4242, &[trial]);
        let control: Vec<ProtocolRecord> = records.iter().map(|x| ProtocolRecord { symbol: rng.below(vocab), ..*x }).collect();
        let n = permutation_test(&control, Statistic::Nmi, None, 999, 0.01, 10_000 + trial).map_err(s)?;
        let w = permutation_test(&control, Statistic::Wnsim, Some(&taxonomy), 999, 0.01, 20_000 + trial).map_err(s)?;
        non_significant += (!n.significant && !w.significant) as usize;
    }
    Ok(verdict(
        trained_ok && non_significant >= 95,
        format!(
            "trained: nMI {:.3} (p {:?}), WNsim {:.3} (p {:?}); random control non-significant in {non_significant}/100 trials",
            rep.nmi,
            rep.nmi_test.p_value,
            rep.wnsim.unwrap_or(f64::NAN),
            rep.wnsim_test.p_value
        ),
    ))
}

fn criterion_baselines(r: &MainRun) -> Result<Verdict, String> {
    let t = r.train.iter().find(|t| t.variant == "simclr").ok_or("simclr was not trained")?;
    let trains = t.final_loss.is_finite() && t.final_loss < t.first_loss;
    let e = r.eval("simclr")?;
    let disc = r.accuracy("simclr", "val")?;
    let km = r.analysis("simclr", "simclr-kmeans", "val")?.report.nmi;
    let dn = r.analysis("simclr", "simclr-disc", "val")?.report.nmi;
    let game = r.analysis(GAME, "game", "val")?.report.nmi;
    Ok(verdict(
        trains && disc >= 3.0 * e.chance,
        format!(
            "NT-Xent {:.4} -> {:.4}; SimCLR_disc val accuracy {disc:.4} = {:.1}x chance (threshold 3x); nMI game {game:.3} | SimCLR_disc {dn:.3} | SimCLR_kmeans {km:.3}",
            t.first_loss,
            t.final_loss,
            disc / e.chance
        ),
    ))
}

fn criterion_probe(r: &MainRun) -> Result<Verdict, String> {
    let trained = r.probe(GAME, "trained")?;
    let random = r.probe(GAME, "random-init")?;
    let gain = trained.in_distribution.top1 - random.in_distribution.top1;
    Ok(verdict(
        gain >= 0.10,
        format!(
            "in-distribution top-1 trained {:.4} vs random-init {:.4} (+{:.1} points, threshold 10); transfer {:.4} vs {:.4}",
            trained.in_distribution.top1,
            random.in_distribution.top1,
            gain * 100.0,
            trained.transfer.top1,
            random.transfer.top1
        ),
    ))
}

// ------------------------------------------------------------ seed sweep

/// Bytes of every JSON and JSONL report under `dir`, excluding wall-clock
/// timings.
fn report_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|x| x.to_str()), Some("json" | "jsonl" | "csv" | "txt" | "ckpt")) && p.file_name() != Some("timing.json".as_ref()) {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SEED_EPOCHS: usize = 2;

fn criterion_seeds(out: &Path) -> Result<Verdict, String> {
    let mut cfg = RunConfig { run_id: "seeds".into(), out_dir: out.to_path_buf(), seeds: vec![1, 2, 3], ..RunConfig::default() };
    cfg.train.epochs = SEED_EPOCHS;
    let first = cmd_seeds(&cfg, 1).map_err(s)?;
    let snapshot = report_bytes(&cfg.run_dir());
    let second = cmd_seeds(&cfg, 1).map_err(s)?;
    let again = report_bytes(&cfg.run_dir());
    let identical = first == second && snapshot == again && !snapshot.is_empty();
    let acc = first.rows.iter().find(|r| r.metric == format!("{GAME}/eval.val")).ok_or("no game accuracy row")?;
    let table_ok = first.rows.iter().all(|r| r.min <= r.avg && r.avg <= r.max && r.sd >= 0.0 && r.values.len() == 3);
    eprint!("{}", refgame_cli::summary::render_table(&first.rows));
    Ok(verdict(
        first.completed == [1, 2, 3] && identical && table_ok,
        format!(
            "3 seeds x {SEED_EPOCHS} epochs: val accuracy avg {:.4} sd {:.4} min {:.4} max {:.4}; {} metrics summarised; rerun byte-identical over {} files: {identical}",
            acc.avg,
            acc.sd,
            acc.min,
            acc.max,
            first.rows.len(),
            snapshot.len()
        ),
    ))
}

fn main() {
    let keep = std::env::var_os("REFGAME_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let out = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&out).expect("output directory");
    let started = Instant::now();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |id: usize, name: &'static str, v: Verdict| {
        println!("criterion {id:>2} [{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((id, name, v));
    };

    record(1, "gradient correctness", run_check(Box::new(criterion_gradients)));
    record(2, "metric oracles", run_check(Box::new(criterion_oracles)));

    let run = catch_unwind(AssertUnwindSafe(|| main_run(&out))).unwrap_or_else(|_| Err("training pipeline panicked".into()));
    let checks: [(usize, &'static str, fn(&MainRun) -> Result<Verdict, String>); 7] = [
        (3, "trainability", criterion_trainability),
        (4, "OOD transfer", criterion_ood),
        (5, "blob sanity", criterion_blob),
        (6, "degenerate-protocol trend", criterion_degenerate),
        (7, "interpretability significance", criterion_significance),
        (8, "baselines end-to-end", criterion_baselines),
        (9, "probe usefulness", criterion_probe),
    ];
    for (id, name, f) in checks {
        let v = match &run {
            Ok(r) => run_check(Box::new(move || f(r))),
            Err(e) => verdict(false, format!("pipeline failed: {e}")),
        };
        record(id, name, v);
    }
    let seeds_out = out.clone();
    record(10, "seed stability", run_check(Box::new(move || criterion_seeds(&seeds_out))));

    let passed = verdicts.iter().filter(|v| v.2.pass).count();
    println!("acceptance: {passed}/{} criteria passed in {:.1} min", verdicts.len(), started.elapsed().as_secs_f64() / 60.0);
    if passed != verdicts.len() {
        std::process::exit(1);
    }
}

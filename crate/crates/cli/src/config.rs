//! Run configuration: one JSON document covering every stage, with command
//! line overrides applied on top.

use std::path::{Path, PathBuf};

use refgame_core::agents::AgentsConfig;
use refgame_core::analysis::{AnalysisConfig, KMeansConfig};
use refgame_core::probe::ProbeConfig;
use refgame_core::train::{ModelKind, TrainConfig};
use serde::{Deserialize, Serialize};
use shapeworld::{AugmentConfig, RenderConfig, Split, SplitCounts, TaxonomyConfig};

use crate::error::{config_err, io_err, Result};

/// One row of the variant matrix. Deserializes from either the object form
/// or a name such as `"+aug-shared"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VariantRepr")]
pub struct Variant {
    pub model: ModelKind,
    pub augmentations: bool,
    pub shared: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VariantRepr {
    Name(String),
    Fields(VariantFields),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VariantFields {
    model: ModelKind,
    augmentations: bool,
    shared: bool,
}

impl TryFrom<VariantRepr> for Variant {
    type Error = String;

    fn try_from(r: VariantRepr) -> std::result::Result<Self, String> {
        match r {
            VariantRepr::Name(s) => Variant::parse(&s).map_err(|e| e.to_string()),
            VariantRepr::Fields(f) => Ok(Variant { model: f.model, augmentations: f.augmentations, shared: f.shared }),
        }
    }
}

impl Variant {
    pub fn game(augmentations: bool, shared: bool) -> Self {
        Self { model: ModelKind::Game, augmentations, shared }
    }

    pub fn simclr() -> Self {
        Self { model: ModelKind::Simclr, augmentations: true, shared: true }
    }

    /// `+aug-shared`, `-aug+shared`, ... or `simclr`.
    pub fn label(&self) -> String {
        self.train_config(&TrainSettings::default(), 0).variant_label()
    }

    /// File-name form of the label, e.g. `aug-noshared`.
    pub fn slug(&self) -> String {
        match self.model {
            ModelKind::Simclr => "simclr".into(),
            ModelKind::Game => format!("{}-{}", if self.augmentations { "aug" } else { "noaug" }, if self.shared { "shared" } else { "noshared" }),
        }
    }

    /// Parses `simclr` or a pair of signed flags such as `+aug -shared` or
    /// `-augmentations+shared`.
    pub fn parse(text: &str) -> Result<Self> {
        let s: String = text.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
        if s == "simclr" {
            return Ok(Self::simclr());
        }
        let (mut aug, mut shared) = (None, None);
        let mut rest = s.as_str();
        while !rest.is_empty() {
            let on = match rest.as_bytes()[0] {
                b'+' => true,
                b'-' => false,
                _ => return config_err(format!("variant {text:?}: expected '+' or '-' before each flag")),
            };
            rest = &rest[1..];
            let end = rest.find(['+', '-']).unwrap_or(rest.len());
            let slot = match &rest[..end] {
                "aug" | "augmentation" | "augmentations" => &mut aug,
                "shared" => &mut shared,
                other => return config_err(format!("variant {text:?}: unknown flag {other:?}")),
            };
            if slot.replace(on).is_some() {
                return config_err(format!("variant {text:?}: flag given twice"));
            }
            rest = &rest[end..];
        }
        match (aug, shared) {
            (Some(a), Some(s)) => Ok(Self::game(a, s)),
            _ => config_err(format!("variant {text:?}: both ±aug and ±shared are required")),
        }
    }

    /// Comma-separated list of variants.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.split(',').map(Self::parse).collect()
    }

    pub fn train_config(&self, train: &TrainSettings, seed: u64) -> TrainConfig {
        TrainConfig {
            model: self.model,
            augmentations: self.augmentations,
            shared: self.shared,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            seed,
            agents: train.agents.clone(),
            augment: train.augment.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset seed; independent of the run seed so that seed sweeps share
    /// one dataset.
    pub seed: u64,
    pub taxonomy: TaxonomyConfig,
    pub render: RenderConfig,
    pub counts: SplitCounts,
    /// Also write every split's pixels to `data/<split>.ckpt`.
    pub materialize: bool,
    /// Generate the dataset when the run has no manifest yet.
    pub generate: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            taxonomy: TaxonomyConfig::default(),
            render: RenderConfig::default(),
            counts: SplitCounts::default(),
            materialize: false,
            generate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub agents: AgentsConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, batch_size: t.batch_size, learning_rate: t.learning_rate, agents: t.agents, augment: t.augment }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Candidates per game.
    pub n: usize,
    pub games: usize,
    pub splits: Vec<Split>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { n: 32, games: 1024, splits: vec![Split::Val, Split::Ood, Split::Blob] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub permutations: usize,
    pub alpha: f64,
    pub splits: Vec<Split>,
    /// k-means cluster count for the SimCLR baseline; `None` uses |V|.
    pub kmeans_k: Option<usize>,
    pub kmeans: KMeansConfig,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        let a = AnalysisConfig::default();
        Self { permutations: a.permutations, alpha: a.alpha, splits: vec![Split::Val, Split::Ood], kmeans_k: None, kmeans: KMeansConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub standardize: bool,
    /// Rendering of the regenerated world used by the transfer probe.
    pub transfer_render: RenderConfig,
    /// Also probe a freshly initialised encoder of each variant.
    pub random_init_baseline: bool,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
            momentum: p.momentum,
            standardize: p.standardize,
            transfer_render: RenderConfig { hue_shift_deg: 25.0, background_shift: 0.15, ..RenderConfig::default() },
            random_init_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    /// Seeds training, game sampling, permutations and probes.
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainSettings,
    pub variants: Vec<Variant>,
    pub eval: EvalSettings,
    pub analysis: AnalysisSettings,
    pub probe: ProbeSettings,
    /// Seed list for `refgame seeds`.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            out_dir: "out".into(),
            seed: 1,
            data: DataConfig::default(),
            train: TrainSettings::default(),
            variants: vec![Variant::game(true, false)],
            eval: EvalSettings::default(),
            analysis: AnalysisSettings::default(),
            probe: ProbeSettings::default(),
            seeds: vec![1, 2, 3],
        }
    }
}

/// Command line values that replace file values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variants: Option<Vec<Variant>>,
    pub out_dir: Option<PathBuf>,
    pub run_id: Option<String>,
    pub epochs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| crate::error::CliError::Config(format!("invalid config: {e}")))
    }

    /// Reads `path` (or starts from the defaults), applies `overrides` and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_json(&std::fs::read_to_string(p).map_err(io_err(p))?)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(v) = &o.variants {
            self.variants = v.clone();
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(r) = &o.run_id {
            self.run_id = r.clone();
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id_ok = !self.run_id.is_empty()
            && !self.run_id.starts_with('.')
            && self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
        if !id_ok {
            return config_err(format!("run id {:?} must be a plain name of letters, digits, '.', '_' or '-'", self.run_id));
        }
        if self.variants.is_empty() {
            return config_err("the variant matrix is empty");
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return config_err(format!("variant {} listed twice", v.label()));
            }
            if v.model == ModelKind::Simclr && !v.augmentations {
                return config_err("simclr needs augmentations to form its two views");
            }
            v.train_config(&self.train, self.seed).validate()?;
        }
        if self.train.agents.encoder.image_size != self.data.render.image_size {
            return config_err(format!(
                "encoder image size {} differs from rendered image size {}",
                self.train.agents.encoder.image_size, self.data.render.image_size
            ));
        }
        if self.probe.transfer_render.image_size != self.data.render.image_size {
            return config_err("transfer_render.image_size must equal data.render.image_size");
        }
        if self.eval.n < 2 || self.eval.games == 0 || self.eval.splits.is_empty() {
            return config_err("eval needs n >= 2, at least one game and at least one split");
        }
        if self.analysis.splits.is_empty() {
            return config_err("analysis needs at least one split");
        }
        if self.analysis.splits.contains(&Split::Blob) {
            return config_err("blob images have no category and cannot be analysed");
        }
        if let Some(0) = self.analysis.kmeans_k {
            return config_err("kmeans_k must be positive");
        }
        if self.analysis.permutations < 99 {
            return config_err(format!("{} permutations is below the minimum of 99", self.analysis.permutations));
        }
        if !(self.analysis.alpha > 0.0 && self.analysis.alpha < 1.0) {
            return config_err(format!("alpha {} outside (0, 1)", self.analysis.alpha));
        }
        self.probe_config().validate()?;
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn train_config(&self, v: &Variant) -> TrainConfig {
        v.train_config(&self.train, self.seed)
    }

    pub fn analysis_config(&self) -> AnalysisConfig {
        AnalysisConfig { permutations: self.analysis.permutations, alpha: self.analysis.alpha, seed: self.seed }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
            momentum: p.momentum,
            standardize: p.standardize,
            seed: self.seed,
        }
    }

    /// The settings that determine a run's artifacts; a run id may not be
    /// reused with different values.
    pub fn identity(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "train": self.train,
            "variants": self.variants,
        })
    }
}

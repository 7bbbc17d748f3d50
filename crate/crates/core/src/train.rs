//! Training loops for the communication game and the SimCLR baseline.

use std::time::Instant;

use autodiff::{Adam, AdamConfig, Graph, Rng};
use serde::{Deserialize, Serialize};
use shapeworld::{AugmentConfig, Dataset, ImageSample};

use crate::agents::{AgentsConfig, GameAgents, SimClr};
use crate::channel::Noise;
use crate::error::{config_err, Error, Result};
use crate::game::{assemble_batch, game_loss, simclr_loss, LossOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Game,
    Simclr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub augmentations: bool,
    /// Shared Sender/Receiver encoder; ignored by SimCLR, which always shares.
    pub shared: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub agents: AgentsConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Game,
            augmentations: true,
            shared: false,
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 1,
            agents: AgentsConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return config_err(format!("batch size {} < 2", self.batch_size));
        }
        if self.epochs < 1 {
            return config_err("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return config_err("learning rate must be positive");
        }
        self.agents.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    /// Agent architecture with the variant's sharing flag applied.
    pub fn effective_agents(&self) -> AgentsConfig {
        AgentsConfig { shared: self.shared || self.model == ModelKind::Simclr, ..self.agents.clone() }
    }

    /// Short label such as `+aug-shared` or `simclr`.
    pub fn variant_label(&self) -> String {
        match self.model {
            ModelKind::Simclr => "simclr".into(),
            ModelKind::Game => format!("{}aug{}shared", sign(self.augmentations), sign(self.shared)),
        }
    }
}

fn sign(b: bool) -> &'static str {
    if b {
        "+"
    } else {
        "-"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    /// Wall-clock seconds; excluded from determinism comparisons.
    pub time: f64,
}

#[derive(Clone, Debug)]
pub enum TrainedModel {
    Game(GameAgents),
    Simclr(SimClr),
}

impl TrainedModel {
    pub fn store(&self) -> &autodiff::ParamStore {
        match self {
            TrainedModel::Game(a) => &a.store,
            TrainedModel::Simclr(s) => &s.store,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub metrics: Vec<EpochMetrics>,
}

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_STEP: u64 = 3;

/// Freshly initialised model for `config` (the state before step one).
pub fn init_model(config: &TrainConfig) -> Result<TrainedModel> {
    let mut rng = Rng::stream(config.seed, &[STREAM_INIT]);
    let agents = config.effective_agents();
    Ok(match config.model {
        ModelKind::Game => TrainedModel::Game(GameAgents::new(&agents, &mut rng)?),
        ModelKind::Simclr => TrainedModel::Simclr(SimClr::new(&agents, &mut rng)?),
    })
}

/// One optimiser step on `batch_samples`; returns `(loss, accuracy)`.
pub fn train_step(model: &mut TrainedModel, adam: &mut Adam, batch_samples: &[&ImageSample], config: &TrainConfig, rng: &mut Rng) -> Result<(f64, f64)> {
    let aug = config.augmentations.then_some(&config.augment);
    let batch = assemble_batch(batch_samples, aug, rng)?;
    let mut g = Graph::new();
    let LossOutput { loss, accuracy } = match model {
        TrainedModel::Game(a) => game_loss(&mut g, a, &batch, Noise::Sample(rng))?,
        TrainedModel::Simclr(s) => simclr_loss(&mut g, s, &batch)?,
    };
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let pg = g.param_grads(&grads);
    if pg.entries.iter().any(|(_, d)| d.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence { epoch: 0, step: 0, loss: value, diagnostics: "non-finite gradient".into() });
    }
    let updates = g.take_running_updates();
    let store = match model {
        TrainedModel::Game(a) => &mut a.store,
        TrainedModel::Simclr(s) => &mut s.store,
    };
    adam.step(store, &pg);
    store.apply_running_updates(&updates);
    Ok((value, accuracy))
}

/// Trains on `data`, calling `on_epoch` after every epoch. Each epoch visits
/// a fresh shuffle in full batches (the remainder is dropped).
pub fn train_with<F: FnMut(&EpochMetrics)>(config: &TrainConfig, data: &Dataset, mut on_epoch: F) -> Result<TrainOutput> {
    config.validate()?;
    if data.len() < config.batch_size {
        return config_err(format!("{} training images for batch size {}", data.len(), config.batch_size));
    }
    let mut model = init_model(config)?;
    let mut adam = Adam::new(AdamConfig { lr: config.learning_rate, ..AdamConfig::default() });
    let steps = data.len() / config.batch_size;
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::stream(config.seed, &[STREAM_ORDER, epoch as u64]).shuffle(&mut order);
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for step in 0..steps {
            let idx = &order[step * config.batch_size..(step + 1) * config.batch_size];
            let samples: Vec<&ImageSample> = idx.iter().map(|&i| &data.samples[i]).collect();
            let mut rng = Rng::stream(config.seed, &[STREAM_STEP, epoch as u64, step as u64]);
            let (loss, acc) = train_step(&mut model, &mut adam, &samples, config, &mut rng).map_err(|e| match e {
                Error::Divergence { loss, diagnostics, .. } => Error::Divergence { epoch, step, loss, diagnostics },
                other => other,
            })?;
            loss_sum += loss;
            acc_sum += acc;
        }
        let m = EpochMetrics { epoch, loss: loss_sum / steps as f64, acc: acc_sum / steps as f64, time: start.elapsed().as_secs_f64() };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutput { model, metrics })
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    train_with(config, data, |_| {})
}

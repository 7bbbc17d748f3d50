//! Model checkpoints: the tensor container plus a JSON sidecar describing
//! how to rebuild the networks.

use std::path::{Path, PathBuf};

use autodiff::{read_checkpoint_file, write_checkpoint_file, Rng, CHECKPOINT_VERSION};
use serde::{Deserialize, Serialize};

use crate::agents::{AgentsConfig, GameAgents, SimClr};
use crate::error::{Error, Result};
use crate::train::{ModelKind, TrainConfig, TrainedModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub model: ModelKind,
    pub augmentations: bool,
    pub shared: bool,
    pub agents: AgentsConfig,
    pub train: TrainConfig,
    /// SHA-256 of all stored tensors.
    pub digest: String,
    pub tensors: Vec<String>,
}

/// `<path>.json` next to the tensor file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(model: &TrainedModel, train: &TrainConfig, path: &Path) -> Result<Sidecar> {
    let store = model.store();
    write_checkpoint_file(path, store)?;
    let (kind, agents) = match model {
        TrainedModel::Game(a) => (ModelKind::Game, a.config.clone()),
        TrainedModel::Simclr(s) => (ModelKind::Simclr, s.config.clone()),
    };
    let sidecar = Sidecar {
        format_version: CHECKPOINT_VERSION,
        model: kind,
        augmentations: train.augmentations,
        shared: agents.shared,
        agents,
        train: train.clone(),
        digest: store.digest(),
        tensors: store.iter().map(|(_, n, _)| n.to_string()).collect(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(sidecar)
}

pub fn load_model(path: &Path) -> Result<(TrainedModel, Sidecar)> {
    let sc_path = sidecar_path(path);
    let text = std::fs::read_to_string(&sc_path).map_err(|e| Error::Checkpoint(format!("{}: {e}", sc_path.display())))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let records = read_checkpoint_file(path)?;
    let mut rng = Rng::seed_from(0);
    let mut model = match sidecar.model {
        ModelKind::Game => TrainedModel::Game(GameAgents::new(&sidecar.agents, &mut rng)?),
        ModelKind::Simclr => TrainedModel::Simclr(SimClr::new(&sidecar.agents, &mut rng)?),
    };
    match &mut model {
        TrainedModel::Game(a) => a.store.load_records(&records)?,
        TrainedModel::Simclr(s) => s.store.load_records(&records)?,
    }
    if model.store().digest() != sidecar.digest {
        return Err(Error::Checkpoint("tensor digest does not match sidecar".into()));
    }
    Ok((model, sidecar))
}

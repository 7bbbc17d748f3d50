//! Batch assembly and the two training objectives.

use std::collections::HashSet;

use autodiff::{argmax, par, Graph, Rng, Tensor, Var};
use shapeworld::{augment, AugmentConfig, ImageSample};

use crate::agents::{GameAgents, SimClr};
use crate::channel::Noise;
use crate::error::{config_err, Error, Result};
use crate::layers::Mode;

/// One optimisation step's worth of games. Game `b` has the sender view of
/// image `b` as target and every receiver view as a candidate, so its
/// target position is `b`.
#[derive(Clone, Debug)]
pub struct GameBatch {
    /// `[B, C, H, W]`
    pub sender_views: Tensor,
    /// `[B, C, H, W]`, index-aligned with `sender_views`.
    pub receiver_views: Tensor,
    pub targets: Vec<usize>,
    pub sample_ids: Vec<u64>,
}

impl GameBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Sender and receiver views interleaved as rows `2k`, `2k + 1`.
    pub fn interleaved(&self) -> Result<Tensor> {
        let b = self.len();
        let per = self.sender_views.numel() / b;
        let (s, r) = (self.sender_views.data(), self.receiver_views.data());
        let mut data = Vec::with_capacity(2 * b * per);
        for k in 0..b {
            data.extend_from_slice(&s[k * per..(k + 1) * per]);
            data.extend_from_slice(&r[k * per..(k + 1) * per]);
        }
        let mut shape = self.sender_views.shape().to_vec();
        shape[0] = 2 * b;
        Ok(Tensor::new(&shape, data)?)
    }
}

/// Builds a batch from distinct samples. With augmentation each sample gets
/// two independent views; without, both views are the raw image.
pub fn assemble_batch(samples: &[&ImageSample], augmentation: Option<&AugmentConfig>, rng: &mut Rng) -> Result<GameBatch> {
    if samples.len() < 2 {
        return Err(Error::Batch(format!("a game batch needs at least 2 images, got {}", samples.len())));
    }
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.sample_id) {
            return Err(Error::Batch(format!("duplicate sample id {}", s.sample_id)));
        }
    }
    let (sender, receiver): (Vec<Tensor>, Vec<Tensor>) = match augmentation {
        None => samples.iter().map(|s| (s.pixels.clone(), s.pixels.clone())).unzip(),
        Some(cfg) => {
            let base = rng.next_u64();
            let views = par::map_range(samples.len(), |b| -> Result<(Tensor, Tensor)> {
                let mut r = Rng::stream(base, &[b as u64]);
                let a = augment(samples[b], cfg, &mut r)?.pixels;
                let c = augment(samples[b], cfg, &mut r)?.pixels;
                Ok((a, c))
            });
            views.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip()
        }
    };
    let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok(GameBatch {
        sender_views: stack(&sender)?,
        receiver_views: stack(&receiver)?,
        targets: (0..samples.len()).collect(),
        sample_ids: samples.iter().map(|s| s.sample_id).collect(),
    })
}

/// Fraction of rows of a score matrix whose first maximum is at the target.
pub fn batch_accuracy(scores: &Tensor, targets: &[usize]) -> f64 {
    let hits = targets.iter().enumerate().filter(|&(i, &t)| argmax(scores.row(i)) == t).count();
    hits as f64 / targets.len() as f64
}

/// Recorded game loss with its batch accuracy.
pub struct LossOutput {
    pub loss: Var,
    pub accuracy: f64,
}

/// Plays every game of the batch in train mode: mean cross-entropy of the
/// Receiver's softmax over all receiver views against position `b`.
pub fn game_loss(g: &mut Graph, agents: &GameAgents, batch: &GameBatch, noise: Noise<'_>) -> Result<LossOutput> {
    let store = &agents.store;
    let sv = g.constant(batch.sender_views.clone());
    let rv = g.constant(batch.receiver_views.clone());
    let (messages, _) = agents.sender.forward(g, store, sv, Mode::Train, noise)?;
    let embedded = agents.receiver.embed(g, store, messages)?;
    let reps = agents.receiver.represent(g, store, rv, Mode::Train)?;
    let scores = agents.receiver.scores(g, embedded, reps)?;
    let loss = g.cross_entropy(scores, &batch.targets)?;
    let accuracy = batch_accuracy(g.value(scores), &batch.targets);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence { epoch: 0, step: 0, loss: value, diagnostics: format!("batch ids {:?}", batch.sample_ids) });
    }
    Ok(LossOutput { loss, accuracy })
}

/// Partner of row `i` when views are interleaved in pairs.
pub fn partner(i: usize) -> usize {
    i ^ 1
}

/// NT-Xent over `z: [2B, E]` whose rows `2k`, `2k + 1` are positives.
pub fn ntxent_loss(g: &mut Graph, z: Var, tau: f64) -> Result<Var> {
    let rows = g.shape(z)[0];
    if rows < 4 || rows % 2 != 0 {
        return config_err(format!("NT-Xent needs an even number of at least 4 rows, got {rows}"));
    }
    if !(tau > 0.0) {
        return config_err("NT-Xent temperature must be positive");
    }
    let sims = g.cosine_matrix(z, z, crate::COSINE_EPS)?;
    let logits = g.scale(sims, 1.0 / tau);
    let targets: Vec<usize> = (0..rows).map(partner).collect();
    Ok(g.cross_entropy_excluding_self(logits, &targets)?)
}

/// SimCLR loss on the batch's interleaved views; accuracy is the fraction of
/// anchors whose nearest other row is their partner.
pub fn simclr_loss(g: &mut Graph, model: &SimClr, batch: &GameBatch) -> Result<LossOutput> {
    let x = g.constant(batch.interleaved()?);
    let out = model.forward(g, x, Mode::Train)?;
    let loss = ntxent_loss(g, out.z, model.config.channel.cosine_temperature)?;
    let zt = g.value(out.z);
    let n = zt.shape()[0];
    let norms: Vec<f64> = (0..n).map(|i| zt.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::COSINE_EPS)).collect();
    let mut hits = 0;
    for i in 0..n {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for j in (0..n).filter(|&j| j != i) {
            let c: f64 = zt.row(i).iter().zip(zt.row(j)).map(|(a, b)| a * b).sum::<f64>() / (norms[i] * norms[j]);
            if c > best.1 {
                best = (j, c);
            }
        }
        hits += (best.0 == partner(i)) as usize;
    }
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence { epoch: 0, step: 0, loss: value, diagnostics: format!("batch ids {:?}", batch.sample_ids) });
    }
    Ok(LossOutput { loss, accuracy: hits as f64 / n as f64 })
}

//! Multinomial logistic regression on frozen features.

use autodiff::{argmax, Rng};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Standardise each feature with training-set mean and deviation.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 100, learning_rate: 0.01, weight_decay: 1e-4, batch_size: 64, momentum: 0.9, standardize: true, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return config_err("probe epochs and batch size must be at least 1");
        }
        if self.weight_decay < 0.0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return config_err("invalid probe optimiser settings");
        }
        Ok(())
    }
}

/// A trained linear classifier `argmax(W·x̃ + b)` on standardised `x̃`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `[D][K]`
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Mean training loss (with weight decay) per epoch.
    pub curve: Vec<f64>,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        logits(&self.weights, &self.bias, &self.transform(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Mean cross-entropy plus `λ/2 ‖W‖²`.
    pub fn loss(&self, features: &[Vec<f64>], labels: &[usize], weight_decay: f64) -> f64 {
        let xs: Vec<Vec<f64>> = features.iter().map(|x| self.transform(x)).collect();
        objective(&self.weights, &self.bias, &xs, labels, weight_decay)
    }
}

fn logits(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (xi, row) in x.iter().zip(w) {
        if *xi != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, wv)| *o += xi * wv);
        }
    }
    out
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn objective(w: &[Vec<f64>], b: &[f64], xs: &[Vec<f64>], labels: &[usize], wd: f64) -> f64 {
    let ce: f64 = xs
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let z = logits(w, b, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
        })
        .sum::<f64>()
        / xs.len() as f64;
    ce + 0.5 * wd * w.iter().flatten().map(|v| v * v).sum::<f64>()
}

/// Trains with mini-batch gradient descent (heavy-ball momentum) and L2
/// weight decay on `W`. The features are never modified.
pub fn train_linear_probe(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Input(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Input("label outside the class range".into()));
    }
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return config_err("a probe needs at least 2 classes in the training data");
    }
    let (n, d) = (features.len(), features[0].len());
    let mut mean = vec![0.0; d];
    let mut scale = vec![1.0; d];
    if cfg.standardize {
        for x in features {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n as f64);
        }
        for (j, s) in scale.iter_mut().enumerate() {
            let var = features.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            *s = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
    }
    let xs: Vec<Vec<f64>> = features.iter().map(|x| x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect()).collect();
    let mut w = vec![vec![0.0; classes]; d];
    let mut b = vec![0.0; classes];
    let mut vw = vec![vec![0.0; classes]; d];
    let mut vb = vec![0.0; classes];
    let mut rng = Rng::seed_from(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut gw = vec![vec![0.0; classes]; d];
            let mut gb = vec![0.0; classes];
            for &i in chunk {
                let mut p = softmax(&logits(&w, &b, &xs[i]));
                p[labels[i]] -= 1.0;
                for (xj, row) in xs[i].iter().zip(gw.iter_mut()) {
                    if *xj != 0.0 {
                        row.iter_mut().zip(&p).for_each(|(g, pv)| *g += xj * pv);
                    }
                }
                gb.iter_mut().zip(&p).for_each(|(g, pv)| *g += pv);
            }
            let inv = 1.0 / chunk.len() as f64;
            for j in 0..d {
                for k in 0..classes {
                    let g = gw[j][k] * inv + cfg.weight_decay * w[j][k];
                    vw[j][k] = cfg.momentum * vw[j][k] + g;
                    w[j][k] -= cfg.learning_rate * vw[j][k];
                }
            }
            for k in 0..classes {
                vb[k] = cfg.momentum * vb[k] + gb[k] * inv;
                b[k] -= cfg.learning_rate * vb[k];
            }
        }
        curve.push(objective(&w, &b, &xs, labels, cfg.weight_decay));
    }
    Ok(LinearProbe { weights: w, bias: b, mean, scale, curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub curve: Vec<f64>,
}

pub fn evaluate_probe(probe: &LinearProbe, features: &[Vec<f64>], labels: &[usize]) -> Result<ProbeResult> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Input(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    if features.iter().any(|x| x.len() != probe.mean.len()) {
        return Err(Error::Input(format!("probe expects {}-dimensional features", probe.mean.len())));
    }
    let k = probe.classes();
    let mut count = vec![0; k];
    let mut correct = vec![0; k];
    for (x, &y) in features.iter().zip(labels) {
        if y >= k {
            return Err(Error::Input(format!("label {y} outside {k} classes")));
        }
        count[y] += 1;
        correct[y] += (probe.predict(x) == y) as usize;
    }
    let per_class = (0..k)
        .filter(|&c| count[c] > 0)
        .map(|c| ClassAccuracy { class: c, count: count[c], correct: correct[c], accuracy: correct[c] as f64 / count[c] as f64 })
        .collect();
    Ok(ProbeResult { top1: correct.iter().sum::<usize>() as f64 / labels.len() as f64, per_class, curve: probe.curve.clone() })
}

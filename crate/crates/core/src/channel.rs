//! The single-symbol channel: Gumbel-Softmax relaxation at train time,
//! argmax one-hot at test time.

use autodiff::{argmax, Graph, Rng, Tensor, Var};

use crate::error::{config_err, Result};

/// Uniform draws feeding `-ln(-ln u)` are clamped to `(c, 1 - c)`.
pub const GUMBEL_CLAMP: f64 = 1e-10;

/// Gumbel noise source. `Zero` is the deterministic test hook.
pub enum Noise<'a> {
    Sample(&'a mut Rng),
    Zero,
}

impl Noise<'_> {
    fn draw(&mut self, n: usize) -> Vec<f64> {
        match self {
            Noise::Sample(rng) => (0..n).map(|_| rng.gumbel(GUMBEL_CLAMP)).collect(),
            Noise::Zero => vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub values: Vec<f64>,
    pub one_hot: bool,
}

impl Message {
    pub fn symbol(&self) -> usize {
        argmax(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `softmax((g + v) / τ)` for one logit vector.
pub fn gumbel_softmax(v: &[f64], tau: f64, mut noise: Noise<'_>) -> Result<Message> {
    if !(tau > 0.0) {
        return config_err(format!("gumbel temperature must be positive, got {tau}"));
    }
    let g = noise.draw(v.len());
    let inv = 1.0 / tau;
    let x: Vec<f64> = v.iter().zip(&g).map(|(a, b)| (a + b) * inv).collect();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|a| (a - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(Message { values: e.into_iter().map(|a| a / z).collect(), one_hot: false })
}

/// One-hot at the first maximal entry.
pub fn discretize(v: &[f64]) -> Message {
    let mut values = vec![0.0; v.len()];
    if !v.is_empty() {
        values[argmax(v)] = 1.0;
    }
    Message { values, one_hot: true }
}

/// Row-wise Gumbel-Softmax over `v: [B, V]`, differentiable w.r.t. `v`.
/// With `straight_through` the forward value is the one-hot argmax while
/// gradients follow the relaxation.
pub fn gumbel_softmax_rows(g: &mut Graph, v: Var, tau: f64, mut noise: Noise<'_>, straight_through: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return config_err(format!("gumbel temperature must be positive, got {tau}"));
    }
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let noise = g.constant(Tensor::new(&shape, noise.draw(n))?);
    let x = g.add(v, noise)?;
    let x = g.scale(x, 1.0 / tau);
    let m = g.softmax(x, 1)?;
    Ok(if straight_through { g.straight_through(m)? } else { m })
}

/// One-hot rows at each row's argmax.
pub fn one_hot_rows(v: &Tensor) -> Result<Tensor> {
    let [rows, cols] = *v.shape() else {
        return Err(autodiff::Error::Dimension(format!("one_hot_rows expects a matrix, got {:?}", v.shape())).into());
    };
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        out[r * cols + argmax(v.row(r))] = 1.0;
    }
    Ok(Tensor::new(&[rows, cols], out)?)
}

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Finite-difference settings.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor: errors are `|a - n| / max(|a|, |n|, floor)`.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { h: 1e-5, abs_floor: 1e-3 }
    }
}

impl GradCheck {
    fn rel_err(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.abs_floor)
    }
}

/// Compares the reverse-mode gradient of the scalar `f(x)` against central
/// finite differences and returns the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor, cfg: GradCheck) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone().with_requires_grad(true));
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::without_grad();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += cfg.h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= cfg.h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * cfg.h);
        worst = worst.max(cfg.rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of `f` with respect to stored parameters. At most
/// `per_tensor` randomly chosen coordinates of each listed parameter are
/// probed. Returns the largest relative error and the parameter it occurred in.
pub fn grad_check_params<F>(store: &ParamStore, params: &[ParamId], f: F, per_tensor: usize, rng: &mut Rng, cfg: GradCheck) -> Result<(f64, Option<ParamId>)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.param_grads(&g.backward(loss)?);
    let mut work = store.clone();
    let eval = |work: &ParamStore| -> Result<f64> {
        let mut g = Graph::without_grad();
        let out = f(&mut g, work)?;
        Ok(g.value(out).item())
    };
    let mut worst = (0.0f64, None);
    for &id in params {
        let n = store.get(id).numel();
        let coords = if n <= per_tensor { (0..n).collect() } else { rng.sample_distinct(n, per_tensor) };
        for i in coords {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + cfg.h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - cfg.h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let e = cfg.rel_err(analytic, numeric);
            if e > worst.0 {
                worst = (e, Some(id));
            }
        }
    }
    Ok(worst)
}

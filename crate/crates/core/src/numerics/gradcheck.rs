//! Central finite-difference checks for analytic gradients.
//!
//! The error reported for a tensor is `max|analytic - numeric|` divided by
//! the larger of the two gradients' max-norms, so entries that are tiny
//! relative to the rest of the tensor do not dominate. The denominator is
//! floored at [`SCALE_FLOOR`].

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
pub const SCALE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|x| x.abs()).fold(0.0, f64::max);
    diff / scale.max(SCALE_FLOOR)
}

/// Checks `d f / d inputs` for a scalar-valued `f`. Returns the worst
/// relative error over all inputs.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut vals = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            vals[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&vals)?;
            vals[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&vals)?;
            vals[i].data_mut()[j] = x0;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Checks `d f / d params` for a model loss. At most `max_entries` entries
/// of each parameter are probed (evenly spaced), which keeps larger models
/// affordable.
pub fn check_params<F>(store: &ParamStore, max_entries: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let grads: Vec<Option<Tensor>> = {
        let mut v = vec![None; store.len()];
        for (id, t) in g.param_grads() {
            v[id.index()] = Some(t);
        }
        v
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let n = store.value(id).len();
        let step = n.div_ceil(max_entries.max(1)).max(1);
        let probe: Vec<usize> = (0..n).step_by(step).collect();
        let mut analytic = Vec::with_capacity(probe.len());
        let mut numeric = Vec::with_capacity(probe.len());
        for &j in &probe {
            let x0 = store.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = x0 + FD_STEP;
            let mut gu = Graph::new();
            let up = f(&mut gu, &work)?;
            let up = gu.scalar(up);
            work.value_mut(id).data_mut()[j] = x0 - FD_STEP;
            let mut gd = Graph::new();
            let down = f(&mut gd, &work)?;
            let down = gd.scalar(down);
            work.value_mut(id).data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * FD_STEP));
            analytic.push(grads[id.index()].as_ref().map_or(0.0, |t| t.data()[j]));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

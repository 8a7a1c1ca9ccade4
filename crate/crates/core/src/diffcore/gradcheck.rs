//! Central-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::Rng as _;

use super::params::ParamStore;
use super::tape::Mat;
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with an absolute floor so that coordinates whose true
/// gradient is ~0 are judged on absolute agreement.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients from `loss_fn` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` at `n_probes` random coordinates drawn from the
/// parameters that received a gradient.
///
/// `loss_fn` must be deterministic: same store in, same loss out.
pub fn finite_difference_check<F>(
    loss_fn: F,
    store: &ParamStore,
    n_probes: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Mat>)>,
{
    const FLOOR: f64 = 1e-6;
    let (_, grads) = loss_fn(store)?;
    let coords: Vec<(&String, usize)> = grads
        .iter()
        .flat_map(|(name, g)| (0..g.len()).map(move |i| (name, i)))
        .collect();
    if coords.is_empty() {
        return Err(Error::Argument("loss has no parameter gradients".into()));
    }
    let mut rng = seeded(seed);
    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let (name, index) = coords[rng.random_range(0..coords.len())];
        let eval = |delta: f64| -> Result<f64> {
            let mut s = store.clone();
            let p = s.get_mut(name).expect("gradient names come from the store");
            p.as_slice_mut().expect("contiguous")[index] += delta;
            Ok(loss_fn(&s)?.0)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let analytic = grads[name].as_slice().expect("contiguous")[index];
        probes.push(Probe {
            param: name.clone(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, FLOOR),
        });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes,
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
    })
}

//! Central finite-difference check of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::CounterRng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |g_ad − g_fd| / (|g_ad| + |g_fd| + 1e-8) over the probed coordinates.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (parameter name, flat index) of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

pub const DEFAULT_STEP: f64 = 1e-3;
pub const MIN_COORDS: usize = 64;

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-8)
}

/// Compares autodiff gradients of `loss_fn` against central differences at
/// `coords` randomly chosen parameter coordinates (uniform over all scalars).
///
/// Runs in `f64` so the difference quotient is not swamped by rounding.
pub fn grad_check<F>(
    params: &ParamStore<f64>,
    loss_fn: F,
    coords: usize,
    step: f64,
    tolerance: f64,
    rng: &mut CounterRng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = loss_fn(&mut g, &bound)?;
    let mut grads = g.backward(loss)?;
    let analytic = bound.collect(&g, &mut grads);

    let total = params.num_scalars();
    let mut offsets = Vec::with_capacity(params.len());
    let mut acc = 0;
    for t in params.tensors() {
        offsets.push(acc);
        acc += t.numel();
    }

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let l = loss_fn(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
        tolerance,
        passed: true,
    };
    if total == 0 {
        return Ok(report);
    }
    let mut probe = params.clone();
    for _ in 0..coords {
        let flat = rng.below(total);
        let ti = offsets.partition_point(|&o| o <= flat) - 1;
        let j = flat - offsets[ti];
        let orig = probe.tensors()[ti].data()[j];
        probe.tensors_mut()[ti].data_mut()[j] = orig + step;
        let up = eval(&probe)?;
        probe.tensors_mut()[ti].data_mut()[j] = orig - step;
        let down = eval(&probe)?;
        probe.tensors_mut()[ti].data_mut()[j] = orig;
        let fd = (up - down) / (2.0 * step);
        let ad = analytic[ti].data()[j];
        let err = relative_error(ad, fd);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((params.names()[ti].clone(), j));
        }
        report.coords_checked += 1;
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

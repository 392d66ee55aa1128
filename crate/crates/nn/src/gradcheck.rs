//! Central finite-difference checks of analytic parameter gradients.
//!
//! The loss closure re-evaluates the model from scratch on a perturbed copy
//! of the parameters, so this path never touches the backward pass it checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::params::{Grads, ParamSet};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Coordinates sampled per parameter tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Gradients smaller than this in both routes are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            coords_per_tensor: 8,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (parameter name, flat index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn check_param_gradients(
    params: &ParamSet,
    loss: impl Fn(&ParamSet) -> f64,
    analytic: &Grads,
    cfg: &GradCheckConfig,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for id in params.ids() {
        let n = params.get(id).len();
        let idxs: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            sample(rng, n, cfg.coords_per_tensor).into_vec()
        };
        for i in idxs {
            let orig = params.get(id).data[i];
            probe.get_mut(id).data[i] = orig + cfg.h;
            let up = loss(&probe);
            probe.get_mut(id).data[i] = orig - cfg.h;
            let down = loss(&probe);
            probe.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            let a = analytic.get(id).data[i];
            let err = relative_error(a, numeric, cfg.abs_floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((params.name(id).to_string(), i, a, numeric));
                }
            }
        }
    }
    report
}

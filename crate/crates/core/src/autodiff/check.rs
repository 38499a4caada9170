//! Central-difference certification of tape gradients.

use crate::autodiff::params::ParamSet;
use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor2;
use crate::error::{Error, Result};

/// Relative-error floor: below this magnitude the comparison degrades to an
/// absolute one, which keeps near-zero gradients from blowing up the ratio.
const DENOM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

/// Compares the tape gradient of a scalar loss against central finite
/// differences, perturbing every scalar of every parameter. `build` must
/// construct a fresh tape and return its loss node; it is evaluated
/// `1 + 2 * n_scalars` times.
pub fn grad_check<F>(params: &mut ParamSet, h: f64, tol: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(Tape, NodeId)>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("step h={h} outside [1e-7, 1e-3]")));
    }

    let (tape, loss) = build(params)?;
    let loss_value = tape.value(loss).scalar()?;
    if !loss_value.is_finite() {
        return Err(Error::NumericGuard { op: "grad_check" });
    }
    let grads = tape.backward(loss)?;
    params.zero_grads();
    tape.accumulate_param_grads(&grads, params);
    // Frozen (unused) parameters simply keep their zero gradient.
    let analytic: Vec<Tensor2> = params.iter().map(|p| p.grad.clone()).collect();

    let mut entries = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let name = params.by_idx(pi).name.clone();
        let mut worst = 0.0f64;
        for k in 0..params.by_idx(pi).value.len() {
            let orig = params.by_idx(pi).value.data()[k];

            params.by_idx_mut(pi).value.data_mut()[k] = orig + h;
            let (tape_p, loss_p) = build(params)?;
            let fp = tape_p.value(loss_p).scalar()?;

            params.by_idx_mut(pi).value.data_mut()[k] = orig - h;
            let (tape_m, loss_m) = build(params)?;
            let fm = tape_m.value(loss_m).scalar()?;

            params.by_idx_mut(pi).value.data_mut()[k] = orig;

            let fd = (fp - fm) / (2.0 * h);
            let g = analytic[pi].data()[k];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(DENOM_FLOOR);
            worst = worst.max(rel);
        }
        entries.push(GradCheckEntry {
            name,
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { entries, h, tol })
}

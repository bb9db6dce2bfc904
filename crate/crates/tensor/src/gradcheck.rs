//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function on constant
//! tensors, so it shares no code path with the backward closures it checks.

use crate::error::{Result, TensorError};
use crate::init::{seeded_rng, uniform};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor so that gradients that vanish analytically and
/// numerically are compared on an absolute scale instead of amplifying noise.
pub const DEFAULT_DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub denom_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: DEFAULT_STEP,
            denom_floor: DEFAULT_DENOM_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err || self.checked == 0 {
            let checked = self.checked;
            *self = other.clone();
            self.checked += checked;
        } else {
            self.checked += other.checked;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Reduces a tensor to a scalar with fixed random weights in `[-1, 1)`, so
/// every output element contributes a distinct direction to the check.
pub fn scalarize(out: &Tensor, seed: u64) -> Result<Tensor> {
    let weights = uniform(out.shape(), -1.0, 1.0, &mut seeded_rng(seed));
    Ok(out.mul(&weights)?.sum())
}

impl GradCheck {
    /// Compares backward-pass gradients of the scalar `f(inputs)` against
    /// central differences for every element of every input.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let leaves: Vec<Tensor> = inputs.iter().map(Tensor::requires_grad_leaf).collect();
        let loss = f(&leaves)?;
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        loss.backward()?;

        let mut consts: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
        let mut report = GradCheckReport::default();
        for (i, leaf) in leaves.iter().enumerate() {
            let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
            let base = inputs[i].to_vec();
            for (j, &a) in analytic.iter().enumerate() {
                let probe = |delta: f64, consts: &mut Vec<Tensor>| -> Result<f64> {
                    let mut data = base.clone();
                    data[j] += delta;
                    consts[i] = Tensor::from_vec(data, inputs[i].shape())?;
                    f(consts)?.item()
                };
                let plus = probe(self.step, &mut consts)?;
                let minus = probe(-self.step, &mut consts)?;
                let numeric = (plus - minus) / (2.0 * self.step);
                let err = relative_error(a, numeric, self.denom_floor);
                if err > report.max_rel_err || report.checked == 0 {
                    report.max_rel_err = err;
                    report.worst_input = i;
                    report.worst_index = j;
                    report.analytic = a;
                    report.numeric = numeric;
                }
                report.checked += 1;
            }
            consts[i] = inputs[i].detach();
        }
        Ok(report)
    }
}

use crate::dual::{Dual, Real};
use crate::elementwise::sigmoid;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Numerically stable `softplus(x) = ln(1 + e^x)`.
fn softplus<T: Real>(x: T) -> T {
    let relu = x.max(T::cst(0.0));
    let neg_abs = if x.value() > 0.0 { -x } else { x };
    relu + (T::cst(1.0) + neg_abs.exp()).ln()
}

/// Focal-modulated binary cross-entropy of one logit against target `t`.
///
/// `gamma = 0` reduces to plain BCE.
fn focal_bce<T: Real>(x: T, t: f64, gamma: f64) -> T {
    let bce = softplus(x) - x * T::cst(t);
    if gamma == 0.0 {
        return bce;
    }
    // p_t = t p + (1 - t)(1 - p); modulating factor (1 - p_t)^gamma
    let p = T::cst(1.0) / (T::cst(1.0) + (-x).exp());
    let pt = p * T::cst(t) + (T::cst(1.0) - p) * T::cst(1.0 - t);
    let one_minus = (T::cst(1.0) - pt).max(T::cst(1e-300));
    (one_minus.ln() * T::cst(gamma)).exp() * bce
}

impl Tensor {
    /// Summed binary cross-entropy between logits and `targets` in `[0, 1]`,
    /// optionally focal-modulated by `gamma`.
    pub fn bce_with_logits_sum(&self, targets: &[f64], gamma: f64) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(TensorError::shape(
                "bce_with_logits",
                format!("{} targets for {} logits", targets.len(), self.numel()),
            ));
        }
        if gamma < 0.0 {
            return Err(TensorError::invalid(
                "bce_with_logits",
                "focal gamma must be non-negative",
            ));
        }
        let total: f64 = self
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| focal_bce(x, t, gamma))
            .sum();
        let logits = self.clone();
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![total],
            vec![1],
            vec![self.clone()],
            move |_, g| {
                let gi = logits
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&x, &t)| {
                        let slope = if gamma == 0.0 {
                            sigmoid(x) - t
                        } else {
                            focal_bce(Dual::<1>::var(x, 0), t, gamma).eps[0]
                        };
                        g[0] * slope
                    })
                    .collect();
                vec![Some(gi)]
            },
        ))
    }
}

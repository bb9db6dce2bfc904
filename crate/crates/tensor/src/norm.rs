use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over `N*H*W`.
    pub var: Vec<f64>,
    /// Number of values each channel was averaged over.
    pub count: usize,
}

fn check_affine(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4(op)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::shape(
            op,
            format!(
                "scale/shift must be [{c}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok((n, c, h * w))
}

impl Tensor {
    /// Normalizes each channel with its batch statistics, then applies
    /// `gamma * x_hat + beta`.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, BatchStats)> {
        let (n, c, hw) = check_affine(self, gamma, beta, "batch_norm")?;
        let count = n * hw;
        let x = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for b in 0..n {
                v += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|&t| (t - m) * (t - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut data = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for p in off..off + hw {
                    xhat[p] = (x[p] - mean[ch]) * inv_std[ch];
                    data[p] = gamma.data()[ch] * xhat[p] + beta.data()[ch];
                }
            }
        }
        let g_gamma = gamma.clone();
        let out = Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |_, g| {
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for p in off..off + hw {
                            sum_dy += g[p];
                            sum_dy_xhat += g[p] * xhat[p];
                        }
                    }
                    gg[ch] = sum_dy_xhat;
                    gb[ch] = sum_dy;
                    let scale = g_gamma.data()[ch] * inv_std[ch] / count as f64;
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for p in off..off + hw {
                            gx[p] = scale * (count as f64 * g[p] - sum_dy - xhat[p] * sum_dy_xhat);
                        }
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            },
        );
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch norm with frozen running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let (n, c, hw) = check_affine(self, gamma, beta, "batch_norm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::shape(
                "batch_norm",
                format!("running statistics must have {c} entries"),
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let rm = running_mean.to_vec();
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for p in off..off + hw {
                    data[p] = gamma.data()[ch] * (x[p] - rm[ch]) * inv_std[ch] + beta.data()[ch];
                }
            }
        }
        let (xt, gt) = (self.clone(), gamma.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |_, g| {
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for p in off..off + hw {
                            gx[p] = g[p] * gt.data()[ch] * inv_std[ch];
                            gg[ch] += g[p] * (xt.data()[p] - rm[ch]) * inv_std[ch];
                            gb[ch] += g[p];
                        }
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            },
        ))
    }
}

use crate::error::{Result, TensorError};
use crate::reduce::split_axis;
use crate::tensor::Tensor;

/// `c[m,n] += sum_k a[m,k] * b[k,n]` on row-major slices.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}

impl Tensor {
    /// Batched matrix product `[..., M, K] x [..., K, N] -> [..., M, N]`.
    ///
    /// Leading batch dimensions must match exactly.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || ra != rb || self.shape()[..ra - 2] != other.shape()[..rb - 2] {
            return Err(TensorError::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimensions differ: {k} vs {k2}"),
            ));
        }
        let batch: usize = self.shape()[..ra - 2].iter().product();
        let mut data = vec![0.0; batch * m * n];
        for b in 0..batch {
            gemm_acc(
                &self.data()[b * m * k..(b + 1) * m * k],
                &other.data()[b * k * n..(b + 1) * k * n],
                &mut data[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = self.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        let (a, bt) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone(), other.clone()],
            move |_, g| {
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for b in 0..batch {
                    let gs = &g[b * m * n..(b + 1) * m * n];
                    let asl = &a.data()[b * m * k..(b + 1) * m * k];
                    let bsl = &bt.data()[b * k * n..(b + 1) * k * n];
                    // dA = dC B^T
                    let ga_s = &mut ga[b * m * k..(b + 1) * m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bsl[p * n..(p + 1) * n];
                            ga_s[i * k + p] = gs[i * n..(i + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    // dB = A^T dC
                    let gb_s = &mut gb[b * k * n..(b + 1) * k * n];
                    for i in 0..m {
                        let grow = &gs[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = asl[i * k + p];
                            gb_s[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, &gv)| *d += av * gv);
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis(self.shape(), axis, "softmax")?;
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut data = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len)
                    .map(|l| self.data()[at(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (self.data()[at(l)] - max).exp();
                    data[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    data[at(l)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |y, g| {
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                        for l in 0..len {
                            gi[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                vec![Some(gi)]
            },
        ))
    }
}

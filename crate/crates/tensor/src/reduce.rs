use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn split_axis(
    shape: &[usize],
    axis: usize,
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tensor {
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![total], vec![1], vec![self.clone()], move |_, g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        self.sum().mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sums over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis(self.shape(), axis, "sum_axis")?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            move |_, g| {
                let mut gi = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gi[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gi)]
            },
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self.shape().get(axis).ok_or(TensorError::Axis {
            op: "mean_axis",
            axis,
            rank: self.rank(),
        })?;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / len as f64))
    }
}

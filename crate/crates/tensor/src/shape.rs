use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::reduce::split_axis;
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |_, g| vec![Some(g.to_vec())],
        ))
    }

    /// Gathers `out[i] = self[indices[i]]` over the flattened data.
    ///
    /// The backward pass scatter-adds, so repeated indices accumulate.
    pub fn take(&self, indices: Vec<usize>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(TensorError::shape(
                "take",
                format!("{} indices cannot fill shape {shape:?}", indices.len()),
            ));
        }
        let len = self.numel();
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::invalid(
                "take",
                format!("index {bad} out of range for {len} elements"),
            ));
        }
        let data = indices.iter().map(|&i| self.data()[i]).collect();
        let indices = Arc::new(indices);
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            vec![self.clone()],
            move |_, g| {
                let mut gi = vec![0.0; len];
                for (&i, &v) in indices.iter().zip(g) {
                    gi[i] += v;
                }
                vec![Some(gi)]
            },
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(TensorError::invalid(
                "permute",
                format!("{axes:?} is not a permutation of 0..{rank}"),
            ));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let mut indices = Vec::with_capacity(self.numel());
        let mut counter = vec![0usize; rank];
        for _ in 0..self.numel() {
            indices.push(
                counter
                    .iter()
                    .zip(axes)
                    .map(|(&c, &a)| c * in_strides[a])
                    .sum(),
            );
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.take(indices, &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::invalid(
                "transpose_last",
                "rank must be at least 2",
            ));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (outer, full, inner) = split_axis(self.shape(), axis, "narrow")?;
        if len == 0 || start + len > full {
            return Err(TensorError::invalid(
                "narrow",
                format!(
                    "range {start}..{} exceeds axis {axis} of length {full}",
                    start + len
                ),
            ));
        }
        let mut indices = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for l in start..start + len {
                let base = (o * full + l) * inner;
                indices.extend(base..base + inner);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        self.take(indices, &shape)
    }

    /// Picks entries `indices` along `axis`; repeats allowed.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let (outer, full, inner) = split_axis(self.shape(), axis, "index_select")?;
        if indices.is_empty() {
            return Err(TensorError::invalid("index_select", "empty index list"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= full) {
            return Err(TensorError::invalid(
                "index_select",
                format!("index {bad} out of range for axis {axis} of length {full}"),
            ));
        }
        let mut flat = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &l in indices {
                let base = (o * full + l) * inner;
                flat.extend(base..base + inner);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        self.take(flat, &shape)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no tensors given"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank,
            });
        }
        for (i, p) in parts.iter().enumerate() {
            let compatible = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape(
                    "concat",
                    format!(
                        "part {i} has shape {:?}, incompatible with {:?} along axis {axis}",
                        p.shape(),
                        first.shape()
                    ),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let parents: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(data, shape, parents, move |_, g| {
            let mut grads: Vec<Vec<f64>> = lens
                .iter()
                .map(|&l| Vec::with_capacity(outer * l * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Largest `k` entries along the last axis, sorted descending.
    ///
    /// Ties go to the lower index. Returns the differentiable values and the
    /// row-local indices, laid out `[rows, k]`.
    pub fn topk(&self, k: usize) -> Result<(Tensor, Vec<usize>)> {
        let rank = self.rank();
        let len = self.shape()[rank - 1];
        if k == 0 || k > len {
            return Err(TensorError::invalid(
                "topk",
                format!("k = {k} must lie in 1..={len}"),
            ));
        }
        let rows = self.numel() / len;
        let mut local = Vec::with_capacity(rows * k);
        let mut flat = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = &self.data()[r * len..(r + 1) * len];
            let mut order: Vec<usize> = (0..len).collect();
            // stable sort keeps lower indices first among equal values
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            for &i in &order[..k] {
                local.push(i);
                flat.push(r * len + i);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[rank - 1] = k;
        Ok((self.take(flat, &shape)?, local))
    }

    /// Nearest-neighbour spatial upsampling of an NCHW tensor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(TensorError::invalid(
                "upsample_nearest",
                "factor must be positive",
            ));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut indices = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    indices.push(plane * h * w + (y / factor) * w + x / factor);
                }
            }
        }
        self.take(indices, &[n, c, oh, ow])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec((0..n).map(|v| v as f64).collect(), shape).unwrap()
    }

    #[test]
    fn topk_breaks_ties_by_lower_index() {
        let t = Tensor::from_vec(vec![0.2, 0.9, 0.9, 0.1], &[4]).unwrap();
        let (v, i) = t.topk(2).unwrap();
        assert_eq!(v.data(), &[0.9, 0.9]);
        assert_eq!(i, vec![1, 2]);
        assert!(t.topk(5).is_err());
        assert!(t.topk(0).is_err());
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let t = seq(&[2, 3]);
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(t.permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = seq(&[1, 2, 2, 2]);
        let b = seq(&[1, 3, 2, 2]).mul_scalar(-1.0);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.narrow(1, 2, 3).unwrap().data(), b.data());
        let bad = seq(&[1, 2, 3, 2]);
        assert!(Tensor::concat(&[&a, &bad], 1).is_err());
    }

    #[test]
    fn take_scatter_adds_repeated_indices() {
        let t = seq(&[3]).requires_grad_leaf();
        let g = t.take(vec![2, 2, 0], &[3]).unwrap();
        g.sum().backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let t = seq(&[1, 1, 1, 2]);
        let u = t.upsample_nearest(2).unwrap();
        assert_eq!(u.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Dense, stride-1 convolution with "same" padding for odd kernels.
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: (kernel_size - 1) / 2,
            dilation: 1,
            groups: 1,
        }
    }

    /// Channel-preserving depthwise convolution, same-padded for dilation `d`.
    pub fn depthwise(channels: usize, kernel_size: usize, dilation: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..ConvSpec::new(channels, channels, kernel_size).with_dilation(dilation)
        }
    }

    /// Sets the dilation and re-derives "same" padding `d * (k - 1) / 2`.
    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel_size - 1) / 2;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel_size,
            self.kernel_size,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups.max(1) * self.kernel_size * self.kernel_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_size", self.kernel_size),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("groups", self.groups),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TensorError::invalid(
                "conv2d",
                format!("{name} must be positive"),
            ));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(TensorError::invalid(
                "conv2d",
                format!(
                    "channels ({} in, {} out) must be divisible by groups = {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    /// Output extent along one spatial axis of length `len`.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        let span = self.dilation * (self.kernel_size - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return Err(TensorError::shape(
                "conv2d",
                format!("spatial size {len} with padding {} is smaller than the dilated kernel span {span}", self.padding),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

/// Output positions `[lo, hi)` whose input coordinate `o * stride + offset`
/// lands inside `[0, in_len)`.
fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let limit = in_len as isize - offset;
    let hi = if limit <= 0 { 0 } else { (limit + s - 1) / s };
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(out_len);
    (lo, hi.max(lo))
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    icpg: usize,
    ocpg: usize,
}

impl Geometry {
    fn offset(&self, tap: usize) -> isize {
        (tap * self.dil) as isize - self.pad as isize
    }

    /// Visits every `(out_index, in_index)` pair that one kernel tap touches
    /// within one output plane.
    #[inline]
    fn for_each_tap<F: FnMut(usize, usize)>(&self, kh: usize, kw: usize, mut f: F) {
        let (yoff, xoff) = (self.offset(kh), self.offset(kw));
        let (ylo, yhi) = valid_range(yoff, self.stride, self.h, self.oh);
        let (xlo, xhi) = valid_range(xoff, self.stride, self.w, self.ow);
        for oy in ylo..yhi {
            let iy = (oy * self.stride) as isize + yoff;
            let in_row = iy as usize * self.w;
            let out_row = oy * self.ow;
            for ox in xlo..xhi {
                let ix = ((ox * self.stride) as isize + xoff) as usize;
                f(out_row + ox, in_row + ix);
            }
        }
    }

    /// Contiguous-row variant used when stride is 1.
    #[inline]
    fn rows(&self, kh: usize, kw: usize) -> Option<(usize, usize, usize, usize, isize)> {
        let (yoff, xoff) = (self.offset(kh), self.offset(kw));
        let (ylo, yhi) = valid_range(yoff, 1, self.h, self.oh);
        let (xlo, xhi) = valid_range(xoff, 1, self.w, self.ow);
        if ylo >= yhi || xlo >= xhi {
            return None;
        }
        Some((ylo, yhi, xlo, xhi, xoff + yoff * self.w as isize))
    }
}

fn conv_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, n: usize, g: Geometry) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let kk = g.k * g.k;
    let mut out = vec![0.0; n * g.oc * plane_out];
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, o) = (idx / g.oc, idx % g.oc);
            if let Some(bias) = bias {
                dst.iter_mut().for_each(|v| *v = bias[o]);
            }
            let group = o / g.ocpg;
            for icg in 0..g.icpg {
                let ic = group * g.icpg + icg;
                let src = &x[(b * g.c + ic) * plane_in..(b * g.c + ic + 1) * plane_in];
                let wrow = &wt[(o * g.icpg + icg) * kk..(o * g.icpg + icg + 1) * kk];
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = wrow[kh * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        if g.stride == 1 {
                            let Some((ylo, yhi, xlo, xhi, shift)) = g.rows(kh, kw) else {
                                continue;
                            };
                            for oy in ylo..yhi {
                                let ob = oy * g.ow;
                                let ib = ((oy * g.w) as isize + shift + xlo as isize) as usize;
                                let d = &mut dst[ob + xlo..ob + xhi];
                                let s = &src[ib..ib + xhi - xlo];
                                d.iter_mut().zip(s).for_each(|(d, &s)| *d += wv * s);
                            }
                        } else {
                            g.for_each_tap(kh, kw, |oi, ii| dst[oi] += wv * src[ii]);
                        }
                    }
                }
            }
        });
    out
}

fn conv_backward_input(gout: &[f64], wt: &[f64], n: usize, g: Geometry) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let kk = g.k * g.k;
    let mut gx = vec![0.0; n * g.c * plane_in];
    gx.par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, ic) = (idx / g.c, idx % g.c);
            let group = ic / g.icpg;
            let icg = ic % g.icpg;
            for o in group * g.ocpg..(group + 1) * g.ocpg {
                let src = &gout[(b * g.oc + o) * plane_out..(b * g.oc + o + 1) * plane_out];
                let wrow = &wt[(o * g.icpg + icg) * kk..(o * g.icpg + icg + 1) * kk];
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = wrow[kh * g.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        if g.stride == 1 {
                            let Some((ylo, yhi, xlo, xhi, shift)) = g.rows(kh, kw) else {
                                continue;
                            };
                            for oy in ylo..yhi {
                                let ob = oy * g.ow;
                                let ib = ((oy * g.w) as isize + shift + xlo as isize) as usize;
                                let d = &mut dst[ib..ib + xhi - xlo];
                                let s = &src[ob + xlo..ob + xhi];
                                d.iter_mut().zip(s).for_each(|(d, &s)| *d += wv * s);
                            }
                        } else {
                            g.for_each_tap(kh, kw, |oi, ii| dst[ii] += wv * src[oi]);
                        }
                    }
                }
            }
        });
    gx
}

fn conv_backward_weight(gout: &[f64], x: &[f64], n: usize, g: Geometry) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let kk = g.k * g.k;
    let mut gw = vec![0.0; g.oc * g.icpg * kk];
    gw.par_chunks_mut(g.icpg * kk)
        .enumerate()
        .for_each(|(o, dst)| {
            let group = o / g.ocpg;
            for b in 0..n {
                let go = &gout[(b * g.oc + o) * plane_out..(b * g.oc + o + 1) * plane_out];
                for icg in 0..g.icpg {
                    let ic = group * g.icpg + icg;
                    let src = &x[(b * g.c + ic) * plane_in..(b * g.c + ic + 1) * plane_in];
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let mut acc = 0.0;
                            if g.stride == 1 {
                                if let Some((ylo, yhi, xlo, xhi, shift)) = g.rows(kh, kw) {
                                    for oy in ylo..yhi {
                                        let ob = oy * g.ow;
                                        let ib =
                                            ((oy * g.w) as isize + shift + xlo as isize) as usize;
                                        acc += go[ob + xlo..ob + xhi]
                                            .iter()
                                            .zip(&src[ib..ib + xhi - xlo])
                                            .map(|(a, b)| a * b)
                                            .sum::<f64>();
                                    }
                                }
                            } else {
                                g.for_each_tap(kh, kw, |oi, ii| acc += go[oi] * src[ii]);
                            }
                            dst[icg * kk + kh * g.k + kw] += acc;
                        }
                    }
                }
            }
        });
    gw
}

/// Channel reduction used by [`Tensor::pool_channel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

impl Tensor {
    /// 2-D convolution of an NCHW input.
    ///
    /// `weight` is `[out, in / groups, k, k]`, `bias` is `[out]`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        spec: &ConvSpec,
    ) -> Result<Tensor> {
        spec.validate()?;
        let (n, c, h, w) = self.dims4("conv2d")?;
        if c != spec.in_channels {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "input channel dimension is {c} but the spec expects {}",
                    spec.in_channels
                ),
            ));
        }
        if weight.shape() != spec.weight_shape() {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "weight shape {:?} does not match expected {:?}",
                    weight.shape(),
                    spec.weight_shape()
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [spec.out_channels] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!(
                        "bias shape {:?} does not match [{}]",
                        b.shape(),
                        spec.out_channels
                    ),
                ));
            }
        }
        let geo = Geometry {
            c,
            h,
            w,
            oc: spec.out_channels,
            oh: spec.output_len(h)?,
            ow: spec.output_len(w)?,
            k: spec.kernel_size,
            stride: spec.stride,
            pad: spec.padding,
            dil: spec.dilation,
            icpg: c / spec.groups,
            ocpg: spec.out_channels / spec.groups,
        };
        let data = conv_forward(self.data(), weight.data(), bias.map(Tensor::data), n, geo);
        let shape = vec![n, geo.oc, geo.oh, geo.ow];
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (x, wt, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        Ok(Tensor::from_op(data, shape, parents, move |_, g| {
            let gx = x
                .requires_grad()
                .then(|| conv_backward_input(g, wt.data(), n, geo));
            let gw = wt
                .requires_grad()
                .then(|| conv_backward_weight(g, x.data(), n, geo));
            let mut grads = vec![gx, gw];
            if has_bias {
                let plane = geo.oh * geo.ow;
                let mut gb = vec![0.0; geo.oc];
                for (i, chunk) in g.chunks(plane).enumerate() {
                    gb[i % geo.oc] += chunk.iter().sum::<f64>();
                }
                grads.push(Some(gb));
            }
            grads
        }))
    }

    /// Spatial max-pooling; padded positions never win.
    ///
    /// Gradient ties go to the first maximal element in window scan order.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4("max_pool2d")?;
        if kernel == 0 || stride == 0 || padding > kernel / 2 {
            return Err(TensorError::invalid(
                "max_pool2d",
                format!("invalid kernel {kernel} / stride {stride} / padding {padding}"),
            ));
        }
        let spec = ConvSpec::new(1, 1, kernel)
            .with_stride(stride)
            .with_padding(padding);
        let (oh, ow) = (spec.output_len(h)?, spec.output_len(w)?);
        let mut data = vec![f64::NEG_INFINITY; n * c * oh * ow];
        let mut winners = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &self.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = plane * oh * ow + oy * ow + ox;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if src[i] > data[o] {
                                data[o] = src[i];
                                winners[o] = plane * h * w + i;
                            }
                        }
                    }
                }
            }
        }
        let len = self.numel();
        Ok(Tensor::from_op(
            data,
            vec![n, c, oh, ow],
            vec![self.clone()],
            move |_, g| {
                let mut gi = vec![0.0; len];
                for (&i, &v) in winners.iter().zip(g) {
                    gi[i] += v;
                }
                vec![Some(gi)]
            },
        ))
    }

    /// Per-pixel max or mean over the channel axis: `[N,C,H,W] -> [N,1,H,W]`.
    ///
    /// Max routes its gradient to the lowest-index maximal channel.
    pub fn pool_channel(&self, mode: PoolMode) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4("pool_channel")?;
        let hw = h * w;
        let mut data = vec![0.0; n * hw];
        let mut winners = Vec::new();
        match mode {
            PoolMode::Avg => {
                for b in 0..n {
                    for ch in 0..c {
                        let src = &self.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        data[b * hw..(b + 1) * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                data.iter_mut().for_each(|v| *v /= c as f64);
            }
            PoolMode::Max => {
                winners = vec![0u32; n * hw];
                for b in 0..n {
                    for p in 0..hw {
                        let mut best = self.data()[b * c * hw + p];
                        let mut arg = 0;
                        for ch in 1..c {
                            let v = self.data()[(b * c + ch) * hw + p];
                            if v > best {
                                best = v;
                                arg = ch;
                            }
                        }
                        data[b * hw + p] = best;
                        winners[b * hw + p] = arg as u32;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, 1, h, w],
            vec![self.clone()],
            move |_, g| {
                let mut gi = vec![0.0; n * c * hw];
                for b in 0..n {
                    for p in 0..hw {
                        let gv = g[b * hw + p];
                        match mode {
                            PoolMode::Avg => {
                                for ch in 0..c {
                                    gi[(b * c + ch) * hw + p] = gv / c as f64;
                                }
                            }
                            PoolMode::Max => {
                                gi[(b * c + winners[b * hw + p] as usize) * hw + p] = gv;
                            }
                        }
                    }
                }
                vec![Some(gi)]
            },
        ))
    }
}

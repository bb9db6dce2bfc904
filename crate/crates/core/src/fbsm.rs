//! Foreground/background separation: region-routed attention followed by a
//! pooled spatial gate.
//!
//! The routed attention splits the map into `s x s` tiles, scores tile pairs
//! by the dot product of their mean query and mean key, and lets every query
//! token attend only to the tokens of its `k` best-scoring tiles. The spatial
//! gate then rescales every pixel by `sigmoid(conv7([max_c F, avg_c F]))`.

use rfw_tensor::{ConvSpec, PoolMode, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, Ctx, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbsmConfig {
    /// Regions per spatial axis.
    pub regions: usize,
    /// Routed regions per query region.
    pub topk: usize,
    pub heads: usize,
    /// Multiply gathered values by the softmax of their routing scores.
    pub weight_by_routing: bool,
    /// Attention score scale; `1/sqrt(head_dim)` when absent.
    pub scale: Option<f64>,
}

impl Default for FbsmConfig {
    fn default() -> Self {
        FbsmConfig {
            regions: 3,
            topk: 4,
            heads: 1,
            weight_by_routing: false,
            scale: None,
        }
    }
}

impl FbsmConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.regions == 0 {
            return Err(Error::config("fbsm regions must be positive"));
        }
        let r = self.regions * self.regions;
        if self.topk == 0 || self.topk > r {
            return Err(Error::config(format!(
                "fbsm topk = {} must lie in 1..={r} for {} regions per axis",
                self.topk, self.regions
            )));
        }
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(Error::config(format!(
                "{channels} channels cannot be split into {} heads",
                self.heads
            )));
        }
        if let Some(s) = self.scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::config(format!(
                    "fbsm scale must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Tile geometry of an `H x W` map split into `s x s` regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionGrid {
    pub s: usize,
    pub h: usize,
    pub w: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

impl RegionGrid {
    pub fn new(s: usize, h: usize, w: usize) -> Result<Self> {
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::config(format!(
                "feature map {h}x{w} cannot be split into s = {s} regions per axis"
            )));
        }
        Ok(RegionGrid {
            s,
            h,
            w,
            tile_h: h / s,
            tile_w: w / s,
        })
    }

    pub fn regions(&self) -> usize {
        self.s * self.s
    }

    pub fn region_len(&self) -> usize {
        self.tile_h * self.tile_w
    }

    /// Pixel `(y, x)` of token `t` in region `r`, both row-major.
    pub fn pixel(&self, r: usize, t: usize) -> (usize, usize) {
        let (ry, rx) = (r / self.s, r % self.s);
        let (ty, tx) = (t / self.tile_w, t % self.tile_w);
        (ry * self.tile_h + ty, rx * self.tile_w + tx)
    }

    /// Inverse of [`RegionGrid::pixel`].
    pub fn token(&self, y: usize, x: usize) -> (usize, usize) {
        let r = (y / self.tile_h) * self.s + x / self.tile_w;
        (r, (y % self.tile_h) * self.tile_w + x % self.tile_w)
    }
}

/// Reshapes `[N, C, H, W]` into `[N, s*s, H*W/(s*s), C]`.
pub fn partition_regions(x: &Tensor, s: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("partition_regions")?;
    let g = RegionGrid::new(s, h, w)?;
    let (rn, t) = (g.regions(), g.region_len());
    let mut idx = Vec::with_capacity(x.numel());
    for b in 0..n {
        for r in 0..rn {
            for tok in 0..t {
                let (y, xx) = g.pixel(r, tok);
                for ch in 0..c {
                    idx.push(((b * c + ch) * h + y) * w + xx);
                }
            }
        }
    }
    Ok(x.take(idx, &[n, rn, t, c])?)
}

/// Inverse of [`partition_regions`].
pub fn merge_regions(xr: &Tensor, s: usize, h: usize, w: usize) -> Result<Tensor> {
    let g = RegionGrid::new(s, h, w)?;
    let shape = xr.shape();
    if shape.len() != 4 || shape[1] != g.regions() || shape[2] != g.region_len() {
        return Err(Error::config(format!(
            "region tensor {shape:?} does not match s = {s} over {h}x{w}"
        )));
    }
    let (n, rn, t, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut idx = Vec::with_capacity(xr.numel());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let (r, tok) = g.token(y, xx);
                    idx.push(((b * rn + r) * t + tok) * c + ch);
                }
            }
        }
    }
    Ok(xr.take(idx, &[n, c, h, w])?)
}

#[derive(Debug, Clone)]
pub struct RoutingResult {
    /// Affinity scores of the selected regions, `[..., regions, k]`, descending.
    pub weights: Tensor,
    /// Selected region indices, same layout as `weights`.
    pub indices: Vec<usize>,
    pub k: usize,
}

impl RoutingResult {
    pub fn row(&self, row: usize) -> &[usize] {
        &self.indices[row * self.k..(row + 1) * self.k]
    }
}

/// Top-`k` regions per query region by `q_mean . k_mean^T`.
///
/// Accepts `[R, C]` or batched `[N, R, C]` region means.
pub fn topk_routing(q_mean: &Tensor, k_mean: &Tensor, k: usize) -> Result<RoutingResult> {
    let rank = q_mean.rank();
    if rank < 2 || q_mean.shape() != k_mean.shape() {
        return Err(Error::config(format!(
            "region means must have equal shapes [.., R, C], got {:?} and {:?}",
            q_mean.shape(),
            k_mean.shape()
        )));
    }
    let regions = q_mean.shape()[rank - 2];
    if k == 0 || k > regions {
        return Err(Error::config(format!(
            "routing k = {k} must lie in 1..={regions}"
        )));
    }
    let affinity = q_mean.matmul(&k_mean.transpose_last()?)?;
    let (weights, indices) = affinity.topk(k)?;
    Ok(RoutingResult {
        weights,
        indices,
        k,
    })
}

/// Everything the routed attention computed, for inspection.
#[derive(Debug, Clone)]
pub struct BrifmOutput {
    pub output: Tensor,
    /// Softmax rows `[N*R*heads, T, k*T]`.
    pub attention: Tensor,
    pub routing: RoutingResult,
}

#[derive(Debug, Clone)]
pub struct Brifm {
    pub channels: usize,
    pub config: FbsmConfig,
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
}

impl Brifm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: &FbsmConfig,
    ) -> Result<Self> {
        config.validate(channels)?;
        let pw = ConvSpec::new(channels, channels, 1);
        Ok(Brifm {
            channels,
            config: config.clone(),
            q: Conv::new(store, &format!("{name}.q"), pw, true)?,
            k: Conv::new(store, &format!("{name}.k"), pw, true)?,
            v: Conv::new(store, &format!("{name}.v"), pw, true)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_detailed(ctx, x)?.output)
    }

    pub fn forward_detailed(&self, ctx: &Ctx, x: &Tensor) -> Result<BrifmOutput> {
        let (n, c, h, w) = x.dims4("brifm")?;
        if c != self.channels {
            return Err(Error::config(format!(
                "brifm has {} channels, input has {c}",
                self.channels
            )));
        }
        let cfg = &self.config;
        let g = RegionGrid::new(cfg.regions, h, w)?;
        let (rn, t, kk, heads) = (g.regions(), g.region_len(), cfg.topk, cfg.heads);
        let dh = c / heads;
        let hw = h * w;

        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;

        let q_mean = partition_regions(&q, cfg.regions)?.mean_axis(2)?;
        let k_mean = partition_regions(&k, cfg.regions)?.mean_axis(2)?;
        let routing = topk_routing(&q_mean, &k_mean, kk)?;

        // [N, R, heads, T, dh] queries and [N, R, heads, k*T, dh] gathered keys/values
        let batch = n * rn * heads;
        let mut q_idx = Vec::with_capacity(batch * t * dh);
        let mut kv_idx = Vec::with_capacity(batch * kk * t * dh);
        let mut rw_idx = Vec::with_capacity(batch * kk * t * dh);
        for b in 0..n {
            for r in 0..rn {
                let routed = routing.row(b * rn + r);
                for hd in 0..heads {
                    for tok in 0..t {
                        let (y, xx) = g.pixel(r, tok);
                        for d in 0..dh {
                            q_idx.push((b * c + hd * dh + d) * hw + y * w + xx);
                        }
                    }
                    for (slot, &src) in routed.iter().enumerate() {
                        for tok in 0..t {
                            let (y, xx) = g.pixel(src, tok);
                            for d in 0..dh {
                                kv_idx.push((b * c + hd * dh + d) * hw + y * w + xx);
                                rw_idx.push((b * rn + r) * kk + slot);
                            }
                        }
                    }
                }
            }
        }
        let q_att = q.take(q_idx, &[batch, t, dh])?;
        let k_sel = k.take(kv_idx.clone(), &[batch, kk * t, dh])?;
        let mut v_sel = v.take(kv_idx, &[batch, kk * t, dh])?;
        if cfg.weight_by_routing {
            let rw = routing.weights.softmax(routing.weights.rank() - 1)?;
            v_sel = v_sel.mul(&rw.take(rw_idx, &[batch, kk * t, dh])?)?;
        }

        let scale = cfg.scale.unwrap_or(1.0 / (dh as f64).sqrt());
        let scores = q_att.matmul(&k_sel.transpose_last()?)?.mul_scalar(scale);
        let attention = scores.softmax(2)?;
        let out = attention.matmul(&v_sel)?;

        let mut back = Vec::with_capacity(n * c * hw);
        for b in 0..n {
            for ch in 0..c {
                let (hd, d) = (ch / dh, ch % dh);
                for y in 0..h {
                    for xx in 0..w {
                        let (r, tok) = g.token(y, xx);
                        back.push(((((b * rn + r) * heads + hd) * t + tok) * dh) + d);
                    }
                }
            }
        }
        let output = x.add(&out.take(back, &[n, c, h, w])?)?;
        Ok(BrifmOutput {
            output,
            attention,
            routing,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Fiem {
    pub conv: Conv,
}

impl Fiem {
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Fiem {
            conv: Conv::new(store, &format!("{name}.conv"), ConvSpec::new(2, 1, 7), true)?,
        })
    }

    /// The `[N, 1, H, W]` gate map in `(0, 1)`.
    pub fn gate(&self, ctx: &Ctx, f: &Tensor) -> Result<Tensor> {
        Ok(self.pre_activation(ctx, f)?.sigmoid())
    }

    pub fn pre_activation(&self, ctx: &Ctx, f: &Tensor) -> Result<Tensor> {
        let pooled = Tensor::concat(
            &[
                &f.pool_channel(PoolMode::Max)?,
                &f.pool_channel(PoolMode::Avg)?,
            ],
            1,
        )?;
        self.conv.forward(ctx, &pooled)
    }

    pub fn forward(&self, ctx: &Ctx, f: &Tensor) -> Result<Tensor> {
        Ok(f.mul_spatial(&self.gate(ctx, f)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Fbsm {
    pub brifm: Brifm,
    pub fiem: Fiem,
}

impl Fbsm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: &FbsmConfig,
    ) -> Result<Self> {
        Ok(Fbsm {
            brifm: Brifm::new(store, &format!("{name}.brifm"), channels, config)?,
            fiem: Fiem::new(store, &format!("{name}.fiem"))?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.fiem.forward(ctx, &self.brifm.forward(ctx, x)?)
    }

    /// FIEM gate map of the module's own input, for visualization.
    pub fn gate_map(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.fiem.gate(ctx, &self.brifm.forward(ctx, x)?)
    }
}

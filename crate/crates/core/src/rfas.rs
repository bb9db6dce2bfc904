//! Receptive-field adaptive selection block and the backbone built from it.
//!
//! A block runs two depthwise branches with different receptive fields,
//!
//! ```text
//! F_srf = W33(W31 x) + W31 x        (9x9 receptive field)
//! F_lrf = W35(W51 x) + W51 x        (15x15 receptive field)
//! ```
//!
//! derives a per-pixel two-way gate from channel-pooled branch features,
//! and multiplies the input by a pointwise fusion of the gated mix:
//!
//! ```text
//! w     = sigmoid(W71([max_c, avg_c]([F_srf, F_lrf])))
//! F_out = x * W11(w1 * F_srf + w2 * F_lrf)
//! ```

use rfw_tensor::{ConvSpec, PoolMode, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, ConvBnAct, Ctx, ParamStore};

/// Total stride of the backbone; input sides must be a multiple of this.
pub const MAX_STRIDE: usize = 32;
/// Strides of the three exported feature maps.
pub const FEATURE_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone)]
pub struct RfasBlock {
    pub channels: usize,
    pub conv_3_1: Conv,
    pub conv_3_3: Conv,
    pub conv_5_1: Conv,
    pub conv_3_5: Conv,
    pub selector: Conv,
    pub fuse: Conv,
}

impl RfasBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let dw = |k, d| ConvSpec::depthwise(channels, k, d);
        Ok(RfasBlock {
            channels,
            conv_3_1: Conv::new(store, &format!("{name}.conv_3_1"), dw(3, 1), true)?,
            conv_3_3: Conv::new(store, &format!("{name}.conv_3_3"), dw(3, 3), true)?,
            conv_5_1: Conv::new(store, &format!("{name}.conv_5_1"), dw(5, 1), true)?,
            conv_3_5: Conv::new(store, &format!("{name}.conv_3_5"), dw(3, 5), true)?,
            selector: Conv::new(
                store,
                &format!("{name}.selector"),
                ConvSpec::new(2, 2, 7),
                true,
            )?,
            fuse: Conv::new(
                store,
                &format!("{name}.fuse"),
                ConvSpec::new(channels, channels, 1),
                true,
            )?,
        })
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims4("rfas")?;
        if c != self.channels {
            return Err(Error::config(format!(
                "rfas block has {} channels, input has {c}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn small_rf_branch(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let inner = self.conv_3_1.forward(ctx, x)?;
        Ok(self.conv_3_3.forward(ctx, &inner)?.add(&inner)?)
    }

    pub fn large_rf_branch(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let inner = self.conv_5_1.forward(ctx, x)?;
        Ok(self.conv_3_5.forward(ctx, &inner)?.add(&inner)?)
    }

    /// Two-channel gate `[w1, w2]` from the concatenated branch features.
    pub fn select_weights(&self, ctx: &Ctx, mrf: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = mrf.dims4("select_weights")?;
        if c != 2 * self.channels {
            return Err(Error::config(format!(
                "selector expects {} channels, got {c}",
                2 * self.channels
            )));
        }
        let pooled = Tensor::concat(
            &[
                &mrf.pool_channel(PoolMode::Max)?,
                &mrf.pool_channel(PoolMode::Avg)?,
            ],
            1,
        )?;
        Ok(self.selector.forward(ctx, &pooled)?.sigmoid())
    }

    /// `x * W11(w1 * srf + w2 * lrf)` for an explicit gate.
    pub fn aggregate(
        &self,
        ctx: &Ctx,
        x: &Tensor,
        srf: &Tensor,
        lrf: &Tensor,
        w: &Tensor,
    ) -> Result<Tensor> {
        let mix = srf
            .mul_spatial(&w.narrow(1, 0, 1)?)?
            .add(&lrf.mul_spatial(&w.narrow(1, 1, 1)?)?)?;
        Ok(x.mul(&self.fuse.forward(ctx, &mix)?)?)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let srf = self.small_rf_branch(ctx, x)?;
        let lrf = self.large_rf_branch(ctx, x)?;
        let w = self.select_weights(ctx, &Tensor::concat(&[&srf, &lrf], 1)?)?;
        self.aggregate(ctx, x, &srf, &lrf, &w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub mlp_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64],
            stage_depths: vec![1, 2, 2],
            mlp_ratio: 2.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.stage_depths.len() {
            return Err(Error::config(format!(
                "backbone has {} stage widths but {} stage depths",
                self.stage_channels.len(),
                self.stage_depths.len()
            )));
        }
        if self.stage_channels.len() != 3 {
            return Err(Error::config(format!(
                "backbone must export exactly 3 scales, config has {} stages",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c < 2) {
            return Err(Error::config("stage widths must be at least 2"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::config(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            )));
        }
        Ok(())
    }

    pub fn hidden(&self, channels: usize) -> usize {
        ((channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// Pointwise expand, SiLU, pointwise project.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Conv::new(
                store,
                &format!("{name}.fc1"),
                ConvSpec::new(channels, hidden, 1),
                true,
            )?,
            fc2: Conv::new(
                store,
                &format!("{name}.fc2"),
                ConvSpec::new(hidden, channels, 1),
                true,
            )?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(ctx, &self.fc1.forward(ctx, x)?.silu())
    }
}

/// `x + RFAS(BN(x))` then `x + MLP(BN(x))`.
#[derive(Debug, Clone)]
pub struct RfasStageBlock {
    pub norm1: BatchNorm,
    pub rfas: RfasBlock,
    pub norm2: BatchNorm,
    pub mlp: Mlp,
}

impl RfasStageBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        Ok(RfasStageBlock {
            norm1: BatchNorm::new(store, &format!("{name}.norm1"), channels),
            rfas: RfasBlock::new(store, &format!("{name}.rfas"), channels)?,
            norm2: BatchNorm::new(store, &format!("{name}.norm2"), channels),
            mlp: Mlp::new(store, &format!("{name}.mlp"), channels, hidden)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.rfas.forward(ctx, &self.norm1.forward(ctx, x)?)?)?;
        Ok(x.add(&self.mlp.forward(ctx, &self.norm2.forward(ctx, &x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    /// Stride-2 transition into the stage (absent for the first stage, which
    /// follows the stem directly).
    pub downsample: Option<ConvBnAct>,
    pub blocks: Vec<RfasStageBlock>,
}

#[derive(Debug, Clone)]
pub struct RfasNet {
    pub config: BackboneConfig,
    pub stem: Vec<ConvBnAct>,
    pub stages: Vec<Stage>,
}

impl RfasNet {
    /// Stem of three stride-2 convolutions to stride 8, then three stages at
    /// strides 8, 16 and 32.
    pub fn new(store: &mut ParamStore, name: &str, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c0 = config.stage_channels[0];
        let half = (c0 / 2).max(1);
        let s2 = |i, o| ConvSpec::new(i, o, 3).with_stride(2);
        let stem = vec![
            ConvBnAct::new(store, &format!("{name}.stem.0"), s2(3, half))?,
            ConvBnAct::new(store, &format!("{name}.stem.1"), s2(half, c0))?,
            ConvBnAct::new(store, &format!("{name}.stem.2"), s2(c0, c0))?,
        ];
        let mut stages = Vec::new();
        let mut prev = c0;
        for (i, (&c, &depth)) in config
            .stage_channels
            .iter()
            .zip(&config.stage_depths)
            .enumerate()
        {
            let prefix = format!("{name}.stage{i}");
            let downsample = if i == 0 {
                None
            } else {
                Some(ConvBnAct::new(
                    store,
                    &format!("{prefix}.down"),
                    s2(prev, c),
                )?)
            };
            let blocks = (0..depth)
                .map(|b| {
                    RfasStageBlock::new(store, &format!("{prefix}.block{b}"), c, config.hidden(c))
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
            prev = c;
        }
        Ok(RfasNet {
            config: config.clone(),
            stem,
            stages,
        })
    }

    /// Feature maps at strides 8, 16 and 32.
    pub fn forward(&self, ctx: &Ctx, image: &Tensor) -> Result<[Tensor; 3]> {
        let (_, c, h, w) = image.dims4("rfasnet")?;
        if c != 3 {
            return Err(Error::config(format!(
                "backbone expects 3 input channels, got {c}"
            )));
        }
        check_input_size(h, w)?;
        let mut x = image.clone();
        for layer in &self.stem {
            x = layer.forward(ctx, &x)?;
        }
        let mut outs = Vec::with_capacity(3);
        for stage in &self.stages {
            if let Some(down) = &stage.downsample {
                x = down.forward(ctx, &x)?;
            }
            for block in &stage.blocks {
                x = block.forward(ctx, &x)?;
            }
            outs.push(x.clone());
        }
        Ok(outs.try_into().expect("exactly three stages"))
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
        return Err(Error::config(format!(
            "input size {h}x{w} must be a positive multiple of {MAX_STRIDE} in both dimensions"
        )));
    }
    Ok(())
}

use rfw_tensor::{ConvSpec, Tensor};

use crate::error::Result;
use crate::layers::{Conv, ConvBnAct, Ctx, ParamStore};

/// Logit bias for an initial foreground probability of 0.01.
pub const PRIOR_BIAS: f64 = -4.59511985013459;

/// Raw predictions of one stride.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub stride: usize,
    /// `[N, classes, H, W]` logits.
    pub cls: Tensor,
    /// `[N, 4, H, W]` regressands `(tx, ty, tw, th)`.
    pub boxes: Tensor,
}

impl LevelOutput {
    pub fn grid(&self) -> (usize, usize) {
        (self.cls.shape()[2], self.cls.shape()[3])
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub levels: Vec<LevelOutput>,
}

impl HeadOutput {
    pub fn batch(&self) -> usize {
        self.levels[0].cls.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.levels[0].cls.shape()[1]
    }
}

/// Shared stem, then separate classification and box branches.
#[derive(Debug, Clone)]
pub struct Head {
    pub stem: ConvBnAct,
    pub cls_conv: ConvBnAct,
    pub cls_pred: Conv,
    pub box_conv: ConvBnAct,
    pub box_pred: Conv,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let c3 = ConvSpec::new(channels, channels, 3);
        let head = Head {
            stem: ConvBnAct::new(
                store,
                &format!("{name}.stem"),
                ConvSpec::new(channels, channels, 1),
            )?,
            cls_conv: ConvBnAct::new(store, &format!("{name}.cls_conv"), c3)?,
            cls_pred: Conv::new(
                store,
                &format!("{name}.cls_pred"),
                ConvSpec::new(channels, num_classes, 1),
                true,
            )?,
            box_conv: ConvBnAct::new(store, &format!("{name}.box_conv"), c3)?,
            box_pred: Conv::new(
                store,
                &format!("{name}.box_pred"),
                ConvSpec::new(channels, 4, 1),
                true,
            )?,
        };
        let bias = head.cls_pred.bias.expect("prediction conv has a bias");
        store.set(bias, Tensor::full(&[num_classes], PRIOR_BIAS));
        let bias = head.box_pred.bias.expect("prediction conv has a bias");
        store.set(bias, Tensor::zeros(&[4]));
        Ok(head)
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor, stride: usize) -> Result<LevelOutput> {
        let s = self.stem.forward(ctx, x)?;
        Ok(LevelOutput {
            stride,
            cls: self
                .cls_pred
                .forward(ctx, &self.cls_conv.forward(ctx, &s)?)?,
            boxes: self
                .box_pred
                .forward(ctx, &self.box_conv.forward(ctx, &s)?)?,
        })
    }
}

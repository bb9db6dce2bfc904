//! The assembled detector: RFAS backbone, FBSM on the deepest map, SPPF,
//! an FPN/PAN neck and one decoupled head per stride.

pub mod assign;
pub mod codec;
mod head;
mod neck;
pub mod nms;
mod sppf;
pub mod train;

use rfw_tensor::Tensor;
use serde::{Deserialize, Serialize};

pub use head::{Head, HeadOutput, LevelOutput};
pub use neck::Neck;
pub use sppf::Sppf;

use crate::boxloss::AABox;
use crate::error::{Error, Result};
use crate::fbsm::{Fbsm, FbsmConfig};
use crate::layers::{Ctx, ParamStore};
use crate::rfas::{BackboneConfig, RfasNet, FEATURE_STRIDES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: AABox,
}

/// How the foreground/background module is wired in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FbsmVariant {
    #[default]
    Full,
    /// Replaced by `0.5 * x`, the output of its identity-degenerate setting.
    HalfIdentity,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub fbsm: FbsmConfig,
    pub fbsm_variant: FbsmVariant,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 3,
            backbone: BackboneConfig::default(),
            fbsm: FbsmConfig::default(),
            fbsm_variant: FbsmVariant::Full,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        self.backbone.validate()?;
        self.fbsm.validate(self.backbone.stage_channels[2])
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: RfasNet,
    pub fbsm: Option<Fbsm>,
    pub sppf: Sppf,
    pub neck: Neck,
    pub heads: Vec<Head>,
}

impl Detector {
    /// Builds the detector, registering every parameter in `store`.
    ///
    /// Names are dotted paths rooted at `backbone`, `fbsm`, `sppf`, `neck`
    /// and `head{0,1,2}`.
    pub fn new(store: &mut ParamStore, config: &DetectorConfig) -> Result<Self> {
        config.validate()?;
        let widths = &config.backbone.stage_channels;
        let backbone = RfasNet::new(store, "backbone", &config.backbone)?;
        let fbsm = match config.fbsm_variant {
            FbsmVariant::Full => Some(Fbsm::new(store, "fbsm", widths[2], &config.fbsm)?),
            _ => None,
        };
        let sppf = Sppf::new(store, "sppf", widths[2])?;
        let neck = Neck::new(store, "neck", [widths[0], widths[1], widths[2]])?;
        let heads = (0..3)
            .map(|i| Head::new(store, &format!("head{i}"), widths[i], config.num_classes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Detector {
            config: config.clone(),
            backbone,
            fbsm,
            sppf,
            neck,
            heads,
        })
    }

    /// Deepest backbone map after the FBSM stage.
    pub fn attend(&self, ctx: &Ctx, p5: &Tensor) -> Result<Tensor> {
        match (&self.fbsm, self.config.fbsm_variant) {
            (Some(f), _) => f.forward(ctx, p5),
            (None, FbsmVariant::HalfIdentity) => Ok(p5.mul_scalar(0.5)),
            (None, _) => Ok(p5.clone()),
        }
    }

    pub fn forward(&self, ctx: &Ctx, images: &Tensor) -> Result<HeadOutput> {
        let [p3, p4, p5] = self.backbone.forward(ctx, images)?;
        let p5 = self.sppf.forward(ctx, &self.attend(ctx, &p5)?)?;
        let feats = self.neck.forward(ctx, &p3, &p4, &p5)?;
        let levels = feats
            .iter()
            .zip(&self.heads)
            .zip(FEATURE_STRIDES)
            .map(|((f, head), stride)| head.forward(ctx, f, stride))
            .collect::<Result<Vec<_>>>()?;
        Ok(HeadOutput { levels })
    }

    /// FIEM gate maps `[N, 1, H/32, W/32]` for the given images.
    pub fn attention_map(&self, ctx: &Ctx, images: &Tensor) -> Result<Tensor> {
        let fbsm = self
            .fbsm
            .as_ref()
            .ok_or_else(|| Error::config("attention export needs the full FBSM variant"))?;
        let [_, _, p5] = self.backbone.forward(ctx, images)?;
        fbsm.gate_map(ctx, &p5)
    }

    /// Decoded, per-class suppressed detections for each image.
    pub fn detect(
        &self,
        ctx: &Ctx,
        images: &Tensor,
        score_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<Vec<Detection>>> {
        let out = self.forward(ctx, images)?;
        Ok(codec::decode(&out, score_threshold)
            .into_iter()
            .map(|dets| nms::nms(&dets, nms_iou))
            .collect())
    }
}

use rfw_tensor::{ConvSpec, Tensor};

use crate::error::{Error, Result};
use crate::layers::{ConvBnAct, Ctx, ParamStore};

/// Top-down FPN pathway followed by a bottom-up PAN pathway.
///
/// ```text
/// l5 = lat5(p5)                   t4 = td4([up(l5), p4])
/// l4 = lat4(t4)                   o3 = td3([up(l4), p3])
/// o4 = bu4([down3(o3), l4])       o5 = bu5([down4(o4), l5])
/// ```
#[derive(Debug, Clone)]
pub struct Neck {
    pub widths: [usize; 3],
    pub lat5: ConvBnAct,
    pub td4: ConvBnAct,
    pub lat4: ConvBnAct,
    pub td3: ConvBnAct,
    pub down3: ConvBnAct,
    pub bu4: ConvBnAct,
    pub down4: ConvBnAct,
    pub bu5: ConvBnAct,
}

impl Neck {
    pub fn new(store: &mut ParamStore, name: &str, widths: [usize; 3]) -> Result<Self> {
        let [c3, c4, c5] = widths;
        let mut layer =
            |part: &str, spec: ConvSpec| ConvBnAct::new(store, &format!("{name}.{part}"), spec);
        Ok(Neck {
            widths,
            lat5: layer("lat5", ConvSpec::new(c5, c4, 1))?,
            td4: layer("td4", ConvSpec::new(2 * c4, c4, 3))?,
            lat4: layer("lat4", ConvSpec::new(c4, c3, 1))?,
            td3: layer("td3", ConvSpec::new(2 * c3, c3, 3))?,
            down3: layer("down3", ConvSpec::new(c3, c3, 3).with_stride(2))?,
            bu4: layer("bu4", ConvSpec::new(2 * c3, c4, 3))?,
            down4: layer("down4", ConvSpec::new(c4, c4, 3).with_stride(2))?,
            bu5: layer("bu5", ConvSpec::new(2 * c4, c5, 3))?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, p3: &Tensor, p4: &Tensor, p5: &Tensor) -> Result<[Tensor; 3]> {
        for (i, (p, &c)) in [p3, p4, p5].iter().zip(&self.widths).enumerate() {
            let (_, pc, _, _) = p.dims4("neck")?;
            if pc != c {
                return Err(Error::config(format!(
                    "neck input {i} has {pc} channels, expected {c}"
                )));
            }
        }
        let cat = |a: &Tensor, b: &Tensor| Tensor::concat(&[a, b], 1);
        let l5 = self.lat5.forward(ctx, p5)?;
        let t4 = self.td4.forward(ctx, &cat(&l5.upsample_nearest(2)?, p4)?)?;
        let l4 = self.lat4.forward(ctx, &t4)?;
        let o3 = self.td3.forward(ctx, &cat(&l4.upsample_nearest(2)?, p3)?)?;
        let o4 = self
            .bu4
            .forward(ctx, &cat(&self.down3.forward(ctx, &o3)?, &l4)?)?;
        let o5 = self
            .bu5
            .forward(ctx, &cat(&self.down4.forward(ctx, &o4)?, &l5)?)?;
        Ok([o3, o4, o5])
    }
}

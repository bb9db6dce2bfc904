use rfw_tensor::{ConvSpec, Tensor};

use crate::error::Result;
use crate::layers::{ConvBnAct, Ctx, ParamStore};

/// Pointwise reduce, three chained 5x5 max-pools, concat, pointwise expand.
#[derive(Debug, Clone)]
pub struct Sppf {
    pub reduce: ConvBnAct,
    pub expand: ConvBnAct,
}

impl Sppf {
    pub const POOL: usize = 5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let hidden = (channels / 2).max(1);
        Ok(Sppf {
            reduce: ConvBnAct::new(
                store,
                &format!("{name}.reduce"),
                ConvSpec::new(channels, hidden, 1),
            )?,
            expand: ConvBnAct::new(
                store,
                &format!("{name}.expand"),
                ConvSpec::new(4 * hidden, channels, 1),
            )?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let x0 = self.reduce.forward(ctx, x)?;
        let pool = |t: &Tensor| t.max_pool2d(Self::POOL, 1, Self::POOL / 2);
        let y1 = pool(&x0)?;
        let y2 = pool(&y1)?;
        let y3 = pool(&y2)?;
        self.expand
            .forward(ctx, &Tensor::concat(&[&x0, &y1, &y2, &y3], 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rfw_tensor::init::{seeded_rng, uniform};

    #[test]
    fn chained_pools_equal_direct_wide_pools() {
        for seed in 0..10 {
            let x = uniform(&[2, 3, 11, 9], -1.0, 1.0, &mut seeded_rng(seed));
            let p = |t: &Tensor| t.max_pool2d(5, 1, 2).unwrap();
            let twice = p(&p(&x));
            let thrice = p(&twice);
            assert_eq!(twice.data(), x.max_pool2d(9, 1, 4).unwrap().data());
            assert_eq!(thrice.data(), x.max_pool2d(13, 1, 6).unwrap().data());
        }
    }

    #[test]
    fn constant_input_gives_constant_same_size_output() {
        let mut store = ParamStore::new(0);
        let sppf = Sppf::new(&mut store, "sppf", 4).unwrap();
        let y = sppf
            .forward(&Ctx::eval(&store), &Tensor::full(&[1, 4, 6, 6], 0.3))
            .unwrap();
        assert_eq!(y.shape(), &[1, 4, 6, 6]);
        for plane in y.data().chunks(36) {
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }
}

//! Annotated images: synthetic generation, DOTA-style annotation text and
//! on-disk datasets.

pub mod dota;
pub mod io;
pub mod synth;

use rfw_tensor::Tensor;

use crate::boxloss::AABox;
use crate::error::{Error, Result};
use crate::rfas::MAX_STRIDE;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: AABox,
    pub difficult: bool,
}

impl GtBox {
    pub fn new(class_id: usize, bbox: AABox) -> Self {
        GtBox {
            class_id,
            bbox,
            difficult: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub id: String,
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    pub gts: Vec<GtBox>,
}

impl AnnotatedImage {
    pub fn new(id: impl Into<String>, image: Tensor, gts: Vec<GtBox>) -> Result<Self> {
        let id = id.into();
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::config(format!(
                "image {id} must be [3, H, W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(Error::config(format!(
                "image {id} is {h}x{w}; both sides must be positive multiples of {MAX_STRIDE}"
            )));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config(format!(
                "image {id} has values outside [0, 1]"
            )));
        }
        for g in &gts {
            if !g.bbox.inside(w as f64, h as f64) {
                return Err(Error::InvalidBox(format!(
                    "image {id}: box {:?} extends outside the {w}x{h} image",
                    g.bbox
                )));
            }
        }
        Ok(AnnotatedImage { id, image, gts })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Stacks equally sized images into one `[N, 3, H, W]` batch.
pub fn stack_images(items: &[&AnnotatedImage]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::config("cannot batch zero images"))?
        .image
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(items.len() * first.iter().product::<usize>());
    for it in items {
        if it.image.shape() != first.as_slice() {
            return Err(Error::config(format!(
                "image {} is {:?}, batch expects {first:?}",
                it.id,
                it.image.shape()
            )));
        }
        data.extend_from_slice(it.image.data());
    }
    Ok(Tensor::from_vec(
        data,
        &[items.len(), first[0], first[1], first[2]],
    )?)
}

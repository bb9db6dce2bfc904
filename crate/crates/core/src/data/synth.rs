//! Procedural scenes of filled squares, discs and triangles on a textured
//! background.

use rand::Rng;
use rfw_tensor::init::{seeded_rng, SeededRng};
use rfw_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, GtBox};
use crate::boxloss::AABox;
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 3] = ["square", "disc", "triangle"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Largest side counted as a small object.
    pub small_max: usize,
    /// Probability that an object is drawn from `[min_size, small_max]`.
    pub small_fraction: f64,
    /// Empty pixels kept between objects.
    pub gap: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 96,
            min_objects: 1,
            max_objects: 6,
            min_size: 8,
            max_size: 32,
            small_max: 16,
            small_fraction: 0.5,
            gap: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_objects == 0 || self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config(format!(
                "object count range {}..={} must be non-empty and start at 1 or more",
                self.min_objects, self.max_objects
            )));
        }
        if self.min_size == 0 || self.min_size > self.small_max || self.small_max >= self.max_size {
            return Err(Error::config(format!(
                "sizes must satisfy 0 < min_size <= small_max < max_size, got {} / {} / {}",
                self.min_size, self.small_max, self.max_size
            )));
        }
        if self.max_size + 2 * self.gap > self.image_size {
            return Err(Error::config(format!(
                "objects up to {} px do not fit a {} px image",
                self.max_size, self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return Err(Error::config("small_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `n` images, deterministic in `(n, seed, spec)`; image `i` depends only on
/// `seed` and `i`.
pub fn synth_generate(n: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<AnnotatedImage>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("dataset size must be positive"));
    }
    (0..n)
        .map(|i| {
            let mut rng = seeded_rng(seed);
            rng.set_stream(i as u64 + 1);
            render_scene(&format!("synth_{seed}_{i:05}"), spec, &mut rng)
        })
        .collect()
}

struct Canvas {
    size: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, color: [f64; 3]) {
        let plane = self.size * self.size;
        for (c, v) in color.into_iter().enumerate() {
            self.rgb[c * plane + y * self.size + x] = v;
        }
    }

    fn mean_color(&self, x0: usize, y0: usize, side: usize) -> [f64; 3] {
        let plane = self.size * self.size;
        let mut m = [0.0; 3];
        for (c, mc) in m.iter_mut().enumerate() {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    *mc += self.rgb[c * plane + y * self.size + x];
                }
            }
            *mc /= (side * side) as f64;
        }
        m
    }
}

fn background(size: usize, rng: &mut SeededRng) -> Canvas {
    // bilinear value noise on a coarse lattice plus fine grain
    let lattice = 7;
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let coarse: Vec<f64> = (0..3 * lattice * lattice)
        .map(|_| rng.gen_range(-0.12..0.12))
        .collect();
    let plane = size * size;
    let mut rgb = vec![0.0; 3 * plane];
    let cell = (size - 1) as f64 / (lattice - 1) as f64;
    for c in 0..3 {
        let lat = &coarse[c * lattice * lattice..(c + 1) * lattice * lattice];
        for y in 0..size {
            let fy = y as f64 / cell;
            let (y0, ty) = (
                (fy as usize).min(lattice - 2),
                fy - (fy as usize).min(lattice - 2) as f64,
            );
            for x in 0..size {
                let fx = x as f64 / cell;
                let (x0, tx) = (
                    (fx as usize).min(lattice - 2),
                    fx - (fx as usize).min(lattice - 2) as f64,
                );
                let at = |yy: usize, xx: usize| lat[yy * lattice + xx];
                let v = at(y0, x0) * (1.0 - tx) * (1.0 - ty)
                    + at(y0, x0 + 1) * tx * (1.0 - ty)
                    + at(y0 + 1, x0) * (1.0 - tx) * ty
                    + at(y0 + 1, x0 + 1) * tx * ty;
                let grain = rng.gen_range(-0.04..0.04);
                rgb[c * plane + y * size + x] = (base[c] + v + grain).clamp(0.0, 1.0);
            }
        }
    }
    Canvas { size, rgb }
}

/// Whether pixel centre `(px + 0.5, py + 0.5)` lies in the shape drawn in the
/// `side x side` square at `(x0, y0)`.
fn covers(class_id: usize, side: usize, px: usize, py: usize) -> bool {
    let s = side as f64;
    let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
    match class_id {
        0 => true,
        1 => {
            let r = s / 2.0;
            (u - r).powi(2) + (v - r).powi(2) <= r * r
        }
        // apex at the top centre, base along the bottom edge
        _ => (u - s / 2.0).abs() <= v / 2.0,
    }
}

fn contrasting_color(bg: [f64; 3], rng: &mut SeededRng) -> [f64; 3] {
    loop {
        let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let diff: f64 = c.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if diff >= 0.3 {
            return c;
        }
    }
}

fn render_scene(id: &str, spec: &SynthSpec, rng: &mut SeededRng) -> Result<AnnotatedImage> {
    let size = spec.image_size;
    let mut canvas = background(size, rng);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..count {
        let class_id = rng.gen_range(0..CLASS_NAMES.len());
        let side = if rng.gen_bool(spec.small_fraction) {
            rng.gen_range(spec.min_size..=spec.small_max)
        } else {
            rng.gen_range(spec.small_max + 1..=spec.max_size)
        };
        let clear = |x0: usize, y0: usize, placed: &[(usize, usize, usize)]| {
            placed.iter().all(|&(px, py, ps)| {
                x0 + side + spec.gap <= px
                    || px + ps + spec.gap <= x0
                    || y0 + side + spec.gap <= py
                    || py + ps + spec.gap <= y0
            })
        };
        // positions are redrawn, class and size are kept, so packing failures
        // do not skew the size histogram toward small objects
        let spot = (0..200).find_map(|_| {
            let x0 = rng.gen_range(spec.gap..=size - side - spec.gap);
            let y0 = rng.gen_range(spec.gap..=size - side - spec.gap);
            clear(x0, y0, &placed).then_some((x0, y0))
        });
        let Some((x0, y0)) = spot else { continue };
        let color = contrasting_color(canvas.mean_color(x0, y0, side), rng);
        for py in 0..side {
            for px in 0..side {
                if covers(class_id, side, px, py) {
                    canvas.paint(x0 + px, y0 + py, color);
                }
            }
        }
        placed.push((x0, y0, side));
        let (x0, y0, s) = (x0 as f64, y0 as f64, side as f64);
        gts.push(GtBox::new(
            class_id,
            AABox::from_corners(x0, y0, x0 + s, y0 + s)?,
        ));
    }
    let image = Tensor::from_vec(canvas.rgb, &[3, size, size])?;
    AnnotatedImage::new(id, image, gts)
}

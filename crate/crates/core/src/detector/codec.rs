//! Box encoding relative to grid cells.
//!
//! For cell `(i, j)` of a stride-`s` map,
//!
//! ```text
//! cx = (j + 0.5 + tx) * s      w = s * exp(tw)
//! cy = (i + 0.5 + ty) * s      h = s * exp(th)
//! ```
//!
//! so zero regressands decode to an `s x s` box on the cell centre. Log-sizes
//! are clamped to `±MAX_LOG_SIZE` before exponentiation.

use rfw_tensor::Real;

use super::head::HeadOutput;
use super::Detection;
use crate::boxloss::{AABox, Params};

pub const MAX_LOG_SIZE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub stride: usize,
}

impl Cell {
    pub fn center(&self) -> (f64, f64) {
        let s = self.stride as f64;
        ((self.col as f64 + 0.5) * s, (self.row as f64 + 0.5) * s)
    }

    /// The `s x s` box a zero prediction decodes to.
    pub fn prior(&self) -> AABox {
        let (cx, cy) = self.center();
        let s = self.stride as f64;
        AABox::new(cx, cy, s, s).expect("positive stride")
    }
}

pub fn decode_generic<T: Real>(raw: Params<T>, cell: Cell) -> Params<T> {
    let s = T::cst(cell.stride as f64);
    let lim = |t: T| t.max(T::cst(-MAX_LOG_SIZE)).min(T::cst(MAX_LOG_SIZE));
    [
        (T::cst(cell.col as f64 + 0.5) + raw[0]) * s,
        (T::cst(cell.row as f64 + 0.5) + raw[1]) * s,
        s * lim(raw[2]).exp(),
        s * lim(raw[3]).exp(),
    ]
}

pub fn decode_box(raw: [f64; 4], cell: Cell) -> AABox {
    let [cx, cy, w, h] = decode_generic(raw, cell);
    AABox::new(cx, cy, w, h).expect("decoded sizes are positive")
}

pub fn encode_box(b: &AABox, cell: Cell) -> [f64; 4] {
    let s = cell.stride as f64;
    [
        b.cx() / s - cell.col as f64 - 0.5,
        b.cy() / s - cell.row as f64 - 0.5,
        (b.w() / s).ln(),
        (b.h() / s).ln(),
    ]
}

/// Per-image detections with `sigmoid(max logit) >= score_threshold`.
pub fn decode(out: &HeadOutput, score_threshold: f64) -> Vec<Vec<Detection>> {
    let (n, k) = (out.batch(), out.num_classes());
    let mut result = vec![Vec::new(); n];
    for level in &out.levels {
        let (h, w) = level.grid();
        let hw = h * w;
        let (cls, boxes) = (level.cls.data(), level.boxes.data());
        for (b, dets) in result.iter_mut().enumerate() {
            for p in 0..hw {
                let mut best = (0, f64::NEG_INFINITY);
                for c in 0..k {
                    let v = cls[(b * k + c) * hw + p];
                    if v > best.1 {
                        best = (c, v);
                    }
                }
                let score = 1.0 / (1.0 + (-best.1).exp());
                if score < score_threshold || !score.is_finite() {
                    continue;
                }
                let raw = [0, 1, 2, 3].map(|j| boxes[(b * 4 + j) * hw + p]);
                if raw.iter().any(|v| !v.is_finite()) {
                    continue;
                }
                let cell = Cell {
                    row: p / w,
                    col: p % w,
                    stride: level.stride,
                };
                dets.push(Detection {
                    class_id: best.0,
                    score,
                    bbox: decode_box(raw, cell),
                });
            }
        }
    }
    result
}

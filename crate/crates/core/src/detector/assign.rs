//! Centre-based label assignment across the three strides.
//!
//! A ground truth goes to the stride whose canonical box size (the stride
//! itself, i.e. the size a zero prediction decodes to) is nearest to
//! `sqrt(w * h)` in log scale, ties to the smaller stride, and to the cell
//! containing its centre. When two ground truths claim one cell, the one with
//! the larger IoU against the cell's prior box wins, ties to the lower index.

use super::codec::Cell;
use crate::boxloss::{iou, AABox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LevelAssignment {
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    /// Ground-truth index per cell, row-major; `None` is background.
    pub cells: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub gt: usize,
    pub level: usize,
    pub cell: Cell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub levels: Vec<LevelAssignment>,
}

impl Assignment {
    /// Positive cells in level, row, column order.
    pub fn positives(&self) -> Vec<Positive> {
        let mut out = Vec::new();
        for (level, la) in self.levels.iter().enumerate() {
            for (p, slot) in la.cells.iter().enumerate() {
                if let Some(gt) = *slot {
                    out.push(Positive {
                        gt,
                        level,
                        cell: Cell {
                            row: p / la.cols,
                            col: p % la.cols,
                            stride: la.stride,
                        },
                    });
                }
            }
        }
        out
    }
}

/// Index into `strides` whose canonical size best matches the box.
pub fn choose_level(b: &AABox, strides: &[usize]) -> usize {
    let size = (b.w() * b.h()).sqrt().ln();
    let mut best = (0, f64::INFINITY);
    for (i, &s) in strides.iter().enumerate() {
        let d = (size - (s as f64).ln()).abs();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

pub fn assign_targets(
    gts: &[(usize, AABox)],
    image_h: usize,
    image_w: usize,
    strides: &[usize],
) -> Result<Assignment> {
    let mut levels: Vec<LevelAssignment> = strides
        .iter()
        .map(|&stride| {
            let (rows, cols) = (image_h.div_ceil(stride), image_w.div_ceil(stride));
            LevelAssignment {
                stride,
                rows,
                cols,
                cells: vec![None; rows * cols],
            }
        })
        .collect();
    for (g, (_, b)) in gts.iter().enumerate() {
        if !(b.cx() >= 0.0 && b.cy() >= 0.0 && b.cx() < image_w as f64 && b.cy() < image_h as f64) {
            return Err(Error::InvalidBox(format!(
                "ground truth {g} centred at ({}, {}) lies outside the {image_w}x{image_h} image",
                b.cx(),
                b.cy()
            )));
        }
        let level = choose_level(b, strides);
        let la = &mut levels[level];
        let s = la.stride as f64;
        let cell = Cell {
            row: ((b.cy() / s) as usize).min(la.rows - 1),
            col: ((b.cx() / s) as usize).min(la.cols - 1),
            stride: la.stride,
        };
        let slot = &mut la.cells[cell.row * la.cols + cell.col];
        let prior = cell.prior();
        *slot = match *slot {
            // earlier indices are visited first, so a strict comparison keeps
            // the lower index on ties
            Some(prev) if iou(&gts[prev].1, &prior) >= iou(b, &prior) => Some(prev),
            _ => Some(g),
        };
    }
    Ok(Assignment { levels })
}

//! DOTA-style annotation text: one object per line,
//! `x1 y1 x2 y2 x3 y3 x4 y4 class difficult`.
//!
//! Quadrilaterals become their axis-aligned bounding rectangles. Header lines
//! (`imagesource:...`, `gsd:...`) and `#` comments are skipped.

use std::fmt::Write as _;

use super::GtBox;
use crate::boxloss::AABox;
use crate::error::{Error, Result};

pub const DOTA_CLASSES: [&str; 15] = [
    "plane",
    "ship",
    "storage-tank",
    "baseball-diamond",
    "tennis-court",
    "basketball-court",
    "ground-track-field",
    "harbor",
    "bridge",
    "large-vehicle",
    "small-vehicle",
    "helicopter",
    "roundabout",
    "soccer-ball-field",
    "swimming-pool",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DotaRecord {
    pub class_name: String,
    pub class_id: usize,
    pub bbox: AABox,
    pub difficult: bool,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DotaParse {
    pub records: Vec<DotaRecord>,
    /// One message per skipped record with an unknown class.
    pub warnings: Vec<String>,
}

impl DotaParse {
    pub fn gts(&self) -> Vec<GtBox> {
        self.records
            .iter()
            .map(|r| GtBox {
                class_id: r.class_id,
                bbox: r.bbox,
                difficult: r.difficult,
            })
            .collect()
    }
}

fn is_header(line: &str) -> bool {
    line.starts_with('#') || line.starts_with("imagesource:") || line.starts_with("gsd:")
}

pub fn dota_parse(text: &str, classes: &[&str]) -> Result<DotaParse> {
    let mut out = DotaParse::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || is_header(line) {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 && fields.len() != 10 {
            return Err(err(format!(
                "expected 8 coordinates, a class name and a difficulty flag, found {} fields",
                fields.len()
            )));
        }
        let coords = fields[..8]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("coordinate {f:?} is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        let difficult = match fields.get(9) {
            None | Some(&"0") => false,
            Some(&"1") => true,
            Some(other) => return Err(err(format!("difficulty flag {other:?} must be 0 or 1"))),
        };
        let xs = [coords[0], coords[2], coords[4], coords[6]];
        let ys = [coords[1], coords[3], coords[5], coords[7]];
        let lo = |v: &[f64; 4]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = |v: &[f64; 4]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bbox = AABox::from_corners(lo(&xs), lo(&ys), hi(&xs), hi(&ys))
            .map_err(|e| err(format!("degenerate quadrilateral: {e}")))?;
        let name = fields[8];
        match classes.iter().position(|c| *c == name) {
            Some(class_id) => out.records.push(DotaRecord {
                class_name: name.to_string(),
                class_id,
                bbox,
                difficult,
                line: line_no,
            }),
            None => out.warnings.push(format!(
                "line {line_no}: unknown class {name:?}, record skipped"
            )),
        }
    }
    Ok(out)
}

/// Writes boxes as axis-aligned quadrilaterals, clockwise from the top-left.
///
/// Coordinates use the shortest representation that parses back to the same
/// value.
pub fn dota_write(gts: &[GtBox], classes: &[&str]) -> Result<String> {
    let mut out = String::new();
    for g in gts {
        let name = classes.get(g.class_id).ok_or_else(|| {
            Error::config(format!(
                "class id {} has no name among {} classes",
                g.class_id,
                classes.len()
            ))
        })?;
        let b = &g.bbox;
        let (x0, y0, x1, y1) = (b.x0(), b.y0(), b.x1(), b.y1());
        let _ = writeln!(
            out,
            "{x0:?} {y0:?} {x1:?} {y0:?} {x1:?} {y1:?} {x0:?} {y1:?} {name} {}",
            u8::from(g.difficult)
        );
    }
    Ok(out)
}

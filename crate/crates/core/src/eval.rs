//! Average precision with one-to-one greedy matching and all-point
//! interpolation (the area under the monotone precision envelope of the exact
//! precision/recall staircase, not the 11-point approximation).

use std::fmt::Write as _;

use crate::boxloss::{iou, AABox};
use crate::data::GtBox;
use crate::detector::Detection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    /// Ignore difficult ground truths and any detection matched to one.
    pub exclude_difficult: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            iou_threshold: 0.5,
            exclude_difficult: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_det: usize,
    pub ap: f64,
    /// Precision after each ranked detection.
    pub precision: Vec<f64>,
    /// Recall after each ranked detection.
    pub recall: Vec<f64>,
}

impl ClassResult {
    pub fn final_precision(&self) -> f64 {
        self.precision.last().copied().unwrap_or(0.0)
    }

    pub fn final_recall(&self) -> f64 {
        self.recall.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub per_class: Vec<ClassResult>,
    /// Mean AP over classes with at least one ground truth.
    pub map: f64,
}

/// One ranked detection: image index, score, box.
type Ranked = (usize, f64, AABox);

/// Precision/recall curve and AP for one class over many images.
fn class_curve(
    mut dets: Vec<Ranked>,
    gts: &[Vec<(AABox, bool)>],
    opts: &EvalOptions,
) -> (usize, Vec<f64>, Vec<f64>, f64) {
    let counted = |d: bool| !(opts.exclude_difficult && d);
    let num_gt: usize = gts
        .iter()
        .map(|g| g.iter().filter(|(_, d)| counted(*d)).count())
        .sum();
    dets.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut precision, mut recall) = (Vec::new(), Vec::new());
    for (img, _, b) in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, (g, _)) in gts[img].iter().enumerate() {
            if matched[img][j] {
                continue;
            }
            let o = iou(&b, g);
            if o >= opts.iou_threshold && best.map_or(true, |(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                matched[img][j] = true;
                if !counted(gts[img][j].1) {
                    continue;
                }
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if num_gt > 0 {
            tp as f64 / num_gt as f64
        } else {
            0.0
        });
    }
    let ap = if num_gt == 0 {
        0.0
    } else {
        area_under(&precision, &recall)
    };
    (num_gt, precision, recall, ap)
}

fn area_under(precision: &[f64], recall: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// AP of scored boxes against the ground truth of a single image and class.
pub fn compute_ap(dets: &[(f64, AABox)], gts: &[AABox], iou_threshold: f64) -> f64 {
    let ranked = dets.iter().map(|&(s, b)| (0, s, b)).collect();
    let gts = vec![gts.iter().map(|&g| (g, false)).collect()];
    let opts = EvalOptions {
        iou_threshold,
        exclude_difficult: false,
    };
    class_curve(ranked, &gts, &opts).3
}

/// Per-class AP over a set of images and their mean over classes present in
/// the ground truth.
pub fn compute_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    num_classes: usize,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(Error::config(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let ranked: Vec<Ranked> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| {
                ds.iter()
                    .filter(move |d| d.class_id == class_id)
                    .map(move |d| (i, d.score, d.bbox))
            })
            .collect();
        let class_gts: Vec<Vec<(AABox, bool)>> = gts
            .iter()
            .map(|g| {
                g.iter()
                    .filter(|g| g.class_id == class_id)
                    .map(|g| (g.bbox, g.difficult))
                    .collect()
            })
            .collect();
        let num_det = ranked.len();
        let (num_gt, precision, recall, ap) = class_curve(ranked, &class_gts, opts);
        per_class.push(ClassResult {
            class_id,
            num_gt,
            num_det,
            ap,
            precision,
            recall,
        });
    }
    let present: Vec<f64> = per_class
        .iter()
        .filter(|c| c.num_gt > 0)
        .map(|c| c.ap)
        .collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalResult { per_class, map })
}

pub const EVAL_HEADER: &str = "class,num_gt,num_det,ap,precision,recall";

impl EvalResult {
    /// One row per class, then a `mAP` row carrying the mean in the `ap`
    /// column.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for c in &self.per_class {
            let name = class_names.get(c.class_id).copied().unwrap_or("?");
            let _ = writeln!(
                out,
                "{name},{},{},{:?},{:?},{:?}",
                c.num_gt,
                c.num_det,
                c.ap,
                c.final_precision(),
                c.final_recall()
            );
        }
        let _ = writeln!(out, "mAP,,,{:?},,", self.map);
        out
    }
}

/// Summary row of an evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub class: String,
    pub num_gt: usize,
    pub num_det: usize,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Parses [`EvalResult::to_csv`] output into class rows and the mAP.
pub fn parse_eval_csv(text: &str) -> Result<(Vec<EvalRow>, f64)> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some(EVAL_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {EVAL_HEADER}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let bad = |m: String| Error::Parse {
            line: i + 1,
            message: m,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 columns, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        if f[0] == "mAP" {
            return Ok((rows, num(f[3])?));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        rows.push(EvalRow {
            class: f[0].to_string(),
            num_gt: int(f[1])?,
            num_det: int(f[2])?,
            ap: num(f[3])?,
            precision: num(f[4])?,
            recall: num(f[5])?,
        });
    }
    Err(Error::Parse {
        line: text.lines().count(),
        message: "missing mAP row".into(),
    })
}

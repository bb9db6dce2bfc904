//! Axis-aligned box geometry and the box regression losses.
//!
//! ```text
//! L_CIoU = 1 - IoU + d^2/c^2 + v^2 / ((1 - IoU) + v)
//! v      = 4/pi^2 * (atan(w_gt/h_gt) - atan(w/h))^2
//! W2^2   = |(cx_a, cy_a, w_a/2, h_a/2) - (cx_b, cy_b, w_b/2, h_b/2)|^2
//! L_nwd  = 1 - exp(-sqrt(W2^2) / C)
//! L_WCW  = gamma * L_CIoU + beta * L_nwd
//! ```
//!
//! `d` is the centre distance and `c` the diagonal of the smallest enclosing
//! box. Every formula is written once over [`Real`] so the same code yields
//! values on `f64` and exact derivatives on dual numbers.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rfw_tensor::{Dual, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NWD_CONSTANT: f64 = 12.8;

/// Axis-aligned box, centre plus size, in pixels. Always valid once built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AABox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl AABox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite box ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "box size {w}x{h} must be positive"
            )));
        }
        Ok(AABox { cx, cy, w, h })
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        AABox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn params(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> AABox {
        AABox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Scales centre and size about the origin.
    pub fn scaled(&self, s: f64) -> Result<AABox> {
        AABox::new(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    /// True when the box lies within `[0, width] x [0, height]`.
    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x0() >= 0.0 && self.y0() >= 0.0 && self.x1() <= width && self.y1() <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WcwConfig {
    pub gamma: f64,
    pub beta: f64,
    pub nwd_constant: f64,
}

impl Default for WcwConfig {
    fn default() -> Self {
        WcwConfig {
            gamma: 0.5,
            beta: 0.5,
            nwd_constant: DEFAULT_NWD_CONSTANT,
        }
    }
}

impl WcwConfig {
    pub fn new(gamma: f64, beta: f64, nwd_constant: f64) -> Result<Self> {
        let cfg = WcwConfig {
            gamma,
            beta,
            nwd_constant,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma.is_finite()
            && self.beta.is_finite()
            && self.gamma >= 0.0
            && self.beta >= 0.0;
        if !ok || self.gamma + self.beta <= 0.0 {
            return Err(Error::config(format!(
                "loss weights gamma = {}, beta = {} must be non-negative with a positive sum",
                self.gamma, self.beta
            )));
        }
        check_constant(self.nwd_constant)
    }
}

fn check_constant(c: f64) -> Result<()> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::config(format!(
            "nwd constant must be positive, got {c}"
        )));
    }
    Ok(())
}

/// Box as `[cx, cy, w, h]` over any [`Real`].
pub type Params<T> = [T; 4];

fn corners<T: Real>(b: &Params<T>) -> [T; 4] {
    let half = T::cst(0.5);
    [
        b[0] - b[2] * half,
        b[1] - b[3] * half,
        b[0] + b[2] * half,
        b[1] + b[3] * half,
    ]
}

pub fn iou_generic<T: Real>(a: &Params<T>, b: &Params<T>) -> T {
    let zero = T::cst(0.0);
    let (ca, cb) = (corners(a), corners(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(zero);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(zero);
    let inter = iw * ih;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

pub fn ciou_generic<T: Real>(pred: &Params<T>, gt: &Params<T>) -> T {
    let one = T::cst(1.0);
    let iou = iou_generic(pred, gt);
    let (cp, cg) = (corners(pred), corners(gt));
    let d2 = (pred[0] - gt[0]).square() + (pred[1] - gt[1]).square();
    let c2 = (cp[2].max(cg[2]) - cp[0].min(cg[0])).square()
        + (cp[3].max(cg[3]) - cp[1].min(cg[1])).square();
    let v =
        T::cst(4.0 / (PI * PI)) * ((gt[2] / gt[3]).atan() - (pred[2] / pred[3]).atan()).square();
    let denom = (one - iou) + v;
    // identical aspect ratios and full overlap: the aspect term is 0/0, taken as 0
    let aspect = if denom.value() > 0.0 {
        v.square() / denom
    } else {
        T::cst(0.0)
    };
    one - iou + d2 / c2 + aspect
}

pub fn wasserstein_sq_generic<T: Real>(a: &Params<T>, b: &Params<T>) -> T {
    let half = T::cst(0.5);
    (a[0] - b[0]).square()
        + (a[1] - b[1]).square()
        + (a[2] * half - b[2] * half).square()
        + (a[3] * half - b[3] * half).square()
}

pub fn nwd_generic<T: Real>(a: &Params<T>, b: &Params<T>, c: f64) -> T {
    T::cst(1.0) - (-wasserstein_sq_generic(a, b).sqrt() / T::cst(c)).exp()
}

pub fn wcw_generic<T: Real>(pred: &Params<T>, gt: &Params<T>, cfg: &WcwConfig) -> T {
    // a zero weight skips its term entirely, so the degenerate settings
    // reproduce the single losses exactly
    match (cfg.gamma == 0.0, cfg.beta == 0.0) {
        (false, true) => T::cst(cfg.gamma) * ciou_generic(pred, gt),
        (true, false) => T::cst(cfg.beta) * nwd_generic(pred, gt, cfg.nwd_constant),
        _ => {
            T::cst(cfg.gamma) * ciou_generic(pred, gt)
                + T::cst(cfg.beta) * nwd_generic(pred, gt, cfg.nwd_constant)
        }
    }
}

pub fn iou(a: &AABox, b: &AABox) -> f64 {
    iou_generic(&a.params(), &b.params())
}

pub fn ciou_loss(pred: &AABox, gt: &AABox) -> f64 {
    ciou_generic(&pred.params(), &gt.params())
}

pub fn wasserstein_sq(a: &AABox, b: &AABox) -> f64 {
    wasserstein_sq_generic(&a.params(), &b.params())
}

pub fn nwd_loss(a: &AABox, b: &AABox, c: f64) -> Result<f64> {
    check_constant(c)?;
    Ok(nwd_generic(&a.params(), &b.params(), c))
}

pub fn wcw_loss(pred: &AABox, gt: &AABox, cfg: &WcwConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(wcw_generic(&pred.params(), &gt.params(), cfg))
}

/// Mean of `loss(decode(row), target)` over the rows of an `[P, 4]` tensor,
/// differentiated exactly with respect to every row entry.
///
/// `decode` maps row `i`'s four raw values to box parameters; `loss` is one
/// of the generic formulas above. An empty input gives a constant zero.
pub fn mean_box_loss<D, L>(raw: &Tensor, targets: &[AABox], decode: D, loss: L) -> Result<Tensor>
where
    D: Fn(usize, Params<Dual<4>>) -> Params<Dual<4>>,
    L: Fn(&Params<Dual<4>>, &Params<Dual<4>>) -> Dual<4>,
{
    let rows = targets.len();
    if raw.shape() != [rows, 4] {
        return Err(Error::config(format!(
            "box loss expects [{rows}, 4] regressands, got {:?}",
            raw.shape()
        )));
    }
    if rows == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let mut total = 0.0;
    let mut grads = vec![0.0; rows * 4];
    for (i, gt) in targets.iter().enumerate() {
        let r = &raw.data()[i * 4..i * 4 + 4];
        let vars = [0, 1, 2, 3].map(|j| Dual::var(r[j], j));
        let g = gt.params().map(Dual::constant);
        let l = loss(&decode(i, vars), &g);
        total += l.re;
        grads[i * 4..i * 4 + 4].copy_from_slice(&l.eps);
    }
    let scale = 1.0 / rows as f64;
    Ok(Tensor::from_op(
        vec![total * scale],
        vec![1],
        vec![raw.clone()],
        move |_, g| vec![Some(grads.iter().map(|d| d * g[0] * scale).collect())],
    ))
}

/// Mean WCW loss of `[P, 4]` predicted `(cx, cy, w, h)` rows against targets.
pub fn wcw_loss_mean(pred: &Tensor, targets: &[AABox], cfg: &WcwConfig) -> Result<Tensor> {
    cfg.validate()?;
    mean_box_loss(pred, targets, |_, p| p, |p, g| wcw_generic(p, g, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityRow {
    pub shift_x: f64,
    pub shift_y: f64,
    pub iou: f64,
    pub nwd_similarity: f64,
}

/// IoU and `exp(-W2 / C)` between a `box_size` square and its shifted copy.
pub fn sensitivity_curve(
    box_size: f64,
    shifts: &[(f64, f64)],
    c: f64,
) -> Result<Vec<SensitivityRow>> {
    check_constant(c)?;
    let base = AABox::new(0.0, 0.0, box_size, box_size)?;
    Ok(shifts
        .iter()
        .map(|&(dx, dy)| {
            let moved = base.translated(dx, dy);
            SensitivityRow {
                shift_x: dx,
                shift_y: dy,
                iou: iou(&base, &moved),
                nwd_similarity: (-wasserstein_sq(&base, &moved).sqrt() / c).exp(),
            }
        })
        .collect())
}

/// Integer axial shifts `(i, 0)` then diagonal shifts `(i, i)` for `i` in `0..=max`.
pub fn standard_shifts(max: usize) -> Vec<(f64, f64)> {
    let axial = (0..=max).map(|i| (i as f64, 0.0));
    let diagonal = (0..=max).map(|i| (i as f64, i as f64));
    axial.chain(diagonal).collect()
}

pub const SENSITIVITY_HEADER: &str = "shift_x,shift_y,iou,nwd_similarity";

pub fn sensitivity_to_csv(rows: &[SensitivityRow]) -> String {
    let mut out = String::from(SENSITIVITY_HEADER);
    out.push('\n');
    for r in rows {
        // `{:?}` prints the shortest string that parses back to the same f64
        let _ = writeln!(
            out,
            "{:?},{:?},{:?},{:?}",
            r.shift_x, r.shift_y, r.iou, r.nwd_similarity
        );
    }
    out
}

pub fn sensitivity_from_csv(text: &str) -> Result<Vec<SensitivityRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SENSITIVITY_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {SENSITIVITY_HEADER}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let vals: Vec<f64> = l
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if vals.len() != 4 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected 4 columns, found {}", vals.len()),
                });
            }
            Ok(SensitivityRow {
                shift_x: vals[0],
                shift_y: vals[1],
                iou: vals[2],
                nwd_similarity: vals[3],
            })
        })
        .collect()
}

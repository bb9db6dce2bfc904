//! Losses, the optimizer and the training loop.
//!
//! The classification loss is binary cross-entropy summed over every cell and
//! class of all three levels and divided by the number of positive cells;
//! the box loss is the mean WCW loss over positive cells; the total is
//! `cls + box_weight * box`. Parameters are updated with momentum SGD under
//! a cosine learning-rate decay; weight decay applies to weight tensors only.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rfw_tensor::init::seeded_rng;
use rfw_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::assign::{assign_targets, Positive};
use super::codec::decode_generic;
use super::head::HeadOutput;
use super::{Detection, Detector, DetectorConfig};
use crate::boxloss::{mean_box_loss, wcw_generic, AABox, WcwConfig};
use crate::data::{stack_images, AnnotatedImage};
use crate::error::{Error, Result};
use crate::eval::{compute_map, EvalOptions, EvalResult};
use crate::layers::{apply_stat_updates, Ctx, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Applied to tensors of rank 2 and up; biases and norm scales are exempt.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub box_weight: f64,
    /// Focal modulation of the classification loss; 0 is plain BCE.
    pub focal_gamma: f64,
    /// Linear warm-up steps before the cosine decay; 0 disables.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Decay of the exponential moving average of the weights used for
    /// inference; 0 disables and inference uses the raw weights.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            box_weight: 2.0,
            focal_gamma: 0.0,
            warmup_steps: 30,
            grad_clip: 10.0,
            ema_decay: 0.995,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("box_weight", self.box_weight),
            ("focal_gamma", self.focal_gamma),
            ("grad_clip", self.grad_clip),
        ] {
            if !finite_nonneg(v) {
                return Err(Error::config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub cls: Tensor,
    pub box_loss: Tensor,
    pub total: Tensor,
    pub num_pos: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub cls: f64,
    pub box_loss: f64,
    pub total: f64,
}

/// Ground truths of one image as `(class, box)` pairs.
pub type ImageTargets = Vec<(usize, AABox)>;

pub fn image_targets(img: &AnnotatedImage) -> ImageTargets {
    img.gts.iter().map(|g| (g.class_id, g.bbox)).collect()
}

/// Losses of raw head outputs against per-image targets.
pub fn compute_losses(
    out: &HeadOutput,
    targets: &[ImageTargets],
    image_size: (usize, usize),
    wcw: &WcwConfig,
    box_weight: f64,
    focal_gamma: f64,
) -> Result<LossTerms> {
    let (n, k) = (out.batch(), out.num_classes());
    if targets.len() != n {
        return Err(Error::config(format!(
            "{} target lists for a batch of {n}",
            targets.len()
        )));
    }
    let strides: Vec<usize> = out.levels.iter().map(|l| l.stride).collect();
    let positives: Vec<Vec<Positive>> = targets
        .iter()
        .map(|t| Ok(assign_targets(t, image_size.0, image_size.1, &strides)?.positives()))
        .collect::<Result<_>>()?;
    let num_pos: usize = positives.iter().map(Vec::len).sum();

    let mut cls = Tensor::scalar(0.0);
    let mut box_rows = Vec::new();
    let mut box_targets = Vec::new();
    let mut cells = Vec::new();
    for (li, level) in out.levels.iter().enumerate() {
        let (h, w) = level.grid();
        let hw = h * w;
        if level.cls.shape() != [n, k, h, w] || level.boxes.shape() != [n, 4, h, w] {
            return Err(Error::config(format!(
                "level {li} outputs {:?} / {:?} do not match the grid",
                level.cls.shape(),
                level.boxes.shape()
            )));
        }
        let mut cls_t = vec![0.0; n * k * hw];
        let mut gather = Vec::new();
        for (b, pos) in positives.iter().enumerate() {
            for p in pos.iter().filter(|p| p.level == li) {
                let at = p.cell.row * w + p.cell.col;
                let (class_id, gt) = targets[b][p.gt];
                if class_id >= k {
                    return Err(Error::config(format!(
                        "class id {class_id} outside {k} classes"
                    )));
                }
                cls_t[(b * k + class_id) * hw + at] = 1.0;
                gather.extend((0..4).map(|c| (b * 4 + c) * hw + at));
                box_targets.push(gt);
                cells.push(p.cell);
            }
        }
        cls = cls.add(&level.cls.bce_with_logits_sum(&cls_t, focal_gamma)?)?;
        if !gather.is_empty() {
            let rows = gather.len() / 4;
            box_rows.push(level.boxes.take(gather, &[rows, 4])?);
        }
    }
    let cls = cls.mul_scalar(1.0 / num_pos.max(1) as f64);
    let raw = match box_rows.len() {
        0 => Tensor::zeros(&[0, 4]),
        _ => Tensor::concat(&box_rows.iter().collect::<Vec<_>>(), 0)?,
    };
    let box_loss = mean_box_loss(
        &raw,
        &box_targets,
        |i, r| decode_generic(r, cells[i]),
        |p, g| wcw_generic(p, g, wcw),
    )?;
    let total = cls.add(&box_loss.mul_scalar(box_weight))?;
    Ok(LossTerms {
        cls,
        box_loss,
        total,
        num_pos,
    })
}

/// Model, parameters and optimizer state.
pub struct Trainer {
    pub store: ParamStore,
    pub model: Detector,
    pub config: TrainConfig,
    pub wcw: WcwConfig,
    velocity: HashMap<ParamId, Vec<f64>>,
    /// Weight average for inference, when enabled.
    ema: Option<ParamStore>,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Steps over which the cosine schedule decays to zero.
    pub total_steps: usize,
}

impl Trainer {
    pub fn new(
        model_config: &DetectorConfig,
        config: &TrainConfig,
        wcw: &WcwConfig,
        total_steps: usize,
    ) -> Result<Self> {
        config.validate()?;
        wcw.validate()?;
        let mut store = ParamStore::new(config.seed);
        let model = Detector::new(&mut store, model_config)?;
        let ema = (config.ema_decay > 0.0).then(|| store.clone());
        Ok(Trainer {
            ema,
            store,
            model,
            config: config.clone(),
            wcw: *wcw,
            velocity: HashMap::new(),
            step: 0,
            epoch: 0,
            total_steps: total_steps.max(1),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        let lr = self.config.lr;
        let warm = self.config.warmup_steps;
        if self.step < warm {
            return lr * (self.step + 1) as f64 / warm as f64;
        }
        let t = ((self.step - warm) as f64 / self.total_steps.saturating_sub(warm).max(1) as f64)
            .min(1.0);
        lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&AnnotatedImage], batch_id: usize) -> Result<StepLosses> {
        let images = stack_images(batch)?;
        let size = (batch[0].height(), batch[0].width());
        let targets: Vec<ImageTargets> = batch.iter().map(|img| image_targets(img)).collect();
        self.store.attach_gradients();
        let (losses, updates) = {
            let ctx = Ctx::train(&self.store);
            let out = self.model.forward(&ctx, &images)?;
            let terms = compute_losses(
                &out,
                &targets,
                size,
                &self.wcw,
                self.config.box_weight,
                self.config.focal_gamma,
            )?;
            let losses = StepLosses {
                cls: terms.cls.item()?,
                box_loss: terms.box_loss.item()?,
                total: terms.total.item()?,
            };
            for (term, value) in [
                ("cls loss", losses.cls),
                ("box loss", losses.box_loss),
                ("total loss", losses.total),
            ] {
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        batch: batch_id,
                        term,
                        value,
                    });
                }
            }
            terms.total.backward()?;
            (losses, ctx.take_updates())
        };
        self.apply_gradients()?;
        apply_stat_updates(&mut self.store, &updates);
        self.store.detach_all();
        self.step += 1;
        self.update_ema()?;
        Ok(losses)
    }

    fn apply_gradients(&mut self) -> Result<()> {
        let ids = self.store.trainable_ids();
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                let t = self.store.get(id);
                t.grad().unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: self.step,
                term: "gradient norm",
                value: norm,
            });
        }
        let clip = self.config.grad_clip;
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        let lr = self.learning_rate();
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for (id, g) in ids.into_iter().zip(grads) {
            let p = self.store.get(id);
            // biases and norm scales are not decayed
            let wd = if p.shape().len() > 1 { wd } else { 0.0 };
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![0.0; g.len()]);
            let mut data = p.to_vec();
            for ((x, vi), gi) in data.iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = mu * *vi + gi * scale + wd * *x;
                *x -= lr * *vi;
            }
            if let Some(&bad) = data.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    batch: self.step,
                    term: "parameter update",
                    value: bad,
                });
            }
            let shape = p.shape().to_vec();
            self.store.set(id, Tensor::from_vec(data, &shape)?);
        }
        Ok(())
    }

    /// Parameters to run inference with: the weight average if enabled.
    pub fn inference_store(&self) -> &ParamStore {
        self.ema.as_ref().unwrap_or(&self.store)
    }

    fn update_ema(&mut self) -> Result<()> {
        let Some(ema) = self.ema.as_mut() else {
            return Ok(());
        };
        // ramped so the average is not dominated by the initial weights
        let d = self.config.ema_decay * (1.0 - (-(self.step as f64) / EMA_RAMP_STEPS).exp());
        for id in self.store.ids().collect::<Vec<_>>() {
            let cur = self.store.get(id);
            let avg: Vec<f64> = ema
                .get(id)
                .data()
                .iter()
                .zip(cur.data())
                .map(|(a, c)| d * a + (1.0 - d) * c)
                .collect();
            ema.set(id, Tensor::from_vec(avg, cur.shape())?);
        }
        Ok(())
    }

    /// One pass over `data` in a seeded, epoch-specific order.
    ///
    /// `log` receives `(step, losses)` after every update.
    pub fn train_epoch(
        &mut self,
        data: &[AnnotatedImage],
        mut log: impl FnMut(usize, &StepLosses),
    ) -> Result<Vec<StepLosses>> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = seeded_rng(self.config.seed);
        rng.set_stream(1_000_000 + self.epoch as u64);
        order.shuffle(&mut rng);
        let mut history = Vec::new();
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&AnnotatedImage> = chunk.iter().map(|&i| &data[i]).collect();
            let losses = self.train_step(&batch, b)?;
            log(self.step, &losses);
            history.push(losses);
        }
        self.epoch += 1;
        Ok(history)
    }

    /// Parameters plus optimizer state for resuming.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut entries = self.store.to_entries();
        let mut ids: Vec<&ParamId> = self.velocity.keys().collect();
        ids.sort_by_key(|id| self.store.name(**id).to_string());
        for &id in ids {
            let v = &self.velocity[&id];
            let shape = self.store.get(id).shape().to_vec();
            entries.push((
                format!("{VELOCITY_PREFIX}{}", self.store.name(id)),
                Tensor::from_vec(v.clone(), &shape).expect("velocity matches parameter"),
            ));
        }
        if let Some(ema) = &self.ema {
            entries.extend(
                ema.to_entries()
                    .into_iter()
                    .map(|(n, t)| (format!("{EMA_PREFIX}{n}"), t)),
            );
        }
        let state = vec![self.step as f64, self.epoch as f64, self.total_steps as f64];
        entries.push((
            STATE_ENTRY.to_string(),
            Tensor::from_vec(state, &[3]).expect("three values"),
        ));
        entries
    }

    pub fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let params: Vec<(String, Tensor)> = entries
            .iter()
            .filter(|(n, _)| {
                !n.starts_with(VELOCITY_PREFIX) && !n.starts_with(EMA_PREFIX) && n != STATE_ENTRY
            })
            .cloned()
            .collect();
        self.store.load_entries(&params)?;
        if let Some(ema) = self.ema.as_mut() {
            ema.load_entries(&ema_entries(entries).unwrap_or(params))?;
        }
        self.velocity.clear();
        for (name, t) in entries {
            if let Some(pname) = name.strip_prefix(VELOCITY_PREFIX) {
                let id = self.store.id(pname).ok_or_else(|| {
                    Error::Checkpoint(format!("velocity for unknown parameter {pname}"))
                })?;
                self.velocity.insert(id, t.to_vec());
            } else if name == STATE_ENTRY {
                let s = t.data();
                if s.len() != 3 {
                    return Err(Error::Checkpoint("malformed trainer state".into()));
                }
                self.step = s[0] as usize;
                self.epoch = s[1] as usize;
                self.total_steps = s[2] as usize;
            }
        }
        Ok(())
    }
}

const VELOCITY_PREFIX: &str = "optim.velocity.";
const EMA_PREFIX: &str = "ema.";
const EMA_RAMP_STEPS: f64 = 100.0;

/// The averaged weights stored in checkpoint `entries`, if any, under their
/// parameter names.
pub fn ema_entries(entries: &[(String, Tensor)]) -> Option<Vec<(String, Tensor)>> {
    let found: Vec<(String, Tensor)> = entries
        .iter()
        .filter_map(|(n, t)| {
            n.strip_prefix(EMA_PREFIX)
                .map(|p| (p.to_string(), t.clone()))
        })
        .collect();
    (!found.is_empty()).then_some(found)
}
const STATE_ENTRY: &str = "optim.state";

/// Detections for every image, run in inference mode in chunks of `batch`.
pub fn predict(
    model: &Detector,
    store: &ParamStore,
    data: &[AnnotatedImage],
    batch: usize,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    let ctx = Ctx::eval(store);
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch.max(1)) {
        let refs: Vec<&AnnotatedImage> = chunk.iter().collect();
        out.extend(model.detect(&ctx, &stack_images(&refs)?, score_threshold, nms_iou)?);
    }
    Ok(out)
}

/// mAP of `model` on `data`.
pub fn evaluate(
    model: &Detector,
    store: &ParamStore,
    data: &[AnnotatedImage],
    opts: &EvalOptions,
) -> Result<EvalResult> {
    let dets = predict(model, store, data, 16, EVAL_SCORE_THRESHOLD, NMS_IOU)?;
    let gts: Vec<_> = data.iter().map(|d| d.gts.clone()).collect();
    compute_map(&dets, &gts, model.config.num_classes, opts)
}

pub const EVAL_SCORE_THRESHOLD: f64 = 0.01;
pub const NMS_IOU: f64 = 0.5;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rfw_tensor::checkpoint;
use rfwnet::boxloss::{
    sensitivity_curve, sensitivity_to_csv, standard_shifts, SensitivityRow, WcwConfig,
};
use rfwnet::checks::{gradient_suite, SuiteEntry};
use rfwnet::data::io::{load_dataset, planes, save_dataset, write_pgm};
use rfwnet::data::synth::{synth_generate, CLASS_NAMES};
use rfwnet::data::AnnotatedImage;
use rfwnet::detector::train::{ema_entries, evaluate, StepLosses, Trainer};
use rfwnet::detector::Detector;
use rfwnet::eval::EvalResult;
use rfwnet::layers::{Ctx, ParamStore};

use crate::config::RFWNetConfig;
use crate::error::{CliError, CliResult};

/// The (gamma, beta) schedule of the loss-weight ablation.
pub const ABLATION_ROWS: [(f64, f64); 7] = [
    (1.0, 0.0),
    (0.9, 0.1),
    (0.8, 0.2),
    (0.7, 0.3),
    (0.6, 0.4),
    (0.5, 0.5),
    (0.0, 1.0),
];

pub struct Datasets {
    pub train: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
}

/// `dataset_dir/{train,val}` when configured, otherwise the synthetic sets.
pub fn load_data(cfg: &RFWNetConfig) -> CliResult<Datasets> {
    match &cfg.paths.dataset_dir {
        Some(dir) => {
            let load = |split: &str| -> CliResult<Vec<AnnotatedImage>> {
                let images = load_dataset(&dir.join(split)).map_err(|e| {
                    CliError::Validation(format!("{}: {e}", dir.join(split).display()))
                })?;
                if images.is_empty() {
                    return Err(CliError::Validation(format!(
                        "{} holds no images",
                        dir.join(split).display()
                    )));
                }
                Ok(images)
            };
            Ok(Datasets {
                train: load("train")?,
                val: load("val")?,
            })
        }
        None => Ok(Datasets {
            train: synth_generate(cfg.data.train_images, cfg.data.train_seed, &cfg.data.synth)?,
            val: synth_generate(cfg.data.val_images, cfg.data.val_seed, &cfg.data.synth)?,
        }),
    }
}

/// Writes the synthetic train and val sets as dataset directories.
pub fn cmd_generate(cfg: &RFWNetConfig, dir: &Path) -> CliResult<(usize, usize)> {
    let train = synth_generate(cfg.data.train_images, cfg.data.train_seed, &cfg.data.synth)?;
    let val = synth_generate(cfg.data.val_images, cfg.data.val_seed, &cfg.data.synth)?;
    save_dataset(&dir.join("train"), &train, &CLASS_NAMES)?;
    save_dataset(&dir.join("val"), &val, &CLASS_NAMES)?;
    Ok((train.len(), val.len()))
}

pub struct GradcheckReport {
    pub entries: Vec<SuiteEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&SuiteEntry> {
        self.entries
            .iter()
            .filter(|e| !e.passes(self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.report.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
        for e in &self.entries {
            let verdict = if e.passes(self.tolerance) {
                "ok"
            } else {
                "FAIL"
            };
            let _ = writeln!(
                out,
                "{:width$}  {:>10.3e}  {:>7}  {verdict}",
                e.name, e.report.max_rel_err, e.report.checked
            );
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{verdict}: {} checks, max rel. err {:.3e}, tolerance {:.1e}",
            self.entries.len(),
            self.max_rel_err(),
            self.tolerance
        );
        out
    }
}

pub fn cmd_gradcheck(seed: u64, tolerance: f64) -> CliResult<GradcheckReport> {
    if !(tolerance >= 0.0) {
        return Err(CliError::Validation(format!(
            "tolerance must be non-negative, got {tolerance}"
        )));
    }
    Ok(GradcheckReport {
        entries: gradient_suite(seed)?,
        tolerance,
    })
}

pub struct SensitivityOutput {
    pub rows: Vec<SensitivityRow>,
    /// Box size, constant and shifts all doubled.
    pub scaled: Vec<SensitivityRow>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_sensitivity(
    box_size: f64,
    c: f64,
    max_shift: usize,
    out_dir: &Path,
) -> CliResult<SensitivityOutput> {
    let shifts = standard_shifts(max_shift);
    let rows = sensitivity_curve(box_size, &shifts, c)?;
    let doubled: Vec<(f64, f64)> = shifts.iter().map(|&(x, y)| (2.0 * x, 2.0 * y)).collect();
    let scaled = sensitivity_curve(2.0 * box_size, &doubled, 2.0 * c)?;
    create_dir(out_dir)?;
    let files = vec![
        out_dir.join("sensitivity.csv"),
        out_dir.join("sensitivity_scaled.csv"),
        out_dir.join("sensitivity.svg"),
    ];
    write_file(&files[0], &sensitivity_to_csv(&rows))?;
    write_file(&files[1], &sensitivity_to_csv(&scaled))?;
    write_file(&files[2], &sensitivity_svg(&rows, box_size, c))?;
    Ok(SensitivityOutput {
        rows,
        scaled,
        files,
    })
}

/// Line chart of both measures against the per-axis shift, axial and
/// diagonal sweeps.
pub fn sensitivity_svg(rows: &[SensitivityRow], box_size: f64, c: f64) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let max_shift = rows.iter().map(|r| r.shift_x).fold(1.0, f64::max);
    let px = |s: f64| m + (w - 2.0 * m) * s / max_shift;
    let py = |v: f64| h - m - (h - 2.0 * m) * v;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{box_size} px square, C = {c}</text>",
        w / 2.0
    );
    let _ = writeln!(
        svg,
        "<path d=\"M{m} {m} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        h - m,
        w - m
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>",
            m - 6.0,
            py(v) + 4.0
        );
    }
    let ticks = max_shift as usize;
    for s in (0..=ticks).step_by(4.max(ticks / 4)) {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{s}</text>",
            px(s as f64),
            h - m + 16.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">shift (px per axis)</text>",
        w / 2.0,
        h - 12.0
    );
    let series: [(&str, &str, bool, fn(&SensitivityRow) -> f64); 4] = [
        ("IoU, axial", "#d62728", false, |r| r.iou),
        ("NWD, axial", "#1f77b4", false, |r| r.nwd_similarity),
        ("IoU, diagonal", "#d62728", true, |r| r.iou),
        ("NWD, diagonal", "#1f77b4", true, |r| r.nwd_similarity),
    ];
    for (i, (label, color, diagonal, value)) in series.iter().enumerate() {
        let mut sweep: Vec<&SensitivityRow> = rows
            .iter()
            .filter(|r| {
                if *diagonal {
                    r.shift_x == r.shift_y
                } else {
                    r.shift_y == 0.0
                }
            })
            .collect();
        sweep.sort_by(|a, b| a.shift_x.total_cmp(&b.shift_x));
        sweep.dedup_by(|a, b| a.shift_x == b.shift_x);
        let points: Vec<String> = sweep
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.shift_x), py(value(r))))
            .collect();
        let dash = if *diagonal {
            " stroke-dasharray=\"6 4\""
        } else {
            ""
        };
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"2\"{dash}/>",
            points.join(" ")
        );
        let ly = m + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>",
            w - m - 150.0,
            w - m - 120.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\">{label}</text>",
            w - m - 114.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls: f64,
    pub box_loss: f64,
    pub total: f64,
    pub val_map: f64,
}

pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub final_eval: EvalResult,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub const STEP_LOG_HEADER: &str = "step,cls,box,total";
pub const EPOCH_LOG_HEADER: &str = "epoch,cls,box,total,val_map";

fn steps_per_epoch(cfg: &RFWNetConfig, n: usize) -> usize {
    n.div_ceil(cfg.train.batch_size)
}

fn new_trainer(
    cfg: &RFWNetConfig,
    loss: &WcwConfig,
    epochs: usize,
    n: usize,
) -> CliResult<Trainer> {
    let mut train = cfg.train.clone();
    train.epochs = epochs;
    Ok(Trainer::new(
        &cfg.detector(),
        &train,
        loss,
        epochs * steps_per_epoch(cfg, n),
    )?)
}

pub fn read_checkpoint(path: &Path) -> CliResult<Vec<(String, rfw_tensor::Tensor)>> {
    checkpoint::load(path).map_err(|e| {
        CliError::Validation(format!(
            "refusing checkpoint {} (this build reads format version {}): {e}",
            path.display(),
            checkpoint::VERSION
        ))
    })
}

/// Keeps the rows of a step log up to and including `step`.
fn truncate_log(text: &str, header: &str, keep: impl Fn(usize) -> bool) -> String {
    let mut out = format!("{header}\n");
    for line in text.lines().skip(1) {
        let key = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
        if key.is_some_and(&keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint when one exists.
    pub resume: bool,
    /// Stop after this many epochs in this invocation.
    pub max_epochs: Option<usize>,
}

/// Trains on the configured data, checkpointing after every epoch.
///
/// A run split by `max_epochs` and continued with `resume` ends with the same
/// checkpoint and logs as an uninterrupted one.
pub fn cmd_train(
    cfg: &RFWNetConfig,
    opts: TrainOptions,
    mut progress: impl FnMut(&EpochRecord),
) -> CliResult<TrainOutcome> {
    let data = load_data(cfg)?;
    let out_dir = &cfg.paths.output_dir;
    create_dir(out_dir)?;
    let ckpt = cfg.checkpoint_path();
    let log_path = out_dir.join("train_log.csv");
    let epoch_path = out_dir.join("epochs.csv");
    let mut trainer = new_trainer(cfg, &cfg.loss, cfg.train.epochs, data.train.len())?;
    let mut history = Vec::new();
    if opts.resume && ckpt.exists() {
        trainer.restore(&read_checkpoint(&ckpt)?)?;
        let step = trainer.step;
        let epoch = trainer.epoch;
        let logged = fs::read_to_string(&log_path).unwrap_or_default();
        write_file(
            &log_path,
            &truncate_log(&logged, STEP_LOG_HEADER, |s| s <= step),
        )?;
        let epochs = fs::read_to_string(&epoch_path).unwrap_or_default();
        let kept = truncate_log(&epochs, EPOCH_LOG_HEADER, |e| e < epoch);
        history = parse_epoch_log(&kept)?;
        write_file(&epoch_path, &kept)?;
    } else {
        write_file(&log_path, &format!("{STEP_LOG_HEADER}\n"))?;
        write_file(&epoch_path, &format!("{EPOCH_LOG_HEADER}\n"))?;
    }
    let stop = opts.max_epochs.map_or(cfg.train.epochs, |n| {
        (trainer.epoch + n).min(cfg.train.epochs)
    });
    while trainer.epoch < stop {
        let mut rows = String::new();
        let losses = trainer.train_epoch(&data.train, |step, l: &StepLosses| {
            let _ = writeln!(rows, "{step},{:?},{:?},{:?}", l.cls, l.box_loss, l.total);
        })?;
        append(&log_path, &rows)?;
        let n = losses.len().max(1) as f64;
        let mean = |f: fn(&StepLosses) -> f64| losses.iter().map(f).sum::<f64>() / n;
        let val = evaluate(
            &trainer.model,
            trainer.inference_store(),
            &data.val,
            &cfg.eval_options(),
        )?;
        let record = EpochRecord {
            epoch: trainer.epoch - 1,
            cls: mean(|l| l.cls),
            box_loss: mean(|l| l.box_loss),
            total: mean(|l| l.total),
            val_map: val.map,
        };
        append(
            &epoch_path,
            &format!(
                "{},{:?},{:?},{:?},{:?}\n",
                record.epoch, record.cls, record.box_loss, record.total, record.val_map
            ),
        )?;
        checkpoint::save(&ckpt, &trainer.checkpoint_entries()).map_err(|e| {
            CliError::Validation(format!("cannot write checkpoint {}: {e}", ckpt.display()))
        })?;
        progress(&record);
        history.push(record);
    }
    let final_eval = evaluate(
        &trainer.model,
        trainer.inference_store(),
        &data.val,
        &cfg.eval_options(),
    )?;
    let names = class_names(cfg);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    write_file(&out_dir.join("eval.csv"), &final_eval.to_csv(&names))?;
    Ok(TrainOutcome {
        epochs: history,
        final_eval,
        checkpoint: ckpt,
        log: log_path,
    })
}

pub fn parse_epoch_log(text: &str) -> CliResult<Vec<EpochRecord>> {
    let bad = |line: &str| CliError::Validation(format!("malformed epoch log row {line:?}"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                cls: num(f[1])?,
                box_loss: num(f[2])?,
                total: num(f[3])?,
                val_map: num(f[4])?,
            })
        })
        .collect()
}

fn class_names(cfg: &RFWNetConfig) -> Vec<String> {
    if let Some(dir) = &cfg.paths.dataset_dir {
        if let Ok(names) = rfwnet::data::io::load_classes(&dir.join("val")) {
            return names;
        }
    }
    (0..cfg.model.num_classes)
        .map(|c| {
            CLASS_NAMES
                .get(c)
                .map_or_else(|| format!("class{c}"), |s| s.to_string())
        })
        .collect()
}

/// Model parameters from `checkpoint`, or a fresh seeded initialization.
pub fn load_model(
    cfg: &RFWNetConfig,
    checkpoint: Option<&Path>,
) -> CliResult<(ParamStore, Detector)> {
    let mut store = ParamStore::new(cfg.train.seed);
    let model = Detector::new(&mut store, &cfg.detector())?;
    if let Some(path) = checkpoint {
        let entries = read_checkpoint(path)?;
        // inference runs on the averaged weights when the run kept them
        let entries = ema_entries(&entries).unwrap_or(entries);
        store.load_entries(&entries).map_err(|e| {
            CliError::Validation(format!(
                "checkpoint {} does not fit the model: {e}",
                path.display()
            ))
        })?;
    }
    Ok((store, model))
}

/// Validation-set evaluation; an untrained model when `checkpoint` is `None`.
pub fn cmd_eval(cfg: &RFWNetConfig, checkpoint: Option<&Path>) -> CliResult<EvalResult> {
    let (store, model) = load_model(cfg, checkpoint)?;
    let data = load_data(cfg)?;
    let result = evaluate(&model, &store, &data.val, &cfg.eval_options())?;
    create_dir(&cfg.paths.output_dir)?;
    let names = class_names(cfg);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    write_file(
        &cfg.paths.output_dir.join("eval.csv"),
        &result.to_csv(&names),
    )?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub gamma: f64,
    pub beta: f64,
    pub map: f64,
}

pub const ABLATION_HEADER: &str = "gamma,beta,map";

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{:?},{:?},{:?}", r.gamma, r.beta, r.map);
    }
    out
}

pub fn parse_ablation_csv(text: &str) -> CliResult<Vec<AblationRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(CliError::Validation(
            "ablation table has the wrong header".into(),
        ));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Validation(format!("malformed ablation row {line:?}")))?;
            match v[..] {
                [gamma, beta, map] => Ok(AblationRow { gamma, beta, map }),
                _ => Err(CliError::Validation(format!(
                    "malformed ablation row {line:?}"
                ))),
            }
        })
        .collect()
}

/// Trains and evaluates one model per (gamma, beta) row with the ablation
/// budget, writing `ablation.csv`.
pub fn cmd_ablate(
    cfg: &RFWNetConfig,
    mut progress: impl FnMut(&AblationRow),
) -> CliResult<Vec<AblationRow>> {
    let data = load_data(cfg)?;
    let n = cfg
        .ablation
        .train_images
        .unwrap_or(data.train.len())
        .min(data.train.len());
    let train = &data.train[..n];
    let epochs = cfg.ablation.epochs.unwrap_or(cfg.train.epochs);
    let mut rows = Vec::new();
    for (gamma, beta) in ABLATION_ROWS {
        let loss = WcwConfig::new(gamma, beta, cfg.loss.nwd_constant)?;
        let mut trainer = new_trainer(cfg, &loss, epochs, n)?;
        for _ in 0..epochs {
            trainer.train_epoch(train, |_, _| {})?;
        }
        let result = evaluate(
            &trainer.model,
            trainer.inference_store(),
            &data.val,
            &cfg.eval_options(),
        )?;
        let row = AblationRow {
            gamma,
            beta,
            map: result.map,
        };
        progress(&row);
        rows.push(row);
    }
    create_dir(&cfg.paths.output_dir)?;
    write_file(
        &cfg.paths.output_dir.join("ablation.csv"),
        &ablation_to_csv(&rows),
    )?;
    Ok(rows)
}

/// Writes, per selected validation image, its grayscale rendering and the
/// FIEM gate map (native resolution and upsampled to the image size).
pub fn cmd_export_attention(
    cfg: &RFWNetConfig,
    checkpoint: Option<&Path>,
    images: &[usize],
) -> CliResult<Vec<PathBuf>> {
    let (store, model) = load_model(cfg, checkpoint)?;
    let data = load_data(cfg)?;
    let dir = cfg.paths.output_dir.join("attention");
    create_dir(&dir)?;
    let ctx = Ctx::eval(&store);
    let mut written = Vec::new();
    for &i in images {
        let img = data.val.get(i).ok_or_else(|| {
            CliError::Validation(format!(
                "image index {i} out of range for {} validation images",
                data.val.len()
            ))
        })?;
        let (h, w) = (img.height(), img.width());
        let gate = model.attention_map(&ctx, &img.image.reshape(&[1, 3, h, w])?)?;
        let (gh, gw) = (gate.shape()[2], gate.shape()[3]);
        let map = planes(&gate)?.remove(0);
        let gray: Vec<f64> = (0..h * w)
            .map(|p| (0..3).map(|c| img.image.data()[c * h * w + p]).sum::<f64>() / 3.0)
            .collect();
        let full: Vec<f64> = (0..h * w)
            .map(|p| map[(p / w) * gh / h * gw + (p % w) * gw / w])
            .collect();
        for (suffix, values, (ph, pw)) in [
            ("image", &gray, (h, w)),
            ("gate", &map, (gh, gw)),
            ("gate_full", &full, (h, w)),
        ] {
            let path = dir.join(format!("{}_{suffix}.pgm", img.id));
            write_pgm(&path, values, ph, pw)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub groups: Vec<(String, usize)>,
}

pub fn cmd_params(cfg: &RFWNetConfig) -> CliResult<ParamReport> {
    let mut store = ParamStore::new(cfg.train.seed);
    Detector::new(&mut store, &cfg.detector())?;
    let mut groups: Vec<(String, usize)> = Vec::new();
    for id in store.trainable_ids() {
        let group = store
            .name(id)
            .split('.')
            .next()
            .unwrap_or_default()
            .to_string();
        let n = store.get(id).numel();
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, c)) => *c += n,
            None => groups.push((group, n)),
        }
    }
    Ok(ParamReport {
        total: store.trainable_count(),
        groups,
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

fn append(path: &Path, text: &str) -> CliResult<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| CliError::Validation(format!("cannot open {}: {e}", path.display())))?;
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

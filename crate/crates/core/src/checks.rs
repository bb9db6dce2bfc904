//! The finite-difference gradient suite: every differentiable path of the
//! detector compared against central differences.

use rand::Rng;
use rfw_tensor::gradcheck::{scalarize, GradCheck, GradCheckReport};
use rfw_tensor::init::{seeded_rng, uniform, SeededRng};
use rfw_tensor::{ConvSpec, PoolMode, Tensor};

use crate::boxloss::{ciou_generic, mean_box_loss, nwd_generic, wcw_loss_mean, AABox, WcwConfig};
use crate::detector::train::compute_losses;
use crate::detector::{Detector, DetectorConfig, Neck};
use crate::error::Result;
use crate::fbsm::{Brifm, Fbsm, FbsmConfig, Fiem};
use crate::layers::{Ctx, ParamId, ParamStore};
use crate::rfas::{BackboneConfig, RfasBlock};

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.report.max_rel_err < tolerance
    }
}

fn trainable(store: &ParamStore) -> (Vec<ParamId>, Vec<Tensor>) {
    let ids = store.trainable_ids();
    let tensors = ids.iter().map(|&id| store.get(id).clone()).collect();
    (ids, tensors)
}

/// Checks `f(input, params)` with respect to the input and every trainable
/// parameter of `store`, in inference mode.
fn check_module(
    store: &ParamStore,
    input: &Tensor,
    seed: u64,
    f: impl Fn(&Ctx, &Tensor) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let (ids, params) = trainable(store);
    let mut inputs = vec![input.clone()];
    inputs.extend(params);
    // the loss sums over every cell of three levels, so round-off in the
    // central difference is larger than for the single-op checks
    let gc = GradCheck {
        step: 1e-4,
        ..GradCheck::default()
    };
    Ok(gc.run(
        |t| {
            let local = store.with_trainable(&ids, &t[1..]);
            let out = f(&Ctx::eval(&local), &t[0]).map_err(to_tensor_error)?;
            scalarize(&out, seed)
        },
        &inputs,
    )?)
}

fn to_tensor_error(e: crate::Error) -> rfw_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => rfw_tensor::TensorError::Invalid {
            op: "gradient suite",
            detail: other.to_string(),
        },
    }
}

fn op(name: &str, report: GradCheckReport) -> SuiteEntry {
    SuiteEntry {
        name: name.to_string(),
        report,
    }
}

/// Well-separated values so max-type operations have no near ties.
fn separated(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.05 + 0.013)
        .collect();
    vals.shuffle(rng);
    Tensor::from_vec(vals, shape).expect("shape matches")
}

fn tensor_ops(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = seeded_rng(seed);
    let gc = GradCheck::default();
    let s = seed ^ 0x5eed;
    let a = uniform(&[2, 3, 4], -2.0, 2.0, &mut rng);
    let b = uniform(&[2, 3, 4], -2.0, 2.0, &mut rng);
    let pos = uniform(&[2, 3, 4], 0.5, 2.0, &mut rng);
    let img = uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
    let sep = separated(&[2, 4, 5, 5], &mut rng);
    let mut out = Vec::new();
    let run = |f: &dyn Fn(&[Tensor]) -> rfw_tensor::Result<Tensor>, inputs: &[Tensor]| {
        gc.run(|t| scalarize(&f(t)?, s), inputs)
    };
    out.push(op(
        "tensor.add",
        run(&|t| t[0].add(&t[1]), &[a.clone(), b.clone()])?,
    ));
    out.push(op(
        "tensor.mul",
        run(&|t| t[0].mul(&t[1]), &[a.clone(), b.clone()])?,
    ));
    out.push(op(
        "tensor.div",
        run(&|t| t[0].div(&t[1]), &[a.clone(), pos])?,
    ));
    out.push(op(
        "tensor.sigmoid",
        run(&|t| Ok(t[0].sigmoid()), &[a.clone()])?,
    ));
    out.push(op("tensor.silu", run(&|t| Ok(t[0].silu()), &[a.clone()])?));
    out.push(op("tensor.exp", run(&|t| Ok(t[0].exp()), &[a.clone()])?));
    out.push(op(
        "tensor.mean",
        run(&|t| t[0].mean_axis(1), &[a.clone()])?,
    ));
    out.push(op(
        "tensor.softmax",
        run(&|t| t[0].softmax(2), &[a.clone()])?,
    ));
    out.push(op(
        "tensor.concat",
        run(
            &|t| Tensor::concat(&[&t[0], &t[1]], 1),
            &[a.clone(), b.clone()],
        )?,
    ));
    out.push(op(
        "tensor.topk",
        run(&|t| Ok(t[0].topk(2)?.0), &[separated(&[2, 3, 4], &mut rng)])?,
    ));
    let picks: Vec<usize> = (0..6).map(|_| rng.gen_range(0..a.numel())).collect();
    out.push(op(
        "tensor.gather",
        run(&|t| t[0].take(picks.clone(), &[6]), &[a.clone()])?,
    ));
    let lhs = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let rhs = uniform(&[2, 4, 2], -1.0, 1.0, &mut rng);
    out.push(op(
        "tensor.matmul",
        run(&|t| t[0].matmul(&t[1]), &[lhs, rhs])?,
    ));
    let spec = ConvSpec::new(4, 4, 3).with_groups(2).with_dilation(2);
    let w = uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
    let bias = uniform(&[4], -1.0, 1.0, &mut rng);
    out.push(op(
        "tensor.conv2d",
        run(
            &|t| t[0].conv2d(&t[1], Some(&t[2]), &spec),
            &[img.clone(), w, bias],
        )?,
    ));
    out.push(op(
        "tensor.max_pool2d",
        run(&|t| t[0].max_pool2d(3, 1, 1), &[sep.clone()])?,
    ));
    out.push(op(
        "tensor.pool_channel_max",
        run(&|t| t[0].pool_channel(PoolMode::Max), &[sep])?,
    ));
    out.push(op(
        "tensor.pool_channel_avg",
        run(&|t| t[0].pool_channel(PoolMode::Avg), &[img.clone()])?,
    ));
    out.push(op(
        "tensor.upsample",
        run(&|t| t[0].upsample_nearest(2), &[img.clone()])?,
    ));
    let gamma = uniform(&[4], 0.5, 1.5, &mut rng);
    let beta = uniform(&[4], -0.5, 0.5, &mut rng);
    out.push(op(
        "tensor.batch_norm",
        run(
            &|t| Ok(t[0].batch_norm_train(&t[1], &t[2], 1e-5)?.0),
            &[img.clone(), gamma, beta],
        )?,
    ));
    let targets: Vec<f64> = (0..a.numel()).map(|i| (i % 2) as f64).collect();
    out.push(op(
        "tensor.bce",
        gc.run(|t| t[0].bce_with_logits_sum(&targets, 0.0), &[a.clone()])?,
    ));
    out.push(op(
        "tensor.focal_bce",
        gc.run(|t| t[0].bce_with_logits_sum(&targets, 2.0), &[a])?,
    ));
    Ok(out)
}

/// Full RFAS block on a `1x4x8x8` input.
pub fn rfas_block_check(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(seed);
    let block = RfasBlock::new(&mut store, "rfas", 4)?;
    let x = uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut seeded_rng(seed + 1));
    check_module(&store, &x, seed, |ctx, x| block.forward(ctx, x))
}

fn fbsm_checks(seed: u64) -> Result<Vec<SuiteEntry>> {
    let cfg = FbsmConfig {
        regions: 2,
        topk: 2,
        heads: 2,
        ..FbsmConfig::default()
    };
    let x = uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut seeded_rng(seed + 2));
    let mut store = ParamStore::new(seed);
    let brifm = Brifm::new(&mut store, "brifm", 4, &cfg)?;
    let brifm_report = check_module(&store, &x, seed, |ctx, x| brifm.forward(ctx, x))?;

    let weighted = FbsmConfig {
        weight_by_routing: true,
        ..cfg.clone()
    };
    let mut store = ParamStore::new(seed);
    let brifm_w = Brifm::new(&mut store, "brifm", 4, &weighted)?;
    let weighted_report = check_module(&store, &x, seed, |ctx, x| brifm_w.forward(ctx, x))?;

    let mut store = ParamStore::new(seed);
    let fiem = Fiem::new(&mut store, "fiem")?;
    let fiem_report = check_module(&store, &x, seed, |ctx, x| fiem.forward(ctx, x))?;

    let mut store = ParamStore::new(seed);
    let fbsm = Fbsm::new(&mut store, "fbsm", 4, &cfg)?;
    let fbsm_report = check_module(&store, &x, seed, |ctx, x| fbsm.forward(ctx, x))?;
    Ok(vec![
        op("fbsm.brifm", brifm_report),
        op("fbsm.brifm_routing_weights", weighted_report),
        op("fbsm.fiem", fiem_report),
        op("fbsm.full", fbsm_report),
    ])
}

/// Random overlapping but distinct box pairs, away from the measure-zero
/// configurations where the losses have kinks.
pub fn loss_pairs(seed: u64, count: usize) -> (Tensor, Vec<AABox>) {
    let mut rng = seeded_rng(seed);
    let mut rows = Vec::with_capacity(count * 4);
    let mut gts = Vec::with_capacity(count);
    while gts.len() < count {
        let g = [
            rng.gen_range(20.0..40.0),
            rng.gen_range(20.0..40.0),
            rng.gen_range(6.0..20.0),
            rng.gen_range(6.0..20.0),
        ];
        let p = [
            g[0] + rng.gen_range(-3.0..3.0),
            g[1] + rng.gen_range(-3.0..3.0),
            g[2] * rng.gen_range(0.6..1.5),
            g[3] * rng.gen_range(0.6..1.5),
        ];
        let edges = |b: &[f64; 4]| {
            [
                b[0] - b[2] / 2.0,
                b[0] + b[2] / 2.0,
                b[1] - b[3] / 2.0,
                b[1] + b[3] / 2.0,
            ]
        };
        let (eg, ep) = (edges(&g), edges(&p));
        // every pair of corresponding edges differs, so min/max never tie
        if eg.iter().zip(&ep).any(|(a, b)| (a - b).abs() < 0.05) {
            continue;
        }
        rows.extend(p);
        gts.push(AABox::new(g[0], g[1], g[2], g[3]).expect("positive sizes"));
    }
    (
        Tensor::from_vec(rows, &[count, 4]).expect("shape matches"),
        gts,
    )
}

fn loss_checks(seed: u64) -> Result<Vec<SuiteEntry>> {
    let (pred, gts) = loss_pairs(seed, 8);
    let gc = GradCheck::default();
    let err = to_tensor_error;
    let ciou = gc.run(
        |t| mean_box_loss(&t[0], &gts, |_, p| p, |p, g| ciou_generic(p, g)).map_err(err),
        &[pred.clone()],
    )?;
    let nwd = gc.run(
        |t| mean_box_loss(&t[0], &gts, |_, p| p, |p, g| nwd_generic(p, g, 12.8)).map_err(err),
        &[pred.clone()],
    )?;
    let cfg = WcwConfig::default();
    let wcw = gc.run(|t| wcw_loss_mean(&t[0], &gts, &cfg).map_err(err), &[pred])?;
    Ok(vec![
        op("loss.ciou", ciou),
        op("loss.nwd", nwd),
        op("loss.wcw", wcw),
    ])
}

/// Configuration of the small detector used by gradient checks.
pub fn tiny_detector_config() -> DetectorConfig {
    DetectorConfig {
        num_classes: 2,
        backbone: BackboneConfig {
            stage_channels: vec![4, 4, 8],
            stage_depths: vec![1, 1, 1],
            mlp_ratio: 1.0,
        },
        fbsm: FbsmConfig {
            regions: 2,
            topk: 2,
            ..FbsmConfig::default()
        },
        ..DetectorConfig::default()
    }
}

/// Neck on tiny widths.
pub fn neck_check(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(seed);
    let neck = Neck::new(&mut store, "neck", [2, 3, 4])?;
    let mut rng = seeded_rng(seed + 3);
    let p3 = uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
    let p4 = uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
    let p5 = uniform(&[1, 4, 2, 2], -1.0, 1.0, &mut rng);
    let (ids, params) = trainable(&store);
    let mut inputs = vec![p3, p4, p5];
    inputs.extend(params);
    Ok(GradCheck::default().run(
        |t| {
            let local = store.with_trainable(&ids, &t[3..]);
            let [a, b, c] = neck
                .forward(&Ctx::eval(&local), &t[0], &t[1], &t[2])
                .map_err(to_tensor_error)?;
            let flat = |x: &Tensor| x.reshape(&[x.numel()]);
            let all = Tensor::concat(&[&flat(&a)?, &flat(&b)?, &flat(&c)?], 0)?;
            scalarize(&all, seed)
        },
        &inputs,
    )?)
}

/// Whole detector, image to total loss, on a 64x64 image with two objects.
pub fn detector_check(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(seed);
    let model = Detector::new(&mut store, &tiny_detector_config())?;
    let image = uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut seeded_rng(seed + 4));
    let targets = vec![vec![
        (0, AABox::new(20.3, 18.7, 9.0, 13.0)?),
        (1, AABox::new(44.6, 40.2, 20.0, 17.0)?),
    ]];
    let wcw = WcwConfig::default();
    let (ids, params) = trainable(&store);
    let mut inputs = vec![image];
    inputs.extend(params);
    // the loss sums over every cell of three levels, so round-off in the
    // central difference is larger than for the single-op checks
    let gc = GradCheck {
        step: 1e-4,
        ..GradCheck::default()
    };
    Ok(gc.run(
        |t| {
            let local = store.with_trainable(&ids, &t[1..]);
            let out = model
                .forward(&Ctx::eval(&local), &t[0])
                .map_err(to_tensor_error)?;
            let terms = compute_losses(&out, &targets, (64, 64), &wcw, 2.0, 0.0)
                .map_err(to_tensor_error)?;
            Ok(terms.total)
        },
        &inputs,
    )?)
}

/// Runs every check. Deterministic in `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = tensor_ops(seed)?;
    out.push(op("rfas.block", rfas_block_check(seed)?));
    out.extend(fbsm_checks(seed)?);
    out.extend(loss_checks(seed)?);
    out.push(op("detector.neck", neck_check(seed)?));
    out.push(op("detector.end_to_end", detector_check(seed)?));
    Ok(out)
}

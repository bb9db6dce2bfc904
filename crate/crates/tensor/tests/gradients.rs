use rand::seq::SliceRandom;
use rand::Rng;
use rfw_tensor::gradcheck::{scalarize, GradCheck};
use rfw_tensor::init::{seeded_rng, uniform, SeededRng};
use rfw_tensor::{ConvSpec, PoolMode, Result, Tensor};

const TOL: f64 = 1e-4;

fn dims(rng: &mut SeededRng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

/// Distinct values at least 0.05 apart, so no kink is crossed by a 1e-5 probe.
fn separated(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.05 + 0.013)
        .collect();
    vals.shuffle(rng);
    Tensor::from_vec(vals, shape).unwrap()
}

fn check(name: &str, seed: u64, f: impl Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor]) {
    let report = GradCheck::default()
        .run(|t| scalarize(&f(t)?, seed ^ 0x5eed), inputs)
        .unwrap();
    assert!(
        report.max_rel_err < TOL,
        "{name} seed {seed}: rel err {:.3e} (analytic {}, numeric {})",
        report.max_rel_err,
        report.analytic,
        report.numeric
    );
}

#[test]
fn every_operation_matches_central_differences_over_100_seeds() {
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed);
        let shape = dims(&mut rng, 3);
        let a = uniform(&shape, -2.0, 2.0, &mut rng);
        let b = uniform(&shape, -2.0, 2.0, &mut rng);
        let pos = uniform(&shape, 0.5, 2.0, &mut rng);

        check("add", seed, |t| t[0].add(&t[1]), &[a.clone(), b.clone()]);
        check("sub", seed, |t| t[0].sub(&t[1]), &[a.clone(), b.clone()]);
        check("mul", seed, |t| t[0].mul(&t[1]), &[a.clone(), b.clone()]);
        check("div", seed, |t| t[0].div(&t[1]), &[a.clone(), pos.clone()]);
        check(
            "scalar",
            seed,
            |t| Ok(t[0].mul_scalar(-1.7).add_scalar(0.3)),
            &[a.clone()],
        );
        check("sigmoid", seed, |t| Ok(t[0].sigmoid()), &[a.clone()]);
        check("silu", seed, |t| Ok(t[0].silu()), &[a.clone()]);
        check("exp", seed, |t| Ok(t[0].exp()), &[a.clone()]);
        check("square", seed, |t| Ok(t[0].square()), &[a.clone()]);
        check(
            "relu",
            seed,
            |t| Ok(t[0].relu()),
            &[separated(&shape, &mut rng)],
        );
        check("mean", seed, |t| Ok(t[0].mean()), &[a.clone()]);
        let axis = rng.gen_range(0..3);
        check("sum_axis", seed, |t| t[0].sum_axis(axis), &[a.clone()]);
        check("mean_axis", seed, |t| t[0].mean_axis(axis), &[a.clone()]);
        check("softmax", seed, |t| t[0].softmax(axis), &[a.clone()]);
        check("permute", seed, |t| t[0].permute(&[2, 0, 1]), &[a.clone()]);
        check(
            "concat",
            seed,
            |t| Tensor::concat(&[&t[0], &t[1]], axis),
            &[a.clone(), b.clone()],
        );

        let k = rng.gen_range(1..=shape[2]);
        check(
            "topk",
            seed,
            |t| Ok(t[0].topk(k)?.0),
            &[separated(&shape, &mut rng)],
        );
        let picks: Vec<usize> = (0..5).map(|_| rng.gen_range(0..a.numel())).collect();
        check(
            "take",
            seed,
            |t| t[0].take(picks.clone(), &[5]),
            &[a.clone()],
        );

        let (m, kk, n) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let lhs = uniform(&[2, m, kk], -1.0, 1.0, &mut rng);
        let rhs = uniform(&[2, kk, n], -1.0, 1.0, &mut rng);
        check("matmul", seed, |t| t[0].matmul(&t[1]), &[lhs, rhs]);

        let img_shape = [
            rng.gen_range(1..=2),
            rng.gen_range(1..=4),
            rng.gen_range(2..=4),
            rng.gen_range(2..=4),
        ];
        let img = uniform(&img_shape, -1.0, 1.0, &mut rng);
        let c = img_shape[1];
        check(
            "pool_avg",
            seed,
            |t| t[0].pool_channel(PoolMode::Avg),
            &[img.clone()],
        );
        check(
            "pool_max",
            seed,
            |t| t[0].pool_channel(PoolMode::Max),
            &[separated(&img_shape, &mut rng)],
        );
        check(
            "max_pool2d",
            seed,
            |t| t[0].max_pool2d(3, 1, 1),
            &[separated(&img_shape, &mut rng)],
        );
        check(
            "upsample",
            seed,
            |t| t[0].upsample_nearest(2),
            &[img.clone()],
        );
        let gate_shape = [img_shape[0], 1, img_shape[2], img_shape[3]];
        let gate = uniform(&gate_shape, -1.0, 1.0, &mut rng);
        check(
            "mul_spatial",
            seed,
            |t| t[0].mul_spatial(&t[1]),
            &[img.clone(), gate],
        );

        let gamma = uniform(&[c], 0.5, 1.5, &mut rng);
        let beta = uniform(&[c], -0.5, 0.5, &mut rng);
        check(
            "batch_norm_train",
            seed,
            |t| Ok(t[0].batch_norm_train(&t[1], &t[2], 1e-5)?.0),
            &[img.clone(), gamma.clone(), beta.clone()],
        );
        let rm: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let rv: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        check(
            "batch_norm_eval",
            seed,
            |t| t[0].batch_norm_eval(&t[1], &t[2], &rm, &rv, 1e-5),
            &[img.clone(), gamma, beta],
        );

        let groups = if c % 2 == 0 && rng.gen_bool(0.5) {
            2
        } else {
            1
        };
        let out_c = groups * rng.gen_range(1..=2);
        let ksize = [1, 3][rng.gen_range(0..2)];
        let spec = ConvSpec::new(c, out_c, ksize)
            .with_groups(groups)
            .with_dilation(rng.gen_range(1..=2))
            .with_stride(rng.gen_range(1..=2));
        let w = uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
        let bias = uniform(&[out_c], -1.0, 1.0, &mut rng);
        check(
            "conv2d",
            seed,
            |t| t[0].conv2d(&t[1], Some(&t[2]), &spec),
            &[img.clone(), w, bias],
        );

        let logits = uniform(&shape, -3.0, 3.0, &mut rng);
        let targets: Vec<f64> = (0..logits.numel())
            .map(|_| rng.gen_range(0..2) as f64)
            .collect();
        let gamma = [0.0, 2.0][rng.gen_range(0..2)];
        check(
            "bce",
            seed,
            |t| t[0].bce_with_logits_sum(&targets, gamma),
            &[logits],
        );
    }
}

#[test]
fn twenty_parameter_composite_matches_central_differences() {
    // conv (2x1x3x3 = 18 weights + 2 bias) -> sigmoid -> softmax over channels
    let mut rng = seeded_rng(2024);
    let x = uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng);
    let w = uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng);
    let b = uniform(&[2], -1.0, 1.0, &mut rng);
    assert_eq!(w.numel() + b.numel(), 20);
    let spec = ConvSpec::new(1, 2, 3);
    let report = GradCheck::default()
        .run(
            |t| {
                let y = x.conv2d(&t[0], Some(&t[1]), &spec)?.sigmoid().softmax(1)?;
                scalarize(&y, 7)
            },
            &[w, b],
        )
        .unwrap();
    assert_eq!(report.checked, 20);
    assert!(report.max_rel_err < TOL, "{report:?}");
}

#[test]
fn softmax_rows_sum_to_one_in_the_stated_range() {
    for seed in 0..100 {
        let mut rng = seeded_rng(seed);
        let t = uniform(&[5, 7], -50.0, 50.0, &mut rng).softmax(1).unwrap();
        for row in t.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}

#[test]
fn grouped_conv_equals_independent_slices() {
    for seed in 0..20 {
        let mut rng = seeded_rng(seed);
        let (g, icpg, ocpg) = (3, 2, 2);
        let x = uniform(&[2, g * icpg, 5, 6], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::new(g * icpg, g * ocpg, 3)
            .with_groups(g)
            .with_dilation(2);
        let w = uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
        let b = uniform(&[g * ocpg], -1.0, 1.0, &mut rng);
        let full = x.conv2d(&w, Some(&b), &spec).unwrap();
        let sub = ConvSpec::new(icpg, ocpg, 3).with_dilation(2);
        let parts: Vec<Tensor> = (0..g)
            .map(|i| {
                x.narrow(1, i * icpg, icpg)
                    .unwrap()
                    .conv2d(
                        &w.narrow(0, i * ocpg, ocpg).unwrap(),
                        Some(&b.narrow(0, i * ocpg, ocpg).unwrap()),
                        &sub,
                    )
                    .unwrap()
            })
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let joined = Tensor::concat(&refs, 1).unwrap();
        assert_eq!(full.data(), joined.data(), "seed {seed}");
    }
}

/// Bounding box `(rows, cols)` of the nonzero entries of a single-plane map.
fn support(t: &Tensor) -> (usize, usize) {
    let (_, _, h, w) = t.dims4("support").unwrap();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            if t.data()[y * w + x] != 0.0 {
                r0 = r0.min(y);
                r1 = r1.max(y);
                c0 = c0.min(x);
                c1 = c1.max(x);
            }
        }
    }
    (r1 + 1 - r0, c1 + 1 - c0)
}

fn impulse(size: usize) -> Tensor {
    let mut data = vec![0.0; size * size];
    data[(size / 2) * size + size / 2] = 1.0;
    Tensor::from_vec(data, &[1, 1, size, size]).unwrap()
}

#[test]
fn impulse_support_of_single_dilated_conv() {
    for (k, d) in [(3, 1), (3, 3), (5, 1), (3, 5), (7, 1), (5, 2)] {
        let mut rng = seeded_rng((k * 10 + d) as u64);
        let spec = ConvSpec::new(1, 1, k).with_dilation(d);
        // nonzero taps so every position of the span is hit
        let w = uniform(&spec.weight_shape(), 0.5, 1.0, &mut rng);
        let y = impulse(31).conv2d(&w, None, &spec).unwrap();
        let expect = d * (k - 1) + 1;
        assert_eq!(support(&y), (expect, expect), "k={k} d={d}");
        let nonzero = y.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, k * k, "dilated taps are sparse inside the span");
    }
}

#[test]
fn composed_receptive_field_is_fifteen() {
    let y = impulse(31)
        .conv2d(&Tensor::ones(&[1, 1, 5, 5]), None, &ConvSpec::new(1, 1, 5))
        .unwrap()
        .conv2d(
            &Tensor::ones(&[1, 1, 3, 3]),
            None,
            &ConvSpec::new(1, 1, 3).with_dilation(5),
        )
        .unwrap();
    assert_eq!(support(&y), (15, 15));
    assert_eq!(y.data().iter().filter(|&&v| v != 0.0).count(), 15 * 15);
}

use proptest::prelude::*;
use rand::Rng;
use rfwnet::data::io::{read_pgm, write_pgm};
use rfwnet::fbsm::{merge_regions, partition_regions, topk_routing, Brifm, Fbsm, FbsmConfig, Fiem};
use rfwnet::layers::{Conv, Ctx, ParamStore};
use rfwnet::tensor::gradcheck::{scalarize, GradCheck};
use rfwnet::tensor::init::{seeded_rng, uniform};
use rfwnet::tensor::Tensor;

fn zero_conv(store: &mut ParamStore, conv: &Conv) {
    let shape = store.get(conv.weight).shape().to_vec();
    store.set(conv.weight, Tensor::zeros(&shape));
    if let Some(b) = conv.bias {
        let n = store.get(b).numel();
        store.set(b, Tensor::zeros(&[n]));
    }
}

/// `W x + b` of a 1x1 convolution at every pixel, as `[N, HW, C]` rows.
fn project(store: &ParamStore, conv: &Conv, x: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (n, c, h, w) = x.dims4("project").unwrap();
    let (wt, b) = (
        store.get(conv.weight).data(),
        store.get(conv.bias.unwrap()).data(),
    );
    let xd = x.data();
    (0..n)
        .map(|bi| {
            (0..h * w)
                .map(|p| {
                    (0..c)
                        .map(|o| {
                            b[o] + (0..c)
                                .map(|i| wt[o * c + i] * xd[(bi * c + i) * h * w + p])
                                .sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Plain single-head attention of every pixel over every pixel, plus residual.
fn dense_attention(store: &ParamStore, brifm: &Brifm, x: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = x.dims4("dense").unwrap();
    let (q, k, v) = (
        project(store, &brifm.q, x),
        project(store, &brifm.k, x),
        project(store, &brifm.v, x),
    );
    let scale = 1.0 / (c as f64).sqrt();
    let hw = h * w;
    let mut out = x.to_vec();
    for b in 0..n {
        for p in 0..hw {
            let scores: Vec<f64> = (0..hw)
                .map(|j| scale * (0..c).map(|d| q[b][p][d] * k[b][j][d]).sum::<f64>())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..c {
                out[(b * c + d) * hw + p] += (0..hw).map(|j| e[j] / z * v[b][j][d]).sum::<f64>();
            }
        }
    }
    out
}

#[test]
fn full_routing_equals_dense_attention() {
    for (s, hw, seed) in [(2, 8, 0), (3, 6, 1), (1, 4, 2)] {
        let cfg = FbsmConfig {
            regions: s,
            topk: s * s,
            heads: 1,
            ..FbsmConfig::default()
        };
        let mut store = ParamStore::new(seed);
        let brifm = Brifm::new(&mut store, "b", 4, &cfg).unwrap();
        let x = uniform(&[2, 4, hw, hw], -1.0, 1.0, &mut seeded_rng(seed + 10));
        let got = brifm.forward(&Ctx::eval(&store), &x).unwrap();
        let want = dense_attention(&store, &brifm, &x);
        let diff = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "s = {s}: max diff {diff}");
    }
}

#[test]
fn routing_matches_exhaustive_sort() {
    let mut rng = seeded_rng(7);
    for trial in 0..200 {
        let s = 1 + trial % 4;
        let r = s * s;
        let k = rng.gen_range(1..=r);
        let c = rng.gen_range(1..6);
        let qm = uniform(&[r, c], -1.0, 1.0, &mut rng);
        let km = uniform(&[r, c], -1.0, 1.0, &mut rng);
        let routing = topk_routing(&qm, &km, k).unwrap();
        for i in 0..r {
            let mut scored: Vec<(f64, usize)> = (0..r)
                .map(|j| {
                    let dot = (0..c)
                        .map(|d| qm.data()[i * c + d] * km.data()[j * c + d])
                        .sum::<f64>();
                    (dot, j)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = scored[..k].iter().map(|p| p.1).collect();
            assert_eq!(routing.row(i), want.as_slice(), "trial {trial} row {i}");
            for (slot, (score, _)) in scored[..k].iter().enumerate() {
                assert!((routing.weights.data()[i * k + slot] - score).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn routing_spot_case_and_range_check() {
    let q = Tensor::from_vec(vec![1.0, 0.0, 0.0], &[3, 1]).unwrap();
    let k = Tensor::from_vec(vec![0.1, 0.7, 0.3], &[3, 1]).unwrap();
    let r = topk_routing(&q, &k, 2).unwrap();
    assert_eq!(r.row(0), &[1, 2]);
    assert_eq!(&r.weights.data()[..2], &[0.7, 0.3]);
    assert!(topk_routing(&q, &k, 0).is_err());
    assert!(topk_routing(&q, &k, 4).is_err());
}

#[test]
fn attention_rows_are_normalized() {
    let cfg = FbsmConfig {
        regions: 2,
        topk: 2,
        heads: 2,
        ..FbsmConfig::default()
    };
    let mut store = ParamStore::new(5);
    let brifm = Brifm::new(&mut store, "b", 4, &cfg).unwrap();
    let ctx = Ctx::eval(&store);
    let mut rng = seeded_rng(6);
    for _ in 0..100 {
        let x = uniform(&[1, 4, 4, 4], -3.0, 3.0, &mut rng);
        let att = brifm.forward_detailed(&ctx, &x).unwrap().attention;
        let cols = *att.shape().last().unwrap();
        for row in att.data().chunks(cols) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_values_leave_only_the_residual() {
    let cfg = FbsmConfig::default();
    let mut store = ParamStore::new(1);
    let brifm = Brifm::new(&mut store, "b", 4, &cfg).unwrap();
    zero_conv(&mut store, &brifm.v);
    let x = uniform(&[2, 4, 6, 6], -1.0, 1.0, &mut seeded_rng(2));
    let f = brifm.forward(&Ctx::eval(&store), &x).unwrap();
    assert_eq!(f.data(), x.data());
}

#[test]
fn degenerate_module_halves_its_input() {
    let cfg = FbsmConfig::default();
    let mut store = ParamStore::new(1);
    let fbsm = Fbsm::new(&mut store, "f", 4, &cfg).unwrap();
    zero_conv(&mut store, &fbsm.brifm.v);
    zero_conv(&mut store, &fbsm.fiem.conv);
    let x = uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut seeded_rng(3));
    let y = fbsm.forward(&Ctx::eval(&store), &x).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn output_shape_for_every_valid_configuration() {
    let x = uniform(&[1, 4, 12, 12], -1.0, 1.0, &mut seeded_rng(4));
    for s in [1, 2, 3, 4, 6] {
        for k in 1..=s * s {
            let cfg = FbsmConfig {
                regions: s,
                topk: k,
                ..FbsmConfig::default()
            };
            let mut store = ParamStore::new(0);
            let fbsm = Fbsm::new(&mut store, "f", 4, &cfg).unwrap();
            assert_eq!(
                fbsm.forward(&Ctx::eval(&store), &x).unwrap().shape(),
                x.shape()
            );
        }
    }
    let cfg = FbsmConfig {
        regions: 5,
        topk: 1,
        ..FbsmConfig::default()
    };
    let mut store = ParamStore::new(0);
    let fbsm = Fbsm::new(&mut store, "f", 4, &cfg).unwrap();
    assert!(fbsm.forward(&Ctx::eval(&store), &x).is_err());
}

#[test]
fn fiem_gradcheck_and_gate_range() {
    let mut store = ParamStore::new(9);
    let fiem = Fiem::new(&mut store, "fiem").unwrap();
    let ids = store.trainable_ids();
    let x = uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut seeded_rng(10));
    let mut inputs = vec![x.clone()];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    let report = GradCheck::default()
        .run(
            |t| {
                let local = store.with_trainable(&ids, &t[1..]);
                let out = fiem.forward(&Ctx::eval(&local), &t[0]).map_err(|e| {
                    rfwnet::tensor::TensorError::Invalid {
                        op: "fiem",
                        detail: e.to_string(),
                    }
                })?;
                scalarize(&out, 1)
            },
            &inputs,
        )
        .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    let gate = fiem.gate(&Ctx::eval(&store), &x).unwrap();
    assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn exported_gate_map_is_monotone_in_pre_activation() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new(12);
    let fiem = Fiem::new(&mut store, "fiem").unwrap();
    let ctx = Ctx::eval(&store);
    let mut rng = seeded_rng(13);
    for trial in 0..10 {
        let x = uniform(&[1, 4, 16, 16], -2.0, 2.0, &mut rng);
        let pre = fiem.pre_activation(&ctx, &x).unwrap().to_vec();
        let gate = fiem.gate(&ctx, &x).unwrap().to_vec();
        let path = dir.path().join(format!("g{trial}.pgm"));
        write_pgm(&path, &gate, 16, 16).unwrap();
        let (_, _, px) = read_pgm(&path).unwrap();
        let px: Vec<f64> = px.into_iter().map(f64::from).collect();
        for i in 0..pre.len() {
            for j in 0..pre.len() {
                if pre[i] < pre[j] {
                    assert!(px[i] <= px[j]);
                }
            }
        }
        let rho = pearson(&ranks(&pre), &ranks(&px));
        assert!(rho > 0.99, "rank correlation {rho}");
    }
}

proptest! {
    #[test]
    fn partition_round_trip_is_exact(
        s in 1usize..4,
        th in 1usize..4,
        tw in 1usize..4,
        n in 1usize..3,
        c in 1usize..4,
        seed in 0u64..1000,
    ) {
        let (h, w) = (s * th, s * tw);
        let x = uniform(&[n, c, h, w], -1.0, 1.0, &mut seeded_rng(seed));
        let xr = partition_regions(&x, s).unwrap();
        prop_assert_eq!(xr.shape(), &[n, s * s, th * tw, c]);
        let back = merge_regions(&xr, s, h, w).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }
}

#[test]
fn partition_layout_and_errors() {
    let x = Tensor::from_vec((0..16).map(f64::from).collect(), &[1, 1, 4, 4]).unwrap();
    let xr = partition_regions(&x, 2).unwrap();
    // region 1 is the top-right 2x2 tile, row-major
    assert_eq!(&xr.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    let single = partition_regions(&x, 1).unwrap();
    assert_eq!(single.data(), x.data());
    let err = partition_regions(&x, 3).unwrap_err().to_string();
    assert!(err.contains('3') && err.contains('4'), "{err}");
}

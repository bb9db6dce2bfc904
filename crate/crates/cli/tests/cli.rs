use std::path::Path;
use std::process::{Command, Output};

use rfwnet::boxloss::sensitivity_from_csv;
use rfwnet::data::io::read_pgm;
use rfwnet_cli::commands::*;
use rfwnet_cli::RFWNetConfig;

const DEFAULT_PARAMS: usize = 304_078;

fn rfwnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfwnet"))
        .args(["--threads", "1"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
[backbone]
stage_channels = [4, 4, 8]
stage_depths = [1, 1, 1]
mlp_ratio = 1.0

[fbsm]
regions = 1
topk = 1

[train]
batch_size = 4
epochs = 2
warmup_steps = 2

[data]
train_images = 12
val_images = 4
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, format!("{TINY}\n{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn tiny(dir: &Path) -> RFWNetConfig {
    let mut cfg = RFWNetConfig::from_toml(TINY).unwrap();
    cfg.paths.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn params_of_the_default_config_are_stable() {
    let report = cmd_params(&RFWNetConfig::default()).unwrap();
    assert_eq!(report.total, DEFAULT_PARAMS);
    assert_eq!(
        report.groups.iter().map(|g| g.1).sum::<usize>(),
        report.total
    );
    let names: Vec<&str> = report.groups.iter().map(|g| g.0.as_str()).collect();
    assert_eq!(
        names,
        ["backbone", "fbsm", "sppf", "neck", "head0", "head1", "head2"]
    );
    let out = rfwnet(&["params"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains(&format!("total {DEFAULT_PARAMS}")));
}

#[test]
fn sensitivity_outputs_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = rfwnet(&["--out", dir.path().to_str().unwrap(), "sensitivity"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows =
        sensitivity_from_csv(&std::fs::read_to_string(dir.path().join("sensitivity.csv")).unwrap())
            .unwrap();
    let scaled = sensitivity_from_csv(
        &std::fs::read_to_string(dir.path().join("sensitivity_scaled.csv")).unwrap(),
    )
    .unwrap();
    assert_eq!(rows.len(), 34);
    let at = |x: f64, y: f64| {
        rows.iter()
            .find(|r| r.shift_x == x && r.shift_y == y)
            .unwrap()
    };
    assert_eq!(at(0.0, 0.0).iou, 1.0);
    assert_eq!(at(0.0, 0.0).nwd_similarity, 1.0);
    assert_eq!(at(4.0, 0.0).iou, 0.6);
    assert_eq!(at(4.0, 4.0).iou, 144.0 / 368.0);
    assert!((at(4.0, 4.0).iou - 0.39130).abs() < 1e-5);
    for (r, s) in rows.iter().zip(&scaled) {
        assert_eq!((s.shift_x, s.shift_y), (2.0 * r.shift_x, 2.0 * r.shift_y));
        assert!((r.iou - s.iou).abs() < 1e-12);
        assert!((r.nwd_similarity - s.nwd_similarity).abs() < 1e-12);
    }
    let svg = std::fs::read_to_string(dir.path().join("sensitivity.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<polyline").count(), 4);
    assert!(svg.trim_end().ends_with("</svg>"));
}

#[test]
fn unwritable_output_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    std::fs::write(&file, "x").unwrap();
    let out = rfwnet(&["--out", file.join("sub").to_str().unwrap(), "sensitivity"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cannot create"));
}

#[test]
fn bad_configs_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[eval]\niou = 0.5\n");
    let out = rfwnet(&["--config", &cfg, "params"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("iou"), "{}", stderr(&out));
    let out = rfwnet(&[
        "--config",
        dir.path().join("missing.toml").to_str().unwrap(),
        "params",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_checkpoints_are_refused_with_a_version_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let garbage = dir.path().join("garbage.rfwt");
    std::fs::write(&garbage, b"definitely not a checkpoint").unwrap();
    let mut future = rfw_tensor::checkpoint::encode(&[]);
    future[8..12].copy_from_slice(&7u32.to_le_bytes());
    let newer = dir.path().join("newer.rfwt");
    std::fs::write(&newer, &future).unwrap();
    let mut flipped =
        rfw_tensor::checkpoint::encode(&[("w".into(), rfw_tensor::Tensor::zeros(&[3]))]);
    flipped[30] ^= 0xff;
    let corrupt = dir.path().join("corrupt.rfwt");
    std::fs::write(&corrupt, &flipped).unwrap();
    for (path, detail) in [
        (&garbage, "magic"),
        (&newer, "version 7"),
        (&corrupt, "checksum"),
    ] {
        let out = rfwnet(&[
            "--config",
            &cfg,
            "eval",
            "--checkpoint",
            path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(1));
        let msg = stderr(&out);
        assert!(
            msg.contains("format version 1") && msg.contains(detail),
            "{msg}"
        );
    }
}

#[test]
fn untrained_model_scores_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RFWNetConfig::default();
    cfg.paths.output_dir = dir.path().to_path_buf();
    let result = cmd_eval(&cfg, None).unwrap();
    assert!(result.map < 0.05, "untrained mAP {}", result.map);
    let (rows, map) = rfwnet::eval::parse_eval_csv(
        &std::fs::read_to_string(dir.path().join("eval.csv")).unwrap(),
    )
    .unwrap();
    assert_eq!(rows.len(), 3);
    assert!((map - result.map).abs() < 1e-12);
}

#[test]
fn split_and_resumed_training_equals_one_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let whole = cmd_train(&tiny(a.path()), TrainOptions::default(), |_| {}).unwrap();
    let first = cmd_train(
        &tiny(b.path()),
        TrainOptions {
            resume: true,
            max_epochs: Some(1),
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(first.epochs.len(), 1);
    let rest = cmd_train(
        &tiny(b.path()),
        TrainOptions {
            resume: true,
            max_epochs: None,
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(rest.epochs, whole.epochs);
    for file in ["checkpoint.rfwt", "train_log.csv", "epochs.csv", "eval.csv"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs");
    }
    let log = std::fs::read_to_string(a.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], STEP_LOG_HEADER);
    assert_eq!(lines.len(), 1 + 2 * 3);
    for (i, line) in lines[1..].iter().enumerate() {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[0] as usize, i + 1);
        assert!((f[1] + 2.0 * f[2] - f[3]).abs() < 1e-9 * f[3].abs().max(1.0));
    }
    // the checkpoint evaluates to the mAP the run reported
    let eval_dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(eval_dir.path());
    cfg.paths.output_dir = eval_dir.path().to_path_buf();
    let again = cmd_eval(&cfg, Some(&a.path().join("checkpoint.rfwt"))).unwrap();
    assert_eq!(again.map, whole.final_eval.map);
}

#[test]
fn divergent_training_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        "warmup_steps = 2",
        "warmup_steps = 0\nlr = 1e200\nmomentum = 0.0\ngrad_clip = 0.0",
    );
    std::fs::write(&cfg, text).unwrap();
    let out = rfwnet(&[
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
        "train",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}

#[test]
fn attention_export_writes_readable_maps() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RFWNetConfig::default();
    cfg.data.train_images = 1;
    cfg.data.val_images = 3;
    cfg.paths.output_dir = dir.path().to_path_buf();
    let written = cmd_export_attention(&cfg, None, &[0, 2]).unwrap();
    assert_eq!(written.len(), 6);
    for path in &written {
        let (h, w, pixels) = read_pgm(path).unwrap();
        let name = path.file_name().unwrap().to_string_lossy();
        let want = if name.ends_with("_gate.pgm") {
            (3, 3)
        } else {
            (96, 96)
        };
        assert_eq!((h, w), want, "{name}");
        assert_eq!(pixels.len(), h * w);
    }
    assert!(cmd_export_attention(&cfg, None, &[3]).is_err());
    cfg.model.fbsm_variant = rfwnet::detector::FbsmVariant::Off;
    assert!(cmd_export_attention(&cfg, None, &[0]).is_err());
}

#[test]
fn generated_dataset_directory_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "");
    let data_dir = dir.path().join("data");
    let out = rfwnet(&[
        "--config",
        &cfg_path,
        "generate",
        data_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut cfg = tiny(dir.path());
    let synthetic = load_data(&cfg).unwrap();
    cfg.paths.dataset_dir = Some(data_dir);
    let loaded = load_data(&cfg).unwrap();
    for (a, b) in synthetic
        .train
        .iter()
        .chain(&synthetic.val)
        .zip(loaded.train.iter().chain(&loaded.val))
    {
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.gts.len(), b.gts.len());
        for (g, h) in a.gts.iter().zip(&b.gts) {
            assert_eq!(g.class_id, h.class_id);
            for (u, v) in g.bbox.params().iter().zip(h.bbox.params()) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn ablation_table_round_trip() {
    let rows: Vec<AblationRow> = ABLATION_ROWS
        .iter()
        .enumerate()
        .map(|(i, &(gamma, beta))| AblationRow {
            gamma,
            beta,
            map: i as f64 / 7.0,
        })
        .collect();
    assert_eq!(parse_ablation_csv(&ablation_to_csv(&rows)).unwrap(), rows);
    assert!(parse_ablation_csv("gamma,beta\n").is_err());
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfwnet::boxloss::DEFAULT_NWD_CONSTANT;
use rfwnet_cli::commands::*;
use rfwnet_cli::{CliError, CliResult, RFWNetConfig};

#[derive(Parser)]
#[command(
    name = "rfwnet",
    version,
    about = "Experiments for the rfwnet small-object detector"
)]
struct Cli {
    /// TOML configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed (and the gradient-suite seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides paths.output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for convolutions; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable path.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// IoU and NWD similarity of a shifted square.
    Sensitivity {
        #[arg(long, default_value_t = 16.0)]
        box_size: f64,
        #[arg(long, default_value_t = DEFAULT_NWD_CONSTANT)]
        constant: f64,
        #[arg(long, default_value_t = 16)]
        max_shift: usize,
    },
    /// Writes the synthetic train/val sets as dataset directories.
    Generate { dir: PathBuf },
    /// Trains, checkpointing after each epoch.
    Train {
        /// Continue from the checkpoint if it exists.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs; continue later with --resume.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// mAP on the validation set.
    Eval {
        /// Defaults to paths.checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the freshly initialized model instead.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
    },
    /// Trains one model per (gamma, beta) loss weighting.
    Ablate,
    /// FIEM gate maps of validation images as PGM files.
    ExportAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
        /// Validation image indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        images: Vec<usize>,
    },
    /// Trainable parameter count.
    Params,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RFWNetConfig::load(path)?,
        None => RFWNetConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.output_dir = out.clone();
    }
    let checkpoint_arg = |explicit: Option<PathBuf>, untrained: bool| {
        if untrained {
            None
        } else {
            Some(explicit.unwrap_or_else(|| cfg.checkpoint_path()))
        }
    };
    match cli.command {
        Command::Gradcheck { tolerance } => {
            let report = cmd_gradcheck(cli.seed.unwrap_or(0), tolerance)?;
            print!("{}", report.render());
            if !report.passed() {
                let names: Vec<&str> = report.failures().iter().map(|e| e.name.as_str()).collect();
                return Err(CliError::Numeric(format!(
                    "gradient check failed for {}",
                    names.join(", ")
                )));
            }
        }
        Command::Sensitivity {
            box_size,
            constant,
            max_shift,
        } => {
            let out = cmd_sensitivity(box_size, constant, max_shift, &cfg.paths.output_dir)?;
            println!(
                "{:>7} {:>7} {:>9} {:>9} | scaled x2: {:>9} {:>9}",
                "dx", "dy", "iou", "nwd_sim", "iou", "nwd_sim"
            );
            for (r, s) in out.rows.iter().zip(&out.scaled) {
                println!(
                    "{:>7} {:>7} {:>9.5} {:>9.5} |            {:>9.5} {:>9.5}",
                    r.shift_x, r.shift_y, r.iou, r.nwd_similarity, s.iou, s.nwd_similarity
                );
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Generate { dir } => {
            let (train, val) = cmd_generate(&cfg, &dir)?;
            println!(
                "wrote {train} training and {val} validation images to {}",
                dir.display()
            );
        }
        Command::Train { resume, max_epochs } => {
            let outcome = cmd_train(&cfg, TrainOptions { resume, max_epochs }, |r| {
                println!(
                    "epoch {:>3}  cls {:.4}  box {:.4}  total {:.4}  val mAP {:.4}",
                    r.epoch, r.cls, r.box_loss, r.total, r.val_map
                );
            })?;
            println!(
                "final val mAP@{} {:.4}",
                cfg.eval.iou_threshold, outcome.final_eval.map
            );
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("log {}", outcome.log.display());
        }
        Command::Eval {
            checkpoint,
            untrained,
        } => {
            let ckpt = checkpoint_arg(checkpoint, untrained);
            let result = cmd_eval(&cfg, ckpt.as_deref())?;
            for c in &result.per_class {
                println!(
                    "class {}  gt {:>4}  det {:>5}  AP {:.4}  P {:.4}  R {:.4}",
                    c.class_id,
                    c.num_gt,
                    c.num_det,
                    c.ap,
                    c.final_precision(),
                    c.final_recall()
                );
            }
            println!("mAP@{} {:.4}", cfg.eval.iou_threshold, result.map);
        }
        Command::Ablate => {
            println!("{:>5} {:>5} {:>7}", "gamma", "beta", "mAP");
            let rows = cmd_ablate(&cfg, |r| {
                println!("{:>5.1} {:>5.1} {:>7.4}", r.gamma, r.beta, r.map)
            })?;
            println!(
                "{} rows written to {}",
                rows.len(),
                cfg.paths.output_dir.join("ablation.csv").display()
            );
        }
        Command::ExportAttention {
            checkpoint,
            untrained,
            images,
        } => {
            let ckpt = checkpoint_arg(checkpoint, untrained);
            for path in cmd_export_attention(&cfg, ckpt.as_deref(), &images)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Params => {
            let report = cmd_params(&cfg)?;
            for (group, n) in &report.groups {
                println!("{group:<10} {n}");
            }
            println!("total {}", report.total);
        }
    }
    Ok(())
}

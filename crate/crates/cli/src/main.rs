//! Experiment CLI: train, sweep, diagnose, gradcheck and fixture generation.
//! Exit codes: 0 success, 1 usage/config error, 2 diverged run, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hypernet_core::checkpoint::{self, Checkpoint};
use hypernet_core::data::{gen_digit_fixture, write_idx, IDX_IMAGE_MAGIC};
use hypernet_core::error::Error;
use hypernet_core::experiment::{
    cmd_diagnose, parse_axis, run_experiment, run_sweep, ExperimentConfig,
};
use hypernet_core::gradcheck::gradcheck_suite;
use hypernet_core::rng::stream_rng;

#[derive(Parser)]
#[command(name = "hypernet", about = "Hypernetwork parametrization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to a TOML experiment config
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap the dataset at the first N training examples
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, gradient norms and a
    /// final checkpoint
    Train(CommonArgs),
    /// Train one run per value of a single config axis
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Axis to vary: mode, widths, depth, input_dim, activation, lr
        #[arg(long)]
        axis: String,
        /// Comma-separated values (widths use `16x128` syntax)
        #[arg(long)]
        values: String,
    },
    /// Sweep predicted-weight statistics over a gamma grid and fit
    /// std(gamma) against gamma
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        /// Diagnose a trained checkpoint instead of a fresh init
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the finite-difference gradient check suite
    Gradcheck {
        /// Seed for the randomized check inputs
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative-error threshold for failure
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write test fixtures (IDX datasets, corrupted variants, a checkpoint)
    Fixtures {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Seed for fixture content
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of examples in the digit fixture
        #[arg(long, default_value_t = 4096)]
        limit: usize,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    if let Some(limit) = common.limit {
        cfg.limit = Some(limit);
    }
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) | Error::Invalid(_) => ExitCode::from(1),
        Error::Io(_) | Error::Format(_) => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn cmd_train(common: &CommonArgs) -> Result<ExitCode, Error> {
    let cfg = load_config(common)?;
    let summary = run_experiment(&cfg)?;
    println!(
        "run finished: diverged={} best={:.6} last={:.6} wall={:.1}s",
        summary.diverged, summary.best_eval_metric, summary.last_eval_metric, summary.wall_seconds
    );
    println!("metrics: {}", summary.metrics_path.display());
    println!("checkpoint: {}", summary.checkpoint_path.display());
    Ok(if summary.diverged {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_sweep(common: &CommonArgs, axis: &str, values: &str) -> Result<ExitCode, Error> {
    let cfg = load_config(common)?;
    let axis = parse_axis(axis)?;
    let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
    let results = run_sweep(&cfg, axis, &values)?;
    let mut any_diverged = false;
    for (value, outcome) in &results {
        match outcome {
            Ok(s) => {
                println!(
                    "{value}: diverged={} best={:.6} last={:.6}",
                    s.diverged, s.best_eval_metric, s.last_eval_metric
                );
                any_diverged |= s.diverged;
            }
            Err(e) => {
                println!("{value}: error: {e}");
                any_diverged = true;
            }
        }
    }
    Ok(if any_diverged {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_diagnose_cli(common: &CommonArgs, ckpt: Option<&Path>) -> Result<ExitCode, Error> {
    let cfg = load_config(common)?;
    let out_dir = PathBuf::from(&cfg.output_dir);
    let (slope, intercept, r2) = cmd_diagnose(&cfg, ckpt, &out_dir)?;
    println!("fit std(gamma) = {slope:.6e} * gamma + {intercept:.6e}  (r2 = {r2:.6})");
    println!("sweep written to {}", out_dir.join("weight_sweep.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, tolerance: f64) -> Result<ExitCode, Error> {
    let results = gradcheck_suite(seed)?;
    let mut worst = 0.0f64;
    for (name, err) in &results {
        let status = if *err <= tolerance { "ok" } else { "FAIL" };
        println!("{status:4} {name:28} max rel err {err:.3e}");
        worst = worst.max(*err);
    }
    if worst > tolerance {
        println!("gradcheck failed: worst {worst:.3e} > tolerance {tolerance:.1e}");
        return Ok(ExitCode::from(2));
    }
    println!("gradcheck passed: worst {worst:.3e} <= tolerance {tolerance:.1e}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_fixtures(out: &Path, seed: u64, limit: usize) -> Result<ExitCode, Error> {
    std::fs::create_dir_all(out)?;

    // learnable digit-style dataset, raw and gzipped; train and test are
    // drawn in one call so both share the same class templates
    let mut rng = stream_rng(seed, "fixture-digits");
    let n_test = (limit / 4).max(1);
    let (all_images, all_labels) = gen_digit_fixture(limit + n_test, &mut rng);
    let (images, test_images) = all_images.split_at(limit);
    let (labels, test_labels) = all_labels.split_at(limit);
    write_idx(
        &out.join("digits-images.idx"),
        &out.join("digits-labels.idx"),
        images,
        labels,
        28,
        28,
        false,
    )?;
    write_idx(
        &out.join("digits-test-images.idx"),
        &out.join("digits-test-labels.idx"),
        test_images,
        test_labels,
        28,
        28,
        false,
    )?;
    write_idx(
        &out.join("digits-images.idx.gz"),
        &out.join("digits-labels.idx.gz"),
        &images[..limit.min(64)],
        &labels[..limit.min(64)],
        28,
        28,
        true,
    )?;

    // corrupted variants for loader error paths
    let mut bad_magic = Vec::new();
    bad_magic.extend_from_slice(&0x0000_0899u32.to_be_bytes());
    bad_magic.extend_from_slice(&[0u8; 12]);
    std::fs::write(out.join("bad-magic.idx"), bad_magic)?;

    let mut truncated = Vec::new();
    truncated.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    truncated.extend_from_slice(&8u32.to_be_bytes());
    truncated.extend_from_slice(&28u32.to_be_bytes());
    truncated.extend_from_slice(&28u32.to_be_bytes());
    truncated.extend_from_slice(&vec![0u8; 100]);
    std::fs::write(out.join("truncated.idx"), truncated)?;

    // small checkpoint fixture
    let mut ckpt = Checkpoint::default();
    ckpt.push("demo.w", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, -0.0, 42.0]);
    ckpt.push("demo.b", vec![3], vec![0.1, 0.2, 0.3]);
    checkpoint::save(&out.join("demo.hpnc"), &ckpt)?;

    println!("fixtures written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(common) => cmd_train(common),
        Command::Sweep {
            common,
            axis,
            values,
        } => cmd_sweep(common, axis, values),
        Command::Diagnose { common, checkpoint } => {
            cmd_diagnose_cli(common, checkpoint.as_deref())
        }
        Command::Gradcheck { seed, tolerance } => cmd_gradcheck(*seed, *tolerance),
        Command::Fixtures { out, seed, limit } => cmd_fixtures(out, *seed, *limit),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

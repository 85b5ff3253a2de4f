//! Command-line surface for the segmentation pipeline.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use bicanet_core::data::{generate_sample, save_dataset, SyntheticSpec};
use bicanet_core::train::{self, TrainConfig};
use bicanet_core::verify;

#[derive(Parser)]
#[command(name = "bicanet", about = "Context-aggregating semantic segmentation at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split, printing metrics CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: String,
        /// Override the dataset directory embedded in the checkpoint config.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one PPM image with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset directory from a spec JSON.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of samples assigned to the validation split.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
    /// Finite-difference gradient checks for the differentiable ops.
    Gradcheck {
        /// Check a single op by name instead of the whole suite.
        #[arg(long)]
        op: Option<String>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, resume } => {
            let cfg = TrainConfig::load(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            let report = train::train_with_resume(&cfg, resume.as_deref())?;
            println!(
                "trained {} iterations; checkpoint {}; metrics {}",
                report.iterations,
                report.final_checkpoint.display(),
                report.metrics_path.display()
            );
        }
        Command::Eval {
            ckpt,
            split,
            data_dir,
            out,
        } => {
            let csv = train::evaluate(&ckpt, &split, data_dir.as_deref())?;
            print!("{csv}");
            if let Some(path) = out {
                fs::write(&path, &csv)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Predict { ckpt, image, out } => {
            let (labels, color) = train::predict(&ckpt, &image, &out)?;
            println!("wrote {} and {}", labels.display(), color.display());
        }
        Command::GenData {
            spec,
            count,
            out,
            val_fraction,
        } => {
            if count == 0 {
                bail!("count must be >= 1");
            }
            if !(0.0..1.0).contains(&val_fraction) {
                bail!("val_fraction must lie in [0, 1)");
            }
            let bytes =
                fs::read(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SyntheticSpec = serde_json::from_slice(&bytes)?;
            spec.validate()?;
            let val_count = (count as f64 * val_fraction).round() as usize;
            let train_count = count - val_count;
            let mut train = Vec::with_capacity(train_count);
            let mut val = Vec::with_capacity(val_count);
            for i in 0..count as u64 {
                let sample = generate_sample(&spec, i)?;
                if (i as usize) < train_count {
                    train.push(sample);
                } else {
                    val.push(sample);
                }
            }
            save_dataset(&out, &train, &val)?;
            println!(
                "wrote {train_count} train / {val_count} val samples to {}",
                out.display()
            );
        }
        Command::Gradcheck { op } => {
            let outcomes = verify::gradient_suite(op.as_deref())?;
            let mut failed = 0;
            for o in &outcomes {
                let status = if o.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status} {:<20} max rel err {:.3e} (tol {:.0e}, {} entries)",
                    o.name, o.report.max_rel_err, o.tolerance, o.report.checked
                );
                if !o.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                bail!("{failed} gradient check(s) failed");
            }
        }
    }
    Ok(())
}

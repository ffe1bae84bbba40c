use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use skelsynth::harness::{
    ablate, ablation_csv, eigenvalue_gradient_check, evaluate_checkpoint, run_suite, suite_names, train, Checkpoint,
    TrainConfig, TrainOptions, MIN_TRIALS,
};
use skelsynth::synthdata::{generate_dataset, read_dataset, write_dataset, Category, DatasetSpec, Split, DEFAULT_JOINTS};
use skelsynth::{Error, Result};

#[derive(Parser)]
#[command(name = "skelsynth", version, about = "Skeleton-graph synthesis from point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic skeleton dataset as JSONL.
    GenData {
        /// Comma-separated categories: chain, tree, star, cycle, bicycle_like.
        #[arg(long, value_delimiter = ',', required = true)]
        categories: Vec<String>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        points: usize,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Smallest joint count per skeleton; raised to each category's minimum.
        #[arg(long, default_value_t = DEFAULT_JOINTS)]
        min_joints: usize,
        #[arg(long, default_value_t = DEFAULT_JOINTS)]
        max_joints: usize,
    },
    /// Train a model; writes metrics.csv, best.json and last.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train the five ablation configurations and write ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every differentiable component.
    GradCheck {
        #[arg(long, default_value_t = MIN_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            categories,
            count,
            points,
            noise,
            seed,
            out,
            min_joints,
            max_joints,
        } => {
            let categories = categories.iter().map(|c| c.trim().parse()).collect::<Result<Vec<Category>>>()?;
            let records = generate_dataset(&DatasetSpec {
                categories,
                count,
                points,
                noise,
                seed,
                min_joints,
                max_joints,
            })?;
            write_dataset(&records, &out)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let records = read_dataset(&data)?;
            let resume = resume.map(Checkpoint::load).transpose()?;
            create_dir(&out)?;
            let outcome = train(
                &cfg,
                &records,
                &TrainOptions {
                    out_dir: Some(out.clone()),
                    resume,
                },
            )?;
            if let Some(last) = outcome.log.last() {
                println!("epoch {} val_mpjpe {:.6}", last.epoch, last.val.mpjpe);
            }
            println!("best epoch {} val_mpjpe {:.6}", outcome.best.epoch, outcome.best.val_mpjpe);
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            report,
        } => {
            let split: Split = split.parse()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let records = read_dataset(&data)?;
            let r = evaluate_checkpoint(&ckpt, &records, split)?;
            r.save(&report)?;
            let m = &r.metrics;
            println!(
                "{} samples: mpjpe {:.6} ged {:.4} sc {:.4} tf {:.4}",
                r.samples, m.mpjpe, m.ged, m.sc, m.tf
            );
        }
        Command::Ablate { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let records = read_dataset(&data)?;
            create_dir(&out)?;
            let runs = ablate(&cfg, &records, None, Some(&out))?;
            let csv = ablation_csv(&runs);
            let path = out.join("ablation.csv");
            std::fs::write(&path, &csv).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
            print!("{csv}");
        }
        Command::GradCheck { trials, seed } => {
            if trials == 0 {
                return Err(Error::Config("--trials must be positive".into()));
            }
            let start = Instant::now();
            let mut failed = Vec::new();
            for name in suite_names() {
                let r = run_suite(&name, trials, seed)?;
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status} {name}: {} trials, {} entries, max scaled error {:.3e}",
                    r.trials, r.checked, r.max_error
                );
                if !r.passed() {
                    failed.push(name);
                }
            }
            let eig = eigenvalue_gradient_check(50, 8, seed, 1e-5)?;
            let status = if eig.passed() { "PASS" } else { "FAIL" };
            println!(
                "{status} eigenvalue_derivatives: {} matrices, max abs error {:.3e}",
                eig.matrices, eig.max_abs_error
            );
            if !eig.passed() {
                failed.push("eigenvalue_derivatives".into());
            }
            println!("total {:.1}s", start.elapsed().as_secs_f64());
            if !failed.is_empty() {
                return Err(Error::Numerical(format!("gradient checks failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use grace_core::controller::{simulate_dynamics, write_trajectory, AffineResponse, ControllerConfig, Mode};
use grace_core::harness::{entropy_error_run, run_report_write, train, write_bins, Labeling, RunConfig, Variant};
use grace_core::quant::{run_quant_bench, BenchRow, QuantConfig};
use grace_core::{Error, Result};

#[derive(Parser)]
#[command(name = "grace", version, about = "Gated distillation, relational alignment and group-wise quantization on a toy task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one student variant and write its per-epoch report.
    TrainToy {
        #[arg(long, default_value = "grace")]
        variant: Variant,
        /// 4, 8 or fp.
        #[arg(long)]
        bits: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// key=value file; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Entropy-binned teacher error rates.
    EntropyError {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        /// self, oracle or task.
        #[arg(long, default_value = "self")]
        labels: Labeling,
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the β controller against an affine loss response.
    SimulateController {
        #[arg(long, default_value_t = 30_000)]
        steps: usize,
        #[arg(long, default_value_t = 0.35)]
        tau: f64,
        #[arg(long, default_value_t = 0.0015)]
        eta: f64,
        #[arg(long, default_value = "adaptive")]
        mode: Mode,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        intercept: f64,
        #[arg(long, default_value_t = 0.1)]
        slope: f64,
    },
    /// Time dense, 16-bit and packed matvecs.
    QuantBench {
        #[arg(long, default_value_t = 4)]
        bits: u8,
        #[arg(long, default_value_t = 128)]
        group_size: usize,
        #[arg(long, default_value_t = 256)]
        rows: usize,
        #[arg(long, default_value_t = 1024)]
        cols: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut cfg = RunConfig::default();
            cfg.apply_text(&text)?;
            Ok(cfg)
        }
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, bytes: Vec<u8>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainToy {
            variant,
            bits,
            seed,
            epochs,
            out,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(b) = bits {
                cfg.set("bits", &b)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let bits = cfg.quant.map_or("fp".to_string(), |q| q.bits.to_string());
            let path = out.join(format!("{variant}_{bits}_seed{}.csv", cfg.seed));
            let report = train(&cfg, variant)?;
            run_report_write(&report.rows, &path)?;
            if let Some(step) = report.diverged_at {
                eprintln!("loss became non-finite at step {step}");
            }
            if let Some(last) = report.final_row() {
                println!(
                    "{variant}: eval_ce {:.4} eval_acc {:.4} -> {}",
                    last.eval_ce,
                    last.eval_acc,
                    path.display()
                );
            }
        }
        Command::EntropyError {
            seed,
            bins,
            out,
            labels,
            samples,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.seed = seed;
            cfg.validate()?;
            let result = entropy_error_run(&cfg, samples, labels, bins)?;
            let mut buf = Vec::new();
            write_bins(&result, &mut buf).expect("writing to memory");
            write_file(&out, buf)?;
            println!("pearson_r {:.4} binned_r2 {:.4}", result.pearson_r, result.binned_r2);
        }
        Command::SimulateController {
            steps,
            tau,
            eta,
            mode,
            noise,
            seed,
            out,
            intercept,
            slope,
        } => {
            let cfg = ControllerConfig {
                tau,
                eta,
                ..Default::default()
            };
            let model = AffineResponse { intercept, slope };
            let traj = simulate_dynamics(|b| model.expected(b), steps, &cfg, mode, noise, seed)?;
            let mut buf = Vec::new();
            write_trajectory(&traj, &mut buf).expect("writing to memory");
            write_file(&out, buf)?;
            if let Some(last) = traj.last() {
                println!("final beta {:.6} ema {:.6}", last.beta, last.ema_loss);
            }
        }
        Command::QuantBench {
            bits,
            group_size,
            rows,
            cols,
            iters,
            seed,
        } => {
            let cfg = QuantConfig::new(bits, group_size)?;
            let table = run_quant_bench(&cfg, rows, cols, iters, seed)?;
            println!("{}", BenchRow::CSV_HEADER);
            for r in table {
                println!("{}", r.to_csv());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

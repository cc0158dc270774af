use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lakan::data::{generate_dataset, read_dataset, write_dataset, FaceParams, ForgeParams};
use lakan::encoder::{ModelConfig, ToyEncoder};
use lakan::lakan::FusionMode;
use lakan::train::fitdemo::{fit_sin_plus_square, FitConfig};
use lakan::train::verify::{gradient_suite, COMPONENTS, TOLERANCE};
use lakan::train::{evaluate, load_checkpoint, save_checkpoint, train, write_history, TrainConfig};
use lakan::Error;

#[derive(Parser, Debug)]
#[command(name = "lakan", version, about = "Landmark-guided spline gating for forgery detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a balanced synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Total number of samples; must be even.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a detector and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a dataset with a saved checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Distort the gradient of one component (for testing the harness).
        #[arg(long, hide = true)]
        skew: Option<String>,
    },
    /// Fit sin(3·x1) + x2² with a [2, 5, 1] spline network.
    Fitdemo {
        #[arg(long, value_enum, default_value_t = Target::SinPlusSquare)]
        target: Target,
        #[arg(long, default_value_t = FitConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct ModelFlags {
    #[arg(long, default_value = "gating", value_parser = parse_fusion)]
    fusion: FusionMode,
    #[arg(long)]
    ablate_kan: bool,
    #[arg(long)]
    ablate_landmarks: bool,
}

impl ModelFlags {
    fn config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            fusion: self.fusion,
            ablate_kan: self.ablate_kan,
            ablate_landmarks: self.ablate_landmarks,
            seed,
            ..ModelConfig::default()
        }
    }
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|_| {
        let modes: Vec<_> = FusionMode::ALL.iter().map(|m| m.as_str()).collect();
        format!("expected one of {}", modes.join(", "))
    })
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Target {
    #[value(name = "sin_plus_square")]
    SinPlusSquare,
}

enum Failure {
    Usage(String),
    Lib(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Verification(_) => 4,
            Failure::Lib(e) => match e {
                Error::Config(_) => 1,
                Error::Numerical(_) | Error::Metric(_) | Error::Generation(_) => 3,
                _ => 2,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Verification(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { out, count, seed } => {
            if count % 2 != 0 {
                return Err(Failure::Usage(format!("--count must be even, got {count}")));
            }
            let samples = generate_dataset(count / 2, seed, &FaceParams::default(), &ForgeParams::default())?;
            write_dataset(&samples, &out)?;
            println!("generated {count} samples -> {}", out.display());
        }
        Command::Train {
            data,
            val,
            epochs,
            lr,
            batch,
            seed,
            model,
            checkpoint,
            history,
        } => {
            let train_set = read_dataset(&data)?;
            let val_set = read_dataset(&val)?;
            let (encoder, mut store) = ToyEncoder::new::<f32>(model.config(seed))?;
            let config = TrainConfig {
                epochs,
                lr,
                batch_size: batch,
                seed,
                ..TrainConfig::default()
            };
            println!("params={}", store.scalar_count());
            let records = train(&encoder, &mut store, &train_set, Some(&val_set), &config, |r| {
                println!(
                    "epoch={} loss={:.6} train_auc={:.4} val_auc={:.4}",
                    r.epoch,
                    r.loss,
                    r.train_auc,
                    r.val_auc.unwrap_or(f64::NAN)
                );
            })?;
            save_checkpoint(&store, &checkpoint)?;
            if let Some(path) = history {
                write_history(&records, path)?;
            }
            let final_auc = match records.last().and_then(|r| r.val_auc) {
                Some(v) => v,
                None => evaluate(&encoder, &store, &val_set)?.auc,
            };
            println!("val_auc={final_auc:.4}");
        }
        Command::Eval {
            data,
            checkpoint,
            model,
        } => {
            let samples = read_dataset(&data)?;
            let (encoder, mut store) = ToyEncoder::new::<f32>(model.config(0))?;
            load_checkpoint(&mut store, &checkpoint)?;
            let e = evaluate(&encoder, &store, &samples)?;
            println!("auc={:.4}", e.auc);
            println!("mean_score_real={:.4}", e.mean_real);
            println!("mean_score_fake={:.4}", e.mean_fake);
        }
        Command::Gradcheck { seed, skew } => {
            if let Some(name) = &skew {
                if !COMPONENTS.contains(&name.as_str()) {
                    return Err(Failure::Usage(format!("unknown component `{name}`")));
                }
            }
            let reports = gradient_suite(seed, skew.as_deref())?;
            let mut failed = Vec::new();
            for r in &reports {
                let status = if r.passed() { "pass" } else { "fail" };
                println!(
                    "component={} max_rel_error={:.3e} probes={} status={status}",
                    r.name, r.max_rel_error, r.probes
                );
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            if !failed.is_empty() {
                return Err(Failure::Verification(format!(
                    "gradient check above {TOLERANCE:e} for component={}",
                    failed.join(",")
                )));
            }
        }
        Command::Fitdemo { target, steps, seed } => {
            let Target::SinPlusSquare = target;
            let r = fit_sin_plus_square(&FitConfig {
                steps,
                seed,
                ..FitConfig::default()
            })?;
            println!("steps={} initial_mse={:.6e} final_mse={:.6e}", r.steps, r.initial_mse, r.final_mse);
        }
    }
    Ok(())
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

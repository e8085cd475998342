//! `fxnet`: data generation, training, distillation, quantization, ROM
//! export and accelerator simulation for the one-layer bearing fault CNN.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{SweepGrid, Variant};
use config::RunConfig;
use manifest::DirLock;

#[derive(Parser)]
#[command(name = "fxnet", version, about = "Distill, quantize and simulate a one-layer bearing fault CNN")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Run configuration. Precedence: defaults, then `--config`, then flags.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat key=value file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// `synthetic` or a record CSV path
    #[arg(long, global = true)]
    source: Option<String>,
    /// Comma-separated list, e.g. `clean,8,4,0`
    #[arg(long, global = true, allow_hyphen_values = true)]
    snr: Option<String>,
    #[arg(long, global = true)]
    per_class: Option<String>,
    #[arg(long, global = true)]
    hop: Option<String>,
    #[arg(long, global = true)]
    temperature: Option<String>,
    #[arg(long, global = true)]
    alpha: Option<String>,
    #[arg(long, global = true)]
    beta: Option<String>,
    #[arg(long, global = true)]
    gamma: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<String>,
    #[arg(long, global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    lr: Option<String>,
    #[arg(long, global = true)]
    teacher_epochs: Option<String>,
    #[arg(long, global = true)]
    teacher_lr: Option<String>,
    /// Number of training spectra used for calibration
    #[arg(long, global = true)]
    calibration: Option<String>,
    #[arg(long, global = true)]
    margin_bits: Option<String>,
    #[arg(long, global = true)]
    shared_fc_format: Option<String>,
    #[arg(long, global = true)]
    clock_hz: Option<String>,
    #[arg(long, global = true)]
    rf_select_cycles: Option<String>,
    #[arg(long, global = true)]
    pool_cycles: Option<String>,
    #[arg(long, global = true)]
    shift_cycles: Option<String>,
    #[arg(long, global = true)]
    classify_cycles: Option<String>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("seed", &self.seed),
            ("source", &self.source),
            ("snr", &self.snr),
            ("per_class", &self.per_class),
            ("hop", &self.hop),
            ("temperature", &self.temperature),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("teacher_epochs", &self.teacher_epochs),
            ("teacher_lr", &self.teacher_lr),
            ("calibration", &self.calibration),
            ("margin_bits", &self.margin_bits),
            ("shared_fc_format", &self.shared_fc_format),
            ("clock_hz", &self.clock_hz),
            ("rf_select_cycles", &self.rf_select_cycles),
            ("pool_cycles", &self.pool_cycles),
            ("shift_cycles", &self.shift_cycles),
            ("classify_cycles", &self.classify_cycles),
            ("out", &self.out),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Default)]
struct VariantArg {
    /// Use the student trained without distillation
    #[arg(long)]
    no_kd: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build spectrum datasets, one per SNR
    GenData,
    /// Train the teacher on each dataset
    TrainTeacher,
    /// Train the student with decoupled distillation (or plain cross-entropy)
    Distill(VariantArg),
    /// Calibrate and quantize the student to 16-bit words
    Quantize(VariantArg),
    /// Write ROM hex images of a quantized student
    ExportRom(VariantArg),
    /// Run the test split through the cycle-counting simulator
    Simulate(VariantArg),
    /// Float vs quantized metrics and the F1 drop
    Eval(VariantArg),
    /// Host inference time vs simulated latency
    Bench(VariantArg),
    /// Train students over explicit hyperparameter lists
    Sweep {
        #[command(flatten)]
        variant: VariantArg,
        #[arg(long, value_delimiter = ',')]
        lrs: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        temperatures: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.config.resolve()?;
    let _lock = DirLock::acquire(&cfg.out)?;
    match cli.cmd {
        Cmd::GenData => commands::gen_data(&cfg),
        Cmd::TrainTeacher => commands::train_teacher_cmd(&cfg),
        Cmd::Distill(v) => commands::distill(&cfg, Variant::from_flag(v.no_kd)),
        Cmd::Quantize(v) => commands::quantize_cmd(&cfg, Variant::from_flag(v.no_kd)),
        Cmd::ExportRom(v) => commands::export_rom_cmd(&cfg, Variant::from_flag(v.no_kd)),
        Cmd::Simulate(v) => commands::simulate(&cfg, Variant::from_flag(v.no_kd)),
        Cmd::Eval(v) => commands::eval(&cfg, Variant::from_flag(v.no_kd)),
        Cmd::Bench(v) => commands::bench(&cfg, Variant::from_flag(v.no_kd)),
        Cmd::Sweep {
            variant,
            lrs,
            batch_sizes,
            temperatures,
            alphas,
        } => commands::sweep(
            &cfg,
            Variant::from_flag(variant.no_kd),
            &SweepGrid {
                lrs,
                batch_sizes,
                temperatures,
                alphas,
            },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

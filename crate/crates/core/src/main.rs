use clap::{Args, Parser, Subcommand, ValueEnum};
use dimts::config::RunConfig;
use dimts::data::{block_correlated, phase_shifted_sines, write_series};
use dimts::metrics::{Distance, EvalOptions};
use dimts::pipeline::{self, MODEL_FILE};
use dimts::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dimts",
    version,
    about = "Diffusion time-series generator with selective state-space blocks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct Common {
    /// key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// optimization steps
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Fourier loss weight
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    /// correlation-shift loss weight
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    /// window length L
    #[arg(long, global = true)]
    length: Option<usize>,
    #[arg(long, global = true)]
    stride: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Window and normalize a CSV series
    Ingest { input: PathBuf },
    /// Train a model on a CSV series
    Train {
        input: PathBuf,
        /// directory holding model.ckpt and optimizer.ckpt to continue from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw synthetic windows from a checkpoint
    Sample {
        /// defaults to <out-dir>/model.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, short = 'n', default_value_t = 4)]
        n: usize,
    },
    /// Compare a real and a synthetic dataset
    Evaluate {
        real: PathBuf,
        synthetic: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// defaults to L/4
        #[arg(long)]
        max_lag: Option<usize>,
        #[arg(long, value_enum, default_value_t = Distance::Js)]
        distance: Distance,
    },
    /// Report channel similarity and the solved scan order
    AnalyzeChannels { input: PathBuf },
    /// Write a synthetic fixture series
    Synth {
        #[arg(value_enum)]
        kind: Fixture,
        output: PathBuf,
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 12.0)]
        period: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    Sines,
    Block,
}

impl Common {
    fn run_config(&self) -> dimts::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if let Some(v) = self.length {
            cfg.length = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        cfg.train_config()?;
        if cfg.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> dimts::Result<()> {
    let cfg = cli.common.run_config()?;
    let out = cli.common.out_dir.as_path();
    match cli.command {
        Command::Ingest { input } => {
            let ds = pipeline::run_ingest(&cfg, &input, out)?;
            println!(
                "{} windows of length {} over {} channels written to {}",
                ds.len(),
                ds.seq_len(),
                ds.channels(),
                out.display()
            );
        }
        Command::Train { input, resume } => {
            let fitted = pipeline::run_train(&cfg, &input, out, resume.as_deref())?;
            if let Some(last) = fitted.records.last() {
                println!("step {} total loss {:.6}", last.step, last.loss.total);
            }
            println!("checkpoint written to {}", out.join(MODEL_FILE).display());
        }
        Command::Sample { checkpoint, n } => {
            let ckpt = checkpoint.unwrap_or_else(|| out.join(MODEL_FILE));
            if !ckpt.exists() {
                return Err(Error::Checkpoint(format!(
                    "no checkpoint at {}",
                    ckpt.display()
                )));
            }
            let x = pipeline::run_sample(&cfg, &ckpt, n, cli.common.length, out)?;
            println!(
                "{} windows written to {}",
                x.shape()[0],
                out.join("samples.csv").display()
            );
        }
        Command::Evaluate {
            real,
            synthetic,
            bins,
            max_lag,
            distance,
        } => {
            let opts = EvalOptions {
                bins,
                max_lag,
                distance,
            };
            let report = pipeline::run_evaluate(
                &real,
                &synthetic,
                &opts,
                cli.common.length,
                cfg.stride,
                Some(out),
            )?;
            print!("{report}");
        }
        Command::AnalyzeChannels { input } => {
            let report = pipeline::run_analyze(&cfg, &input, cli.common.length, Some(out))?;
            print!("{}", report.to_text());
        }
        Command::Synth {
            kind,
            output,
            rows,
            channels,
            period,
            noise,
        } => {
            let series = match kind {
                Fixture::Sines => phase_shifted_sines(rows, channels, period, noise, cfg.seed),
                Fixture::Block => block_correlated(rows, cfg.seed),
            };
            if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_series(Path::new(&output), &series)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

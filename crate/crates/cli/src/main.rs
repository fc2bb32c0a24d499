use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use raindiff::commands::{self, PredictOptions};
use raindiff::{Error, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "raindiff", version, about = "Diffusion nowcasting of radar rainfall")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training steps
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Grid size (height = width)
    #[arg(long, global = true)]
    resolution: Option<usize>,
    #[arg(long, global = true)]
    diffusion_steps: Option<usize>,
    /// FSS neighbourhood size (odd)
    #[arg(long, global = true)]
    fss_n: Option<usize>,
    /// standard | paper
    #[arg(long, global = true)]
    hss_mode: Option<String>,
    /// max24 | min24
    #[arg(long, global = true)]
    weight_mode: Option<String>,
    /// Any other configuration key, as KEY=VALUE
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic advected-rain sequences as NRF files
    Synth {
        /// Output directory (defaults to `data_dir`)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on every NRF file in the data directory
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Continue from the checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Forecast the 4 frames after the last 4 frames of an NRF file
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a forecast NRF against an observed NRF
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        /// CSV destination (stdout when omitted)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write one PGM image per frame
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn build_config(c: &Common) -> raindiff::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.steps {
        cfg.train_steps = v;
    }
    if let Some(v) = c.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = c.diffusion_steps {
        cfg.diffusion_steps = v;
    }
    if let Some(v) = c.fss_n {
        cfg.fss_n = v;
    }
    if let Some(v) = &c.hss_mode {
        cfg.set("hss_mode", v)?;
    }
    if let Some(v) = &c.weight_mode {
        cfg.set("weight_mode", v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> raindiff::Result<()> {
    let mut cfg = build_config(&cli.common)?;
    match &cli.command {
        Command::Synth { out, count } => {
            if let Some(n) = count {
                cfg.synth_count = *n;
            }
            if let Some(dir) = out {
                cfg.data_dir = dir.clone();
            }
        }
        Command::Train {
            data,
            checkpoint,
            loss_log,
            ..
        } => {
            if let Some(d) = data {
                cfg.data_dir = d.clone();
            }
            if let Some(c) = checkpoint {
                cfg.checkpoint = c.clone();
            }
            if let Some(l) = loss_log {
                cfg.loss_log = l.clone();
            }
        }
        Command::Predict { checkpoint, .. } => {
            if let Some(c) = checkpoint {
                cfg.checkpoint = c.clone();
            }
        }
        _ => {}
    }
    cfg.validate()?;
    let mut err = std::io::stderr();
    let _ = write!(err, "# effective configuration\n{}", cfg.to_text());

    match cli.command {
        Command::Synth { .. } => {
            let paths = commands::synth(&cfg, &cfg.data_dir)?;
            eprintln!("wrote {} sequences to {}", paths.len(), cfg.data_dir.display());
        }
        Command::Train { resume, .. } => {
            let summary = commands::train(&cfg, resume, &mut err)?;
            eprintln!(
                "trained steps {}..={}, checkpoint {}",
                summary.first_step,
                summary.last_step,
                cfg.checkpoint.display()
            );
        }
        Command::Predict { input, output, .. } => {
            let opts = PredictOptions {
                seed: cfg.seed,
                resolution: cli.common.resolution,
                diffusion_steps: cli.common.diffusion_steps,
            };
            commands::predict(&cfg.checkpoint, &input, &output, &opts)?;
            eprintln!("wrote forecast to {}", output.display());
        }
        Command::Evaluate { pred, obs, output } => {
            let csv = commands::evaluate(&pred, &obs, &cfg.report_options(), cfg.weight_mode)?;
            match output {
                Some(path) => std::fs::write(&path, csv).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?,
                None => print!("{csv}"),
            }
        }
        Command::Render { input, out_dir } => {
            let paths = commands::render(&input, &out_dir)?;
            eprintln!("wrote {} images to {}", paths.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
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

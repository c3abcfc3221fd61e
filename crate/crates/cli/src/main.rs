use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use panogen_cli::{eval_cmd, gen_data, sample_cmd, train, ConditionSource, NonFiniteMetrics, RunConfig};

/// Camera-conditioned panoramic LiDAR generation on synthetic scenes.
///
/// Set VEILA_DETERMINISTIC=1 for bit-reproducible 64-bit training and
/// sampling.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired LiDAR/camera dataset.
    GenData {
        /// Run config (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; must not exist or be empty.
        #[arg(long)]
        out: PathBuf,
        /// Override `data.samples`.
        #[arg(long)]
        samples: Option<usize>,
        /// Override `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the denoiser; writes checkpoints/step-*.pgt and checkpoints/latest.pgt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to `train.steps`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Draw range images from a checkpoint.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose views condition the samples.
        #[arg(long, conflicts_with_all = ["image", "calib"])]
        condition: Option<PathBuf>,
        /// KITTI ingest: PNG camera image used as the single condition.
        #[arg(long, requires = "calib")]
        image: Option<PathBuf>,
        /// KITTI ingest: calibration file with P2 (or P) and Tr_velo_to_cam (or Tr).
        #[arg(long, requires = "image")]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override `sample.count`.
        #[arg(long)]
        count: Option<usize>,
        /// Override `sample.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `sample.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare a generated set against a reference set.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write bev.png and metrics.png.
        #[arg(long)]
        plot: bool,
        /// KITTI ingest: both inputs are directories of .bin files.
        #[arg(long)]
        kitti: bool,
    },
}

fn load(config: &Option<PathBuf>) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, samples, seed } => {
            let mut c = load(&config)?;
            if let Some(n) = samples {
                c.data.samples = n;
            }
            if let Some(s) = seed {
                c.data.seed = s;
            }
            let m = gen_data(&c, &out)?;
            println!("wrote {} samples to {} (dataset {})", m.samples.len(), out.display(), m.dataset_hash());
        }
        Command::Train { config, data, out, resume, steps } => {
            let mut c = load(&config)?;
            if let Some(s) = steps {
                c.train.steps = s;
            }
            let r = train(&c, &data, &out, resume.as_deref())?;
            println!(
                "checkpoint {} (running loss {})",
                r.checkpoint.display(),
                r.running_loss.map_or("n/a".into(), |l| format!("{l:.5}"))
            );
        }
        Command::Sample { config, checkpoint, condition, image, calib, out, count, seed, steps } => {
            let mut s = load(&config)?.sample;
            if let Some(n) = count {
                s.count = n;
            }
            if let Some(v) = seed {
                s.seed = v;
            }
            if let Some(k) = steps {
                s.steps = k;
            }
            let source = match (condition, image, calib) {
                (Some(d), _, _) => ConditionSource::Dataset(d),
                (None, Some(image), Some(calib)) => ConditionSource::Image { image, calib },
                _ => anyhow::bail!("pass --condition DIR or --image PNG --calib TXT"),
            };
            let m = sample_cmd(&checkpoint, &source, &s, &out)?;
            println!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Command::Eval { config, reference, generated, out, plot, kitti } => {
            let c = load(&config)?;
            let report = eval_cmd(&reference, &generated, &c, &out, plot, kitti)?;
            print!("{}", report.to_text()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<NonFiniteMetrics>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

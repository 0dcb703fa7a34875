use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use xct_cli::commands::{cmd_evaluate, cmd_inspect, cmd_reconstruct, cmd_synth, cmd_train, Stage};
use xct_cli::config::PipelineConfig;
use xct_cli::error::CliError;
use xct_models::diffusion::SamplerMode;
use xct_models::reconstruct::SamplerOptions;

/// Single-radiograph CT reconstruction pipeline.
///
/// Verbosity comes from the XCT_LOG environment variable (error, warn, info,
/// debug, trace).
#[derive(Parser)]
#[command(name = "xct", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Vq,
    Prior,
    Dm,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Vq => Stage::Vq,
            StageArg::Prior => Stage::Prior,
            StageArg::Dm => Stage::Dm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ddpm,
    Ddim,
}

/// Shared config resolution: profile defaults, then the config file, then
/// explicit flags (flags win).
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing fields take profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given.
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    /// Output directory for corpus, checkpoints, logs, and reports.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Base seed for phantom synthesis.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of phantom cases to synthesize.
    #[arg(long)]
    cases: Option<usize>,
    /// Override training iterations for every stage.
    #[arg(long)]
    iterations: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => match self.profile {
                Profile::Desk => PipelineConfig::default(),
                Profile::Paper => PipelineConfig::paper_profile(),
            },
        };
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(cases) = self.cases {
            cfg.phantom.count = cases;
        }
        if let Some(iters) = self.iterations {
            cfg.vq.iterations = iters;
            cfg.prior.iterations = iters;
            cfg.dm.iterations = iters;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the phantom corpus (volumes + frontal radiographs).
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train one stage: vq, prior (needs vq), or dm (needs vq + prior).
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from this stage's existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruct a CT volume from a radiograph (XIMG).
    Reconstruct {
        /// Input radiograph in XIMG format.
        radiograph: PathBuf,
        /// Output base path (writes .xvol plus three slice PNGs).
        #[arg(long, default_value = "reconstruction")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Sampler steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Sampler mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Sampler seed.
        #[arg(long)]
        sample_seed: Option<u64>,
    },
    /// Reconstruct every test case and write metric reports.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print checkpoint metadata.
    InspectCheckpoint {
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config } => {
            let cfg = config.resolve()?;
            cmd_synth(&cfg)?;
            Ok(())
        }
        Command::Train { stage, config, resume } => {
            let cfg = config.resolve()?;
            cmd_train(&cfg, stage.into(), resume)?;
            Ok(())
        }
        Command::Reconstruct {
            radiograph,
            out,
            config,
            steps,
            mode,
            sample_seed,
        } => {
            let cfg = config.resolve()?;
            let mut opts: SamplerOptions = cfg.sampler;
            if let Some(steps) = steps {
                opts.steps = steps;
            }
            if let Some(mode) = mode {
                opts.mode = match mode {
                    ModeArg::Ddpm => SamplerMode::Ddpm,
                    ModeArg::Ddim => SamplerMode::Ddim,
                };
            }
            if let Some(seed) = sample_seed {
                opts.seed = seed;
            }
            cmd_reconstruct(&cfg, &radiograph, &out, &opts)?;
            Ok(())
        }
        Command::Evaluate { config } => {
            let cfg = config.resolve()?;
            let report = cmd_evaluate(&cfg)?;
            println!(
                "psnr {:.2} (± {:.2}) dB | ssim {:.4} (± {:.4}) | perceptual (surrogate) {:.5} (± {:.5})",
                report.psnr_db.mean,
                report.psnr_db.std,
                report.ssim.mean,
                report.ssim.std,
                report.perceptual.mean,
                report.perceptual.std,
            );
            Ok(())
        }
        Command::InspectCheckpoint { checkpoint } => {
            print!("{}", cmd_inspect(&checkpoint)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XCT_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lare::lare_core::egre::Mode;
use lare::{Config, Error, Features, Pipeline, Result};

/// Latent reconstruction-error pipeline for detecting diffusion-generated
/// images.
#[derive(Parser, Debug)]
#[command(name = "lare2", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config and LARE2_SEED seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's work directory.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Suppresses progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise the real image corpus.
    Forge,
    /// Train the image autoencoder.
    TrainCodec,
    /// Train the latent diffusion models.
    TrainDiffusion {
        /// Train only this model.
        #[arg(long)]
        model: Option<String>,
    },
    /// Generate fake subsets and write the manifest.
    Gen,
    /// Compute the LaRE feature cache.
    Extract {
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        e: Option<usize>,
    },
    /// Compute the inversion-reconstruction baseline cache.
    ExtractDire {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train one detector per subset.
    TrainDetector {
        #[arg(long)]
        mode: Option<Mode>,
        /// Train only on this subset.
        #[arg(long)]
        subset: Option<String>,
        /// Feature cache to use: lare or dire.
        #[arg(long, default_value = "lare")]
        features: Features,
    },
    /// Evaluate trained detectors.
    Eval {
        #[arg(long)]
        mode: Option<Mode>,
        /// Score every detector on every subset.
        #[arg(long)]
        matrix: bool,
        #[arg(long, default_value = "lare")]
        features: Features,
    },
    /// Time LaRE against the inversion baseline.
    Bench,
    /// Re-extract and retrain over a grid of t or e.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<usize>,
    },
    /// Denoising loss of reals vs fakes across timesteps.
    Lossgap {
        #[arg(long, value_delimiter = ',')]
        t_grid: Option<Vec<usize>>,
    },
    /// Write LaRE heat-map overlays of test images.
    Overlay {
        /// Images per class and subset.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Run every stage and evaluate all detector modes.
    All,
}

fn config(cli: &Cli) -> Result<Config> {
    let mut c = match &cli.config {
        Some(p) => Config::read(p)?,
        None => Config::default(),
    };
    c.apply_env()?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(w) = &cli.work_dir {
        c.work_dir = w.clone();
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Usage("--jobs must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot start workers: {e}")))?;
    let cfg = config(&cli)?;
    let default_mode = cfg.mode;
    let p = Pipeline::new(cfg, cli.quiet)?;
    match cli.command {
        Command::Forge => p.forge(),
        Command::TrainCodec => p.train_codec().map(drop),
        Command::TrainDiffusion { model } => p.train_diffusion(model.as_deref()),
        Command::Gen => p.build_subsets().map(drop),
        Command::Extract { t, e } => p.extract(t, e).map(drop),
        Command::ExtractDire { steps } => p.extract_dire(steps).map(drop),
        Command::TrainDetector {
            mode,
            subset,
            features,
        } => p.train_detectors(mode.unwrap_or(default_mode), subset.as_deref(), features),
        Command::Eval {
            mode,
            matrix,
            features,
        } => p.eval(mode.unwrap_or(default_mode), features, matrix).map(drop),
        Command::Bench => p.bench().map(drop),
        Command::Sweep { param, grid } => p.sweep(&param, &grid).map(drop),
        Command::Lossgap { t_grid } => p.lossgap(t_grid.as_deref()).map(drop),
        Command::Overlay { count } => p.overlay(count).map(drop),
        Command::All => p.run_all(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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

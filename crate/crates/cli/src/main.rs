mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use touchsdf::pipeline::Ablation;

use commands::RunSpec;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "touchsdf", version, about = "Touch- and physics-guided shape reconstruction on voxel SDF grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data root (default: config, then $TOUCHSDF_DATA, then ./touchsdf-data).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Master seed of the dataset.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Number of scenes generated by gen-data.
    #[arg(long, global = true)]
    scenes: Option<usize>,
    #[arg(long, global = true, value_enum)]
    guidance: Option<Toggle>,
    /// full, no-touch or vision-only.
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    #[arg(long, global = true)]
    touch_noise_mm: Option<f64>,
    #[arg(long, global = true, value_enum)]
    field: Option<config::FieldKind>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded grasp scenes and their manifest.
    GenData,
    /// Fit the linear codec over the dataset's objects and depth twins.
    FitCodec,
    /// Train the denoiser on the conditioned scene libraries.
    Train,
    /// Reconstruct every scene under the selected ablation and noise.
    Reconstruct,
    /// Score a reconstruction run into stratified reports.
    Evaluate,
    /// Reconstruct and evaluate every sensing mode and noise level.
    Ablate,
    /// Run the release checks.
    Selftest,
}

impl Cli {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.data_root {
            cfg.data_root = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.scenes {
            cfg.scenes = v;
        }
        if let Some(v) = self.guidance {
            cfg.recon.sampler.guidance_enabled = matches!(v, Toggle::On);
        }
        if let Some(v) = self.ablation {
            cfg.ablation = v;
        }
        if let Some(v) = self.touch_noise_mm {
            cfg.touch_noise_mm = v;
        }
        if let Some(v) = self.field {
            cfg.field = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<bool> {
    if let Command::Selftest = cli.command {
        return Ok(commands::selftest());
    }
    let cfg = cli.config()?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .context("configuring worker threads")?;
    }
    let root = cfg.root();
    let spec = RunSpec::from_config(&cfg);
    match cli.command {
        Command::GenData => {
            let m = commands::gen_data(&cfg, &root)?;
            println!("wrote {} scenes to {}", m.count, commands::scenes_dir(&root).display());
        }
        Command::FitCodec => {
            let c = commands::fit_codec(&cfg, &root)?;
            println!("codec with {} components at {}", c.latent_dim(), commands::codec_path(&root).display());
        }
        Command::Train => {
            let net = commands::train(&cfg, &root)?;
            println!("denoiser with {} parameters at {}", net.param_count(), commands::denoiser_path(&root).display());
        }
        Command::Reconstruct => {
            let out = commands::reconstruct(&cfg, &root, &spec)?;
            println!("{}: {} scenes reconstructed, {} failed", out.run, out.completed, out.failed.len());
            return Ok(out.failed.is_empty());
        }
        Command::Evaluate => {
            let out = commands::evaluate(&cfg, &root, &spec)?;
            if !out.missing.is_empty() {
                println!("{} scenes without predictions were excluded", out.missing.len());
            }
            print!("{}", out.report.to_csv());
        }
        Command::Ablate => {
            let (table, failures) = commands::ablate(&cfg, &root)?;
            print!("{}", table.to_csv());
            return Ok(failures == 0);
        }
        Command::Selftest => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

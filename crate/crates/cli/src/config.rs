//! Run configuration: one TOML file, strictly validated, with command-line
//! overrides on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use touchsdf::flow::FlowConfig;
use touchsdf::metrics::EvalConfig;
use touchsdf::objectives::LossWeights;
use touchsdf::pipeline::{Ablation, ReconConfig};
use touchsdf::scene::SceneConfig;

/// Environment variable naming the default data root.
pub const DATA_ENV: &str = "TOUCHSDF_DATA";
pub const DEFAULT_DATA_ROOT: &str = "touchsdf-data";

/// Velocity field used for reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    /// Closed-form field of each scene's conditioned library.
    Oracle,
    /// The trained denoiser.
    Denoiser,
}

impl FieldKind {
    pub fn name(&self) -> &'static str {
        match self {
            FieldKind::Oracle => "oracle",
            FieldKind::Denoiser => "denoiser",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Falls back to the environment, then to `touchsdf-data`.
    pub data_root: Option<PathBuf>,
    /// Master seed of the generated dataset.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub scenes: usize,
    pub ablation: Ablation,
    pub touch_noise_mm: f64,
    pub field: FieldKind,
    pub scene: SceneConfig,
    pub recon: ReconConfig,
    pub flow: FlowConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            seed: 1,
            workers: 0,
            scenes: 50,
            ablation: Ablation::Full,
            touch_noise_mm: 0.0,
            field: FieldKind::Oracle,
            scene: SceneConfig::default(),
            recon: ReconConfig::default(),
            flow: FlowConfig::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            bail!("scenes must be > 0");
        }
        if !(self.touch_noise_mm >= 0.0 && self.touch_noise_mm.is_finite()) {
            bail!("touch_noise_mm must be a finite value >= 0");
        }
        self.scene.validate().context("[scene]")?;
        self.recon.validate().context("[recon]")?;
        self.flow.validate().context("[flow]")?;
        self.loss.validate().context("[loss]")?;
        self.eval.validate().context("[eval]")?;
        Ok(())
    }

    /// Data root: the config value, else the environment variable, else the
    /// built-in default.
    pub fn root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_ROOT))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn nested_sections_parse() {
        let c = RunConfig::from_toml(
            "seed = 4\nablation = \"no-touch\"\nfield = \"denoiser\"\n[recon]\nlatent_scale = 5.0\n[recon.sampler]\nsteps = 12\n[eval]\nsurface_points = 3000\n",
        )
        .unwrap();
        assert_eq!((c.seed, c.ablation, c.field), (4, Ablation::NoTouch, FieldKind::Denoiser));
        assert_eq!((c.recon.latent_scale, c.recon.sampler.steps), (5.0, 12));
        assert_eq!(c.eval.surface_points, 3000);
        assert_eq!(c.recon.sampler.eta, ReconConfig::default().sampler.eta);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
        assert!(RunConfig::from_toml("[recon.sampler]\nstep = 3").is_err());
        assert!(RunConfig::from_toml("ablation = \"touch-only\"").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut c = RunConfig::default();
        c.recon.sampler.steps = 0;
        assert!(c.validate().is_err());
        let c = RunConfig {
            touch_noise_mm: -1.0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

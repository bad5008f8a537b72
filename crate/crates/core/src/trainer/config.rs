use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::optim::AdamConfig;

/// Which parts of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub use_resfft: bool,
    pub use_discriminator: bool,
    /// Only meaningful with a discriminator.
    pub use_freq_branch: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Preset::V5.ablation()
    }
}

/// The five model versions compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// AdaIN only.
    V1,
    /// AdaIN and ResFFT.
    V2,
    /// ResFFT with a spatial-only discriminator.
    V3,
    /// No ResFFT, full discriminator.
    V4,
    /// Everything.
    V5,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::V1, Preset::V2, Preset::V3, Preset::V4, Preset::V5];

    pub fn ablation(self) -> Ablation {
        let (use_resfft, use_discriminator, use_freq_branch) = match self {
            Preset::V1 => (false, false, false),
            Preset::V2 => (true, false, false),
            Preset::V3 => (true, true, false),
            Preset::V4 => (false, true, true),
            Preset::V5 => (true, true, true),
        };
        Ablation {
            use_resfft,
            use_discriminator,
            use_freq_branch,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "V1" => Ok(Preset::V1),
            "V2" => Ok(Preset::V2),
            "V3" => Ok(Preset::V3),
            "V4" => Ok(Preset::V4),
            "V5" => Ok(Preset::V5),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected V1..V5)"))),
        }
    }
}

/// Every training setting; mirrors the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub image_size: usize,
    /// Patches per side in the discriminator.
    pub n: usize,
    /// Channel multiplier for both networks.
    pub width: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; 0 saves only the final one.
    pub checkpoint_every: u64,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub resfft_blocks: usize,
    /// JSON-lines manifest, relative to the config file.
    pub manifest: Option<PathBuf>,
    /// Output directory for checkpoints and metrics, relative to the config file.
    pub output_dir: PathBuf,
    /// Optional pretrained encoder weights.
    pub encoder_weights: Option<PathBuf>,
    pub optimizer: AdamConfig,
    pub weights: LossWeights,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 256,
            n: 4,
            width: 1.0,
            batch_size: 4,
            iterations: 1000,
            seed: 0,
            checkpoint_every: 0,
            d_steps: 1,
            resfft_blocks: 1,
            manifest: None,
            output_dir: PathBuf::from("run"),
            encoder_weights: None,
            optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.manifest = cfg.manifest.as_deref().map(resolve);
        cfg.encoder_weights = cfg.encoder_weights.as_deref().map(resolve);
        cfg.output_dir = resolve(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.ablation = preset.ablation();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return bad(format!("image_size must be a positive multiple of 8, got {}", self.image_size));
        }
        if self.ablation.use_discriminator && self.image_size != 64 * self.n {
            return bad(format!(
                "image_size must equal 64·n = {} when the discriminator is used, got {}",
                64 * self.n,
                self.image_size
            ));
        }
        if self.ablation.use_discriminator && ![2, 4, 8].contains(&self.n) {
            return bad(format!("n must be 2, 4 or 8, got {}", self.n));
        }
        if !(self.optimizer.lr > 0.0) {
            return bad(format!("optimizer.lr must be positive, got {}", self.optimizer.lr));
        }
        if !(self.width > 0.0) {
            return bad(format!("width must be positive, got {}", self.width));
        }
        if self.batch_size == 0 || self.d_steps == 0 {
            return bad("batch_size and d_steps must be at least 1".into());
        }
        if !(self.weights.lambda_c >= 0.0 && self.weights.lambda_adv >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            width: self.width,
            use_resfft: self.ablation.use_resfft,
            resfft_blocks: self.resfft_blocks,
            normalize_input: self.encoder_weights.is_some(),
        }
    }

    pub fn discriminator(&self) -> Option<DiscriminatorConfig> {
        self.ablation.use_discriminator.then_some(DiscriminatorConfig {
            n: self.n,
            width: self.width,
            use_freq_branch: self.ablation.use_freq_branch,
        })
    }

    /// Hash of the settings that shape the model and its training
    /// trajectory; run length, cadence and paths are excluded so a longer
    /// resumed run matches.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.iterations = 0;
        c.checkpoint_every = 0;
        c.manifest = None;
        c.output_dir = PathBuf::new();
        c.encoder_weights = c.encoder_weights.map(|_| PathBuf::from("set"));
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

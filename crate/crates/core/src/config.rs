//! Run configuration as UTF-8 `key = value` text.
//!
//! `#` starts a comment; blank lines are ignored; every key is optional and
//! unknown keys are rejected. Lists are comma separated. See
//! [`RunConfig::to_text`] for the full schema with defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{reference_counts, DatasetConfig};
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind, SamplerConfig};
use crate::error::{Error, Result};
use crate::label::ConditionLabel;
use crate::metrics::ClassifierConfig;
use crate::seed::{mix, stream};
use crate::unet::{UNetConfig, UNetTrainConfig};
use crate::vae::{VaeConfig, VaeTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    RandomConv,
    VaeEncoder,
}

impl ExtractorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RandomConv => "random_conv",
            Self::VaeEncoder => "vae_encoder",
        }
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_conv" => Ok(Self::RandomConv),
            "vae_encoder" => Ok(Self::VaeEncoder),
            _ => Err(Error::Config(format!("unknown feature extractor `{s}` (random_conv | vae_encoder)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: f64,
    pub image_size: usize,
    pub latent_channels: usize,
    pub vae_channels: [usize; 3],
    pub vae_steps: usize,
    pub vae_batch: usize,
    pub vae_lr: f64,
    pub vae_beta: f64,
    pub unet_channels: Vec<usize>,
    pub unet_blocks: usize,
    pub emb_dim: usize,
    pub unet_steps: usize,
    pub unet_batch: usize,
    pub unet_lr: f64,
    pub grad_clip: f64,
    pub unet_ema: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    pub held_out: Vec<ConditionLabel>,
    pub samples_per_cell: usize,
    pub msssim_pairs: usize,
    pub feature_extractor: ExtractorKind,
    pub classifier_per_cell: usize,
    pub classifier_steps: usize,
    pub out: PathBuf,
}

/// Cells with no images in the reference collection.
pub fn default_held_out() -> Vec<ConditionLabel> {
    reference_counts().iter().filter(|(_, &n)| n == 0).map(|(l, _)| l).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 0.1,
            image_size: 64,
            latent_channels: 4,
            vae_channels: VaeConfig::default().channels,
            vae_steps: 3000,
            vae_batch: 16,
            vae_lr: 1e-3,
            vae_beta: 1e-6,
            unet_channels: UNetConfig::default().channels,
            unet_blocks: 2,
            emb_dim: 64,
            unet_steps: 12000,
            unet_batch: 16,
            unet_lr: 1e-3,
            grad_clip: 1.0,
            unet_ema: 0.999,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 50,
            held_out: default_held_out(),
            samples_per_cell: 64,
            msssim_pairs: 100,
            feature_extractor: ExtractorKind::RandomConv,
            classifier_per_cell: 40,
            classifier_steps: 800,
            out: PathBuf::from("run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "scale" => self.scale = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "latent_channels" => self.latent_channels = parse(key, v)?,
            "vae_channels" => {
                let list: Vec<usize> = parse_list(key, v)?;
                self.vae_channels =
                    list.try_into().map_err(|_| Error::Config("`vae_channels` needs exactly three widths".into()))?;
            }
            "vae_steps" => self.vae_steps = parse(key, v)?,
            "vae_batch" => self.vae_batch = parse(key, v)?,
            "vae_lr" => self.vae_lr = parse(key, v)?,
            "vae_beta" => self.vae_beta = parse(key, v)?,
            "unet_channels" => self.unet_channels = parse_list(key, v)?,
            "unet_blocks" => self.unet_blocks = parse(key, v)?,
            "emb_dim" => self.emb_dim = parse(key, v)?,
            "unet_steps" => self.unet_steps = parse(key, v)?,
            "unet_batch" => self.unet_batch = parse(key, v)?,
            "unet_lr" => self.unet_lr = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "unet_ema" => self.unet_ema = parse(key, v)?,
            "timesteps" => self.timesteps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "ddim_steps" => self.ddim_steps = parse(key, v)?,
            "held_out" => {
                self.held_out = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_>>()?
            }
            "samples_per_cell" => self.samples_per_cell = parse(key, v)?,
            "msssim_pairs" => self.msssim_pairs = parse(key, v)?,
            "feature_extractor" => self.feature_extractor = v.parse()?,
            "classifier_per_cell" => self.classifier_per_cell = parse(key, v)?,
            "classifier_steps" => self.classifier_steps = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 32 || self.image_size % 16 != 0 {
            return bad(format!("image_size must be a multiple of 16 and >= 32, got {}", self.image_size));
        }
        if self.vae_batch == 0 || self.unet_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.unet_ema) {
            return bad(format!("unet_ema must lie in [0, 1), got {}", self.unet_ema));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.timesteps {
            return bad(format!("ddim_steps must lie in 1..={}, got {}", self.timesteps, self.ddim_steps));
        }
        if self.samples_per_cell < 2 || self.msssim_pairs == 0 {
            return bad("samples_per_cell must be >= 2 and msssim_pairs >= 1".into());
        }
        let mut seen = self.held_out.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.held_out.len() {
            return bad("held_out lists a cell twice".into());
        }
        self.schedule()?;
        Ok(())
    }

    /// Full schema with current values.
    pub fn to_text(&self) -> String {
        let mut s = self.model_text();
        let _ = writeln!(s, "out = {}", self.out.display());
        s
    }

    /// Every key except the output directory; stored in checkpoints so that
    /// runs differing only in location stay byte-identical.
    pub fn model_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("scale", self.scale.to_string());
        kv("image_size", self.image_size.to_string());
        kv("latent_channels", self.latent_channels.to_string());
        kv("vae_channels", join(&self.vae_channels));
        kv("vae_steps", self.vae_steps.to_string());
        kv("vae_batch", self.vae_batch.to_string());
        kv("vae_lr", self.vae_lr.to_string());
        kv("vae_beta", self.vae_beta.to_string());
        kv("unet_channels", join(&self.unet_channels));
        kv("unet_blocks", self.unet_blocks.to_string());
        kv("emb_dim", self.emb_dim.to_string());
        kv("unet_steps", self.unet_steps.to_string());
        kv("unet_batch", self.unet_batch.to_string());
        kv("unet_lr", self.unet_lr.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("unet_ema", self.unet_ema.to_string());
        kv("timesteps", self.timesteps.to_string());
        kv("beta_start", self.beta_start.to_string());
        kv("beta_end", self.beta_end.to_string());
        kv("ddim_steps", self.ddim_steps.to_string());
        kv("held_out", join(&self.held_out));
        kv("samples_per_cell", self.samples_per_cell.to_string());
        kv("msssim_pairs", self.msssim_pairs.to_string());
        kv("feature_extractor", self.feature_extractor.as_str().to_string());
        kv("classifier_per_cell", self.classifier_per_cell.to_string());
        kv("classifier_steps", self.classifier_steps.to_string());
        s
    }

    pub fn is_held_out(&self, label: ConditionLabel) -> bool {
        self.held_out.contains(&label)
    }

    pub fn dataset(&self) -> Result<DatasetConfig> {
        DatasetConfig::scaled(self.scale, self.image_size, self.seed)
    }

    pub fn vae(&self) -> VaeConfig {
        VaeConfig { image_size: self.image_size, latent_channels: self.latent_channels, channels: self.vae_channels }
    }

    pub fn vae_train(&self) -> VaeTrainConfig {
        VaeTrainConfig {
            steps: self.vae_steps,
            batch_size: self.vae_batch,
            lr: self.vae_lr,
            beta: self.vae_beta,
            grad_clip: self.grad_clip,
            seed: mix(self.seed, stream::VAE_TRAIN),
        }
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            latent_channels: self.latent_channels,
            latent_size: self.image_size / 4,
            channels: self.unet_channels.clone(),
            blocks_per_level: self.unet_blocks,
            emb_dim: self.emb_dim,
            timesteps: self.timesteps,
        }
    }

    pub fn unet_train(&self) -> UNetTrainConfig {
        UNetTrainConfig {
            steps: self.unet_steps,
            batch_size: self.unet_batch,
            lr: self.unet_lr,
            grad_clip: self.grad_clip,
            ema_decay: self.unet_ema,
            seed: mix(self.seed, stream::UNET_TRAIN),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(ScheduleKind::Linear, self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { num_steps: self.ddim_steps, ..SamplerConfig::default() }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig { steps: self.classifier_steps, seed: mix(self.seed, stream::CLASSIFIER), ..ClassifierConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(c.held_out.len(), 7);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn parsing_rules() {
        let c = RunConfig::parse("# comment\nseed = 9  # trailing\n\nunet_channels = 8, 16\nheld_out = Healthy/PD\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.unet_channels, vec![8, 16]);
        assert_eq!(c.held_out.len(), 1);
        for bad in ["nope = 1", "seed = x", "seed", "held_out = Healthy/XX", "ddim_steps = 0", "vae_channels = 8, 16"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_)) | Err(Error::Parse(_))), "{bad}");
        }
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bucket::DEFAULT_EDGES;
use crate::dit::{DitConfig, DitTrainSettings, DEFAULT_SAMPLE_STEPS};
use crate::error::{Error, Result};
use crate::numeric::{LrSchedule, OptimizerSettings};
use crate::rope::RopeSplit;
use crate::synth::CorpusConfig;
use crate::vae::{LossWeights, VaeConfig, VaeTrainSettings, VaeVariant};

use super::hex;

/// Largest transformer (in parameters) a run config may ask for.
pub const DESK_PARAM_BUDGET: usize = 50_000_000;

/// Everything a pipeline run needs, read from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub vae: VaeSection,
    pub dit: DitSection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSection {
    pub c: usize,
    pub d: usize,
    pub widths: Vec<usize>,
    /// RGB, alpha and perceptual loss weights.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default = "default_variant")]
    pub variant: VaeVariant,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Train on the first this-many corpus images; all when absent.
    #[serde(default)]
    pub images: Option<usize>,
    #[serde(default)]
    pub augment: bool,
}

fn default_variant() -> VaeVariant {
    VaeVariant::RgbaFull
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitSection {
    pub depth: usize,
    pub heads: usize,
    pub hidden: usize,
    pub rope_split: [usize; 4],
    /// Euler steps when sampling.
    pub steps: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_text_dim() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    pub areas: Vec<usize>,
    pub ar_range: (f64, f64),
    #[serde(default = "default_layer_counts")]
    pub layer_counts: Vec<usize>,
}

fn default_layer_counts() -> Vec<usize> {
    vec![0, 1, 2, 3, 4]
}

/// Transformer training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub lr_min: f64,
    pub schedule: LrSchedule,
    pub steps: usize,
    pub batch: usize,
}

/// Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data: PathBuf,
    pub vae: PathBuf,
    pub dit: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: "data".into(),
            vae: "vae.ldck".into(),
            dit: "dit.ldck".into(),
            reports: "reports".into(),
        }
    }
}

impl RunConfig {
    /// The small configuration every command defaults to.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            vae: VaeSection {
                c: 8,
                d: 8,
                widths: vec![32, 64, 64],
                alpha: 1.0,
                beta: 1.0,
                gamma: 0.0,
                variant: VaeVariant::RgbaFull,
                train_steps: 2000,
                batch: 4,
                lr: 1e-3,
                lr_min: 1e-4,
                images: Some(16),
                augment: false,
            },
            dit: DitSection {
                depth: 4,
                heads: 4,
                hidden: 128,
                rope_split: RopeSplit::desk().dims,
                steps: DEFAULT_SAMPLE_STEPS,
                mlp_ratio: 4,
                text_dim: 64,
            },
            data: DataSection {
                count: 32,
                areas: vec![64 * 64],
                ar_range: (1.0, 1.0),
                layer_counts: vec![2],
            },
            train: TrainSection {
                lr: 1.5e-3,
                lr_min: 1.5e-4,
                schedule: LrSchedule::Cosine,
                steps: 5000,
                batch: 4,
            },
            paths: PathsSection::default(),
        }
    }

    /// Full-scale hyperparameters. Kept as a record; it
    /// fails [`RunConfig::validate`] on purpose.
    pub fn paper_full() -> Self {
        let mut c = Self::desk();
        c.vae.c = 16;
        c.vae.d = 256;
        c.vae.widths = vec![128, 256, 512, 512];
        c.dit = DitSection {
            depth: 56,
            heads: 24,
            hidden: 3072,
            rope_split: RopeSplit::full_scale().dims,
            steps: DEFAULT_SAMPLE_STEPS,
            mlp_ratio: 4,
            text_dim: 4096,
        };
        c.train.lr = 1.2e-4;
        c.train.lr_min = 1.2e-5;
        c.train.schedule = LrSchedule::Cosine;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-full" => Ok(Self::paper_full()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected desk or paper-full)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Read `path` and resolve relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        c.paths = c.paths.resolved(base);
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, leaving out the paths so runs in
    /// different directories compare equal.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsSection::default();
        hex(&Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        self.vae_config().validate()?;
        self.vae_settings().validate()?;
        if !(self.vae.lr > 0.0 && self.vae.lr_min >= 0.0 && self.train.lr > 0.0 && self.train.lr_min >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.vae.images == Some(0) {
            return Err(Error::Config("vae.images must be at least 1".into()));
        }
        let dit = self.dit_config(1);
        dit.validate()?;
        if self.dit.steps == 0 || self.train.steps == 0 || self.train.batch == 0 {
            return Err(Error::Config("dit.steps, train.steps and train.batch must be at least 1".into()));
        }
        let params = dit.parameter_estimate();
        if params > DESK_PARAM_BUDGET {
            return Err(Error::Config(format!(
                "transformer needs about {params} parameters, above the {DESK_PARAM_BUDGET} this build can train"
            )));
        }
        self.corpus_config().validate()?;
        if self.data.areas.iter().any(|a| a % (self.vae.c * self.vae.c) != 0) {
            return Err(Error::Config("data areas must be multiples of vae.c squared".into()));
        }
        Ok(())
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            c: self.vae.c,
            d: self.vae.d,
            widths: self.vae.widths.clone(),
            variant: self.vae.variant,
            variational: false,
        }
    }

    pub fn vae_settings(&self) -> VaeTrainSettings {
        VaeTrainSettings {
            steps: self.vae.train_steps,
            batch: self.vae.batch,
            seed: self.seed,
            optimizer: OptimizerSettings {
                lr: self.vae.lr,
                lr_min: self.vae.lr_min,
                ..Default::default()
            },
            weights: LossWeights {
                rgb: self.vae.alpha,
                alpha: self.vae.beta,
                perceptual: self.vae.gamma,
            },
            kl_weight: 0.0,
            augment: self.vae.augment,
        }
    }

    pub fn dit_config(&self, vocab: usize) -> DitConfig {
        DitConfig {
            depth: self.dit.depth,
            heads: self.dit.heads,
            hidden: self.dit.hidden,
            mlp_ratio: self.dit.mlp_ratio,
            rope: RopeSplit {
                dims: self.dit.rope_split,
                base: RopeSplit::desk().base,
            },
            text_dim: self.dit.text_dim,
            latent_dim: self.vae.d,
            vocab,
            max_slots: DitConfig::desk(self.vae.d, vocab).max_slots,
        }
    }

    pub fn dit_settings(&self) -> DitTrainSettings {
        DitTrainSettings {
            steps: self.train.steps,
            batch: self.train.batch,
            seed: self.seed,
            optimizer: OptimizerSettings {
                lr: self.train.lr,
                lr_min: self.train.lr_min,
                schedule: self.train.schedule,
                ..Default::default()
            },
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            count: self.data.count,
            seed: self.seed,
            areas: self.data.areas.clone(),
            ar_range: self.data.ar_range,
            layer_counts: self.data.layer_counts.clone(),
            edges: DEFAULT_EDGES.to_vec(),
            multiple: self.vae.c,
        }
    }
}

impl PathsSection {
    pub fn resolved(&self, base: &Path) -> Self {
        let r = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        Self {
            data: r(&self.data),
            vae: r(&self.vae),
            dit: r(&self.dit),
            reports: r(&self.reports),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_round_trips_and_validates() {
        let c = RunConfig::desk();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let mut moved = c.clone();
        moved.paths = moved.paths.resolved(Path::new("/elsewhere"));
        assert_eq!(moved.hash(), c.hash());
        moved.seed = 1;
        assert_ne!(moved.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json()).unwrap();
        v["train"]["momentum"] = 0.5.into();
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json()).unwrap();
        v["extra"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn paper_full_is_recorded_but_not_runnable() {
        let c = RunConfig::paper_full();
        assert_eq!((c.dit.depth, c.dit.heads, c.dit.hidden), (56, 24, 3072));
        assert_eq!(c.train.lr, 1.2e-4);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(RunConfig::preset("paper-full").is_ok());
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn bad_rope_split_rejected() {
        let mut c = RunConfig::desk();
        c.dit.rope_split = [14, 14, 2, 4];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}

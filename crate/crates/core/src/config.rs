//! Run configuration files.
//!
//! One TOML document holds every tunable: network sizes, preprocessing,
//! patching, training, inference and phantom defaults. Missing keys take their
//! defaults and unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::SegmentOptions;
use crate::model::ModelConfig;
use crate::patches::PatchGrid;
use crate::phantom::PhantomSpec;
use crate::preprocess::NlmParams;
use crate::train::TrainConfig;
use crate::volume::default_class_names;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Percentiles matched by the intensity alignment.
    pub p_low: f64,
    pub p_high: f64,
    /// Denoising parameters; absent disables denoising.
    pub nlm: Option<NlmParams>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            p_low: 1.0,
            p_high: 99.0,
            nlm: Some(NlmParams::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub size: usize,
    pub stride: usize,
    pub min_foreground_fraction: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: 96,
            stride: 48,
            min_foreground_fraction: 0.1,
        }
    }
}

impl PatchConfig {
    pub fn grid(&self) -> PatchGrid {
        PatchGrid::cubic(self.size, self.stride, self.min_foreground_fraction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub patch: usize,
    pub overlap: f64,
    pub batch: usize,
    pub sigma_fraction: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let s = SegmentOptions::default();
        Self {
            patch: 96,
            overlap: s.overlap,
            batch: s.batch,
            sigma_fraction: s.sigma_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub class_names: Vec<String>,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub patches: PatchConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub phantom: PhantomSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU-sized network on 32-voxel patches.
    pub fn desk() -> Self {
        Self {
            class_names: default_class_names(),
            model: ModelConfig::desk(),
            preprocess: PreprocessConfig::default(),
            patches: PatchConfig {
                size: 32,
                stride: 16,
                ..PatchConfig::default()
            },
            train: TrainConfig::default(),
            inference: InferenceConfig {
                patch: 32,
                ..InferenceConfig::default()
            },
            phantom: PhantomSpec::default(),
        }
    }

    /// Full-size network on 96-voxel patches.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            patches: PatchConfig::default(),
            inference: InferenceConfig::default(),
            ..Self::desk()
        }
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        if self.class_names.len() != self.model.classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.model.classes
            )));
        }
        let p = &self.preprocess;
        if !(0.0 <= p.p_low && p.p_low < p.p_high && p.p_high <= 100.0) {
            return Err(Error::Config(format!("percentiles {} and {} out of order", p.p_low, p.p_high)));
        }
        let m = self.model.size_multiple();
        for (what, size) in [("patches.size", self.patches.size), ("inference.patch", self.inference.patch)] {
            if size == 0 || size % m != 0 {
                return Err(Error::Config(format!("{what} = {size} must be a positive multiple of {m}")));
            }
        }
        if self.patches.stride == 0 {
            return Err(Error::Config("patches.stride must be positive".into()));
        }
        let i = &self.inference;
        if !(0.0..1.0).contains(&i.overlap) || i.batch == 0 || !(i.sigma_fraction > 0.0) {
            return Err(Error::Config("inference needs overlap in [0, 1), batch > 0 and sigma_fraction > 0".into()));
        }
        Ok(())
    }

    pub fn segment_options(&self) -> SegmentOptions {
        SegmentOptions {
            patch: self.inference.patch,
            overlap: self.inference.overlap,
            nlm: self.preprocess.nlm,
            batch: self.inference.batch,
            sigma_fraction: self.inference.sigma_fraction,
        }
    }
}

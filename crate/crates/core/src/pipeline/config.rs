//! The run configuration: one flat TOML file of documented keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cam::{CamMethod, Upsample, DEFAULT_TAU, MAX_PRESERVE_FRACTION};
use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::fsio;
use crate::synth::EndpointConfig;
use crate::trainer::{ArchTemplate, LrSchedule, Selection, TrainConfig};

/// Saliency source for the preserve-masks; `None` selects whole-image img2img.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamChoice {
    None,
    GradCam,
    GradCamPp,
}

impl CamChoice {
    pub fn method(self) -> Option<CamMethod> {
        match self {
            CamChoice::None => None,
            CamChoice::GradCam => Some(CamMethod::GradCam),
            CamChoice::GradCamPp => Some(CamMethod::GradCamPp),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CamChoice::None => "none",
            CamChoice::GradCam => "gradcam",
            CamChoice::GradCamPp => "gradcampp",
        }
    }
}

impl std::str::FromStr for CamChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "img2img" => Ok(CamChoice::None),
            "gradcam" => Ok(CamChoice::GradCam),
            "gradcampp" => Ok(CamChoice::GradCamPp),
            other => Err(Error::Config(format!("unknown cam method {other:?} (gradcam|gradcampp|none)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Procedural,
    Remote,
}

impl std::str::FromStr for BackendChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "procedural" => Ok(BackendChoice::Procedural),
            "remote" => Ok(BackendChoice::Remote),
            other => Err(Error::Config(format!("unknown backend {other:?} (procedural|remote)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainInit {
    /// Fresh initialisation with a seed distinct from the ERM run.
    Scratch,
    /// Continue from the ERM parameters.
    Finetune,
}

/// Every key of the run file. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // dataset
    /// `"synthetic"` or `"manifest"`.
    pub dataset: String,
    /// Manifest JSONL, only with `dataset = "manifest"`.
    pub manifest_path: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub n_attributes: usize,
    pub correlation: f64,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f64,

    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub selection: Selection,
    /// Epochs of the retraining runs; defaults to `epochs`.
    pub retrain_epochs: Option<usize>,
    pub retrain_init: RetrainInit,
    /// Also train JTT and JTT+SCGS.
    pub jtt: bool,
    pub jtt_lambda: f64,
    pub jtt_id_epochs: usize,

    // pipeline
    pub clusters_per_class: usize,
    pub sample_fraction: f64,
    pub tau: f64,
    pub max_preserve_fraction: f64,
    pub cam: CamChoice,
    pub upsample: Upsample,
    pub generation_fraction: f64,
    pub prompt_template: String,
    /// Probability that a context-free procedural render uses the prompt's
    /// stereotypical attribute.
    pub prompt_prior: f64,
    pub backend: BackendChoice,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub concurrency: usize,
    pub rounds: usize,

    // reporting
    pub overlay_samples: usize,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let t = TrainConfig::default();
        Self {
            dataset: "synthetic".into(),
            manifest_path: None,
            n_train: s.n_train,
            n_val: s.n_val,
            n_test: s.n_test,
            n_classes: s.n_classes,
            n_attributes: s.n_attributes,
            correlation: s.correlation,
            image_size: s.image_size,
            channels: s.channels,
            noise_std: s.noise_std,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            schedule: t.schedule,
            widths: t.arch.widths.clone(),
            strides: t.arch.strides.clone(),
            kernel: t.arch.kernel,
            selection: t.selection,
            retrain_epochs: None,
            retrain_init: RetrainInit::Scratch,
            jtt: true,
            jtt_lambda: t.upweight,
            jtt_id_epochs: t.id_epochs,
            clusters_per_class: 2,
            sample_fraction: 0.2,
            tau: DEFAULT_TAU,
            max_preserve_fraction: MAX_PRESERVE_FRACTION,
            cam: CamChoice::GradCamPp,
            upsample: Upsample::Bilinear,
            generation_fraction: 0.4,
            prompt_template: "{class}".into(),
            prompt_prior: 0.9,
            backend: BackendChoice::Procedural,
            endpoint: None,
            timeout_ms: 30_000,
            max_retries: 3,
            concurrency: 4,
            rounds: 1,
            overlay_samples: 8,
            seeds: vec![0],
        }
    }
}

fn in_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must lie in (0, 1]")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsio::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match (self.dataset.as_str(), &self.manifest_path) {
            ("synthetic", None) => self.synth_config(0).validate()?,
            ("manifest", Some(_)) => {}
            ("synthetic", Some(_)) => {
                return Err(Error::Config("manifest_path is set but dataset = \"synthetic\"".into()))
            }
            ("manifest", None) => return Err(Error::Config("dataset = \"manifest\" needs manifest_path".into())),
            (other, _) => return Err(Error::Config(format!("dataset must be synthetic or manifest, got {other:?}"))),
        }
        in_unit("sample_fraction", self.sample_fraction)?;
        in_unit("generation_fraction", self.generation_fraction)?;
        in_unit("tau", self.tau)?;
        in_unit("max_preserve_fraction", self.max_preserve_fraction)?;
        if !(0.0..=1.0).contains(&self.prompt_prior) {
            return Err(Error::Config("prompt_prior must lie in [0, 1]".into()));
        }
        if self.clusters_per_class == 0 {
            return Err(Error::Config("clusters_per_class must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if self.backend == BackendChoice::Remote && self.endpoint_url().is_none() {
            return Err(Error::Config("remote backend needs endpoint or SCGS_ENDPOINT".into()));
        }
        self.train_config(0).validate()?;
        if self.retrain_epochs == Some(0) {
            return Err(Error::Config("retrain_epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            n_classes: self.n_classes,
            n_attributes: self.n_attributes,
            correlation: self.correlation,
            image_size: self.image_size,
            channels: self.channels,
            noise_std: self.noise_std,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            schedule: self.schedule,
            seed,
            upweight: self.jtt_lambda,
            id_epochs: self.jtt_id_epochs,
            selection: self.selection,
            arch: ArchTemplate {
                widths: self.widths.clone(),
                strides: self.strides.clone(),
                kernel: self.kernel,
            },
        }
    }

    pub fn retrain_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.retrain_epochs.unwrap_or(self.epochs),
            ..self.train_config(seed)
        }
    }

    /// Explicit `endpoint`, else `SCGS_ENDPOINT`.
    pub fn endpoint_url(&self) -> Option<String> {
        self.endpoint
            .clone()
            .or_else(|| std::env::var("SCGS_ENDPOINT").ok())
            .filter(|s| !s.is_empty())
    }

    pub fn endpoint_config(&self) -> Option<EndpointConfig> {
        self.endpoint_url().map(|url| EndpointConfig {
            url,
            timeout_ms: self.timeout_ms,
            max_retries: self.max_retries,
            ..EndpointConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn flat_file_overrides() {
        let cfg = RunConfig::parse("tau = 0.7\ncam = \"gradcam\"\nseeds = [1, 2]\n").unwrap();
        assert_eq!(cfg.tau, 0.7);
        assert_eq!(cfg.cam, CamChoice::GradCam);
        assert_eq!(cfg.seeds, vec![1, 2]);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "tau = 0.0",
            "sample_fraction = 1.5",
            "generation_fraction = 0",
            "unknown_key = 1",
            "dataset = \"manifest\"",
            "manifest_path = \"x.jsonl\"",
            "seeds = []",
            "epochs = 0",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}

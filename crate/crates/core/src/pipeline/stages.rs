//! In-memory stage functions. The on-disk orchestrator and the experiment
//! helpers both call these, so a stage computes the same thing either way.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BackendChoice, RetrainInit, RunConfig};
use crate::cam::{self, ActivationMap, CamMethod, Mask};
use crate::cluster::{self, ClusterModel, SamplePlan};
use crate::dataset::{self, generate_synthetic, DatasetManifest, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::harvest::{self, Harvest};
use crate::model::Classifier;
use crate::rng;
use crate::synth::{
    self, Backend, FailureReport, GenMode, GenerationBudget, GenerationRequest, ProceduralBackend,
    RemoteBackend, SkippedClass,
};
use crate::trainer::{self, TrainRun};

/// Seed of a stage within one experiment seed; round 1 of every stage is
/// distinct from every other stage and round.
pub fn stage_seed(seed: u64, stage: &str, round: usize) -> u64 {
    rng::derive_seed(seed, stage, round as u64)
}

/// The dataset of one seed: generated, or loaded from the configured manifest.
pub fn load_dataset(cfg: &RunConfig, seed: u64) -> Result<DatasetManifest> {
    match &cfg.manifest_path {
        Some(path) => dataset::load_manifest(path),
        None => generate_synthetic(&cfg.synth_config(seed)),
    }
}

/// Misclassified train images per class with their penultimate features.
pub fn harvest_stage(model: &Classifier, manifest: &DatasetManifest) -> Result<Harvest> {
    let mut sets = harvest::harvest_misclassified(model, manifest)?;
    harvest::attach_features(model, manifest, &mut sets)?;
    Ok(sets)
}

pub fn cluster_stage(
    sets: &Harvest,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(BTreeMap<usize, ClusterModel>, BTreeMap<usize, SamplePlan>)> {
    let models = cluster::fit_all(sets, cfg.clusters_per_class, seed)?;
    let plans = cluster::build_sample_plan(&models, sets, cfg.sample_fraction, seed)?;
    Ok((models, plans))
}

/// Preserve-masks for every sampled image, keyed by image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskSet {
    /// Empty on the img2img pathway.
    pub maps: BTreeMap<String, ActivationMap>,
    pub masks: BTreeMap<String, Mask>,
}

/// CAMs explain the class the model wrongly predicted, since that is the
/// evidence the regenerated context must stop supplying.
pub fn cam_stage(
    model: &Classifier,
    manifest: &DatasetManifest,
    sets: &Harvest,
    plans: &BTreeMap<usize, SamplePlan>,
    cfg: &RunConfig,
) -> Result<MaskSet> {
    let predicted: BTreeMap<&str, usize> = sets
        .values()
        .flat_map(|s| s.items.iter().map(|i| (i.id.as_str(), i.predicted)))
        .collect();
    let index = manifest.index();
    let mut ids: Vec<String> = plans.values().flat_map(SamplePlan::union).collect();
    ids.sort();
    ids.dedup();
    let method = cfg.cam.method();
    let results: Vec<(String, Option<ActivationMap>, Mask)> = ids
        .par_iter()
        .map(|id| {
            let entry = &manifest.entries[*index
                .get(id.as_str())
                .ok_or_else(|| Error::Input(format!("sampled image {id} is not in the dataset")))?];
            let target = *predicted
                .get(id.as_str())
                .ok_or_else(|| Error::Input(format!("sampled image {id} was not harvested")))?;
            let img = entry.pixels.as_ref();
            match method {
                None => {
                    let mut mask = Mask::full(img.height, img.width, false);
                    mask.image_id = id.clone();
                    Ok((id.clone(), None, mask))
                }
                Some(m) => {
                    let mut map = cam::activation_map(model, img, target, m, cfg.upsample)?;
                    map.image_id = id.clone();
                    let mask = cam::capped_mask(&map, cfg.tau, cfg.max_preserve_fraction)?;
                    Ok((id.clone(), Some(map), mask))
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut out = MaskSet::default();
    for (id, map, mask) in results {
        if let Some(map) = map {
            out.maps.insert(id.clone(), map);
        }
        out.masks.insert(id, mask);
    }
    Ok(out)
}

pub fn make_backend(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Box<dyn Backend>> {
    match cfg.backend {
        BackendChoice::Procedural => Ok(Box::new(ProceduralBackend {
            noise_std: cfg.noise_std,
            prompt_prior: cfg.prompt_prior,
            ..ProceduralBackend::for_manifest(manifest)
        })),
        BackendChoice::Remote => {
            let endpoint = cfg
                .endpoint_config()
                .ok_or_else(|| Error::Config("remote backend needs an endpoint".into()))?;
            Ok(Box::new(RemoteBackend::new(endpoint)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub budget: GenerationBudget,
    pub requests: Vec<GenerationRequest>,
    pub skipped: Vec<SkippedClass>,
    pub images: Vec<LabeledImage>,
    pub failures: FailureReport,
}

/// Request ids of later rounds carry the round so merged ids stay unique.
fn round_prefix(round: usize) -> String {
    if round <= 1 {
        String::new()
    } else {
        format!("r{round}-")
    }
}

/// Budget, requests and generated images. `manifest` is the original data:
/// budgets count its train split and every source image comes from it.
pub fn synth_stage(
    manifest: &DatasetManifest,
    plans: &BTreeMap<usize, SamplePlan>,
    masks: &MaskSet,
    cfg: &RunConfig,
    seed: u64,
    round: usize,
    backend: &dyn Backend,
) -> Result<SynthOutput> {
    let budget = synth::plan_budget(manifest, cfg.generation_fraction)?;
    let mode = if cfg.cam.method().is_some() {
        GenMode::Inpaint
    } else {
        GenMode::Img2Img
    };
    let (mut requests, skipped) = synth::build_requests(
        plans,
        &masks.masks,
        &budget,
        &manifest.class_names,
        &cfg.prompt_template,
        mode,
        seed,
    )?;
    let prefix = round_prefix(round);
    for r in &mut requests {
        r.request_id = format!("{prefix}{}", r.request_id);
    }
    let (images, failures) = if requests.is_empty() {
        log::warn!("round {round}: nothing to generate");
        (Vec::new(), FailureReport::default())
    } else {
        synth::run_generation(&requests, manifest, backend, cfg.concurrency)?
    };
    Ok(SynthOutput {
        budget,
        requests,
        skipped,
        images,
        failures,
    })
}

/// Training seed of the round-`round` retraining of experiment seed `seed`.
pub fn retrain_seed(seed: u64, round: usize) -> u64 {
    stage_seed(seed, "retrain", round)
}

/// Retrains on `merged` under the configured initialisation. `error_ids`
/// with `lambda > 1` gives the JTT-upweighted variant.
pub fn retrain_stage(
    merged: &DatasetManifest,
    erm: &Classifier,
    error_ids: &HashSet<String>,
    lambda: f64,
    cfg: &RunConfig,
    seed: u64,
    round: usize,
) -> Result<TrainRun> {
    let tc = cfg.retrain_config(retrain_seed(seed, round));
    match cfg.retrain_init {
        RetrainInit::Scratch => trainer::train_upweighted(merged, error_ids, lambda, &tc),
        RetrainInit::Finetune => trainer::train_from(erm.clone(), merged, error_ids, lambda, &tc),
    }
}

/// Share of Grad-CAM++ mass (true class) inside the foreground box, over a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// `None` when no entry of the split has a foreground box.
pub fn attention_stats(model: &Classifier, manifest: &DatasetManifest, split: Split) -> Result<Option<AttentionStats>> {
    let boxed: Vec<&LabeledImage> = manifest.split(split).filter(|e| e.fg_box.is_some()).collect();
    if boxed.is_empty() {
        return Ok(None);
    }
    let values: Vec<f64> = boxed
        .par_iter()
        .map(|e| {
            let map = cam::activation_map(model, &e.pixels, e.label, CamMethod::GradCamPp, crate::cam::Upsample::Bilinear)?;
            cam::foreground_attention(&map, e.fg_box.expect("filtered"))
        })
        .collect::<Result<_>>()?;
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Some(AttentionStats {
        n,
        mean,
        std,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }))
}

//! Whole experiments held in memory: one seed's ERM and JTT baselines, then
//! any number of SCGS variants built on the same baselines.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::stages::{self, AttentionStats, SynthOutput};
use crate::dataset::{self, DatasetManifest, Split};
use crate::error::Result;
use crate::harvest::Harvest;
use crate::model::Classifier;
use crate::trainer::{self, EvalReport, TrainRun};

pub const ERM: &str = "ERM";
pub const SCGS: &str = "SCGS";
pub const JTT: &str = "JTT";
pub const JTT_SCGS: &str = "JTT+SCGS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub report: EvalReport,
    pub attention: Option<AttentionStats>,
}

impl VariantResult {
    pub fn evaluate(variant: &str, model: &Classifier, manifest: &DatasetManifest) -> Result<Self> {
        Ok(Self {
            variant: variant.to_string(),
            report: trainer::evaluate(model, manifest, Split::Test)?,
            attention: stages::attention_stats(model, manifest, Split::Test)?,
        })
    }
}

/// The baselines every SCGS variant of one seed shares.
pub struct Baselines {
    pub seed: u64,
    pub dataset: DatasetManifest,
    pub erm: TrainRun,
    pub erm_result: VariantResult,
    /// JTT identification error set and the JTT model, when enabled.
    pub jtt: Option<(HashSet<String>, TrainRun, VariantResult)>,
}

impl Baselines {
    pub fn train(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let dataset = stages::load_dataset(cfg, seed)?;
        let tc = cfg.train_config(seed);
        let erm = trainer::train_erm(&dataset, &tc)?;
        let erm_result = VariantResult::evaluate(ERM, &erm.classifier, &dataset)?;
        let jtt = if cfg.jtt {
            let (_, errors) = trainer::jtt_error_set(&dataset, &tc)?;
            let run = trainer::train_upweighted(&dataset, &errors, cfg.jtt_lambda, &tc)?;
            let result = VariantResult::evaluate(JTT, &run.classifier, &dataset)?;
            Some((errors, run, result))
        } else {
            None
        };
        Ok(Self {
            seed,
            dataset,
            erm,
            erm_result,
            jtt,
        })
    }
}

/// One SCGS round's intermediate products.
pub struct RoundOutput {
    pub harvest: Harvest,
    pub masks: stages::MaskSet,
    pub synth: SynthOutput,
}

pub struct ScgsOutcome {
    pub rounds: Vec<RoundOutput>,
    pub merged: DatasetManifest,
    pub scgs: TrainRun,
    pub scgs_result: VariantResult,
    pub jtt_scgs: Option<(TrainRun, VariantResult)>,
}

/// Runs `cfg.rounds` rounds of harvest → cluster → CAM → synthesize → merge →
/// retrain on top of `base`. Later rounds harvest with the previous round's
/// retrained model and add to the previous merged set.
pub fn run_scgs(base: &Baselines, cfg: &RunConfig) -> Result<ScgsOutcome> {
    let seed = base.seed;
    let backend = stages::make_backend(cfg, &base.dataset)?;
    let mut model = base.erm.classifier.clone();
    let mut merged = base.dataset.clone();
    let mut rounds = Vec::new();
    let mut last = None;
    for round in 1..=cfg.rounds {
        let harvest = stages::harvest_stage(&model, &base.dataset)?;
        let (_, plans) = stages::cluster_stage(&harvest, cfg, stages::stage_seed(seed, "cluster", round))?;
        let masks = stages::cam_stage(&model, &base.dataset, &harvest, &plans, cfg)?;
        let synth = stages::synth_stage(
            &base.dataset,
            &plans,
            &masks,
            cfg,
            stages::stage_seed(seed, "synth", round),
            round,
            backend.as_ref(),
        )?;
        merged = dataset::merge(&merged, &synth.images)?;
        let run = stages::retrain_stage(&merged, &base.erm.classifier, &HashSet::new(), 1.0, cfg, seed, round)?;
        model = run.classifier.clone();
        rounds.push(RoundOutput { harvest, masks, synth });
        last = Some(run);
    }
    let scgs = last.expect("at least one round");
    let scgs_result = VariantResult::evaluate(SCGS, &scgs.classifier, &base.dataset)?;
    let jtt_scgs = match &base.jtt {
        Some((errors, _, _)) => {
            let run = stages::retrain_stage(&merged, &base.erm.classifier, errors, cfg.jtt_lambda, cfg, seed, cfg.rounds)?;
            let result = VariantResult::evaluate(JTT_SCGS, &run.classifier, &base.dataset)?;
            Some((run, result))
        }
        None => None,
    };
    Ok(ScgsOutcome {
        rounds,
        merged,
        scgs,
        scgs_result,
        jtt_scgs,
    })
}

//! Resumable run directories.
//!
//! Every stage reads its inputs from the run directory and writes its outputs
//! back, so a full run and a stage-by-stage run execute the same code. A stage
//! is fresh when its record's input checksum matches the current config and
//! upstream outputs and every recorded artifact still hashes as recorded.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::RunConfig;
use super::experiment::{VariantResult, ERM, JTT, JTT_SCGS, SCGS};
use super::report;
use super::stages::{self, MaskSet};
use crate::cam::Mask;
use crate::cluster;
use crate::dataset::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::fsio;
use crate::harvest;
use crate::model::{self, Classifier};
use crate::synth::{self, GenerationRequest};
use crate::trainer::{self, EpochMetrics, TrainRun};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Train,
    Harvest,
    Cluster,
    Cam,
    Synth,
    Merge,
    Retrain,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenData,
        Stage::Train,
        Stage::Harvest,
        Stage::Cluster,
        Stage::Cam,
        Stage::Synth,
        Stage::Merge,
        Stage::Retrain,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Harvest => "harvest",
            Stage::Cluster => "cluster",
            Stage::Cam => "cam",
            Stage::Synth => "synth",
            Stage::Merge => "merge",
            Stage::Retrain => "retrain",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    /// Stages repeated once per SCGS round.
    pub fn per_round(self) -> bool {
        matches!(
            self,
            Stage::Harvest | Stage::Cluster | Stage::Cam | Stage::Synth | Stage::Merge | Stage::Retrain
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// One stage instance: per seed, and per round for the SCGS stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StageKey {
    pub stage: Stage,
    pub seed: Option<u64>,
    pub round: Option<usize>,
}

impl StageKey {
    fn seeded(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            seed: Some(seed),
            round: None,
        }
    }

    fn rounded(stage: Stage, seed: u64, round: usize) -> Self {
        Self {
            stage,
            seed: Some(seed),
            round: Some(round),
        }
    }

    fn report() -> Self {
        Self {
            stage: Stage::Report,
            seed: None,
            round: None,
        }
    }

    /// Files and directories holding the stage's artifacts, run-relative.
    pub fn artifact_roots(&self) -> Vec<PathBuf> {
        if self.stage == Stage::Report {
            report::OUTPUTS.iter().map(PathBuf::from).collect()
        } else {
            vec![self.dir()]
        }
    }

    /// Directory of the stage's artifacts, relative to the run directory.
    pub fn dir(&self) -> PathBuf {
        let mut p = PathBuf::new();
        if let Some(s) = self.seed {
            p.push(format!("seed-{s}"));
        }
        if let Some(r) = self.round {
            p.push(format!("round-{r}"));
        }
        if self.stage != Stage::Report {
            p.push(self.stage.as_str());
        }
        p
    }
}

impl fmt::Display for StageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(s) = self.seed {
            write!(f, "seed-{s}/")?;
        }
        if let Some(r) = self.round {
            write!(f, "round-{r}/")?;
        }
        f.write_str(self.stage.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seed: Option<u64>,
    pub round: Option<usize>,
    /// Hash of the stage's config slice and its upstream output digests.
    pub input_checksum: String,
    /// Upstream stage → its output digest at the time this stage ran.
    pub inputs: BTreeMap<String, String>,
    /// Run-relative path → sha256.
    pub artifacts: BTreeMap<String, String>,
    pub seconds: f64,
    /// Stage-specific facts worth keeping next to the artifacts.
    #[serde(default)]
    pub details: BTreeMap<String, Value>,
}

impl StageRecord {
    /// Digest over every artifact checksum; what downstream stages depend on.
    pub fn output_digest(&self) -> String {
        fsio::sha256_hex(&serde_json::to_vec(&self.artifacts).expect("map serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub checkpoint_version: u32,
    pub config: RunConfig,
    /// Keyed by `seed-N/[round-R/]stage` or `report`.
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn new(config: RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_version: model::checkpoint::CHECKPOINT_VERSION,
            config,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }
}

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// What one invocation did.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// Every file under `dir`, sorted, as run-relative paths.
fn files_under(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let full = root.join(dir);
    if !full.exists() {
        return Ok(());
    }
    if full.is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<_> = std::fs::read_dir(&full)
        .map_err(|e| Error::io(&full, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(&full, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name();
        let rel = dir.join(&name);
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        if e.path().is_dir() {
            files_under(root, &rel, out)?;
        } else {
            out.push(rel);
        }
    }
    Ok(())
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn hash_artifacts(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    use rayon::prelude::*;
    files
        .par_iter()
        .map(|f| Ok((rel_string(f), fsio::file_sha256(&root.join(f))?)))
        .collect()
}

fn wrap<T>(key: &StageKey, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ (Error::Stage { .. } | Error::Dependency { .. }) => e,
        other => Error::Stage {
            stage: key.to_string(),
            source: Box::new(other),
        },
    })
}

/// A run directory bound to one configuration.
pub struct Run {
    pub out: PathBuf,
    pub cfg: RunConfig,
    manifest: RunManifest,
    verified: RefCell<HashMap<StageKey, bool>>,
}

impl Run {
    /// Opens (creating if needed) `out`, records the config there, and loads
    /// any previous run manifest. `config_text` is stored verbatim when given.
    pub fn open(out: &Path, cfg: RunConfig, config_text: Option<&str>) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let text = config_text.map(str::to_string).unwrap_or_else(|| cfg.to_toml());
        let cfg_path = out.join(CONFIG_FILE);
        let unchanged = cfg_path.exists() && fsio::read_to_string(&cfg_path)? == text;
        if !unchanged {
            fsio::write_atomic(&cfg_path, text.as_bytes())?;
        }
        let mpath = out.join(MANIFEST_FILE);
        let mut manifest = if mpath.exists() {
            RunManifest::load(&mpath)?
        } else {
            RunManifest::new(cfg.clone())
        };
        manifest.config = cfg.clone();
        Ok(Self {
            out: out.to_path_buf(),
            cfg,
            manifest,
            verified: RefCell::new(HashMap::new()),
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn last_round(&self) -> usize {
        self.cfg.rounds
    }

    fn model_key(&self, seed: u64, round: usize) -> StageKey {
        if round <= 1 {
            StageKey::seeded(Stage::Train, seed)
        } else {
            StageKey::rounded(Stage::Retrain, seed, round - 1)
        }
    }

    /// Upstream stages whose outputs `key` reads.
    pub fn deps(&self, key: &StageKey) -> Vec<StageKey> {
        let data = |s| StageKey::seeded(Stage::GenData, s);
        match (key.stage, key.seed, key.round) {
            (Stage::GenData, _, _) => vec![],
            (Stage::Train, Some(s), _) => vec![data(s)],
            (Stage::Harvest, Some(s), Some(r)) => vec![data(s), self.model_key(s, r)],
            (Stage::Cluster, Some(s), Some(r)) => vec![StageKey::rounded(Stage::Harvest, s, r)],
            (Stage::Cam, Some(s), Some(r)) => vec![
                data(s),
                self.model_key(s, r),
                StageKey::rounded(Stage::Harvest, s, r),
                StageKey::rounded(Stage::Cluster, s, r),
            ],
            (Stage::Synth, Some(s), Some(r)) => vec![
                data(s),
                StageKey::rounded(Stage::Cluster, s, r),
                StageKey::rounded(Stage::Cam, s, r),
            ],
            (Stage::Merge, Some(s), Some(r)) => vec![
                if r <= 1 {
                    data(s)
                } else {
                    StageKey::rounded(Stage::Merge, s, r - 1)
                },
                StageKey::rounded(Stage::Synth, s, r),
            ],
            (Stage::Retrain, Some(s), Some(r)) => vec![
                StageKey::rounded(Stage::Merge, s, r),
                StageKey::seeded(Stage::Train, s),
            ],
            (Stage::Eval, Some(s), _) => vec![
                data(s),
                StageKey::seeded(Stage::Train, s),
                StageKey::rounded(Stage::Retrain, s, self.last_round()),
            ],
            (Stage::Report, _, _) => self
                .cfg
                .seeds
                .iter()
                .flat_map(|&s| {
                    [
                        data(s),
                        StageKey::seeded(Stage::Train, s),
                        StageKey::rounded(Stage::Merge, s, self.last_round()),
                        StageKey::rounded(Stage::Retrain, s, self.last_round()),
                        StageKey::seeded(Stage::Eval, s),
                    ]
                })
                .collect(),
            _ => unreachable!("malformed stage key {key:?}"),
        }
    }

    /// The config keys a stage reads.
    fn config_slice(&self, key: &StageKey) -> Value {
        let c = &self.cfg;
        let train = json!({
            "epochs": c.epochs, "batch_size": c.batch_size, "learning_rate": c.learning_rate,
            "momentum": c.momentum, "weight_decay": c.weight_decay, "schedule": c.schedule,
            "widths": c.widths, "strides": c.strides, "kernel": c.kernel, "selection": c.selection,
            "jtt": c.jtt, "jtt_lambda": c.jtt_lambda, "jtt_id_epochs": c.jtt_id_epochs,
        });
        let slice = match key.stage {
            Stage::GenData => {
                let manifest_sha = match &c.manifest_path {
                    Some(p) => Some(fsio::file_sha256(p).unwrap_or_default()),
                    None => None,
                };
                json!({
                    "dataset": c.dataset, "manifest_sha": manifest_sha, "n_train": c.n_train,
                    "n_val": c.n_val, "n_test": c.n_test, "n_classes": c.n_classes,
                    "n_attributes": c.n_attributes, "correlation": c.correlation,
                    "image_size": c.image_size, "channels": c.channels, "noise_std": c.noise_std,
                })
            }
            Stage::Train => train,
            Stage::Harvest | Stage::Merge | Stage::Eval => json!({}),
            Stage::Cluster => json!({
                "clusters_per_class": c.clusters_per_class, "sample_fraction": c.sample_fraction,
            }),
            Stage::Cam => json!({
                "cam": c.cam, "tau": c.tau, "max_preserve_fraction": c.max_preserve_fraction,
                "upsample": c.upsample,
            }),
            Stage::Synth => json!({
                "cam": c.cam, "generation_fraction": c.generation_fraction,
                "prompt_template": c.prompt_template, "prompt_prior": c.prompt_prior,
                "backend": c.backend, "endpoint": c.endpoint_url(), "noise_std": c.noise_std,
            }),
            Stage::Retrain => json!({
                "train": train, "retrain_epochs": c.retrain_epochs, "retrain_init": c.retrain_init,
                "rounds": c.rounds,
            }),
            Stage::Report => json!({ "overlay_samples": c.overlay_samples, "seeds": c.seeds, "cam": c.cam }),
        };
        json!({ "key": key.to_string(), "config": slice })
    }

    fn record(&self, key: &StageKey) -> Option<&StageRecord> {
        self.manifest.stages.get(&key.to_string())
    }

    fn artifacts_intact(&self, key: &StageKey, rec: &StageRecord) -> bool {
        if let Some(&ok) = self.verified.borrow().get(key) {
            return ok;
        }
        let files = self.artifact_files(key);
        let listed = files.is_ok();
        let files = files.unwrap_or_default();
        let ok = listed
            && files.len() == rec.artifacts.len()
            && hash_artifacts(&self.out, &files).map_or(false, |h| h == rec.artifacts);
        self.verified.borrow_mut().insert(*key, ok);
        ok
    }

    /// Input checksum `key` would have now, or `None` if an upstream stage is not fresh.
    fn expected_inputs(&self, key: &StageKey) -> Option<(String, BTreeMap<String, String>)> {
        let mut inputs = BTreeMap::new();
        for d in self.deps(key) {
            if !self.is_fresh(&d) {
                return None;
            }
            inputs.insert(d.to_string(), self.record(&d)?.output_digest());
        }
        let body = json!({ "slice": self.config_slice(key), "inputs": inputs });
        Some((fsio::sha256_hex(body.to_string().as_bytes()), inputs))
    }

    pub fn is_fresh(&self, key: &StageKey) -> bool {
        let Some(rec) = self.record(key) else {
            return false;
        };
        match self.expected_inputs(key) {
            Some((sum, _)) => sum == rec.input_checksum && self.artifacts_intact(key, rec),
            None => false,
        }
    }

    /// The earliest stage behind `key` that has to run first.
    fn blocking(&self, key: &StageKey) -> Option<StageKey> {
        for d in self.deps(key) {
            if !self.is_fresh(&d) {
                return Some(self.blocking(&d).unwrap_or(d));
            }
        }
        None
    }

    fn artifact_files(&self, key: &StageKey) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        for root in key.artifact_roots() {
            files_under(&self.out, &root, &mut files)?;
        }
        Ok(files)
    }

    fn save_manifest(&self) -> Result<()> {
        fsio::write_json(&self.out.join(MANIFEST_FILE), &self.manifest)
    }

    /// Runs `key` unless it is fresh. Returns whether it executed.
    pub fn run_key(&mut self, key: StageKey) -> Result<bool> {
        if self.is_fresh(&key) {
            log::info!("{key}: up to date, skipped");
            return Ok(false);
        }
        if let Some(b) = self.blocking(&key) {
            return Err(Error::Dependency {
                stage: key.to_string(),
                required: b.stage.as_str().to_string(),
            });
        }
        let (input_checksum, inputs) = self.expected_inputs(&key).expect("dependencies are fresh");
        for root in key.artifact_roots() {
            let p = self.path(root);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            } else if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        self.verified.borrow_mut().remove(&key);
        log::info!("{key}: running");
        let t = Instant::now();
        let details = wrap(&key, self.execute(&key))?;
        let files = self.artifact_files(&key)?;
        let artifacts = hash_artifacts(&self.out, &files)?;
        let rec = StageRecord {
            stage: key.stage,
            seed: key.seed,
            round: key.round,
            input_checksum,
            inputs,
            artifacts,
            seconds: t.elapsed().as_secs_f64(),
            details,
        };
        self.manifest.stages.insert(key.to_string(), rec);
        self.verified.borrow_mut().insert(key, true);
        self.save_manifest()?;
        Ok(true)
    }

    /// Every stage instance in execution order.
    pub fn plan(&self) -> Vec<StageKey> {
        let mut keys = Vec::new();
        for &s in &self.cfg.seeds {
            keys.push(StageKey::seeded(Stage::GenData, s));
            keys.push(StageKey::seeded(Stage::Train, s));
            for r in 1..=self.cfg.rounds {
                for st in [
                    Stage::Harvest,
                    Stage::Cluster,
                    Stage::Cam,
                    Stage::Synth,
                    Stage::Merge,
                    Stage::Retrain,
                ] {
                    keys.push(StageKey::rounded(st, s, r));
                }
            }
            keys.push(StageKey::seeded(Stage::Eval, s));
        }
        keys.push(StageKey::report());
        keys
    }

    pub fn run_all(&mut self) -> Result<RunOutcome> {
        let mut executed = Vec::new();
        let mut skipped = Vec::new();
        for key in self.plan() {
            if self.run_key(key)? {
                executed.push(key.to_string());
            } else {
                skipped.push(key.to_string());
            }
        }
        Ok(RunOutcome {
            manifest: self.manifest.clone(),
            executed,
            skipped,
        })
    }

    /// Runs one stage for `seeds` (all configured seeds when `None`). Round
    /// stages run their earliest round that is not fresh.
    pub fn run_stage(&mut self, stage: Stage, seeds: Option<&[u64]>) -> Result<RunOutcome> {
        let seeds: Vec<u64> = seeds.map(<[u64]>::to_vec).unwrap_or_else(|| self.cfg.seeds.clone());
        let keys: Vec<StageKey> = if stage == Stage::Report {
            vec![StageKey::report()]
        } else if stage.per_round() {
            seeds
                .iter()
                .map(|&s| {
                    (1..=self.cfg.rounds)
                        .map(|r| StageKey::rounded(stage, s, r))
                        .find(|k| !self.is_fresh(k))
                        .unwrap_or_else(|| StageKey::rounded(stage, s, self.cfg.rounds))
                })
                .collect()
        } else {
            seeds.iter().map(|&s| StageKey::seeded(stage, s)).collect()
        };
        let mut executed = Vec::new();
        let mut skipped = Vec::new();
        for key in keys {
            if self.run_key(key)? {
                executed.push(key.to_string());
            } else {
                skipped.push(key.to_string());
            }
        }
        Ok(RunOutcome {
            manifest: self.manifest.clone(),
            executed,
            skipped,
        })
    }

    // --- artifact paths shared by producers and consumers ---

    fn data_manifest(&self, seed: u64) -> PathBuf {
        self.path(StageKey::seeded(Stage::GenData, seed).dir().join("manifest.jsonl"))
    }

    fn load_data(&self, seed: u64) -> Result<DatasetManifest> {
        dataset::load_manifest(&self.data_manifest(seed))
    }

    fn model_path(&self, seed: u64, round: usize) -> PathBuf {
        if round <= 1 {
            self.path(StageKey::seeded(Stage::Train, seed).dir().join("erm.ckpt"))
        } else {
            self.path(StageKey::rounded(Stage::Retrain, seed, round - 1).dir().join("scgs.ckpt"))
        }
    }

    fn load_harvest(&self, seed: u64, round: usize, n_classes: usize) -> Result<harvest::Harvest> {
        let dir = self.path(StageKey::rounded(Stage::Harvest, seed, round).dir());
        let mut sets = harvest::load_harvest(&dir.join("harvest.jsonl"), n_classes)?;
        let feats = harvest::load_features(&dir.join("features.bin"))?;
        harvest::attach_loaded_features(&mut sets, &feats)?;
        Ok(sets)
    }

    fn load_plans(&self, seed: u64, round: usize) -> Result<BTreeMap<usize, cluster::SamplePlan>> {
        cluster::load_sample_plans(&self.path(StageKey::rounded(Stage::Cluster, seed, round).dir().join("plans.jsonl")))
    }

    fn merged_manifest(&self, seed: u64, round: usize) -> PathBuf {
        self.path(StageKey::rounded(Stage::Merge, seed, round).dir().join("manifest.jsonl"))
    }

    fn execute(&self, key: &StageKey) -> Result<BTreeMap<String, Value>> {
        let dir = self.path(key.dir());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut details = BTreeMap::new();
        match (key.stage, key.seed, key.round) {
            (Stage::GenData, Some(s), _) => {
                let m = stages::load_dataset(&self.cfg, s)?;
                dataset::save_manifest(&m, &dir.join("manifest.jsonl"))?;
                details.insert("entries".into(), json!(m.entries.len()));
            }
            (Stage::Train, Some(s), _) => {
                let data = self.load_data(s)?;
                let tc = self.cfg.train_config(s);
                let erm = trainer::train_erm(&data, &tc)?;
                save_run(&dir, "erm", &erm)?;
                details.insert("erm_selection".into(), selection_detail(&erm));
                if self.cfg.jtt {
                    let (id_run, errors) = trainer::jtt_error_set(&data, &tc)?;
                    let mut sorted: Vec<&String> = errors.iter().collect();
                    sorted.sort();
                    fsio::write_json(&dir.join("jtt_error_set.json"), &sorted)?;
                    write_metrics(&dir.join("jtt_id_metrics.jsonl"), &id_run.metrics)?;
                    let jtt = trainer::train_upweighted(&data, &errors, self.cfg.jtt_lambda, &tc)?;
                    save_run(&dir, "jtt", &jtt)?;
                    details.insert("jtt_error_set".into(), json!(errors.len()));
                    details.insert("jtt_selection".into(), selection_detail(&jtt));
                }
            }
            (Stage::Harvest, Some(s), Some(r)) => {
                let data = self.load_data(s)?;
                let model = model::load_checkpoint(&self.model_path(s, r))?;
                let sets = stages::harvest_stage(&model, &data)?;
                harvest::save_harvest(&dir.join("harvest.jsonl"), &sets)?;
                harvest::save_features(&dir.join("features.bin"), &sets)?;
                details.insert(
                    "misclassified_per_class".into(),
                    json!(sets.values().map(|s| s.len()).collect::<Vec<_>>()),
                );
            }
            (Stage::Cluster, Some(s), Some(r)) => {
                let n_classes = self.load_data(s)?.n_classes();
                let sets = self.load_harvest(s, r, n_classes)?;
                let (models, plans) = stages::cluster_stage(&sets, &self.cfg, stages::stage_seed(s, "cluster", r))?;
                cluster::save_cluster_models(&dir.join("clusters.json"), &dir.join("clusters.bin"), &models)?;
                cluster::save_sample_plans(&dir.join("plans.jsonl"), &plans)?;
                details.insert(
                    "sampled_per_class".into(),
                    json!(plans.values().map(|p| p.len()).collect::<Vec<_>>()),
                );
            }
            (Stage::Cam, Some(s), Some(r)) => {
                let data = self.load_data(s)?;
                let model = model::load_checkpoint(&self.model_path(s, r))?;
                let sets = self.load_harvest(s, r, data.n_classes())?;
                let plans = self.load_plans(s, r)?;
                let masks = stages::cam_stage(&model, &data, &sets, &plans, &self.cfg)?;
                save_masks(&dir, &masks)?;
                let n = masks.masks.len().max(1) as f64;
                let mean_pf: f64 = masks.masks.values().map(Mask::preserve_fraction).sum::<f64>() / n;
                details.insert("masks".into(), json!(masks.masks.len()));
                details.insert("mean_preserve_fraction".into(), json!(mean_pf));
            }
            (Stage::Synth, Some(s), Some(r)) => {
                let data = self.load_data(s)?;
                let plans = self.load_plans(s, r)?;
                let masks = load_masks(&self.path(StageKey::rounded(Stage::Cam, s, r).dir()))?;
                let backend = stages::make_backend(&self.cfg, &data)?;
                let out = stages::synth_stage(
                    &data,
                    &plans,
                    &masks,
                    &self.cfg,
                    stages::stage_seed(s, "synth", r),
                    r,
                    backend.as_ref(),
                )?;
                fsio::write_json(&dir.join("budget.json"), &out.budget)?;
                fsio::write_jsonl(&dir.join("requests.jsonl"), &request_index(&out.requests))?;
                fsio::write_json(&dir.join("skipped.json"), &out.skipped)?;
                fsio::write_json(&dir.join("failures.json"), &out.failures)?;
                let side = synth::sidecar(&out.requests, &out.images, backend.name());
                synth::save_synthesized(&dir, &out.images, &side)?;
                details.insert("requested".into(), json!(out.requests.len()));
                details.insert("generated".into(), json!(out.images.len()));
                details.insert("failed".into(), json!(out.failures.failures.len()));
            }
            (Stage::Merge, Some(s), Some(r)) => {
                let base = if r <= 1 {
                    self.load_data(s)?
                } else {
                    dataset::load_manifest(&self.merged_manifest(s, r - 1))?
                };
                let synthesized = synth::load_synthesized(&self.path(StageKey::rounded(Stage::Synth, s, r).dir()))?;
                let merged = dataset::merge(&base, &synthesized)?;
                dataset::save_manifest(&merged, &dir.join("manifest.jsonl"))?;
                fsio::write_json(
                    &dir.join("group_counts.json"),
                    &json!({
                        "before": report::train_counts(&base),
                        "after": report::train_counts(&merged),
                    }),
                )?;
                details.insert("added".into(), json!(synthesized.len()));
            }
            (Stage::Retrain, Some(s), Some(r)) => {
                let merged = dataset::load_manifest(&self.merged_manifest(s, r))?;
                let train_dir = self.path(StageKey::seeded(Stage::Train, s).dir());
                let erm = model::load_checkpoint(&train_dir.join("erm.ckpt"))?;
                let run = stages::retrain_stage(&merged, &erm, &HashSet::new(), 1.0, &self.cfg, s, r)?;
                save_run(&dir, "scgs", &run)?;
                details.insert("scgs_selection".into(), selection_detail(&run));
                if self.cfg.jtt && r == self.last_round() {
                    let errors: Vec<String> = fsio::read_json(&train_dir.join("jtt_error_set.json"))?;
                    let errors: HashSet<String> = errors.into_iter().collect();
                    let run =
                        stages::retrain_stage(&merged, &erm, &errors, self.cfg.jtt_lambda, &self.cfg, s, r)?;
                    save_run(&dir, "jtt_scgs", &run)?;
                    details.insert("jtt_scgs_selection".into(), selection_detail(&run));
                }
            }
            (Stage::Eval, Some(s), _) => {
                let data = self.load_data(s)?;
                let train_dir = self.path(StageKey::seeded(Stage::Train, s).dir());
                let retrain_dir = self.path(StageKey::rounded(Stage::Retrain, s, self.last_round()).dir());
                let mut variants: Vec<(&str, PathBuf)> = vec![(ERM, train_dir.join("erm.ckpt"))];
                if self.cfg.jtt {
                    variants.push((JTT, train_dir.join("jtt.ckpt")));
                }
                variants.push((SCGS, retrain_dir.join("scgs.ckpt")));
                if self.cfg.jtt {
                    variants.push((JTT_SCGS, retrain_dir.join("jtt_scgs.ckpt")));
                }
                let mut results = Vec::new();
                for (name, path) in variants {
                    let model: Classifier = model::load_checkpoint(&path)?;
                    results.push(VariantResult::evaluate(name, &model, &data)?);
                }
                fsio::write_json(&dir.join("evals.json"), &results)?;
                for v in &results {
                    details.insert(
                        v.variant.clone(),
                        json!({"avg_acc": v.report.avg_acc, "worst_group_acc": v.report.worst_group_acc}),
                    );
                }
            }
            (Stage::Report, _, _) => {
                let files = report::write_report(self)?;
                details.insert("files".into(), json!(files));
            }
            _ => unreachable!("malformed stage key {key:?}"),
        }
        Ok(details)
    }

    // --- accessors the report reads ---

    pub(crate) fn evals_path(&self, seed: u64) -> PathBuf {
        self.path(StageKey::seeded(Stage::Eval, seed).dir().join("evals.json"))
    }

    pub(crate) fn group_counts_path(&self, seed: u64, round: usize) -> PathBuf {
        self.path(StageKey::rounded(Stage::Merge, seed, round).dir().join("group_counts.json"))
    }

    pub(crate) fn checkpoint_path(&self, seed: u64, variant: &str) -> PathBuf {
        match variant {
            ERM => self.path(StageKey::seeded(Stage::Train, seed).dir().join("erm.ckpt")),
            _ => self.path(StageKey::rounded(Stage::Retrain, seed, self.last_round()).dir().join("scgs.ckpt")),
        }
    }

    pub(crate) fn data(&self, seed: u64) -> Result<DatasetManifest> {
        self.load_data(seed)
    }

    /// Training-metric files of one seed, labelled by variant and round.
    pub(crate) fn metric_files(&self, seed: u64) -> Vec<(String, Option<usize>, PathBuf)> {
        let train = self.path(StageKey::seeded(Stage::Train, seed).dir());
        let mut out = vec![(ERM.to_string(), None, train.join("erm_metrics.jsonl"))];
        if self.cfg.jtt {
            out.push(("JTT-id".to_string(), None, train.join("jtt_id_metrics.jsonl")));
            out.push((JTT.to_string(), None, train.join("jtt_metrics.jsonl")));
        }
        for r in 1..=self.cfg.rounds {
            let d = self.path(StageKey::rounded(Stage::Retrain, seed, r).dir());
            out.push((SCGS.to_string(), Some(r), d.join("scgs_metrics.jsonl")));
            if self.cfg.jtt && r == self.cfg.rounds {
                out.push((JTT_SCGS.to_string(), Some(r), d.join("jtt_scgs_metrics.jsonl")));
            }
        }
        out
    }
}

fn selection_detail(run: &TrainRun) -> Value {
    json!({"rule": run.selection_rule, "epoch": run.selected_epoch})
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    fsio::write_jsonl(path, metrics)
}

fn save_run(dir: &Path, name: &str, run: &TrainRun) -> Result<()> {
    model::save_checkpoint(&run.classifier, &dir.join(format!("{name}.ckpt")))?;
    write_metrics(&dir.join(format!("{name}_metrics.jsonl")), &run.metrics)
}

#[derive(Serialize, Deserialize)]
struct MaskIndex {
    id: String,
    threshold: f64,
    preserve_fraction: f64,
    target_class: Option<usize>,
}

fn save_masks(dir: &Path, masks: &MaskSet) -> Result<()> {
    use rayon::prelude::*;
    let index: Vec<MaskIndex> = masks
        .masks
        .iter()
        .map(|(id, m)| MaskIndex {
            id: id.clone(),
            threshold: m.threshold,
            preserve_fraction: m.preserve_fraction(),
            target_class: masks.maps.get(id).map(|map| map.target_class),
        })
        .collect();
    masks
        .masks
        .par_iter()
        .map(|(id, m)| m.save_png(&dir.join("masks").join(format!("{id}.png"))))
        .collect::<Result<Vec<()>>>()?;
    masks
        .maps
        .par_iter()
        .map(|(id, map)| crate::cam::save_map_png(&dir.join("maps").join(format!("{id}.png")), map))
        .collect::<Result<Vec<()>>>()?;
    fsio::write_jsonl(&dir.join("masks.jsonl"), &index)
}

fn load_masks(dir: &Path) -> Result<MaskSet> {
    let index: Vec<MaskIndex> = fsio::read_jsonl(&dir.join("masks.jsonl"))?;
    let mut out = MaskSet::default();
    for m in index {
        let mut mask = Mask::load_png(&dir.join("masks").join(format!("{}.png", m.id)))?;
        mask.image_id = m.id.clone();
        mask.threshold = m.threshold;
        out.masks.insert(m.id, mask);
    }
    Ok(out)
}

/// Requests without their mask bits; the masks live under the cam stage.
fn request_index(requests: &[GenerationRequest]) -> Vec<Value> {
    requests
        .iter()
        .map(|r| {
            json!({
                "request_id": r.request_id, "source_image_id": r.source_image_id,
                "target_label": r.target_label, "prompt": r.prompt, "seed": r.seed, "mode": r.mode,
                "preserve_fraction": r.mask.preserve_fraction(),
            })
        })
        .collect()
}

/// Runs (or resumes) every stage of `cfg` in `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    Run::open(out, cfg.clone(), None)?.run_all()
}

//! Empirical-risk training with optional error-set upweighting, and
//! average / per-group / worst-group evaluation.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Group, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, Classifier};
use crate::rng;

/// Examples per gradient work unit. Fixed so the floating-point reduction
/// order does not depend on the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Which epoch's parameters a training run returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Best validation worst-group accuracy when validation group labels
    /// exist, otherwise best validation average accuracy.
    BestVal,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchTemplate {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for ArchTemplate {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32],
            strides: vec![2, 2, 1],
            kernel: 3,
        }
    }
}

impl ArchTemplate {
    pub fn for_manifest(&self, manifest: &DatasetManifest) -> Result<ArchSpec> {
        let first = manifest
            .entries
            .first()
            .ok_or_else(|| Error::Input("manifest has no entries".into()))?;
        let img = &first.pixels;
        Ok(ArchSpec::with_widths(
            img.height,
            img.width,
            img.channels,
            manifest.n_classes(),
            &self.widths,
            &self.strides,
            self.kernel,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Loss multiplier for error-set examples (1 = plain ERM).
    pub upweight: f64,
    /// Epochs of the identification model used to find the error set.
    pub id_epochs: usize,
    pub selection: Selection,
    pub arch: ArchTemplate,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine,
            seed: 0,
            upweight: 5.0,
            id_epochs: 2,
            selection: Selection::BestVal,
            arch: ArchTemplate::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.id_epochs == 0 {
            return bad("epochs, batch_size and id_epochs must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.upweight >= 1.0) {
            return bad("upweight factor must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_avg: Option<f64>,
    pub val_worst: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub classifier: Classifier,
    pub metrics: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were returned.
    pub selected_epoch: usize,
    pub selection_rule: String,
}

/// Plain ERM from a fresh initialisation.
pub fn train_erm(manifest: &DatasetManifest, config: &TrainConfig) -> Result<TrainRun> {
    train_upweighted(manifest, &HashSet::new(), 1.0, config)
}

/// ERM where every example whose id is in `error_ids` contributes `lambda`×
/// its loss. `lambda = 1` or an empty set reproduce [`train_erm`] exactly.
pub fn train_upweighted(
    manifest: &DatasetManifest,
    error_ids: &HashSet<String>,
    lambda: f64,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    let arch = config.arch.for_manifest(manifest)?;
    let init = Classifier::new(arch, rng::derive_seed(config.seed, "model-init", 0))?;
    train_from(init, manifest, error_ids, lambda, config)
}

/// Continues training `init` (fine-tuning) under the same objective.
pub fn train_from(
    mut model: Classifier,
    manifest: &DatasetManifest,
    error_ids: &HashSet<String>,
    lambda: f64,
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    if !(lambda >= 1.0) {
        return Err(Error::Input(format!("upweight factor {lambda} < 1")));
    }
    let train: Vec<&LabeledImage> = manifest.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Input("train split is empty".into()));
    }
    let train_ids: HashSet<&str> = train.iter().map(|e| e.id.as_str()).collect();
    if let Some(unknown) = error_ids.iter().find(|id| !train_ids.contains(id.as_str())) {
        return Err(Error::Input(format!("error id {unknown} is not a train example")));
    }
    let weights: Vec<f64> = train
        .iter()
        .map(|e| if error_ids.contains(&e.id) { lambda } else { 1.0 })
        .collect();

    let val_present = manifest.split(Split::Val).next().is_some();
    let val_grouped = val_present && manifest.split(Split::Val).all(|e| e.group.is_some());
    let selection_rule = match (config.selection, val_present, val_grouped) {
        (Selection::Last, _, _) | (_, false, _) => "last",
        (Selection::BestVal, true, true) => "best_val_worst_group",
        (Selection::BestVal, true, false) => "best_val_average",
    }
    .to_string();

    let n_params = model.params().len();
    let mut velocity = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<((f64, f64), usize, Vec<f64>)> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut shuffle_rng = rng::stream(config.seed, "shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        for batch in order.chunks(config.batch_size) {
            let parts: Vec<Result<(Vec<f64>, f64)>> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut g = vec![0.0; n_params];
                    let mut loss = 0.0;
                    for &i in chunk {
                        loss += model.loss_and_grad(
                            &train[i].pixels,
                            train[i].label,
                            weights[i],
                            &mut g,
                        )?;
                    }
                    Ok((g, loss))
                })
                .collect();
            let mut grad = vec![0.0; n_params];
            let mut batch_loss = 0.0;
            for part in parts {
                let (g, l) = part?;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
                batch_loss += l;
            }
            let batch_weight: f64 = batch.iter().map(|&i| weights[i]).sum();
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    loss: batch_loss / batch_weight,
                });
            }
            epoch_loss += batch_loss;
            epoch_weight += batch_weight;
            let params = model.params_mut();
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                let g = g / batch_weight + config.weight_decay * *p;
                *v = config.momentum * *v + g;
                *p -= lr * *v;
            }
            step += 1;
        }
        let mean_loss = epoch_loss / epoch_weight;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                step,
                loss: mean_loss,
            });
        }
        let (val_avg, val_worst) = if val_present {
            let preds = predictions(&model, manifest.split(Split::Val))?;
            let correct = preds.iter().filter(|(e, p)| e.label == *p).count();
            let avg = correct as f64 / preds.len() as f64;
            let worst = if val_grouped {
                Some(report_from_predictions(Split::Val, &preds)?.worst_group_acc)
            } else {
                None
            };
            (Some(avg), worst)
        } else {
            (None, None)
        };
        log::debug!(
            "epoch {}/{} loss {:.4} val avg {:?} worst {:?}",
            epoch + 1,
            config.epochs,
            mean_loss,
            val_avg,
            val_worst
        );
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            loss: mean_loss,
            val_avg,
            val_worst,
        });
        let key = match selection_rule.as_str() {
            "best_val_worst_group" => (val_worst.unwrap_or(0.0), val_avg.unwrap_or(0.0)),
            "best_val_average" => (val_avg.unwrap_or(0.0), 0.0),
            _ => (epoch as f64, 0.0),
        };
        if best.as_ref().map_or(true, |(k, _, _)| key > *k) {
            best = Some((key, epoch + 1, model.params().to_vec()));
        }
    }
    let (_, selected_epoch, params) = best.expect("at least one epoch");
    model.set_params(params)?;
    model.meta.provenance = format!(
        "trained {} epochs (λ = {}, {} upweighted), selected epoch {} by {}",
        config.epochs,
        lambda,
        error_ids.len(),
        selected_epoch,
        selection_rule
    );
    Ok(TrainRun {
        classifier: model,
        metrics,
        selected_epoch,
        selection_rule,
    })
}

/// JTT identification: ERM for `id_epochs` epochs (last epoch kept), then
/// the ids of every train example it misclassifies.
pub fn jtt_error_set(manifest: &DatasetManifest, config: &TrainConfig) -> Result<(TrainRun, HashSet<String>)> {
    let id_config = TrainConfig {
        epochs: config.id_epochs,
        selection: Selection::Last,
        ..config.clone()
    };
    let run = train_erm(manifest, &id_config)?;
    let errors = predictions(&run.classifier, manifest.split(Split::Train))?
        .into_iter()
        .filter(|(e, p)| e.label != *p)
        .map(|(e, _)| e.id.clone())
        .collect();
    Ok((run, errors))
}

/// Predictions for a set of entries, computed in parallel, returned in input order.
pub fn predictions<'a>(
    model: &Classifier,
    entries: impl Iterator<Item = &'a LabeledImage>,
) -> Result<Vec<(&'a LabeledImage, usize)>> {
    let entries: Vec<&LabeledImage> = entries.collect();
    entries
        .par_iter()
        .map(|e| Ok((*e, model.predict(&e.pixels)?)))
        .collect()
}

/// Plain accuracy on a split; does not read group labels.
pub fn accuracy(model: &Classifier, manifest: &DatasetManifest, split: Split) -> Result<f64> {
    let preds = predictions(model, manifest.split(split))?;
    if preds.is_empty() {
        return Err(Error::Input(format!("split {split} is empty")));
    }
    Ok(preds.iter().filter(|(e, p)| e.label == *p).count() as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub label: usize,
    pub attribute: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub avg_acc: f64,
    pub worst_group_acc: f64,
    pub per_group: Vec<GroupAccuracy>,
    /// Groups of the (label × attribute) grid with no examples.
    pub empty_groups: Vec<Group>,
    pub n: usize,
}

/// Accuracy overall and per (label, attribute) group. Requires group labels.
pub fn evaluate(model: &Classifier, manifest: &DatasetManifest, split: Split) -> Result<EvalReport> {
    let preds = predictions(model, manifest.split(split))?;
    let mut report = report_from_predictions(split, &preds)?;
    for label in 0..manifest.n_classes() {
        for attribute in 0..manifest.attribute_names.len() {
            let g = Group { label, attribute };
            if !report
                .per_group
                .iter()
                .any(|r| r.label == label && r.attribute == attribute)
            {
                report.empty_groups.push(g);
            }
        }
    }
    Ok(report)
}

/// Builds a report from `(entry, predicted class)` pairs.
pub fn report_from_predictions(split: Split, preds: &[(&LabeledImage, usize)]) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Evaluation(format!("split {split} is empty")));
    }
    let mut cells: BTreeMap<Group, (usize, usize)> = BTreeMap::new();
    let mut missing = Vec::new();
    let mut correct_total = 0;
    for (e, p) in preds {
        let hit = e.label == *p;
        correct_total += hit as usize;
        match e.group {
            Some(g) => {
                let c = cells.entry(g).or_insert((0, 0));
                c.0 += hit as usize;
                c.1 += 1;
            }
            None => missing.push(e.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} entries of split {split} lack group labels (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    let per_group: Vec<GroupAccuracy> = cells
        .into_iter()
        .map(|(g, (correct, count))| GroupAccuracy {
            label: g.label,
            attribute: g.attribute,
            accuracy: correct as f64 / count as f64,
            correct,
            count,
        })
        .collect();
    let worst = per_group
        .iter()
        .map(|g| g.accuracy)
        .fold(f64::INFINITY, f64::min);
    Ok(EvalReport {
        split,
        avg_acc: correct_total as f64 / preds.len() as f64,
        worst_group_acc: worst,
        per_group,
        empty_groups: Vec::new(),
        n: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Provenance, SynthConfig};
    use crate::image::Image;
    use std::sync::Arc;

    fn entry(id: &str, label: usize, attr: usize, split: Split, img: Image) -> LabeledImage {
        LabeledImage {
            id: id.into(),
            pixels: Arc::new(img),
            label,
            group: Some(Group {
                label,
                attribute: attr,
            }),
            split,
            provenance: Provenance::Original,
            fg_box: None,
        }
    }

    /// Class 0 is a dark image, class 1 a bright one.
    fn separable() -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..20 {
            let label = i % 2;
            let mut img = Image::zeros(8, 8, 1);
            let level = if label == 0 { 0.1 } else { 0.9 } + 0.005 * i as f64;
            img.data.fill(level);
            entries.push(entry(&format!("t{i}"), label, label, Split::Train, img));
        }
        let mut v = Image::zeros(8, 8, 1);
        v.data.fill(0.9);
        entries.push(entry("v0", 1, 1, Split::Val, v.clone()));
        entries.push(entry("s0", 1, 1, Split::Test, v));
        DatasetManifest {
            class_names: vec!["dark".into(), "bright".into()],
            attribute_names: vec!["a".into(), "b".into()],
            seed: 0,
            entries,
        }
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 0.1,
            selection: Selection::Last,
            arch: ArchTemplate {
                widths: vec![4, 4],
                strides: vec![2, 1],
                kernel: 3,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let m = separable();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_config(1)
        };
        let run = train_erm(&m, &cfg).unwrap();
        let init = Classifier::new(
            cfg.arch.for_manifest(&m).unwrap(),
            rng::derive_seed(cfg.seed, "model-init", 0),
        )
        .unwrap();
        assert_eq!(run.classifier.params(), init.params());
    }

    #[test]
    fn separable_toy_set_is_fit() {
        let m = separable();
        let run = train_erm(&m, &tiny_config(50)).unwrap();
        assert_eq!(accuracy(&run.classifier, &m, Split::Train).unwrap(), 1.0);
        assert!(run.metrics.last().unwrap().loss <= run.metrics[0].loss);
    }

    #[test]
    fn unit_lambda_and_empty_error_set_reduce_to_erm() {
        let m = separable();
        let cfg = tiny_config(3);
        let erm = train_erm(&m, &cfg).unwrap();
        let ids: HashSet<String> = ["t1".to_string(), "t4".to_string()].into();
        let unit = train_upweighted(&m, &ids, 1.0, &cfg).unwrap();
        assert_eq!(unit.classifier.params(), erm.classifier.params());
        let empty = train_upweighted(&m, &HashSet::new(), 5.0, &cfg).unwrap();
        assert_eq!(empty.classifier.params(), erm.classifier.params());
        let up = train_upweighted(&m, &ids, 5.0, &cfg).unwrap();
        assert_ne!(up.classifier.params(), erm.classifier.params());
    }

    #[test]
    fn unknown_error_id_is_input_error() {
        let m = separable();
        let ids: HashSet<String> = ["nope".to_string()].into();
        assert!(matches!(
            train_upweighted(&m, &ids, 2.0, &tiny_config(1)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn training_ignores_group_labels() {
        let m = crate::dataset::generate_synthetic(&SynthConfig {
            n_train: 64,
            n_val: 16,
            n_test: 8,
            image_size: 12,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut stripped = m.clone();
        for e in &mut stripped.entries {
            if e.split == Split::Train {
                e.group = None;
            }
        }
        let cfg = TrainConfig {
            selection: Selection::BestVal,
            ..tiny_config(2)
        };
        let a = train_erm(&m, &cfg).unwrap();
        let b = train_erm(&stripped, &cfg).unwrap();
        assert_eq!(a.classifier.params(), b.classifier.params());
    }

    #[test]
    fn divergence_is_reported() {
        let m = separable();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            momentum: 0.0,
            ..tiny_config(3)
        };
        assert!(matches!(train_erm(&m, &cfg), Err(Error::Diverged { .. })));
    }

    fn balanced_2x2() -> DatasetManifest {
        let mut entries = Vec::new();
        let mut k = 0;
        for label in 0..2 {
            for attr in 0..2 {
                for _ in 0..5 {
                    entries.push(entry(&format!("e{k}"), label, attr, Split::Test, Image::zeros(8, 8, 1)));
                    k += 1;
                }
            }
        }
        entries.push(entry("t", 0, 0, Split::Train, Image::zeros(8, 8, 1)));
        entries.push(entry("v", 0, 0, Split::Val, Image::zeros(8, 8, 1)));
        DatasetManifest {
            class_names: vec!["a".into(), "b".into()],
            attribute_names: vec!["x".into(), "y".into()],
            seed: 0,
            entries,
        }
    }

    #[test]
    fn constant_predictor_report() {
        let m = balanced_2x2();
        let preds: Vec<(&LabeledImage, usize)> = m.split(Split::Test).map(|e| (e, 0)).collect();
        let r = report_from_predictions(Split::Test, &preds).unwrap();
        assert_eq!(r.avg_acc, 0.5);
        assert_eq!(r.worst_group_acc, 0.0);
        let perfect: Vec<(&LabeledImage, usize)> = m.split(Split::Test).map(|e| (e, e.label)).collect();
        let r = report_from_predictions(Split::Test, &perfect).unwrap();
        assert_eq!((r.avg_acc, r.worst_group_acc), (1.0, 1.0));
    }

    #[test]
    fn missing_groups_fail_evaluation() {
        let mut m = balanced_2x2();
        m.entries[0].group = None;
        let preds: Vec<(&LabeledImage, usize)> = m.split(Split::Test).map(|e| (e, 0)).collect();
        assert!(matches!(
            report_from_predictions(Split::Test, &preds),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn empty_groups_are_listed() {
        let mut m = balanced_2x2();
        m.entries.retain(|e| !(e.split == Split::Test && e.label == 1 && e.attribute() == Some(0)));
        let model = Classifier::new(ArchSpec::with_widths(8, 8, 1, 2, &[2], &[1], 3), 0).unwrap();
        let r = evaluate(&model, &m, Split::Test).unwrap();
        assert_eq!(r.empty_groups, vec![Group { label: 1, attribute: 0 }]);
        assert_eq!(r.per_group.len(), 3);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn report_identities(labels in proptest::collection::vec((0usize..3, 0usize..3, 0usize..3), 1..80)) {
            let entries: Vec<LabeledImage> = labels
                .iter()
                .enumerate()
                .map(|(i, &(l, a, _))| entry(&format!("e{i}"), l, a, Split::Test, Image::zeros(8, 8, 1)))
                .collect();
            let preds: Vec<(&LabeledImage, usize)> =
                entries.iter().zip(&labels).map(|(e, &(_, _, p))| (e, p)).collect();
            let r = report_from_predictions(Split::Test, &preds).unwrap();
            let weighted: f64 = r.per_group.iter().map(|g| g.accuracy * g.count as f64).sum::<f64>()
                / r.n as f64;
            proptest::prop_assert!((weighted - r.avg_acc).abs() <= 1e-12);
            let min = r.per_group.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
            let max = r.per_group.iter().map(|g| g.accuracy).fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert_eq!(r.worst_group_acc, min);
            proptest::prop_assert!(min <= r.avg_acc + 1e-12 && r.avg_acc <= max + 1e-12);
            let mut rev = preds.clone();
            rev.reverse();
            let r2 = report_from_predictions(Split::Test, &rev).unwrap();
            proptest::prop_assert_eq!(r2.per_group, r.per_group);
        }
    }
}

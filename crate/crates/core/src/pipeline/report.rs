//! Tables, metric logs and CAM overlays built from a run directory's artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::experiment::{VariantResult, ERM, SCGS};
use super::run::Run;
use crate::cam::{self, CamMethod, Upsample};
use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::fsio;
use crate::image::Image;
use crate::model;
use crate::rng;
use crate::trainer::{EpochMetrics, EvalReport};

/// Paths the report stage owns, relative to the run directory.
pub const OUTPUTS: [&str; 4] = ["report.csv", "report.md", "metrics.jsonl", "overlays"];

/// One train-split cell; `attribute` is `None` for images without a group.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellCount {
    pub label: usize,
    pub attribute: Option<usize>,
    pub count: usize,
}

pub fn train_counts(m: &DatasetManifest) -> Vec<CellCount> {
    let mut cells: BTreeMap<(usize, Option<usize>), usize> = BTreeMap::new();
    for e in m.split(Split::Train) {
        *cells.entry((e.label, e.attribute())).or_insert(0) += 1;
    }
    cells
        .into_iter()
        .map(|((label, attribute), count)| CellCount { label, attribute, count })
        .collect()
}

/// Sample mean and, for two or more values, sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub n_seeds: usize,
    pub avg_acc: (f64, Option<f64>),
    pub worst_group_acc: (f64, Option<f64>),
    pub fg_attention: Option<(f64, Option<f64>)>,
}

fn check_row(seed: u64, v: &VariantResult) -> Result<()> {
    let r: &EvalReport = &v.report;
    let min = r
        .per_group
        .iter()
        .map(|g| g.accuracy)
        .fold(f64::INFINITY, f64::min);
    if r.per_group.is_empty() || min != r.worst_group_acc {
        return Err(Error::Report(format!(
            "seed {seed} {}: worst-group {} is not the per-group minimum {min}",
            v.variant, r.worst_group_acc
        )));
    }
    Ok(())
}

/// One summary per variant, in first-seen order, after cross-checking every row.
pub fn summarize(per_seed: &[(u64, Vec<VariantResult>)]) -> Result<Vec<VariantSummary>> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<&VariantResult>> = BTreeMap::new();
    for (seed, results) in per_seed {
        for v in results {
            check_row(*seed, v)?;
            if !order.contains(&v.variant) {
                order.push(v.variant.clone());
            }
            rows.entry(v.variant.clone()).or_default().push(v);
        }
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let vs = &rows[&name];
            let avg: Vec<f64> = vs.iter().map(|v| v.report.avg_acc).collect();
            let worst: Vec<f64> = vs.iter().map(|v| v.report.worst_group_acc).collect();
            let att: Option<Vec<f64>> = vs.iter().map(|v| v.attention.as_ref().map(|a| a.mean)).collect();
            VariantSummary {
                variant: name.clone(),
                n_seeds: vs.len(),
                avg_acc: mean_std(&avg),
                worst_group_acc: mean_std(&worst),
                fg_attention: att.map(|a| mean_std(&a)),
            }
        })
        .collect())
}

fn pct((mean, std): (f64, Option<f64>)) -> String {
    match std {
        Some(s) => format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * s),
        None => format!("{:.1}", 100.0 * mean),
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn render_csv(summaries: &[VariantSummary]) -> String {
    let mut s = String::from(
        "variant,n_seeds,avg_acc_mean,avg_acc_std,worst_group_acc_mean,worst_group_acc_std,fg_attention_mean,fg_attention_std\n",
    );
    for v in summaries {
        let (am, as_) = v.avg_acc;
        let (wm, ws) = v.worst_group_acc;
        let (fm, fs) = match v.fg_attention {
            Some((m, s)) => (Some(m), s),
            None => (None, None),
        };
        writeln!(
            s,
            "{},{},{:.6},{},{:.6},{},{},{}",
            v.variant,
            v.n_seeds,
            am,
            opt_num(as_),
            wm,
            opt_num(ws),
            opt_num(fm),
            opt_num(fs)
        )
        .expect("string write");
    }
    s
}

fn load_evals(run: &Run) -> Result<Vec<(u64, Vec<VariantResult>)>> {
    run.cfg
        .seeds
        .iter()
        .map(|&s| {
            let p = run.evals_path(s);
            if !p.exists() {
                return Err(Error::Report(format!("missing eval artifacts for seed {s} ({})", p.display())));
            }
            Ok((s, fsio::read_json(&p)?))
        })
        .collect()
}

fn metric_lines(run: &Run, per_seed: &[(u64, Vec<VariantResult>)]) -> Result<Vec<Value>> {
    let mut lines = Vec::new();
    for (seed, results) in per_seed {
        for (variant, round, path) in run.metric_files(*seed) {
            let metrics: Vec<EpochMetrics> = fsio::read_jsonl(&path)?;
            for m in metrics {
                lines.push(json!({
                    "kind": "epoch", "seed": seed, "variant": variant, "round": round,
                    "epoch": m.epoch, "loss": m.loss, "val_avg": m.val_avg, "val_worst": m.val_worst,
                }));
            }
        }
        for v in results {
            lines.push(json!({
                "kind": "eval", "seed": seed, "variant": v.variant, "split": "test",
                "avg_acc": v.report.avg_acc, "worst_group_acc": v.report.worst_group_acc,
                "per_group": v.report.per_group, "fg_attention": v.attention,
            }));
        }
    }
    Ok(lines)
}

/// `[image | ERM CAM | SCGS CAM]` for a seeded sample of test images.
fn write_overlays(run: &Run, seed: u64, md: &mut String) -> Result<Vec<String>> {
    let data = run.data(seed)?;
    let erm = model::load_checkpoint(&run.checkpoint_path(seed, ERM))?;
    let scgs = model::load_checkpoint(&run.checkpoint_path(seed, SCGS))?;
    let test: Vec<_> = data.split(Split::Test).collect();
    let n = run.cfg.overlay_samples.min(test.len());
    let mut r = rng::stream(seed, "overlay", 0);
    let mut picks = rand::seq::index::sample(&mut r, test.len(), n).into_vec();
    picks.sort_unstable();
    let mut files = Vec::new();
    for i in picks {
        let e = test[i];
        let img = e.pixels.as_ref();
        let (h, w) = (img.height, img.width);
        let mut canvas = Image::zeros(h, 3 * w, 3);
        let a = cam::activation_map(&erm, img, e.label, CamMethod::GradCamPp, Upsample::Bilinear)?;
        let b = cam::activation_map(&scgs, img, e.label, CamMethod::GradCamPp, Upsample::Bilinear)?;
        let panels = [
            cam::render_overlay(img, &cam::ActivationMap { values: vec![0.0; h * w], ..a.clone() })?,
            cam::render_overlay(img, &a)?,
            cam::render_overlay(img, &b)?,
        ];
        // the first panel is the plain image, not a blend
        for r0 in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    let src = img.get(r0, c, if img.channels == 1 { 0 } else { ch });
                    canvas.set(r0, c, ch, src);
                    canvas.set(r0, w + c, ch, panels[1].get(r0, c, ch));
                    canvas.set(r0, 2 * w + c, ch, panels[2].get(r0, c, ch));
                }
            }
        }
        canvas.quantize();
        let rel = format!("overlays/seed-{seed}-{}.png", e.id);
        canvas.save_png(&run.path(&rel))?;
        let fa = |m| e.fg_box.map(|bx| cam::foreground_attention(m, bx)).transpose();
        writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            e.id,
            e.group.map(|g| format!("({}, {})", g.label, g.attribute)).unwrap_or_default(),
            fa(&a)?.map(|x| format!("{x:.3}")).unwrap_or_default(),
            fa(&b)?.map(|x| format!("{x:.3}")).unwrap_or_default(),
            rel
        )
        .expect("string write");
        files.push(rel);
    }
    Ok(files)
}

fn counts_table(md: &mut String, title: &str, cells: &[CellCount]) {
    writeln!(md, "{title}\n\n| label | attribute | count |\n|---|---|---|").expect("string write");
    for c in cells {
        let attr = c.attribute.map(|a| a.to_string()).unwrap_or_else(|| "unlabeled".into());
        writeln!(md, "| {} | {} | {} |", c.label, attr, c.count).expect("string write");
    }
    md.push('\n');
}

/// Writes every report output and returns the run-relative paths.
pub fn write_report(run: &Run) -> Result<Vec<String>> {
    let per_seed = load_evals(run)?;
    let summaries = summarize(&per_seed)?;
    let cfg = &run.cfg;
    fsio::write_atomic(&run.path("report.csv"), render_csv(&summaries).as_bytes())?;
    let lines = metric_lines(run, &per_seed)?;
    fsio::write_jsonl(&run.path("metrics.jsonl"), &lines)?;

    let mut md = String::new();
    writeln!(md, "# SCGS run report\n").expect("string write");
    writeln!(
        md,
        "CAM: `{}`, τ = {}, K = {}, sample fraction {}, generation fraction {}, backend `{:?}`, rounds {}, seeds {:?} (n = {}).\n",
        cfg.cam.as_str(),
        cfg.tau,
        cfg.clusters_per_class,
        cfg.sample_fraction,
        cfg.generation_fraction,
        cfg.backend,
        cfg.rounds,
        cfg.seeds,
        cfg.seeds.len()
    )
    .expect("string write");
    writeln!(md, "## Accuracy (test, %, mean ± sample std over seeds)\n").expect("string write");
    writeln!(md, "| Method | Avg Acc. | Worst-group Acc. |\n|---|---|---|").expect("string write");
    for v in &summaries {
        writeln!(md, "| {} | {} | {} |", v.variant, pct(v.avg_acc), pct(v.worst_group_acc)).expect("string write");
    }
    writeln!(md, "\n## Per seed\n\n| Seed | Method | Avg Acc. | Worst-group Acc. | Per-group |\n|---|---|---|---|---|")
        .expect("string write");
    for (seed, results) in &per_seed {
        for v in results {
            let groups: Vec<String> = v
                .report
                .per_group
                .iter()
                .map(|g| format!("({},{}) {:.3}", g.label, g.attribute, g.accuracy))
                .collect();
            writeln!(
                md,
                "| {seed} | {} | {:.4} | {:.4} | {} |",
                v.variant,
                v.report.avg_acc,
                v.report.worst_group_acc,
                groups.join("; ")
            )
            .expect("string write");
        }
    }
    writeln!(md, "\n## Foreground attention (Grad-CAM++ mass inside the object box, true class)\n").expect("string write");
    writeln!(md, "| Method | mean over seeds | per-seed means |\n|---|---|---|").expect("string write");
    for v in &summaries {
        let per: Vec<String> = per_seed
            .iter()
            .filter_map(|(_, rs)| rs.iter().find(|r| r.variant == v.variant))
            .map(|r| r.attention.as_ref().map(|a| format!("{:.3}", a.mean)).unwrap_or_else(|| "n/a".into()))
            .collect();
        let mean = v
            .fg_attention
            .map(|(m, s)| match s {
                Some(s) => format!("{m:.3} ± {s:.3}"),
                None => format!("{m:.3}"),
            })
            .unwrap_or_else(|| "n/a".into());
        writeln!(md, "| {} | {} | {} |", v.variant, mean, per.join(", ")).expect("string write");
    }
    writeln!(md, "\n## Train group counts before and after merging\n").expect("string write");
    for &seed in &cfg.seeds {
        let first: Value = fsio::read_json(&run.group_counts_path(seed, 1))?;
        let last: Value = fsio::read_json(&run.group_counts_path(seed, cfg.rounds))?;
        let before: Vec<CellCount> = serde_json::from_value(first["before"].clone())?;
        let after: Vec<CellCount> = serde_json::from_value(last["after"].clone())?;
        counts_table(&mut md, &format!("### Seed {seed}, before"), &before);
        counts_table(&mut md, &format!("### Seed {seed}, after"), &after);
    }
    writeln!(
        md,
        "## CAM overlays\n\nPanels: image, ERM, SCGS (Grad-CAM++ for the true class).\n\n| Image | Group | ERM fg | SCGS fg | File |\n|---|---|---|---|---|"
    )
    .expect("string write");
    let mut files: Vec<String> = OUTPUTS[..3].iter().map(|s| s.to_string()).collect();
    for &seed in &cfg.seeds {
        files.extend(write_overlays(run, seed, &mut md)?);
    }
    fsio::write_atomic(&run.path("report.md"), md.as_bytes())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::GroupAccuracy;

    fn result(variant: &str, per: &[f64]) -> VariantResult {
        let per_group: Vec<GroupAccuracy> = per
            .iter()
            .enumerate()
            .map(|(i, &a)| GroupAccuracy {
                label: i / 2,
                attribute: i % 2,
                accuracy: a,
                correct: (a * 100.0) as usize,
                count: 100,
            })
            .collect();
        VariantResult {
            variant: variant.into(),
            report: EvalReport {
                split: Split::Test,
                avg_acc: per.iter().sum::<f64>() / per.len() as f64,
                worst_group_acc: per.iter().copied().fold(1.0, f64::min),
                per_group,
                empty_groups: vec![],
                n: 100 * per.len(),
            },
            attention: None,
        }
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, None));
    }

    #[test]
    fn one_row_per_variant() {
        let per_seed = vec![
            (0, vec![result("ERM", &[1.0, 0.5, 0.6, 1.0]), result("SCGS", &[1.0, 0.9, 0.9, 1.0])]),
            (1, vec![result("ERM", &[1.0, 0.7, 0.6, 1.0]), result("SCGS", &[1.0, 0.8, 0.9, 1.0])]),
        ];
        let s = summarize(&per_seed).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(render_csv(&s).lines().count(), 3);
        assert!((s[0].worst_group_acc.0 - 0.55).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_worst_group_is_rejected() {
        let mut bad = result("ERM", &[1.0, 0.5, 0.6, 1.0]);
        bad.report.worst_group_acc = 0.6;
        assert!(matches!(summarize(&[(0, vec![bad])]), Err(Error::Report(_))));
    }
}

//! Generation budgets, mask-conditioned generation requests, and the
//! procedural and remote backends that turn requests into labeled images.

pub mod procedural;
pub mod remote;
pub mod stub;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cam::Mask;
use crate::cluster::SamplePlan;
use crate::dataset::{DatasetManifest, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::fsio;
use crate::rng;

pub use procedural::{procedural_inpaint, ProceduralBackend};
pub use remote::{remote_generate, EndpointConfig, RemoteBackend};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    /// Whole-image regeneration conditioned on the source and prompt.
    Img2Img,
    /// Regenerates only the mask = 0 region.
    Inpaint,
}

impl GenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GenMode::Img2Img => "img2img",
            GenMode::Inpaint => "inpaint",
        }
    }
}

impl fmt::Display for GenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GenMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img2img" => Ok(GenMode::Img2Img),
            "inpaint" => Ok(GenMode::Inpaint),
            other => Err(Error::Protocol(format!("unknown generation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub request_id: String,
    pub source_image_id: String,
    /// Preserve-mask with the source's dimensions.
    pub mask: Mask,
    /// True label of the source image.
    pub target_label: usize,
    pub prompt: String,
    pub seed: u64,
    pub mode: GenMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationBudget {
    pub fraction: f64,
    /// Train count `N_j` per class.
    pub basis_counts: Vec<usize>,
    /// `n_new(i)` per class.
    pub per_class: Vec<usize>,
}

impl GenerationBudget {
    pub fn total(&self) -> usize {
        self.per_class.iter().sum()
    }
}

/// `n_new(i) = round(fraction · Σ_{j≠i} N_j / (C − 1))` over train counts.
pub fn plan_budget(manifest: &DatasetManifest, fraction: f64) -> Result<GenerationBudget> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Input(format!("generation fraction {fraction} outside (0, 1]")));
    }
    let c = manifest.n_classes();
    if c < 2 {
        return Err(Error::Input("generation budget needs at least two classes".into()));
    }
    let counts = manifest.class_counts(Split::Train);
    let total: usize = counts.iter().sum();
    let per_class = counts
        .iter()
        .map(|&n| (fraction * (total - n) as f64 / (c - 1) as f64).round() as usize)
        .collect();
    Ok(GenerationBudget {
        fraction,
        basis_counts: counts,
        per_class,
    })
}

/// A class whose budget could not be met because nothing was sampled for it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedClass {
    pub class: usize,
    pub budget: usize,
}

/// Renders a prompt from a template containing `{class}`.
pub fn render_prompt(template: &str, class_name: &str) -> String {
    template.replace("{class}", class_name)
}

/// For each class, cycles through its sampled ids until `n_new(i)` requests
/// exist; every request gets its own seed.
pub fn build_requests(
    plans: &BTreeMap<usize, SamplePlan>,
    masks: &BTreeMap<String, Mask>,
    budget: &GenerationBudget,
    class_names: &[String],
    prompt_template: &str,
    mode: GenMode,
    seed: u64,
) -> Result<(Vec<GenerationRequest>, Vec<SkippedClass>)> {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (class, &n) in budget.per_class.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let sources = plans.get(&class).map(SamplePlan::union).unwrap_or_default();
        if sources.is_empty() {
            log::warn!("class {class}: budget {n} but no sampled images; skipped");
            skipped.push(SkippedClass { class, budget: n });
            continue;
        }
        let name = class_names
            .get(class)
            .ok_or_else(|| Error::Input(format!("no name for class {class}")))?;
        for j in 0..n {
            let source = &sources[j % sources.len()];
            let mask = masks
                .get(source)
                .ok_or_else(|| Error::Input(format!("sampled image {source} has no mask")))?;
            out.push(GenerationRequest {
                request_id: format!("gen-c{class}-{j:05}"),
                source_image_id: source.clone(),
                mask: mask.clone(),
                target_label: class,
                prompt: render_prompt(prompt_template, name),
                seed: rng::derive_seed(seed, &format!("generate-{class}"), j as u64),
                mode,
            });
        }
    }
    Ok((out, skipped))
}

/// A generated image plus what it took to obtain it.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutcome {
    pub image: LabeledImage,
    pub retries: u32,
    pub warnings: Vec<String>,
}

pub trait Backend: Sync {
    fn name(&self) -> &str;
    fn generate(&self, request: &GenerationRequest, source: &LabeledImage) -> Result<GenerationOutcome>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub request_id: String,
    pub class: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub failures: Vec<Failure>,
    pub retries: u32,
    pub warnings: Vec<String>,
}

impl FailureReport {
    pub fn failed_ids(&self) -> Vec<&str> {
        self.failures.iter().map(|f| f.request_id.as_str()).collect()
    }
}

/// Runs every request with at most `concurrency_limit` in flight. Images come
/// back in request order; failed requests are reported, not fatal, unless
/// every request failed.
pub fn run_generation(
    requests: &[GenerationRequest],
    sources: &DatasetManifest,
    backend: &dyn Backend,
    concurrency_limit: usize,
) -> Result<(Vec<LabeledImage>, FailureReport)> {
    let workers = concurrency_limit.max(1).min(requests.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<GenerationOutcome>>>> =
        Mutex::new((0..requests.len()).map(|_| None).collect());
    let index = sources.index();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= requests.len() {
                    break;
                }
                let req = &requests[i];
                let result = match index.get(req.source_image_id.as_str()) {
                    Some(&pos) => backend.generate(req, &sources.entries[pos]),
                    None => Err(Error::Input(format!("unknown source image {}", req.source_image_id))),
                };
                slots.lock().expect("worker panicked")[i] = Some(result);
            });
        }
    });
    let mut images = Vec::new();
    let mut report = FailureReport::default();
    for (req, slot) in requests.iter().zip(slots.into_inner().expect("workers joined")) {
        match slot.expect("every request ran") {
            Ok(o) => {
                report.retries += o.retries;
                report
                    .warnings
                    .extend(o.warnings.into_iter().map(|w| format!("{}: {w}", req.request_id)));
                images.push(o.image);
            }
            Err(e) => {
                log::warn!("{} failed: {e}", req.request_id);
                report.failures.push(Failure {
                    request_id: req.request_id.clone(),
                    class: req.target_label,
                    error: e.to_string(),
                });
            }
        }
    }
    if !requests.is_empty() && images.is_empty() {
        return Err(Error::Generation(format!(
            "all {} generation requests failed (first: {})",
            requests.len(),
            report.failures[0].error
        )));
    }
    Ok((images, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub request_id: String,
    pub source_id: String,
    pub label: usize,
    pub seed: u64,
    pub backend: String,
    /// Attribute stamped by the backend, when it knows one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_attr: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fg_box: Option<[usize; 4]>,
}

/// Sidecar lines for the requests that produced an image, in image order.
pub fn sidecar(requests: &[GenerationRequest], images: &[LabeledImage], backend: &str) -> Vec<SidecarRecord> {
    let by_id: BTreeMap<&str, &GenerationRequest> = requests.iter().map(|r| (r.request_id.as_str(), r)).collect();
    images
        .iter()
        .filter_map(|img| by_id.get(img.id.as_str()).map(|r| (img, r)))
        .map(|(img, r)| SidecarRecord {
            request_id: r.request_id.clone(),
            source_id: r.source_image_id.clone(),
            label: r.target_label,
            seed: r.seed,
            backend: backend.to_string(),
            group_attr: img.attribute(),
            fg_box: img.fg_box,
        })
        .collect()
}

/// Writes `images/{id}.png` under `dir` plus `sidecar.jsonl`.
pub fn save_synthesized(dir: &Path, images: &[LabeledImage], records: &[SidecarRecord]) -> Result<()> {
    use rayon::prelude::*;
    images
        .par_iter()
        .map(|img| img.pixels.save_png(&dir.join("images").join(format!("{}.png", img.id))))
        .collect::<Result<Vec<()>>>()?;
    fsio::write_jsonl(&dir.join("sidecar.jsonl"), records)
}

/// Reads back what [`save_synthesized`] wrote, in sidecar order.
pub fn load_synthesized(dir: &Path) -> Result<Vec<LabeledImage>> {
    use rayon::prelude::*;
    let records: Vec<SidecarRecord> = fsio::read_jsonl(&dir.join("sidecar.jsonl"))?;
    records
        .par_iter()
        .map(|r| {
            let pixels = crate::image::Image::load_png(&dir.join("images").join(format!("{}.png", r.request_id)))?;
            Ok(LabeledImage {
                id: r.request_id.clone(),
                pixels: std::sync::Arc::new(pixels),
                label: r.label,
                group: r.group_attr.map(|attribute| crate::dataset::Group {
                    label: r.label,
                    attribute,
                }),
                split: Split::Train,
                provenance: crate::dataset::Provenance::Synthesized,
                fg_box: r.fg_box,
            })
        })
        .collect()
}

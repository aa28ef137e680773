//! Per-class k-means over misclassified feature vectors, per-cluster Gaussian
//! densities, and density-weighted sampling without replacement.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::harvest::{Harvest, MisclassifiedSet};
use crate::rng;

pub const MAX_KMEANS_ITERS: usize = 300;
pub const MAX_PCA_DIM: usize = 32;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(vectors: &[&[f64]]) -> Vec<f64> {
    let d = vectors[0].len();
    let mut m = vec![0.0; d];
    for v in vectors {
        for (a, b) in m.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    let n = vectors.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(v, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Within-cluster SSE after each Lloyd iteration.
    pub sse_history: Vec<f64>,
}

impl KMeans {
    pub fn sse(&self, vectors: &[Vec<f64>]) -> f64 {
        vectors
            .iter()
            .zip(&self.assignments)
            .map(|(v, &k)| sq_dist(v, &self.centroids[k]))
            .sum()
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == k)
            .collect()
    }
}

/// Lloyd's algorithm with k-means++ seeding, until the assignment reaches a
/// fixpoint or [`MAX_KMEANS_ITERS`] iterations.
pub fn fit_kmeans(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Input("k-means needs K ≥ 1".into()));
    }
    if vectors.len() < k {
        return Err(Error::Input(format!(
            "k-means with K = {k} needs at least {k} vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Input("k-means vectors differ in dimension".into()));
    }
    let n = vectors.len();
    let mut r = rng::stream(seed, "kmeans++", 0);
    let mut centroids: Vec<Vec<f64>> = vec![vectors[r.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            r.random_range(0..n)
        };
        centroids.push(vectors[next].clone());
        for (i, v) in vectors.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(v, centroids.last().expect("pushed")));
        }
    }

    let mut assignments: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids).0).collect();
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        // Update step; an empty cluster is re-seeded at the point farthest
        // from its assigned centroid (lowest index on ties).
        let mut new_centroids = Vec::with_capacity(k);
        for c in 0..k {
            let members: Vec<&[f64]> = vectors
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == c)
                .map(|(v, _)| v.as_slice())
                .collect();
            if members.is_empty() {
                new_centroids.push(Vec::new());
            } else {
                new_centroids.push(mean_of(&members));
            }
        }
        for c in 0..k {
            if new_centroids[c].is_empty() {
                let far = (0..n)
                    .map(|i| {
                        let own = &new_centroids[assignments[i]];
                        let dist = if own.is_empty() { 0.0 } else { sq_dist(&vectors[i], own) };
                        (i, dist)
                    })
                    .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
                new_centroids[c] = vectors[far.0].clone();
                assignments[far.0] = c;
            }
        }
        centroids = new_centroids;
        let next: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids).0).collect();
        let changed = next != assignments;
        assignments = next;
        let model = KMeans {
            centroids: centroids.clone(),
            assignments: assignments.clone(),
            iterations,
            sse_history: Vec::new(),
        };
        sse_history.push(model.sse(vectors));
        if !changed || iterations >= MAX_KMEANS_ITERS {
            break;
        }
    }
    // Final update so every centroid is the mean of its members.
    for (c, centroid) in centroids.iter_mut().enumerate() {
        let members: Vec<&[f64]> = vectors
            .iter()
            .zip(&assignments)
            .filter(|(_, &a)| a == c)
            .map(|(v, _)| v.as_slice())
            .collect();
        if !members.is_empty() {
            *centroid = mean_of(&members);
        }
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
        sse_history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Covariance {
    pub dim: usize,
    /// Bessel-corrected sample covariance, row-major; zero for a singleton.
    pub raw: Vec<f64>,
    pub epsilon: f64,
    /// `raw + εI`.
    pub regularized: Vec<f64>,
}

/// Sample covariance with denominator `|S| − 1` plus `εI` shrinkage,
/// `ε = 1e-6·trace/d` (or `1e-6` when the trace is 0). A single member yields
/// `raw = 0`.
pub fn cluster_covariance(members: &[&[f64]], mean: &[f64]) -> Result<Covariance> {
    if members.is_empty() {
        return Err(Error::Input("covariance of an empty cluster".into()));
    }
    let d = mean.len();
    if members.iter().any(|m| m.len() != d) {
        return Err(Error::Input("covariance member dimension mismatch".into()));
    }
    let mut raw = vec![0.0; d * d];
    if members.len() >= 2 {
        for m in members {
            for i in 0..d {
                let di = m[i] - mean[i];
                for j in i..d {
                    raw[i * d + j] += di * (m[j] - mean[j]);
                }
            }
        }
        let denom = (members.len() - 1) as f64;
        for i in 0..d {
            for j in i..d {
                raw[i * d + j] /= denom;
                raw[j * d + i] = raw[i * d + j];
            }
        }
    }
    let trace: f64 = (0..d).map(|i| raw[i * d + i]).sum();
    let epsilon = if trace > 0.0 { 1e-6 * trace / d as f64 } else { 1e-6 };
    let mut regularized = raw.clone();
    for i in 0..d {
        regularized[i * d + i] += epsilon;
    }
    Ok(Covariance {
        dim: d,
        raw,
        epsilon,
        regularized,
    })
}

/// Multivariate normal with a Cholesky-factored covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    /// Lower-triangular factor `L` with `LLᵀ = Σ`, row-major.
    pub chol: Vec<f64>,
    pub logdet: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: &[f64]) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Input(format!("covariance has {} entries, expected {}", cov.len(), d * d)));
        }
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let mut s = cov[i * d + j];
                for k in 0..j {
                    s -= l[i * d + k] * l[j * d + k];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::Input("covariance is not positive definite".into()));
                    }
                    l[i * d + i] = s.sqrt();
                } else {
                    l[i * d + j] = s / l[j * d + j];
                }
            }
        }
        let logdet = 2.0 * (0..d).map(|i| l[i * d + i].ln()).sum::<f64>();
        Ok(Self { mean, chol: l, logdet })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(s−μ)ᵀ Σ⁻¹ (s−μ)` by forward substitution.
    pub fn mahalanobis_sq(&self, s: &[f64]) -> Result<f64> {
        let d = self.dim();
        if s.len() != d {
            return Err(Error::Input(format!("point has dim {}, density has dim {d}", s.len())));
        }
        let mut z = vec![0.0; d];
        for i in 0..d {
            let mut v = s[i] - self.mean[i];
            for k in 0..i {
                v -= self.chol[i * d + k] * z[k];
            }
            z[i] = v / self.chol[i * d + i];
        }
        Ok(z.iter().map(|v| v * v).sum())
    }
}

/// `−½[d·log 2π + log|Σ| + (s−μ)ᵀΣ⁻¹(s−μ)]`.
pub fn gaussian_logpdf(s: &[f64], g: &Gaussian) -> Result<f64> {
    let m = g.mahalanobis_sq(s)?;
    let d = g.dim() as f64;
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + g.logdet + m))
}

/// Normalized weights `exp(ℓ_i − max ℓ) / Σ`.
pub fn softmax_weights(log_densities: &[f64]) -> Vec<f64> {
    crate::model::softmax(log_densities)
}

/// Sequential weighted draws without replacement; returns positions.
pub fn weighted_sample_without_replacement(weights: &[f64], n: usize, r: &mut rng::Rng) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(n.min(w.len()));
    for _ in 0..n.min(w.len()) {
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = None;
            for (i, &wi) in w.iter().enumerate() {
                if wi > 0.0 {
                    if u < wi {
                        pick = Some(i);
                        break;
                    }
                    u -= wi;
                }
            }
            pick.unwrap_or_else(|| w.iter().rposition(|&x| x > 0.0).expect("positive total"))
        } else {
            // Remaining weights underflowed; draw uniformly from the rest.
            let rest: Vec<usize> = (0..w.len()).filter(|i| !out.contains(i)).collect();
            rest[r.random_range(0..rest.len())]
        };
        out.push(pick);
        w[pick] = 0.0;
    }
    out
}

/// One cluster of a class model: its members and density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDensity {
    /// Positions into [`ClusterModel::ids`].
    pub members: Vec<usize>,
    pub covariance: Covariance,
    pub gaussian: Gaussian,
    /// `gaussian_logpdf` of each member, same order as `members`.
    pub log_densities: Vec<f64>,
}

/// Orthonormal PCA map `x ↦ W(x − m)` with `W` of shape `d × D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// `d` rows of length `D`.
    pub components: Vec<Vec<f64>>,
}

impl Projection {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|w| w.iter().zip(x).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
            .collect()
    }

    /// Top-`d` principal axes of `vectors`, each sign-fixed so its
    /// largest-magnitude coordinate is positive.
    pub fn fit(vectors: &[Vec<f64>], d: usize) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Input("PCA of no vectors".into()));
        }
        let dim = vectors[0].len();
        let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
        let mean = mean_of(&refs);
        let mut scatter = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for v in vectors {
            let c = nalgebra::DVector::from_iterator(dim, v.iter().zip(&mean).map(|(a, b)| a - b));
            scatter += &c * c.transpose();
        }
        let eig = scatter.symmetric_eigen();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let components = order
            .into_iter()
            .take(d.min(dim))
            .map(|j| {
                let mut w: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
                let lead = w
                    .iter()
                    .copied()
                    .fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
                if lead < 0.0 {
                    w.iter_mut().for_each(|x| *x = -*x);
                }
                w
            })
            .collect();
        Ok(Self { mean, components })
    }
}

/// Projected dimension for `n` vectors of raw dimension `raw_dim`.
pub fn projected_dim(n: usize, raw_dim: usize) -> usize {
    MAX_PCA_DIM.min(n.saturating_sub(2)).min(raw_dim).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub class: usize,
    pub k: usize,
    /// Image ids in the order of the fitted vectors.
    pub ids: Vec<String>,
    pub projection: Projection,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub clusters: Vec<ClusterDensity>,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.members.len()).collect()
    }
}

/// Projects a class's features, runs k-means with `min(k, n)` clusters and
/// fits one density per cluster. Returns `None` for an empty set.
pub fn fit_class(set: &MisclassifiedSet, k: usize, seed: u64) -> Result<Option<ClusterModel>> {
    if set.is_empty() {
        return Ok(None);
    }
    let feats = set
        .features
        .as_ref()
        .ok_or_else(|| Error::Input(format!("class {} has no attached features", set.class)))?;
    let d = projected_dim(feats.len(), feats[0].len());
    let projection = Projection::fit(feats, d)?;
    let projected: Vec<Vec<f64>> = feats.iter().map(|f| projection.apply(f)).collect();
    let k = k.min(projected.len());
    let km = fit_kmeans(&projected, k, rng::derive_seed(seed, "kmeans", set.class as u64))?;
    let mut clusters = Vec::with_capacity(k);
    for c in 0..k {
        let members = km.members(c);
        let vecs: Vec<&[f64]> = members.iter().map(|&i| projected[i].as_slice()).collect();
        let cov = cluster_covariance(&vecs, &km.centroids[c])?;
        let gaussian = Gaussian::new(km.centroids[c].clone(), &cov.regularized)?;
        let log_densities = vecs
            .iter()
            .map(|v| gaussian_logpdf(v, &gaussian))
            .collect::<Result<Vec<_>>>()?;
        clusters.push(ClusterDensity {
            members,
            covariance: cov,
            gaussian,
            log_densities,
        });
    }
    Ok(Some(ClusterModel {
        class: set.class,
        k,
        ids: set.items.iter().map(|i| i.id.clone()).collect(),
        projection,
        centroids: km.centroids,
        assignments: km.assignments,
        clusters,
    }))
}

pub fn fit_all(sets: &Harvest, k: usize, seed: u64) -> Result<BTreeMap<usize, ClusterModel>> {
    let mut out = BTreeMap::new();
    for (c, set) in sets {
        if let Some(m) = fit_class(set, k, seed)? {
            out.insert(*c, m);
        }
    }
    Ok(out)
}

/// Draws `n` members of cluster `k` of `model`, weighted by normalized density.
pub fn sample_cluster(model: &ClusterModel, k: usize, n: usize, seed: u64) -> Vec<String> {
    let cluster = &model.clusters[k];
    if n > cluster.members.len() {
        log::warn!(
            "class {} cluster {k}: requested {n} samples from {} members; clipped",
            model.class,
            cluster.members.len()
        );
    }
    let weights = softmax_weights(&cluster.log_densities);
    let mut r = rng::stream(seed, &format!("sample-{}", model.class), k as u64);
    weighted_sample_without_replacement(&weights, n, &mut r)
        .into_iter()
        .map(|p| model.ids[cluster.members[p]].clone())
        .collect()
}

/// Largest-remainder apportionment of `total` proportionally to `sizes`
/// (ties to the lower index), never exceeding a size.
pub fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let total = total.min(n);
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut quota: Vec<usize> = sizes.iter().map(|&s| s * total / n).collect();
    let mut rem: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| (s * total % n, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - quota.iter().sum::<usize>();
    for (_, i) in rem {
        if left == 0 {
            break;
        }
        if quota[i] < sizes[i] {
            quota[i] += 1;
            left -= 1;
        }
    }
    quota
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub class: usize,
    pub fraction: f64,
    pub seed: u64,
    pub per_cluster: Vec<Vec<String>>,
}

impl SamplePlan {
    /// Union of the per-cluster draws, in cluster order.
    pub fn union(&self) -> Vec<String> {
        self.per_cluster.iter().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.per_cluster.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per class: `round(fraction·|D_mis|)` draws apportioned over clusters.
pub fn build_sample_plan(
    models: &BTreeMap<usize, ClusterModel>,
    sets: &Harvest,
    fraction: f64,
    seed: u64,
) -> Result<BTreeMap<usize, SamplePlan>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Input(format!("sample fraction {fraction} outside (0, 1]")));
    }
    let mut out = BTreeMap::new();
    for (&c, set) in sets {
        let per_cluster = match models.get(&c) {
            Some(model) => {
                let n = (fraction * set.len() as f64).round() as usize;
                apportion(&model.cluster_sizes(), n)
                    .into_iter()
                    .enumerate()
                    .map(|(k, nk)| sample_cluster(model, k, nk, seed))
                    .collect()
            }
            None => Vec::new(),
        };
        out.insert(
            c,
            SamplePlan {
                class: c,
                fraction,
                seed,
                per_cluster,
            },
        );
    }
    Ok(out)
}

/// Cluster models as JSON with covariance blocks moved to a sibling binary
/// file of little-endian `f64`s (regularized matrices, in class/cluster order).
pub fn save_cluster_models(json_path: &Path, bin_path: &Path, models: &BTreeMap<usize, ClusterModel>) -> Result<()> {
    let mut blocks = Vec::new();
    let mut stripped = models.clone();
    for m in stripped.values_mut() {
        for c in &mut m.clusters {
            for v in &c.covariance.regularized {
                blocks.extend_from_slice(&v.to_le_bytes());
            }
            for v in &c.covariance.raw {
                blocks.extend_from_slice(&v.to_le_bytes());
            }
            c.covariance.regularized.clear();
            c.covariance.raw.clear();
        }
    }
    fsio::write_atomic(bin_path, &blocks)?;
    fsio::write_json(json_path, &stripped)
}

pub fn load_cluster_models(json_path: &Path, bin_path: &Path) -> Result<BTreeMap<usize, ClusterModel>> {
    let mut models: BTreeMap<usize, ClusterModel> = fsio::read_json(json_path)?;
    let bytes = fsio::read(bin_path)?;
    let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8")));
    for m in models.values_mut() {
        for c in &mut m.clusters {
            let n = c.covariance.dim * c.covariance.dim;
            c.covariance.regularized = vals.by_ref().take(n).collect();
            c.covariance.raw = vals.by_ref().take(n).collect();
            if c.covariance.raw.len() != n {
                return Err(Error::Input(format!(
                    "{} is too short for the models in {}",
                    bin_path.display(),
                    json_path.display()
                )));
            }
        }
    }
    Ok(models)
}

#[derive(Serialize, Deserialize)]
struct PlanLine {
    class: usize,
    cluster: usize,
    fraction: f64,
    seed: u64,
    ids: Vec<String>,
}

pub fn save_sample_plans(path: &Path, plans: &BTreeMap<usize, SamplePlan>) -> Result<()> {
    let mut lines = Vec::new();
    for p in plans.values() {
        if p.per_cluster.is_empty() {
            lines.push(PlanLine {
                class: p.class,
                cluster: 0,
                fraction: p.fraction,
                seed: p.seed,
                ids: Vec::new(),
            });
        }
        for (k, ids) in p.per_cluster.iter().enumerate() {
            lines.push(PlanLine {
                class: p.class,
                cluster: k,
                fraction: p.fraction,
                seed: p.seed,
                ids: ids.clone(),
            });
        }
    }
    fsio::write_jsonl(path, &lines)
}

pub fn load_sample_plans(path: &Path) -> Result<BTreeMap<usize, SamplePlan>> {
    let lines: Vec<PlanLine> = fsio::read_jsonl(path)?;
    let mut out: BTreeMap<usize, SamplePlan> = BTreeMap::new();
    for l in lines {
        let p = out.entry(l.class).or_insert_with(|| SamplePlan {
            class: l.class,
            fraction: l.fraction,
            seed: l.seed,
            per_cluster: Vec::new(),
        });
        if !(l.ids.is_empty() && l.cluster == 0 && p.per_cluster.is_empty()) || l.cluster > 0 {
            p.per_cluster.push(l.ids);
        }
    }
    Ok(out)
}

use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{self, ShapeKind};
use super::{DatasetManifest, Group, LabeledImage, Provenance, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Parameters of the synthetic biased dataset.
///
/// Class `i` is paired with attribute `i`: in the train split a class-`i` image
/// carries background attribute `i` with probability `correlation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub n_attributes: usize,
    pub correlation: f64,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 400,
            n_test: 800,
            n_classes: 2,
            n_attributes: 2,
            correlation: 0.95,
            image_size: 32,
            channels: 3,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.correlation) {
            return bad("correlation must lie in [0, 1]");
        }
        if self.n_classes < 2 {
            return bad("need at least two classes");
        }
        if self.n_classes != self.n_attributes {
            return bad("n_classes must equal n_attributes (diagonal pairing)");
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split counts must be positive");
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        Ok(())
    }
}

pub(crate) const SHAPE_NAMES: [&str; 5] = ["square", "cross", "ring", "triangle", "plus"];
pub(crate) const TEXTURE_NAMES: [&str; 4] = ["hstripes", "checker", "vstripes", "diagonal"];

/// Generates the three splits; pixels and manifest are a pure function of `config`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let mut jobs = Vec::new();
    for (split, n) in [
        (Split::Train, config.n_train),
        (Split::Val, config.n_val),
        (Split::Test, config.n_test),
    ] {
        for i in 0..n {
            jobs.push((split, i));
        }
    }
    let entries = jobs
        .par_iter()
        .map(|&(split, i)| render_entry(config, split, i))
        .collect();
    let class_names = (0..config.n_classes)
        .map(|k| {
            let name = SHAPE_NAMES[k % SHAPE_NAMES.len()];
            if k < SHAPE_NAMES.len() {
                name.to_string()
            } else {
                format!("{name}{}", k / SHAPE_NAMES.len())
            }
        })
        .collect();
    let attribute_names = (0..config.n_attributes)
        .map(|a| format!("{}{}", TEXTURE_NAMES[a % 4], a / 4))
        .collect();
    let m = DatasetManifest {
        class_names,
        attribute_names,
        seed: config.seed,
        entries,
    };
    m.validate()?;
    Ok(m)
}

fn render_entry(config: &SynthConfig, split: Split, index: usize) -> LabeledImage {
    let mut r = rng::stream(config.seed, split.as_str(), index as u64);
    let label = index % config.n_classes;
    let attribute = match split {
        Split::Train => {
            if r.random::<f64>() < config.correlation {
                label
            } else {
                let k = r.random_range(0..config.n_attributes - 1);
                if k >= label {
                    k + 1
                } else {
                    k
                }
            }
        }
        _ => r.random_range(0..config.n_attributes),
    };
    let size = config.image_size;
    let mut img = Image::zeros(size, size, config.channels);
    let brightness = r.random_range(render::BRIGHTNESS_RANGE.0..render::BRIGHTNESS_RANGE.1);
    render::paint_background(&mut img, attribute, brightness, config.noise_std, &mut r, None);
    let side = render::random_side(size, &mut r);
    let r0 = r.random_range(0..=size - side);
    let c0 = r.random_range(0..=size - side);
    let bbox = [r0, c0, r0 + side, c0 + side];
    let level = r.random_range(render::SHAPE_LEVEL.0..render::SHAPE_LEVEL.1);
    render::paint_shape(
        &mut img,
        ShapeKind::for_class(label),
        bbox,
        level,
        config.noise_std,
        &mut r,
        None,
    );
    img.quantize();
    LabeledImage {
        id: format!("{}-{:06}", split.as_str(), index),
        pixels: Arc::new(img),
        label,
        group: Some(Group { label, attribute }),
        split,
        provenance: Provenance::Original,
        fg_box: Some(bbox),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::group_counts;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn small(correlation: f64) -> SynthConfig {
        SynthConfig {
            n_train: 200,
            n_val: 40,
            n_test: 40,
            image_size: 16,
            correlation,
            ..SynthConfig::default()
        }
    }

    fn chi2_uniform_pvalue(counts: &[usize]) -> f64 {
        let n: usize = counts.iter().sum();
        let expected = n as f64 / counts.len() as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
        1.0 - dist.cdf(stat)
    }

    #[test]
    fn full_correlation_is_diagonal() {
        let m = generate_synthetic(&small(1.0)).unwrap();
        for e in m.split(Split::Train) {
            assert_eq!(e.attribute(), Some(e.label));
        }
        let counts = group_counts(&m, Split::Train).unwrap();
        assert!(counts.keys().all(|g| g.label == g.attribute));
    }

    #[test]
    fn half_correlation_is_uniform_per_class() {
        let cfg = SynthConfig {
            n_train: 2000,
            n_val: 10,
            n_test: 10,
            image_size: 8,
            correlation: 0.5,
            ..SynthConfig::default()
        };
        let m = generate_synthetic(&cfg).unwrap();
        assert_eq!(m.split(Split::Train).count(), 2000);
        let counts = group_counts(&m, Split::Train).unwrap();
        for label in 0..2 {
            let row: Vec<usize> = (0..2)
                .map(|a| counts.get(&Group { label, attribute: a }).copied().unwrap_or(0))
                .collect();
            assert!(chi2_uniform_pvalue(&row) > 0.01, "class {label}: {row:?}");
        }
    }

    #[test]
    fn balanced_test_split_cells() {
        let cfg = SynthConfig {
            n_train: 10,
            n_val: 10,
            n_test: 400,
            image_size: 8,
            ..SynthConfig::default()
        };
        let m = generate_synthetic(&cfg).unwrap();
        let counts = group_counts(&m, Split::Test).unwrap();
        let cells: Vec<usize> = counts.values().copied().collect();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells.iter().sum::<usize>(), 400);
        assert!(chi2_uniform_pvalue(&cells) > 0.01, "{cells:?}");
    }

    #[test]
    fn correlation_within_three_sigma() {
        for rho in [0.6, 0.8, 0.95] {
            let cfg = SynthConfig {
                n_train: 1000,
                n_val: 4,
                n_test: 4,
                image_size: 8,
                correlation: rho,
                seed: 7,
                ..SynthConfig::default()
            };
            let m = generate_synthetic(&cfg).unwrap();
            let n = m.split(Split::Train).count() as f64;
            let hits = m
                .split(Split::Train)
                .filter(|e| e.attribute() == Some(e.label))
                .count() as f64;
            let sigma = (rho * (1.0 - rho) / n).sqrt();
            assert!((hits / n - rho).abs() <= 3.0 * sigma, "rho={rho}");
        }
    }

    #[test]
    fn generation_is_reproducible_and_ids_unique() {
        let a = generate_synthetic(&small(0.9)).unwrap();
        let b = generate_synthetic(&small(0.9)).unwrap();
        assert_eq!(a, b);
        let ids: std::collections::HashSet<_> = a.entries.iter().map(|e| &e.id).collect();
        assert_eq!(ids.len(), a.entries.len());
        let c = generate_synthetic(&SynthConfig {
            seed: 1,
            ..small(0.9)
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            SynthConfig {
                correlation: 1.5,
                ..SynthConfig::default()
            },
            SynthConfig {
                n_attributes: 3,
                ..SynthConfig::default()
            },
            SynthConfig {
                n_test: 0,
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        }
    }
}

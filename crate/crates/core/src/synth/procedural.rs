//! Local inpainting backend for images of the synthetic generator.
//!
//! Inpaint keeps every mask = 1 pixel, continues the background texture
//! estimated from the kept pixels into the mask = 0 region, and draws the
//! target class's shape inside a fully regenerable square. Img2img ignores the
//! mask and re-renders the whole frame; its background follows the prompt's
//! class stereotype with probability `prompt_prior`, else the source's.

use std::sync::Arc;

use rand::Rng as _;

use super::{Backend, GenMode, GenerationOutcome, GenerationRequest};
use crate::dataset::render::{self, ShapeKind};
use crate::dataset::{DatasetManifest, Group, LabeledImage, Provenance, Split};
use crate::error::{Error, Result};
use crate::image::{quantize_value, Image};
use crate::rng;

/// Smallest shape side the backend will draw.
pub const MIN_SHAPE_SIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralBackend {
    pub n_attributes: usize,
    pub noise_std: f64,
    /// Probability that a context-free render uses the target class's
    /// stereotypical attribute.
    pub prompt_prior: f64,
}

impl ProceduralBackend {
    pub fn for_manifest(manifest: &DatasetManifest) -> Self {
        Self {
            n_attributes: manifest.attribute_names.len().max(1),
            noise_std: 0.05,
            prompt_prior: 0.9,
        }
    }
}

impl Backend for ProceduralBackend {
    fn name(&self) -> &str {
        "procedural"
    }

    fn generate(&self, request: &GenerationRequest, source: &LabeledImage) -> Result<GenerationOutcome> {
        Ok(GenerationOutcome {
            image: procedural_inpaint(request, source, self)?,
            retries: 0,
            warnings: Vec::new(),
        })
    }
}

/// Top-left corners of every all-`true` `side`×`side` square of `free`, and
/// the largest side available.
fn free_squares(free: &[bool], h: usize, w: usize, side: usize) -> (Vec<(usize, usize)>, usize) {
    let mut dp = vec![0usize; h * w];
    let mut largest = 0;
    let mut corners = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !free[r * w + c] {
                continue;
            }
            let v = if r == 0 || c == 0 {
                1
            } else {
                1 + dp[(r - 1) * w + c].min(dp[r * w + c - 1]).min(dp[(r - 1) * w + c - 1])
            };
            dp[r * w + c] = v;
            largest = largest.max(v);
            if v >= side {
                corners.push((r + 1 - side, c + 1 - side));
            }
        }
    }
    (corners, largest)
}

fn stereotype_or(prior: f64, target: usize, fallback: usize, n_attr: usize, r: &mut rng::Rng) -> usize {
    if r.random::<f64>() < prior {
        target % n_attr
    } else {
        fallback
    }
}

/// One synthesized training image for `request`; deterministic in its seed.
pub fn procedural_inpaint(
    request: &GenerationRequest,
    source: &LabeledImage,
    backend: &ProceduralBackend,
) -> Result<LabeledImage> {
    let src = source.pixels.as_ref();
    let (h, w) = (src.height, src.width);
    if request.mask.height != h || request.mask.width != w {
        return Err(Error::Input(format!(
            "{}: mask {}×{} does not match source {}×{}",
            request.request_id, request.mask.height, request.mask.width, h, w
        )));
    }
    if request.target_label != source.label {
        return Err(Error::Input(format!(
            "{}: target label {} differs from source label {}",
            request.request_id, request.target_label, source.label
        )));
    }
    let mut r = rng::from_seed(request.seed);
    let n_attr = backend.n_attributes;
    let all: Vec<bool> = vec![true; h * w];
    let (keep, attr, brightness) = match request.mode {
        GenMode::Inpaint => {
            let keep = request.mask.bits.clone();
            match render::estimate_background(src, n_attr, &keep) {
                Some((a, b)) => (keep, a, b),
                None => {
                    let fallback = r.random_range(0..n_attr);
                    let a = stereotype_or(backend.prompt_prior, request.target_label, fallback, n_attr, &mut r);
                    let b = r.random_range(render::BRIGHTNESS_RANGE.0..render::BRIGHTNESS_RANGE.1);
                    (keep, a, b)
                }
            }
        }
        GenMode::Img2Img => {
            let (src_attr, _) = render::estimate_background(src, n_attr, &all).expect("non-empty image");
            let a = stereotype_or(backend.prompt_prior, request.target_label, src_attr, n_attr, &mut r);
            let b = r.random_range(render::BRIGHTNESS_RANGE.0..render::BRIGHTNESS_RANGE.1);
            (vec![false; h * w], a, b)
        }
    };
    let free: Vec<bool> = keep.iter().map(|k| !k).collect();

    let mut img = src.clone();
    let box_out = if free.iter().any(|&f| f) {
        let wanted = render::random_side(h.min(w), &mut r);
        let (_, largest) = free_squares(&free, h, w, 1);
        let side = wanted.min(largest);
        if side < MIN_SHAPE_SIDE {
            return Err(Error::Generation(format!(
                "{}: largest regenerable square is {largest}×{largest}, below {MIN_SHAPE_SIDE}×{MIN_SHAPE_SIDE}",
                request.request_id
            )));
        }
        if side < wanted {
            log::debug!("{}: shape reduced from {wanted} to {side}", request.request_id);
        }
        let (corners, _) = free_squares(&free, h, w, side);
        let (r0, c0) = corners[r.random_range(0..corners.len())];
        let bbox = [r0, c0, r0 + side, c0 + side];
        render::paint_background(&mut img, attr, brightness, backend.noise_std, &mut r, Some(&free));
        let level = r.random_range(render::SHAPE_LEVEL.0..render::SHAPE_LEVEL.1);
        render::paint_shape(
            &mut img,
            ShapeKind::for_class(request.target_label),
            bbox,
            level,
            backend.noise_std,
            &mut r,
            Some(&free),
        );
        for (i, f) in free.iter().enumerate() {
            if *f {
                for ch in 0..img.channels {
                    let k = i * img.channels + ch;
                    img.data[k] = quantize_value(img.data[k]);
                }
            }
        }
        Some(bbox)
    } else {
        source.fg_box
    };
    let group = if free.iter().any(|&f| f) {
        Some(Group {
            label: request.target_label,
            attribute: attr,
        })
    } else {
        source.group
    };
    Ok(LabeledImage {
        id: request.request_id.clone(),
        pixels: Arc::new(img),
        label: request.target_label,
        group,
        split: Split::Train,
        provenance: Provenance::Synthesized,
        fg_box: box_out,
    })
}

/// Mean absolute difference between `a` and `b` over pixels where `select` holds.
pub fn masked_mean_abs_diff(a: &Image, b: &Image, select: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &s) in select.iter().enumerate() {
        if s {
            for ch in 0..a.channels {
                sum += (a.data[i * a.channels + ch] - b.data[i * b.channels + ch]).abs();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cam::Mask;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn data() -> DatasetManifest {
        generate_synthetic(&SynthConfig {
            n_train: 40,
            n_val: 2,
            n_test: 2,
            image_size: 24,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn request(src: &LabeledImage, mask: Mask, seed: u64, mode: GenMode) -> GenerationRequest {
        GenerationRequest {
            request_id: format!("gen-{seed}"),
            source_image_id: src.id.clone(),
            mask,
            target_label: src.label,
            prompt: "x".into(),
            seed,
            mode,
        }
    }

    #[test]
    fn full_mask_copies_source() {
        let m = data();
        let b = ProceduralBackend::for_manifest(&m);
        let src = &m.entries[3];
        let out = procedural_inpaint(&request(src, Mask::full(24, 24, true), 1, GenMode::Inpaint), src, &b).unwrap();
        assert_eq!(out.pixels, src.pixels);
        assert_eq!(out.provenance, Provenance::Synthesized);
    }

    #[test]
    fn empty_mask_regenerates_with_target_shape() {
        let m = data();
        let b = ProceduralBackend::for_manifest(&m);
        let src = &m.entries[5];
        let out = procedural_inpaint(&request(src, Mask::full(24, 24, false), 2, GenMode::Inpaint), src, &b).unwrap();
        assert_ne!(out.pixels, src.pixels);
        let [r0, c0, r1, _] = out.fg_box.unwrap();
        let side = r1 - r0;
        let kind = ShapeKind::for_class(src.label);
        let shape_px = (0..side * side).filter(|&i| kind.covers(i / side, i % side, side));
        for i in shape_px {
            let v = out.pixels.get(r0 + i / side, c0 + i % side, 0);
            assert!(v > 0.6, "shape pixel {v}");
        }
    }

    #[test]
    fn tiny_mutable_region_fails() {
        let m = data();
        let b = ProceduralBackend::for_manifest(&m);
        let src = &m.entries[0];
        let mut mask = Mask::full(24, 24, true);
        for r in 0..3 {
            for c in 0..3 {
                mask.bits[r * 24 + c] = false;
            }
        }
        assert!(matches!(
            procedural_inpaint(&request(src, mask, 3, GenMode::Inpaint), src, &b),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn shape_shrinks_to_fit() {
        let m = data();
        let b = ProceduralBackend::for_manifest(&m);
        let src = &m.entries[0];
        let mut mask = Mask::full(24, 24, true);
        for r in 10..16 {
            for c in 2..20 {
                mask.bits[r * 24 + c] = false;
            }
        }
        let out = procedural_inpaint(&request(src, mask, 4, GenMode::Inpaint), src, &b).unwrap();
        let [r0, c0, r1, c1] = out.fg_box.unwrap();
        assert_eq!((r1 - r0, c1 - c0), (6, 6));
        assert!(r0 >= 10 && r1 <= 16);
    }

    #[test]
    fn img2img_ignores_mask() {
        let m = data();
        let b = ProceduralBackend::for_manifest(&m);
        let src = &m.entries[1];
        let a = procedural_inpaint(&request(src, Mask::full(24, 24, true), 5, GenMode::Img2Img), src, &b).unwrap();
        assert_ne!(a.pixels, src.pixels);
        assert_eq!(a.label, src.label);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn preserved_pixels_are_exact(seed in 0u64..10_000, density in 0.0f64..0.9, idx in 0usize..40) {
            let m = data();
            let b = ProceduralBackend::for_manifest(&m);
            let src = &m.entries[idx];
            let mut r = rng::from_seed(seed);
            let mut mask = Mask::full(24, 24, false);
            // a kept band plus random speckle, leaving room for a shape
            for (i, bit) in mask.bits.iter_mut().enumerate() {
                *bit = i % 24 < 8 && r.random::<f64>() < density.max(0.5) || r.random::<f64>() < density * 0.1;
            }
            let out = procedural_inpaint(&request(src, mask.clone(), seed, GenMode::Inpaint), src, &b).unwrap();
            let kept = masked_mean_abs_diff(&out.pixels, &src.pixels, &mask.bits);
            if let Some(d) = kept {
                proptest::prop_assert_eq!(d, 0.0);
            }
            let changed: Vec<bool> = mask.bits.iter().map(|k| !k).collect();
            proptest::prop_assert!(masked_mean_abs_diff(&out.pixels, &src.pixels, &changed).unwrap() > 0.0);
        }
    }
}

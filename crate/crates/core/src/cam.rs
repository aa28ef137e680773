//! Grad-CAM and Grad-CAM++ maps over the last conv layer, preserve-masks
//! thresholded from them, overlays, and a foreground-attention score.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Classifier, ConvProbe};

pub const DEFAULT_TAU: f64 = 0.6;
pub const MAX_PRESERVE_FRACTION: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamMethod {
    GradCam,
    GradCamPp,
}

impl CamMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPp => "gradcampp",
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CamMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcam" => Ok(CamMethod::GradCam),
            "gradcampp" => Ok(CamMethod::GradCamPp),
            other => Err(Error::Config(format!("unknown CAM method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

/// Per-cell coefficients applied to the gradient when forming channel weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alpha {
    /// Closed-form Grad-CAM++ coefficients over rectified gradients.
    ClosedForm,
    /// `1/(h·w)` everywhere over the raw gradient, which is Grad-CAM.
    Uniform,
}

/// Grad-CAM++ coefficients for the exponential score, channel-major like the
/// probe: `α = g² / (2g² + ΣA·g³)`, and 0 where the denominator is 0.
pub fn gradcampp_alpha(probe: &ConvProbe) -> Vec<f64> {
    let cells = probe.cells();
    let mut alpha = vec![0.0; probe.activations.len()];
    for k in 0..probe.channels {
        let a_sum: f64 = probe.channel(k).iter().sum();
        for (i, &g) in probe.gradient(k).iter().enumerate() {
            let g2 = g * g;
            let denom = 2.0 * g2 + a_sum * g2 * g;
            alpha[k * cells + i] = if denom != 0.0 { g2 / denom } else { 0.0 };
        }
    }
    alpha
}

/// Channel weights `w_k = Σ_ij α_ij · g'_ij`.
pub fn channel_weights(probe: &ConvProbe, alpha: Alpha) -> Vec<f64> {
    let cells = probe.cells();
    match alpha {
        Alpha::Uniform => {
            let a = 1.0 / cells as f64;
            (0..probe.channels)
                .map(|k| probe.gradient(k).iter().map(|g| a * g).sum())
                .collect()
        }
        Alpha::ClosedForm => {
            let alpha = gradcampp_alpha(probe);
            (0..probe.channels)
                .map(|k| {
                    probe
                        .gradient(k)
                        .iter()
                        .zip(&alpha[k * cells..(k + 1) * cells])
                        .map(|(g, a)| a * g.max(0.0))
                        .sum()
                })
                .collect()
        }
    }
}

/// `relu(Σ_k w_k A^k)` at last-conv resolution.
pub fn weighted_map(probe: &ConvProbe, weights: &[f64]) -> Vec<f64> {
    let cells = probe.cells();
    let mut out = vec![0.0; cells];
    for (k, w) in weights.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(probe.channel(k)) {
            *o += w * a;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub fn raw_map(probe: &ConvProbe, method: CamMethod) -> Vec<f64> {
    let alpha = match method {
        CamMethod::GradCam => Alpha::Uniform,
        CamMethod::GradCamPp => Alpha::ClosedForm,
    };
    weighted_map(probe, &channel_weights(probe, alpha))
}

/// Resamples an `h×w` field to `out_h×out_w` with half-pixel-centred sampling.
pub fn upsample(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, mode: Upsample) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for r in 0..out_h {
        for c in 0..out_w {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            match mode {
                Upsample::Nearest => {
                    let yi = (((r as f64 + 0.5) * sy) as usize).min(h - 1);
                    let xi = (((c as f64 + 0.5) * sx) as usize).min(w - 1);
                    out.push(values[yi * w + xi]);
                }
                Upsample::Bilinear => {
                    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                    let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
                    let bot = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

/// Min-max normalization to `[0, 1]`; an all-zero field stays zero and a
/// constant positive field becomes all ones.
pub fn normalize(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) {
        values.fill(0.0);
    } else if max == min {
        values.fill(1.0);
    } else {
        let span = max - min;
        values.iter_mut().for_each(|v| *v = ((*v - min) / span).clamp(0.0, 1.0));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub image_id: String,
    /// Class whose score is explained.
    pub target_class: usize,
    pub method: CamMethod,
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
}

/// Map for `class` on `image`, upsampled to the image size and normalized.
pub fn activation_map(
    model: &Classifier,
    image: &Image,
    class: usize,
    method: CamMethod,
    mode: Upsample,
) -> Result<ActivationMap> {
    let probe = model.probe(image, class)?;
    let raw = raw_map(&probe, method);
    let mut values = upsample(&raw, probe.height, probe.width, image.height, image.width, mode);
    normalize(&mut values);
    Ok(ActivationMap {
        image_id: String::new(),
        target_class: class,
        method,
        height: image.height,
        width: image.width,
        values,
    })
}

pub fn grad_cam(model: &Classifier, image: &Image, class: usize) -> Result<ActivationMap> {
    activation_map(model, image, class, CamMethod::GradCam, Upsample::Bilinear)
}

pub fn grad_cam_pp(model: &Classifier, image: &Image, class: usize) -> Result<ActivationMap> {
    activation_map(model, image, class, CamMethod::GradCamPp, Upsample::Bilinear)
}

/// Binary preserve-mask; `true` keeps the source pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub threshold: f64,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn full(height: usize, width: usize, keep: bool) -> Self {
        Self {
            image_id: String::new(),
            height,
            width,
            threshold: if keep { 0.0 } else { 1.0 },
            bits: vec![keep; height * width],
        }
    }

    pub fn preserve_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    /// 8-bit grayscale encoding: 255 keeps, 0 regenerates.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let values = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Image::from_vec(self.height, self.width, 1, values)?.to_png_bytes()
    }

    pub fn from_png_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let img = Image::from_png_bytes(bytes, origin)?;
        if img.channels != 1 {
            return Err(Error::Image {
                path: origin.to_string(),
                message: "mask PNG must be grayscale".into(),
            });
        }
        Ok(Self {
            image_id: String::new(),
            height: img.height,
            width: img.width,
            threshold: 0.5,
            bits: img.data.iter().map(|&v| v >= 0.5).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::fsio::write_atomic(path, &self.to_png_bytes()?)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_png_bytes(&crate::fsio::read(path)?, &path.display().to_string())
    }
}

fn level_set(map: &ActivationMap, tau: f64) -> Mask {
    Mask {
        image_id: map.image_id.clone(),
        height: map.height,
        width: map.width,
        threshold: tau,
        bits: map.values.iter().map(|&v| v >= tau).collect(),
    }
}

/// `bits = values ≥ τ` for `τ ∈ (0, 1]`.
pub fn threshold_mask(map: &ActivationMap, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Input(format!("threshold {tau} outside (0, 1]")));
    }
    Ok(level_set(map, tau))
}

/// Thresholds at `tau`, raising the threshold by bisection on `[τ, 1]` when
/// more than `cap` of the pixels would be preserved. If even `τ = 1` keeps too
/// much, the threshold moves just above 1 and the mask is empty.
pub fn capped_mask(map: &ActivationMap, tau: f64, cap: f64) -> Result<Mask> {
    let mask = threshold_mask(map, tau)?;
    if mask.preserve_fraction() <= cap {
        return Ok(mask);
    }
    let at_one = level_set(map, 1.0);
    let out = if at_one.preserve_fraction() > cap {
        level_set(map, 1.0f64.next_up())
    } else {
        let (mut lo, mut hi) = (tau, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if level_set(map, mid).preserve_fraction() > cap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        level_set(map, hi)
    };
    log::debug!(
        "{}: preserve fraction {:.3} > {cap}; threshold raised {tau} → {}",
        map.image_id,
        mask.preserve_fraction(),
        out.threshold
    );
    Ok(out)
}

/// Jet colormap of a value in `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let f = |x: f64| (1.5 - x.abs()).clamp(0.0, 1.0);
    [f(4.0 * v - 3.0), f(4.0 * v - 2.0), f(4.0 * v - 1.0)]
}

/// `0.5·image + 0.5·jet(map)` as an RGB image; gray inputs are replicated.
pub fn render_overlay(image: &Image, map: &ActivationMap) -> Result<Image> {
    if image.height != map.height || image.width != map.width {
        return Err(Error::Input(format!(
            "overlay of a {}×{} map on a {}×{} image",
            map.height, map.width, image.height, image.width
        )));
    }
    let mut out = Image::zeros(image.height, image.width, 3);
    for r in 0..image.height {
        for c in 0..image.width {
            let color = jet(map.values[r * image.width + c]);
            for (ch, col) in color.iter().enumerate() {
                let src = image.get(r, c, if image.channels == 1 { 0 } else { ch });
                out.set(r, c, ch, 0.5 * src + 0.5 * col);
            }
        }
    }
    Ok(out)
}

/// Share of the map's mass inside the half-open box `[r0, c0, r1, c1)`.
pub fn foreground_attention(map: &ActivationMap, fg_box: [usize; 4]) -> Result<f64> {
    let [r0, c0, r1, c1] = fg_box;
    if r0 >= r1 || c0 >= c1 || r1 > map.height || c1 > map.width {
        return Err(Error::Input(format!("degenerate foreground box {fg_box:?}")));
    }
    let total: f64 = map.values.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let mut inside = 0.0;
    for r in r0..r1 {
        inside += map.values[r * map.width + c0..r * map.width + c1].iter().sum::<f64>();
    }
    Ok(inside / total)
}

/// Writes a map as 8-bit grayscale.
pub fn save_map_png(path: &Path, map: &ActivationMap) -> Result<()> {
    crate::image::save_gray_png(path, map.height, map.width, &map.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::random_image;
    use crate::model::ArchSpec;

    fn model() -> Classifier {
        Classifier::new(ArchSpec::with_widths(16, 16, 3, 3, &[6, 5], &[2, 1], 3), 21).unwrap()
    }

    fn map_of(values: Vec<f64>, h: usize, w: usize) -> ActivationMap {
        ActivationMap {
            image_id: "m".into(),
            target_class: 0,
            method: CamMethod::GradCam,
            height: h,
            width: w,
            values,
        }
    }

    #[test]
    fn uniform_alpha_reduces_to_grad_cam() {
        let m = model();
        for s in 0..5 {
            let probe = m.probe(&random_image(16, 16, 3, s), 1).unwrap();
            let pp_uniform = weighted_map(&probe, &channel_weights(&probe, Alpha::Uniform));
            assert_eq!(pp_uniform, raw_map(&probe, CamMethod::GradCam));
        }
    }

    #[test]
    fn planted_channel_map() {
        let mut m = model();
        let k = m.feature_dim();
        let mut row = vec![0.0; k];
        row[0] = 0.7;
        m.head_weights_mut()[2 * k..3 * k].copy_from_slice(&row);
        let img = random_image(16, 16, 3, 3);
        let probe = m.probe(&img, 2).unwrap();
        let mut want = probe.channel(0).to_vec();
        let cam = raw_map(&probe, CamMethod::GradCam);
        let scale = 0.7 / probe.cells() as f64;
        want.iter_mut().for_each(|v| *v *= scale);
        for (a, b) in cam.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-15);
        }
        let mut up = upsample(&cam, probe.height, probe.width, 16, 16, Upsample::Bilinear);
        normalize(&mut up);
        assert_eq!(grad_cam(&m, &img, 2).unwrap().values, up);
    }

    #[test]
    fn negative_map_normalizes_to_zero() {
        let mut m = model();
        let k = m.feature_dim();
        m.head_weights_mut()[..k].fill(-1.0);
        let map = grad_cam(&m, &random_image(16, 16, 3, 4), 0).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        let mask = threshold_mask(&map, 0.6).unwrap();
        assert_eq!(mask.preserve_fraction(), 0.0);
    }

    #[test]
    fn logit_shift_leaves_map_unchanged() {
        let mut m = model();
        let img = random_image(16, 16, 3, 5);
        let before = grad_cam_pp(&m, &img, 1).unwrap();
        m.head_bias_mut().iter_mut().for_each(|b| *b += 3.5);
        assert_eq!(grad_cam_pp(&m, &img, 1).unwrap(), before);
        assert_eq!(grad_cam(&m, &img, 1).unwrap().values.len(), 256);
    }

    fn crafted_probe() -> ConvProbe {
        // Non-negative activations, spatially constant non-negative gradients,
        // and g_k·ΣA^k equal across channels so α is the same everywhere.
        let (h, w) = (3, 3);
        let a0: Vec<f64> = (0..9).map(|i| 0.1 * i as f64).collect();
        let a1: Vec<f64> = (0..9).map(|i| 0.4 * ((i * 5) % 9) as f64).collect();
        let s0: f64 = a0.iter().sum();
        let s1: f64 = a1.iter().sum();
        let g0 = 0.5;
        let g1 = g0 * s0 / s1;
        ConvProbe {
            channels: 2,
            height: h,
            width: w,
            activations: [a0, a1].concat(),
            score_gradient: [vec![g0; 9], vec![g1; 9]].concat(),
            class: 0,
            score: 0.0,
        }
    }

    #[test]
    fn closed_form_fixture_matches_grad_cam_after_normalization() {
        let p = crafted_probe();
        let alpha = gradcampp_alpha(&p);
        assert!(alpha.iter().all(|a| (a - alpha[0]).abs() < 1e-15));
        let mut a = raw_map(&p, CamMethod::GradCamPp);
        let mut b = raw_map(&p, CamMethod::GradCam);
        normalize(&mut a);
        normalize(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_denominator_gives_zero_alpha() {
        let mut p = crafted_probe();
        p.score_gradient[..9].fill(0.0);
        let alpha = gradcampp_alpha(&p);
        assert!(alpha[..9].iter().all(|&a| a == 0.0));
        assert!(raw_map(&p, CamMethod::GradCamPp).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn threshold_examples() {
        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let map = map_of(checker.clone(), 4, 4);
        let mask = threshold_mask(&map, 0.5).unwrap();
        assert_eq!(mask.bits, checker.iter().map(|&v| v == 1.0).collect::<Vec<_>>());
        let graded = map_of((0..16).map(|i| i as f64 / 15.0).collect(), 4, 4);
        let top = threshold_mask(&graded, 1.0).unwrap();
        assert_eq!(top.bits.iter().filter(|&&b| b).count(), 1);
        assert!(top.bits[15]);
        assert!(threshold_mask(&graded, 0.0).is_err());
        assert!(threshold_mask(&graded, 1.5).is_err());
    }

    #[test]
    fn cap_raises_threshold() {
        let map = map_of((0..100).map(|i| 0.7 + 0.3 * i as f64 / 99.0).collect(), 10, 10);
        let mask = capped_mask(&map, 0.6, 0.9).unwrap();
        assert!(mask.preserve_fraction() <= 0.9);
        assert!(mask.preserve_fraction() >= 0.89);
        assert!(mask.threshold > 0.6);
        let flat = map_of(vec![1.0; 100], 10, 10);
        let empty = capped_mask(&flat, 0.6, 0.9).unwrap();
        assert_eq!(empty.preserve_fraction(), 0.0);
    }

    #[test]
    fn mask_png_round_trip() {
        let map = map_of((0..64).map(|i| ((i * 37) % 64) as f64 / 63.0).collect(), 8, 8);
        let mask = threshold_mask(&map, 0.6).unwrap();
        let back = Mask::from_png_bytes(&mask.to_png_bytes().unwrap(), "t").unwrap();
        assert_eq!(back.bits, mask.bits);
    }

    #[test]
    fn overlay_blend() {
        let img = random_image(6, 5, 3, 1);
        let zero = map_of(vec![0.0; 30], 6, 5);
        let out = render_overlay(&img, &zero).unwrap();
        let j = jet(0.0);
        for r in 0..6 {
            for c in 0..5 {
                for ch in 0..3 {
                    assert_eq!(out.get(r, c, ch), 0.5 * img.get(r, c, ch) + 0.5 * j[ch]);
                }
            }
        }
        assert_eq!(render_overlay(&img, &zero).unwrap(), out);
        assert!(render_overlay(&img, &map_of(vec![0.0; 36], 6, 6)).is_err());
    }

    #[test]
    fn foreground_attention_examples() {
        let mut v = vec![0.0; 100];
        v[33] = 1.0;
        v[44] = 0.5;
        let map = map_of(v, 10, 10);
        assert_eq!(foreground_attention(&map, [2, 2, 6, 6]).unwrap(), 1.0);
        let uniform = map_of(vec![0.3; 100], 10, 10);
        assert!((foreground_attention(&uniform, [0, 0, 5, 4]).unwrap() - 0.2).abs() < 1e-12);
        assert!(foreground_attention(&uniform, [3, 3, 3, 5]).is_err());
        assert_eq!(foreground_attention(&map_of(vec![0.0; 100], 10, 10), [0, 0, 2, 2]).unwrap(), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn mask_is_level_set_and_monotone(values in proptest::collection::vec(0.0f64..1.0, 64)) {
            let mut values = values;
            normalize(&mut values);
            let map = map_of(values, 8, 8);
            let mut prev = f64::INFINITY;
            for t in 1..=9 {
                let tau = t as f64 / 10.0;
                let m = threshold_mask(&map, tau).unwrap();
                for (b, v) in m.bits.iter().zip(&map.values) {
                    proptest::prop_assert_eq!(*b, *v >= tau);
                }
                proptest::prop_assert!(m.preserve_fraction() <= prev);
                prev = m.preserve_fraction();
            }
            proptest::prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn upsample_stays_in_range(values in proptest::collection::vec(0.0f64..1.0, 16), out in 4usize..20) {
            let up = upsample(&values, 4, 4, out, out, Upsample::Bilinear);
            let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            proptest::prop_assert!(up.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}

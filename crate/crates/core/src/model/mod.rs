//! A plain convolutional classifier: conv → ReLU blocks, global average pool,
//! linear head. Gradients are computed by hand-written backpropagation.

pub mod checkpoint;
pub(crate) mod conv;

use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use conv::{col2im, gemm, im2col, ConvGeom};

pub use checkpoint::{load_checkpoint, save_checkpoint};

/// Subtracted from every input intensity before the first conv.
pub const INPUT_CENTER: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub n_classes: usize,
    pub convs: Vec<ConvSpec>,
}

impl ArchSpec {
    /// Three 3×3 blocks of width 8/16/32; the first two halve the resolution.
    pub fn small(height: usize, width: usize, channels: usize, n_classes: usize) -> Self {
        Self::with_widths(height, width, channels, n_classes, &[8, 16, 32], &[2, 2, 1], 3)
    }

    pub fn with_widths(
        height: usize,
        width: usize,
        channels: usize,
        n_classes: usize,
        widths: &[usize],
        strides: &[usize],
        kernel: usize,
    ) -> Self {
        let convs = widths
            .iter()
            .zip(strides.iter().chain(std::iter::repeat(&1)))
            .map(|(&w, &s)| ConvSpec::new(w, kernel, s))
            .collect();
        Self {
            input_height: height,
            input_width: width,
            input_channels: channels,
            n_classes,
            convs,
        }
    }

    /// Per-layer geometry; fails when a layer's output would be empty.
    pub fn geometry(&self) -> Result<Vec<ConvGeom>> {
        if self.convs.is_empty() {
            return Err(Error::Arch("at least one conv block is required".into()));
        }
        if self.n_classes == 0 || self.input_channels == 0 {
            return Err(Error::Arch("n_classes and input_channels must be positive".into()));
        }
        let (mut c, mut h, mut w) = (self.input_channels, self.input_height, self.input_width);
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, spec) in self.convs.iter().enumerate() {
            if spec.kernel == 0 || spec.stride == 0 || spec.out_channels == 0 {
                return Err(Error::Arch(format!("block {i}: zero kernel, stride or width")));
            }
            let span_h = h + 2 * spec.padding;
            let span_w = w + 2 * spec.padding;
            if span_h < spec.kernel || span_w < spec.kernel {
                return Err(Error::Arch(format!(
                    "block {i}: {h}×{w} input collapses below 1×1 with kernel {} stride {}",
                    spec.kernel, spec.stride
                )));
            }
            let oh = (span_h - spec.kernel) / spec.stride + 1;
            let ow = (span_w - spec.kernel) / spec.stride + 1;
            out.push(ConvGeom {
                in_c: c,
                in_h: h,
                in_w: w,
                out_c: spec.out_channels,
                out_h: oh,
                out_w: ow,
                kernel: spec.kernel,
                stride: spec.stride,
                padding: spec.padding,
            });
            c = spec.out_channels;
            h = oh;
            w = ow;
        }
        Ok(out)
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels)
    }

    pub fn param_count(&self) -> Result<usize> {
        let geoms = self.geometry()?;
        let conv: usize = geoms.iter().map(|g| g.weight_len() + g.out_c).sum();
        Ok(conv + self.n_classes * self.feature_dim() + self.n_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub seed: u64,
    /// Free-form description of how the parameters were produced.
    pub provenance: String,
}

#[derive(Clone, Copy, Debug)]
struct LayerOffsets {
    weight: usize,
    bias: usize,
}

/// Classifier parameters θ stored as one flat vector.
#[derive(Clone, Debug)]
pub struct Classifier {
    arch: ArchSpec,
    geoms: Vec<ConvGeom>,
    offsets: Vec<LayerOffsets>,
    head: LayerOffsets,
    params: Vec<f64>,
    pub meta: ClassifierMeta,
}

impl PartialEq for Classifier {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

/// Penultimate (post-pool) activations of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub values: Vec<f64>,
}

/// Last-conv activations and the exact gradient of one class score w.r.t. them.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvProbe {
    /// Channels of the last conv layer.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Post-ReLU activations, channel-major.
    pub activations: Vec<f64>,
    /// ∂S^c/∂A, same layout as `activations`.
    pub score_gradient: Vec<f64>,
    pub class: usize,
    /// Pre-softmax logit of `class`.
    pub score: f64,
}

impl ConvProbe {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        &self.activations[k * self.cells()..(k + 1) * self.cells()]
    }

    pub fn gradient(&self, k: usize) -> &[f64] {
        &self.score_gradient[k * self.cells()..(k + 1) * self.cells()]
    }
}

/// Intermediate values kept for backpropagation.
pub struct ForwardCache {
    cols: Vec<Vec<f64>>,
    /// Post-ReLU output of every conv block.
    post: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn last_activations(&self) -> &[f64] {
        self.post.last().expect("at least one block")
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Classifier {
    /// He-initialised conv weights, scaled-normal head, zero biases.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        model.meta.seed = seed;
        model.meta.provenance = "init".into();
        let mut r = rng::stream(seed, "init", 0);
        for (g, off) in model.geoms.iter().zip(&model.offsets) {
            let std = (2.0 / g.patch_len() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut model.params[off.weight..off.weight + g.weight_len()] {
                *v = r.sample(normal);
            }
        }
        let k = model.arch.feature_dim();
        let normal = Normal::new(0.0, (1.0 / k as f64).sqrt()).expect("finite std");
        let n = model.arch.n_classes * k;
        for v in &mut model.params[model.head.weight..model.head.weight + n] {
            *v = r.sample(normal);
        }
        Ok(model)
    }

    /// Every parameter zero.
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        let geoms = arch.geometry()?;
        let mut offsets = Vec::with_capacity(geoms.len());
        let mut cursor = 0;
        for g in &geoms {
            offsets.push(LayerOffsets {
                weight: cursor,
                bias: cursor + g.weight_len(),
            });
            cursor += g.weight_len() + g.out_c;
        }
        let k = arch.feature_dim();
        let head = LayerOffsets {
            weight: cursor,
            bias: cursor + arch.n_classes * k,
        };
        cursor += arch.n_classes * k + arch.n_classes;
        Ok(Self {
            arch,
            geoms,
            offsets,
            head,
            params: vec![0.0; cursor],
            meta: ClassifierMeta {
                seed: 0,
                provenance: "zeros".into(),
            },
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Head weight row of class `c` (length = feature dim).
    pub fn head_weights(&self, c: usize) -> &[f64] {
        let k = self.feature_dim();
        &self.params[self.head.weight + c * k..self.head.weight + (c + 1) * k]
    }

    pub fn head_weights_mut(&mut self) -> &mut [f64] {
        let n = self.n_classes() * self.feature_dim();
        &mut self.params[self.head.weight..self.head.weight + n]
    }

    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        let n = self.n_classes();
        &mut self.params[self.head.bias..self.head.bias + n]
    }

    /// Shape of the last conv layer output (channels, height, width).
    pub fn last_conv_shape(&self) -> (usize, usize, usize) {
        let g = self.geoms.last().expect("validated");
        (g.out_c, g.out_h, g.out_w)
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.height != self.arch.input_height
            || image.width != self.arch.input_width
            || image.channels != self.arch.input_channels
        {
            return Err(Error::Input(format!(
                "image is {}×{}×{}, classifier expects {}×{}×{}",
                image.height,
                image.width,
                image.channels,
                self.arch.input_height,
                self.arch.input_width,
                self.arch.input_channels
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, image: &Image) -> Result<ForwardCache> {
        self.check_input(image)?;
        let mut x: Vec<f64> = image.to_chw().into_iter().map(|v| v - INPUT_CENTER).collect();
        let mut cols_all = Vec::with_capacity(self.geoms.len());
        let mut post_all = Vec::with_capacity(self.geoms.len());
        for (g, off) in self.geoms.iter().zip(&self.offsets) {
            let p = g.out_pixels();
            let mut cols = vec![0.0; g.patch_len() * p];
            im2col(g, &x, &mut cols);
            let mut z = vec![0.0; g.out_c * p];
            for oc in 0..g.out_c {
                z[oc * p..(oc + 1) * p].fill(self.params[off.bias + oc]);
            }
            gemm(
                g.out_c,
                g.patch_len(),
                p,
                &self.params[off.weight..off.weight + g.weight_len()],
                false,
                &cols,
                false,
                1.0,
                &mut z,
            );
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            cols_all.push(cols);
            x = z.clone();
            post_all.push(z);
        }
        let (k, h, w) = self.last_conv_shape();
        let a = post_all.last().expect("validated");
        let cells = (h * w) as f64;
        let pooled: Vec<f64> = (0..k)
            .map(|ch| a[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / cells)
            .collect();
        let logits = self.head_logits(&pooled);
        Ok(ForwardCache {
            cols: cols_all,
            post: post_all,
            pooled,
            logits,
        })
    }

    fn head_logits(&self, pooled: &[f64]) -> Vec<f64> {
        let k = pooled.len();
        (0..self.n_classes())
            .map(|c| {
                let w = &self.params[self.head.weight + c * k..self.head.weight + (c + 1) * k];
                self.params[self.head.bias + c]
                    + w.iter().zip(pooled).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Logit of class `c` as a function of last-conv activations `a`.
    pub fn score_from_activations(&self, a: &[f64], c: usize) -> f64 {
        let (k, h, w) = self.last_conv_shape();
        let cells = (h * w) as f64;
        let pooled: Vec<f64> = (0..k)
            .map(|ch| a[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / cells)
            .collect();
        self.head_logits(&pooled)[c]
    }

    pub fn forward(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_cached(image)?.logits)
    }

    pub fn forward_batch(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| self.forward(im)).collect()
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.forward(image)?))
    }

    /// Post-pool penultimate vector; its length is the last conv width.
    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_cached(image)?.pooled)
    }

    pub fn probe(&self, image: &Image, class: usize) -> Result<ConvProbe> {
        if class >= self.n_classes() {
            return Err(Error::Input(format!(
                "class {class} out of range for {} classes",
                self.n_classes()
            )));
        }
        let cache = self.forward_cached(image)?;
        let (k, h, w) = self.last_conv_shape();
        let cells = (h * w) as f64;
        let head_row = self.head_weights(class);
        let mut grad = vec![0.0; k * h * w];
        for ch in 0..k {
            grad[ch * h * w..(ch + 1) * h * w].fill(head_row[ch] / cells);
        }
        Ok(ConvProbe {
            channels: k,
            height: h,
            width: w,
            activations: cache.last_activations().to_vec(),
            score_gradient: grad,
            class,
            score: cache.logits[class],
        })
    }

    /// Accumulates ∂(Σ_c dlogits_c · logit_c)/∂θ into `grad`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let (k, h, w) = self.last_conv_shape();
        let cells = (h * w) as f64;
        let mut dpooled = vec![0.0; k];
        for (c, &dl) in dlogits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            grad[self.head.bias + c] += dl;
            let wrow = self.head.weight + c * k;
            for ch in 0..k {
                grad[wrow + ch] += dl * cache.pooled[ch];
                dpooled[ch] += dl * self.params[wrow + ch];
            }
        }
        let mut dout = vec![0.0; k * h * w];
        for ch in 0..k {
            dout[ch * h * w..(ch + 1) * h * w].fill(dpooled[ch] / cells);
        }
        for layer in (0..self.geoms.len()).rev() {
            let g = &self.geoms[layer];
            let off = self.offsets[layer];
            let p = g.out_pixels();
            let post = &cache.post[layer];
            for (d, &a) in dout.iter_mut().zip(post) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            for oc in 0..g.out_c {
                grad[off.bias + oc] += dout[oc * p..(oc + 1) * p].iter().sum::<f64>();
            }
            gemm(
                g.out_c,
                p,
                g.patch_len(),
                &dout,
                false,
                &cache.cols[layer],
                true,
                1.0,
                &mut grad[off.weight..off.weight + g.weight_len()],
            );
            if layer == 0 {
                break;
            }
            let mut dcols = vec![0.0; g.patch_len() * p];
            gemm(
                g.patch_len(),
                g.out_c,
                p,
                &self.params[off.weight..off.weight + g.weight_len()],
                true,
                &dout,
                false,
                0.0,
                &mut dcols,
            );
            let mut dx = vec![0.0; g.in_c * g.in_h * g.in_w];
            col2im(g, &dcols, &mut dx);
            dout = dx;
        }
    }

    /// Cross-entropy of one example scaled by `weight`; its gradient is
    /// accumulated into `grad` with the same scale.
    pub fn loss_and_grad(
        &self,
        image: &Image,
        label: usize,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let cache = self.forward_cached(image)?;
        let probs = softmax(&cache.logits);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let mut dlogits: Vec<f64> = probs.iter().map(|p| p * weight).collect();
        dlogits[label] -= weight;
        self.backward(&cache, &dlogits, grad);
        Ok(loss * weight)
    }

    /// Unweighted cross-entropy of one example.
    pub fn loss(&self, image: &Image, label: usize) -> Result<f64> {
        let logits = self.forward(image)?;
        let probs = softmax(&logits);
        Ok(-probs[label].max(f64::MIN_POSITIVE).ln())
    }

    /// ∂logit_c/∂θ.
    pub fn logit_param_grad(&self, image: &Image, class: usize) -> Result<Vec<f64>> {
        let cache = self.forward_cached(image)?;
        let mut dlogits = vec![0.0; self.n_classes()];
        dlogits[class] = 1.0;
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&cache, &dlogits, &mut grad);
        Ok(grad)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut r = rng::from_seed(seed);
        let data = (0..h * w * c).map(|_| r.random::<f64>()).collect();
        Image::from_vec(h, w, c, data).unwrap()
    }

    fn tiny_arch() -> ArchSpec {
        ArchSpec::with_widths(8, 8, 3, 3, &[4, 2], &[2, 1], 3)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    #[test]
    fn same_seed_same_parameters() {
        let arch = ArchSpec::small(32, 32, 3, 2);
        let a = Classifier::new(arch.clone(), 11).unwrap();
        let b = Classifier::new(arch.clone(), 11).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.params().len(), arch.param_count().unwrap());
        let c = Classifier::new(arch, 12).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn collapsing_spec_is_rejected() {
        let arch = ArchSpec {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            n_classes: 2,
            convs: vec![
                ConvSpec { out_channels: 4, kernel: 5, stride: 4, padding: 0 },
                ConvSpec { out_channels: 4, kernel: 5, stride: 4, padding: 0 },
                ConvSpec { out_channels: 4, kernel: 5, stride: 4, padding: 0 },
            ],
        };
        assert!(matches!(Classifier::new(arch, 0), Err(Error::Arch(_))));
    }

    #[test]
    fn default_spec_on_64px_rgb() {
        let model = Classifier::new(ArchSpec::small(64, 64, 3, 2), 1).unwrap();
        let logits = model.forward(&random_image(64, 64, 3, 2)).unwrap();
        assert_eq!(logits.len(), 2);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_image_through_zero_head_gives_equal_logits() {
        let mut model = Classifier::new(ArchSpec::small(16, 16, 3, 3), 1).unwrap();
        model.head_weights_mut().fill(0.0);
        model.head_bias_mut().fill(0.0);
        let logits = model.forward(&Image::zeros(16, 16, 3)).unwrap();
        assert!(logits.iter().all(|&v| v == logits[0]));
    }

    #[test]
    fn batch_of_one_matches_single() {
        let model = Classifier::new(tiny_arch(), 3).unwrap();
        let img = random_image(8, 8, 3, 4);
        assert_eq!(model.forward_batch(&[&img]).unwrap()[0], model.forward(&img).unwrap());
    }

    #[test]
    fn wrong_input_shape_is_input_error() {
        let model = Classifier::new(tiny_arch(), 3).unwrap();
        assert!(matches!(model.forward(&Image::zeros(9, 8, 3)), Err(Error::Input(_))));
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[2.0, -1.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn predict_matches_argmax_of_forward() {
        let model = Classifier::new(tiny_arch(), 5).unwrap();
        for s in 0..100 {
            let img = random_image(8, 8, 3, 100 + s);
            assert_eq!(model.predict(&img).unwrap(), argmax(&model.forward(&img).unwrap()));
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -3.0, 2.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn features_are_pure_and_sized_by_last_width() {
        let model = Classifier::new(ArchSpec::small(16, 16, 3, 2), 1).unwrap();
        let img = random_image(16, 16, 3, 9);
        let a = model.features(&img).unwrap();
        assert_eq!(a, model.features(&img).unwrap());
        assert_eq!(a.len(), 32);
    }

    #[test]
    fn activations_are_class_independent_and_null_for_centered_input() {
        let mut model = Classifier::new(tiny_arch(), 6).unwrap();
        let img = random_image(8, 8, 3, 7);
        let p0 = model.probe(&img, 0).unwrap();
        let p2 = model.probe(&img, 2).unwrap();
        assert_eq!(p0.activations, p2.activations);
        assert!(model.probe(&img, 3).is_err());

        for (i, off) in model.offsets.clone().iter().enumerate() {
            let n = model.geoms[i].out_c;
            model.params[off.bias..off.bias + n].fill(0.0);
        }
        // centering maps a uniform INPUT_CENTER image to an all-zero input
        let grey = Image::from_vec(8, 8, 3, vec![INPUT_CENTER; 8 * 8 * 3]).unwrap();
        let z = model.probe(&grey, 1).unwrap();
        assert!(z.activations.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let arch = ArchSpec::with_widths(8, 8, 3, 2, &[3, 2], &[2, 1], 3);
        let model = Classifier::new(arch, 8).unwrap();
        let img = random_image(8, 8, 3, 10);
        let probe = model.probe(&img, 1).unwrap();
        assert_eq!((probe.channels, probe.height, probe.width), (2, 4, 4));
        let h = 1e-3;
        for i in 0..probe.activations.len() {
            let mut a = probe.activations.clone();
            a[i] += h;
            let up = model.score_from_activations(&a, 1);
            a[i] -= 2.0 * h;
            let down = model.score_from_activations(&a, 1);
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, probe.score_gradient[i]) <= 1e-3, "cell {i}");
        }
        assert!((model.score_from_activations(&probe.activations, 1) - probe.score).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let model = Classifier::new(tiny_arch(), 21).unwrap();
        let img = random_image(8, 8, 3, 22);
        let mut grad = vec![0.0; model.params().len()];
        model.loss_and_grad(&img, 1, 1.0, &mut grad).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..grad.len() {
            let mut m = model.clone();
            m.params[i] += h;
            let up = m.loss(&img, 1).unwrap();
            m.params[i] -= 2.0 * h;
            let down = m.loss(&img, 1).unwrap();
            let fd = (up - down) / (2.0 * h);
            if fd.abs() + grad[i].abs() > 1e-7 {
                worst = worst.max(rel_err(fd, grad[i]));
            }
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn directional_derivative_of_logits() {
        let model = Classifier::new(tiny_arch(), 31).unwrap();
        let img = random_image(8, 8, 3, 32);
        let mut r = rng::from_seed(33);
        let dir: Vec<f64> = (0..model.params().len()).map(|_| r.random::<f64>() - 0.5).collect();
        let h = 1e-5;
        for c in 0..3 {
            let g = model.logit_param_grad(&img, c).unwrap();
            let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let mut up = model.clone();
            let mut down = model.clone();
            for ((u, d), v) in up.params.iter_mut().zip(down.params.iter_mut()).zip(&dir) {
                *u += h * v;
                *d -= h * v;
            }
            let fd = (up.forward(&img).unwrap()[c] - down.forward(&img).unwrap()[c]) / (2.0 * h);
            assert!(rel_err(fd, analytic) <= 1e-3, "class {c}: {fd} vs {analytic}");
        }
    }
}

//! Procedural textures and shapes shared by the synthetic generator and the
//! procedural inpainting backend.
//!
//! Attributes are full-frame periodic background textures; classes are compact
//! foreground shapes. A texture is a fixed function of pixel position, scaled
//! by a per-image brightness factor.

use rand::Rng as _;

use crate::image::Image;
use crate::rng::Rng;

const PALETTE: [[f64; 3]; 8] = [
    [0.20, 0.42, 0.78],
    [0.46, 0.60, 0.22],
    [0.74, 0.34, 0.24],
    [0.54, 0.38, 0.70],
    [0.78, 0.68, 0.28],
    [0.26, 0.64, 0.64],
    [0.58, 0.58, 0.58],
    [0.36, 0.30, 0.24],
];

/// Range of the per-image background brightness factor.
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.9, 1.1);

/// Noise-free texture value of attribute `attr` at a pixel (brightness 1).
pub fn texture_value(attr: usize, row: usize, col: usize, ch: usize, channels: usize) -> f64 {
    let color = PALETTE[attr % PALETTE.len()];
    let base = if channels == 1 {
        (color[0] + color[1] + color[2]) / 3.0
    } else {
        color[ch]
    };
    let period = 4 + 2 * (attr / 4) + (attr % 4);
    let (r, c) = (row as f64, col as f64);
    let phase = std::f64::consts::TAU / period as f64;
    let m = match attr % 4 {
        0 => 0.5 + 0.5 * (phase * r).sin(),
        1 => (((row / (period / 2).max(1)) + (col / (period / 2).max(1))) % 2) as f64,
        2 => 0.5 + 0.5 * (phase * c).sin(),
        _ => 0.5 + 0.5 * (phase * (r + c)).sin(),
    };
    base * (0.7 + 0.3 * m)
}

/// Foreground geometry; class `k` draws `ShapeKind::for_class(k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Plus,
    Ring,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub fn for_class(class: usize) -> Self {
        match class % 5 {
            0 => ShapeKind::Square,
            1 => ShapeKind::Cross,
            2 => ShapeKind::Ring,
            3 => ShapeKind::Triangle,
            _ => ShapeKind::Plus,
        }
    }

    /// Whether local coordinate (y, x) of a `side`×`side` box is foreground.
    pub fn covers(self, y: usize, x: usize, side: usize) -> bool {
        let s = side as f64;
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        match self {
            ShapeKind::Square => {
                let m = (side / 8).max(1);
                y >= m && x >= m && y < side - m && x < side - m
            }
            ShapeKind::Plus => {
                let t = (side as f64 / 3.0).round() as usize;
                let lo = (side - t) / 2;
                let hi = lo + t;
                (y >= lo && y < hi) || (x >= lo && x < hi)
            }
            ShapeKind::Ring => {
                let c = s / 2.0;
                let d = ((fy - c).powi(2) + (fx - c).powi(2)).sqrt();
                let thick = (s / 5.0).max(1.5);
                d <= c && d >= c - thick
            }
            ShapeKind::Triangle => {
                // apex at top centre, base on the bottom row
                let half = fy / s * (s / 2.0);
                (fx - s / 2.0).abs() <= half
            }
            ShapeKind::Cross => {
                let t = (s / 6.0).max(1.0);
                (fy - fx).abs() <= t || (fy + fx - s).abs() <= t
            }
        }
    }
}

/// Half-open pixel box `[row0, row1) × [col0, col1)`.
pub type BoxCoords = [usize; 4];

/// Paints the attribute texture wherever `writable` is true (everywhere when `None`).
pub fn paint_background(
    img: &mut Image,
    attr: usize,
    brightness: f64,
    noise_std: f64,
    rng: &mut Rng,
    writable: Option<&[bool]>,
) {
    let normal = rand_distr::Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    for r in 0..img.height {
        for c in 0..img.width {
            if let Some(w) = writable {
                if !w[r * img.width + c] {
                    continue;
                }
            }
            for ch in 0..img.channels {
                let mut v = texture_value(attr, r, c, ch, img.channels) * brightness;
                if noise_std > 0.0 {
                    v += rng.sample(normal);
                }
                img.set(r, c, ch, v.clamp(0.0, 1.0));
            }
        }
    }
}

/// Paints a shape in `bbox` with a flat gray level plus noise, skipping
/// pixels that are not writable.
pub fn paint_shape(
    img: &mut Image,
    kind: ShapeKind,
    bbox: BoxCoords,
    level: f64,
    noise_std: f64,
    rng: &mut Rng,
    writable: Option<&[bool]>,
) {
    let side = bbox[2] - bbox[0];
    let normal = rand_distr::Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    for y in 0..side {
        for x in 0..side {
            let (r, c) = (bbox[0] + y, bbox[1] + x);
            if r >= img.height || c >= img.width || !kind.covers(y, x, side) {
                continue;
            }
            if let Some(w) = writable {
                if !w[r * img.width + c] {
                    continue;
                }
            }
            for ch in 0..img.channels {
                let mut v = level;
                if noise_std > 0.0 {
                    v += rng.sample(normal);
                }
                img.set(r, c, ch, v.clamp(0.0, 1.0));
            }
        }
    }
}

/// Shape side range as a fraction of the image side.
pub const SHAPE_SCALE: (f64, f64) = (0.34, 0.5);
/// Gray level range of foreground shapes.
pub const SHAPE_LEVEL: (f64, f64) = (0.82, 1.0);

pub fn random_side(size: usize, rng: &mut Rng) -> usize {
    let lo = (SHAPE_SCALE.0 * size as f64).round() as usize;
    let hi = (SHAPE_SCALE.1 * size as f64).round() as usize;
    rng.random_range(lo.max(4)..=hi.max(lo.max(4)))
}

/// Best-matching attribute and brightness for the pixels flagged in `select`.
///
/// Returns `None` when nothing is selected.
pub fn estimate_background(
    img: &Image,
    n_attributes: usize,
    select: &[bool],
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for attr in 0..n_attributes {
        // least-squares brightness, then residual
        let (mut num, mut den, mut n) = (0.0, 0.0, 0usize);
        for r in 0..img.height {
            for c in 0..img.width {
                if !select[r * img.width + c] {
                    continue;
                }
                n += 1;
                for ch in 0..img.channels {
                    let t = texture_value(attr, r, c, ch, img.channels);
                    num += t * img.get(r, c, ch);
                    den += t * t;
                }
            }
        }
        if n == 0 {
            return None;
        }
        let b = if den > 0.0 {
            (num / den).clamp(BRIGHTNESS_RANGE.0, BRIGHTNESS_RANGE.1)
        } else {
            1.0
        };
        let mut sse = 0.0;
        for r in 0..img.height {
            for c in 0..img.width {
                if !select[r * img.width + c] {
                    continue;
                }
                for ch in 0..img.channels {
                    let d = img.get(r, c, ch) - b * texture_value(attr, r, c, ch, img.channels);
                    sse += d * d;
                }
            }
        }
        if best.map_or(true, |(_, _, s)| sse < s) {
            best = Some((attr, b, sse));
        }
    }
    best.map(|(a, b, _)| (a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn shapes_are_distinct() {
        let side = 12;
        let kinds = [
            ShapeKind::Square,
            ShapeKind::Plus,
            ShapeKind::Ring,
            ShapeKind::Triangle,
            ShapeKind::Cross,
        ];
        let masks: Vec<Vec<bool>> = kinds
            .iter()
            .map(|k| {
                (0..side * side)
                    .map(|i| k.covers(i / side, i % side, side))
                    .collect()
            })
            .collect();
        for i in 0..kinds.len() {
            assert!(masks[i].iter().any(|&b| b));
            for j in i + 1..kinds.len() {
                assert_ne!(masks[i], masks[j], "{:?} vs {:?}", kinds[i], kinds[j]);
            }
        }
    }

    #[test]
    fn background_estimate_recovers_attribute() {
        for attr in 0..4 {
            let mut img = Image::zeros(24, 24, 3);
            let mut r = rng::from_seed(attr as u64);
            paint_background(&mut img, attr, 1.05, 0.03, &mut r, None);
            let select = vec![true; 24 * 24];
            let (est, b) = estimate_background(&img, 4, &select).unwrap();
            assert_eq!(est, attr);
            assert!((b - 1.05).abs() < 0.03);
        }
    }
}

//! Handcrafted patch descriptors for a candidate box.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::log::Proposal;

pub const N_PATCH_FEATURES: usize = 10;
pub const PATCH_FEATURE_SCHEMA: &str = "patch-v1";

pub const PATCH_FEATURE_NAMES: [&str; N_PATCH_FEATURES] = [
    "inside_mean",
    "inside_std",
    "inside_max",
    "inside_min",
    "ring_contrast",
    "log_response",
    "gradient_mean",
    "aspect_ratio",
    "diameter_px",
    "entropy",
];

const ENTROPY_BINS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchFeatures(pub [f64; N_PATCH_FEATURES]);

impl PatchFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn pixel_range(c: f64, half: f64, n: usize) -> (usize, usize) {
    let lo = (c - half).ceil().max(0.0) as usize;
    let hi = ((c + half).floor()).min(n as f64 - 1.0).max(0.0) as usize;
    (lo, hi.max(lo))
}

pub fn extract_patch_features(img: &Array2<f64>, p: &Proposal) -> PatchFeatures {
    let (rows, cols) = img.dim();
    let b = &p.bbox;
    let (x0, x1) = pixel_range(b.cx, 0.5 * b.w, cols);
    let (y0, y1) = pixel_range(b.cy, 0.5 * b.h, rows);

    let mut inside = Vec::with_capacity((x1 - x0 + 1) * (y1 - y0 + 1));
    let mut grad_sum = 0.0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            inside.push(img[[y, x]]);
            let gx = img[[y, (x + 1).min(cols - 1)]] - img[[y, x.saturating_sub(1)]];
            let gy = img[[(y + 1).min(rows - 1), x]] - img[[y.saturating_sub(1), x]];
            grad_sum += 0.5 * gx.hypot(gy);
        }
    }
    let n = inside.len() as f64;
    let mean = inside.iter().sum::<f64>() / n;
    let std = (inside.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let max = inside.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = inside.iter().cloned().fold(f64::INFINITY, f64::min);

    // Annulus: the box doubled in size, minus the box itself.
    let (rx0, rx1) = pixel_range(b.cx, b.w, cols);
    let (ry0, ry1) = pixel_range(b.cy, b.h, rows);
    let (mut ring_sum, mut ring_n) = (0.0, 0usize);
    for y in ry0..=ry1 {
        for x in rx0..=rx1 {
            if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
                continue;
            }
            ring_sum += img[[y, x]];
            ring_n += 1;
        }
    }
    let ring_contrast = if ring_n > 0 { mean - ring_sum / ring_n as f64 } else { 0.0 };

    let entropy = if max > min {
        let mut hist = [0usize; ENTROPY_BINS];
        for v in &inside {
            let bin = (((v - min) / (max - min)) * ENTROPY_BINS as f64) as usize;
            hist[bin.min(ENTROPY_BINS - 1)] += 1;
        }
        hist.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let q = c as f64 / n;
                -q * q.log2()
            })
            .sum()
    } else {
        0.0
    };

    PatchFeatures([
        mean,
        std,
        max,
        min,
        ring_contrast,
        p.response,
        grad_sum / n,
        b.w / b.h,
        b.extent(),
        entropy,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box2D;

    fn prop(cx: f64, cy: f64, side: f64) -> Proposal {
        Proposal {
            bbox: Box2D::square(cx, cy, side).unwrap(),
            scale: side / 2.0,
            response: 12.5,
        }
    }

    #[test]
    fn flat_patch_degenerates_cleanly() {
        let img = Array2::from_elem((40, 40), 7.0);
        let f = extract_patch_features(&img, &prop(20.0, 20.0, 6.0)).0;
        assert_eq!(f[0], 7.0);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[4], 0.0);
        assert_eq!(f[5], 12.5);
        assert_eq!(f[6], 0.0);
        assert_eq!(f[7], 1.0);
        assert_eq!(f[8], 6.0);
        assert_eq!(f[9], 0.0);
    }

    #[test]
    fn bright_square_has_positive_contrast() {
        let mut img = Array2::zeros((40, 40));
        for y in 17..=23 {
            for x in 17..=23 {
                img[[y, x]] = 100.0;
            }
        }
        let f = extract_patch_features(&img, &prop(20.0, 20.0, 6.0)).0;
        assert_eq!(f[0], 100.0);
        assert!(f[4] > 50.0);
    }

    #[test]
    fn boxes_at_the_border_are_clipped() {
        let img = Array2::from_elem((20, 20), 1.0);
        let f = extract_patch_features(&img, &prop(0.0, 19.0, 10.0)).0;
        assert!(f.iter().all(|v| v.is_finite()));
    }
}

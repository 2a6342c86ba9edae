//! Scale-normalised Laplacian-of-Gaussian blob proposals.
//!
//! Each slice is mirrored to twice its size (half-sample symmetric extension),
//! transformed once, and filtered per scale in the frequency domain with the
//! transfer function of `-σ²∇²G_σ`. Mirroring makes the circular convolution
//! equal to a convolution with reflective boundaries.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::geometry::Box2D;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Blob radii in pixels; the filter scale is `radius / sqrt(2)`.
    pub scales: Vec<f64>,
    /// Minimum normalised response for a scale-space maximum to become a candidate.
    pub response_floor: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            scales: log_spaced_scales(3.0, 40.0, 8),
            response_floor: 60.0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("proposal scales must be positive"));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("proposal scales must be strictly increasing"));
        }
        if !self.response_floor.is_finite() {
            return Err(Error::invalid("response floor must be finite"));
        }
        Ok(())
    }

    /// Side length of the largest filter footprint in pixels.
    pub fn max_footprint(&self) -> usize {
        let r = self.scales.iter().cloned().fold(0.0, f64::max);
        2 * r.ceil() as usize + 1
    }
}

pub fn log_spaced_scales(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// A scale-space maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: Box2D,
    /// Blob radius in pixels.
    pub scale: f64,
    pub response: f64,
}

/// Precomputed FFT plans and transfer functions for one slice size.
pub struct LogFilterBank {
    rows: usize,
    cols: usize,
    scales: Vec<f64>,
    row_fft: Arc<dyn Fft<f64>>,
    col_fft: Arc<dyn Fft<f64>>,
    row_ifft: Arc<dyn Fft<f64>>,
    col_ifft: Arc<dyn Fft<f64>>,
    transfers: Vec<Vec<f64>>,
}

impl LogFilterBank {
    pub fn new(rows: usize, cols: usize, cfg: &ProposalConfig) -> Result<Self> {
        cfg.validate()?;
        let need = cfg.max_footprint();
        if rows < need || cols < need {
            return Err(Error::invalid(format!(
                "slice {rows}x{cols} is smaller than the largest filter ({need} px)"
            )));
        }
        let (er, ec) = (2 * rows, 2 * cols);
        let mut planner = FftPlanner::new();
        let freq = |i: usize, n: usize| {
            let f = if i < n.div_ceil(2) { i as f64 } else { i as f64 - n as f64 };
            2.0 * PI * f / n as f64
        };
        let transfers = cfg
            .scales
            .iter()
            .map(|&r| {
                let sigma2 = (r / SQRT_2).powi(2);
                let mut t = Vec::with_capacity(er * ec);
                for y in 0..er {
                    let wy = freq(y, er);
                    for x in 0..ec {
                        let wx = freq(x, ec);
                        let w2 = wx * wx + wy * wy;
                        t.push(sigma2 * w2 * (-0.5 * sigma2 * w2).exp());
                    }
                }
                t
            })
            .collect();
        Ok(LogFilterBank {
            rows,
            cols,
            scales: cfg.scales.clone(),
            row_fft: planner.plan_fft_forward(ec),
            col_fft: planner.plan_fft_forward(er),
            row_ifft: planner.plan_fft_inverse(ec),
            col_ifft: planner.plan_fft_inverse(er),
            transfers,
        })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn fft2(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let (er, ec) = (2 * self.rows, 2 * self.cols);
        let (rf, cf) = if inverse {
            (&self.row_ifft, &self.col_ifft)
        } else {
            (&self.row_fft, &self.col_fft)
        };
        rf.process(buf);
        let mut t = vec![Complex::new(0.0, 0.0); er * ec];
        for y in 0..er {
            for x in 0..ec {
                t[x * er + y] = buf[y * ec + x];
            }
        }
        cf.process(&mut t);
        for x in 0..ec {
            for y in 0..er {
                buf[y * ec + x] = t[x * er + y];
            }
        }
    }

    /// Normalised `-σ²∇²G_σ * image` for every scale; bright blobs respond positively.
    pub fn responses(&self, img: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let (rows, cols) = img.dim();
        if rows != self.rows || cols != self.cols {
            return Err(Error::invalid(format!(
                "filter bank built for {}x{}, got {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        let (er, ec) = (2 * rows, 2 * cols);
        let mirror = |i: usize, n: usize| if i < n { i } else { 2 * n - 1 - i };
        let mut spec: Vec<Complex<f64>> = (0..er * ec)
            .map(|i| Complex::new(img[[mirror(i / ec, rows), mirror(i % ec, cols)]], 0.0))
            .collect();
        self.fft2(&mut spec, false);
        let norm = 1.0 / (er * ec) as f64;
        let mut out = Vec::with_capacity(self.scales.len());
        let mut work = vec![Complex::new(0.0, 0.0); er * ec];
        for t in &self.transfers {
            for ((w, s), h) in work.iter_mut().zip(&spec).zip(t) {
                *w = s * *h;
            }
            self.fft2(&mut work, true);
            out.push(Array2::from_shape_fn((rows, cols), |(y, x)| {
                work[y * ec + x].re * norm
            }));
        }
        Ok(out)
    }
}

/// Local maxima across space and scale above the response floor.
pub fn propose_with_bank(
    img: &Array2<f64>,
    bank: &LogFilterBank,
    floor: f64,
) -> Result<Vec<Proposal>> {
    let stack = bank.responses(img)?;
    let (rows, cols) = img.dim();
    let ns = stack.len();
    let mut out = Vec::new();
    for s in 0..ns {
        for y in 0..rows {
            for x in 0..cols {
                let v = stack[s][[y, x]];
                if v <= floor {
                    continue;
                }
                if is_scale_space_max(&stack, s, y, x, v) {
                    let r = bank.scales[s];
                    out.push(Proposal {
                        bbox: Box2D {
                            cx: x as f64,
                            cy: y as f64,
                            w: 2.0 * r,
                            h: 2.0 * r,
                        },
                        scale: r,
                        response: v,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Plateaus resolve to their first voxel in (scale, row, col) order.
fn is_scale_space_max(stack: &[Array2<f64>], s: usize, y: usize, x: usize, v: f64) -> bool {
    let (rows, cols) = stack[0].dim();
    for ds in -1i64..=1 {
        let ss = s as i64 + ds;
        if ss < 0 || ss >= stack.len() as i64 {
            continue;
        }
        for dy in -1i64..=1 {
            let yy = y as i64 + dy;
            if yy < 0 || yy >= rows as i64 {
                continue;
            }
            for dx in -1i64..=1 {
                let xx = x as i64 + dx;
                if (ds, dy, dx) == (0, 0, 0) || xx < 0 || xx >= cols as i64 {
                    continue;
                }
                let n = stack[ss as usize][[yy as usize, xx as usize]];
                let earlier = (ds, dy, dx) < (0, 0, 0);
                if n > v || (earlier && n == v) {
                    return false;
                }
            }
        }
    }
    true
}

/// Builds a filter bank for this slice size and proposes candidates.
pub fn propose_candidates(img: &Array2<f64>, cfg: &ProposalConfig) -> Result<Vec<Proposal>> {
    let (rows, cols) = img.dim();
    let bank = LogFilterBank::new(rows, cols, cfg)?;
    propose_with_bank(img, &bank, cfg.response_floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(img: &mut Array2<f64>, cx: f64, cy: f64, sigma: f64, amp: f64) {
        for ((y, x), v) in img.indexed_iter_mut() {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            *v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }

    /// Closed-form `-σ²∇²G_σ * A·exp(-r²/2σb²)` at the blob centre.
    fn centre_response(amp: f64, sigma_blob: f64, radius: f64) -> f64 {
        let s2 = (radius / SQRT_2).powi(2);
        let b2 = sigma_blob * sigma_blob;
        2.0 * amp * s2 * b2 / (s2 + b2).powi(2)
    }

    #[test]
    fn default_scales_are_log_spaced() {
        let s = ProposalConfig::default().scales;
        assert_eq!(s.len(), 8);
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[7] - 40.0).abs() < 1e-9);
        let r = s[1] / s[0];
        assert!(s.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-9));
    }

    #[test]
    fn blank_slice_has_no_candidates() {
        let img = Array2::from_elem((128, 128), -800.0);
        assert!(propose_candidates(&img, &ProposalConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn gaussian_blob_found_at_matching_scale() {
        let (amp, sb) = (500.0, 4.0);
        let mut img = Array2::from_elem((128, 128), -800.0);
        blob(&mut img, 64.0, 64.0, sb, amp);
        let cfg = ProposalConfig::default();
        let expected_scale = cfg
            .scales
            .iter()
            .cloned()
            .max_by(|a, b| centre_response(amp, sb, *a).total_cmp(&centre_response(amp, sb, *b)))
            .unwrap();
        let props = propose_candidates(&img, &cfg).unwrap();
        assert_eq!(props.len(), 1, "{props:?}");
        let p = props[0];
        assert!((p.bbox.cx - 64.0).abs() <= 1.0 && (p.bbox.cy - 64.0).abs() <= 1.0);
        assert_eq!(p.scale, expected_scale);
        let want = centre_response(amp, sb, expected_scale);
        assert!((p.response - want).abs() / want < 0.02, "{} vs {want}", p.response);
    }

    #[test]
    fn two_separated_blobs_give_two_candidates() {
        let mut img = Array2::from_elem((128, 128), -800.0);
        blob(&mut img, 34.0, 64.0, 4.0, 500.0);
        blob(&mut img, 94.0, 64.0, 4.0, 500.0);
        let props = propose_candidates(&img, &ProposalConfig::default()).unwrap();
        assert_eq!(props.len(), 2, "{props:?}");
        let mut xs: Vec<f64> = props.iter().map(|p| p.bbox.cx).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] - 34.0).abs() <= 1.0 && (xs[1] - 94.0).abs() <= 1.0);
    }

    #[test]
    fn slice_smaller_than_filter_is_rejected() {
        let img = Array2::zeros((64, 64));
        let err = propose_candidates(&img, &ProposalConfig::default()).unwrap_err();
        assert!(err.to_string().contains("smaller than the largest filter"));
    }
}

//! Hit matching, FROC analysis and single-class 2D average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::SliceDetection;
use crate::geometry::{detection_order, iou, Box2D};
use crate::phantom::GroundTruthNodule;
use crate::tracks::Candidate3D;
use crate::{Error, Result};

/// False positives per scan at which sensitivity is reported.
pub const FROC_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Strictly inside the truth's radius, same series.
pub fn hits(c: &Candidate3D, t: &GroundTruthNodule) -> bool {
    if c.series_id != t.series_id {
        return false;
    }
    let d2: f64 = c.center().iter().zip(t.center()).map(|(a, b)| (a - b).powi(2)).sum();
    d2.sqrt() < 0.5 * t.diameter
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Tp,
    Fp,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub outcomes: Vec<Outcome>,
    /// Index of the crediting candidate per truth.
    pub detected_by: Vec<Option<usize>>,
}

/// Credits each truth to its highest-scoring hitting candidate (ties: lower
/// index). Other hitting candidates are ignored, the rest are false positives.
pub fn match_candidates(cands: &[Candidate3D], truths: &[GroundTruthNodule]) -> Assignment {
    let mut detected_by = vec![None; truths.len()];
    let mut hit_any = vec![false; cands.len()];
    for (ti, t) in truths.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (ci, c) in cands.iter().enumerate() {
            if hits(c, t) {
                hit_any[ci] = true;
                if best.is_none_or(|b| c.s > cands[b].s) {
                    best = Some(ci);
                }
            }
        }
        detected_by[ti] = best;
    }
    let mut outcomes: Vec<Outcome> = hit_any
        .iter()
        .map(|&h| if h { Outcome::Ignored } else { Outcome::Fp })
        .collect();
    for ci in detected_by.iter().flatten() {
        outcomes[*ci] = Outcome::Tp;
    }
    Assignment { outcomes, detected_by }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Sensitivity of the lowest threshold whose FP/scan does not exceed the rate.
    #[default]
    Step,
    /// Linear interpolation between neighbouring curve points, anchored at (0, 0).
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocSummary {
    pub rates: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub average: f64,
    pub curve: Vec<FrocPoint>,
    pub interpolation: Interpolation,
    pub n_scans: usize,
    pub n_truths: usize,
    pub report_threshold: f64,
    /// False positives with score at or above `report_threshold`, per series.
    pub fp_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrocOptions {
    pub interpolation: Interpolation,
    pub report_threshold: f64,
}

impl Default for FrocOptions {
    fn default() -> Self {
        FrocOptions {
            interpolation: Interpolation::Step,
            report_threshold: 0.5,
        }
    }
}

/// The operating points obtained by sweeping the threshold over every
/// distinct candidate score, highest first.
pub fn froc_points(cands: &[Candidate3D], a: &Assignment, n_truths: usize, n_scans: usize) -> Vec<FrocPoint> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&x, &y| cands[y].s.total_cmp(&cands[x].s));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = cands[order[i]].s;
        while i < order.len() && cands[order[i]].s == s {
            match a.outcomes[order[i]] {
                Outcome::Tp => {
                    tp += a.detected_by.iter().filter(|d| **d == Some(order[i])).count();
                }
                Outcome::Fp => fp += 1,
                Outcome::Ignored => {}
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold: s,
            fp_per_scan: fp as f64 / n_scans as f64,
            sensitivity: tp as f64 / n_truths as f64,
        });
    }
    points
}

fn sensitivity_at(curve: &[FrocPoint], rate: f64, mode: Interpolation) -> f64 {
    let below = curve.iter().rposition(|p| p.fp_per_scan <= rate);
    match mode {
        Interpolation::Step => below.map_or(0.0, |i| curve[i].sensitivity),
        Interpolation::Linear => {
            let (f0, s0) = below.map_or((0.0, 0.0), |i| (curve[i].fp_per_scan, curve[i].sensitivity));
            let next = below.map_or(0, |i| i + 1);
            match curve.get(next) {
                Some(p) if p.fp_per_scan > f0 => s0 + (p.sensitivity - s0) * (rate - f0) / (p.fp_per_scan - f0),
                _ => s0,
            }
        }
    }
}

/// FROC over `n_scans` scans. Candidates and truths may mix series; matching
/// only pairs equal series ids.
pub fn froc_curve(
    cands: &[Candidate3D],
    truths: &[GroundTruthNodule],
    n_scans: usize,
    opts: &FrocOptions,
) -> Result<FrocSummary> {
    if truths.is_empty() {
        return Err(Error::Domain("FROC needs at least one truth".into()));
    }
    if n_scans == 0 {
        return Err(Error::invalid("FROC needs at least one scan"));
    }
    if let Some(c) = cands.iter().find(|c| !c.s.is_finite()) {
        return Err(Error::invalid(format!("non-finite candidate score in {}", c.series_id)));
    }
    let a = match_candidates(cands, truths);
    let curve = froc_points(cands, &a, truths.len(), n_scans);
    let sensitivities: Vec<f64> = FROC_RATES
        .iter()
        .map(|&r| sensitivity_at(&curve, r, opts.interpolation))
        .collect();
    let average = sensitivities.iter().sum::<f64>() / sensitivities.len() as f64;
    let mut fp_counts = BTreeMap::new();
    for (c, o) in cands.iter().zip(&a.outcomes) {
        if *o == Outcome::Fp && c.s >= opts.report_threshold {
            *fp_counts.entry(c.series_id.clone()).or_insert(0) += 1;
        }
    }
    Ok(FrocSummary {
        rates: FROC_RATES.to_vec(),
        sensitivities,
        average,
        curve,
        interpolation: opts.interpolation,
        n_scans,
        n_truths: truths.len(),
        report_threshold: opts.report_threshold,
        fp_counts,
    })
}

/// A ground-truth box on one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceTruth {
    pub series_id: String,
    pub slice: usize,
    #[serde(rename = "box")]
    pub bbox: Box2D,
}

/// All-point interpolated AP. Each detection, taken by descending score,
/// claims the unmatched truth on its slice with the highest IoU, if that IoU
/// reaches `match_iou`.
pub fn average_precision_2d(dets: &[SliceDetection], truths: &[SliceTruth], match_iou: f64) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::Domain("average precision needs at least one truth".into()));
    }
    let mut order: Vec<&SliceDetection> = dets.iter().collect();
    order.sort_by(|a, b| detection_order(a, b));
    let mut used = vec![false; truths.len()];
    let mut tp = 0usize;
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(order.len());
    for (rank, d) in order.iter().enumerate() {
        let best = truths
            .iter()
            .enumerate()
            .filter(|(i, t)| !used[*i] && t.slice == d.slice && t.series_id == d.series_id)
            .map(|(i, t)| (i, iou(&t.bbox, &d.bbox)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, o)) = best {
            if o >= match_iou {
                used[i] = true;
                tp += 1;
            }
        }
        pr.push((tp as f64 / truths.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = 0.0;
    let mut area = Vec::with_capacity(pr.len());
    for &(_, p) in pr.iter().rev() {
        envelope = envelope.max(p);
        area.push(envelope);
    }
    area.reverse();
    for (&(r, _), &p) in pr.iter().zip(&area) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(ap)
}

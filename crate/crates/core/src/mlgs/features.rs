//! The 40-feature motion descriptor of a track.

use serde::{Deserialize, Serialize};

use crate::geometry::VolumeGeometry;
use crate::tracks::Track;
use crate::{Error, Result};

pub const N_MOTION_FEATURES: usize = 40;
pub const MOTION_FEATURE_SCHEMA: &str = "motion-v1";

/// Canonical column order.
pub const MOTION_FEATURE_NAMES: [&str; N_MOTION_FEATURES] = [
    // score statistics
    "score_mean",
    "score_max",
    "score_min",
    "score_std",
    "score_median",
    "score_first",
    "score_last",
    "score_range",
    // size statistics (mm)
    "diameter_mean",
    "diameter_max",
    "diameter_min",
    "diameter_std",
    "diameter_first",
    "diameter_last",
    "diameter_range",
    "dmax_over_n",
    // centre motion (mm)
    "center_std_x",
    "center_std_y",
    "step_mean",
    "step_max",
    "path_length",
    "path_length_over_n",
    "deviation_mean",
    "deviation_max",
    "net_displacement",
    "bounding_radius",
    // track shape
    "n_members",
    "n_propagated",
    "propagated_fraction",
    "longest_original_run",
    "z_extent_mm",
    "z_extent_over_diameter",
    // box shape
    "aspect_mean",
    "aspect_std",
    "aspect_max",
    "aspect_min",
    // trends
    "score_slope",
    "diameter_slope",
    "score_slope_abs",
    "diameter_slope_abs",
];

pub fn feature_index(name: &str) -> Option<usize> {
    MOTION_FEATURE_NAMES.iter().position(|n| *n == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MotionFeatureVector(pub [f64; N_MOTION_FEATURES]);

impl TryFrom<Vec<f64>> for MotionFeatureVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let n = v.len();
        v.try_into()
            .map(MotionFeatureVector)
            .map_err(|_| Error::invalid(format!("motion feature vector needs {N_MOTION_FEATURES} values, got {n}")))
    }
}

impl From<MotionFeatureVector> for Vec<f64> {
    fn from(v: MotionFeatureVector) -> Self {
        v.0.to_vec()
    }
}

impl MotionFeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        feature_index(name).map(|i| self.0[i])
    }
}

struct Stats {
    mean: f64,
    max: f64,
    min: f64,
    std: f64,
}

fn stats(v: &[f64]) -> Stats {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    Stats {
        mean,
        max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        min: v.iter().cloned().fold(f64::INFINITY, f64::min),
        std: (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt(),
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Least-squares slope of `y` against `x`; 0 when `x` has no spread.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return 0.0;
    }
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx
}

pub fn extract_motion_features(t: &Track, geom: &VolumeGeometry) -> MotionFeatureVector {
    let m = &t.members;
    let n = m.len() as f64;
    let scores: Vec<f64> = m.iter().map(|d| d.score).collect();
    let diams: Vec<f64> = m
        .iter()
        .map(|d| (d.bbox.w * geom.spacing[0]).max(d.bbox.h * geom.spacing[1]))
        .collect();
    let centers: Vec<[f64; 2]> = m
        .iter()
        .map(|d| {
            let w = geom.voxel_to_world([d.bbox.cx, d.bbox.cy, d.slice as f64]);
            [w[0], w[1]]
        })
        .collect();
    let slices: Vec<f64> = m.iter().map(|d| d.slice as f64).collect();
    let aspects: Vec<f64> = m.iter().map(|d| d.bbox.w / d.bbox.h).collect();
    let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);

    let s = stats(&scores);
    let d = stats(&diams);
    let xs: Vec<f64> = centers.iter().map(|c| c[0]).collect();
    let ys: Vec<f64> = centers.iter().map(|c| c[1]).collect();
    let sx = stats(&xs);
    let sy = stats(&ys);
    let centroid = [sx.mean, sy.mean];

    let steps: Vec<f64> = centers.windows(2).map(|w| dist(w[0], w[1])).collect();
    let path: f64 = steps.iter().sum();
    let (step_mean, step_max) = if steps.is_empty() {
        (0.0, 0.0)
    } else {
        (path / steps.len() as f64, steps.iter().cloned().fold(0.0, f64::max))
    };
    let devs: Vec<f64> = centers.iter().map(|c| dist(*c, centroid)).collect();
    let dev = stats(&devs);
    let mut diameter_span: f64 = 0.0;
    for (i, a) in centers.iter().enumerate() {
        for b in &centers[i + 1..] {
            diameter_span = diameter_span.max(dist(*a, *b));
        }
    }

    let n_prop = m.iter().filter(|d| d.propagated).count() as f64;
    let mut longest = 0usize;
    let mut run = 0usize;
    for (i, d) in m.iter().enumerate() {
        if d.propagated {
            run = 0;
            continue;
        }
        let continues = i > 0 && !m[i - 1].propagated && m[i - 1].slice + 1 == d.slice;
        run = if continues { run + 1 } else { 1 };
        longest = longest.max(run);
    }
    let z_extent = (t.last_slice() - t.first_slice() + 1) as f64 * geom.spacing[2];
    let a = stats(&aspects);
    let score_slope = slope(&slices, &scores);
    let diam_slope = slope(&slices, &diams);

    MotionFeatureVector([
        s.mean,
        s.max,
        s.min,
        s.std,
        median(&scores),
        scores[0],
        scores[scores.len() - 1],
        s.max - s.min,
        d.mean,
        d.max,
        d.min,
        d.std,
        diams[0],
        diams[diams.len() - 1],
        d.max - d.min,
        d.max / n,
        sx.std,
        sy.std,
        step_mean,
        step_max,
        path,
        path / n,
        dev.mean,
        dev.max,
        dist(centers[0], centers[centers.len() - 1]),
        0.5 * diameter_span,
        n,
        n_prop,
        n_prop / n,
        longest as f64,
        z_extent,
        z_extent / d.mean,
        a.mean,
        a.std,
        a.max,
        a.min,
        score_slope,
        diam_slope,
        score_slope.abs(),
        diam_slope.abs(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::SliceDetection;
    use crate::geometry::Box2D;

    fn det(slice: usize, cx: f64, side: f64, score: f64) -> SliceDetection {
        SliceDetection {
            series_id: "s".into(),
            slice,
            bbox: Box2D::square(cx, 0.0, side).unwrap(),
            score,
            propagated: false,
        }
    }

    fn unit_geom() -> VolumeGeometry {
        VolumeGeometry::new([64, 64, 64], [1.0; 3], [0.0; 3]).unwrap()
    }

    fn f(v: &MotionFeatureVector, name: &str) -> f64 {
        v.get(name).unwrap()
    }

    #[test]
    fn schema_has_forty_unique_names() {
        let mut names = MOTION_FEATURE_NAMES.to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 40);
    }

    #[test]
    fn single_member_degenerates() {
        let t = Track { series_id: "s".into(), members: vec![det(3, 10.0, 6.0, 0.7)] };
        let v = extract_motion_features(&t, &unit_geom());
        assert_eq!(f(&v, "n_members"), 1.0);
        assert_eq!(f(&v, "dmax_over_n"), 6.0);
        for name in [
            "center_std_x", "center_std_y", "step_mean", "step_max", "path_length", "path_length_over_n",
            "deviation_mean", "deviation_max", "net_displacement", "bounding_radius", "score_slope",
            "diameter_slope", "score_slope_abs", "diameter_slope_abs", "score_std", "diameter_std",
            "score_range", "diameter_range",
        ] {
            assert_eq!(f(&v, name), 0.0, "{name}");
        }
        assert!(v.0.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn motionless_track_has_zero_motion() {
        let t = Track { series_id: "s".into(), members: (0..5).map(|k| det(k, 10.0, 6.0, 0.5)).collect() };
        let v = extract_motion_features(&t, &unit_geom());
        for name in [
            "deviation_mean", "deviation_max", "step_mean", "step_max", "path_length", "net_displacement",
            "center_std_x", "center_std_y", "score_std", "diameter_std", "score_range", "diameter_range",
            "score_slope", "diameter_slope", "bounding_radius",
        ] {
            assert_eq!(f(&v, name), 0.0, "{name}");
        }
        assert_eq!(f(&v, "longest_original_run"), 5.0);
    }

    #[test]
    fn three_member_hand_example() {
        let t = Track {
            series_id: "s".into(),
            members: vec![det(0, 0.0, 4.0, 0.6), det(1, 1.0, 6.0, 0.8), det(2, 2.0, 8.0, 1.0)],
        };
        let v = extract_motion_features(&t, &unit_geom());
        let close = |name: &str, want: f64| {
            assert!((f(&v, name) - want).abs() < 1e-12, "{name}: {} vs {want}", f(&v, name));
        };
        close("diameter_max", 8.0);
        close("n_members", 3.0);
        close("dmax_over_n", 8.0 / 3.0);
        close("path_length", 2.0);
        close("net_displacement", 2.0);
        close("diameter_slope", 2.0);
        close("score_slope", 0.2);
        close("score_median", 0.8);
        close("deviation_mean", 2.0 / 3.0);
        close("bounding_radius", 1.0);
        close("z_extent_mm", 3.0);
    }

    #[test]
    fn propagated_members_break_original_runs() {
        let mut members: Vec<_> = (0..6).map(|k| det(k, 5.0, 6.0, 0.5)).collect();
        members[2].propagated = true;
        let t = Track { series_id: "s".into(), members };
        let v = extract_motion_features(&t, &unit_geom());
        assert_eq!(f(&v, "n_propagated"), 1.0);
        assert_eq!(f(&v, "longest_original_run"), 3.0);
        assert!((f(&v, "propagated_fraction") - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn vector_serde_checks_length() {
        let v = MotionFeatureVector([1.5; 40]);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<MotionFeatureVector>(&s).unwrap(), v);
        assert!(serde_json::from_str::<MotionFeatureVector>("[1.0, 2.0]").is_err());
    }
}

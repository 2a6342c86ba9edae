//! Motionless-guide suppression: per-track motion features scored by a random forest.

pub mod features;
pub mod forest;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::froc::hits;
use crate::geometry::VolumeGeometry;
use crate::phantom::GroundTruthNodule;
use crate::tracks::{track_to_candidate3d, Candidate3D, Track};
use crate::{Error, Result};

pub use features::{
    extract_motion_features, feature_index, MotionFeatureVector, MOTION_FEATURE_NAMES, MOTION_FEATURE_SCHEMA,
    N_MOTION_FEATURES,
};
pub use forest::{train_forest, ForestModel, ForestParams, Node};

/// How the final candidate score is formed from the forest and the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    Rf,
    Still,
    Product,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rf" => Ok(ScoreMode::Rf),
            "still" => Ok(ScoreMode::Still),
            "product" => Ok(ScoreMode::Product),
            _ => Err(Error::invalid(format!("unknown score mode {s:?} (expected rf, still or product)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlgsConfig {
    pub enabled: bool,
    pub n_trees: usize,
    pub mtry: usize,
    pub threshold: f64,
    pub score_mode: ScoreMode,
}

impl Default for MlgsConfig {
    fn default() -> Self {
        MlgsConfig {
            enabled: true,
            n_trees: 100,
            mtry: 6,
            threshold: 0.5,
            score_mode: ScoreMode::Rf,
        }
    }
}

impl MlgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::invalid("mlgs needs at least one tree"));
        }
        if self.mtry == 0 || self.mtry > N_MOTION_FEATURES {
            return Err(Error::invalid(format!("mtry must lie in [1, {N_MOTION_FEATURES}], got {}", self.mtry)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!("mlgs threshold must lie in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }
}

pub fn motion_feature_names() -> Vec<String> {
    MOTION_FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
}

pub fn train_motion_forest(x: &[MotionFeatureVector], y: &[bool], params: &ForestParams) -> Result<ForestModel> {
    let rows: Vec<Vec<f64>> = x.iter().map(|v| v.0.to_vec()).collect();
    train_forest(&rows, y, &motion_feature_names(), MOTION_FEATURE_SCHEMA, params)
}

pub fn forest_predict(m: &ForestModel, f: &MotionFeatureVector) -> Result<f64> {
    m.predict_checked(MOTION_FEATURE_SCHEMA, &f.0)
}

/// A track is positive iff its candidate hits a truth of the same series.
pub fn label_tracks(tracks: &[Track], geom: &VolumeGeometry, truths: &[GroundTruthNodule]) -> Vec<bool> {
    tracks
        .iter()
        .map(|t| {
            let c = track_to_candidate3d(t, geom, t.max_score());
            truths.iter().any(|g| g.series_id == c.series_id && hits(&c, g))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Suppression {
    pub kept: Vec<Candidate3D>,
    pub removed: Vec<Candidate3D>,
    /// Forest probability per input track, in input order.
    pub probabilities: Vec<f64>,
}

/// Keeps tracks whose forest probability reaches `threshold`.
pub fn suppress(
    tracks: &[Track],
    model: &ForestModel,
    threshold: f64,
    geom: &VolumeGeometry,
    mode: ScoreMode,
) -> Result<Suppression> {
    let probabilities = tracks
        .par_iter()
        .map(|t| forest_predict(model, &extract_motion_features(t, geom)))
        .collect::<Result<Vec<f64>>>()?;
    let mut out = Suppression {
        probabilities,
        ..Default::default()
    };
    for (t, &p) in tracks.iter().zip(&out.probabilities) {
        let s = match mode {
            ScoreMode::Rf => p,
            ScoreMode::Still => t.max_score(),
            ScoreMode::Product => p * t.max_score(),
        };
        let c = track_to_candidate3d(t, geom, s);
        if p >= threshold {
            out.kept.push(c);
        } else {
            out.removed.push(c);
        }
    }
    Ok(out)
}

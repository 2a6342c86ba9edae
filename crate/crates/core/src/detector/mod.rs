//! Still-image detector: proposals, patch features, focal-loss scorer and NMS.

pub mod features;
pub mod log;
pub mod scorer;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::geometry::{nms, Box2D, DEFAULT_NMS_IOU};
use crate::{Error, Result};

pub use features::{extract_patch_features, PatchFeatures, N_PATCH_FEATURES, PATCH_FEATURE_SCHEMA};
pub use log::{propose_candidates, LogFilterBank, Proposal, ProposalConfig};
pub use scorer::{focal_loss, resample_batch, train_scorer, Label, ScorerModel, ScorerTrainConfig};

/// One scored box on one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceDetection {
    pub series_id: String,
    pub slice: usize,
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub score: f64,
    /// Set by multi-slice propagation for synthesised members.
    #[serde(default)]
    pub propagated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub proposal: ProposalConfig,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            proposal: ProposalConfig::default(),
            score_thresh: 0.05,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.proposal.validate()?;
        for (name, v) in [("score_thresh", self.score_thresh), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// A proposal with its patch descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescribedProposal {
    pub proposal: Proposal,
    pub features: PatchFeatures,
}

/// Proposes candidates on one slice and describes each one.
pub fn describe_slice(
    img: &Array2<f64>,
    bank: &LogFilterBank,
    cfg: &ProposalConfig,
) -> Result<Vec<DescribedProposal>> {
    Ok(log::propose_with_bank(img, bank, cfg.response_floor)?
        .into_iter()
        .map(|p| DescribedProposal {
            features: extract_patch_features(img, &p),
            proposal: p,
        })
        .collect())
}

/// Scores described proposals, drops those below `score_thresh` and runs NMS.
pub fn select_detections(
    described: &[DescribedProposal],
    model: &ScorerModel,
    cfg: &DetectorConfig,
    series_id: &str,
    slice: usize,
) -> Vec<SliceDetection> {
    let dets = described
        .iter()
        .filter_map(|d| {
            let score = model.score(d.features.as_slice());
            (score >= cfg.score_thresh).then(|| SliceDetection {
                series_id: series_id.to_string(),
                slice,
                bbox: d.proposal.bbox,
                score,
                propagated: false,
            })
        })
        .collect();
    nms(dets, cfg.nms_iou)
}

/// Detector bound to one slice size; shareable across threads.
pub struct SliceDetector<'a> {
    bank: LogFilterBank,
    model: &'a ScorerModel,
    cfg: &'a DetectorConfig,
}

impl<'a> SliceDetector<'a> {
    pub fn new(rows: usize, cols: usize, model: &'a ScorerModel, cfg: &'a DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if model.weights.len() != N_PATCH_FEATURES {
            return Err(Error::SchemaMismatch {
                expected: PATCH_FEATURE_SCHEMA.into(),
                actual: model.schema_version.clone(),
            });
        }
        Ok(SliceDetector {
            bank: LogFilterBank::new(rows, cols, &cfg.proposal)?,
            model,
            cfg,
        })
    }

    pub fn bank(&self) -> &LogFilterBank {
        &self.bank
    }

    pub fn detect(&self, img: &Array2<f64>, series_id: &str, slice: usize) -> Result<Vec<SliceDetection>> {
        let described = describe_slice(img, &self.bank, &self.cfg.proposal)?;
        Ok(select_detections(&described, self.model, self.cfg, series_id, slice))
    }

    /// Scorer output for an arbitrary box, used to rescore propagated members.
    pub fn rescore(&self, img: &Array2<f64>, bbox: &Box2D) -> f64 {
        let p = Proposal {
            bbox: *bbox,
            scale: 0.5 * bbox.extent(),
            response: 0.0,
        };
        let mut f = extract_patch_features(img, &p);
        f.0[5] = self.response_at(img, bbox);
        self.model.score(f.as_slice())
    }

    fn response_at(&self, img: &Array2<f64>, bbox: &Box2D) -> f64 {
        let Ok(stack) = self.bank.responses(img) else {
            return 0.0;
        };
        let target = 0.5 * bbox.extent();
        let s = self
            .bank
            .scales()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
            .map_or(0, |(i, _)| i);
        let (rows, cols) = img.dim();
        let y = (bbox.cy.round().max(0.0) as usize).min(rows - 1);
        let x = (bbox.cx.round().max(0.0) as usize).min(cols - 1);
        stack[s][[y, x]]
    }
}

/// Propose, describe, score, threshold and suppress on one slice.
pub fn detect_slice(
    img: &Array2<f64>,
    series_id: &str,
    slice: usize,
    model: &ScorerModel,
    cfg: &DetectorConfig,
) -> Result<Vec<SliceDetection>> {
    let (rows, cols) = img.dim();
    SliceDetector::new(rows, cols, model, cfg)?.detect(img, series_id, slice)
}

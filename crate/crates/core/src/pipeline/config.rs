use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, ScorerTrainConfig};
use crate::froc::FrocOptions;
use crate::mlgs::MlgsConfig;
use crate::msp::MspConfig;
use crate::phantom::SUITE_SCANS;
use crate::tracks::DEFAULT_LINK_IOU;
use crate::{Error, Result};

/// Size of the generated training suite.
pub const DEFAULT_TRAINING_SCANS: usize = 40;

/// Seed of the evaluation suite used by the benchmark.
pub const DEFAULT_SUITE_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputConfig {
    /// Generated phantom scans.
    Suite { seed: u64, n_scans: usize },
    /// MetaImage volumes; the series id is the file stem.
    Volumes {
        volumes: Vec<PathBuf>,
        annotations: PathBuf,
    },
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig::Suite {
            seed: DEFAULT_SUITE_SEED,
            n_scans: SUITE_SCANS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MspStageConfig {
    pub enabled: bool,
    pub w: usize,
    pub decay_alpha: f64,
    pub min_nodule_extent_slices: usize,
    /// Re-score propagated boxes with the still-image scorer instead of the decayed mean.
    pub rescore: bool,
}

impl Default for MspStageConfig {
    fn default() -> Self {
        let m = MspConfig::default();
        MspStageConfig {
            enabled: true,
            w: m.w,
            decay_alpha: m.decay_alpha,
            min_nodule_extent_slices: m.min_nodule_extent_slices,
            rescore: false,
        }
    }
}

impl MspStageConfig {
    pub fn params(&self) -> MspConfig {
        MspConfig {
            w: self.w,
            decay_alpha: self.decay_alpha,
            min_nodule_extent_slices: self.min_nodule_extent_slices,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Scans in the training suite, generated from a seed derived from the master seed.
    pub n_scans: usize,
    /// Its `seed` field is replaced by one derived from the master seed.
    pub scorer: ScorerTrainConfig,
    /// Pre-trained models; when set the matching training stage is skipped.
    pub scorer_model: Option<PathBuf>,
    pub forest_model: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            n_scans: DEFAULT_TRAINING_SCANS,
            scorer: ScorerTrainConfig::default(),
            scorer_model: None,
            forest_model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub froc: FrocOptions,
    pub ap_match_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            froc: FrocOptions::default(),
            ap_match_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub master_seed: u64,
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default = "default_link_iou")]
    pub link_iou: f64,
    #[serde(default)]
    pub msp: MspStageConfig,
    #[serde(default)]
    pub mlgs: MlgsConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_link_iou() -> f64 {
    DEFAULT_LINK_IOU
}

fn default_workers() -> usize {
    1
}

impl PipelineConfig {
    pub fn new(master_seed: u64) -> Self {
        PipelineConfig {
            master_seed,
            input: InputConfig::default(),
            detector: DetectorConfig::default(),
            link_iou: DEFAULT_LINK_IOU,
            msp: MspStageConfig::default(),
            mlgs: MlgsConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            workers: 1,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.msp.enabled {
            self.msp.params().validate()?;
        }
        self.mlgs.validate()?;
        if !(0.0..=1.0).contains(&self.link_iou) {
            return Err(Error::invalid(format!("link_iou must lie in [0, 1], got {}", self.link_iou)));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be >= 1"));
        }
        if !(self.eval.ap_match_iou > 0.0 && self.eval.ap_match_iou <= 1.0) {
            return Err(Error::invalid("ap_match_iou must lie in (0, 1]"));
        }
        let needs_training = self.training.scorer_model.is_none()
            || (self.mlgs.enabled && self.training.forest_model.is_none());
        if needs_training && self.training.n_scans == 0 {
            return Err(Error::invalid("training needs at least one scan"));
        }
        if let InputConfig::Suite { n_scans: 0, .. } = self.input {
            return Err(Error::invalid("input suite needs at least one scan"));
        }
        Ok(())
    }

    /// The configuration as echoed in reports: execution-only settings
    /// (worker count, output directory) are left out so they cannot change the report.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(o) = v.as_object_mut() {
            o.remove("workers");
            o.remove("output_dir");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_uses_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"master_seed": 3}"#).unwrap();
        assert_eq!(c, PipelineConfig::new(3));
        c.validate().unwrap();
    }

    #[test]
    fn master_seed_is_required() {
        assert!(serde_json::from_str::<PipelineConfig>("{}").is_err());
    }

    #[test]
    fn echo_drops_execution_settings() {
        let mut a = PipelineConfig::new(1);
        let mut b = a.clone();
        a.workers = 1;
        b.workers = 8;
        b.output_dir = Some("/tmp/x".into());
        assert_eq!(a.echo(), b.echo());
    }

    #[test]
    fn invalid_sub_configs_are_rejected() {
        let mut c = PipelineConfig::new(1);
        c.msp.w = 5;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::new(1);
        c.mlgs.mtry = 41;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::new(1);
        c.workers = 0;
        assert!(c.validate().is_err());
    }
}

//! Multi-slice propagation: fill short gaps inside a track.

use serde::{Deserialize, Serialize};

use crate::detector::SliceDetection;
use crate::geometry::Box2D;
use crate::tracks::Track;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MspConfig {
    /// Largest gap (in missing slices) that is filled.
    pub w: usize,
    /// Propagated score = `decay_alpha` × mean of the flanking scores.
    pub decay_alpha: f64,
    /// Smallest nodule z-extent in slices expected in the data; must be >= `w`.
    pub min_nodule_extent_slices: usize,
}

impl Default for MspConfig {
    fn default() -> Self {
        MspConfig {
            w: 2,
            decay_alpha: 0.9,
            min_nodule_extent_slices: 3,
        }
    }
}

impl MspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w < 1 {
            return Err(Error::invalid("msp window must be >= 1"));
        }
        if !(self.decay_alpha > 0.0 && self.decay_alpha <= 1.0) {
            return Err(Error::invalid(format!(
                "msp decay must lie in (0, 1], got {}",
                self.decay_alpha
            )));
        }
        if self.min_nodule_extent_slices < self.w {
            return Err(Error::invalid(format!(
                "msp window {} exceeds the minimum nodule extent of {} slices",
                self.w, self.min_nodule_extent_slices
            )));
        }
        Ok(())
    }
}

fn lerp_box(a: &Box2D, b: &Box2D, t: f64) -> Box2D {
    let l = |x: f64, y: f64| x + (y - x) * t;
    Box2D {
        cx: l(a.cx, b.cx),
        cy: l(a.cy, b.cy),
        w: l(a.w, b.w),
        h: l(a.h, b.h),
    }
}

/// Fills every interior gap of `1..=w` missing slices with linearly
/// interpolated boxes marked `propagated`. Longer gaps and track ends are
/// left alone.
pub fn propagate(tracks: &[Track], cfg: &MspConfig) -> Vec<Track> {
    propagate_with(tracks, cfg, None::<fn(&SliceDetection) -> f64>)
}

/// [`propagate`] with an optional rescoring hook that replaces the synthetic score.
pub fn propagate_with<F>(tracks: &[Track], cfg: &MspConfig, rescore: Option<F>) -> Vec<Track>
where
    F: Fn(&SliceDetection) -> f64,
{
    tracks
        .iter()
        .map(|t| {
            let mut members = Vec::with_capacity(t.members.len());
            for (i, m) in t.members.iter().enumerate() {
                members.push(m.clone());
                let Some(next) = t.members.get(i + 1) else {
                    break;
                };
                let gap = next.slice - m.slice - 1;
                if gap == 0 || gap > cfg.w {
                    continue;
                }
                let score = cfg.decay_alpha * 0.5 * (m.score + next.score);
                for j in 1..=gap {
                    let frac = j as f64 / (gap + 1) as f64;
                    let mut d = SliceDetection {
                        series_id: t.series_id.clone(),
                        slice: m.slice + j,
                        bbox: lerp_box(&m.bbox, &next.bbox, frac),
                        score,
                        propagated: true,
                    };
                    if let Some(f) = &rescore {
                        d.score = f(&d).clamp(0.0, 1.0);
                    }
                    members.push(d);
                }
            }
            Track {
                series_id: t.series_id.clone(),
                members,
            }
        })
        .collect()
}

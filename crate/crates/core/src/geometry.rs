//! Axis-aligned boxes, overlap, non-maximum suppression and voxel/world transforms.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::SliceDetection;
use crate::{Error, Result};

/// Default NMS overlap threshold.
pub const DEFAULT_NMS_IOU: f64 = 0.3;

/// Center/size box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Box2D { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn square(cx: f64, cy: f64, side: f64) -> Result<Self> {
        Self::new(cx, cy, side, side)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Larger of width and height.
    pub fn extent(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn intersection(&self, other: &Box2D) -> f64 {
        let iw = self.x1().min(other.x1()) - self.x0().max(other.x0());
        let ih = self.y1().min(other.y1()) - self.y0().max(other.y0());
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

/// Intersection over union; exactly 0 for disjoint or touching boxes.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Deterministic detection priority: score descending, then slice, cx, cy ascending.
pub fn detection_order(a: &SliceDetection, b: &SliceDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.slice.cmp(&b.slice))
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
}

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the highest-priority remaining detection and drops every
/// remaining detection whose IoU with it exceeds `iou_thresh`. The output is
/// sorted by [`detection_order`].
pub fn nms(mut dets: Vec<SliceDetection>, iou_thresh: f64) -> Vec<SliceDetection> {
    dets.sort_by(detection_order);
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for i in 0..dets.len() {
        if suppressed[i] {
            continue;
        }
        for j in i + 1..dets.len() {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
        keep.push(i);
    }
    let mut out = Vec::with_capacity(keep.len());
    let mut it = keep.into_iter().peekable();
    for (i, d) in dets.into_iter().enumerate() {
        if it.peek() == Some(&i) {
            it.next();
            out.push(d);
        }
    }
    out
}

/// Grid size, voxel spacing (mm) and world origin (mm) of a volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeGeometry {
    /// Voxels along x, y, z.
    pub dims: [usize; 3],
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f64; 3],
    /// World coordinate of voxel (0, 0, 0) in millimetres.
    pub origin: [f64; 3],
}

impl VolumeGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = VolumeGeometry {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("volume dims must be >= 1: {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!(
                "voxel spacing must be positive: {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid(format!("non-finite origin {:?}", self.origin)));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Continuous voxel index to world millimetres.
    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + index[a] * self.spacing[a])
    }

    /// World millimetres to continuous voxel index.
    pub fn world_to_voxel(&self, world: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (world[a] - self.origin[a]) / self.spacing[a])
    }

    /// World millimetres to the nearest voxel grid point (may lie outside the grid).
    pub fn world_to_nearest_voxel(&self, world: [f64; 3]) -> [i64; 3] {
        let v = self.world_to_voxel(world);
        std::array::from_fn(|a| v[a].round() as i64)
    }

    /// World z of slice `k`.
    pub fn slice_z(&self, k: f64) -> f64 {
        self.origin[2] + k * self.spacing[2]
    }

    /// World-space bounds `[min, max]` per axis spanned by voxel centres.
    pub fn world_bounds(&self) -> [[f64; 2]; 3] {
        std::array::from_fn(|a| {
            [
                self.origin[a],
                self.origin[a] + (self.dims[a] - 1) as f64 * self.spacing[a],
            ]
        })
    }
}

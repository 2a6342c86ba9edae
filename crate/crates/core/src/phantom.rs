//! Seeded synthetic volumes with exact ground truth.
//!
//! Objects are additive Gaussian profiles over a constant background plus
//! white noise. Nodules are motionless spheres, vessels are tubes whose
//! cross-section drifts laterally from slice to slice, and transients flash
//! on one or two slices and vanish.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Box2D, VolumeGeometry};
use crate::seeds;
use crate::volume::{Volume, VoxelData};
use crate::{Error, Result};

/// Cross-sections narrower than this many pixels are left out of 2D truth.
pub const MIN_TRUTH_EXTENT_PX: f64 = 3.0;

/// Scans per benchmark suite.
pub const SUITE_SCANS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PhantomObject {
    Nodule {
        center: [f64; 3],
        diameter: f64,
        intensity: f64,
    },
    Vessel {
        /// Axis position at `center[2]`.
        center: [f64; 3],
        diameter: f64,
        intensity: f64,
        /// In-plane unit vector of the lateral drift.
        direction: [f64; 2],
        /// Lateral drift in mm per slice.
        drift: f64,
    },
    Transient {
        center: [f64; 3],
        diameter: f64,
        intensity: f64,
        span_slices: usize,
    },
}

impl PhantomObject {
    pub fn diameter(&self) -> f64 {
        match self {
            PhantomObject::Nodule { diameter, .. }
            | PhantomObject::Vessel { diameter, .. }
            | PhantomObject::Transient { diameter, .. } => *diameter,
        }
    }

    pub fn center(&self) -> [f64; 3] {
        match self {
            PhantomObject::Nodule { center, .. }
            | PhantomObject::Vessel { center, .. }
            | PhantomObject::Transient { center, .. } => *center,
        }
    }

    fn intensity(&self) -> f64 {
        match self {
            PhantomObject::Nodule { intensity, .. }
            | PhantomObject::Vessel { intensity, .. }
            | PhantomObject::Transient { intensity, .. } => *intensity,
        }
    }

    /// In-plane cross-section `(center_x, center_y, radius)` in mm on slice `k`, if any.
    pub fn cross_section(&self, geom: &VolumeGeometry, k: usize) -> Option<(f64, f64, f64)> {
        let z = geom.slice_z(k as f64);
        match *self {
            PhantomObject::Nodule {
                center, diameter, ..
            } => {
                let r = 0.5 * diameter;
                let dz = z - center[2];
                (dz.abs() < r).then(|| (center[0], center[1], (r * r - dz * dz).sqrt()))
            }
            PhantomObject::Vessel {
                center,
                diameter,
                direction,
                drift,
                ..
            } => {
                let steps = (z - center[2]) / geom.spacing[2];
                Some((
                    center[0] + direction[0] * drift * steps,
                    center[1] + direction[1] * drift * steps,
                    0.5 * diameter,
                ))
            }
            PhantomObject::Transient {
                center,
                diameter,
                span_slices,
                ..
            } => {
                let first = ((center[2] - geom.origin[2]) / geom.spacing[2]).round() as i64;
                let k = k as i64;
                (k >= first && k < first + span_slices as i64)
                    .then_some((center[0], center[1], 0.5 * diameter))
            }
        }
    }

    fn validate(&self, geom: &VolumeGeometry) -> Result<()> {
        let d = self.diameter();
        if !(d > 0.0 && d.is_finite()) || !self.intensity().is_finite() {
            return Err(Error::invalid(format!("object has invalid size/intensity: {self:?}")));
        }
        let b = geom.world_bounds();
        let c = self.center();
        let r = 0.5 * d;
        let inside = |axis: usize, margin: f64| {
            c[axis] - margin >= b[axis][0] && c[axis] + margin <= b[axis][1]
        };
        let ok = match self {
            PhantomObject::Nodule { .. } => (0..3).all(|a| inside(a, r)),
            PhantomObject::Vessel {
                direction, drift, ..
            } => {
                let norm = direction[0].hypot(direction[1]);
                if (norm - 1.0).abs() > 1e-9 || !(*drift >= 0.0 && drift.is_finite()) {
                    return Err(Error::invalid(format!(
                        "vessel direction must be a unit vector and drift >= 0: {self:?}"
                    )));
                }
                (0..3).all(|a| inside(a, 0.0))
            }
            PhantomObject::Transient { span_slices, .. } => {
                if *span_slices == 0 {
                    return Err(Error::invalid("transient span_slices must be >= 1"));
                }
                inside(0, r) && inside(1, r) && inside(2, 0.0)
            }
        };
        if !ok {
            return Err(Error::invalid(format!(
                "object lies outside the volume bounds {b:?}: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub series_id: String,
    pub geom: VolumeGeometry,
    pub background_hu: f64,
    pub noise_sigma: f64,
    pub objects: Vec<PhantomObject>,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite())
            || !self.background_hu.is_finite()
        {
            return Err(Error::invalid("noise_sigma must be >= 0 and background finite"));
        }
        for o in &self.objects {
            o.validate(&self.geom)?;
        }
        Ok(())
    }
}

/// A true nodule: centre and diameter in world millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthNodule {
    pub series_id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub diameter: f64,
}

impl GroundTruthNodule {
    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub truths: Vec<GroundTruthNodule>,
    /// Per-slice boxes of every nodule cross-section at least 3 px wide.
    pub slice_truths: Vec<Vec<Box2D>>,
}

/// Renders the volume and its ground truth.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let geom = &spec.geom;
    let [nx, ny, nz] = geom.dims;
    let mut data = vec![spec.background_hu as f32; geom.n_voxels()];

    for obj in &spec.objects {
        let amp = obj.intensity();
        for k in 0..nz {
            let Some((cx, cy, rho)) = obj.cross_section(geom, k) else {
                continue;
            };
            // Gaussian profile whose scale-normalised LoG peaks at radius `rho`.
            let sigma = rho / SQRT_2;
            let reach = 4.0 * sigma;
            let inv = 1.0 / (2.0 * sigma * sigma);
            let [vx, vy, _] = geom.world_to_voxel([cx, cy, 0.0]);
            let (rx, ry) = (reach / geom.spacing[0], reach / geom.spacing[1]);
            let x_lo = (vx - rx).floor().max(0.0) as usize;
            let y_lo = (vy - ry).floor().max(0.0) as usize;
            let x_hi = ((vx + rx).ceil()).min(nx as f64 - 1.0);
            let y_hi = ((vy + ry).ceil()).min(ny as f64 - 1.0);
            if x_hi < 0.0 || y_hi < 0.0 {
                continue;
            }
            for y in y_lo..=y_hi as usize {
                let dy = geom.origin[1] + y as f64 * geom.spacing[1] - cy;
                for x in x_lo..=x_hi as usize {
                    let dx = geom.origin[0] + x as f64 * geom.spacing[0] - cx;
                    let d2 = dx * dx + dy * dy;
                    if d2 <= reach * reach {
                        data[x + nx * (y + ny * k)] += (amp * (-d2 * inv).exp()) as f32;
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
        let mut rng = seeds::rng(spec.seed, "voxel-noise", 0);
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    let truths: Vec<GroundTruthNodule> = spec
        .objects
        .iter()
        .filter_map(|o| match o {
            PhantomObject::Nodule {
                center, diameter, ..
            } => Some(GroundTruthNodule {
                series_id: spec.series_id.clone(),
                x: center[0],
                y: center[1],
                z: center[2],
                diameter: *diameter,
            }),
            _ => None,
        })
        .collect();
    let slice_truths = nodule_slice_truths(&truths, geom);
    let volume = Volume::new(geom.clone(), VoxelData::F32(data))?;
    Ok(Phantom {
        volume,
        truths,
        slice_truths,
    })
}

/// Per-slice 2D truth boxes implied by spherical nodules.
pub fn nodule_slice_truths(truths: &[GroundTruthNodule], geom: &VolumeGeometry) -> Vec<Vec<Box2D>> {
    (0..geom.dims[2])
        .map(|k| {
            let z = geom.slice_z(k as f64);
            truths
                .iter()
                .filter_map(|t| {
                    let r = 0.5 * t.diameter;
                    let dz = z - t.z;
                    if dz.abs() >= r {
                        return None;
                    }
                    let rho = (r * r - dz * dz).sqrt();
                    let (w, h) = (2.0 * rho / geom.spacing[0], 2.0 * rho / geom.spacing[1]);
                    if w.min(h) < MIN_TRUTH_EXTENT_PX {
                        return None;
                    }
                    let c = geom.world_to_voxel([t.x, t.y, t.z]);
                    Some(Box2D { cx: c[0], cy: c[1], w, h })
                })
                .collect()
        })
        .collect()
}

/// Geometry shared by every benchmark scan: 128 x 128 x 64 voxels.
pub fn suite_geometry() -> VolumeGeometry {
    VolumeGeometry {
        dims: [128, 128, 64],
        spacing: [0.75, 0.75, 1.0],
        origin: [-48.0, -48.0, -120.0],
    }
}

/// The default 20-scan benchmark suite.
pub fn default_benchmark_suite(seed: u64) -> Vec<PhantomSpec> {
    benchmark_suite(seed, SUITE_SCANS)
}

/// `n_scans` benchmark scans, each with 2-4 nodules (4-20 mm), 4-8 vessels and
/// 3-6 transients placed so nodules never touch a distractor.
pub fn benchmark_suite(seed: u64, n_scans: usize) -> Vec<PhantomSpec> {
    (0..n_scans).map(|i| suite_scan(seed, i)).collect()
}

fn suite_scan(seed: u64, index: usize) -> PhantomSpec {
    let geom = suite_geometry();
    let mut rng = seeds::rng(seed, "suite-scan", index as u64);
    let b = geom.world_bounds();
    let mut objects: Vec<PhantomObject> = Vec::new();

    let n_nodules = rng.random_range(2..=4);
    let n_vessels = rng.random_range(4..=8);
    let n_transients = rng.random_range(3..=6);

    let mut nodules: Vec<([f64; 3], f64)> = Vec::new();
    while nodules.len() < n_nodules {
        let d: f64 = rng.random_range(4.0..=20.0);
        let r = 0.5 * d;
        let c = [
            rng.random_range(b[0][0] + r + 3.0..b[0][1] - r - 3.0),
            rng.random_range(b[1][0] + r + 3.0..b[1][1] - r - 3.0),
            rng.random_range(b[2][0] + r + 2.0..b[2][1] - r - 2.0),
        ];
        let clear = nodules.iter().all(|(o, od)| dist3(c, *o) > r + 0.5 * od + 6.0);
        if clear {
            nodules.push((c, d));
            objects.push(PhantomObject::Nodule {
                center: c,
                diameter: d,
                intensity: rng.random_range(400.0..700.0),
            });
        }
    }

    // Distractors are accepted only if no cross-section comes near a nodule.
    let keeps_clear = |obj: &PhantomObject, objects: &[PhantomObject]| {
        let r_obj = 0.5 * obj.diameter();
        (0..geom.dims[2]).all(|k| {
            let Some((x, y, _)) = obj.cross_section(&geom, k) else {
                return true;
            };
            objects.iter().all(|n| match n {
                PhantomObject::Nodule {
                    center, diameter, ..
                } => {
                    let dz = geom.slice_z(k as f64) - center[2];
                    let r_n = 0.5 * diameter;
                    dz.abs() >= r_n + 2.0
                        || (x - center[0]).hypot(y - center[1]) > r_n + r_obj + 4.0
                }
                _ => true,
            })
        })
    };

    let mut placed = 0;
    let mut attempts = 0;
    while placed < n_vessels && attempts < 10_000 {
        attempts += 1;
        let angle: f64 = rng.random_range(0.0..2.0 * PI);
        let v = PhantomObject::Vessel {
            center: [
                rng.random_range(b[0][0] + 5.0..b[0][1] - 5.0),
                rng.random_range(b[1][0] + 5.0..b[1][1] - 5.0),
                rng.random_range(b[2][0]..b[2][1]),
            ],
            diameter: rng.random_range(2.5..6.0),
            intensity: rng.random_range(300.0..650.0),
            direction: [angle.cos(), angle.sin()],
            drift: rng.random_range(0.3..1.5),
        };
        if keeps_clear(&v, &objects) {
            objects.push(v);
            placed += 1;
        }
    }

    placed = 0;
    attempts = 0;
    while placed < n_transients && attempts < 10_000 {
        attempts += 1;
        let d: f64 = rng.random_range(5.0..12.0);
        let r = 0.5 * d;
        let span = if rng.random_bool(0.7) { 1 } else { 2 };
        let k0 = rng.random_range(0..=geom.dims[2] - span);
        let t = PhantomObject::Transient {
            center: [
                rng.random_range(b[0][0] + r + 3.0..b[0][1] - r - 3.0),
                rng.random_range(b[1][0] + r + 3.0..b[1][1] - r - 3.0),
                geom.slice_z(k0 as f64),
            ],
            diameter: d,
            intensity: rng.random_range(300.0..700.0),
            span_slices: span,
        };
        let clear_of_vessels = (0..geom.dims[2]).all(|k| {
            let Some((x, y, _)) = t.cross_section(&geom, k) else {
                return true;
            };
            objects.iter().all(|o| match o {
                PhantomObject::Vessel { diameter, .. } => {
                    let (vx, vy, _) = o.cross_section(&geom, k).expect("vessels span all slices");
                    (x - vx).hypot(y - vy) > r + 0.5 * diameter + 4.0
                }
                _ => true,
            })
        });
        if clear_of_vessels && keeps_clear(&t, &objects) {
            objects.push(t);
            placed += 1;
        }
    }

    PhantomSpec {
        series_id: format!("phantom-{seed}-{index:03}"),
        geom,
        background_hu: -800.0,
        noise_sigma: 40.0,
        objects,
        seed: seeds::derive(seed, "suite-noise", index as u64),
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

//! Sequence-aware nodule detection post-processing.
//!
//! The pipeline treats a volumetric scan as a video of slices:
//!
//! 1. **Detector** – per-slice scale-space blob proposals scored by a linear
//!    model trained with focal loss and k:1 negative resampling, followed by NMS.
//! 2. **Tracks** – per-slice detections are linked into identity tracks.
//! 3. **MSP** – multi-slice propagation fills short gaps inside a track.
//! 4. **MLGS** – motion features per track and a random forest suppress
//!    objects that drift or flash in and out.
//! 5. **FROC** – hit matching and free-response ROC evaluation.
//!
//! [`phantom`] generates seeded synthetic volumes with exact ground truth and
//! [`pipeline`] wires everything together with file formats and reports.

pub mod detector;
pub mod error;
pub mod froc;
pub mod geometry;
pub mod mlgs;
pub mod msp;
pub mod phantom;
pub mod pipeline;
pub mod seeds;
pub mod tracks;
pub mod volume;

pub use error::{Error, Result};

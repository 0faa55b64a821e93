//! Localization distillation for distribution-based bounding-box regression.
//!
//! Each box edge is predicted as a categorical distribution over a uniform
//! bin grid. A student detector head is distilled from a teacher by matching
//! the temperature-softened edge distributions (LD) and class distributions
//! (KD), applied selectively on the main positive region and on the valuable
//! localization region (VLR) around it.
//!
//! Modules:
//! - [`geometry`]: boxes and the IoU / GIoU / DIoU metrics, rotated-box coding
//! - [`boxdist`]: bin grids, generalized SoftMax, two-hot targets
//! - [`losses`]: CE, KD, LD, DFL, GIoU, TBR, feature imitation and the composite loss
//! - [`regions`]: main-region and VLR assignment
//! - [`theory`]: numerical certificates for the LD/KD equivalence and gradient rescaling
//! - [`harness`]: synthetic teacher-student experiments behind a scheme registry

pub mod boxdist;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod regions;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};

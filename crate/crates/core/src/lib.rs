//! Calcification phenotyping for volumetric grayscale stacks.
//!
//! The crate covers the whole chain from a raw stack to a quantitative report:
//!
//! * [`volume`]: voxel volumes, masks, annotations and their file formats.
//! * [`optim`]: cross-entropy classifier and the LBFGS minimizer that trains it.
//! * [`segnet`]: two-stage sample/lipid segmentation plus threshold calcification masks.
//! * [`metrics`]: Dice/Jaccard scoring and stage timings.
//! * [`particles`]: 3D connected components and micro/macro size classes.
//! * [`phenotype`]: clustering, sparse/dense topology, lipid co-localization and the report.
//! * [`collagen`]: collagen-density coupling analysis.
//! * [`phantom`]: synthetic stacks with planted ground truth.
//! * [`pipeline`]: end-to-end orchestration used by the CLI.

pub mod collagen;
pub mod error;
pub mod metrics;
pub mod morphology;
pub mod optim;
pub mod particles;
pub mod phantom;
pub mod phenotype;
pub mod pipeline;
pub mod segnet;
pub mod volume;

pub use error::{Error, Result};

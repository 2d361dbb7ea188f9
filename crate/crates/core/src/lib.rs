//! Lesion-level classification on multi-planar reformatted (MPR) coronary
//! image stacks.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`volume`]: scalar volumes and world-coordinate trilinear sampling,
//! * [`phantom`]: synthetic contrast-filled vessels with parametric stenoses,
//! * [`reformat`]: rotation-minimizing frames, MPR extraction, cylindrical
//!   masking and in-plane rotations,
//! * [`shaping`]: padding strategies, cube sequencing, in-plane downscaling
//!   and the two-slice 2.5D input,
//! * [`labels`]: dataset manifests, targets and the sample cache,
//! * [`nn`]: a small deterministic CNN engine and the 2.5D model,
//! * [`eval`]: metrics, patient-wise repeated k-fold splits and the
//!   cross-validation driver.
//!
//! A guide with runnable snippets lives in the `book/` directory of the
//! repository.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod geometry;
pub mod labels;
pub mod nn;
pub mod phantom;
mod rawio;
pub mod reformat;
pub mod seed;
pub mod shaping;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{PointMm, Vec3};
pub use volume::{load_volume, store_volume, Volume3D};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
pub struct BookIntroduction;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/volumes.md")]
pub struct BookVolumes;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/phantoms.md")]
pub struct BookPhantoms;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/reformat.md")]
pub struct BookReformat;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/shaping.md")]
pub struct BookShaping;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
pub struct BookTraining;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
pub struct BookEvaluation;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub struct BookCli;

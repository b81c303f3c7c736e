//! Spatial likelihood voting (SLV) for weakly supervised object detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: half-open pixel boxes, IoU, NMS, connected components.
//! * [`mil`]: two-stream MIL scoring, the image-level loss and the
//!   cluster-weighted refinement loss, with analytic gradients.
//! * [`voting`]: candidate selection, likelihood accumulation, binarization
//!   and rectangle voting that turn averaged proposal scores into pseudo
//!   ground truth.
//! * [`supervision`]: target assignment, box offset codec, the
//!   classification + smooth-L1 multi-task loss and the ramped loss weight.
//! * [`eval`]: detection matching, average precision, mAP and CorLoc.
//! * [`pipeline`]: dataset I/O, the synthetic scene generator, the toy
//!   trainer and the commands exposed by the `slv` binary.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod mil;
pub mod pipeline;
pub mod supervision;
pub mod voting;

pub use error::{Error, Result};
pub use geometry::{BBox, BinaryGrid};
pub use mil::{ClusterSet, ImageLabel, ScoreKind, ScoreMatrix};
pub use voting::{LikelihoodMap, Supervision, VoteConfig};

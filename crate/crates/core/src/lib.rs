//! Long-term RGB-D object tracking by reconstruction.
//!
//! The tracker couples a set of view-specific discriminative correlation
//! filters with a surfel reconstruction of the target. The 3D model supplies
//! the spatial support used when learning the filters, and its projected
//! aspect decides when a new view-specific filter is stored for later
//! re-detection.
//!
//! Module map:
//!
//! * [`ingest`] - frames, sequences, depth utilities and the synthetic generator
//! * [`features`] - HOG and color-name feature stacks
//! * [`dcf`] - constrained filter learning, localization and scale estimation
//! * [`segmentation`] - color and depth histogram segmentation
//! * [`preimage`] - surfel model, ICP alignment and occupancy masks
//! * [`multiview`] - snapshots, presence test and re-detection
//! * [`tracker`] - the per-frame tracking loop and its configuration
//! * [`eval`] - overlap metrics and reports

// Negated float comparisons are used on purpose so that NaN takes the
// rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dcf;
pub mod error;
pub mod eval;
pub mod features;
pub mod fft;
pub mod grid;
pub mod ingest;
pub mod multiview;
pub mod preimage;
pub mod segmentation;
pub mod selftest;
pub mod tracker;

pub use error::{OtrError, Result};
pub use grid::Grid;
pub use ingest::{BBox, CameraIntrinsics, Frame, Sequence};
pub use tracker::{Mode, TrackResult, Tracker, TrackerConfig};

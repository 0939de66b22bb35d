//! Alignment, surface losses and evaluation for volumetric OCT.
//!
//! Volumes are stored B-scan major as `(b, a, r)` so that every A-scan is a
//! contiguous slice. Surface positions are 1-based rows.

pub mod align;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod post;
pub mod stm;
pub mod synth;
pub mod transverse;
pub mod volume;

pub use error::{OctError, Result};
pub use volume::{
    ClassProbabilities, Dims, DisplacementField, LabelMap, OctVolume, Spacing, SurfaceDistribution,
    SurfaceSet,
};

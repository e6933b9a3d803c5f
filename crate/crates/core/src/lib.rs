//! Spherical-metric pressure, Bowen zeros and Patterson–Sullivan measures
//! for exponential, sine, tangent and `z eᶻ` maps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod logsum;
pub mod maps;
pub mod measure;
pub mod pressure;
pub mod tree;
pub mod validators;

pub use error::{LabError, Result};
pub use maps::{BranchIndex, Family, OrbitClass, SphericalPoint, TranscendentalMap};

//! A desk-scale laboratory for sparsely gated mixture-of-experts layers.

pub mod error;
pub mod ndcore;
pub mod routing;
pub mod cmr;
pub mod model;
pub mod curriculum;
pub mod corpus;
pub mod trainer;
pub mod analysis;

pub use error::{Error, Result};

//! Neural maximal-correlation (HGR) estimation and adversarial
//! fair-representation learning for continuous sensitive attributes.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fairtrain;
pub mod fingerprint;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod synthetic;

pub use data::{Dataset, SampleMatrix};
pub use error::{Error, Result};

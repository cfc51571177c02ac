//! Joint multi-image segmentation with a multivariate mixture model.
//!
//! Several co-acquired volumes of one subject are segmented together: each
//! tissue label has a Gaussian mixture per image, an atlas supplies the spatial
//! prior, and per-slice motion of every image and a deformation of the atlas are
//! estimated inside the same log-likelihood. Parameters are optimized by
//! alternating EM (segmentation) with gradient ascent (registration).

pub mod em;
pub mod error;
pub mod icm;
pub mod io;
pub mod metrics;
pub mod model;
pub mod observe;
pub mod phantom;
pub mod registration;
pub mod volume;

mod parallel;

pub use error::{Error, Result};

//! Transformations embedded in the likelihood: per-slice in-plane motion of
//! each image and the free-form deformation of the atlas.

mod ascent;
mod ffd;
pub(crate) mod gradient;
mod slices;

pub use ascent::{gradient_ascent_step, Family, StepControl, StepOutcome};
pub use ffd::{apply_ffd, bspline_basis, FfdDeformation, FfdSupport, DEFAULT_CONTROL_SPACING_MM};
pub use gradient::{ffd_gradient, slice_gradient, slice_log_likelihood};
pub use slices::{apply_slice_transform, SliceAffineSet, SliceMode, SliceStack};

pub(crate) use slices::{map_jacobian, map_point};

use crate::error::Result;
use crate::volume::MultivariateImageSet;

/// All registration parameters: slice transforms of every image plus the atlas FFD.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformState {
    pub slices: SliceAffineSet,
    pub ffd: FfdDeformation,
}

impl TransformState {
    /// Identity transforms for `images`, with an FFD control lattice of
    /// `ffd_spacing_mm` covering the common space.
    pub fn identity(images: &MultivariateImageSet, mode: SliceMode, ffd_spacing_mm: f64) -> Result<Self> {
        Ok(Self {
            slices: SliceAffineSet::identity(&images.images, mode),
            ffd: FfdDeformation::covering(&images.common, ffd_spacing_mm)?,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.slices.is_identity() && self.ffd.is_identity()
    }
}

//! Per-slice in-plane transforms of multi-slice images.
//!
//! Slices are planes of constant z in an image's native lattice. A common-space
//! point is attributed to the nearest slice plane of each image and moved
//! in-plane by that slice's transform; z is never changed.

use crate::error::{Error, Result};
use crate::volume::{Point3, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceMode {
    /// Translation plus rotation about the slice center: `[tx, ty, theta]`.
    #[default]
    Rigid,
    /// Translation plus a free 2x2 linear part `I + A`: `[tx, ty, a11, a12, a21, a22]`.
    Affine,
}

impl SliceMode {
    pub fn n_params(self) -> usize {
        match self {
            SliceMode::Rigid => 3,
            SliceMode::Affine => 6,
        }
    }

    pub fn param_name(self, j: usize) -> &'static str {
        match (self, j) {
            (_, 0) => "tx",
            (_, 1) => "ty",
            (SliceMode::Rigid, 2) => "theta",
            (SliceMode::Affine, 2) => "a11",
            (SliceMode::Affine, 3) => "a12",
            (SliceMode::Affine, 4) => "a21",
            (SliceMode::Affine, 5) => "a22",
            _ => "?",
        }
    }

    /// Whether parameter `j` is a translation (mm) rather than an angle or
    /// linear coefficient.
    pub fn is_translation(self, j: usize) -> bool {
        j < 2
    }
}

/// Geometry of one image's slice stack.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    /// In-plane rotation center (mm), the middle of the image hull.
    pub center: [f64; 2],
    pub z_origin: f64,
    pub z_spacing: f64,
    pub n_slices: usize,
    /// Parameter vector of each slice, `mode.n_params()` entries each.
    pub params: Vec<Vec<f64>>,
}

impl SliceStack {
    fn for_image(grid: &VoxelGrid, mode: SliceMode) -> Self {
        let l = &grid.lattice;
        let (lo, hi) = l.bounds();
        Self {
            center: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])],
            z_origin: l.origin[2],
            z_spacing: l.spacing[2],
            n_slices: l.dims[2],
            params: vec![vec![0.0; mode.n_params()]; l.dims[2]],
        }
    }

    /// World height of slice `s`'s plane.
    pub fn plane_z(&self, s: usize) -> f64 {
        self.z_origin + s as f64 * self.z_spacing
    }

    /// Nearest slice plane to world height `z`, if `z` lies within the stack's
    /// slab extent.
    pub fn slice_of(&self, z: f64) -> Option<usize> {
        let q = (z - self.z_origin) / self.z_spacing;
        if q < -0.5 - 1e-9 || q > self.n_slices as f64 - 0.5 + 1e-9 {
            return None;
        }
        Some((q.round().max(0.0) as usize).min(self.n_slices - 1))
    }
}

/// In-plane transforms for every slice of every image.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceAffineSet {
    pub mode: SliceMode,
    pub stacks: Vec<SliceStack>,
}

impl SliceAffineSet {
    pub fn identity(images: &[VoxelGrid], mode: SliceMode) -> Self {
        Self {
            mode,
            stacks: images.iter().map(|g| SliceStack::for_image(g, mode)).collect(),
        }
    }

    pub fn params(&self, image: usize, slice: usize) -> &[f64] {
        &self.stacks[image].params[slice]
    }

    pub fn set_params(&mut self, image: usize, slice: usize, p: &[f64]) -> Result<()> {
        let n = self.mode.n_params();
        if p.len() != n {
            return Err(Error::InvalidParameter(format!(
                "slice transform expects {n} parameters, got {}",
                p.len()
            )));
        }
        self.stacks[image].params[slice].copy_from_slice(p);
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.stacks
            .iter()
            .all(|s| s.params.iter().all(|p| p.iter().all(|&v| v == 0.0)))
    }

    /// Slice of `image` that owns world point `x`.
    pub fn slice_of(&self, image: usize, x: Point3) -> Option<usize> {
        self.stacks[image].slice_of(x[2])
    }

    /// `G_{i,s}(x)` with `s` the nearest slice of image `i`; points beyond the
    /// stack's z extent are returned unchanged.
    pub fn apply(&self, image: usize, x: Point3) -> Point3 {
        let stack = &self.stacks[image];
        match stack.slice_of(x[2]) {
            Some(s) => map_point(self.mode, &stack.params[s], stack.center, x),
            None => x,
        }
    }

    /// Where image `image` is read for common point `x`: the owning slice's
    /// in-plane transform, on that slice's plane. A thick slice stands for its
    /// whole slab, so nothing is blended in from neighboring slices.
    pub fn sample_point(&self, image: usize, x: Point3) -> Point3 {
        let stack = &self.stacks[image];
        match stack.slice_of(x[2]) {
            Some(s) => {
                let mut y = map_point(self.mode, &stack.params[s], stack.center, x);
                y[2] = stack.plane_z(s);
                y
            }
            None => x,
        }
    }

    /// Inverse of the slice transform that owns `y` after mapping; used for
    /// pulling labels back into native image lattices.
    pub fn apply_inverse(&self, image: usize, slice: usize, y: Point3) -> Option<Point3> {
        let stack = &self.stacks[image];
        let [a, b, c, d] = linear_part(self.mode, &stack.params[slice]);
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return None;
        }
        let p = &stack.params[slice];
        let u = y[0] - stack.center[0] - p[0];
        let v = y[1] - stack.center[1] - p[1];
        Some([
            stack.center[0] + (d * u - b * v) / det,
            stack.center[1] + (-c * u + a * v) / det,
            y[2],
        ])
    }
}

/// 2x2 linear part `[a, b, c, d]` (row-major) of a slice transform.
#[inline]
pub(crate) fn linear_part(mode: SliceMode, p: &[f64]) -> [f64; 4] {
    match mode {
        SliceMode::Rigid => {
            let (s, c) = p[2].sin_cos();
            [c, -s, s, c]
        }
        SliceMode::Affine => [1.0 + p[2], p[3], p[4], 1.0 + p[5]],
    }
}

#[inline]
pub(crate) fn map_point(mode: SliceMode, p: &[f64], center: [f64; 2], x: Point3) -> Point3 {
    let [a, b, c, d] = linear_part(mode, p);
    let dx = x[0] - center[0];
    let dy = x[1] - center[1];
    [
        center[0] + a * dx + b * dy + p[0],
        center[1] + c * dx + d * dy + p[1],
        x[2],
    ]
}

/// Derivatives of the mapped in-plane position with respect to each parameter.
#[inline]
pub(crate) fn map_jacobian(mode: SliceMode, p: &[f64], center: [f64; 2], x: Point3, out: &mut [[f64; 2]]) {
    let dx = x[0] - center[0];
    let dy = x[1] - center[1];
    out[0] = [1.0, 0.0];
    out[1] = [0.0, 1.0];
    match mode {
        SliceMode::Rigid => {
            let (s, c) = p[2].sin_cos();
            out[2] = [-s * dx - c * dy, c * dx - s * dy];
        }
        SliceMode::Affine => {
            out[2] = [dx, 0.0];
            out[3] = [dy, 0.0];
            out[4] = [0.0, dx];
            out[5] = [0.0, dy];
        }
    }
}

/// Free-function form of [`SliceAffineSet::apply`].
pub fn apply_slice_transform(set: &SliceAffineSet, image: usize, x: Point3) -> Point3 {
    set.apply(image, x)
}

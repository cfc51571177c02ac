//! Dense 3D volumes on regular lattices.
//!
//! A voxel represents the box of one spacing centered on its world position, so
//! the hull of a lattice is the union of its voxel boxes. Inside the hull but
//! beyond the outermost voxel centers, sampling holds the edge value.

use crate::error::{Error, Result};

/// A world-space position in millimetres.
pub type Point3 = [f64; 3];

/// Snap tolerance in index units for points lying on lattice planes.
const NODE_TOL: f64 = 1e-9;

/// Regular voxel lattice: dims, spacing (mm) and world position of voxel (0,0,0).
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: Point3,
}

impl Lattice {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Point3) -> Result<Self> {
        for a in 0..3 {
            if dims[a] == 0 {
                return Err(Error::InvalidParameter(format!("dims[{a}] must be at least 1")));
            }
            if !(spacing[a] > 0.0 && spacing[a].is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "spacing[{a}] must be positive, got {}",
                    spacing[a]
                )));
            }
            if !origin[a].is_finite() {
                return Err(Error::InvalidParameter(format!("origin[{a}] is not finite")));
            }
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn voxel_to_world(&self, q: [f64; 3]) -> Point3 {
        [
            self.origin[0] + q[0] * self.spacing[0],
            self.origin[1] + q[1] * self.spacing[1],
            self.origin[2] + q[2] * self.spacing[2],
        ]
    }

    #[inline]
    pub fn world_to_voxel(&self, p: Point3) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World position of the voxel with linear index `idx`.
    #[inline]
    pub fn center(&self, idx: usize) -> Point3 {
        let [i, j, k] = self.ijk(idx);
        self.voxel_to_world([i as f64, j as f64, k as f64])
    }

    /// Hull test on continuous index coordinates.
    #[inline]
    pub fn contains_index(&self, q: [f64; 3]) -> bool {
        (0..3).all(|a| q[a] >= -0.5 - NODE_TOL && q[a] <= self.dims[a] as f64 - 0.5 + NODE_TOL)
    }

    #[inline]
    pub fn contains(&self, p: Point3) -> bool {
        self.contains_index(self.world_to_voxel(p))
    }

    /// World-space hull box `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let lo = self.voxel_to_world([-0.5; 3]);
        let hi = self.voxel_to_world([
            self.dims[0] as f64 - 0.5,
            self.dims[1] as f64 - 0.5,
            self.dims[2] as f64 - 0.5,
        ]);
        (lo, hi)
    }

    /// Nearest voxel to a world point, if the point lies in the hull.
    pub fn nearest_voxel(&self, p: Point3) -> Option<usize> {
        let q = self.world_to_voxel(p);
        if !self.contains_index(q) {
            return None;
        }
        let r: [usize; 3] =
            std::array::from_fn(|a| (q[a].round().max(0.0) as usize).min(self.dims[a] - 1));
        Some(self.index(r[0], r[1], r[2]))
    }
}

/// A lattice together with one real value per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::InvalidParameter(format!(
                "value count {} does not match lattice size {}",
                values.len(),
                lattice.len()
            )));
        }
        Ok(Self { lattice, values })
    }

    pub fn filled(lattice: Lattice, value: f64) -> Self {
        let n = lattice.len();
        Self {
            lattice,
            values: vec![value; n],
        }
    }

    pub fn from_fn(lattice: Lattice, f: impl Fn(Point3) -> f64) -> Self {
        let values = (0..lattice.len()).map(|i| f(lattice.center(i))).collect();
        Self { lattice, values }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.lattice.index(i, j, k)]
    }

    /// `(min, max)` of the stored values.
    pub fn value_range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear interpolation at `p`, or `None` outside the hull.
    #[inline]
    pub fn sample(&self, p: Point3) -> Option<f64> {
        Stencil::at(&self.lattice, p).map(|s| s.value(&self.values))
    }

    /// Spatial gradient (value per mm) of the trilinear interpolant at `p`.
    ///
    /// On a lattice plane the one-sided slopes of the two adjacent cells are
    /// averaged, which is the limit of a symmetric difference quotient there.
    #[inline]
    pub fn gradient(&self, p: Point3) -> Option<[f64; 3]> {
        Stencil::at(&self.lattice, p).map(|s| s.gradient(&self.values))
    }
}

/// Trilinear interpolation at a world point (`None` is the OUTSIDE marker).
pub fn trilinear_sample(grid: &VoxelGrid, p: Point3) -> Option<f64> {
    grid.sample(p)
}

/// Gradient of the trilinear interpolant at a world point, per mm.
pub fn image_gradient(grid: &VoxelGrid, p: Point3) -> Option<[f64; 3]> {
    grid.gradient(p)
}

#[derive(Clone, Copy, Debug, Default)]
struct AxisStencil {
    idx: [usize; 2],
    w: [f64; 2],
    d_idx: [usize; 3],
    d_w: [f64; 3],
    d_n: usize,
}

impl AxisStencil {
    fn new(q: f64, n: usize, inv_spacing: f64) -> Self {
        let mut s = AxisStencil::default();
        if n == 1 {
            s.w = [1.0, 0.0];
            return s;
        }
        let last = (n - 1) as f64;
        let qc = q.clamp(0.0, last);
        let node = qc.round();
        if (qc - node).abs() <= NODE_TOL {
            let m = node as usize;
            s.idx = [m, m];
            s.w = [1.0, 0.0];
            // Only points on the plane itself (not in the clamped margin) see slopes.
            if (q - node).abs() <= NODE_TOL {
                let h = 0.5 * inv_spacing;
                let mut push = |i: usize, w: f64| {
                    s.d_idx[s.d_n] = i;
                    s.d_w[s.d_n] = w;
                    s.d_n += 1;
                };
                if m >= 1 {
                    push(m - 1, -h);
                }
                match (m >= 1, m + 1 < n) {
                    (true, true) => push(m + 1, h),
                    (true, false) => push(m, h),
                    (false, true) => {
                        push(m, -h);
                        push(m + 1, h);
                    }
                    (false, false) => {}
                }
            }
            return s;
        }
        let i0 = (qc.floor() as usize).min(n - 2);
        let f = qc - i0 as f64;
        s.idx = [i0, i0 + 1];
        s.w = [1.0 - f, f];
        if q > 0.0 && q < last {
            s.d_idx = [i0, i0 + 1, 0];
            s.d_w = [-inv_spacing, inv_spacing, 0.0];
            s.d_n = 2;
        }
        s
    }
}

/// Precomputed trilinear weights at one point, reusable across grids that
/// share a lattice.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    axes: [AxisStencil; 3],
    stride: [usize; 3],
}

impl Stencil {
    #[inline]
    pub fn at(lattice: &Lattice, p: Point3) -> Option<Self> {
        let q = lattice.world_to_voxel(p);
        if !lattice.contains_index(q) {
            return None;
        }
        let axes = std::array::from_fn(|a| {
            AxisStencil::new(q[a], lattice.dims[a], 1.0 / lattice.spacing[a])
        });
        Some(Self {
            axes,
            stride: [1, lattice.dims[0], lattice.dims[0] * lattice.dims[1]],
        })
    }

    #[inline]
    pub fn value(&self, values: &[f64]) -> f64 {
        let [x, y, z] = &self.axes;
        let mut acc = 0.0;
        for c in 0..2 {
            if z.w[c] == 0.0 {
                continue;
            }
            for b in 0..2 {
                let wyz = y.w[b] * z.w[c];
                if wyz == 0.0 {
                    continue;
                }
                let base = y.idx[b] * self.stride[1] + z.idx[c] * self.stride[2];
                for a in 0..2 {
                    if x.w[a] != 0.0 {
                        acc += x.w[a] * wyz * values[base + x.idx[a]];
                    }
                }
            }
        }
        acc
    }

    #[inline]
    pub fn gradient(&self, values: &[f64]) -> [f64; 3] {
        std::array::from_fn(|axis| self.partial(values, axis))
    }

    fn partial(&self, values: &[f64], axis: usize) -> f64 {
        let d = &self.axes[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let (s1, s2) = (&self.axes[o1], &self.axes[o2]);
        let mut acc = 0.0;
        for m in 0..d.d_n {
            // Interpolate across the other two axes first so that a flat field
            // cancels exactly.
            let mut plane = 0.0;
            for b in 0..2 {
                if s1.w[b] == 0.0 {
                    continue;
                }
                for c in 0..2 {
                    if s2.w[c] == 0.0 {
                        continue;
                    }
                    let idx = d.d_idx[m] * self.stride[axis]
                        + s1.idx[b] * self.stride[o1]
                        + s2.idx[c] * self.stride[o2];
                    plane += s1.w[b] * s2.w[c] * values[idx];
                }
            }
            acc += d.d_w[m] * plane;
        }
        acc
    }
}

/// Integer label volume on a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub lattice: Lattice,
    pub labels: Vec<u16>,
}

impl LabelVolume {
    /// Marker for voxels that received no label.
    pub const UNLABELED: u16 = u16::MAX;

    pub fn new(lattice: Lattice, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != lattice.len() {
            return Err(Error::InvalidParameter(format!(
                "label count {} does not match lattice size {}",
                labels.len(),
                lattice.len()
            )));
        }
        Ok(Self { lattice, labels })
    }

    pub fn to_grid(&self) -> VoxelGrid {
        VoxelGrid {
            lattice: self.lattice.clone(),
            values: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }

    pub fn from_grid(grid: &VoxelGrid) -> Result<Self> {
        let labels = grid
            .values
            .iter()
            .map(|&v| {
                if v >= 0.0 && v <= u16::MAX as f64 && v.fract() == 0.0 {
                    Ok(v as u16)
                } else {
                    Err(Error::InvalidParameter(format!("{v} is not a label value")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lattice: grid.lattice.clone(),
            labels,
        })
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// The co-acquired images of one subject plus the explicit common lattice Ω.
#[derive(Clone, Debug)]
pub struct MultivariateImageSet {
    pub images: Vec<VoxelGrid>,
    pub common: Lattice,
}

impl MultivariateImageSet {
    /// Uses the lattice of the first image as the common space.
    pub fn new(images: Vec<VoxelGrid>) -> Result<Self> {
        let common = images
            .first()
            .ok_or_else(|| Error::InvalidParameter("at least one image is required".into()))?
            .lattice
            .clone();
        Self::with_common(images, common)
    }

    pub fn with_common(images: Vec<VoxelGrid>, common: Lattice) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidParameter("at least one image is required".into()));
        }
        if images.len() > 32 {
            return Err(Error::InvalidParameter("at most 32 images are supported".into()));
        }
        Ok(Self { images, common })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

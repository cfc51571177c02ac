//! Cubic B-spline free-form deformation.

use crate::error::{Error, Result};
use crate::volume::{Lattice, Point3};

/// Default control-point spacing in mm.
pub const DEFAULT_CONTROL_SPACING_MM: f64 = 20.0;

/// Uniform cubic B-spline basis functions at local coordinate `u` in [0, 1).
#[inline]
pub fn bspline_basis(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Free-form deformation `D(x) = x + sum_d B(x; d) phi_d`.
///
/// Control points outside the lattice carry zero displacement, so the field
/// fades out beyond the lattice support.
#[derive(Clone, Debug, PartialEq)]
pub struct FfdDeformation {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// World position of control point (0, 0, 0).
    pub origin: Point3,
    /// Displacement (mm) per control point, x fastest.
    pub phi: Vec<[f64; 3]>,
}

/// The (up to) 64 control points influencing one location, with weights.
#[derive(Clone, Copy, Debug)]
pub struct FfdSupport {
    pub index: [usize; 64],
    pub weight: [f64; 64],
    pub len: usize,
}

impl FfdSupport {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.index[..self.len].iter().copied().zip(self.weight[..self.len].iter().copied())
    }
}

impl FfdDeformation {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Point3) -> Result<Self> {
        // Reuse lattice validation for the control grid.
        Lattice::new(dims, spacing, origin)?;
        Ok(Self {
            dims,
            spacing,
            origin,
            phi: vec![[0.0; 3]; dims[0] * dims[1] * dims[2]],
        })
    }

    /// Zero deformation whose control lattice gives every point of `domain`'s
    /// hull a full 4x4x4 support.
    pub fn covering(domain: &Lattice, spacing_mm: f64) -> Result<Self> {
        if !(spacing_mm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "control spacing must be positive, got {spacing_mm}"
            )));
        }
        let (lo, hi) = domain.bounds();
        let dims = std::array::from_fn(|a| ((hi[a] - lo[a]) / spacing_mm).floor() as usize + 4);
        let origin = std::array::from_fn(|a| lo[a] - spacing_mm);
        Self::new(dims, [spacing_mm; 3], origin)
    }

    pub fn n_control(&self) -> usize {
        self.phi.len()
    }

    #[inline]
    pub fn control_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn control_position(&self, idx: usize) -> Point3 {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        let (j, k) = (r % self.dims[1], r / self.dims[1]);
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    pub fn is_identity(&self) -> bool {
        self.phi.iter().all(|d| *d == [0.0; 3])
    }

    /// Control points and tensor-product weights `B(x; d)`.
    pub fn support(&self, x: Point3) -> FfdSupport {
        let mut base = [0i64; 3];
        let mut w = [[0.0; 4]; 3];
        for a in 0..3 {
            let t = (x[a] - self.origin[a]) / self.spacing[a];
            let f = t.floor();
            base[a] = f as i64 - 1;
            w[a] = bspline_basis(t - f);
        }
        let mut sup = FfdSupport {
            index: [0; 64],
            weight: [0.0; 64],
            len: 0,
        };
        for n in 0..4 {
            let k = base[2] + n as i64;
            if k < 0 || k >= self.dims[2] as i64 {
                continue;
            }
            for m in 0..4 {
                let j = base[1] + m as i64;
                if j < 0 || j >= self.dims[1] as i64 {
                    continue;
                }
                let wjk = w[1][m] * w[2][n];
                for l in 0..4 {
                    let i = base[0] + l as i64;
                    if i < 0 || i >= self.dims[0] as i64 {
                        continue;
                    }
                    sup.index[sup.len] = self.control_index(i as usize, j as usize, k as usize);
                    sup.weight[sup.len] = w[0][l] * wjk;
                    sup.len += 1;
                }
            }
        }
        sup
    }

    pub fn displacement(&self, x: Point3) -> [f64; 3] {
        let mut u = [0.0; 3];
        for (d, w) in self.support(x).iter() {
            let p = self.phi[d];
            u[0] += w * p[0];
            u[1] += w * p[1];
            u[2] += w * p[2];
        }
        u
    }

    #[inline]
    pub fn apply(&self, x: Point3) -> Point3 {
        if self.is_identity() {
            return x;
        }
        let u = self.displacement(x);
        [x[0] + u[0], x[1] + u[1], x[2] + u[2]]
    }

    /// Flattened parameter vector `[phi_0.x, phi_0.y, phi_0.z, phi_1.x, ...]`.
    pub fn flat_params(&self) -> Vec<f64> {
        self.phi.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != 3 * self.phi.len() {
            return Err(Error::InvalidParameter(format!(
                "FFD expects {} parameters, got {}",
                3 * self.phi.len(),
                flat.len()
            )));
        }
        for (p, c) in self.phi.iter_mut().zip(flat.chunks_exact(3)) {
            *p = [c[0], c[1], c[2]];
        }
        Ok(())
    }
}

/// Free-function form of [`FfdDeformation::apply`].
pub fn apply_ffd(ffd: &FfdDeformation, x: Point3) -> Point3 {
    ffd.apply(x)
}

//! Synthetic multi-sequence phantoms with exact ground truth.
//!
//! The geometry is a body ellipsoid containing an ellipsoidal heart: an outer
//! shell (myocardium) around a blood pool, with a spherical scar blob clipped
//! to the shell at the endocardial surface. Labels are 0 = background (air and
//! body), 1 = myocardium (normal and scar), 2 = blood.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AtlasPrior;
use crate::registration::FfdDeformation;
use crate::volume::{LabelVolume, Lattice, MultivariateImageSet, Point3, VoxelGrid};

pub const BACKGROUND: u16 = 0;
pub const MYOCARDIUM: u16 = 1;
pub const BLOOD: u16 = 2;
pub const LABELS: [u16; 3] = [BACKGROUND, MYOCARDIUM, BLOOD];

/// Tissue classes; several map onto one label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tissue {
    Air,
    Body,
    Myocardium,
    Scar,
    Blood,
}

impl Tissue {
    pub const ALL: [Tissue; 5] = [Tissue::Air, Tissue::Body, Tissue::Myocardium, Tissue::Scar, Tissue::Blood];

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Air => "air",
            Tissue::Body => "body",
            Tissue::Myocardium => "myocardium",
            Tissue::Scar => "scar",
            Tissue::Blood => "blood",
        }
    }

    pub fn label(self) -> u16 {
        match self {
            Tissue::Air | Tissue::Body => BACKGROUND,
            Tissue::Myocardium | Tissue::Scar => MYOCARDIUM,
            Tissue::Blood => BLOOD,
        }
    }
}

// Independent random streams per purpose, so each draw sequence depends only
// on the seed and what it is used for.
const STREAM_NOISE: u64 = 1 << 8;
const STREAM_SHIFT: u64 = 2 << 8;
const STREAM_TRUNCATE: u64 = 3 << 8;
const STREAM_ATLAS_FFD: u64 = 4 << 8;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// One acquired sequence of the phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub name: String,
    /// In-plane x, in-plane y and slice spacing (mm).
    pub spacing_mm: [f64; 3],
    /// Tissue name to `[mean, stddev]`.
    pub intensity: BTreeMap<String, [f64; 2]>,
    /// Depth (mm) cut into the segmentation domain from one random axis end;
    /// everything of the image beyond that end of the domain goes as well.
    #[serde(default)]
    pub truncate_mm: f64,
}

impl SequenceSpec {
    fn table(&self) -> Result<[[f64; 2]; 5]> {
        for key in self.intensity.keys() {
            if !Tissue::ALL.iter().any(|t| t.name() == key) {
                return Err(Error::Spec(format!(
                    "sequence {}: unknown tissue {key:?} in intensity table",
                    self.name
                )));
            }
        }
        let mut out = [[0.0; 2]; 5];
        for (o, t) in out.iter_mut().zip(Tissue::ALL) {
            let e = self.intensity.get(t.name()).ok_or_else(|| {
                Error::Spec(format!("sequence {}: intensity table has no entry for {}", self.name, t.name()))
            })?;
            if !e[0].is_finite() || !(e[1] >= 0.0) {
                return Err(Error::Spec(format!(
                    "sequence {}: invalid intensity entry for {}",
                    self.name,
                    t.name()
                )));
            }
            *o = *e;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// Fraction of each sequence's slices that get shifted.
    pub fraction: f64,
    /// Per-axis standard deviation of the in-plane shift (mm).
    pub sigma_mm: f64,
}

/// Full description of a phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub fov_mm: [f64; 3],
    pub body_center_mm: Point3,
    pub body_radii_mm: [f64; 3],
    pub heart_center_mm: Point3,
    pub heart_radii_mm: [f64; 3],
    pub wall_mm: f64,
    /// Exponent on the long-axis term of the heart surfaces; 2 gives ellipsoids,
    /// larger values flatten the sides so mid-ventricle sections barely change with height.
    #[serde(default = "default_z_exponent")]
    pub heart_z_exponent: f64,
    pub scar_radius_mm: f64,
    /// Direction from the heart center to the scar blob.
    pub scar_direction: [f64; 3],
    /// Additive Gaussian noise on top of the per-tissue spread.
    pub noise_std: f64,
    pub atlas_sigma_mm: f64,
    /// Standard deviation of the random FFD applied to the atlas (0 = none).
    #[serde(default)]
    pub atlas_ffd_sigma_mm: f64,
    #[serde(default = "default_ffd_spacing")]
    pub atlas_ffd_spacing_mm: f64,
    /// Segmentation domain: the first sequence's voxels within this margin
    /// of the heart's bounding box. `None` uses the whole lattice.
    #[serde(default)]
    pub roi_margin_mm: Option<f64>,
    /// Spacing of the segmentation domain; `None` uses the first sequence's.
    /// Axes with the first sequence's spacing keep its grid positions.
    #[serde(default)]
    pub common_spacing_mm: Option<[f64; 3]>,
    /// Sub-sampling step for partial-volume rendering; `None` point-samples
    /// voxel centers.
    #[serde(default)]
    pub partial_volume_mm: Option<f64>,
    #[serde(default)]
    pub shifts: Option<ShiftSpec>,
    #[serde(rename = "sequence")]
    pub sequences: Vec<SequenceSpec>,
}

fn default_z_exponent() -> f64 {
    2.0
}

fn default_ffd_spacing() -> f64 {
    20.0
}

fn table(entries: [(Tissue, f64); 5], spread: f64) -> BTreeMap<String, [f64; 2]> {
    entries
        .into_iter()
        .map(|(t, m)| (t.name().to_string(), [m, if t == Tissue::Air { 0.0 } else { spread }]))
        .collect()
}

impl Default for PhantomSpec {
    fn default() -> Self {
        use Tissue::*;
        Self {
            seed: 1,
            fov_mm: [120.0, 120.0, 100.0],
            body_center_mm: [60.0, 60.0, 50.0],
            body_radii_mm: [56.0, 46.0, 48.0],
            heart_center_mm: [64.0, 56.0, 50.0],
            heart_radii_mm: [22.0, 20.0, 28.0],
            wall_mm: 8.0,
            heart_z_exponent: 6.0,
            scar_radius_mm: 12.0,
            scar_direction: [1.0, 0.0, 0.0],
            noise_std: 6.0,
            atlas_sigma_mm: 2.0,
            atlas_ffd_sigma_mm: 0.0,
            atlas_ffd_spacing_mm: 20.0,
            roi_margin_mm: Some(15.0),
            common_spacing_mm: Some([2.0, 2.0, 5.0]),
            partial_volume_mm: Some(1.0),
            shifts: None,
            sequences: vec![
                SequenceSpec {
                    name: "lge".into(),
                    spacing_mm: [2.5, 2.5, 5.0],
                    intensity: table([(Air, 0.0), (Body, 60.0), (Myocardium, 25.0), (Scar, 150.0), (Blood, 150.0)], 2.0),
                    truncate_mm: 0.0,
                },
                SequenceSpec {
                    name: "t2".into(),
                    spacing_mm: [2.5, 2.5, 15.0],
                    intensity: table([(Air, 0.0), (Body, 50.0), (Myocardium, 80.0), (Scar, 130.0), (Blood, 30.0)], 2.0),
                    truncate_mm: 0.0,
                },
                SequenceSpec {
                    name: "bssfp".into(),
                    spacing_mm: [2.5, 2.5, 10.0],
                    intensity: table([(Air, 0.0), (Body, 70.0), (Myocardium, 40.0), (Scar, 40.0), (Blood, 170.0)], 2.0),
                    truncate_mm: 0.0,
                },
            ],
        }
    }
}

impl PhantomSpec {
    /// A 32-voxel cube at 2 mm isotropic resolution for every sequence.
    pub fn small(seed: u64) -> Self {
        let mut s = Self {
            seed,
            fov_mm: [64.0; 3],
            body_center_mm: [32.0; 3],
            body_radii_mm: [29.0, 27.0, 30.0],
            heart_center_mm: [32.0; 3],
            heart_radii_mm: [17.0, 15.0, 20.0],
            wall_mm: 6.0,
            scar_radius_mm: 8.0,
            roi_margin_mm: None,
            common_spacing_mm: None,
            ..Self::default()
        };
        for q in &mut s.sequences {
            q.spacing_mm = [2.0; 3];
        }
        s
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_named(text, "<phantom spec>")
    }

    /// Like [`Self::from_toml`], with syntax errors reported against `src`.
    pub fn from_toml_named(text: &str, src: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| crate::io::toml_error(&e, text, src))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("phantom spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() || self.sequences.len() > 32 {
            return Err(Error::Spec("between 1 and 32 sequences are required".into()));
        }
        let pos = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        if !pos(&self.fov_mm) || !pos(&self.body_radii_mm) || !pos(&self.heart_radii_mm) {
            return Err(Error::Spec("field of view and radii must be positive".into()));
        }
        if !(self.heart_z_exponent >= 1.0) {
            return Err(Error::Spec("heart z exponent must be at least 1".into()));
        }
        if !(self.wall_mm > 0.0) || self.heart_radii_mm.iter().any(|&r| r <= self.wall_mm) {
            return Err(Error::Spec("wall must be positive and thinner than every heart radius".into()));
        }
        if !(self.scar_radius_mm >= 0.0) || !(self.noise_std >= 0.0) || !(self.atlas_sigma_mm > 0.0) {
            return Err(Error::Spec("scar radius, noise and atlas sigma must be non-negative".into()));
        }
        if !(self.atlas_ffd_sigma_mm >= 0.0) || !(self.atlas_ffd_spacing_mm > 0.0) {
            return Err(Error::Spec("invalid atlas FFD parameters".into()));
        }
        if self.partial_volume_mm.is_some_and(|h| !(h > 0.0)) {
            return Err(Error::Spec("partial-volume step must be positive".into()));
        }
        if self.roi_margin_mm.is_some_and(|m| !(m >= 0.0)) {
            return Err(Error::Spec("ROI margin must be non-negative".into()));
        }
        if self.scar_direction.iter().map(|d| d * d).sum::<f64>() == 0.0 {
            return Err(Error::Spec("scar direction must be non-zero".into()));
        }
        if let Some(s) = &self.shifts {
            if !(0.0..=1.0).contains(&s.fraction) || !(s.sigma_mm >= 0.0) || !s.sigma_mm.is_finite() {
                return Err(Error::Spec("shift fraction must lie in [0, 1] and sigma be finite".into()));
            }
        }
        let mut names: Vec<&str> = self.sequences.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.sequences.len() {
            return Err(Error::Spec("sequence names must be distinct".into()));
        }
        for q in &self.sequences {
            if !pos(&q.spacing_mm) {
                return Err(Error::Spec(format!("sequence {}: spacing must be positive", q.name)));
            }
            q.table()?;
            if !(q.truncate_mm >= 0.0) {
                return Err(Error::Spec(format!("sequence {}: truncation must be non-negative", q.name)));
            }
        }
        Ok(())
    }

    /// Lattice tiling the field of view with the given spacing.
    pub fn lattice(&self, spacing: [f64; 3]) -> Result<Lattice> {
        let dims = std::array::from_fn(|a| ((self.fov_mm[a] / spacing[a]).round() as usize).max(1));
        Lattice::new(dims, spacing, std::array::from_fn(|a| 0.5 * spacing[a]))
    }

    /// Tissue at a world point.
    pub fn tissue_at(&self, p: Point3) -> Tissue {
        let hc = &self.heart_center_mm;
        let e = self.heart_z_exponent;
        let heart = |r: [f64; 3]| -> f64 {
            ((p[0] - hc[0]) / r[0]).powi(2) + ((p[1] - hc[1]) / r[1]).powi(2) + ((p[2] - hc[2]) / r[2]).abs().powf(e)
        };
        let inner: [f64; 3] = std::array::from_fn(|a| self.heart_radii_mm[a] - self.wall_mm);
        if heart(inner) <= 1.0 {
            return Tissue::Blood;
        }
        if heart(self.heart_radii_mm) <= 1.0 {
            // The scar is a cylinder along z so that thick slices see it unblurred.
            let sc = self.scar_center();
            let r = self.scar_radius_mm;
            let d2 = (p[0] - sc[0]).powi(2) + (p[1] - sc[1]).powi(2);
            return if d2 <= r * r && (p[2] - sc[2]).abs() <= r {
                Tissue::Scar
            } else {
                Tissue::Myocardium
            };
        }
        let b = &self.body_center_mm;
        if (0..3).map(|a| ((p[a] - b[a]) / self.body_radii_mm[a]).powi(2)).sum::<f64>() <= 1.0 {
            Tissue::Body
        } else {
            Tissue::Air
        }
    }

    /// Point of the endocardial surface in the scar direction.
    pub fn scar_center(&self) -> Point3 {
        let n = self.scar_direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        let d: [f64; 3] = std::array::from_fn(|a| self.scar_direction[a] / n);
        let inner: [f64; 3] = std::array::from_fn(|a| self.heart_radii_mm[a] - self.wall_mm);
        let e = self.heart_z_exponent;
        let level = |t: f64| (t * d[0] / inner[0]).powi(2) + (t * d[1] / inner[1]).powi(2) + (t * d[2] / inner[2]).abs().powf(e);
        // level is increasing in t; bisect for the surface crossing.
        let (mut lo, mut hi) = (0.0, inner.iter().fold(0.0f64, |m, &r| m.max(r)) * 2.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if level(mid) <= 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        std::array::from_fn(|a| self.heart_center_mm[a] + lo * d[a])
    }

    /// Label volume on `lattice`, sampled at voxel centers.
    pub fn labels_on(&self, lattice: &Lattice) -> LabelVolume {
        let labels = (0..lattice.len()).map(|x| self.tissue_at(lattice.center(x)).label()).collect();
        LabelVolume::new(lattice.clone(), labels).expect("sizes match")
    }

    /// Segmentation domain: the ROI (or the whole field of view) sampled at
    /// the common spacing.
    pub fn common_lattice(&self) -> Result<Lattice> {
        let first = self.lattice(self.sequences[0].spacing_mm)?;
        let sp = self.common_spacing_mm.unwrap_or(first.spacing);
        if sp.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Spec("common spacing must be positive".into()));
        }
        let (lo, hi): (Point3, Point3) = match self.roi_margin_mm {
            Some(m) => (
                std::array::from_fn(|a| (self.heart_center_mm[a] - self.heart_radii_mm[a] - m).max(0.0)),
                std::array::from_fn(|a| (self.heart_center_mm[a] + self.heart_radii_mm[a] + m).min(self.fov_mm[a])),
            ),
            None => ([0.0; 3], self.fov_mm),
        };
        let mut dims = [0usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            if sp[a] == first.spacing[a] {
                // Keep the first sequence's grid positions on this axis.
                let q0 = ((lo[a] - first.origin[a]) / sp[a]).ceil().max(0.0) as usize;
                let q1 = (((hi[a] - first.origin[a]) / sp[a]).floor() as usize).min(first.dims[a] - 1);
                if q1 < q0 {
                    return Err(Error::Spec("ROI does not intersect the field of view".into()));
                }
                dims[a] = q1 - q0 + 1;
                origin[a] = first.origin[a] + q0 as f64 * sp[a];
            } else {
                let n = ((hi[a] - lo[a]) / sp[a]).floor() as usize;
                if n == 0 {
                    return Err(Error::Spec("ROI is thinner than one common voxel".into()));
                }
                dims[a] = n;
                origin[a] = 0.5 * (lo[a] + hi[a]) - 0.5 * (n - 1) as f64 * sp[a];
            }
        }
        Lattice::new(dims, sp, origin)
    }

    /// Heights of the mid-ventricle: the central 60% of the blood pool's
    /// long axis. Only slices whose plane lies here get shifted.
    pub fn mid_ventricle_z_range(&self) -> [f64; 2] {
        let c = self.heart_center_mm[2];
        let r = 0.6 * (self.heart_radii_mm[2] - self.wall_mm);
        [c - r, c + r]
    }
}

/// An injected in-plane translation of one slice.
///
/// `tx, ty` are the parameters of the transform under which the corrupted
/// slice samples the original: `shifted(x) = original(x + (tx, ty))`. Slice
/// transforms with the negated values undo the shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceShift {
    pub image: usize,
    pub slice: usize,
    pub tx: f64,
    pub ty: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisEnd {
    Low,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truncation {
    pub image: usize,
    pub axis: usize,
    pub end: AxisEnd,
    pub removed_voxels: usize,
    pub removed_mm: f64,
}

#[derive(Clone, Debug)]
pub struct PhantomTruth {
    /// Labels on the common lattice (the segmentation domain).
    pub labels: LabelVolume,
    /// Labels on each sequence's acquisition lattice (before truncation and shifts).
    pub native_labels: Vec<LabelVolume>,
    pub shifts: Vec<SliceShift>,
    /// Deformation applied to the atlas, if any: `corrupted(x) = clean(D(x))`.
    pub atlas_ffd: Option<FfdDeformation>,
    pub truncations: Vec<Truncation>,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub names: Vec<String>,
    pub images: MultivariateImageSet,
    pub atlas: AtlasPrior,
    pub truth: PhantomTruth,
}

/// Bilinear in-plane sample of slice `k` at continuous index `(qx, qy)`,
/// clamped to the slice.
fn bilinear_clamped(grid: &VoxelGrid, k: usize, qx: f64, qy: f64) -> f64 {
    let [nx, ny, _] = grid.lattice.dims;
    let axis = |q: f64, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let q = q.clamp(0.0, (n - 1) as f64);
        let i0 = (q.floor() as usize).min(n - 2);
        (i0, i0 + 1, q - i0 as f64)
    };
    let (x0, x1, fx) = axis(qx, nx);
    let (y0, y1, fy) = axis(qy, ny);
    let g = |i, j| grid.get(i, j, k);
    let a = g(x0, y0) + fx * (g(x1, y0) - g(x0, y0));
    let b = g(x0, y1) + fx * (g(x1, y1) - g(x0, y1));
    a + fy * (b - a)
}

/// Translates the content of slice `k` by `(dx, dy)` mm:
/// `new(x) = old(x - d)`, bilinear within the slice with edge clamping.
pub fn shift_slice(grid: &mut VoxelGrid, k: usize, dx: f64, dy: f64) {
    if dx == 0.0 && dy == 0.0 {
        return;
    }
    let [nx, ny, _] = grid.lattice.dims;
    let (sx, sy) = (grid.lattice.spacing[0], grid.lattice.spacing[1]);
    let src = grid.clone();
    for j in 0..ny {
        for i in 0..nx {
            let v = bilinear_clamped(&src, k, i as f64 - dx / sx, j as f64 - dy / sy);
            let idx = grid.lattice.index(i, j, k);
            grid.values[idx] = v;
        }
    }
}

/// Slices eligible for shifting: those whose plane lies in `z_range` (all when `None`).
fn eligible_slices(lattice: &Lattice, z_range: Option<[f64; 2]>) -> Vec<usize> {
    (0..lattice.dims[2])
        .filter(|&k| {
            let z = lattice.origin[2] + k as f64 * lattice.spacing[2];
            z_range.map_or(true, |[lo, hi]| z >= lo && z <= hi)
        })
        .collect()
}

/// Draws shifted slices and displacements for one image.
fn draw_shifts(lattice: &Lattice, image: usize, spec: &ShiftSpec, z_range: Option<[f64; 2]>, seed: u64) -> Vec<SliceShift> {
    use rand::seq::SliceRandom;
    let mut rng = rng_for(seed, STREAM_SHIFT + image as u64);
    let mut cand = eligible_slices(lattice, z_range);
    let n = ((spec.fraction * lattice.dims[2] as f64).round() as usize).min(cand.len());
    cand.shuffle(&mut rng);
    let mut chosen: Vec<usize> = cand[..n].to_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|slice| {
            let dx: f64 = spec.sigma_mm * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let dy: f64 = spec.sigma_mm * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            SliceShift {
                image,
                slice,
                tx: -dx,
                ty: -dy,
            }
        })
        .collect()
}

/// Shifts a seeded random subset of slices of every image in-plane.
pub fn inject_slice_shifts(
    images: &[VoxelGrid],
    spec: &ShiftSpec,
    z_range: Option<[f64; 2]>,
    seed: u64,
) -> (Vec<VoxelGrid>, Vec<SliceShift>) {
    let mut out = images.to_vec();
    let mut record = Vec::new();
    for (i, g) in out.iter_mut().enumerate() {
        for s in draw_shifts(&g.lattice, i, spec, z_range, seed) {
            shift_slice(g, s.slice, -s.tx, -s.ty);
            record.push(s);
        }
    }
    (out, record)
}

/// Removes a slab of `extent_mm` from one random end of one random axis.
pub fn truncate_coverage(image: &VoxelGrid, extent_mm: f64, seed: u64) -> Result<(VoxelGrid, Truncation)> {
    truncate_with(image, extent_mm, &mut rng_for(seed, STREAM_TRUNCATE), 0)
}

fn truncate_with(image: &VoxelGrid, extent_mm: f64, rng: &mut ChaCha8Rng, index: usize) -> Result<(VoxelGrid, Truncation)> {
    let (axis, end) = draw_truncation_side(rng);
    truncate_at(image, axis, end, extent_mm, index)
}

fn draw_truncation_side(rng: &mut ChaCha8Rng) -> (usize, AxisEnd) {
    use rand::Rng;
    let axis = rng.gen_range(0..3);
    let end = if rng.gen_bool(0.5) { AxisEnd::Low } else { AxisEnd::High };
    (axis, end)
}

fn truncate_at(image: &VoxelGrid, axis: usize, end: AxisEnd, extent_mm: f64, index: usize) -> Result<(VoxelGrid, Truncation)> {
    if !(extent_mm >= 0.0) {
        return Err(Error::Spec(format!("truncation extent must be non-negative, got {extent_mm}")));
    }
    let l = &image.lattice;
    let n = (extent_mm / l.spacing[axis] - 1e-9).ceil().max(0.0) as usize;
    if n >= l.dims[axis] {
        return Err(Error::Spec(format!(
            "truncation of {extent_mm} mm does not fit axis {axis} ({} mm)",
            l.dims[axis] as f64 * l.spacing[axis]
        )));
    }
    let mut dims = l.dims;
    dims[axis] -= n;
    let mut origin = l.origin;
    let skip = if end == AxisEnd::Low { n } else { 0 };
    origin[axis] += skip as f64 * l.spacing[axis];
    let nl = Lattice::new(dims, l.spacing, origin)?;
    let values = (0..nl.len())
        .map(|v| {
            let mut ijk = nl.ijk(v);
            ijk[axis] += skip;
            image.get(ijk[0], ijk[1], ijk[2])
        })
        .collect();
    Ok((
        VoxelGrid::new(nl, values)?,
        Truncation {
            image: index,
            axis,
            end,
            removed_voxels: n,
            removed_mm: n as f64 * l.spacing[axis],
        },
    ))
}

/// Separable Gaussian blur with kernel radius `3 sigma`, truncated and
/// renormalized at the lattice edges.
fn gaussian_blur(grid: &VoxelGrid, sigma_mm: f64) -> VoxelGrid {
    let mut cur = grid.clone();
    let dims = grid.lattice.dims;
    for a in 0..3 {
        let s = sigma_mm / grid.lattice.spacing[a];
        let r = (3.0 * s).ceil() as usize;
        if r == 0 {
            continue;
        }
        let kernel: Vec<f64> = (0..=2 * r)
            .map(|t| {
                let d = t as f64 - r as f64;
                (-0.5 * d * d / (s * s)).exp()
            })
            .collect();
        let src = cur.clone();
        for v in 0..grid.lattice.len() {
            let ijk = grid.lattice.ijk(v);
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (t, w) in kernel.iter().enumerate() {
                let q = ijk[a] as i64 + t as i64 - r as i64;
                if q < 0 || q >= dims[a] as i64 {
                    continue;
                }
                let mut n = ijk;
                n[a] = q as usize;
                acc += w * src.values[grid.lattice.index(n[0], n[1], n[2])];
                wsum += w;
            }
            cur.values[v] = acc / wsum;
        }
    }
    cur
}

/// Blurs each label's indicator and renormalizes voxelwise.
pub fn make_probabilistic_atlas(labels: &LabelVolume, label_ids: &[u16], sigma_mm: f64) -> Result<AtlasPrior> {
    if !(sigma_mm > 0.0) {
        return Err(Error::InvalidParameter(format!("atlas sigma must be positive, got {sigma_mm}")));
    }
    let maps = label_ids
        .iter()
        .map(|&id| {
            if labels.count(id) == 0 {
                log::warn!("label {id} is absent; its atlas map is zero");
            }
            let ind = VoxelGrid::new(
                labels.lattice.clone(),
                labels.labels.iter().map(|&l| if l == id { 1.0 } else { 0.0 }).collect(),
            )
            .expect("sizes match");
            gaussian_blur(&ind, sigma_mm)
        })
        .collect();
    let mut atlas = AtlasPrior::new(maps)?;
    atlas.normalize();
    Ok(atlas)
}

/// Random FFD with i.i.d. `N(0, sigma^2)` control displacements over `lattice`.
pub fn random_ffd(lattice: &Lattice, mesh_spacing_mm: f64, sigma_mm: f64, seed: u64) -> Result<FfdDeformation> {
    if !(sigma_mm >= 0.0) {
        return Err(Error::InvalidParameter(format!("FFD sigma must be non-negative, got {sigma_mm}")));
    }
    let mut ffd = FfdDeformation::covering(lattice, mesh_spacing_mm)?;
    if sigma_mm > 0.0 {
        let mut rng = rng_for(seed, STREAM_ATLAS_FFD);
        for p in &mut ffd.phi {
            for v in p.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sigma_mm * z;
            }
        }
    }
    Ok(ffd)
}

/// Backward warp `out(x) = volume(D(x))`, holding the nearest edge value where
/// `D(x)` leaves the hull.
pub fn warp_volume(volume: &VoxelGrid, ffd: &FfdDeformation) -> VoxelGrid {
    if ffd.is_identity() {
        return volume.clone();
    }
    let l = &volume.lattice;
    let (lo, hi) = l.bounds();
    VoxelGrid::from_fn(l.clone(), |x| {
        let y = ffd.apply(x);
        let yc = std::array::from_fn(|a| y[a].clamp(lo[a], hi[a]));
        volume.sample(yc).expect("clamped point lies in the hull")
    })
}

/// Warps `volume` by a random FFD and returns the field used.
pub fn inject_random_ffd(volume: &VoxelGrid, mesh_spacing_mm: f64, sigma_mm: f64, seed: u64) -> Result<(VoxelGrid, FfdDeformation)> {
    let ffd = random_ffd(&volume.lattice, mesh_spacing_mm, sigma_mm, seed)?;
    Ok((warp_volume(volume, &ffd), ffd))
}

/// Mean and standard deviation of each voxel of one sequence. Slice `k`'s
/// content is displaced in-plane by `offsets[k]`. With a partial-volume step,
/// each voxel averages its box on a sub-grid no coarser than that step.
fn render(spec: &PhantomSpec, tab: &[[f64; 2]; 5], lattice: &Lattice, offsets: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
    use rayon::prelude::*;
    let sub: [usize; 3] = std::array::from_fn(|a| match spec.partial_volume_mm {
        Some(h) => (lattice.spacing[a] / h).ceil().max(1.0) as usize,
        None => 1,
    });
    let noise2 = spec.noise_std * spec.noise_std;
    let idx = |t: Tissue| Tissue::ALL.iter().position(|&u| u == t).unwrap();
    (0..lattice.len())
        .into_par_iter()
        .map(|x| {
            let c = lattice.center(x);
            let d = offsets[lattice.ijk(x)[2]];
            let n = (sub[0] * sub[1] * sub[2]) as f64;
            let (mut m, mut v) = (0.0, 0.0);
            for a in 0..sub[0] {
                for b in 0..sub[1] {
                    for e in 0..sub[2] {
                        let f = |q: usize, n: usize, ax: usize| ((q as f64 + 0.5) / n as f64 - 0.5) * lattice.spacing[ax];
                        let p = [c[0] + f(a, sub[0], 0) - d[0], c[1] + f(b, sub[1], 1) - d[1], c[2] + f(e, sub[2], 2)];
                        let t = tab[idx(spec.tissue_at(p))];
                        m += t[0];
                        v += t[1] * t[1];
                    }
                }
            }
            (m / n, (v / n + noise2).sqrt())
        })
        .unzip()
}

fn cell_extent(l: &Lattice, axis: usize) -> (f64, f64) {
    let h = 0.5 * l.spacing[axis];
    (l.origin[axis] - h, l.origin[axis] + (l.dims[axis] - 1) as f64 * l.spacing[axis] + h)
}

/// Renders every sequence, applies the configured corruptions and builds the atlas.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let common = spec.common_lattice()?;
    let atlas_lattice = spec.lattice(spec.sequences[0].spacing_mm)?;
    let heart_z = Some(spec.mid_ventricle_z_range());
    let mut images = Vec::new();
    let mut native_labels = Vec::new();
    let mut shifts = Vec::new();
    let mut truncations = Vec::new();
    let mut trunc_rng = rng_for(spec.seed, STREAM_TRUNCATE);
    for (i, seq) in spec.sequences.iter().enumerate() {
        let tab = seq.table()?;
        let lattice = spec.lattice(seq.spacing_mm)?;
        let tissues: Vec<Tissue> = (0..lattice.len()).map(|x| spec.tissue_at(lattice.center(x))).collect();
        native_labels.push(LabelVolume::new(lattice.clone(), tissues.iter().map(|t| t.label()).collect())?);
        let mut offsets = vec![[0.0; 2]; lattice.dims[2]];
        if let Some(sh) = &spec.shifts {
            for s in draw_shifts(&lattice, i, sh, heart_z, spec.seed) {
                offsets[s.slice] = [-s.tx, -s.ty];
                shifts.push(s);
            }
        }
        let (mean, sd) = render(spec, &tab, &lattice, &offsets);
        let mut rng = rng_for(spec.seed, STREAM_NOISE + i as u64);
        let values = mean
            .iter()
            .zip(&sd)
            .map(|(m, s)| {
                if *s > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + s * z
                } else {
                    *m
                }
            })
            .collect();
        let mut img = VoxelGrid::new(lattice, values)?;
        if seq.truncate_mm > 0.0 {
            let (axis, end) = draw_truncation_side(&mut trunc_rng);
            // Measure the cut from the edge of the segmentation domain, not of the image.
            let (img_lo, img_hi) = cell_extent(&img.lattice, axis);
            let (dom_lo, dom_hi) = cell_extent(&common, axis);
            let beyond = match end {
                AxisEnd::Low => (dom_lo - img_lo).max(0.0),
                AxisEnd::High => (img_hi - dom_hi).max(0.0),
            };
            let (t, rec) = truncate_at(&img, axis, end, beyond + seq.truncate_mm, i)?;
            img = t;
            truncations.push(rec);
        }
        images.push(img);
    }
    let labels = spec.labels_on(&common);
    let mut atlas = make_probabilistic_atlas(&spec.labels_on(&atlas_lattice), &LABELS, spec.atlas_sigma_mm)?;
    let atlas_ffd = if spec.atlas_ffd_sigma_mm > 0.0 {
        let ffd = random_ffd(&atlas_lattice, spec.atlas_ffd_spacing_mm, spec.atlas_ffd_sigma_mm, spec.seed)?;
        atlas = AtlasPrior::new(atlas.maps.iter().map(|m| warp_volume(m, &ffd)).collect())?;
        atlas.normalize();
        Some(ffd)
    } else {
        None
    };
    Ok(Phantom {
        names: spec.sequences.iter().map(|s| s.name.clone()).collect(),
        images: MultivariateImageSet::with_common(images, common)?,
        atlas,
        truth: PhantomTruth {
            labels,
            native_labels,
            shifts,
            atlas_ffd,
            truncations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> PhantomSpec {
        let mut s = PhantomSpec::default();
        s.noise_std = 0.0;
        for q in &mut s.sequences {
            for e in q.intensity.values_mut() {
                e[1] = 0.0;
            }
        }
        s
    }

    #[test]
    fn default_contrasts() {
        let s = PhantomSpec::default();
        let get = |q: usize, t: Tissue| s.sequences[q].intensity[t.name()][0];
        assert_eq!(get(0, Tissue::Scar), get(0, Tissue::Blood));
        assert_eq!(get(2, Tissue::Scar), get(2, Tissue::Myocardium));
        assert_eq!(s.sequences[1].spacing_mm[2] / s.sequences[0].spacing_mm[2], 3.0);
        assert_eq!(s.sequences[0].spacing_mm[2], 5.0);
        assert_eq!(s.sequences[1].spacing_mm[2], 15.0);
    }

    #[test]
    fn geometry_is_nested() {
        let s = PhantomSpec::default();
        let c = s.heart_center_mm;
        assert_eq!(s.tissue_at(c), Tissue::Blood);
        assert_eq!(s.tissue_at([c[0], c[1] + s.heart_radii_mm[1] - 1.0, c[2]]), Tissue::Myocardium);
        assert_eq!(s.tissue_at([c[0] + s.heart_radii_mm[0] - 1.0, c[1], c[2]]), Tissue::Scar);
        assert_eq!(s.tissue_at([c[0], c[1], c[2] + s.heart_radii_mm[2] + 2.0]), Tissue::Body);
        assert_eq!(s.tissue_at([1.0, 1.0, 1.0]), Tissue::Air);
        // The scar never leaves the shell.
        let l = s.lattice([1.0; 3]).unwrap();
        let inner: [f64; 3] = std::array::from_fn(|a| s.heart_radii_mm[a] - s.wall_mm);
        for x in 0..l.len() {
            let p = l.center(x);
            if s.tissue_at(p) == Tissue::Scar {
                let q = |r: [f64; 3]| {
                    ((p[0] - c[0]) / r[0]).powi(2) + ((p[1] - c[1]) / r[1]).powi(2) + ((p[2] - c[2]) / r[2]).abs().powf(s.heart_z_exponent)
                };
                assert!(q(s.heart_radii_mm) <= 1.0 && q(inner) > 1.0);
            }
        }
    }

    #[test]
    fn noiseless_thresholds_recover_labels() {
        let spec = noiseless();
        let p = generate_phantom(&spec).unwrap();
        // A voxel is interior when its whole cell holds one tissue.
        let interior = |l: &Lattice, x: usize| -> Option<Tissue> {
            let c = l.center(x);
            let t = spec.tissue_at(c);
            for i in 0..4 {
                for j in 0..4 {
                    for k in 0..4 {
                        let f = [i, j, k].map(|u| u as f64 / 3.0 - 0.5);
                        let q = std::array::from_fn(|a| c[a] + f[a] * l.spacing[a]);
                        if spec.tissue_at(q) != t {
                            return None;
                        }
                    }
                }
            }
            Some(t)
        };
        let mut checked = 0;
        for (i, img) in p.images.images.iter().enumerate() {
            let tab = spec.sequences[i].table().unwrap();
            for x in 0..img.lattice.len() {
                let Some(t) = interior(&img.lattice, x) else { continue };
                let v = img.values[x];
                assert!((v - tab[Tissue::ALL.iter().position(|&u| u == t).unwrap()][0]).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 1000);
        // LGE separates blood-or-scar, myocardium and background by thresholds.
        let lge = &p.images.images[0];
        for x in 0..lge.lattice.len() {
            let Some(t) = interior(&lge.lattice, x) else { continue };
            if t != Tissue::Scar {
                let v = lge.values[x];
                let cls = if v > 100.0 { BLOOD } else if (v - 25.0).abs() < 1.0 { MYOCARDIUM } else { BACKGROUND };
                assert_eq!(cls, p.truth.native_labels[0].labels[x]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut s = PhantomSpec::small(5);
        s.shifts = Some(ShiftSpec { fraction: 0.2, sigma_mm: 2.0 });
        s.atlas_ffd_sigma_mm = 2.0;
        let a = generate_phantom(&s).unwrap();
        let b = generate_phantom(&s).unwrap();
        for (x, y) in a.images.images.iter().zip(&b.images.images) {
            assert!(x.values.iter().zip(&y.values).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        assert_eq!(a.truth.shifts, b.truth.shifts);
        assert_eq!(a.atlas, b.atlas);
        s.seed = 6;
        let c = generate_phantom(&s).unwrap();
        assert_ne!(a.images.images[0].values, c.images.images[0].values);
    }

    #[test]
    fn missing_intensity_entry_is_a_spec_error() {
        let mut s = PhantomSpec::default();
        s.sequences[1].intensity.remove("scar");
        let err = generate_phantom(&s).unwrap_err();
        assert!(matches!(err, Error::Spec(ref m) if m.contains("scar") && m.contains("t2")), "{err}");
    }

    #[test]
    fn spec_toml_round_trip() {
        let mut s = PhantomSpec::default();
        s.shifts = Some(ShiftSpec { fraction: 0.2, sigma_mm: 2.0 });
        let back = PhantomSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
        assert!(PhantomSpec::from_toml("seed = 1\nbogus = 2").is_err());
    }

    fn ramp() -> VoxelGrid {
        let l = Lattice::new([12, 10, 4], [2.0, 2.0, 5.0], [1.0, 1.0, 2.5]).unwrap();
        VoxelGrid::from_fn(l, |p| (0.3 * p[0]).sin() * 10.0 + 0.5 * p[1] + p[2])
    }

    #[test]
    fn zero_sigma_shifts_change_nothing() {
        let g = ramp();
        let (out, rec) = inject_slice_shifts(&[g.clone()], &ShiftSpec { fraction: 1.0, sigma_mm: 0.0 }, None, 3);
        assert_eq!(out[0], g);
        assert!(rec.iter().all(|s| s.tx == 0.0 && s.ty == 0.0));
    }

    #[test]
    fn single_slice_shift_is_local() {
        let g = ramp();
        let mut h = g.clone();
        shift_slice(&mut h, 2, 3.0, 0.0);
        for x in 0..g.lattice.len() {
            let [i, j, k] = g.lattice.ijk(x);
            if k != 2 {
                assert_eq!(g.values[x].to_bits(), h.values[x].to_bits());
            } else if i >= 2 {
                // 3 mm is 1.5 voxels: new(i) = old(i - 1.5).
                let want = 0.5 * (g.get(i - 1, j, k) + g.get(i - 2, j, k));
                assert!((h.values[x] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn replaying_negated_shift_restores_slice() {
        use crate::registration::{SliceAffineSet, SliceMode};
        let g = ramp();
        let (out, rec) = inject_slice_shifts(&[g.clone()], &ShiftSpec { fraction: 0.5, sigma_mm: 1.5 }, None, 11);
        assert_eq!(rec.len(), 2);
        let mut set = SliceAffineSet::identity(&out, SliceMode::Rigid);
        for s in &rec {
            set.set_params(0, s.slice, &[-s.tx, -s.ty, 0.0]).unwrap();
        }
        // Lipschitz bound of the field per mm, times spacing, twice.
        let lip = 3.0 + 0.5;
        let tol = 2.0 * lip * 2.0;
        for s in &rec {
            let margin = s.tx.abs().max(s.ty.abs()) + 2.0;
            for j in 0..10 {
                for i in 0..12 {
                    let p = g.lattice.voxel_to_world([i as f64, j as f64, s.slice as f64]);
                    if p[0] < margin || p[0] > 24.0 - margin || p[1] < margin || p[1] > 20.0 - margin {
                        continue;
                    }
                    let v = out[0].sample(set.apply(0, p)).unwrap();
                    assert!((v - g.get(i, j, s.slice)).abs() <= tol);
                }
            }
        }
    }

    #[test]
    fn truncation_cases() {
        let l = Lattice::new([40, 20, 10], [2.5, 2.5, 5.0], [1.25, 1.25, 2.5]).unwrap();
        let g = VoxelGrid::from_fn(l.clone(), |p| p[0] + 100.0 * p[1] + 1e4 * p[2]);
        let (same, rec) = truncate_coverage(&g, 0.0, 1).unwrap();
        assert_eq!(same, g);
        assert_eq!(rec.removed_voxels, 0);
        for seed in 0..20 {
            let (t, rec) = truncate_coverage(&g, 40.0, seed).unwrap();
            assert_eq!(rec.removed_mm, 40.0);
            let (lo0, hi0) = l.bounds();
            let (lo1, hi1) = t.lattice.bounds();
            for a in 0..3 {
                let d_lo = lo1[a] - lo0[a];
                let d_hi = hi0[a] - hi1[a];
                if a == rec.axis {
                    let (cut, kept) = if rec.end == AxisEnd::Low { (d_lo, d_hi) } else { (d_hi, d_lo) };
                    assert!((cut - 40.0).abs() < 1e-9 && kept.abs() < 1e-9);
                } else {
                    assert!(d_lo.abs() < 1e-12 && d_hi.abs() < 1e-12);
                }
            }
            // Kept voxels keep their values.
            for v in 0..t.lattice.len() {
                let p = t.lattice.center(v);
                assert_eq!(t.values[v], g.sample(p).unwrap());
            }
        }
        let small = VoxelGrid::filled(Lattice::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap(), 0.0);
        assert!(matches!(truncate_coverage(&small, 10.0, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn atlas_limits_and_normalization() {
        let l = Lattice::new([10, 6, 4], [1.0; 3], [0.0; 3]).unwrap();
        let labels = LabelVolume::new(l.clone(), (0..l.len()).map(|x| if l.ijk(x)[0] < 5 { 0 } else { 1 }).collect()).unwrap();
        let sharp = make_probabilistic_atlas(&labels, &[0, 1], 0.05).unwrap();
        for x in 0..l.len() {
            let want = if labels.labels[x] == 0 { 1.0 } else { 0.0 };
            assert!((sharp.maps[0].values[x] - want).abs() < 1e-12);
        }
        let wide = make_probabilistic_atlas(&labels, &[0, 1, 7], 30.0).unwrap();
        // At the interface plane x = 4.5 the two sides balance.
        let a = wide.sample([4.5, 2.0, 1.0]);
        assert!((a[0] - 0.5).abs() < 1e-9 && (a[1] - 0.5).abs() < 1e-9 && a[2] == 0.0);
        for sigma in [0.3, 1.0, 2.5] {
            let at = make_probabilistic_atlas(&labels, &[0, 1], sigma).unwrap();
            for x in 0..l.len() {
                let s: f64 = at.maps.iter().map(|m| m.values[x]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        assert!(make_probabilistic_atlas(&labels, &[0, 1], 0.0).is_err());
    }

    #[test]
    fn random_ffd_cases() {
        let g = ramp();
        let (same, f) = inject_random_ffd(&g, 20.0, 0.0, 4).unwrap();
        assert_eq!(same, g);
        assert!(f.is_identity());
        let f = random_ffd(&g.lattice, 20.0, 2.0, 4).unwrap();
        let max_ctrl = f.phi.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        for x in 0..g.lattice.len() {
            let d = f.displacement(g.lattice.center(x));
            for v in d {
                assert!(v.abs() <= max_ctrl + 1e-12);
            }
        }
        assert_eq!(random_ffd(&g.lattice, 20.0, 2.0, 4).unwrap(), f);
    }
}

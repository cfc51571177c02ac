//! The multivariate mixture model: label configuration, Gaussian mixture
//! parameters, atlas prior and the hetero-coverage partition of the common space.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::observe::{Compiled, Observations};
use crate::registration::{FfdDeformation, TransformState};
use crate::volume::{Lattice, MultivariateImageSet, Point3, Stencil, VoxelGrid};

/// Densities below this value are clamped before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-300;

pub fn gaussian_pdf(mu: f64, sigma2: f64, x: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "variance must be positive, got {sigma2}"
        )));
    }
    let d = x - mu;
    Ok((2.0 * PI * sigma2).powf(-0.5) * (-d * d / (2.0 * sigma2)).exp())
}

/// Label set and the number of Gaussian components per (image, label).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelConfig {
    pub labels: Vec<u16>,
    /// `components[i][k]`: component count of label `k` in image `i`.
    pub components: Vec<Vec<usize>>,
}

impl LabelConfig {
    pub fn new(labels: Vec<u16>, components: Vec<Vec<usize>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("at least one label is required".into()));
        }
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(Error::Config("label ids must be distinct".into()));
        }
        if labels.contains(&crate::volume::LabelVolume::UNLABELED) {
            return Err(Error::Config("label id 65535 is reserved".into()));
        }
        if components.is_empty() || components.len() > 32 {
            return Err(Error::Config("between 1 and 32 images are supported".into()));
        }
        for (i, row) in components.iter().enumerate() {
            if row.len() != labels.len() {
                return Err(Error::Config(format!(
                    "image {i}: expected {} component counts, got {}",
                    labels.len(),
                    row.len()
                )));
            }
            if let Some(k) = row.iter().position(|&c| c == 0) {
                return Err(Error::Config(format!(
                    "image {i}, label {}: at least one component is required",
                    labels[k]
                )));
            }
        }
        Ok(Self { labels, components })
    }

    /// The same component counts (one per label) for every image.
    pub fn uniform(labels: Vec<u16>, per_label: &[usize], n_images: usize) -> Result<Self> {
        Self::new(labels, vec![per_label.to_vec(); n_images])
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn n_images(&self) -> usize {
        self.components.len()
    }

    pub fn label_index(&self, label: u16) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }
}

/// One Gaussian subtype of a tissue in one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub tau: f64,
    pub mu: f64,
    pub sigma2: f64,
}

/// Full set of mixture parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub labels: Vec<u16>,
    /// Global label proportions.
    pub pi: Vec<f64>,
    /// `components[i][k][c]`.
    pub components: Vec<Vec<Vec<Component>>>,
    /// Lower bound on every variance of image `i`.
    pub sigma_floor: Vec<f64>,
}

impl ModelParams {
    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn n_images(&self) -> usize {
        self.components.len()
    }

    pub fn config(&self) -> LabelConfig {
        LabelConfig {
            labels: self.labels.clone(),
            components: self
                .components
                .iter()
                .map(|row| row.iter().map(Vec::len).collect())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.labels.len();
        if self.pi.len() != k {
            return Err(Error::InvalidParameter("pi has the wrong length".into()));
        }
        if self.pi.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParameter("label proportions must be finite and non-negative".into()));
        }
        if self.sigma_floor.len() != self.components.len() {
            return Err(Error::InvalidParameter("sigma_floor has the wrong length".into()));
        }
        for (i, row) in self.components.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidParameter(format!("image {i}: wrong number of labels")));
            }
            for (kk, comps) in row.iter().enumerate() {
                if comps.is_empty() {
                    return Err(Error::InvalidParameter(format!("image {i}, label {kk}: no components")));
                }
                let s: f64 = comps.iter().map(|c| c.tau).sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!(
                        "image {i}, label {kk}: component proportions sum to {s}"
                    )));
                }
                for c in comps {
                    if !(c.sigma2 > 0.0) || !c.mu.is_finite() || !(c.tau >= 0.0) {
                        return Err(Error::InvalidParameter(format!(
                            "image {i}, label {kk}: invalid component {c:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_index(&self, i: usize, k: usize) -> Result<()> {
        if i >= self.components.len() || k >= self.labels.len() {
            return Err(Error::Config(format!("unknown (image, label) pair ({i}, {k})")));
        }
        Ok(())
    }

    /// `sum_c tau_ikc * N(v; mu_ikc, sigma2_ikc)` for label index `k`.
    pub fn tissue_intensity_pdf(&self, i: usize, k: usize, v: f64) -> Result<f64> {
        self.check_index(i, k)?;
        let mut s = 0.0;
        for c in &self.components[i][k] {
            s += c.tau * gaussian_pdf(c.mu, c.sigma2, v)?;
        }
        Ok(s)
    }
}

/// Free-function form of [`ModelParams::tissue_intensity_pdf`].
pub fn tissue_intensity_pdf(i: usize, k: usize, intensity: f64, params: &ModelParams) -> Result<f64> {
    params.tissue_intensity_pdf(i, k, intensity)
}

/// Variance floor for an image: `(1e-4 * range)^2`, or `1e-8` for a constant image.
pub fn sigma_floor_for(grid: &VoxelGrid) -> f64 {
    let (lo, hi) = grid.value_range();
    let r = hi - lo;
    if r > 0.0 && r.is_finite() {
        (1e-4 * r).powi(2)
    } else {
        1e-8
    }
}

/// Per-label probability maps on one lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct AtlasPrior {
    pub maps: Vec<VoxelGrid>,
}

impl AtlasPrior {
    pub fn new(maps: Vec<VoxelGrid>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidParameter("atlas needs at least one map".into()))?;
        for (k, m) in maps.iter().enumerate() {
            if m.lattice != first.lattice {
                return Err(Error::InvalidParameter(format!(
                    "atlas map {k} lies on a different lattice"
                )));
            }
            if m.values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "atlas map {k} has negative or non-finite values"
                )));
            }
        }
        Ok(Self { maps })
    }

    /// `1/n` for every label everywhere.
    pub fn uniform(lattice: Lattice, n: usize) -> Self {
        Self {
            maps: (0..n).map(|_| VoxelGrid::filled(lattice.clone(), 1.0 / n as f64)).collect(),
        }
    }

    pub fn n_labels(&self) -> usize {
        self.maps.len()
    }

    pub fn lattice(&self) -> &Lattice {
        &self.maps[0].lattice
    }

    /// Rescales each voxel so the maps sum to one; all-zero voxels become uniform.
    pub fn normalize(&mut self) {
        let n = self.maps.len();
        for x in 0..self.maps[0].values.len() {
            let s: f64 = self.maps.iter().map(|m| m.values[x]).sum();
            for m in &mut self.maps {
                m.values[x] = if s > 0.0 { m.values[x] / s } else { 1.0 / n as f64 };
            }
        }
    }

    /// Samples every map at `y` into `out`; outside the hull every label gets `1/|K|`.
    /// Returns the interpolation stencil when `y` is inside.
    pub fn sample_into(&self, y: Point3, out: &mut [f64]) -> Option<Stencil> {
        match Stencil::at(self.lattice(), y) {
            Some(st) => {
                for (o, m) in out.iter_mut().zip(&self.maps) {
                    *o = st.value(&m.values);
                }
                Some(st)
            }
            None => {
                out.fill(1.0 / self.maps.len() as f64);
                None
            }
        }
    }

    pub fn sample(&self, y: Point3) -> Vec<f64> {
        let mut out = vec![0.0; self.maps.len()];
        self.sample_into(y, &mut out);
        out
    }
}

/// `pi_k A_k(D(x)) / sum_l pi_l A_l(D(x))` for every label.
pub fn spatial_priors(x: Point3, params: &ModelParams, atlas: &AtlasPrior, ffd: &FfdDeformation) -> Result<Vec<f64>> {
    let a = atlas.sample(ffd.apply(x));
    if a.len() != params.pi.len() {
        return Err(Error::Config(format!(
            "atlas has {} labels but the model has {}",
            a.len(),
            params.pi.len()
        )));
    }
    let nf: f64 = a.iter().zip(&params.pi).map(|(a, p)| a * p).sum();
    if !(nf > 0.0) {
        return Err(Error::DegeneratePrior {
            voxel: atlas.lattice().nearest_voxel(x).unwrap_or(usize::MAX),
        });
    }
    Ok(a.iter().zip(&params.pi).map(|(a, p)| a * p / nf).collect())
}

pub fn spatial_prior(x: Point3, k: usize, params: &ModelParams, atlas: &AtlasPrior, ffd: &FfdDeformation) -> Result<f64> {
    spatial_priors(x, params, atlas, ffd)?
        .get(k)
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown label index {k}")))
}

/// Inputs of one segmentation run.
#[derive(Clone, Debug)]
pub struct Problem {
    pub images: MultivariateImageSet,
    pub atlas: AtlasPrior,
    pub config: LabelConfig,
}

impl Problem {
    pub fn new(images: MultivariateImageSet, atlas: AtlasPrior, config: LabelConfig) -> Result<Self> {
        if config.n_images() != images.len() {
            return Err(Error::Config(format!(
                "label configuration describes {} images but {} were given",
                config.n_images(),
                images.len()
            )));
        }
        if atlas.n_labels() != config.n_labels() {
            return Err(Error::Config(format!(
                "atlas has {} maps but {} labels are configured",
                atlas.n_labels(),
                config.n_labels()
            )));
        }
        Ok(Self { images, atlas, config })
    }
}

/// Marks voxels covered by no image.
pub const EXCLUDED: u32 = u32::MAX;

/// Decomposition of the common lattice into regions of identical covering sets.
#[derive(Clone, Debug, PartialEq)]
pub struct CoveragePartition {
    region: Vec<u32>,
    /// Bit mask of covering images per region.
    covering: Vec<u32>,
}

impl CoveragePartition {
    /// Groups voxels by covering mask; regions are numbered by first occurrence.
    pub fn from_masks(masks: &[u32]) -> Result<Self> {
        let mut covering: Vec<u32> = Vec::new();
        let region = masks
            .iter()
            .map(|&m| {
                if m == 0 {
                    return EXCLUDED;
                }
                match covering.iter().position(|&c| c == m) {
                    Some(v) => v as u32,
                    None => {
                        covering.push(m);
                        (covering.len() - 1) as u32
                    }
                }
            })
            .collect();
        if covering.is_empty() {
            return Err(Error::EmptyDomain);
        }
        Ok(Self { region, covering })
    }

    pub fn n_regions(&self) -> usize {
        self.covering.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.region.len()
    }

    pub fn region_of(&self, voxel: usize) -> Option<usize> {
        match self.region[voxel] {
            EXCLUDED => None,
            v => Some(v as usize),
        }
    }

    pub fn covering_mask(&self, region: usize) -> u32 {
        self.covering[region]
    }

    pub fn covering_images(&self, region: usize) -> Vec<usize> {
        let m = self.covering[region];
        (0..32).filter(|i| m & (1 << i) != 0).collect()
    }

    /// Covering mask of a voxel, 0 when excluded.
    pub fn voxel_mask(&self, voxel: usize) -> u32 {
        self.region_of(voxel).map_or(0, |v| self.covering[v])
    }

    pub fn voxels_in(&self, region: usize) -> impl Iterator<Item = usize> + '_ {
        self.region
            .iter()
            .enumerate()
            .filter(move |(_, &r)| r as usize == region && r != EXCLUDED)
            .map(|(x, _)| x)
    }

    pub fn n_included(&self) -> usize {
        self.region.iter().filter(|&&r| r != EXCLUDED).count()
    }
}

/// Covering sets from hull membership of `G_{i,s}(x)` for every common voxel.
pub fn build_coverage_partition(images: &MultivariateImageSet, transforms: &TransformState) -> Result<CoveragePartition> {
    let masks: Vec<u32> = (0..images.common.len())
        .map(|x| {
            let p = images.common.center(x);
            images.images.iter().enumerate().fold(0u32, |m, (i, g)| {
                if g.lattice.contains(transforms.slices.sample_point(i, p)) {
                    m | (1 << i)
                } else {
                    m
                }
            })
        })
        .collect();
    CoveragePartition::from_masks(&masks)
}

/// Product over the covering images of `x`'s region of the per-image tissue density.
pub fn label_conditional_pdf(
    x: Point3,
    k: usize,
    images: &MultivariateImageSet,
    transforms: &TransformState,
    params: &ModelParams,
    coverage: &CoveragePartition,
) -> Result<f64> {
    let region = images
        .common
        .nearest_voxel(x)
        .and_then(|v| coverage.region_of(v))
        .ok_or(Error::Uncovered { point: x })?;
    let mut p = 1.0;
    for i in coverage.covering_images(region) {
        if let Some(v) = images.images[i].sample(transforms.slices.sample_point(i, x)) {
            p *= params.tissue_intensity_pdf(i, k, v)?;
        }
    }
    Ok(p)
}

/// Log-likelihood summed over the non-excluded voxels of `coverage`. Images
/// listed for a voxel whose transformed sample falls outside are skipped.
pub fn total_log_likelihood(
    images: &MultivariateImageSet,
    atlas: &AtlasPrior,
    params: &ModelParams,
    transforms: &TransformState,
    coverage: &CoveragePartition,
) -> Result<f64> {
    params.validate()?;
    let obs = Observations::new(images, atlas, transforms)?;
    if coverage.n_voxels() != obs.n_voxels() {
        return Err(Error::InvalidParameter(
            "coverage partition does not match the common lattice".into(),
        ));
    }
    let cp = Compiled::new(params, obs.n_labels())?;
    obs.log_likelihood_with(&cp, |x| coverage.voxel_mask(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::SliceMode;

    #[test]
    fn gaussian_values() {
        let p0 = gaussian_pdf(0.0, 1.0, 0.0).unwrap();
        assert!((p0 - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((gaussian_pdf(5.0, 4.0, 5.0).unwrap() - 1.0 / (8.0 * PI).sqrt()).abs() < 1e-15);
        let r = gaussian_pdf(0.0, 1.0, 1.0).unwrap() / p0;
        assert!((r - (-0.5f64).exp()).abs() < 1e-15);
        assert!(gaussian_pdf(0.0, 0.0, 1.0).is_err());
        assert!(gaussian_pdf(0.0, -1.0, 1.0).is_err());
    }

    fn params_one_image(comps: Vec<Component>) -> ModelParams {
        ModelParams {
            labels: vec![0],
            pi: vec![1.0],
            components: vec![vec![comps]],
            sigma_floor: vec![1e-8],
        }
    }

    #[test]
    fn tissue_pdf_cases() {
        let single = params_one_image(vec![Component { tau: 1.0, mu: 2.0, sigma2: 3.0 }]);
        assert_eq!(
            single.tissue_intensity_pdf(0, 0, 1.5).unwrap(),
            gaussian_pdf(2.0, 3.0, 1.5).unwrap()
        );

        let c = Component { tau: 0.5, mu: 2.0, sigma2: 3.0 };
        let twin = params_one_image(vec![c, c]);
        assert!((twin.tissue_intensity_pdf(0, 0, 1.5).unwrap() - gaussian_pdf(2.0, 3.0, 1.5).unwrap()).abs() < 1e-16);

        let mixed = params_one_image(vec![
            Component { tau: 0.3, mu: 0.0, sigma2: 1.0 },
            Component { tau: 0.7, mu: 10.0, sigma2: 1.0 },
        ]);
        let direct = 0.3 * gaussian_pdf(0.0, 1.0, 0.0).unwrap() + 0.7 * gaussian_pdf(10.0, 1.0, 0.0).unwrap();
        assert!((mixed.tissue_intensity_pdf(0, 0, 0.0).unwrap() - direct).abs() < 1e-16);
        assert!(matches!(mixed.tissue_intensity_pdf(1, 0, 0.0), Err(Error::Config(_))));
        assert!(matches!(mixed.tissue_intensity_pdf(0, 3, 0.0), Err(Error::Config(_))));
    }

    fn two_label_params(pi: [f64; 2]) -> ModelParams {
        let c = Component { tau: 1.0, mu: 0.0, sigma2: 1.0 };
        ModelParams {
            labels: vec![0, 1],
            pi: pi.to_vec(),
            components: vec![vec![vec![c], vec![c]]],
            sigma_floor: vec![1e-8],
        }
    }

    fn lattice() -> Lattice {
        Lattice::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn prior_cases() {
        let ffd = FfdDeformation::covering(&lattice(), 20.0).unwrap();
        let flat = AtlasPrior::uniform(lattice(), 2);
        let p = spatial_priors([1.0, 1.0, 1.0], &two_label_params([1.0, 3.0]), &flat, &ffd).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);

        let mut onehot = AtlasPrior::uniform(lattice(), 2);
        onehot.maps[0].values.fill(0.0);
        onehot.maps[1].values.fill(1.0);
        let p = spatial_priors([1.0, 2.0, 1.0], &two_label_params([0.5, 0.5]), &onehot, &ffd).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);

        // pi = (0.2, 0.8), A = (0.5, 0.5): (0.1, 0.4) / 0.5.
        let p = spatial_priors([1.0, 2.0, 1.0], &two_label_params([0.2, 0.8]), &flat, &ffd).unwrap();
        assert!((p[0] - 0.2).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert!((spatial_prior([1.0, 2.0, 1.0], 1, &two_label_params([0.2, 0.8]), &flat, &ffd).unwrap() - 0.8).abs() < 1e-15);

        // Outside the atlas hull the maps fall back to 1/|K|.
        let p = spatial_priors([-9.0, 2.0, 1.0], &two_label_params([0.5, 0.5]), &onehot, &ffd).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        assert!(matches!(
            spatial_priors([1.0, 2.0, 1.0], &two_label_params([1.0, 0.0]), &onehot, &ffd),
            Err(Error::DegeneratePrior { .. })
        ));
    }

    #[test]
    fn normalize_rescales_and_fills_empty_voxels() {
        let mut a = AtlasPrior::uniform(lattice(), 3);
        a.maps[0].values[0] = 3.0;
        for m in &mut a.maps {
            m.values[1] = 0.0;
        }
        a.normalize();
        let s: f64 = a.maps.iter().map(|m| m.values[0]).sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(a.maps.iter().all(|m| (m.values[1] - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn partition_from_masks() {
        let p = CoveragePartition::from_masks(&[3, 3, 1, 0, 1, 2]).unwrap();
        assert_eq!(p.n_regions(), 3);
        assert_eq!(p.covering_images(0), vec![0, 1]);
        assert_eq!(p.covering_images(1), vec![0]);
        assert_eq!(p.region_of(3), None);
        assert_eq!(p.voxels_in(1).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(p.n_included(), 5);
        assert!(matches!(CoveragePartition::from_masks(&[0, 0]), Err(Error::EmptyDomain)));
    }

    #[test]
    fn half_covered_partition() {
        let l = Lattice::new([4, 4, 8], [1.0; 3], [0.0; 3]).unwrap();
        let lower = Lattice::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let images = MultivariateImageSet::with_common(
            vec![VoxelGrid::filled(l.clone(), 1.0), VoxelGrid::filled(lower, 1.0)],
            l.clone(),
        )
        .unwrap();
        let t = TransformState::identity(&images, SliceMode::Rigid, 20.0).unwrap();
        let p = build_coverage_partition(&images, &t).unwrap();
        assert_eq!(p.n_regions(), 2);
        for x in 0..l.len() {
            let want = if l.ijk(x)[2] < 4 { vec![0, 1] } else { vec![0] };
            assert_eq!(p.covering_images(p.region_of(x).unwrap()), want);
        }
    }

    #[test]
    fn label_conditional_products() {
        let l = lattice();
        let images = MultivariateImageSet::new(vec![
            VoxelGrid::filled(l.clone(), 1.0),
            VoxelGrid::filled(l.clone(), 1.0),
        ])
        .unwrap();
        let t = TransformState::identity(&images, SliceMode::Rigid, 20.0).unwrap();
        let cov = build_coverage_partition(&images, &t).unwrap();
        let c = Component { tau: 1.0, mu: 0.0, sigma2: 2.0 };
        let params = ModelParams {
            labels: vec![0],
            pi: vec![1.0],
            components: vec![vec![vec![c]], vec![vec![c]]],
            sigma_floor: vec![1e-8; 2],
        };
        let q = gaussian_pdf(0.0, 2.0, 1.0).unwrap();
        let p = label_conditional_pdf([1.0, 1.0, 1.0], 0, &images, &t, &params, &cov).unwrap();
        assert!((p - q * q).abs() < 1e-16);

        let one = MultivariateImageSet::new(vec![VoxelGrid::filled(l.clone(), 1.0)]).unwrap();
        let t1 = TransformState::identity(&one, SliceMode::Rigid, 20.0).unwrap();
        let cov1 = build_coverage_partition(&one, &t1).unwrap();
        let p1 = ModelParams {
            components: vec![vec![vec![c]]],
            sigma_floor: vec![1e-8],
            ..params.clone()
        };
        assert_eq!(label_conditional_pdf([1.0, 1.0, 1.0], 0, &one, &t1, &p1, &cov1).unwrap(), q);
        assert!(matches!(
            label_conditional_pdf([10.0, 1.0, 1.0], 0, &one, &t1, &p1, &cov1),
            Err(Error::Uncovered { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LabelConfig::new(vec![], vec![]).is_err());
        assert!(LabelConfig::new(vec![0, 0], vec![vec![1, 1]]).is_err());
        assert!(LabelConfig::new(vec![0, 1], vec![vec![1, 0]]).is_err());
        assert!(LabelConfig::new(vec![0, 1], vec![vec![1]]).is_err());
        let c = LabelConfig::uniform(vec![0, 1, 2], &[2, 2, 1], 3).unwrap();
        assert_eq!(c.n_images(), 3);
        assert_eq!(c.label_index(2), Some(2));
    }
}

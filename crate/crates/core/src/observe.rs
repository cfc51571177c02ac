//! Cached per-voxel observations for the current transforms: each image sampled
//! at `G_{i,s}(x)`, the covering mask of every common voxel, and the atlas
//! probabilities at `D(x)`.

use crate::error::{Error, Result};
use crate::model::{AtlasPrior, CoveragePartition, ModelParams, DENSITY_FLOOR};
use crate::parallel;
use crate::registration::{FfdDeformation, SliceAffineSet, TransformState};
use crate::volume::{Lattice, MultivariateImageSet};

/// Upper bound on the number of labels.
pub const MAX_LABELS: usize = 32;
/// Upper bound on the number of components of one (image, label) pair.
pub const MAX_COMPONENTS: usize = 16;

pub(crate) fn ln_floor() -> f64 {
    DENSITY_FLOOR.ln()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct CompiledComponent {
    /// `ln tau - 0.5 ln(2 pi sigma2)`.
    log_w: f64,
    mu: f64,
    inv_s2: f64,
}

/// Model parameters rearranged for fast log-density evaluation.
#[derive(Clone, Debug)]
pub(crate) struct Compiled {
    pub(crate) pi: Vec<f64>,
    pub(crate) log_pi: Vec<f64>,
    comps: Vec<Vec<Vec<CompiledComponent>>>,
    ln_floor: f64,
}

impl Compiled {
    pub(crate) fn new(params: &ModelParams, n_atlas_labels: usize) -> Result<Self> {
        if params.n_labels() != n_atlas_labels {
            return Err(Error::Config(format!(
                "atlas has {n_atlas_labels} labels but the model has {}",
                params.n_labels()
            )));
        }
        if params.n_labels() > MAX_LABELS {
            return Err(Error::Config(format!("at most {MAX_LABELS} labels are supported")));
        }
        if params.components.iter().flatten().any(|cs| cs.len() > MAX_COMPONENTS) {
            return Err(Error::Config(format!(
                "at most {MAX_COMPONENTS} components per label are supported"
            )));
        }
        let comps = params
            .components
            .iter()
            .map(|row| {
                row.iter()
                    .map(|cs| {
                        cs.iter()
                            .map(|c| CompiledComponent {
                                log_w: c.tau.ln() - 0.5 * (2.0 * std::f64::consts::PI * c.sigma2).ln(),
                                mu: c.mu,
                                inv_s2: 1.0 / c.sigma2,
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            pi: params.pi.clone(),
            log_pi: params.pi.iter().map(|p| p.ln()).collect(),
            comps,
            ln_floor: ln_floor(),
        })
    }

    pub(crate) fn n_components(&self, i: usize, k: usize) -> usize {
        self.comps[i][k].len()
    }

    /// Unfloored `ln sum_c tau_c N(v)`, writing per-component log terms into `out`.
    #[inline]
    pub(crate) fn component_terms(&self, i: usize, k: usize, v: f64, out: &mut [f64]) -> f64 {
        let cs = &self.comps[i][k];
        let mut m = f64::NEG_INFINITY;
        for (o, c) in out.iter_mut().zip(cs) {
            let d = v - c.mu;
            *o = c.log_w - 0.5 * d * d * c.inv_s2;
            m = m.max(*o);
        }
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + out[..cs.len()].iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    /// Floored log tissue density.
    #[inline]
    pub(crate) fn log_density(&self, i: usize, k: usize, v: f64) -> f64 {
        let mut buf = [0.0; MAX_COMPONENTS];
        self.component_terms(i, k, v, &mut buf).max(self.ln_floor)
    }

    /// Floored log density and its derivative with respect to the intensity
    /// (zero where the floor is active).
    #[inline]
    pub(crate) fn log_density_slope(&self, i: usize, k: usize, v: f64) -> (f64, f64) {
        let cs = &self.comps[i][k];
        let mut buf = [0.0; MAX_COMPONENTS];
        let lse = self.component_terms(i, k, v, &mut buf);
        if !(lse > self.ln_floor) {
            return (self.ln_floor, 0.0);
        }
        let slope = cs
            .iter()
            .zip(&buf)
            .map(|(c, t)| (t - lse).exp() * (c.mu - v) * c.inv_s2)
            .sum();
        (lse, slope)
    }
}

/// Result of evaluating one voxel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct VoxelEval {
    /// `ln sum_k exp(terms_k)`.
    pub ll: f64,
    pub ln_nf: f64,
}

/// Per-voxel sampled data of the current state.
#[derive(Clone, Debug)]
pub struct Observations {
    common: Lattice,
    n_labels: usize,
    /// `intens[i][x]`, NaN where image `i` does not cover `x`.
    intens: Vec<Vec<f64>>,
    mask: Vec<u32>,
    /// `atlas[x * K + k] = A_k(D(x))`.
    atlas: Vec<f64>,
    /// Common voxels attributed to each slice of each image.
    slice_voxels: Vec<Vec<Vec<usize>>>,
}

impl Observations {
    pub fn new(images: &MultivariateImageSet, atlas: &AtlasPrior, transforms: &TransformState) -> Result<Self> {
        if transforms.slices.stacks.len() != images.len() {
            return Err(Error::InvalidParameter(format!(
                "transforms describe {} images, got {}",
                transforms.slices.stacks.len(),
                images.len()
            )));
        }
        let common = images.common.clone();
        let n = common.len();
        let slice_voxels = transforms
            .slices
            .stacks
            .iter()
            .map(|stack| {
                let mut per = vec![Vec::new(); stack.n_slices];
                for x in 0..n {
                    if let Some(s) = stack.slice_of(common.center(x)[2]) {
                        per[s].push(x);
                    }
                }
                per
            })
            .collect();
        let mut obs = Self {
            n_labels: atlas.n_labels(),
            intens: vec![vec![f64::NAN; n]; images.len()],
            mask: vec![0; n],
            atlas: Vec::new(),
            slice_voxels,
            common,
        };
        for i in 0..images.len() {
            let grid = &images.images[i];
            let common = &obs.common;
            parallel::try_fill(&mut obs.intens[i], 1, |x, out| {
                out[0] = grid
                    .sample(transforms.slices.sample_point(i, common.center(x)))
                    .unwrap_or(f64::NAN);
                Ok(())
            })?;
        }
        obs.rebuild_masks();
        obs.atlas = obs.atlas_values(atlas, &transforms.ffd)?;
        Ok(obs)
    }

    fn rebuild_masks(&mut self) {
        for x in 0..self.mask.len() {
            self.mask[x] = self
                .intens
                .iter()
                .enumerate()
                .fold(0, |m, (i, v)| if v[x].is_nan() { m } else { m | (1 << i) });
        }
    }

    pub fn common(&self) -> &Lattice {
        &self.common
    }

    pub fn n_voxels(&self) -> usize {
        self.mask.len()
    }

    pub fn n_images(&self) -> usize {
        self.intens.len()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    /// Covering mask of voxel `x` (bit `i` set when image `i` covers it).
    pub fn mask(&self, x: usize) -> u32 {
        self.mask[x]
    }

    pub fn masks(&self) -> &[u32] {
        &self.mask
    }

    pub fn intensity(&self, i: usize, x: usize) -> Option<f64> {
        let v = self.intens[i][x];
        (!v.is_nan()).then_some(v)
    }

    pub fn atlas_at(&self, x: usize) -> &[f64] {
        &self.atlas[x * self.n_labels..(x + 1) * self.n_labels]
    }

    pub fn included(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m != 0).map(|(x, _)| x)
    }

    pub fn partition(&self) -> Result<CoveragePartition> {
        CoveragePartition::from_masks(&self.mask)
    }

    pub fn slice_voxels(&self, i: usize, s: usize) -> &[usize] {
        &self.slice_voxels[i][s]
    }

    pub fn n_slices(&self, i: usize) -> usize {
        self.slice_voxels[i].len()
    }

    /// Atlas probabilities at `D(x)` for every common voxel.
    pub(crate) fn atlas_values(&self, atlas: &AtlasPrior, ffd: &FfdDeformation) -> Result<Vec<f64>> {
        let k = self.n_labels;
        let mut out = vec![0.0; self.common.len() * k];
        parallel::try_fill(&mut out, k, |x, a| {
            atlas.sample_into(ffd.apply(self.common.center(x)), a);
            Ok(())
        })?;
        Ok(out)
    }

    pub(crate) fn atlas_all(&self) -> &[f64] {
        &self.atlas
    }

    pub(crate) fn set_atlas_values(&mut self, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.atlas.len());
        self.atlas = values;
    }

    /// Resamples image `i` on the voxels of slice `s` after its transform changed.
    pub(crate) fn refresh_slice(&mut self, images: &MultivariateImageSet, slices: &SliceAffineSet, i: usize, s: usize) {
        let grid = &images.images[i];
        for &x in &self.slice_voxels[i][s] {
            let v = grid
                .sample(slices.sample_point(i, self.common.center(x)))
                .unwrap_or(f64::NAN);
            self.intens[i][x] = v;
            if v.is_nan() {
                self.mask[x] &= !(1 << i);
            } else {
                self.mask[x] |= 1 << i;
            }
        }
    }

    /// Evaluates voxel `x` under `mask`, optionally replacing image `over.0`'s
    /// intensity by `over.1`. Fills `data[k] = sum_i ln p_i(I_i | k)` and
    /// `terms[k] = ln pi_k + ln A_k - ln NF + data[k]`.
    #[inline]
    pub(crate) fn eval_voxel(
        &self,
        cp: &Compiled,
        x: usize,
        mask: u32,
        over: Option<(usize, f64)>,
        atlas: &[f64],
        data: &mut [f64],
        terms: &mut [f64],
    ) -> Result<VoxelEval> {
        let k_n = self.n_labels;
        let a = &atlas[x * k_n..(x + 1) * k_n];
        let nf: f64 = a.iter().zip(&cp.pi).map(|(a, p)| a * p).sum();
        if !(nf > 0.0) || !nf.is_finite() {
            return Err(Error::DegeneratePrior { voxel: x });
        }
        let ln_nf = nf.ln();
        data[..k_n].fill(0.0);
        for i in 0..self.intens.len() {
            if mask & (1 << i) == 0 {
                continue;
            }
            let v = match over {
                Some((j, v)) if j == i => v,
                _ => self.intens[i][x],
            };
            for (k, d) in data[..k_n].iter_mut().enumerate() {
                *d += cp.log_density(i, k, v);
            }
        }
        let mut m = f64::NEG_INFINITY;
        for k in 0..k_n {
            terms[k] = if a[k] > 0.0 && cp.pi[k] > 0.0 {
                cp.log_pi[k] + a[k].ln() - ln_nf + data[k]
            } else {
                f64::NEG_INFINITY
            };
            m = m.max(terms[k]);
        }
        let ll = m + terms[..k_n].iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        if !ll.is_finite() {
            return Err(self.zero_likelihood(x, mask, cp));
        }
        Ok(VoxelEval { ll, ln_nf })
    }

    fn zero_likelihood(&self, x: usize, mask: u32, cp: &Compiled) -> Error {
        let values: Vec<Option<f64>> = (0..self.intens.len())
            .map(|i| (mask & (1 << i) != 0).then(|| self.intens[i][x]))
            .collect();
        Error::ZeroLikelihood {
            voxel: x,
            ijk: self.common.ijk(x),
            detail: format!(
                "intensities {values:?}, atlas {:?}, pi {:?}",
                self.atlas_at(x),
                cp.pi
            ),
        }
    }

    /// Total log-likelihood with per-voxel masks supplied by `mask_of`; images
    /// listed in a mask but not sampled at the voxel are skipped.
    pub(crate) fn log_likelihood_with<M>(&self, cp: &Compiled, mask_of: M) -> Result<f64>
    where
        M: Fn(usize) -> u32 + Sync,
    {
        parallel::try_sum(self.n_voxels(), |x| {
            let listed = mask_of(x);
            if listed == 0 {
                return Ok(0.0);
            }
            let m = listed & self.mask[x];
            let mut data = [0.0; MAX_LABELS];
            let mut terms = [0.0; MAX_LABELS];
            Ok(self.eval_voxel(cp, x, m, None, &self.atlas, &mut data, &mut terms)?.ll)
        })
    }

    pub(crate) fn log_likelihood(&self, cp: &Compiled) -> Result<f64> {
        self.log_likelihood_atlas(cp, &self.atlas)
    }

    /// Total log-likelihood with substitute atlas values.
    pub(crate) fn log_likelihood_atlas(&self, cp: &Compiled, atlas: &[f64]) -> Result<f64> {
        parallel::try_sum(self.n_voxels(), |x| {
            let m = self.mask[x];
            if m == 0 {
                return Ok(0.0);
            }
            let mut data = [0.0; MAX_LABELS];
            let mut terms = [0.0; MAX_LABELS];
            Ok(self.eval_voxel(cp, x, m, None, atlas, &mut data, &mut terms)?.ll)
        })
    }

    /// Public entry point: total log-likelihood of `params` on the cached data.
    pub fn total_log_likelihood(&self, params: &ModelParams) -> Result<f64> {
        let cp = Compiled::new(params, self.n_labels)?;
        self.log_likelihood(&cp)
    }
}

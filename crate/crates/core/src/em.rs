//! EM over the mixture parameters on fixed observations.

use crate::error::{Error, Result};
use crate::model::{sigma_floor_for, Component, LabelConfig, ModelParams};
use crate::observe::{Compiled, Observations, MAX_COMPONENTS, MAX_LABELS};
use crate::parallel;
use crate::registration::SliceAffineSet;
use crate::volume::{LabelVolume, Lattice, MultivariateImageSet};

/// Responsibility mass below which a component counts as starved.
const STARVED_MASS: f64 = 1e-10;
/// Proportion given to a re-seeded component.
const RESEED_TAU: f64 = 1e-3;

/// Label and component posteriors for every common voxel.
///
/// Storage is one record per voxel: `K` label posteriors, then for each image
/// its component posteriors grouped by label. Excluded voxels and images not
/// covering a voxel hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorField {
    n_labels: usize,
    stride: usize,
    /// `offsets[i][k]`: start of image `i`, label `k` components within a record.
    offsets: Vec<Vec<usize>>,
    masks: Vec<u32>,
    data: Vec<f64>,
}

impl PosteriorField {
    fn layout(cp: &Compiled, n_images: usize, n_labels: usize) -> (Vec<Vec<usize>>, usize) {
        let mut off = n_labels;
        let offsets = (0..n_images)
            .map(|i| {
                (0..n_labels)
                    .map(|k| {
                        let o = off;
                        off += cp.n_components(i, k);
                        o
                    })
                    .collect()
            })
            .collect();
        (offsets, off)
    }

    pub fn n_voxels(&self) -> usize {
        self.masks.len()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn is_included(&self, x: usize) -> bool {
        self.masks[x] != 0
    }

    pub fn mask(&self, x: usize) -> u32 {
        self.masks[x]
    }

    /// `P_kx`.
    #[inline]
    pub fn label(&self, x: usize, k: usize) -> f64 {
        self.data[x * self.stride + k]
    }

    pub fn labels_at(&self, x: usize) -> &[f64] {
        &self.data[x * self.stride..x * self.stride + self.n_labels]
    }

    /// `P_ikcx`; zero when image `i` does not cover `x`.
    #[inline]
    pub fn component(&self, i: usize, x: usize, k: usize, c: usize) -> f64 {
        self.data[x * self.stride + self.offsets[i][k] + c]
    }

    fn n_components(&self, i: usize, k: usize) -> usize {
        let next = if k + 1 < self.n_labels {
            self.offsets[i][k + 1]
        } else if i + 1 < self.offsets.len() {
            self.offsets[i + 1][0]
        } else {
            self.stride
        };
        next - self.offsets[i][k]
    }
}

/// Posteriors under `params` and the log-likelihood they were computed from.
pub fn e_step(obs: &Observations, params: &ModelParams) -> Result<(PosteriorField, f64)> {
    let cp = Compiled::new(params, obs.n_labels())?;
    let k_n = obs.n_labels();
    let n_images = obs.n_images();
    let (offsets, stride) = PosteriorField::layout(&cp, n_images, k_n);
    // One extra slot per record carries the voxel log-likelihood.
    let width = stride + 1;
    let mut buf = vec![0.0; obs.n_voxels() * width];
    let atlas = obs.atlas_all();
    parallel::try_fill(&mut buf, width, |x, rec| {
        let m = obs.mask(x);
        if m == 0 {
            return Ok(());
        }
        let mut data = [0.0; MAX_LABELS];
        let mut terms = [0.0; MAX_LABELS];
        let ev = obs.eval_voxel(&cp, x, m, None, atlas, &mut data, &mut terms)?;
        for k in 0..k_n {
            rec[k] = (terms[k] - ev.ll).exp();
        }
        let mut ct = [0.0; MAX_COMPONENTS];
        for i in 0..n_images {
            if m & (1 << i) == 0 {
                continue;
            }
            let v = obs.intensity(i, x).expect("covered voxel has an intensity");
            for k in 0..k_n {
                let lse = cp.component_terms(i, k, v, &mut ct);
                let o = offsets[i][k];
                for c in 0..cp.n_components(i, k) {
                    rec[o + c] = if lse == f64::NEG_INFINITY {
                        0.0
                    } else {
                        rec[k] * (ct[c] - lse).exp()
                    };
                }
            }
        }
        rec[stride] = ev.ll;
        Ok(())
    })?;
    let mut ll = 0.0;
    let mut data = Vec::with_capacity(obs.n_voxels() * stride);
    for rec in buf.chunks_exact(width) {
        ll += rec[stride];
        data.extend_from_slice(&rec[..stride]);
    }
    Ok((
        PosteriorField {
            n_labels: k_n,
            stride,
            offsets,
            masks: obs.masks().to_vec(),
            data,
        },
        ll,
    ))
}

/// Weighted moments per (image, label, component) over the voxels each image covers.
fn component_moments(obs: &Observations, post: &PosteriorField) -> Result<Vec<Vec<Vec<[f64; 3]>>>> {
    let n_images = obs.n_images();
    let k_n = post.n_labels;
    let layout: Vec<(usize, usize, usize, usize)> = (0..n_images)
        .flat_map(|i| {
            (0..k_n).flat_map(move |k| (0..post.n_components(i, k)).map(move |c| (i, k, c, post.offsets[i][k] + c)))
        })
        .collect();
    let n = layout.len();
    // First pass: mass and weighted sum.
    let first = parallel::try_reduce(
        post.n_voxels(),
        || vec![0.0; 2 * n],
        |acc, x| {
            let m = post.masks[x];
            for (j, &(i, _, _, o)) in layout.iter().enumerate() {
                if m & (1 << i) != 0 {
                    let w = post.data[x * post.stride + o];
                    acc[2 * j] += w;
                    acc[2 * j + 1] += w * obs.intensity(i, x).unwrap_or(0.0);
                }
            }
            Ok(())
        },
        |acc, p| acc.iter_mut().zip(p).for_each(|(a, b)| *a += b),
    )?;
    let means: Vec<f64> = (0..n)
        .map(|j| if first[2 * j] > 0.0 { first[2 * j + 1] / first[2 * j] } else { 0.0 })
        .collect();
    // Second pass: weighted squared deviation about the mean.
    let second = parallel::try_reduce(
        post.n_voxels(),
        || vec![0.0; n],
        |acc, x| {
            let m = post.masks[x];
            for (j, &(i, _, _, o)) in layout.iter().enumerate() {
                if m & (1 << i) != 0 {
                    let w = post.data[x * post.stride + o];
                    let d = obs.intensity(i, x).unwrap_or(0.0) - means[j];
                    acc[j] += w * d * d;
                }
            }
            Ok(())
        },
        |acc, p| acc.iter_mut().zip(p).for_each(|(a, b)| *a += b),
    )?;
    let mut out: Vec<Vec<Vec<[f64; 3]>>> = (0..n_images)
        .map(|i| (0..k_n).map(|k| vec![[0.0; 3]; post.n_components(i, k)]).collect())
        .collect();
    for (j, &(i, k, c, _)) in layout.iter().enumerate() {
        out[i][k][c] = [first[2 * j], means[j], second[j]];
    }
    Ok(out)
}

/// Closed-form updates of `tau`, `mu` and `sigma2`; `pi` is carried over.
///
/// A starved component is re-seeded one standard deviation above its heaviest
/// sibling with a small proportion. A label carrying no mass in an image keeps
/// its previous components there.
pub fn m_step(obs: &Observations, post: &PosteriorField, params: &ModelParams) -> Result<ModelParams> {
    let moments = component_moments(obs, post)?;
    let mut next = params.clone();
    for (i, row) in moments.iter().enumerate() {
        let floor = params.sigma_floor[i];
        for (k, comps) in row.iter().enumerate() {
            let total: f64 = comps.iter().map(|m| m[0]).sum();
            if !(total > STARVED_MASS) {
                continue;
            }
            let mut updated: Vec<Component> = comps
                .iter()
                .map(|&[mass, mean, ss]| Component {
                    tau: mass / total,
                    mu: mean,
                    sigma2: if mass > 0.0 { (ss / mass).max(floor) } else { floor },
                })
                .collect();
            let starved: Vec<usize> = (0..comps.len()).filter(|&c| !(comps[c][0] > STARVED_MASS)).collect();
            if !starved.is_empty() {
                let heavy = (0..comps.len())
                    .max_by(|&a, &b| comps[a][0].total_cmp(&comps[b][0]).then(b.cmp(&a)))
                    .unwrap();
                let h = updated[heavy];
                for &c in &starved {
                    updated[c] = Component {
                        tau: RESEED_TAU,
                        mu: h.mu + h.sigma2.sqrt(),
                        sigma2: h.sigma2,
                    };
                }
                let s: f64 = updated.iter().map(|c| c.tau).sum();
                updated.iter_mut().for_each(|c| c.tau /= s);
            }
            next.components[i][k] = updated;
        }
    }
    Ok(next)
}

/// Generalized-EM label proportion update with the normalizer frozen at the
/// previous proportions, rescaled to sum to one.
pub fn update_pi(obs: &Observations, post: &PosteriorField, params: &ModelParams) -> Result<Vec<f64>> {
    let k_n = obs.n_labels();
    let pi = &params.pi;
    let sums = parallel::try_reduce(
        obs.n_voxels(),
        || vec![0.0; 2 * k_n],
        |acc, x| {
            if !post.is_included(x) {
                return Ok(());
            }
            let a = obs.atlas_at(x);
            let c: f64 = a.iter().zip(pi).map(|(a, p)| a * p).sum();
            if !(c > 0.0) {
                return Err(Error::DegeneratePrior { voxel: x });
            }
            for k in 0..k_n {
                acc[k] += post.label(x, k);
                acc[k_n + k] += a[k] / c;
            }
            Ok(())
        },
        |acc, p| acc.iter_mut().zip(p).for_each(|(a, b)| *a += b),
    )?;
    let mut next = Vec::with_capacity(k_n);
    for k in 0..k_n {
        if !(sums[k_n + k] > 0.0) {
            return Err(Error::DegenerateAtlas { label: params.labels[k] });
        }
        next.push(sums[k] / sums[k_n + k]);
    }
    let s: f64 = next.iter().sum();
    next.iter_mut().for_each(|p| *p /= s);
    Ok(next)
}

/// Atlas-weighted initialization of every parameter.
pub fn initialize_params(images: &MultivariateImageSet, obs: &Observations, config: &LabelConfig) -> Result<ModelParams> {
    let k_n = config.n_labels();
    if obs.n_labels() != k_n {
        return Err(Error::Config(format!(
            "atlas has {} labels but the configuration lists {k_n}",
            obs.n_labels()
        )));
    }
    if config.n_images() != images.len() {
        return Err(Error::Config(format!(
            "configuration describes {} images, got {}",
            config.n_images(),
            images.len()
        )));
    }
    let n_images = images.len();
    // Per label: total mass; per (image, label): mass, sum, sum of squares.
    let width = k_n + 3 * n_images * k_n + 3 * n_images;
    let first = parallel::try_reduce(
        obs.n_voxels(),
        || vec![0.0; width],
        |acc, x| {
            let m = obs.mask(x);
            if m == 0 {
                return Ok(());
            }
            let a = obs.atlas_at(x);
            for k in 0..k_n {
                acc[k] += a[k];
            }
            for i in 0..n_images {
                if m & (1 << i) == 0 {
                    continue;
                }
                let v = obs.intensity(i, x).unwrap_or(0.0);
                for k in 0..k_n {
                    let o = k_n + 3 * (i * k_n + k);
                    acc[o] += a[k];
                    acc[o + 1] += a[k] * v;
                }
                let o = k_n + 3 * n_images * k_n + 3 * i;
                acc[o] += 1.0;
                acc[o + 1] += v;
            }
            Ok(())
        },
        |acc, p| acc.iter_mut().zip(p).for_each(|(a, b)| *a += b),
    )?;
    let mean = |i: usize, k: Option<usize>| -> (f64, f64) {
        match k {
            Some(k) => {
                let o = k_n + 3 * (i * k_n + k);
                (first[o], first[o + 1] / first[o])
            }
            None => {
                let o = k_n + 3 * n_images * k_n + 3 * i;
                (first[o], first[o + 1] / first[o])
            }
        }
    };
    // Second pass: squared deviations about the weighted means.
    let means: Vec<f64> = (0..n_images)
        .flat_map(|i| (0..k_n).map(move |k| (i, k)))
        .map(|(i, k)| mean(i, Some(k)).1)
        .chain((0..n_images).map(|i| mean(i, None).1))
        .collect();
    let second = parallel::try_reduce(
        obs.n_voxels(),
        || vec![0.0; n_images * k_n + n_images],
        |acc, x| {
            let m = obs.mask(x);
            let a = obs.atlas_at(x);
            for i in 0..n_images {
                if m & (1 << i) == 0 {
                    continue;
                }
                let v = obs.intensity(i, x).unwrap_or(0.0);
                for k in 0..k_n {
                    let d = v - means[i * k_n + k];
                    acc[i * k_n + k] += a[k] * d * d;
                }
                let d = v - means[n_images * k_n + i];
                acc[n_images * k_n + i] += d * d;
            }
            Ok(())
        },
        |acc, p| acc.iter_mut().zip(p).for_each(|(a, b)| *a += b),
    )?;

    let total: f64 = first[..k_n].iter().sum();
    let mut pi = Vec::with_capacity(k_n);
    for k in 0..k_n {
        if !(first[k] > 0.0) {
            return Err(Error::DegenerateAtlas { label: config.labels[k] });
        }
        pi.push(first[k] / total);
    }
    let sigma_floor: Vec<f64> = images.images.iter().map(sigma_floor_for).collect();
    let mut components = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut row = Vec::with_capacity(k_n);
        for k in 0..k_n {
            let (mass, mu_k) = mean(i, Some(k));
            let (mu, var) = if mass > 0.0 {
                (mu_k, second[i * k_n + k] / mass)
            } else {
                // The label has no atlas mass inside this image: fall back to the
                // unweighted moments of the image.
                let (count, mu_all) = mean(i, None);
                if !(count > 0.0) {
                    return Err(Error::EmptyDomain);
                }
                (mu_all, second[n_images * k_n + i] / count)
            };
            let n_c = config.components[i][k];
            let sd = var.max(0.0).sqrt();
            row.push(
                (0..n_c)
                    .map(|c| {
                        let a = if n_c == 1 { 0.0 } else { -1.0 + 2.0 * c as f64 / (n_c - 1) as f64 };
                        Component {
                            tau: 1.0 / n_c as f64,
                            mu: mu + a * sd,
                            sigma2: (var / n_c as f64).max(sigma_floor[i]),
                        }
                    })
                    .collect(),
            );
        }
        components.push(row);
    }
    Ok(ModelParams {
        labels: config.labels.clone(),
        pi,
        components,
        sigma_floor,
    })
}

/// Stopping rule of the EM loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Relative log-likelihood change below which EM stops.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct EmResult {
    pub params: ModelParams,
    pub posteriors: PosteriorField,
    /// Log-likelihood after every E-step; the last entry belongs to `params`.
    pub trace: Vec<f64>,
}

/// Alternates E-step, M-step and proportion update until the relative change
/// drops below `opts.tol` or `opts.max_iters` updates were made.
pub fn em_iterate(obs: &Observations, params: ModelParams, opts: EmOptions) -> Result<EmResult> {
    let mut params = params;
    let (mut post, mut ll) = e_step(obs, &params)?;
    let mut trace = vec![ll];
    for _ in 0..opts.max_iters {
        let mut next = m_step(obs, &post, &params)?;
        next.pi = update_pi(obs, &post, &params)?;
        let (p2, ll2) = e_step(obs, &next)?;
        trace.push(ll2);
        params = next;
        post = p2;
        let done = (ll2 - ll).abs() < opts.tol * ll2.abs();
        ll = ll2;
        if done {
            break;
        }
    }
    Ok(EmResult {
        params,
        posteriors: post,
        trace,
    })
}

/// Argmax label per common voxel (ties go to the lower label index); excluded
/// voxels get [`LabelVolume::UNLABELED`].
pub fn hard_segmentation(post: &PosteriorField, labels: &[u16], common: &Lattice) -> Result<LabelVolume> {
    if post.n_voxels() != common.len() || labels.len() != post.n_labels {
        return Err(Error::InvalidParameter(
            "posterior field does not match the lattice or label list".into(),
        ));
    }
    let out = (0..post.n_voxels())
        .map(|x| {
            if !post.is_included(x) {
                return LabelVolume::UNLABELED;
            }
            let p = post.labels_at(x);
            let mut best = 0;
            for k in 1..p.len() {
                if p[k] > p[best] {
                    best = k;
                }
            }
            labels[best]
        })
        .collect();
    LabelVolume::new(common.clone(), out)
}

/// Resamples a common-space segmentation into each image's native lattice:
/// every native voxel is mapped back through its slice transform and takes
/// the label of the nearest common voxel.
pub fn native_segmentations(
    seg: &LabelVolume,
    images: &MultivariateImageSet,
    slices: &SliceAffineSet,
) -> Result<Vec<LabelVolume>> {
    images
        .images
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let l = &g.lattice;
            let labels = (0..l.len())
                .map(|v| {
                    let y = l.center(v);
                    let s = l.ijk(v)[2];
                    slices
                        .apply_inverse(i, s, y)
                        .and_then(|x| seg.lattice.nearest_voxel(x))
                        .map_or(LabelVolume::UNLABELED, |x| seg.labels[x])
                })
                .collect();
            LabelVolume::new(l.clone(), labels)
        })
        .collect()
}

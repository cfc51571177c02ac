//! Shared fixtures and straightforward reference implementations for the
//! integration tests. Nothing here calls into the EM or likelihood code.
#![allow(dead_code)]

use std::f64::consts::PI;

use mvmm_core::model::{AtlasPrior, Component, LabelConfig, ModelParams};
use mvmm_core::phantom::{generate_phantom, Phantom, PhantomSpec};
use mvmm_core::registration::TransformState;
use mvmm_core::volume::{Lattice, MultivariateImageSet, VoxelGrid};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(mu: f64, s2: f64, v: f64) -> f64 {
    (-(v - mu) * (v - mu) / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt()
}

pub fn mixture(comps: &[Component], v: f64) -> f64 {
    comps.iter().map(|c| c.tau * normal(c.mu, c.sigma2, v)).sum()
}

/// `|a - b| <= tol * max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn lattice(dims: [usize; 3], spacing: [f64; 3]) -> Lattice {
    Lattice::new(dims, spacing, [0.0; 3]).unwrap()
}

/// The 32-voxel phantom with `n_images` sequences.
pub fn small_phantom(seed: u64, noise: f64, n_images: usize) -> Phantom {
    let mut spec = PhantomSpec::small(seed);
    spec.noise_std = noise;
    spec.sequences.truncate(n_images);
    generate_phantom(&spec).unwrap()
}

/// Label config with `[2, 2, 1]` components per image, as used for the phantom.
pub fn phantom_config(n_images: usize) -> LabelConfig {
    LabelConfig::uniform(mvmm_core::phantom::LABELS.to_vec(), &[2, 2, 1], n_images).unwrap()
}

/// Random valid parameters whose means fall inside `range`.
pub fn random_params(r: &mut ChaCha8Rng, config: &LabelConfig, range: (f64, f64)) -> ModelParams {
    let k_n = config.n_labels();
    let mut pi: Vec<f64> = (0..k_n).map(|_| r.gen_range(0.2..1.0)).collect();
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);
    let width = range.1 - range.0;
    let components = config
        .components
        .iter()
        .map(|row| {
            row.iter()
                .map(|&n| {
                    let mut taus: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..1.0)).collect();
                    let s: f64 = taus.iter().sum();
                    taus.iter_mut().for_each(|t| *t /= s);
                    taus.into_iter()
                        .map(|tau| Component {
                            tau,
                            mu: r.gen_range(range.0..range.1),
                            sigma2: (width * r.gen_range(0.05..0.3)).powi(2),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    ModelParams {
        labels: config.labels.clone(),
        pi,
        components,
        sigma_floor: vec![1e-8; config.n_images()],
    }
}

/// Covering set of common voxel `x` by direct hull tests on the mapped point.
pub fn brute_mask(images: &MultivariateImageSet, transforms: &TransformState, x: usize) -> u32 {
    let p = images.common.center(x);
    let mut m = 0;
    for (i, g) in images.images.iter().enumerate() {
        let y = transforms.slices.sample_point(i, p);
        let (lo, hi) = g.lattice.bounds();
        let tol = 1e-9;
        if (0..3).all(|a| y[a] >= lo[a] - tol && y[a] <= hi[a] + tol) {
            m |= 1 << i;
        }
    }
    m
}

/// Log-likelihood by direct summation in linear space over every covered voxel.
pub fn oracle_ll(images: &MultivariateImageSet, atlas: &AtlasPrior, params: &ModelParams, transforms: &TransformState) -> f64 {
    let k_n = params.pi.len();
    let mut ll = 0.0;
    for x in 0..images.common.len() {
        let m = brute_mask(images, transforms, x);
        if m == 0 {
            continue;
        }
        let p = images.common.center(x);
        let a = atlas.sample(transforms.ffd.apply(p));
        let norm: f64 = (0..k_n).map(|k| params.pi[k] * a[k]).sum();
        let mut lik = 0.0;
        for k in 0..k_n {
            let mut f = 1.0;
            for (i, g) in images.images.iter().enumerate() {
                if m & (1 << i) != 0 {
                    let v = g.sample(transforms.slices.sample_point(i, p)).unwrap();
                    f *= mixture(&params.components[i][k], v);
                }
            }
            lik += params.pi[k] * a[k] / norm * f;
        }
        ll += lik.ln();
    }
    ll
}

/// Atlas-prior Gaussian mixture on a flat list of samples, coded from the
/// textbook updates.
#[derive(Clone, Debug)]
pub struct UniGmm {
    pub pi: Vec<f64>,
    /// `(tau, mu, sigma2)` per label and component.
    pub comps: Vec<Vec<(f64, f64, f64)>>,
    pub floor: f64,
}

impl UniGmm {
    /// Atlas-weighted moments per label; components spread at `mean + a * sd`
    /// with `a` evenly spaced in `[-1, 1]` and variance `var / n`.
    pub fn init(v: &[f64], atlas: &[Vec<f64>], n_comp: &[usize], floor: f64) -> Self {
        let k_n = n_comp.len();
        let mass: Vec<f64> = (0..k_n).map(|k| atlas.iter().map(|a| a[k]).sum()).collect();
        let total: f64 = mass.iter().sum();
        let mut comps = Vec::new();
        for k in 0..k_n {
            let mean = v.iter().zip(atlas).map(|(v, a)| a[k] * v).sum::<f64>() / mass[k];
            let var = v.iter().zip(atlas).map(|(v, a)| a[k] * (v - mean).powi(2)).sum::<f64>() / mass[k];
            let n = n_comp[k];
            comps.push(
                (0..n)
                    .map(|c| {
                        let a = if n == 1 { 0.0 } else { -1.0 + 2.0 * c as f64 / (n - 1) as f64 };
                        (1.0 / n as f64, mean + a * var.sqrt(), (var / n as f64).max(floor))
                    })
                    .collect(),
            );
        }
        Self {
            pi: mass.iter().map(|m| m / total).collect(),
            comps,
            floor,
        }
    }

    fn density(&self, k: usize, v: f64) -> f64 {
        self.comps[k].iter().map(|&(t, m, s)| t * normal(m, s, v)).sum()
    }

    pub fn log_likelihood(&self, v: &[f64], atlas: &[Vec<f64>]) -> f64 {
        v.iter()
            .zip(atlas)
            .map(|(&v, a)| {
                let c: f64 = a.iter().zip(&self.pi).map(|(a, p)| a * p).sum();
                (0..a.len()).map(|k| self.pi[k] * a[k] / c * self.density(k, v)).sum::<f64>().ln()
            })
            .sum()
    }

    /// One EM update; the label proportions use the previous proportions in
    /// the per-sample normalizer and are then rescaled to sum to one.
    pub fn step(&self, v: &[f64], atlas: &[Vec<f64>]) -> Self {
        let k_n = self.pi.len();
        let mut w = vec![Vec::new(); k_n];
        let mut label_mass = vec![0.0; k_n];
        let mut pi_den = vec![0.0; k_n];
        for k in 0..k_n {
            w[k] = vec![vec![0.0; v.len()]; self.comps[k].len()];
        }
        for (x, (&val, a)) in v.iter().zip(atlas).enumerate() {
            let c: f64 = a.iter().zip(&self.pi).map(|(a, p)| a * p).sum();
            let joint: Vec<Vec<f64>> = (0..k_n)
                .map(|k| {
                    self.comps[k]
                        .iter()
                        .map(|&(t, m, s)| self.pi[k] * a[k] / c * t * normal(m, s, val))
                        .collect()
                })
                .collect();
            let z: f64 = joint.iter().flatten().sum();
            for k in 0..k_n {
                for (cc, j) in joint[k].iter().enumerate() {
                    w[k][cc][x] = j / z;
                    label_mass[k] += j / z;
                }
                pi_den[k] += a[k] / c;
            }
        }
        let mut comps = Vec::new();
        for k in 0..k_n {
            let total: f64 = w[k].iter().flatten().sum();
            comps.push(
                w[k].iter()
                    .map(|wc| {
                        let n: f64 = wc.iter().sum();
                        let mu = wc.iter().zip(v).map(|(w, v)| w * v).sum::<f64>() / n;
                        let s2 = wc.iter().zip(v).map(|(w, v)| w * (v - mu).powi(2)).sum::<f64>() / n;
                        (n / total, mu, s2.max(self.floor))
                    })
                    .collect(),
            );
        }
        let raw: Vec<f64> = (0..k_n).map(|k| label_mass[k] / pi_den[k]).collect();
        let s: f64 = raw.iter().sum();
        Self {
            pi: raw.iter().map(|p| p / s).collect(),
            comps,
            floor: self.floor,
        }
    }
}

/// A grid on `lattice` holding `values`.
pub fn grid(lattice: &Lattice, values: Vec<f64>) -> VoxelGrid {
    VoxelGrid::new(lattice.clone(), values).unwrap()
}

/// Total log-likelihood with the coverage partition rebuilt for `transforms`.
pub fn total_ll(images: &MultivariateImageSet, atlas: &AtlasPrior, params: &ModelParams, transforms: &TransformState) -> f64 {
    use mvmm_core::model::{build_coverage_partition, total_log_likelihood};
    let cov = build_coverage_partition(images, transforms).unwrap();
    total_log_likelihood(images, atlas, params, transforms, &cov).unwrap()
}

/// Small phantom cropped to the heart so every mapped point stays well inside
/// the image hulls, with fitted parameters and random non-identity transforms.
pub struct GradientCase {
    pub phantom: Phantom,
    pub params: ModelParams,
    pub transforms: TransformState,
}

pub fn gradient_case(seed: u64, noise: f64, perturb: bool) -> GradientCase {
    use mvmm_core::em::{em_iterate, initialize_params, EmOptions};
    use mvmm_core::observe::Observations;
    use mvmm_core::registration::SliceMode;
    let mut spec = PhantomSpec::small(seed);
    spec.roi_margin_mm = Some(6.0);
    spec.noise_std = noise;
    if noise == 0.0 {
        for q in &mut spec.sequences {
            q.intensity.values_mut().for_each(|e| e[1] = 0.0);
        }
    }
    let phantom = generate_phantom(&spec).unwrap();
    let images = &phantom.images;
    let mut tr = TransformState::identity(images, SliceMode::Rigid, 20.0).unwrap();
    let obs = Observations::new(images, &phantom.atlas, &tr).unwrap();
    let p0 = initialize_params(images, &obs, &phantom_config(images.len())).unwrap();
    let params = em_iterate(&obs, p0, EmOptions { max_iters: 5, tol: 0.0 }).unwrap().params;
    let mut r = rng(seed ^ 0x5eed);
    for i in (0..images.len()).filter(|_| perturb) {
        for s in 0..tr.slices.stacks[i].n_slices {
            let p = [r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5), r.gen_range(-0.03..0.03)];
            tr.slices.set_params(i, s, &p).unwrap();
        }
    }
    if perturb {
        tr.ffd = mvmm_core::phantom::random_ffd(&images.common, 20.0, 1.0, seed).unwrap();
    }
    GradientCase {
        phantom,
        params,
        transforms: tr,
    }
}

/// Outcome of comparing analytic derivatives with central differences.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Largest `|analytic - fd| / max(1e-4, 1e-3 |fd|)`; at most 1 passes.
    pub worst: f64,
    pub worst_at: String,
}

impl FdReport {
    /// Scores the first step in the ladder that agrees, else the closest one.
    fn add(&mut self, analytic: f64, mut fd_at: impl FnMut(f64) -> f64, ladder: &[f64], at: impl FnOnce() -> String) {
        self.checked += 1;
        let (mut r, mut fd) = (f64::INFINITY, f64::NAN);
        for &h in ladder {
            let d = fd_at(h);
            let e = (analytic - d).abs() / (1e-3 * d.abs()).max(1e-4);
            if e < r {
                (r, fd) = (e, d);
            }
            if r <= 1.0 {
                break;
            }
        }
        if r > self.worst {
            self.worst = r;
            self.worst_at = format!("{} analytic={analytic:e} fd={fd:e}", at());
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst <= 1.0
    }
}

/// Every parameter of every `every`-th slice, differenced with each step of
/// `ladder` in turn (see [`FdReport::add`]).
pub fn check_slice_gradients(case: &GradientCase, every: usize, ladder: &[f64]) -> [FdReport; 3] {
    use mvmm_core::observe::Observations;
    use mvmm_core::registration::slice_gradient;
    let ph = &case.phantom;
    let obs = Observations::new(&ph.images, &ph.atlas, &case.transforms).unwrap();
    let mut rep: [FdReport; 3] = Default::default();
    for i in 0..ph.images.len() {
        for s in (0..case.transforms.slices.stacks[i].n_slices).step_by(every) {
            if obs.slice_voxels(i, s).is_empty() {
                continue;
            }
            let g = slice_gradient(&ph.images, &obs, &case.params, &case.transforms.slices, i, s).unwrap();
            let base = case.transforms.slices.params(i, s).to_vec();
            for j in 0..3 {
                let eval = |d: f64| {
                    let mut tr = case.transforms.clone();
                    let mut p = base.clone();
                    p[j] += d;
                    tr.slices.set_params(i, s, &p).unwrap();
                    total_ll(&ph.images, &ph.atlas, &case.params, &tr)
                };
                let fd = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
                rep[j].add(g[j], fd, ladder, || format!("image {i} slice {s} param {j}"));
            }
        }
    }
    rep
}

/// Every `every`-th FFD parameter, differenced with the steps of `ladder`.
pub fn check_ffd_gradients(case: &GradientCase, every: usize, ladder: &[f64]) -> FdReport {
    use mvmm_core::observe::Observations;
    use mvmm_core::registration::ffd_gradient;
    let ph = &case.phantom;
    let obs = Observations::new(&ph.images, &ph.atlas, &case.transforms).unwrap();
    let g = ffd_gradient(&ph.atlas, &obs, &case.params, &case.transforms.ffd).unwrap();
    let base = case.transforms.ffd.flat_params();
    let mut rep = FdReport::default();
    for j in (0..base.len()).step_by(every) {
        let eval = |d: f64| {
            let mut tr = case.transforms.clone();
            let mut p = base.clone();
            p[j] += d;
            tr.ffd.set_flat_params(&p).unwrap();
            total_ll(&ph.images, &ph.atlas, &case.params, &tr)
        };
        let fd = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
        rep.add(g[j], fd, ladder, || format!("ffd param {j}"));
    }
    rep
}

/// Union of a few random balls, labeled `k`, on `lattice`.
pub fn random_blobs(r: &mut ChaCha8Rng, lattice: &Lattice, k: u16) -> mvmm_core::volume::LabelVolume {
    let (lo, hi) = lattice.bounds();
    let balls: Vec<([f64; 3], f64)> = (0..r.gen_range(1..4))
        .map(|_| {
            let c = std::array::from_fn(|a| r.gen_range(lo[a]..=hi[a]));
            (c, r.gen_range(1.0..(0.4 * (hi[0] - lo[0])).max(1.5)))
        })
        .collect();
    let labels = (0..lattice.len())
        .map(|x| {
            let p = lattice.center(x);
            let inside = balls
                .iter()
                .any(|(c, rad)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= rad * rad);
            if inside { k } else { 0 }
        })
        .collect();
    mvmm_core::volume::LabelVolume::new(lattice.clone(), labels).unwrap()
}

pub fn brute_dice(a: &mvmm_core::volume::LabelVolume, b: &mvmm_core::volume::LabelVolume, k: u16) -> f64 {
    let na = a.labels.iter().filter(|&&v| v == k).count();
    let nb = b.labels.iter().filter(|&&v| v == k).count();
    let both = a.labels.iter().zip(&b.labels).filter(|(x, y)| **x == k && **y == k).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Voxels of `k` with a face neighbor that is not `k` or lies off the lattice.
pub fn brute_boundary(v: &mvmm_core::volume::LabelVolume, k: u16) -> Vec<[f64; 3]> {
    let l = &v.lattice;
    let [nx, ny, nz] = l.dims;
    let at = |i: i64, j: i64, m: i64| -> Option<u16> {
        if i < 0 || j < 0 || m < 0 || i >= nx as i64 || j >= ny as i64 || m >= nz as i64 {
            None
        } else {
            Some(v.labels[l.index(i as usize, j as usize, m as usize)])
        }
    };
    let mut out = Vec::new();
    for m in 0..nz as i64 {
        for j in 0..ny as i64 {
            for i in 0..nx as i64 {
                if at(i, j, m) != Some(k) {
                    continue;
                }
                let n = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if n.iter().any(|(a, b, c)| at(i + a, j + b, m + c) != Some(k)) {
                    out.push(l.voxel_to_world([i as f64, j as f64, m as f64]));
                }
            }
        }
    }
    out
}

/// Mean of the two directed mean nearest distances, by all pairs.
pub fn brute_acd(a: &mvmm_core::volume::LabelVolume, b: &mvmm_core::volume::LabelVolume, k: u16) -> f64 {
    let pa = brute_boundary(a, k);
    let pb = brute_boundary(b, k);
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (directed(&pa, &pb) + directed(&pb, &pa))
}

//! Analytic log-likelihood derivatives with respect to slice transforms and
//! FFD control displacements.

use crate::error::{Error, Result};
use crate::model::{AtlasPrior, ModelParams};
use crate::observe::{Compiled, Observations, MAX_LABELS};
use crate::parallel;
use crate::volume::{MultivariateImageSet, Stencil};

use super::{map_jacobian, map_point, FfdDeformation, SliceAffineSet};

/// Log-likelihood restricted to the voxels attributed to slice `s` of image
/// `i`, with that slice's transform replaced by `trial` (or the current one).
pub(crate) fn slice_ll(
    images: &MultivariateImageSet,
    obs: &Observations,
    cp: &Compiled,
    slices: &SliceAffineSet,
    i: usize,
    s: usize,
    trial: Option<&[f64]>,
) -> Result<f64> {
    let stack = &slices.stacks[i];
    let p = trial.unwrap_or(&stack.params[s]);
    let grid = &images.images[i];
    let mut data = [0.0; MAX_LABELS];
    let mut terms = [0.0; MAX_LABELS];
    let mut ll = 0.0;
    for &x in obs.slice_voxels(i, s) {
        let mut y = map_point(slices.mode, p, stack.center, obs.common().center(x));
        y[2] = stack.plane_z(s);
        let (mask, over) = match grid.sample(y) {
            Some(v) => (obs.mask(x) | (1 << i), Some((i, v))),
            None => (obs.mask(x) & !(1 << i), None),
        };
        if mask == 0 {
            continue;
        }
        ll += obs.eval_voxel(cp, x, mask, over, obs.atlas_all(), &mut data, &mut terms)?.ll;
    }
    Ok(ll)
}

/// Public form of the per-slice log-likelihood at the current transforms.
pub fn slice_log_likelihood(
    images: &MultivariateImageSet,
    obs: &Observations,
    params: &ModelParams,
    slices: &SliceAffineSet,
    i: usize,
    s: usize,
) -> Result<f64> {
    let cp = Compiled::new(params, obs.n_labels())?;
    slice_ll(images, obs, &cp, slices, i, s, None)
}

pub(crate) fn slice_grad(
    images: &MultivariateImageSet,
    obs: &Observations,
    cp: &Compiled,
    slices: &SliceAffineSet,
    i: usize,
    s: usize,
) -> Result<Vec<f64>> {
    let mode = slices.mode;
    let n_p = mode.n_params();
    let stack = &slices.stacks[i];
    let p = &stack.params[s];
    let grid = &images.images[i];
    let k_n = obs.n_labels();
    let mut g = vec![0.0; n_p];
    let mut data = [0.0; MAX_LABELS];
    let mut terms = [0.0; MAX_LABELS];
    let mut jac = [[0.0; 2]; 6];
    for &x in obs.slice_voxels(i, s) {
        let m = obs.mask(x);
        if m & (1 << i) == 0 {
            continue;
        }
        let v = obs.intensity(i, x).expect("covered voxel has an intensity");
        let ev = obs.eval_voxel(cp, x, m, None, obs.atlas_all(), &mut data, &mut terms)?;
        let mut slope = 0.0;
        for k in 0..k_n {
            let post = (terms[k] - ev.ll).exp();
            if post > 0.0 {
                slope += post * cp.log_density_slope(i, k, v).1;
            }
        }
        if slope == 0.0 {
            continue;
        }
        let xc = obs.common().center(x);
        let mut y = map_point(mode, p, stack.center, xc);
        y[2] = stack.plane_z(s);
        let st = Stencil::at(&grid.lattice, y).expect("covered voxel samples inside the hull");
        let gi = st.gradient(&grid.values);
        map_jacobian(mode, p, stack.center, xc, &mut jac);
        for j in 0..n_p {
            g[j] += slope * (gi[0] * jac[j][0] + gi[1] * jac[j][1]);
        }
    }
    for (j, v) in g.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteGradient {
                index: j,
                name: format!("image {i} slice {s} {}", mode.param_name(j)),
            });
        }
    }
    Ok(g)
}

/// `dLL/d(params of slice s of image i)` at the cached observations.
pub fn slice_gradient(
    images: &MultivariateImageSet,
    obs: &Observations,
    params: &ModelParams,
    slices: &SliceAffineSet,
    i: usize,
    s: usize,
) -> Result<Vec<f64>> {
    let cp = Compiled::new(params, obs.n_labels())?;
    slice_grad(images, obs, &cp, slices, i, s)
}

pub(crate) fn ffd_grad(atlas: &AtlasPrior, obs: &Observations, cp: &Compiled, ffd: &FfdDeformation) -> Result<Vec<f64>> {
    let k_n = obs.n_labels();
    let n = 3 * ffd.n_control();
    let g = parallel::try_reduce(
        obs.n_voxels(),
        || vec![0.0; n],
        |acc, x| {
            let m = obs.mask(x);
            if m == 0 {
                return Ok(());
            }
            let xc = obs.common().center(x);
            let Some(st) = Stencil::at(atlas.lattice(), ffd.apply(xc)) else {
                // Uniform fallback outside the atlas: no dependence on D.
                return Ok(());
            };
            let mut data = [0.0; MAX_LABELS];
            let mut terms = [0.0; MAX_LABELS];
            let ev = obs.eval_voxel(cp, x, m, None, obs.atlas_all(), &mut data, &mut terms)?;
            let nf = ev.ln_nf.exp();
            let mut dy = [0.0; 3];
            for k in 0..k_n {
                if cp.pi[k] <= 0.0 {
                    continue;
                }
                let ga = st.gradient(&atlas.maps[k].values);
                // w_k = pi_k p(I | k) / (NF * LH); the normalizer term uses pi_k / NF.
                let w = (cp.log_pi[k] + data[k] - ev.ln_nf - ev.ll).exp() - cp.pi[k] / nf;
                for a in 0..3 {
                    dy[a] += w * ga[a];
                }
            }
            if dy == [0.0; 3] {
                return Ok(());
            }
            for (d, w) in ffd.support(xc).iter() {
                for a in 0..3 {
                    acc[3 * d + a] += w * dy[a];
                }
            }
            Ok(())
        },
        |acc, p| acc.iter_mut().zip(p).for_each(|(a, b)| *a += b),
    )?;
    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient {
            index: j,
            name: format!("control point {} axis {}", j / 3, j % 3),
        });
    }
    Ok(g)
}

/// `dLL/dphi` for every control point, flattened as in
/// [`FfdDeformation::flat_params`].
pub fn ffd_gradient(atlas: &AtlasPrior, obs: &Observations, params: &ModelParams, ffd: &FfdDeformation) -> Result<Vec<f64>> {
    let cp = Compiled::new(params, obs.n_labels())?;
    ffd_grad(atlas, obs, &cp, ffd)
}

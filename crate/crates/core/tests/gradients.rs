mod common;

use common::*;
use mvmm_core::em::{em_iterate, initialize_params, EmOptions};
use mvmm_core::model::AtlasPrior;
use mvmm_core::observe::Observations;
use mvmm_core::phantom::{shift_slice, PhantomSpec};
use mvmm_core::registration::{
    ffd_gradient, gradient_ascent_step, slice_gradient, slice_log_likelihood, Family, FfdDeformation, SliceMode,
    StepControl, TransformState,
};
use mvmm_core::volume::{MultivariateImageSet, VoxelGrid};

// The likelihood is only piecewise smooth: trilinear sampling has kinks on
// every lattice plane. Rotating by 1e-3 rad moves points far enough to cross
// many of them, so the checks use steps that mostly stay inside one
// cell, where the interpolant is smooth.

#[test]
fn slice_gradients_match_central_differences() {
    let case = gradient_case(1, 6.0, true);
    for rep in check_slice_gradients(&case, 5, &[1e-5]) {
        assert!(rep.passed(), "{rep:?}");
    }
}

#[test]
fn ffd_gradients_match_central_differences() {
    let case = gradient_case(2, 6.0, true);
    let rep = check_ffd_gradients(&case, 7, &[1e-4]);
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn flat_images_give_zero_slice_gradients() {
    let case = gradient_case(3, 6.0, true);
    let ph = &case.phantom;
    let flat = MultivariateImageSet::with_common(
        ph.images.images.iter().map(|g| VoxelGrid::filled(g.lattice.clone(), 42.0)).collect(),
        ph.images.common.clone(),
    )
    .unwrap();
    let obs = Observations::new(&flat, &ph.atlas, &case.transforms).unwrap();
    for i in 0..flat.len() {
        for s in 0..case.transforms.slices.stacks[i].n_slices {
            let g = slice_gradient(&flat, &obs, &case.params, &case.transforms.slices, i, s).unwrap();
            assert!(g.iter().all(|&v| v == 0.0), "{g:?}");
        }
    }
}

#[test]
fn gradient_points_toward_the_correcting_translation() {
    for shift in [4.0, -4.0] {
        let mut spec = PhantomSpec::small(4);
        spec.sequences.truncate(1);
        let mut ph = mvmm_core::phantom::generate_phantom(&spec).unwrap();
        let s = 16;
        shift_slice(&mut ph.images.images[0], s, shift, 0.0);
        let tr = TransformState::identity(&ph.images, SliceMode::Rigid, 20.0).unwrap();
        let obs = Observations::new(&ph.images, &ph.atlas, &tr).unwrap();
        let p0 = initialize_params(&ph.images, &obs, &phantom_config(1)).unwrap();
        let params = em_iterate(&obs, p0, EmOptions { max_iters: 20, tol: 0.0 }).unwrap().params;
        let g = slice_gradient(&ph.images, &obs, &params, &tr.slices, 0, s).unwrap();
        // Content moved by +d is read back through a translation of +d.
        assert_eq!(g[0].signum(), shift.signum(), "shift {shift}: {g:?}");
        let mut fixed = tr.slices.clone();
        fixed.set_params(0, s, &[shift, 0.0, 0.0]).unwrap();
        let at_zero = slice_log_likelihood(&ph.images, &obs, &params, &tr.slices, 0, s).unwrap();
        let at_fix = slice_log_likelihood(&ph.images, &obs, &params, &fixed, 0, s).unwrap();
        assert!(at_fix > at_zero);
    }
}

#[test]
fn uniform_atlas_gives_zero_ffd_gradient() {
    let case = gradient_case(5, 6.0, true);
    let ph = &case.phantom;
    let atlas = AtlasPrior::uniform(ph.atlas.lattice().clone(), 3);
    let obs = Observations::new(&ph.images, &atlas, &case.transforms).unwrap();
    let g = ffd_gradient(&atlas, &obs, &case.params, &case.transforms.ffd).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn control_points_far_from_the_heart_get_zero_gradient() {
    let mut spec = PhantomSpec::small(6);
    spec.sequences.truncate(1);
    let ph = mvmm_core::phantom::generate_phantom(&spec).unwrap();
    let mut tr = TransformState::identity(&ph.images, SliceMode::Rigid, 20.0).unwrap();
    tr.ffd = FfdDeformation::covering(&ph.images.common, 6.0).unwrap();
    let obs = Observations::new(&ph.images, &ph.atlas, &tr).unwrap();
    let p0 = initialize_params(&ph.images, &obs, &phantom_config(1)).unwrap();
    let g = ffd_gradient(&ph.atlas, &obs, &p0, &tr.ffd).unwrap();
    // The atlas is flat more than a few blur widths outside the heart; a
    // control point's support reaches two mesh spacings.
    let reach = 2.0 * 6.0 + 4.0 * spec.atlas_sigma_mm;
    let mut far = 0;
    for j in 0..tr.ffd.n_control() {
        let c = tr.ffd.control_position(j);
        let outside = (0..3).any(|a| {
            (c[a] - spec.heart_center_mm[a]).abs() > spec.heart_radii_mm[a] + reach
        });
        if outside {
            far += 1;
            assert_eq!(&g[3 * j..3 * j + 3], &[0.0; 3], "control point {j} at {c:?}");
        }
    }
    assert!(far > 0);
}

#[test]
fn accepted_slice_steps_raise_the_total_likelihood() {
    let case = gradient_case(7, 6.0, true);
    let ph = &case.phantom;
    let obs = Observations::new(&ph.images, &ph.atlas, &case.transforms).unwrap();
    let families = [Family::Translation, Family::Translation, Family::Angle];
    let before = total_ll(&ph.images, &ph.atlas, &case.params, &case.transforms);
    let mut accepted = 0;
    for s in 4..12 {
        let slices = &case.transforms.slices;
        let g = slice_gradient(&ph.images, &obs, &case.params, slices, 0, s).unwrap();
        let local = slice_log_likelihood(&ph.images, &obs, &case.params, slices, 0, s).unwrap();
        let mut ctrl = StepControl::default();
        let out = gradient_ascent_step(slices.params(0, s), &g, &families, local, &mut ctrl, |p| {
            let mut trial = slices.clone();
            trial.set_params(0, s, p)?;
            slice_log_likelihood(&ph.images, &obs, &case.params, &trial, 0, s)
        })
        .unwrap();
        if out.accepted && out.params != slices.params(0, s) {
            assert!(out.value > local);
            let mut tr = case.transforms.clone();
            tr.slices.set_params(0, s, &out.params).unwrap();
            assert!(total_ll(&ph.images, &ph.atlas, &case.params, &tr) > before);
            accepted += 1;
        }
    }
    assert!(accepted > 0);
}

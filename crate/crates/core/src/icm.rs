//! Iterated conditional modes: EM blocks on the mixture parameters alternate
//! with gradient-ascent blocks on the slice transforms and the atlas FFD.

use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::em::{e_step, em_iterate, initialize_params, EmOptions, PosteriorField};
use crate::error::{Error, Result};
use crate::model::{CoveragePartition, ModelParams, Problem};
use crate::observe::{Compiled, Observations};
use crate::registration::gradient::{ffd_grad, slice_grad, slice_ll};
use crate::registration::{
    gradient_ascent_step, Family, SliceMode, StepControl, TransformState, DEFAULT_CONTROL_SPACING_MM,
};

/// The four registration configurations compared in ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// No registration: plain EM.
    MvmmMinus,
    /// Atlas FFD only.
    MvmmMinusFfd,
    /// Slice shift correction only.
    MvmmMinusSc,
    /// Both.
    MvmmFull,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::MvmmMinus, Preset::MvmmMinusFfd, Preset::MvmmMinusSc, Preset::MvmmFull];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MvmmMinus => "mvmm-minus",
            Preset::MvmmMinusFfd => "mvmm-minus-ffd",
            Preset::MvmmMinusSc => "mvmm-minus-sc",
            Preset::MvmmFull => "mvmm-full",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    fn flags(self) -> (bool, bool) {
        match self {
            Preset::MvmmMinus => (false, false),
            Preset::MvmmMinusFfd => (false, true),
            Preset::MvmmMinusSc => (true, false),
            Preset::MvmmFull => (true, true),
        }
    }
}

/// Block structure and stopping rules of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub enable_sc: bool,
    pub enable_ffd: bool,
    pub slice_mode: SliceMode,
    pub em_max_iters: usize,
    pub em_tol: f64,
    /// Relative log-likelihood gain per round below which the run stops.
    pub tol: f64,
    pub max_rounds: usize,
    pub ffd_spacing_mm: f64,
    /// Ascent steps on a global atlas translation before the first round.
    pub prealign_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::preset(Preset::MvmmFull)
    }
}

impl Schedule {
    pub fn preset(p: Preset) -> Self {
        let (enable_sc, enable_ffd) = p.flags();
        Self {
            enable_sc,
            enable_ffd,
            slice_mode: SliceMode::Rigid,
            em_max_iters: 100,
            em_tol: 1e-6,
            tol: 1e-6,
            max_rounds: 20,
            ffd_spacing_mm: DEFAULT_CONTROL_SPACING_MM,
            prealign_steps: 0,
        }
    }

    pub fn registration_enabled(&self) -> bool {
        self.enable_sc || self.enable_ffd
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.em_tol >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Config("tolerances must be non-negative".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be at least 1".into()));
        }
        if !(self.ffd_spacing_mm > 0.0) {
            return Err(Error::Config("ffd_spacing_mm must be positive".into()));
        }
        Ok(())
    }
}

/// Schedule keys as they appear in configuration text. Explicit keys override
/// the chosen preset.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub preset: Option<Preset>,
    pub enable_sc: Option<bool>,
    pub enable_ffd: Option<bool>,
    pub slice_mode: Option<SliceMode>,
    pub em_max_iters: Option<usize>,
    pub em_tol: Option<f64>,
    pub tol: Option<f64>,
    pub max_rounds: Option<usize>,
    pub ffd_spacing_mm: Option<f64>,
    pub prealign_steps: Option<usize>,
}

impl ScheduleConfig {
    pub fn resolve(&self) -> Result<Schedule> {
        let mut s = Schedule::preset(self.preset.unwrap_or(Preset::MvmmFull));
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        take!(enable_sc, enable_ffd, slice_mode, em_max_iters, em_tol, tol, max_rounds, ffd_spacing_mm, prealign_steps);
        s.validate()?;
        Ok(s)
    }
}

/// Parses schedule text (TOML keys, see [`ScheduleConfig`]); empty text gives the defaults.
pub fn schedule_from_config(text: &str) -> Result<Schedule> {
    let cfg: ScheduleConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    cfg.resolve()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Em,
    Prealign,
    Slice,
    Ffd,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Em => "EM",
            Phase::Prealign => "PRE",
            Phase::Slice => "SC",
            Phase::Ffd => "FFD",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub phase: Phase,
    pub round: usize,
    pub value: f64,
}

/// Everything the driver tracks; returned at the end of a run.
#[derive(Clone, Debug)]
pub struct IcmState {
    pub params: ModelParams,
    pub posteriors: PosteriorField,
    pub transforms: TransformState,
    pub coverage: CoveragePartition,
    pub observations: Observations,
    pub ll_trace: Vec<TraceEntry>,
    pub round: usize,
    /// Run log, one record per line with a leading record-type tag.
    pub log: Vec<String>,
    slice_ctrl: Vec<Vec<StepControl>>,
    ffd_ctrl: StepControl,
}

impl IcmState {
    pub fn log_likelihood(&self) -> f64 {
        self.ll_trace.last().map_or(f64::NAN, |e| e.value)
    }
}

/// Runs the full alternation from identity transforms.
pub fn run_icm(problem: &Problem, schedule: &Schedule) -> Result<IcmState> {
    let transforms = TransformState::identity(&problem.images, schedule.slice_mode, schedule.ffd_spacing_mm)?;
    run_icm_from(problem, schedule, transforms)
}

/// Runs the alternation starting from the given transforms.
pub fn run_icm_from(problem: &Problem, schedule: &Schedule, transforms: TransformState) -> Result<IcmState> {
    schedule.validate()?;
    let obs = Observations::new(&problem.images, &problem.atlas, &transforms)?;
    let coverage = obs.partition()?;
    let params = initialize_params(&problem.images, &obs, &problem.config)?;
    let (posteriors, ll0) = e_step(&obs, &params)?;
    let slice_ctrl = transforms
        .slices
        .stacks
        .iter()
        .map(|s| vec![StepControl::default(); s.n_slices])
        .collect();
    let mut st = IcmState {
        params,
        posteriors,
        transforms,
        coverage,
        observations: obs,
        ll_trace: Vec::new(),
        round: 0,
        log: Vec::new(),
        slice_ctrl,
        ffd_ctrl: StepControl::default(),
    };
    st.log.push(format!(
        "START images={} labels={} voxels={} regions={} sc={} ffd={} ll={ll0:?}",
        problem.images.len(),
        problem.config.n_labels(),
        st.coverage.n_included(),
        st.coverage.n_regions(),
        schedule.enable_sc,
        schedule.enable_ffd
    ));
    let em_opts = EmOptions {
        max_iters: schedule.em_max_iters,
        tol: schedule.em_tol,
    };

    if !schedule.registration_enabled() {
        st.round = 1;
        em_block(&mut st, em_opts)?;
        finish(&mut st);
        return Ok(st);
    }

    if schedule.prealign_steps > 0 {
        prealign(problem, &mut st, schedule.prealign_steps)?;
    }

    let mut prev = f64::NEG_INFINITY;
    for round in 1..=schedule.max_rounds {
        st.round = round;
        let ll = em_block(&mut st, em_opts)?;
        if ll - prev < schedule.tol * ll.abs() || round == schedule.max_rounds {
            break;
        }
        prev = ll;
        if schedule.enable_sc {
            slice_block(problem, &mut st)?;
        }
        if schedule.enable_ffd {
            ffd_block(problem, &mut st)?;
        }
        st.coverage = st.observations.partition()?;
    }
    finish(&mut st);
    Ok(st)
}

fn finish(st: &mut IcmState) {
    st.log.push(format!(
        "DONE rounds={} ll={:?} trace_len={}",
        st.round,
        st.log_likelihood(),
        st.ll_trace.len()
    ));
}

fn em_block(st: &mut IcmState, opts: EmOptions) -> Result<f64> {
    let t0 = Instant::now();
    let res = em_iterate(&st.observations, st.params.clone(), opts)?;
    let before = res.trace[0];
    let after = *res.trace.last().unwrap();
    for &v in &res.trace {
        st.ll_trace.push(TraceEntry {
            phase: Phase::Em,
            round: st.round,
            value: v,
        });
    }
    st.log.push(format!(
        "EM round={} iters={} ll_before={before:?} ll_after={after:?} time_ms={}",
        st.round,
        res.trace.len() - 1,
        t0.elapsed().as_millis()
    ));
    st.params = res.params;
    st.posteriors = res.posteriors;
    Ok(after)
}

fn current_ll(st: &IcmState) -> f64 {
    st.log_likelihood()
}

/// One ascent step on every slice of every image, image by image. Slices of
/// one image touch disjoint voxels, so they are stepped concurrently.
fn slice_block(problem: &Problem, st: &mut IcmState) -> Result<()> {
    let cp = Compiled::new(&st.params, st.observations.n_labels())?;
    let mode = st.transforms.slices.mode;
    let families: Vec<Family> = (0..mode.n_params())
        .map(|j| match (mode, j) {
            (_, 0 | 1) => Family::Translation,
            (SliceMode::Rigid, _) => Family::Angle,
            (SliceMode::Affine, _) => Family::Linear,
        })
        .collect();
    let mut total = current_ll(st);
    for i in 0..problem.images.len() {
        let t0 = Instant::now();
        let before = total;
        let obs = &st.observations;
        let slices = &st.transforms.slices;
        let ctrls = &st.slice_ctrl[i];
        let steps: Vec<Result<Option<(Vec<f64>, f64, StepControl, bool)>>> = (0..slices.stacks[i].n_slices)
            .into_par_iter()
            .map(|s| {
                if obs.slice_voxels(i, s).iter().all(|&x| obs.mask(x) & (1 << i) == 0) {
                    return Ok(None);
                }
                let g = slice_grad(&problem.images, obs, &cp, slices, i, s)?;
                let local = slice_ll(&problem.images, obs, &cp, slices, i, s, None)?;
                let mut ctrl = ctrls[s];
                let out = gradient_ascent_step(slices.params(i, s), &g, &families, local, &mut ctrl, |p| {
                    slice_ll(&problem.images, obs, &cp, slices, i, s, Some(p))
                })?;
                Ok(Some((out.params, out.value - local, ctrl, out.accepted && out.value > local)))
            })
            .collect();
        let (mut accepted, mut rejected) = (0usize, 0usize);
        for (s, step) in steps.into_iter().enumerate() {
            let Some((p, gain, ctrl, moved)) = step? else { continue };
            st.slice_ctrl[i][s] = ctrl;
            if moved {
                st.transforms.slices.set_params(i, s, &p)?;
                st.observations
                    .refresh_slice(&problem.images, &st.transforms.slices, i, s);
                total += gain;
                accepted += 1;
            } else {
                rejected += 1;
            }
        }
        st.ll_trace.push(TraceEntry {
            phase: Phase::Slice,
            round: st.round,
            value: total,
        });
        st.log.push(format!(
            "SC round={} image={i} accepted={accepted} rejected={rejected} ll_before={before:?} ll_after={total:?} time_ms={}",
            st.round,
            t0.elapsed().as_millis()
        ));
    }
    Ok(())
}

fn ffd_block(problem: &Problem, st: &mut IcmState) -> Result<()> {
    let t0 = Instant::now();
    let cp = Compiled::new(&st.params, st.observations.n_labels())?;
    // Slice moves above shifted the local sums; start from an exact total.
    let before = st.observations.log_likelihood(&cp)?;
    let g = ffd_grad(&problem.atlas, &st.observations, &cp, &st.transforms.ffd)?;
    let families = vec![Family::Displacement; g.len()];
    let mut trial_ffd = st.transforms.ffd.clone();
    let mut best_atlas = None;
    let obs = &st.observations;
    let out = gradient_ascent_step(
        &st.transforms.ffd.flat_params(),
        &g,
        &families,
        before,
        &mut st.ffd_ctrl,
        |p| {
            trial_ffd.set_flat_params(p)?;
            let a = obs.atlas_values(&problem.atlas, &trial_ffd)?;
            let v = obs.log_likelihood_atlas(&cp, &a)?;
            if v > before {
                best_atlas = Some(a);
            }
            Ok(v)
        },
    )?;
    let moved = out.accepted && out.value > before;
    if moved {
        st.transforms.ffd.set_flat_params(&out.params)?;
        st.observations
            .set_atlas_values(best_atlas.expect("accepted step evaluated its atlas"));
    }
    let after = if moved { out.value } else { before };
    st.ll_trace.push(TraceEntry {
        phase: Phase::Ffd,
        round: st.round,
        value: after,
    });
    st.log.push(format!(
        "FFD round={} accepted={} ll_before={before:?} ll_after={after:?} time_ms={}",
        st.round,
        moved as u8,
        t0.elapsed().as_millis()
    ));
    Ok(())
}

/// Global atlas translation, realized as a uniform displacement of every
/// control point and optimized with the same ascent rule.
fn prealign(problem: &Problem, st: &mut IcmState, steps: usize) -> Result<()> {
    let cp = Compiled::new(&st.params, st.observations.n_labels())?;
    let mut ctrl = StepControl::default();
    let mut t = [0.0; 3];
    let base = st.transforms.ffd.clone();
    let mut ll = st.observations.log_likelihood(&cp)?;
    let shifted = |t: &[f64]| {
        let mut f = base.clone();
        f.phi.iter_mut().for_each(|p| {
            p[0] += t[0];
            p[1] += t[1];
            p[2] += t[2];
        });
        f
    };
    for _ in 0..steps {
        let ffd = shifted(&t);
        let g = ffd_grad(&problem.atlas, &st.observations, &cp, &ffd)?;
        let mut gt = [0.0; 3];
        for (j, v) in g.iter().enumerate() {
            gt[j % 3] += v;
        }
        let obs = &st.observations;
        let out = gradient_ascent_step(&t, &gt, &[Family::Displacement; 3], ll, &mut ctrl, |p| {
            let a = obs.atlas_values(&problem.atlas, &shifted(p))?;
            obs.log_likelihood_atlas(&cp, &a)
        })?;
        if !(out.accepted && out.value > ll) {
            break;
        }
        t = [out.params[0], out.params[1], out.params[2]];
        ll = out.value;
        let ffd = shifted(&t);
        let a = st.observations.atlas_values(&problem.atlas, &ffd)?;
        st.observations.set_atlas_values(a);
        st.transforms.ffd = ffd;
        st.ll_trace.push(TraceEntry {
            phase: Phase::Prealign,
            round: 0,
            value: ll,
        });
    }
    st.log.push(format!("PRE translation={t:?} ll={ll:?}"));
    Ok(())
}

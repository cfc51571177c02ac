//! Backtracking gradient ascent on one block of registration parameters.

use crate::error::{Error, Result};

/// Parameter families share a base step length in their own units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Slice translations (mm).
    Translation,
    /// Slice rotation angles (rad).
    Angle,
    /// Entries of a slice's free 2x2 linear part.
    Linear,
    /// FFD control displacements (mm).
    Displacement,
}

impl Family {
    /// Length of a step at unit scale.
    pub fn base_step(self) -> f64 {
        match self {
            Family::Translation | Family::Displacement => 0.5,
            Family::Angle | Family::Linear => 0.01,
        }
    }
}

/// Adaptive step scale carried between successive steps on the same block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepControl {
    /// Multiplier on every family's base step.
    pub scale: f64,
    pub max_scale: f64,
    pub max_halvings: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            scale: 1.0,
            max_scale: 8.0,
            max_halvings: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub params: Vec<f64>,
    pub accepted: bool,
    /// Objective at `params`.
    pub value: f64,
    /// Number of objective evaluations.
    pub evaluations: usize,
}

/// One ascent step from `params` along `grad`.
///
/// Within each family the gradient is scaled so its largest entry moves by
/// `scale * base_step`. The proposal is accepted only if `objective` strictly
/// exceeds `current`; otherwise the step is halved up to `max_halvings` times.
/// After success the next scale doubles (capped); after failure it stays halved.
pub fn gradient_ascent_step<F>(
    params: &[f64],
    grad: &[f64],
    families: &[Family],
    current: f64,
    ctrl: &mut StepControl,
    mut objective: F,
) -> Result<StepOutcome>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), families.len());
    if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            index: j,
            name: format!("{:?}", families[j]),
        });
    }
    let mut dir = vec![0.0; grad.len()];
    for fam in [Family::Translation, Family::Angle, Family::Linear, Family::Displacement] {
        let m = grad
            .iter()
            .zip(families)
            .filter(|(_, f)| **f == fam)
            .fold(0.0f64, |m, (g, _)| m.max(g.abs()));
        if m > 0.0 {
            for j in 0..grad.len() {
                if families[j] == fam {
                    dir[j] = grad[j] / m * fam.base_step();
                }
            }
        }
    }
    if dir.iter().all(|&d| d == 0.0) {
        return Ok(StepOutcome {
            params: params.to_vec(),
            accepted: true,
            value: current,
            evaluations: 0,
        });
    }
    let mut eta = ctrl.scale;
    let mut trial = vec![0.0; params.len()];
    for t in 0..=ctrl.max_halvings {
        for j in 0..params.len() {
            trial[j] = params[j] + eta * dir[j];
        }
        let v = objective(&trial)?;
        if v > current && v.is_finite() {
            ctrl.scale = (2.0 * eta).min(ctrl.max_scale);
            return Ok(StepOutcome {
                params: trial,
                accepted: true,
                value: v,
                evaluations: t + 1,
            });
        }
        if t < ctrl.max_halvings {
            eta *= 0.5;
        }
    }
    ctrl.scale = 0.5 * eta;
    Ok(StepOutcome {
        params: params.to_vec(),
        accepted: false,
        value: current,
        evaluations: ctrl.max_halvings + 1,
    })
}

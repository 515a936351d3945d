//! The reduced Poincare function `L*(I, theta) = L(tau*(I, theta, 0), I, theta, 0)`
//! in the gauge `theta = phi - omega(I) s`, its envelope-theorem gradient, the
//! transversality check on `dL*/dtheta`, and the first-order scattering map
//! `(I, theta) -> (I + eps dL*/dtheta, theta - eps dL*/dI)`.

use crate::criticality::{newton_refine, BasePoint, CritOpts, CriticalBranch, NewtonOutcome};
use crate::error::{Error, Result};
use crate::homoclinic::HomoclinicOrbit;
use crate::melnikov::melnikov;
use crate::model::SystemSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct ReducedEval {
    pub value: f64,
    pub grad_i: Vec<f64>,
    pub grad_theta: Vec<f64>,
    /// Critical point used for the envelope evaluation.
    pub tau_star: Vec<f64>,
    pub est_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScatteringState {
    pub i_act: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ScatteringState {
    pub fn new(i_act: Vec<f64>, theta: Vec<f64>) -> Self {
        Self { i_act, theta }
    }

    /// Euclidean distance with angle coordinates compared mod 2 pi.
    pub fn distance(&self, other: &Self) -> f64 {
        let mut sq = 0.0;
        for (a, b) in self.i_act.iter().zip(&other.i_act) {
            sq += (a - b) * (a - b);
        }
        for (a, b) in self.theta.iter().zip(&other.theta) {
            let d = crate::criticality::angle_diff(*a, *b);
            sq += d * d;
        }
        sq.sqrt()
    }
}

/// Locates `tau*(I, theta, 0)` by Newton from a seed, with the branch grid
/// supplying the seed when none is given.
pub fn refine_tau_star(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    branch: &CriticalBranch,
    i_act: &[f64],
    theta: &[f64],
    seed: Option<&[f64]>,
    opts: &CritOpts,
) -> Result<Vec<f64>> {
    if !branch.bbox.contains(i_act, theta, 0.0) {
        return Err(Error::OutsideDomain(format!(
            "I = {i_act:?}, theta = {theta:?}, s = 0"
        )));
    }
    let seed_tau = match seed {
        Some(s) => s.to_vec(),
        None => {
            let node = branch.nearest_node(i_act, theta, 0.0);
            match branch.point_at(&node) {
                Some(p) => p.tau_star.clone(),
                None => {
                    return Err(Error::OutsideDomain(
                        "nearest branch node has no critical point".into(),
                    ))
                }
            }
        }
    };
    let base = BasePoint {
        i_act: i_act.to_vec(),
        phi: theta.to_vec(),
        s: 0.0,
    };
    match newton_refine(system, orbits, &base, &seed_tau, opts)? {
        NewtonOutcome::Converged(pt) => {
            if pt.margin() <= opts.nondegen_tol {
                return Err(Error::NumericalFailure(format!(
                    "critical point degenerate at I = {i_act:?}, theta = {theta:?}"
                )));
            }
            Ok(pt.tau_star)
        }
        NewtonOutcome::Stalled { grad_norm, .. } => Err(Error::NumericalFailure(format!(
            "tau* refinement stalled at I = {i_act:?}, theta = {theta:?} (|grad| = {grad_norm:e})"
        ))),
    }
}

/// Evaluates `L*` and its gradient. By the envelope theorem the partials are
/// the plain partials of `L` at the critical point; no `dtau*/d.` terms enter.
pub fn reduced_eval(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    branch: &CriticalBranch,
    i_act: &[f64],
    theta: &[f64],
    opts: &CritOpts,
) -> Result<ReducedEval> {
    reduced_eval_seeded(system, orbits, branch, i_act, theta, None, opts)
}

pub fn reduced_eval_seeded(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    branch: &CriticalBranch,
    i_act: &[f64],
    theta: &[f64],
    seed: Option<&[f64]>,
    opts: &CritOpts,
) -> Result<ReducedEval> {
    let tau_star = refine_tau_star(system, orbits, branch, i_act, theta, seed, opts)?;
    let eval = melnikov(system, orbits, &tau_star, i_act, theta, 0.0, opts.quad_tol)?;
    Ok(ReducedEval {
        value: eval.value,
        grad_i: eval.grad_i,
        grad_theta: eval.grad_phi,
        tau_star,
        est_error: eval.est_error,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct H3bReport {
    pub pass: bool,
    pub max_grad_theta: f64,
    pub witness_theta: Vec<f64>,
    pub i_act: Vec<f64>,
    pub h3b_tol: f64,
    pub points_checked: usize,
    pub points_failed: usize,
}

/// Scans `theta` over the grid at fixed `I0` and reports the largest
/// `|dL*/dtheta|` (sup norm). Passes when it clears `h3b_tol`.
pub fn h3b_check(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    branch: &CriticalBranch,
    i0: &[f64],
    theta_grid: &[Vec<f64>],
    h3b_tol: f64,
    opts: &CritOpts,
) -> Result<H3bReport> {
    let mut max_grad = -1.0;
    let mut witness = Vec::new();
    let mut failed = 0usize;
    for theta in theta_grid {
        match reduced_eval(system, orbits, branch, i0, theta, opts) {
            Ok(eval) => {
                let g = eval.grad_theta.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
                if g > max_grad {
                    max_grad = g;
                    witness = theta.clone();
                }
            }
            Err(Error::OutsideDomain(_)) | Err(Error::NumericalFailure(_)) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(H3bReport {
        pass: max_grad > h3b_tol,
        max_grad_theta: max_grad.max(0.0),
        witness_theta: witness,
        i_act: i0.to_vec(),
        h3b_tol,
        points_checked: theta_grid.len(),
        points_failed: failed,
    })
}

/// One step of the first-order scattering map.
pub fn scattering_step(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    branch: &CriticalBranch,
    state: &ScatteringState,
    epsilon: f64,
    opts: &CritOpts,
) -> Result<ScatteringState> {
    let eval = reduced_eval(system, orbits, branch, &state.i_act, &state.theta, opts)?;
    let i_act: Vec<f64> = state
        .i_act
        .iter()
        .zip(&eval.grad_theta)
        .map(|(&i, &g)| i + epsilon * g)
        .collect();
    let theta: Vec<f64> = state
        .theta
        .iter()
        .zip(&eval.grad_i)
        .map(|(&t, &g)| t - epsilon * g)
        .collect();
    let next = ScatteringState { i_act, theta };
    if !branch.bbox.contains(&next.i_act, &next.theta, 0.0) {
        return Err(Error::OutsideDomain(format!(
            "scattering step left the branch box at I = {:?}",
            next.i_act
        )));
    }
    Ok(next)
}

/// Uniform `theta` grid over `[0, 2 pi)^d`, `m` points per axis.
pub fn theta_grid(d: usize, m: usize) -> Vec<Vec<f64>> {
    let total = m.pow(d as u32);
    (0..total)
        .map(|flat| {
            let mut idx = flat;
            (0..d)
                .map(|_| {
                    let j = idx % m;
                    idx /= m;
                    2.0 * std::f64::consts::PI * j as f64 / m as f64
                })
                .collect()
        })
        .collect()
}

/// `theta` grid spanning the branch box's phi extent at `s = 0`.
pub fn theta_grid_in_box(branch: &CriticalBranch, m: usize) -> Vec<Vec<f64>> {
    let d = branch.bbox.phi_center.len();
    let total = m.pow(d as u32);
    (0..total)
        .map(|flat| {
            let mut idx = flat;
            (0..d)
                .map(|a| {
                    let j = idx % m;
                    idx /= m;
                    let c = branch.bbox.phi_center[a];
                    let h = branch.bbox.phi_half[a];
                    if m <= 1 {
                        c
                    } else {
                        c - h + 2.0 * h * j as f64 / (m - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

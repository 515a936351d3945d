//! Non-degenerate critical points of `tau -> L(tau, I, phi, s)` and their
//! continuation over a box of base points.
//!
//! A point passes when the Newton residual on `dL/dtau` is below
//! `newton_tol` and the Hessian determinant clears a scale-aware
//! non-degeneracy margin. Continuation walks a grid outward from the anchor
//! node, seeding each node from its nearest computed neighbor.

use crate::error::{Error, Result};
use crate::homoclinic::HomoclinicOrbit;
use crate::melnikov::{effective_tau_period, exact_tau_period, melnikov, MelnikovEval};
use crate::model::SystemSpec;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BasePoint {
    pub i_act: Vec<f64>,
    pub phi: Vec<f64>,
    pub s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub tau_star: Vec<f64>,
    pub grad_norm: f64,
    pub hess_det: f64,
    pub hess_eigs: Vec<f64>,
    pub base_point: BasePoint,
}

impl CriticalPoint {
    /// Scale-aware non-degeneracy margin: `|det|` over the product of
    /// eigenvalue magnitudes floored at one, so a noise-level Hessian
    /// cannot pass on scale alone.
    pub fn margin(&self) -> f64 {
        let scale: f64 = self.hess_eigs.iter().map(|e| e.abs().max(1e-300)).product();
        self.hess_det.abs() / scale.max(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct CritOpts {
    /// Quadrature tolerance for Melnikov evaluations.
    pub quad_tol: f64,
    /// Convergence tolerance on the l1 norm of `dL/dtau`.
    pub newton_tol: f64,
    /// Margin for `|det Hess| > nondegen_tol * max(1, scale)`.
    pub nondegen_tol: f64,
    pub max_newton_iter: usize,
    pub seeds_per_dim: usize,
    /// Continuation rejects a node whose `tau*` jumps farther than this from
    /// its predictor (sup norm).
    pub jump_bound: f64,
}

impl Default for CritOpts {
    fn default() -> Self {
        Self {
            quad_tol: 1e-10,
            newton_tol: 1e-10,
            nondegen_tol: 1e-6,
            max_newton_iter: 50,
            seeds_per_dim: 8,
            jump_bound: 0.5,
        }
    }
}

fn make_point(eval: &MelnikovEval, tau: &[f64], base: &BasePoint) -> CriticalPoint {
    let sym = (eval.hess_tau.clone() + eval.hess_tau.transpose()) * 0.5;
    let eigs = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    CriticalPoint {
        tau_star: tau.to_vec(),
        grad_norm: eval.grad_tau_norm1(),
        hess_det: eval.hess_tau.determinant(),
        hess_eigs: eigs,
        base_point: base.clone(),
    }
}

pub enum NewtonOutcome {
    Converged(CriticalPoint),
    Stalled { tau: Vec<f64>, grad_norm: f64 },
}

/// Damped Newton iteration on `dL/dtau = 0` from `tau0`.
pub fn newton_refine(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    base: &BasePoint,
    tau0: &[f64],
    opts: &CritOpts,
) -> Result<NewtonOutcome> {
    let mut tau = tau0.to_vec();
    let mut eval = melnikov(
        system,
        orbits,
        &tau,
        &base.i_act,
        &base.phi,
        base.s,
        opts.quad_tol,
    )?;
    let mut g1 = eval.grad_tau_norm1();
    for _ in 0..opts.max_newton_iter {
        if g1 < opts.newton_tol {
            return Ok(NewtonOutcome::Converged(make_point(&eval, &tau, base)));
        }
        let lu = eval.hess_tau.clone().lu();
        let g = DVector::from_column_slice(&eval.grad_tau);
        let delta = match lu.solve(&(-&g)) {
            Some(d) if d.iter().all(|x| x.is_finite()) => d,
            _ => return Ok(NewtonOutcome::Stalled { tau, grad_norm: g1 }),
        };
        // keep steps bounded; far seeds otherwise shoot off along flat ridges
        let dmax = delta.amax();
        let mut alpha = if dmax > 1.0 { 1.0 / dmax } else { 1.0 };
        let mut accepted = false;
        for _ in 0..25 {
            let trial: Vec<f64> = tau
                .iter()
                .zip(delta.iter())
                .map(|(&t, &d)| t + alpha * d)
                .collect();
            let trial_eval = melnikov(
                system,
                orbits,
                &trial,
                &base.i_act,
                &base.phi,
                base.s,
                opts.quad_tol,
            )?;
            let trial_g1 = trial_eval.grad_tau_norm1();
            if trial_g1 < (1.0 - 0.25 * alpha) * g1 || trial_g1 < opts.newton_tol {
                tau = trial;
                eval = trial_eval;
                g1 = trial_g1;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Ok(NewtonOutcome::Stalled { tau, grad_norm: g1 });
        }
    }
    if g1 < opts.newton_tol {
        return Ok(NewtonOutcome::Converged(make_point(&eval, &tau, base)));
    }
    Ok(NewtonOutcome::Stalled { tau, grad_norm: g1 })
}

/// Newton from a uniform seed grid over one effective period per pendulum.
///
/// Returns `(nondegenerate, degenerate)` converged points, deduplicated;
/// the nondegenerate list is sorted by decreasing `|det Hess|`.
pub fn find_critical_points(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    i_act: &[f64],
    phi: &[f64],
    s: f64,
    opts: &CritOpts,
) -> Result<(Vec<CriticalPoint>, Vec<CriticalPoint>)> {
    let n = system.n_pendulums();
    let base = BasePoint {
        i_act: i_act.to_vec(),
        phi: phi.to_vec(),
        s,
    };
    let periods: Vec<f64> = (0..n)
        .map(|i| effective_tau_period(system, i_act, i))
        .collect();
    let spd = opts.seeds_per_dim.max(1);
    let total = spd.pow(n as u32);
    if total > 32768 {
        return Err(Error::InvalidInput(format!(
            "seed grid of {total} points is too large"
        )));
    }
    // When tau_i -> L is exactly periodic, reduce converged points into one
    // fundamental domain and compare coordinates circularly.
    let exact: Vec<Option<f64>> = (0..n).map(|i| exact_tau_period(system, i_act, i)).collect();
    let coord_dist = |a: f64, b: f64, i: usize| match exact[i] {
        Some(p) => {
            let d = (a - b).rem_euclid(p);
            d.min(p - d)
        }
        None => (a - b).abs(),
    };
    let mut found: Vec<CriticalPoint> = Vec::new();
    for flat in 0..total {
        let mut idx = flat;
        let seed: Vec<f64> = (0..n)
            .map(|i| {
                let j = idx % spd;
                idx /= spd;
                periods[i] * j as f64 / spd as f64
            })
            .collect();
        if let NewtonOutcome::Converged(mut pt) = newton_refine(system, orbits, &base, &seed, opts)?
        {
            for (i, t) in pt.tau_star.iter_mut().enumerate() {
                if let Some(p) = exact[i] {
                    *t = t.rem_euclid(p);
                }
            }
            let dup = found.iter().any(|q| {
                q.tau_star
                    .iter()
                    .zip(&pt.tau_star)
                    .enumerate()
                    .map(|(i, (a, b))| coord_dist(*a, *b, i))
                    .fold(0.0f64, f64::max)
                    < 1e-6
            });
            if !dup {
                found.push(pt);
            }
        }
    }
    let (mut good, degen): (Vec<_>, Vec<_>) = found
        .into_iter()
        .partition(|p| p.margin() > opts.nondegen_tol);
    good.sort_by(|a, b| {
        let (da, db) = (a.hess_det.abs(), b.hess_det.abs());
        // dets within relative 1e-9 count as ties, broken lexicographically
        if (da - db).abs() > 1e-9 * da.max(db) {
            db.partial_cmp(&da).unwrap()
        } else {
            a.tau_star.partial_cmp(&b.tau_star).unwrap()
        }
    });
    Ok((good, degen))
}

/// Box of base points: an `I`-box (per-axis half widths) times a `(phi, s)` box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchBox {
    pub i_center: Vec<f64>,
    pub i_half: Vec<f64>,
    pub phi_center: Vec<f64>,
    pub phi_half: Vec<f64>,
    pub s_center: f64,
    pub s_half: f64,
}

impl BranchBox {
    pub fn centered(base: &BasePoint, i_half: f64, angle_half: f64) -> Self {
        Self {
            i_center: base.i_act.clone(),
            i_half: vec![i_half; base.i_act.len()],
            phi_center: base.phi.clone(),
            phi_half: vec![angle_half; base.phi.len()],
            s_center: base.s,
            s_half: angle_half,
        }
    }

    pub fn contains(&self, i_act: &[f64], phi: &[f64], s: f64) -> bool {
        let tol = 1e-9;
        self.i_center
            .iter()
            .zip(&self.i_half)
            .zip(i_act)
            .all(|((c, h), x)| (x - c).abs() <= h + tol)
            && self
                .phi_center
                .iter()
                .zip(&self.phi_half)
                .zip(phi)
                .all(|((c, h), x)| angle_diff(*x, *c).abs() <= h + tol)
            && angle_diff(s, self.s_center).abs() <= self.s_half + tol
    }
}

pub(crate) fn angle_diff(a: f64, b: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut d = (a - b) % two_pi;
    if d > std::f64::consts::PI {
        d -= two_pi;
    }
    if d < -std::f64::consts::PI {
        d += two_pi;
    }
    d
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalBranch {
    pub bbox: BranchBox,
    /// Nodes per axis: `d` action axes, then `d` phi axes, then the `s` axis.
    pub steps: Vec<usize>,
    pub grid: Vec<Option<CriticalPoint>>,
    pub continuation_ok: bool,
    pub min_abs_det: f64,
    pub min_margin: f64,
    pub max_grad_norm: f64,
}

impl CriticalBranch {
    fn axis_count(&self) -> usize {
        self.steps.len()
    }

    fn axis_center_half(&self, axis: usize) -> (f64, f64) {
        let d = self.bbox.i_center.len();
        if axis < d {
            (self.bbox.i_center[axis], self.bbox.i_half[axis])
        } else if axis < 2 * d {
            (self.bbox.phi_center[axis - d], self.bbox.phi_half[axis - d])
        } else {
            (self.bbox.s_center, self.bbox.s_half)
        }
    }

    fn axis_value(&self, axis: usize, j: usize) -> f64 {
        let (c, h) = self.axis_center_half(axis);
        let m = self.steps[axis];
        if m <= 1 {
            c
        } else {
            c - h + 2.0 * h * j as f64 / (m - 1) as f64
        }
    }

    pub fn node_base(&self, multi: &[usize]) -> BasePoint {
        let d = self.bbox.i_center.len();
        BasePoint {
            i_act: (0..d).map(|a| self.axis_value(a, multi[a])).collect(),
            phi: (0..d)
                .map(|a| self.axis_value(d + a, multi[d + a]))
                .collect(),
            s: self.axis_value(2 * d, multi[2 * d]),
        }
    }

    fn flat(&self, multi: &[usize]) -> usize {
        let mut f = 0;
        for (a, &j) in multi.iter().enumerate() {
            f = f * self.steps[a] + j;
        }
        f
    }

    /// Nearest grid node to the given base point (angles compared mod 2 pi).
    pub fn nearest_node(&self, i_act: &[f64], phi: &[f64], s: f64) -> Vec<usize> {
        let d = self.bbox.i_center.len();
        let mut multi = vec![0usize; self.axis_count()];
        for (a, m) in multi.iter_mut().enumerate() {
            let (c, h) = self.axis_center_half(a);
            let target = if a < d {
                i_act[a]
            } else if a < 2 * d {
                c + angle_diff(phi[a - d], c)
            } else {
                c + angle_diff(s, c)
            };
            let steps = self.steps[a];
            if steps <= 1 || h == 0.0 {
                *m = 0;
                continue;
            }
            let x = ((target - (c - h)) / (2.0 * h) * (steps - 1) as f64).round();
            *m = (x.max(0.0) as usize).min(steps - 1);
        }
        multi
    }

    pub fn point_at(&self, multi: &[usize]) -> Option<&CriticalPoint> {
        self.grid[self.flat(multi)].as_ref()
    }

    /// CSV dump `(I..., phi..., s, tau*..., det_hess)`.
    pub fn to_csv(&self) -> String {
        let d = self.bbox.i_center.len();
        let n = self
            .grid
            .iter()
            .flatten()
            .next()
            .map(|p| p.tau_star.len())
            .unwrap_or(0);
        let mut hdr: Vec<String> = (0..d).map(|j| format!("I{j}")).collect();
        hdr.extend((0..d).map(|j| format!("phi{j}")));
        hdr.push("s".into());
        hdr.extend((0..n).map(|j| format!("tau{j}")));
        hdr.push("det_hess".into());
        let mut out = hdr.join(",");
        out.push('\n');
        for p in self.grid.iter().flatten() {
            let mut row: Vec<String> = p
                .base_point
                .i_act
                .iter()
                .map(|x| format!("{x:.16e}"))
                .collect();
            row.extend(p.base_point.phi.iter().map(|x| format!("{x:.16e}")));
            row.push(format!("{:.16e}", p.base_point.s));
            row.extend(p.tau_star.iter().map(|x| format!("{x:.16e}")));
            row.push(format!("{:.16e}", p.hess_det));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Predictor-corrector continuation of `start` across the grid on `bbox`.
pub fn continue_branch(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    start: &CriticalPoint,
    bbox: BranchBox,
    steps: Vec<usize>,
    opts: &CritOpts,
) -> Result<CriticalBranch> {
    let d = system.rotor_dim();
    if steps.len() != 2 * d + 1 {
        return Err(Error::DimensionMismatch {
            what: "grid step entries",
            expected: 2 * d + 1,
            got: steps.len(),
        });
    }
    if start.margin() <= opts.nondegen_tol {
        return Err(Error::InvalidInput(
            "continuation start point has a degenerate Hessian".into(),
        ));
    }
    let total: usize = steps.iter().product();
    if total == 0 || total > 2_000_000 {
        return Err(Error::InvalidInput(format!(
            "branch grid of {total} nodes is unusable"
        )));
    }
    let mut branch = CriticalBranch {
        bbox,
        steps,
        grid: vec![None; total],
        continuation_ok: true,
        min_abs_det: f64::INFINITY,
        min_margin: f64::INFINITY,
        max_grad_norm: 0.0,
    };

    let anchor = branch.nearest_node(
        &start.base_point.i_act,
        &start.base_point.phi,
        start.base_point.s,
    );
    let axes = branch.axis_count();
    let mut queue = std::collections::VecDeque::new();
    let mut seed_tau: Vec<Option<Vec<f64>>> = vec![None; total];
    let anchor_flat = branch.flat(&anchor);
    seed_tau[anchor_flat] = Some(start.tau_star.clone());
    queue.push_back(anchor);
    let mut visited = vec![false; total];
    visited[anchor_flat] = true;

    while let Some(multi) = queue.pop_front() {
        let flat = branch.flat(&multi);
        let base = branch.node_base(&multi);
        let seed = seed_tau[flat].clone().expect("seed set before enqueue");
        let mut node_ok = false;
        let mut tau_next = seed.clone();
        match newton_refine(system, orbits, &base, &seed, opts)? {
            NewtonOutcome::Converged(pt) => {
                let jump = pt
                    .tau_star
                    .iter()
                    .zip(&seed)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                if jump < opts.jump_bound && pt.margin() > opts.nondegen_tol {
                    branch.min_abs_det = branch.min_abs_det.min(pt.hess_det.abs());
                    branch.min_margin = branch.min_margin.min(pt.margin());
                    branch.max_grad_norm = branch.max_grad_norm.max(pt.grad_norm);
                    tau_next = pt.tau_star.clone();
                    branch.grid[flat] = Some(pt);
                    node_ok = true;
                }
            }
            NewtonOutcome::Stalled { .. } => {}
        }
        if !node_ok {
            branch.continuation_ok = false;
        }
        for axis in 0..axes {
            for delta in [-1isize, 1] {
                let j = multi[axis] as isize + delta;
                if j < 0 || j >= branch.steps[axis] as isize {
                    continue;
                }
                let mut neighbor = multi.clone();
                neighbor[axis] = j as usize;
                let nf = branch.flat(&neighbor);
                if !visited[nf] {
                    visited[nf] = true;
                    seed_tau[nf] = Some(tau_next.clone());
                    queue.push_back(neighbor);
                }
            }
        }
    }
    Ok(branch)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct H3aReport {
    pub pass: bool,
    pub continuation_ok: bool,
    pub min_abs_det: f64,
    pub min_margin: f64,
    pub max_grad_norm: f64,
    pub nodes_total: usize,
    pub nodes_ok: usize,
    pub nondegen_tol: f64,
    pub newton_tol: f64,
}

/// Summarizes a continued branch against the non-degeneracy hypothesis.
pub fn h3a_report(branch: &CriticalBranch, opts: &CritOpts) -> H3aReport {
    let nodes_ok = branch.grid.iter().flatten().count();
    let pass = branch.continuation_ok
        && nodes_ok == branch.grid.len()
        && branch.min_margin > opts.nondegen_tol
        && branch.max_grad_norm < opts.newton_tol;
    H3aReport {
        pass,
        continuation_ok: branch.continuation_ok,
        min_abs_det: branch.min_abs_det,
        min_margin: branch.min_margin,
        max_grad_norm: branch.max_grad_norm,
        nodes_total: branch.grid.len(),
        nodes_ok,
        nondegen_tol: opts.nondegen_tol,
        newton_tol: opts.newton_tol,
    }
}

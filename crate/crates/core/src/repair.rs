//! Constructive repair of failing hypotheses.
//!
//! When `tau -> L` lacks a non-degenerate critical point at a target base
//! point, a two-stage perturbation restores it: stage one adds
//! `delta2 sum_i f_i(q_i) cos(t + b_i)` with phases chosen to zero the
//! gradient at a near-critical `tau*`; stage two adds
//! `delta3 sum_i g_i(q_i) cos(t + c_i)` whose phases make the Hessian shift
//! diagonal with strictly negative entries, so the determinant
//! `v(delta3) = det(H + delta3 diag(lambda))` is a degree-`n` polynomial with
//! nonzero leading coefficient and admits arbitrarily small nonzero values.
//! A failing action-transversality check is repaired by
//! `delta F(q_1) sum_i cos(phi_i + c_i)` with phases aligned so the reduced
//! gradient gains the direction `(-C_1, 0, ..., 0)`.

use crate::criticality::{newton_refine, BasePoint, CritOpts, CriticalBranch, NewtonOutcome};
use crate::error::{Error, Result};
use crate::homoclinic::HomoclinicOrbit;
use crate::melnikov::{effective_tau_period, melnikov};
use crate::model::{Mode, SystemSpec};
use crate::quad::adaptive_gk;
use crate::reduced::refine_tau_star;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A single-harmonic angular function `cos(k q)` or `sin(k q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AngularFn {
    pub harmonic: u32,
    pub sine: bool,
}

impl AngularFn {
    pub fn eval(&self, q: f64) -> f64 {
        let kq = self.harmonic as f64 * q;
        if self.sine {
            kq.sin()
        } else {
            kq.cos()
        }
    }

    pub fn name(&self) -> String {
        if self.sine {
            format!("sin({}q)", self.harmonic)
        } else {
            format!("cos({}q)", self.harmonic)
        }
    }
}

/// Fallback basis: cos q, sin q, cos 2q, sin 2q, ... up to harmonic 8.
pub fn repair_basis() -> Vec<AngularFn> {
    (1..=8u32)
        .flat_map(|k| {
            [
                AngularFn {
                    harmonic: k,
                    sine: false,
                },
                AngularFn {
                    harmonic: k,
                    sine: true,
                },
            ]
        })
        .collect()
}

const TRANSFORM_TOL: f64 = 1e-12;
const BASIS_FLOOR: f64 = 1e-8;

/// `(A1, A2) = (-int (f(q0(t)) - f(0)) cos(a t) dt, -int ... sin(a t) dt)`
/// with certified tails.
pub fn fourier_transform_coeffs(
    orbit: &HomoclinicOrbit,
    f: &AngularFn,
    freq: f64,
) -> Result<(f64, f64)> {
    if freq < 0.0 {
        return Err(Error::InvalidInput(
            "transform frequency must be nonnegative".into(),
        ));
    }
    let lam = orbit.lambda;
    let k = f.harmonic as f64;
    if f.harmonic == 0 {
        // constant cosine: integrand vanishes; sine of 0 likewise
        return Ok((0.0, 0.0));
    }
    let amp = k * orbit.tail_coeff;
    let bound = |t: f64| 2.0 * amp * (-lam * t).exp() / lam;
    let mut t_win = 16.0 / lam;
    while bound(t_win) > TRANSFORM_TOL / 4.0 && t_win < 900.0 / lam {
        t_win += 2.0 / lam;
    }
    let f0 = f.eval(0.0);
    let panel_w = (PI / (1.0 + freq)).min(2.0);
    let initial = ((2.0 * t_win / panel_w).ceil() as usize).max(4);
    let out = adaptive_gk(
        |t, o| {
            let (q, _) = orbit.value(t);
            let df = f.eval(q) - f0;
            let (s, c) = (freq * t).sin_cos();
            o[0] = -df * c;
            o[1] = -df * s;
        },
        -t_win,
        t_win,
        2,
        TRANSFORM_TOL / 2.0,
        (initial * 8).max(6000),
        initial,
    )?;
    Ok((out.value[0], out.value[1]))
}

/// First basis member whose transform at `freq` has nonzero magnitude,
/// together with its `(A1, A2)`.
fn pick_basis_member(orbit: &HomoclinicOrbit, freq: f64) -> Result<(AngularFn, f64, f64)> {
    for f in repair_basis() {
        let (a1, a2) = fourier_transform_coeffs(orbit, &f, freq)?;
        if a1.hypot(a2) > BASIS_FLOOR {
            return Ok((f, a1, a2));
        }
    }
    Err(Error::RepairFailure(format!(
        "no basis member has a nonzero transform at frequency {freq}"
    )))
}

/// Solves `sin(s0 - tau + b + alpha) = r` for the phase `b`, picking the root
/// with nonnegative cosine (the branch that pushes the Hessian diagonal down).
pub fn solve_phase(r: f64, s0: f64, tau: f64, alpha: f64) -> f64 {
    debug_assert!(r.abs() <= 1.0);
    (r.asin() - s0 + tau - alpha).rem_euclid(2.0 * PI)
}

/// Expands `amp * f(q_i) * cos(angle + chi)` into two explicit modes, where
/// the angle is the time (`m = 1`) or a rotor angle (`l = e_j`).
fn product_modes(
    f: &AngularFn,
    pendulum: usize,
    n: usize,
    d: usize,
    rotor_axis: Option<usize>,
    amp: f64,
    chi: f64,
) -> Vec<Mode> {
    let mut k = vec![0i64; n];
    k[pendulum] = f.harmonic as i64;
    let (l_plus, l_minus, m_plus, m_minus) = match rotor_axis {
        Some(j) => {
            let mut lp = vec![0i64; d];
            lp[j] = 1;
            let mut lm = vec![0i64; d];
            lm[j] = -1;
            (lp, lm, 0, 0)
        }
        None => (vec![0i64; d], vec![0i64; d], 1, -1),
    };
    // cos(kq) X = [cos(kq + X) + cos(kq - X)] / 2
    // sin(kq) X = [cos(kq + X - pi/2) + cos(kq - X - pi/2)] / 2
    let shift = if f.sine { -PI / 2.0 } else { 0.0 };
    vec![
        Mode {
            k: k.clone(),
            l: l_plus,
            m: m_plus,
            amplitude: amp / 2.0,
            phase: chi + shift,
        },
        Mode {
            k,
            l: l_minus,
            m: m_minus,
            amplitude: amp / 2.0,
            phase: -chi + shift,
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1 {
    pub f_members: Vec<AngularFn>,
    /// `(A_{i,1}, A_{i,2})` at frequency one.
    pub transforms: Vec<(f64, f64)>,
    pub alphas: Vec<f64>,
    pub b: Vec<f64>,
    pub delta2: f64,
    pub tau_star: Vec<f64>,
    /// `|dL/dtau|_1` at `tau_star` before the repair.
    pub residual_grad: f64,
    pub modes: Vec<Mode>,
}

/// Stage one: create a critical point at the target base point.
///
/// Searches a box of `tau` values for `|dL/dtau|_1` below the threshold
/// `min_i delta2 |A_i|` (existence is guaranteed since the gradient's
/// infimum over `tau` vanishes), then solves the phases `b_i` so the
/// repaired gradient vanishes exactly at `tau*`.
pub fn repair_h3a_stage1(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    target: &BasePoint,
    delta2: f64,
    opts: &CritOpts,
) -> Result<Stage1> {
    if !(delta2 > 0.0) {
        return Err(Error::InvalidInput(
            "stage-one budget must be positive".into(),
        ));
    }
    let n = system.n_pendulums();
    let d = system.rotor_dim();
    let mut f_members = Vec::with_capacity(n);
    let mut transforms = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    let mut magnitudes = Vec::with_capacity(n);
    for orbit in orbits {
        let (f, a1, a2) = pick_basis_member(orbit, 1.0)?;
        f_members.push(f);
        transforms.push((a1, a2));
        alphas.push(a2.atan2(a1));
        magnitudes.push(a1.hypot(a2));
    }
    let threshold = magnitudes
        .iter()
        .fold(f64::INFINITY, |a, &m| a.min(delta2 * m));

    // grid search over 8 effective periods per dimension, small norms first
    let periods: Vec<f64> = (0..n)
        .map(|i| effective_tau_period(system, &target.i_act, i))
        .collect();
    let per_dim = match n {
        1 => 129usize,
        2 => 65,
        _ => 17,
    };
    let mut grid_pts: Vec<Vec<f64>> = Vec::new();
    let total = per_dim.pow(n as u32);
    for flat in 0..total {
        let mut idx = flat;
        let pt: Vec<f64> = (0..n)
            .map(|i| {
                let j = idx % per_dim;
                idx /= per_dim;
                let half = 4.0 * periods[i];
                -half + 2.0 * half * j as f64 / (per_dim - 1) as f64
            })
            .collect();
        grid_pts.push(pt);
    }
    grid_pts.sort_by(|a, b| {
        let na = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let nb = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        na.partial_cmp(&nb)
            .unwrap()
            .then_with(|| a.partial_cmp(b).unwrap())
    });

    let mut best_tau: Option<Vec<f64>> = None;
    let mut best_grad = f64::INFINITY;
    for pt in &grid_pts {
        let e = melnikov(
            system,
            orbits,
            pt,
            &target.i_act,
            &target.phi,
            target.s,
            opts.quad_tol,
        )?;
        let g1 = e.grad_tau_norm1();
        if g1 < best_grad {
            best_grad = g1;
            best_tau = Some(pt.clone());
            if g1 < 0.25 * threshold {
                break;
            }
        }
    }
    let mut tau_star = best_tau.expect("grid is nonempty");
    // polish toward an exact critical point when Newton cooperates
    match newton_refine(system, orbits, target, &tau_star, opts)? {
        NewtonOutcome::Converged(pt) => {
            tau_star = pt.tau_star;
            best_grad = pt.grad_norm;
        }
        NewtonOutcome::Stalled { tau, grad_norm } => {
            if grad_norm < best_grad {
                tau_star = tau;
                best_grad = grad_norm;
            }
        }
    }
    if best_grad >= threshold {
        return Err(Error::SearchFailure {
            best_grad,
            required: threshold,
        });
    }

    let grad = melnikov(
        system,
        orbits,
        &tau_star,
        &target.i_act,
        &target.phi,
        target.s,
        opts.quad_tol,
    )?
    .grad_tau;
    let mut b = Vec::with_capacity(n);
    let mut modes = Vec::new();
    for i in 0..n {
        let r = -grad[i] / (delta2 * magnitudes[i]);
        if r.abs() > 1.0 {
            return Err(Error::SearchFailure {
                best_grad,
                required: threshold,
            });
        }
        let bi = solve_phase(r, target.s, tau_star[i], alphas[i]);
        b.push(bi);
        modes.extend(product_modes(&f_members[i], i, n, d, None, delta2, bi));
    }
    Ok(Stage1 {
        f_members,
        transforms,
        alphas,
        b,
        delta2,
        tau_star,
        residual_grad: best_grad,
        modes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2 {
    /// Critical point the construction was anchored at.
    pub tau_star: Vec<f64>,
    pub g_members: Vec<AngularFn>,
    /// `(B_{i,1}, B_{i,2})` at frequency one.
    pub transforms: Vec<(f64, f64)>,
    pub betas: Vec<f64>,
    /// Phases `c_i = -s_0 + tau*_i - beta_i`.
    pub c: Vec<f64>,
    /// Diagonal Hessian shifts `lambda_i = -|B_i|`.
    pub lambda_shifts: Vec<f64>,
    pub delta3: f64,
    pub v_at_delta3: f64,
    /// Coefficients of the determinant polynomial `v`, constant term first.
    pub v_coeffs: Vec<f64>,
    /// Hessian of the pre-repair map at `tau*`, row-major.
    pub hessian_before: Vec<f64>,
    pub modes: Vec<Mode>,
    pub skipped: bool,
}

/// Evaluates `v(x) = det(H + x diag(lambda))`.
fn v_of(h: &DMatrix<f64>, lambda: &[f64], x: f64) -> f64 {
    let mut m = h.clone();
    for (i, &l) in lambda.iter().enumerate() {
        m[(i, i)] += x * l;
    }
    m.determinant()
}

/// Polynomial coefficients of `v` from `n + 1` determinant evaluations
/// (Vandermonde solve; exact since `v` has degree `n`).
fn v_coefficients(h: &DMatrix<f64>, lambda: &[f64], scale: f64) -> Vec<f64> {
    let n = lambda.len();
    let nodes: Vec<f64> = (0..=n)
        .map(|j| scale * (j as f64) / n.max(1) as f64)
        .collect();
    let mut vm = DMatrix::zeros(n + 1, n + 1);
    let mut rhs = nalgebra::DVector::zeros(n + 1);
    for (r, &x) in nodes.iter().enumerate() {
        for c in 0..=n {
            vm[(r, c)] = x.powi(c as i32);
        }
        rhs[r] = v_of(h, lambda, x);
    }
    let sol = vm
        .lu()
        .solve(&rhs)
        .expect("Vandermonde with distinct nodes is invertible");
    sol.iter().copied().collect()
}

/// Stage two: restore Hessian non-degeneracy at an existing critical point.
///
/// The construction data (members, phases, eigenvalue shifts, determinant
/// polynomial) is always computed and recorded; `delta3` stays zero and the
/// stage is marked skipped when the Hessian is already non-degenerate.
pub fn repair_h3a_stage2(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    target: &BasePoint,
    tau_star: &[f64],
    delta3_budget: f64,
    opts: &CritOpts,
) -> Result<Stage2> {
    if !(delta3_budget > 0.0) {
        return Err(Error::InvalidInput(
            "stage-two budget must be positive".into(),
        ));
    }
    let n = system.n_pendulums();
    let d = system.rotor_dim();
    let eval = melnikov(
        system,
        orbits,
        tau_star,
        &target.i_act,
        &target.phi,
        target.s,
        opts.quad_tol,
    )?;
    let h = eval.hess_tau.clone();

    let mut g_members = Vec::with_capacity(n);
    let mut transforms = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    let mut lambda_shifts = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for (i, orbit) in orbits.iter().enumerate() {
        let (g, b1, b2) = pick_basis_member(orbit, 1.0)?;
        g_members.push(g);
        transforms.push((b1, b2));
        let beta = b2.atan2(b1);
        betas.push(beta);
        lambda_shifts.push(-b1.hypot(b2));
        c.push((-target.s + tau_star[i] - beta).rem_euclid(2.0 * PI));
    }

    let v_coeffs = v_coefficients(&h, &lambda_shifts, delta3_budget.max(1e-3));

    let row_scale = |m: &DMatrix<f64>| {
        let mut s = 1.0f64;
        for r in 0..m.nrows() {
            s *= m.row(r).norm();
        }
        s.max(1.0)
    };
    let already_good = h.determinant().abs() > opts.nondegen_tol * row_scale(&h);
    if already_good {
        return Ok(Stage2 {
            tau_star: tau_star.to_vec(),
            g_members,
            transforms,
            betas,
            c,
            lambda_shifts,
            delta3: 0.0,
            v_at_delta3: h.determinant(),
            v_coeffs,
            hessian_before: h.iter().copied().collect(),
            modes: Vec::new(),
            skipped: true,
        });
    }

    // geometric scan: the degree-n polynomial v has at most n roots, so some
    // candidate in the sequence clears the margin
    let mut accepted = None;
    for k in 0..20 {
        let delta3 = delta3_budget * 0.5f64.powi(k);
        let v = v_of(&h, &lambda_shifts, delta3);
        let mut shifted = h.clone();
        for (i, &l) in lambda_shifts.iter().enumerate() {
            shifted[(i, i)] += delta3 * l;
        }
        if v.abs() > opts.nondegen_tol * row_scale(&shifted) {
            accepted = Some((delta3, v));
            break;
        }
    }
    let (delta3, v_at_delta3) = accepted.ok_or_else(|| {
        Error::NumericalFailure("stage-two determinant scan exhausted 20 candidates".into())
    })?;

    let mut modes = Vec::new();
    for i in 0..n {
        modes.extend(product_modes(&g_members[i], i, n, d, None, delta3, c[i]));
    }
    Ok(Stage2 {
        tau_star: tau_star.to_vec(),
        g_members,
        transforms,
        betas,
        c,
        lambda_shifts,
        delta3,
        v_at_delta3,
        v_coeffs,
        hessian_before: h.iter().copied().collect(),
        modes,
        skipped: false,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct H3bStage {
    pub f_member: AngularFn,
    /// Rotor frequencies `omega_i` at the target action.
    pub frequencies: Vec<f64>,
    pub a_coeffs: Vec<f64>,
    pub b_coeffs: Vec<f64>,
    pub alphas: Vec<f64>,
    pub c: Vec<f64>,
    pub c1: f64,
    pub delta: f64,
    /// Reduced-gradient achieved at the witness after the repair.
    pub achieved_grad_theta: Vec<f64>,
    pub modes: Vec<Mode>,
    pub skipped: bool,
}

/// Repairs action transversality at `(I-hat, theta-hat)` with
/// `delta F(q_1) sum_i cos(phi_i + c_i)`. Halves `delta` until the verified
/// post-repair gradient dominates its first-order prediction.
pub fn repair_h3b(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    branch: &CriticalBranch,
    i_hat: &[f64],
    theta_hat: &[f64],
    delta_budget: f64,
    opts: &CritOpts,
) -> Result<H3bStage> {
    if !(delta_budget > 0.0) {
        return Err(Error::InvalidInput(
            "transversality budget must be positive".into(),
        ));
    }
    let n = system.n_pendulums();
    let d = system.rotor_dim();
    let tau_star = refine_tau_star(system, orbits, branch, i_hat, theta_hat, None, opts)?;
    let omega = system.rotor.omega(i_hat);

    // choose F so the first-axis transform magnitude at |omega_1| is nonzero
    let orbit = &orbits[0];
    let mut chosen: Option<AngularFn> = None;
    let mut bar: Vec<(f64, f64)> = Vec::new();
    for f in repair_basis() {
        let mut ok = true;
        let mut this_bar = Vec::with_capacity(d);
        for &w in &omega {
            this_bar.push(fourier_transform_coeffs(orbit, &f, w.abs())?);
        }
        let (a1, b1) = this_bar[0];
        if a1.hypot(b1) <= BASIS_FLOOR {
            ok = false;
        }
        if ok {
            chosen = Some(f);
            bar = this_bar;
            break;
        }
    }
    let f_member = chosen.ok_or_else(|| {
        Error::RepairFailure(format!(
            "no basis member has a nonzero transform at frequency {} (resonant omega_1?)",
            omega[0]
        ))
    })?;

    // shift the plain transforms by tau*_1: the perturbation rides on
    // q_1^0(tau_1 + t) while the transform tables are centered at zero
    let mut a_coeffs = Vec::with_capacity(d);
    let mut b_coeffs = Vec::with_capacity(d);
    let mut alphas = Vec::with_capacity(d);
    for (j, &w) in omega.iter().enumerate() {
        // sin(w t) transforms pick a sign flip for negative frequencies
        let (abar, bbar_raw) = bar[j];
        let bbar = if w < 0.0 { -bbar_raw } else { bbar_raw };
        let (sw, cw) = (w * tau_star[0]).sin_cos();
        let a = cw * abar + sw * bbar;
        let b = cw * bbar - sw * abar;
        a_coeffs.push(a);
        b_coeffs.push(b);
        alphas.push(if a.hypot(b) > 1e-14 { b.atan2(a) } else { 0.0 });
    }
    let c1 = a_coeffs[0].hypot(b_coeffs[0]);
    let mut c = Vec::with_capacity(d);
    for j in 0..d {
        let cj = if j == 0 {
            -theta_hat[0] - alphas[0] + PI / 2.0
        } else {
            -theta_hat[j] - alphas[j]
        };
        c.push(cj.rem_euclid(2.0 * PI));
    }

    // verify-and-halve on the actual post-repair reduced gradient
    let mut delta = delta_budget;
    for _ in 0..10 {
        let mut modes = Vec::new();
        for (j, &cj) in c.iter().enumerate() {
            modes.extend(product_modes(&f_member, 0, n, d, Some(j), delta, cj));
        }
        let repaired = system.with_extra_modes(&modes);
        let base = BasePoint {
            i_act: i_hat.to_vec(),
            phi: theta_hat.to_vec(),
            s: 0.0,
        };
        if let NewtonOutcome::Converged(pt) =
            newton_refine(&repaired, orbits, &base, &tau_star, opts)?
        {
            if pt.margin() > opts.nondegen_tol {
                let eval = melnikov(
                    &repaired,
                    orbits,
                    &pt.tau_star,
                    i_hat,
                    theta_hat,
                    0.0,
                    opts.quad_tol,
                )?;
                let achieved: Vec<f64> = eval.grad_phi.clone();
                let norm = achieved.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
                if norm >= delta * c1 / 2.0 {
                    return Ok(H3bStage {
                        f_member,
                        frequencies: omega,
                        a_coeffs,
                        b_coeffs,
                        alphas,
                        c,
                        c1,
                        delta,
                        achieved_grad_theta: achieved,
                        modes,
                        skipped: false,
                    });
                }
            }
        }
        delta *= 0.5;
    }
    Err(Error::RepairFailure(
        "post-repair gradient never dominated its first-order prediction".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criticality::{continue_branch, find_critical_points, BranchBox};
    use crate::melnikov::test_systems::*;
    use approx::assert_relative_eq;

    // independent high-precision values of the classical-pendulum transforms
    const A_FREQ1: f64 = 2.7302778013234311; // -int (cos q0 - 1) cos t dt
    const A_FREQ2: f64 = 1.0881162199285327; // same at frequency 2
    const A2_SIN: f64 = 2.5040806625042952; // -int sin(q0) sin t dt = 2 pi / cosh(pi/2)

    #[test]
    fn transform_values() {
        let orbit = classical_orbit();
        let cosq = AngularFn {
            harmonic: 1,
            sine: false,
        };
        let (a1, a2) = fourier_transform_coeffs(&orbit, &cosq, 1.0).unwrap();
        assert_relative_eq!(a1, A_FREQ1, epsilon = 1e-9);
        assert!(a2.abs() < 1e-9, "sine transform vanishes by parity");
        // frequency zero: -int (cos q0 - 1) dt = 4
        let (z1, z2) = fourier_transform_coeffs(&orbit, &cosq, 0.0).unwrap();
        assert_relative_eq!(z1, 4.0, epsilon = 1e-9);
        assert!(z2.abs() < 1e-12);
        // sin q: cosine transform vanishes by parity, sine transform does not
        let sinq = AngularFn {
            harmonic: 1,
            sine: true,
        };
        let (s1, s2) = fourier_transform_coeffs(&orbit, &sinq, 1.0).unwrap();
        assert!(s1.abs() < 1e-9);
        assert_relative_eq!(s2, A2_SIN, epsilon = 1e-9);
        // constant member: integrand identically zero
        let constant = AngularFn {
            harmonic: 0,
            sine: false,
        };
        assert_eq!(
            fourier_transform_coeffs(&orbit, &constant, 1.0).unwrap(),
            (0.0, 0.0)
        );
    }

    #[test]
    fn phase_solver_hits_target() {
        for (r, s0, tau, alpha) in [
            (0.0, 0.0, 0.0, 0.0),
            (0.4, 1.2, -0.3, 0.7),
            (-0.9, 2.0, 0.5, -1.1),
        ] {
            let b = solve_phase(r, s0, tau, alpha);
            let arg: f64 = s0 - tau + b + alpha;
            assert_relative_eq!(arg.sin(), r, epsilon = 1e-12);
            assert!(arg.cos() >= 0.0, "root with nonnegative cosine expected");
        }
    }

    #[test]
    fn stage1_on_zero_perturbation() {
        let sys = system_with(vec![], 0.0);
        let orbits = [classical_orbit()];
        let target = BasePoint {
            i_act: vec![1.0],
            phi: vec![0.0],
            s: 0.0,
        };
        let opts = CritOpts::default();
        let delta2 = 0.025;
        let st = repair_h3a_stage1(&sys, &orbits, &target, delta2, &opts).unwrap();
        assert_eq!(
            st.f_members[0],
            AngularFn {
                harmonic: 1,
                sine: false
            }
        );
        assert!(st.tau_star[0].abs() < 1e-9, "zero map picks the origin");
        assert!(st.b[0].abs() < 1e-9 || (st.b[0] - 2.0 * PI).abs() < 1e-9);
        // the repaired system has an exact critical point at tau*
        let repaired = sys.with_extra_modes(&st.modes);
        let e = melnikov(&repaired, &orbits, &st.tau_star, &[1.0], &[0.0], 0.0, 1e-11).unwrap();
        assert!(
            e.grad_tau_norm1() < 1e-10,
            "residual {:e}",
            e.grad_tau_norm1()
        );
        assert_relative_eq!(e.hess_tau[(0, 0)], -delta2 * A_FREQ1, epsilon = 1e-8);
        // amplitude accounting: two modes of delta2/2 each
        assert_relative_eq!(
            st.modes.iter().map(|m| m.amplitude.abs()).sum::<f64>(),
            delta2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn stage1_zero_budget_rejected() {
        let sys = system_with(vec![], 0.0);
        let orbits = [classical_orbit()];
        let target = BasePoint {
            i_act: vec![1.0],
            phi: vec![0.0],
            s: 0.0,
        };
        assert!(matches!(
            repair_h3a_stage1(&sys, &orbits, &target, 0.0, &CritOpts::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    /// System whose map `tau -> L` has a degenerate critical point at
    /// `tau = s`: `H_1 = (cos q - 1)(cos t + w cos 2t)` with
    /// `w = -A(1) / (4 A(2))` kills the second derivative there.
    fn degenerate_system() -> SystemSpec {
        let w = -A_FREQ1 / (4.0 * A_FREQ2);
        let modes = vec![
            Mode {
                k: vec![1],
                l: vec![0],
                m: 1,
                amplitude: 0.5,
                phase: 0.0,
            },
            Mode {
                k: vec![1],
                l: vec![0],
                m: -1,
                amplitude: 0.5,
                phase: 0.0,
            },
            Mode {
                k: vec![0],
                l: vec![0],
                m: 1,
                amplitude: -1.0,
                phase: 0.0,
            },
            Mode {
                k: vec![1],
                l: vec![0],
                m: 2,
                amplitude: w / 2.0,
                phase: 0.0,
            },
            Mode {
                k: vec![1],
                l: vec![0],
                m: -2,
                amplitude: w / 2.0,
                phase: 0.0,
            },
            Mode {
                k: vec![0],
                l: vec![0],
                m: 2,
                amplitude: -w,
                phase: 0.0,
            },
        ];
        system_with(modes, 0.0)
    }

    #[test]
    fn stage2_restores_nondegeneracy() {
        let sys = degenerate_system();
        let orbits = [classical_orbit()];
        let target = BasePoint {
            i_act: vec![1.0],
            phi: vec![0.0],
            s: 0.0,
        };
        let opts = CritOpts::default();
        // tau = s = 0 is a critical point with vanishing second derivative
        let e0 = melnikov(&sys, &orbits, &[0.0], &[1.0], &[0.0], 0.0, 1e-11).unwrap();
        assert!(e0.grad_tau_norm1() < 1e-10);
        assert!(
            e0.hess_tau[(0, 0)].abs() < 1e-9,
            "hessian {:e}",
            e0.hess_tau[(0, 0)]
        );

        let st = repair_h3a_stage2(&sys, &orbits, &target, &[0.0], 0.05, &opts).unwrap();
        assert!(!st.skipped);
        assert!(st.delta3 > 0.0);
        // the tau-independent diagonal shift equals -|B| exactly at c_i:
        // cos(s0 - tau* + c_i + beta_i) = 1
        let arg: f64 = target.s - 0.0 + st.c[0] + st.betas[0];
        assert!((arg.cos() - 1.0).abs() < 1e-10);
        assert_relative_eq!(st.lambda_shifts[0], -A_FREQ1, epsilon = 1e-9);
        // post-repair Hessian clears the margin
        let repaired = sys.with_extra_modes(&st.modes);
        let e1 = melnikov(&repaired, &orbits, &[0.0], &[1.0], &[0.0], 0.0, 1e-11).unwrap();
        assert!(
            e1.grad_tau_norm1() < 1e-10,
            "repair must not move the critical point"
        );
        assert_relative_eq!(
            e1.hess_tau[(0, 0)],
            st.delta3 * st.lambda_shifts[0],
            epsilon = 1e-8
        );
    }

    #[test]
    fn stage2_skips_when_already_nondegenerate() {
        let sys = single_harmonic_system();
        let orbits = [classical_orbit()];
        let target = BasePoint {
            i_act: vec![1.0],
            phi: vec![0.0],
            s: 0.0,
        };
        let st =
            repair_h3a_stage2(&sys, &orbits, &target, &[0.0], 0.05, &CritOpts::default()).unwrap();
        assert!(st.skipped);
        assert_eq!(st.delta3, 0.0);
        assert!(st.modes.is_empty());
        // construction data still present and verified
        assert_relative_eq!(st.lambda_shifts[0], -A_FREQ1, epsilon = 1e-9);
        assert_relative_eq!(st.v_coeffs[0], -A_FREQ1, epsilon = 1e-8); // v(0) = det H = -A
        assert_relative_eq!(st.v_coeffs[1], st.lambda_shifts[0], epsilon = 1e-8);
    }

    #[test]
    fn v_polynomial_matches_determinant() {
        // two pendulums: v(x) = det(H + x diag(lambda)) has degree 2 with
        // leading coefficient lambda_1 lambda_2
        let sys = SystemSpec::new(
            crate::model::RotorSpec::quadratic(1),
            vec![
                crate::model::PendulumSpec::new(crate::model::classical_potential(), 1.0).unwrap(),
                crate::model::PendulumSpec::new(crate::model::classical_potential(), 1.0).unwrap(),
            ],
            crate::model::PerturbationSpec {
                modes: vec![
                    Mode {
                        k: vec![1, 0],
                        l: vec![0],
                        m: 1,
                        amplitude: 0.4,
                        phase: 0.1,
                    },
                    Mode {
                        k: vec![0, 1],
                        l: vec![0],
                        m: 1,
                        amplitude: 0.3,
                        phase: 0.9,
                    },
                    Mode {
                        k: vec![1, 1],
                        l: vec![0],
                        m: 1,
                        amplitude: 0.2,
                        phase: 0.4,
                    },
                ],
            },
            0.0,
        )
        .unwrap();
        let orbits = [classical_orbit(), classical_orbit()];
        let target = BasePoint {
            i_act: vec![1.0],
            phi: vec![0.3],
            s: 0.2,
        };
        let opts = CritOpts::default();
        let (good, _) = find_critical_points(&sys, &orbits, &[1.0], &[0.3], 0.2, &opts).unwrap();
        let tau = good[0].tau_star.clone();
        let st = repair_h3a_stage2(&sys, &orbits, &target, &tau, 0.05, &opts).unwrap();
        assert_eq!(st.v_coeffs.len(), 3);
        let lead = st.lambda_shifts[0] * st.lambda_shifts[1];
        assert_relative_eq!(st.v_coeffs[2], lead, epsilon = 1e-8);
        // evaluate the polynomial at a fresh node and compare with the det
        let h = DMatrix::from_row_slice(2, 2, &st.hessian_before);
        let x = 0.0173;
        let direct = v_of(&h, &st.lambda_shifts, x);
        let poly: f64 = st
            .v_coeffs
            .iter()
            .enumerate()
            .map(|(j, &cj)| cj * x.powi(j as i32))
            .sum();
        assert!((direct - poly).abs() < 1e-8, "{direct} vs {poly}");
    }

    #[test]
    fn h3b_repair_on_time_harmonic_system() {
        // grad_theta vanishes identically; the repair must produce a
        // post-repair gradient of magnitude >= delta C1 / 2 with
        // C1 = A(1) at omega(1) = 1
        let sys = single_harmonic_system();
        let orbits = [classical_orbit()];
        let opts = CritOpts::default();
        let (good, _) = find_critical_points(&sys, &orbits, &[1.0], &[0.0], 0.0, &opts).unwrap();
        let start = good.iter().find(|p| p.tau_star[0].abs() < 1e-8).unwrap();
        let bbox = BranchBox::centered(&start.base_point, 0.2, 0.5);
        let branch = continue_branch(&sys, &orbits, start, bbox, vec![3, 3, 1], &opts).unwrap();

        let st = repair_h3b(&sys, &orbits, &branch, &[1.0], &[0.0], 0.025, &opts).unwrap();
        assert!(!st.skipped);
        assert_relative_eq!(st.c1, A_FREQ1, epsilon = 1e-8);
        let norm = st
            .achieved_grad_theta
            .iter()
            .fold(0.0f64, |a, &x| a.max(x.abs()));
        assert!(norm >= st.delta * st.c1 / 2.0);
        assert!(st.delta <= 0.025);
        // amplitude accounting: d = 1, two modes of delta/2
        assert_relative_eq!(
            st.modes.iter().map(|m| m.amplitude.abs()).sum::<f64>(),
            st.delta,
            epsilon = 1e-15
        );
    }
}

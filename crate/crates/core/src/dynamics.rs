//! Full integration of Hamilton's equations for `H_eps`, action-drift
//! diagnostics, homoclinic-excursion detection, and the per-excursion action
//! jump measured against the first-order scattering prediction.

use crate::criticality::{CritOpts, CriticalBranch};
use crate::error::{Error, Result};
use crate::homoclinic::HomoclinicOrbit;
use crate::integrate::{dop853, Dop853Opts, OdeRhs, StepControl};
use crate::model::SystemSpec;
use crate::reduced::{reduced_eval, refine_tau_star};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Phase-space point of the full system (extended action `a` conjugate to
/// time tracks the autonomized energy).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub i_act: Vec<f64>,
    pub phi: Vec<f64>,
    pub a: f64,
}

impl FullState {
    pub fn on_cylinder(i_act: Vec<f64>, phi: Vec<f64>, n: usize) -> Self {
        Self {
            p: vec![0.0; n],
            q: vec![0.0; n],
            i_act,
            phi,
            a: 0.0,
        }
    }

    fn pack(&self) -> Vec<f64> {
        let mut y = self.p.clone();
        y.extend_from_slice(&self.q);
        y.extend_from_slice(&self.i_act);
        y.extend_from_slice(&self.phi);
        y.push(self.a);
        y
    }

    fn unpack(n: usize, d: usize, y: &[f64]) -> Self {
        Self {
            p: y[..n].to_vec(),
            q: y[n..2 * n].to_vec(),
            i_act: y[2 * n..2 * n + d].to_vec(),
            phi: y[2 * n + d..2 * n + 2 * d].to_vec(),
            a: y[2 * n + 2 * d],
        }
    }
}

struct FullRhs<'a> {
    system: &'a SystemSpec,
    grad_q: Vec<f64>,
    grad_phi: Vec<f64>,
}

impl<'a> FullRhs<'a> {
    fn new(system: &'a SystemSpec) -> Self {
        let n = system.n_pendulums();
        let d = system.rotor_dim();
        Self {
            system,
            grad_q: vec![0.0; n],
            grad_phi: vec![0.0; d],
        }
    }
}

impl OdeRhs for FullRhs<'_> {
    fn dim(&self) -> usize {
        2 * self.system.n_pendulums() + 2 * self.system.rotor_dim() + 1
    }

    fn eval(&mut self, t: f64, y: &[f64], dydt: &mut [f64]) {
        let n = self.system.n_pendulums();
        let d = self.system.rotor_dim();
        let eps = self.system.epsilon;
        let (p, rest) = y.split_at(n);
        let (q, rest) = rest.split_at(n);
        let (i_act, rest) = rest.split_at(d);
        let phi = &rest[..d];
        self.system.grad_h1_q(q, phi, t, &mut self.grad_q);
        self.system.grad_h1_phi(q, phi, t, &mut self.grad_phi);
        for (j, pen) in self.system.pendulums.iter().enumerate() {
            dydt[j] = -pen.sign * pen.fourier_coeffs.d1(q[j]) - eps * self.grad_q[j];
            dydt[n + j] = pen.sign * p[j];
        }
        let omega = self.system.rotor.omega(i_act);
        for j in 0..d {
            dydt[2 * n + j] = -eps * self.grad_phi[j];
            dydt[2 * n + d + j] = omega[j];
        }
        dydt[2 * n + 2 * d] = -eps * self.system.dh1_dt(q, phi, t);
    }
}

/// Extended autonomized energy `A + H_eps(p, q, I, phi, t)`.
pub fn extended_energy(system: &SystemSpec, state: &FullState, t: f64) -> Result<f64> {
    let h0 = system.eval_h0(&state.p, &state.q, &state.i_act)?;
    let h1 = system.eval_h1(&state.q, &state.phi, t)?;
    Ok(state.a + h0 + system.epsilon * h1)
}

/// Distance of the pendulum block to the saddle set `p = 0, q = 0 mod 2 pi`.
pub fn saddle_distance(p: &[f64], q: &[f64]) -> f64 {
    let mut sq = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let r = qi - 2.0 * PI * (qi / (2.0 * PI)).round();
        sq += pi * pi + r * r;
    }
    sq.sqrt()
}

fn saddle_dist_sq_and_rate(n: usize, y: &[f64], f: &[f64]) -> (f64, f64) {
    let mut sq = 0.0;
    let mut rate = 0.0;
    for j in 0..n {
        let p = y[j];
        let q = y[n + j];
        let r = q - 2.0 * PI * (q / (2.0 * PI)).round();
        sq += p * p + r * r;
        rate += 2.0 * p * f[j] + 2.0 * r * f[n + j];
    }
    (sq, rate)
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// Decimated samples `(t, state)`.
    pub samples: Vec<(f64, FullState)>,
    /// `sup_t |I(t) - I(0)|` over all accepted steps (not just samples).
    pub drift: f64,
    /// Max drift of the autonomized invariant `A + H_eps`.
    pub energy_drift: f64,
    /// States interpolated at the section times `t = 2 pi k`.
    pub section_events: Vec<(f64, FullState)>,
    pub steps: usize,
    pub exited: bool,
}

impl TrajectoryRecord {
    pub fn end(&self) -> &(f64, FullState) {
        self.samples.last().expect("at least the initial sample")
    }

    pub fn to_csv(&self) -> String {
        let (n, d) = {
            let s = &self.samples[0].1;
            (s.p.len(), s.i_act.len())
        };
        let mut hdr = vec!["t".to_string()];
        hdr.extend((0..n).map(|j| format!("p{j}")));
        hdr.extend((0..n).map(|j| format!("q{j}")));
        hdr.extend((0..d).map(|j| format!("I{j}")));
        hdr.extend((0..d).map(|j| format!("phi{j}")));
        let mut out = hdr.join(",");
        out.push('\n');
        for (t, s) in &self.samples {
            let mut row = vec![format!("{t:.16e}")];
            row.extend(s.p.iter().map(|v| format!("{v:.16e}")));
            row.extend(s.q.iter().map(|v| format!("{v:.16e}")));
            row.extend(s.i_act.iter().map(|v| format!("{v:.16e}")));
            row.extend(s.phi.iter().map(|v| format!("{v:.16e}")));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn hermite_interp(
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    t1: f64,
    y1: &[f64],
    f1: &[f64],
    t: f64,
) -> Vec<f64> {
    let h = t1 - t0;
    let u = (t - t0) / h;
    let u2 = u * u;
    let u3 = u2 * u;
    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    let h10 = u3 - 2.0 * u2 + u;
    let h01 = -2.0 * u3 + 3.0 * u2;
    let h11 = u3 - u2;
    y0.iter()
        .zip(f0)
        .zip(y1.iter().zip(f1))
        .map(|((&y0j, &f0j), (&y1j, &f1j))| h00 * y0j + h10 * h * f0j + h01 * y1j + h11 * h * f1j)
        .collect()
}

const BLOWUP_LIMIT: f64 = 1e8;

/// Integrates the full Hamilton equations from `initial` at time `t0` to
/// `t_end`. Samples are decimated to roughly `stride` accepted steps apart.
pub fn integrate_full(
    system: &SystemSpec,
    initial: &FullState,
    t0: f64,
    t_end: f64,
    tol: f64,
    stride: usize,
) -> Result<TrajectoryRecord> {
    let n = system.n_pendulums();
    let d = system.rotor_dim();
    let mut rhs = FullRhs::new(system);
    let y0 = initial.pack();
    let opts = Dop853Opts {
        rtol: tol,
        atol: tol,
        max_step: 1.0,
        ..Default::default()
    };
    let e0 = extended_energy(system, initial, t0)?;
    let i0 = initial.i_act.clone();

    let mut samples = vec![(t0, initial.clone())];
    let mut section_events = Vec::new();
    let mut drift = 0.0f64;
    let mut energy_drift = 0.0f64;
    let mut exited = false;
    let stride = stride.max(1);
    let mut count = 0usize;
    let mut prev_t = t0;
    let mut prev_y = y0.clone();
    let mut prev_f = vec![0.0; y0.len()];
    {
        let mut tmp = vec![0.0; y0.len()];
        rhs.eval(t0, &y0, &mut tmp);
        prev_f.copy_from_slice(&tmp);
    }
    let dir = (t_end - t0).signum();

    let result = dop853(&mut rhs, t0, &y0, t_end, &opts, &mut |t, y, f| {
        count += 1;
        let state = FullState::unpack(n, d, y);
        let mut local_drift = 0.0f64;
        for (a, b) in state.i_act.iter().zip(&i0) {
            local_drift = local_drift.max((a - b).abs());
        }
        drift = drift.max(local_drift);
        if let Ok(e) = extended_energy(system, &state, t) {
            energy_drift = energy_drift.max((e - e0).abs());
        }
        // section s = 0 mod 2 pi: with s = t the events are t = 2 pi k
        let k_prev = (prev_t / (2.0 * PI) * dir).floor();
        let k_now = (t / (2.0 * PI) * dir).floor();
        if k_now > k_prev {
            let mut k = k_prev + 1.0;
            while k <= k_now {
                let te = 2.0 * PI * k * dir;
                if (te - prev_t) * dir >= 0.0 && (t - te) * dir >= 0.0 {
                    let ye = hermite_interp(prev_t, &prev_y, &prev_f, t, y, f, te);
                    section_events.push((te, FullState::unpack(n, d, &ye)));
                }
                k += 1.0;
            }
        }
        if count % stride == 0 {
            samples.push((t, state.clone()));
        }
        prev_t = t;
        prev_y.copy_from_slice(y);
        prev_f.copy_from_slice(f);
        if y.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
            exited = true;
            return StepControl::Stop;
        }
        StepControl::Continue
    });
    let (tf, yf, steps) = result?;
    if samples.last().map(|(t, _)| *t != tf).unwrap_or(true) {
        samples.push((tf, FullState::unpack(n, d, &yf)));
    }
    Ok(TrajectoryRecord {
        samples,
        drift,
        energy_drift,
        section_events,
        steps,
        exited,
    })
}

/// One fixed-step Strang-splitting (kick-drift-kick) pass: second order and
/// symplectic for the separable `H_eps` since `H_1` carries no `(p, I)`
/// dependence. Intended for long runs where energy behavior matters more
/// than local accuracy.
pub fn integrate_full_symplectic(
    system: &SystemSpec,
    initial: &FullState,
    t0: f64,
    t_end: f64,
    step: f64,
    stride: usize,
) -> Result<TrajectoryRecord> {
    if !(step > 0.0) {
        return Err(Error::InvalidInput(
            "symplectic step must be positive".into(),
        ));
    }
    let n = system.n_pendulums();
    let d = system.rotor_dim();
    let eps = system.epsilon;
    let n_steps = ((t_end - t0).abs() / step).round().max(1.0) as usize;
    let h = (t_end - t0) / n_steps as f64;
    let mut state = initial.clone();
    let mut t = t0;
    let e0 = extended_energy(system, initial, t0)?;
    let i0 = initial.i_act.clone();
    let mut grad_q = vec![0.0; n];
    let mut grad_phi = vec![0.0; d];
    let mut samples = vec![(t0, initial.clone())];
    let mut drift = 0.0f64;
    let mut energy_drift = 0.0f64;

    let kick = |state: &mut FullState, t: f64, dt: f64, gq: &mut Vec<f64>, gp: &mut Vec<f64>| {
        system.grad_h1_q(&state.q, &state.phi, t, gq);
        system.grad_h1_phi(&state.q, &state.phi, t, gp);
        for (j, pen) in system.pendulums.iter().enumerate() {
            state.p[j] += dt * (-pen.sign * pen.fourier_coeffs.d1(state.q[j]) - eps * gq[j]);
        }
        for (i, &g) in state.i_act.iter_mut().zip(gp.iter()) {
            *i += dt * (-eps * g);
        }
        state.a += dt * (-eps * system.dh1_dt(&state.q, &state.phi, t));
    };

    for k in 0..n_steps {
        kick(&mut state, t, 0.5 * h, &mut grad_q, &mut grad_phi);
        let omega = system.rotor.omega(&state.i_act);
        for (j, pen) in system.pendulums.iter().enumerate() {
            state.q[j] += h * pen.sign * state.p[j];
        }
        for (phi, &w) in state.phi.iter_mut().zip(&omega) {
            *phi += h * w;
        }
        t += h;
        kick(&mut state, t, 0.5 * h, &mut grad_q, &mut grad_phi);
        for (a, b) in state.i_act.iter().zip(&i0) {
            drift = drift.max((a - b).abs());
        }
        if let Ok(e) = extended_energy(system, &state, t) {
            energy_drift = energy_drift.max((e - e0).abs());
        }
        if (k + 1) % stride.max(1) == 0 || k + 1 == n_steps {
            samples.push((t, state.clone()));
        }
    }
    Ok(TrajectoryRecord {
        samples,
        drift,
        energy_drift,
        section_events: Vec::new(),
        steps: n_steps,
        exited: false,
    })
}

#[derive(Debug, Clone)]
pub struct DynOpts {
    pub ode_tol: f64,
    /// Distance marking a full departure from the saddle neighborhood.
    pub departure_radius: f64,
    /// Gate below which a local minimum of the saddle distance counts as a
    /// return to the cylinder neighborhood.
    pub return_gate: f64,
    /// Excursion time cap as a multiple of `1 / lambda_min`.
    pub cap_factor: f64,
    /// Unstable-direction push for diffusion seeding, as a multiple of `eps`.
    pub eta_factor: f64,
}

impl Default for DynOpts {
    fn default() -> Self {
        Self {
            ode_tol: 1e-10,
            departure_radius: 0.5,
            return_gate: 0.5,
            cap_factor: 50.0,
            eta_factor: 10.0,
        }
    }
}

struct ReturnPoint {
    t: f64,
    state: FullState,
    dist: f64,
}

type StepPair = (f64, Vec<f64>, Vec<f64>, f64, Vec<f64>, Vec<f64>);

/// Integrates in one time direction until the first local minimum of the
/// saddle distance below `gate` (having first departed past it when starting
/// inside). Measurement-grade accuracy is not needed for the stop time; the
/// action reading is insensitive to it near the minimum.
fn run_to_return(
    system: &SystemSpec,
    initial: &FullState,
    t0: f64,
    direction: f64,
    gate: f64,
    cap: f64,
    tol: f64,
) -> Result<ReturnPoint> {
    let n = system.n_pendulums();
    let d = system.rotor_dim();
    let mut rhs = FullRhs::new(system);
    let y0 = initial.pack();
    let opts = Dop853Opts {
        rtol: tol,
        atol: tol,
        max_step: 0.25,
        ..Default::default()
    };
    let t_end = t0 + direction * cap;

    let mut prev: Option<(f64, Vec<f64>, Vec<f64>, f64)> = None; // t, y, f, rate
    let mut hit: Option<StepPair> = None;
    let _ = dop853(&mut rhs, t0, &y0, t_end, &opts, &mut |t, y, f| {
        let (sq, rate_fwd) = saddle_dist_sq_and_rate(n, y, f);
        // rate along the integration direction
        let rate = rate_fwd * direction;
        if let Some((pt, py, pf, prate)) = prev.take() {
            if prate < 0.0 && rate >= 0.0 && sq.sqrt() < gate {
                hit = Some((pt, py, pf, t, y.to_vec(), f.to_vec()));
                return StepControl::Stop;
            }
            let _ = (py, pf);
        }
        prev = Some((t, y.to_vec(), f.to_vec(), rate));
        StepControl::Continue
    })?;

    let (t_a, y_a, f_a, t_b, y_b, f_b) = match hit {
        Some(h) => h,
        None => return Err(Error::ExcursionFailure { cap }),
    };
    // locate the minimum of the interpolated squared distance on [t_a, t_b]
    let mut best_t = t_a;
    let mut best_sq = f64::INFINITY;
    let mut best_y = y_a.clone();
    let m = 64;
    for j in 0..=m {
        let t = t_a + (t_b - t_a) * j as f64 / m as f64;
        let y = hermite_interp(t_a, &y_a, &f_a, t_b, &y_b, &f_b, t);
        let mut sq = 0.0;
        for jj in 0..n {
            let p = y[jj];
            let q = y[n + jj];
            let r = q - 2.0 * PI * (q / (2.0 * PI)).round();
            sq += p * p + r * r;
        }
        if sq < best_sq {
            best_sq = sq;
            best_t = t;
            best_y = y;
        }
    }
    Ok(ReturnPoint {
        t: best_t,
        state: FullState::unpack(n, d, &best_y),
        dist: best_sq.sqrt(),
    })
}

/// Initial condition on the unperturbed homoclinic at `tau*`, with the
/// pendulum angles pushed inward by `eta`.
pub fn seed_near_homoclinic(
    orbits: &[HomoclinicOrbit],
    tau_star: &[f64],
    i0: &[f64],
    phi0: &[f64],
    eta: f64,
) -> FullState {
    let mut p = Vec::with_capacity(orbits.len());
    let mut q = Vec::with_capacity(orbits.len());
    for (orbit, &tau) in orbits.iter().zip(tau_star) {
        let (qv, pv) = orbit.value(tau);
        p.push(pv);
        q.push(qv - eta);
    }
    FullState {
        p,
        q,
        i_act: i0.to_vec(),
        phi: phi0.to_vec(),
        a: 0.0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpMeasurement {
    pub delta_i: Vec<f64>,
    pub predicted: Vec<f64>,
    pub epsilon: f64,
    pub t_forward: f64,
    pub t_backward: f64,
    pub dist_forward: f64,
    pub dist_backward: f64,
}

/// Launches a trajectory on the unperturbed homoclinic at the witness point,
/// integrates through one excursion in both time directions, and returns the
/// measured action change against `eps * dL*/dtheta`.
#[allow(clippy::too_many_arguments)]
pub fn measure_homoclinic_jump(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    branch: &CriticalBranch,
    witness_i: &[f64],
    witness_theta: &[f64],
    epsilon: f64,
    eta: f64,
    dyn_opts: &DynOpts,
    crit_opts: &CritOpts,
) -> Result<JumpMeasurement> {
    let tau_star = refine_tau_star(
        system,
        orbits,
        branch,
        witness_i,
        witness_theta,
        None,
        crit_opts,
    )?;
    let eval = reduced_eval(system, orbits, branch, witness_i, witness_theta, crit_opts)?;
    let predicted: Vec<f64> = eval.grad_theta.iter().map(|g| epsilon * g).collect();

    let mut sys = system.clone();
    sys.epsilon = epsilon;
    let seed = seed_near_homoclinic(orbits, &tau_star, witness_i, witness_theta, eta);
    if epsilon == 0.0 {
        return Ok(JumpMeasurement {
            delta_i: vec![0.0; witness_i.len()],
            predicted,
            epsilon,
            t_forward: 0.0,
            t_backward: 0.0,
            dist_forward: 0.0,
            dist_backward: 0.0,
        });
    }
    let lam_min = orbits
        .iter()
        .map(|o| o.lambda)
        .fold(f64::INFINITY, f64::min);
    let cap = dyn_opts.cap_factor / lam_min;
    let fwd = run_to_return(
        &sys,
        &seed,
        0.0,
        1.0,
        dyn_opts.return_gate,
        cap,
        dyn_opts.ode_tol,
    )?;
    let back = run_to_return(
        &sys,
        &seed,
        0.0,
        -1.0,
        dyn_opts.return_gate,
        cap,
        dyn_opts.ode_tol,
    )?;
    let delta_i: Vec<f64> = fwd
        .state
        .i_act
        .iter()
        .zip(&back.state.i_act)
        .map(|(a, b)| a - b)
        .collect();
    Ok(JumpMeasurement {
        delta_i,
        predicted,
        epsilon,
        t_forward: fwd.t,
        t_backward: back.t,
        dist_forward: fwd.dist,
        dist_backward: back.dist,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionRecord {
    pub epsilon: f64,
    pub t_end: f64,
    pub drift: f64,
    pub energy_drift: f64,
    pub n_excursions: usize,
    /// Net action change at each detected return (norm).
    pub excursion_jumps: Vec<f64>,
    pub i_initial: Vec<f64>,
    pub i_final: Vec<f64>,
    /// Decimated trajectory samples.
    #[serde(skip)]
    pub samples: Vec<(f64, FullState)>,
}

/// Long multi-excursion run: integrates from an eta-pushed homoclinic seed,
/// counts excursions (local minima of the saddle distance below the gate) and
/// records the action increments between consecutive returns.
#[allow(clippy::too_many_arguments)]
pub fn measure_diffusion(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    branch: &CriticalBranch,
    witness_i: &[f64],
    witness_theta: &[f64],
    epsilon: f64,
    t_end: f64,
    stride: usize,
    dyn_opts: &DynOpts,
    crit_opts: &CritOpts,
) -> Result<DiffusionRecord> {
    if epsilon == 0.0 {
        return Err(Error::InvalidInput(
            "diffusion run needs a nonzero epsilon".into(),
        ));
    }
    let tau_star = refine_tau_star(
        system,
        orbits,
        branch,
        witness_i,
        witness_theta,
        None,
        crit_opts,
    )?;
    let mut sys = system.clone();
    sys.epsilon = epsilon;
    let eta = dyn_opts.eta_factor * epsilon;
    let seed = seed_near_homoclinic(orbits, &tau_star, witness_i, witness_theta, eta);

    let n = sys.n_pendulums();
    let mut rhs = FullRhs::new(&sys);
    let y0 = seed.pack();
    let opts = Dop853Opts {
        rtol: dyn_opts.ode_tol,
        atol: dyn_opts.ode_tol,
        max_step: 0.25,
        ..Default::default()
    };
    let e0 = extended_energy(&sys, &seed, 0.0)?;
    let i0 = seed.i_act.clone();
    let d = sys.rotor_dim();

    let mut drift = 0.0f64;
    let mut energy_drift = 0.0f64;
    let mut prev_rate: Option<f64> = None;
    let mut last_return_i: Vec<f64> = i0.clone();
    let mut jumps = Vec::new();
    let gate = dyn_opts.return_gate;
    let mut i_final = i0.clone();
    let mut samples = vec![(0.0, seed.clone())];
    let stride = stride.max(1);
    let mut count = 0usize;
    dop853(&mut rhs, 0.0, &y0, t_end, &opts, &mut |t, y, f| {
        let state = FullState::unpack(n, d, y);
        count += 1;
        if count % stride == 0 {
            samples.push((t, state.clone()));
        }
        for (a, b) in state.i_act.iter().zip(&i0) {
            drift = drift.max((a - b).abs());
        }
        if let Ok(e) = extended_energy(&sys, &state, t) {
            energy_drift = energy_drift.max((e - e0).abs());
        }
        let (sq, rate) = saddle_dist_sq_and_rate(n, y, f);
        if let Some(pr) = prev_rate {
            if pr < 0.0 && rate >= 0.0 && sq.sqrt() < gate {
                let jump: f64 = state
                    .i_act
                    .iter()
                    .zip(&last_return_i)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                jumps.push(jump);
                last_return_i = state.i_act.clone();
            }
        }
        prev_rate = Some(rate);
        i_final = state.i_act;
        StepControl::Continue
    })?;
    Ok(DiffusionRecord {
        epsilon,
        t_end,
        drift,
        energy_drift,
        n_excursions: jumps.len(),
        excursion_jumps: jumps,
        i_initial: i0,
        i_final,
        samples,
    })
}

impl DiffusionRecord {
    pub fn trajectory_csv(&self) -> String {
        let (n, d) = {
            let s = &self.samples[0].1;
            (s.p.len(), s.i_act.len())
        };
        let mut hdr = vec!["t".to_string()];
        hdr.extend((0..n).map(|j| format!("p{j}")));
        hdr.extend((0..n).map(|j| format!("q{j}")));
        hdr.extend((0..d).map(|j| format!("I{j}")));
        hdr.extend((0..d).map(|j| format!("phi{j}")));
        let mut out = hdr.join(",");
        out.push('\n');
        for (t, s) in &self.samples {
            let mut row = vec![format!("{t:.16e}")];
            row.extend(s.p.iter().map(|v| format!("{v:.16e}")));
            row.extend(s.q.iter().map(|v| format!("{v:.16e}")));
            row.extend(s.i_act.iter().map(|v| format!("{v:.16e}")));
            row.extend(s.phi.iter().map(|v| format!("{v:.16e}")));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criticality::{continue_branch, find_critical_points, BranchBox};
    use crate::melnikov::test_systems::*;
    use approx::assert_relative_eq;

    fn unperturbed() -> SystemSpec {
        system_with(vec![], 0.0)
    }

    fn two_harmonic_eps(eps: f64) -> SystemSpec {
        let mut modes = single_harmonic_modes();
        modes.extend(phi_harmonic_modes());
        system_with(modes, eps)
    }

    #[test]
    fn cylinder_motion_is_linear_when_unperturbed() {
        // start on the cylinder p = q = 0: phi(t) = phi0 + omega(I0) t
        let sys = unperturbed();
        let init = FullState::on_cylinder(vec![0.7], vec![0.3], 1);
        let rec = integrate_full(&sys, &init, 0.0, 12.0, 1e-11, 1).unwrap();
        let (tf, end) = rec.end();
        assert!(!rec.exited);
        assert_relative_eq!(end.phi[0], 0.3 + 0.7 * tf, epsilon = 1e-9);
        assert!(end.p[0].abs() < 1e-12 && end.q[0].abs() < 1e-12);
        assert!(rec.drift < 1e-12);
    }

    #[test]
    fn separatrix_tracked_by_full_integration() {
        // eps = 0 from the homoclinic at tau = 0: (p, q) follows orbit.value
        let sys = unperturbed();
        let orbit = classical_orbit();
        let (q0, p0) = orbit.value(-10.0);
        let init = FullState {
            p: vec![p0],
            q: vec![q0],
            i_act: vec![1.0],
            phi: vec![0.0],
            a: 0.0,
        };
        let rec = integrate_full(&sys, &init, -10.0, 10.0, 1e-12, 1).unwrap();
        let mut max_dev = 0.0f64;
        for (t, s) in &rec.samples {
            let (qr, pr) = orbit.value(*t);
            max_dev = max_dev.max((s.q[0] - qr).abs()).max((s.p[0] - pr).abs());
        }
        assert!(max_dev < 1e-6, "deviation from separatrix {max_dev:e}");
        assert!(rec.drift < 1e-12, "action moved in the unperturbed system");
    }

    #[test]
    fn conservation_unperturbed_long_run() {
        let sys = unperturbed();
        let init = FullState {
            p: vec![0.4],
            q: vec![1.2],
            i_act: vec![0.9],
            phi: vec![0.1],
            a: 0.0,
        };
        let tol = 1e-10;
        let rec = integrate_full(&sys, &init, 0.0, 100.0, tol, 16).unwrap();
        assert!(rec.drift < 100.0 * tol, "I drift {:e}", rec.drift);
        // pendulum energy conservation, checked across samples
        let e0 = 0.5 * 0.4 * 0.4 + (1.2f64).cos() - 1.0;
        let mut max_de = 0.0f64;
        for (_, s) in &rec.samples {
            let e = 0.5 * s.p[0] * s.p[0] + s.q[0].cos() - 1.0;
            max_de = max_de.max((e - e0).abs());
        }
        assert!(max_de < 100.0 * tol, "pendulum energy drift {max_de:e}");
    }

    #[test]
    fn extended_energy_conserved_with_perturbation() {
        let sys = two_harmonic_eps(1e-3);
        let init = FullState {
            p: vec![0.4],
            q: vec![1.2],
            i_act: vec![0.9],
            phi: vec![0.1],
            a: 0.0,
        };
        let tol = 1e-10;
        let rec = integrate_full(&sys, &init, 0.0, 50.0, tol, 8).unwrap();
        assert!(
            rec.energy_drift < 100.0 * tol,
            "extended energy drift {:e}",
            rec.energy_drift
        );
    }

    #[test]
    fn section_composition() {
        // integrating [0, 2pi] twice equals integrating [0, 4pi]
        let sys = two_harmonic_eps(1e-2);
        let init = FullState {
            p: vec![0.3],
            q: vec![2.0],
            i_act: vec![1.1],
            phi: vec![0.5],
            a: 0.0,
        };
        let two_pi = 2.0 * PI;
        let rec1 = integrate_full(&sys, &init, 0.0, two_pi, 1e-12, usize::MAX).unwrap();
        let mid = rec1.end().1.clone();
        let rec2 = integrate_full(&sys, &mid, two_pi, 2.0 * two_pi, 1e-12, usize::MAX).unwrap();
        let direct = integrate_full(&sys, &init, 0.0, 2.0 * two_pi, 1e-12, usize::MAX).unwrap();
        let a = &rec2.end().1;
        let b = &direct.end().1;
        for (x, y) in a.p.iter().zip(&b.p).chain(a.q.iter().zip(&b.q)) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        for (x, y) in a.i_act.iter().zip(&b.i_act).chain(a.phi.iter().zip(&b.phi)) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn section_events_recorded() {
        let sys = unperturbed();
        let init = FullState::on_cylinder(vec![1.0], vec![0.0], 1);
        let rec = integrate_full(&sys, &init, 0.0, 20.0, 1e-10, 4).unwrap();
        // t = 2pi and t = 4pi within [0, 20]
        assert_eq!(rec.section_events.len(), 3);
        assert_relative_eq!(rec.section_events[0].0, 2.0 * PI, epsilon = 1e-12);
        // phi at the event should equal omega * t mod nothing (unwrapped)
        assert_relative_eq!(rec.section_events[0].1.phi[0], 2.0 * PI, epsilon = 1e-8);
    }

    #[test]
    fn symplectic_splitting_energy_behavior() {
        let sys = two_harmonic_eps(1e-3);
        let init = FullState {
            p: vec![0.4],
            q: vec![1.2],
            i_act: vec![0.9],
            phi: vec![0.1],
            a: 0.0,
        };
        let rec = integrate_full_symplectic(&sys, &init, 0.0, 200.0, 5e-3, 1000).unwrap();
        // second-order splitting: bounded oscillation ~ h^2 rather than drift
        assert!(
            rec.energy_drift < 1e-4,
            "splitting energy drift {:e}",
            rec.energy_drift
        );
        let rec2 = integrate_full_symplectic(&sys, &init, 0.0, 200.0, 2.5e-3, 1000).unwrap();
        let ratio = rec.energy_drift / rec2.energy_drift;
        assert!(ratio > 2.0 && ratio < 8.0, "h^2 scaling ratio {ratio}");
    }

    fn jump_branch(
        sys: &SystemSpec,
        orbits: &[crate::homoclinic::HomoclinicOrbit],
    ) -> crate::criticality::CriticalBranch {
        let opts = CritOpts::default();
        let (good, _) = find_critical_points(sys, orbits, &[1.0], &[1.0], 0.0, &opts).unwrap();
        let start = good
            .iter()
            .find(|p| (p.tau_star[0] - 0.5).abs() < 0.3)
            .unwrap();
        let bbox = BranchBox::centered(&start.base_point, 0.2, 0.5);
        continue_branch(sys, orbits, start, bbox, vec![3, 3, 1], &opts).unwrap()
    }

    #[test]
    fn jump_zero_epsilon() {
        let sys = two_harmonic_eps(0.0);
        let orbits = [classical_orbit()];
        let branch = jump_branch(&sys, &orbits);
        let m = measure_homoclinic_jump(
            &sys,
            &orbits,
            &branch,
            &[1.0],
            &[1.0],
            0.0,
            0.0,
            &DynOpts::default(),
            &CritOpts::default(),
        )
        .unwrap();
        assert_eq!(m.delta_i[0], 0.0);
    }

    #[test]
    fn jump_matches_scattering_prediction_first_order() {
        // |dI/eps - dL*/dtheta| halves as eps halves (slope ~ 1)
        let sys = two_harmonic_eps(0.0);
        let orbits = [classical_orbit()];
        let branch = jump_branch(&sys, &orbits);
        let crit = CritOpts::default();
        let dyn_opts = DynOpts {
            ode_tol: 1e-11,
            ..Default::default()
        };
        let mut errs = Vec::new();
        for eps in [1e-2, 2.5e-3] {
            let m = measure_homoclinic_jump(
                &sys,
                &orbits,
                &branch,
                &[1.0],
                &[1.0],
                eps,
                0.0,
                &dyn_opts,
                &crit,
            )
            .unwrap();
            let err = (m.delta_i[0] / eps - m.predicted[0] / eps).abs();
            errs.push(err);
            // scipy prototype of this exact setup: dI/eps = -1.292 at 1e-2
            assert!(
                (m.delta_i[0] / eps - (-1.3089649)).abs() < 0.05,
                "dI/eps = {} at eps = {eps}",
                m.delta_i[0] / eps
            );
        }
        let slope = (errs[0] / errs[1]).ln() / 4.0f64.ln();
        assert!(
            (slope - 1.0).abs() < 0.2,
            "error slope {slope} (errs {errs:?})"
        );
    }

    #[test]
    fn jump_vanishes_to_second_order_at_zero_gradient_witness() {
        // at theta = 0 the reduced gradient vanishes; the measured jump must
        // then sit at the O(eps^2) remainder level (4 orders below the
        // generic eps * |dL*/dtheta| scale)
        let sys = two_harmonic_eps(0.0);
        let orbits = [classical_orbit()];
        let opts = CritOpts::default();
        let (good, _) = find_critical_points(&sys, &orbits, &[1.0], &[0.0], 0.0, &opts).unwrap();
        let start = good.iter().find(|p| p.tau_star[0].abs() < 1e-8).unwrap();
        let bbox = BranchBox::centered(&start.base_point, 0.2, 0.5);
        let branch = continue_branch(&sys, &orbits, start, bbox, vec![3, 3, 1], &opts).unwrap();
        let dyn_opts = DynOpts {
            ode_tol: 1e-12,
            ..Default::default()
        };
        for eps in [1e-2, 5e-3] {
            let m = measure_homoclinic_jump(
                &sys,
                &orbits,
                &branch,
                &[1.0],
                &[0.0],
                eps,
                0.0,
                &dyn_opts,
                &opts,
            )
            .unwrap();
            assert!(
                m.predicted[0].abs() < 1e-12,
                "gradient should vanish at theta = 0"
            );
            assert!(
                m.delta_i[0].abs() < 0.01 * eps * eps,
                "eps {eps}: jump {:e} above the second-order level",
                m.delta_i[0]
            );
        }
    }

    #[test]
    fn diffusion_run_detects_excursions() {
        let sys = two_harmonic_eps(0.0);
        let orbits = [classical_orbit()];
        let branch = jump_branch(&sys, &orbits);
        let rec = measure_diffusion(
            &sys,
            &orbits,
            &branch,
            &[1.0],
            &[1.0],
            1e-2,
            200.0,
            64,
            &DynOpts::default(),
            &CritOpts::default(),
        )
        .unwrap();
        assert!(rec.n_excursions >= 10, "excursions {}", rec.n_excursions);
        assert!(rec.drift > 0.0 && rec.drift < 0.5);
        // each recorded jump is at most a few times eps * max |dL*/dtheta|
        let cap = 4.0 * 1e-2 * AMP_1;
        for j in &rec.excursion_jumps {
            assert!(*j < cap, "jump {j} implausibly large");
        }
    }
}

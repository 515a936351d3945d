//! End-to-end hypothesis verification and repair, shared by the command-line
//! front end and the acceptance suite.

use crate::criticality::{
    continue_branch, find_critical_points, h3a_report, BasePoint, BranchBox, CritOpts,
    CriticalBranch, H3aReport,
};
use crate::error::{Error, Result};
use crate::homoclinic::{compute_separatrix_branch, default_t_span, Branch, HomoclinicOrbit};
use crate::melnikov::{check_shift_identity, melnikov};
use crate::model::SystemSpec;
use crate::reduced::{h3b_check, theta_grid_in_box, H3bReport};
use crate::repair::{repair_h3a_stage1, repair_h3a_stage2, repair_h3b, H3bStage, Stage1, Stage2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct PipelineOpts {
    pub crit: CritOpts,
    pub h3b_tol: f64,
    /// Box half-widths for the continuation region around the target.
    pub box_i_half: f64,
    pub box_angle_half: f64,
    /// Grid nodes per box axis.
    pub grid_steps: usize,
    /// Points of the `theta` transversality scan.
    pub theta_points: usize,
    /// Random shift-identity probes.
    pub shift_checks: usize,
    pub seed: u64,
    /// Separatrix data half-span (defaults per pendulum when zero).
    pub t_span: f64,
    pub orbit_tol: f64,
    /// Homoclinic loop per pendulum (empty picks the upper loop for all).
    pub branches: Vec<Branch>,
}

impl Default for PipelineOpts {
    fn default() -> Self {
        Self {
            crit: CritOpts::default(),
            h3b_tol: 1e-4,
            box_i_half: 0.2,
            box_angle_half: 0.5,
            grid_steps: 5,
            theta_points: 17,
            shift_checks: 100,
            seed: 7,
            t_span: 0.0,
            orbit_tol: 1e-10,
            branches: Vec::new(),
        }
    }
}

impl PipelineOpts {
    pub fn default_target(&self, system: &SystemSpec) -> BasePoint {
        BasePoint {
            i_act: vec![1.0; system.rotor_dim()],
            phi: vec![0.0; system.rotor_dim()],
            s: 0.0,
        }
    }
}

/// Separatrices for every pendulum, honoring the per-pendulum loop choice.
pub fn compute_orbits(system: &SystemSpec, opts: &PipelineOpts) -> Result<Vec<HomoclinicOrbit>> {
    if !opts.branches.is_empty() && opts.branches.len() != system.n_pendulums() {
        return Err(Error::DimensionMismatch {
            what: "branch choices",
            expected: system.n_pendulums(),
            got: opts.branches.len(),
        });
    }
    system
        .pendulums
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let span = if opts.t_span > 0.0 {
                opts.t_span
            } else {
                default_t_span(p.lambda())
            };
            let branch = opts.branches.get(j).copied().unwrap_or(Branch::Upper);
            compute_separatrix_branch(p, span, opts.orbit_tol, branch)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: String,
    pub pass: bool,
    pub lambdas: Vec<f64>,
    pub target: TargetSummary,
    pub h3a: Option<H3aReport>,
    pub h3a_failure: Option<String>,
    pub h3b: Option<H3bReport>,
    pub shift_identity_max: f64,
    pub shift_identity_bound: f64,
    pub degenerate_critical_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetSummary {
    pub i_act: Vec<f64>,
    pub phi: Vec<f64>,
    pub s: f64,
}

pub struct VerifyOutcome {
    pub report: VerifyReport,
    pub branch: Option<CriticalBranch>,
}

/// Runs the full hypothesis pipeline at `target`.
pub fn verify_model(
    system: &SystemSpec,
    target: &BasePoint,
    opts: &PipelineOpts,
) -> Result<VerifyOutcome> {
    let lambdas = system.characteristic_exponents()?;
    let orbits = compute_orbits(system, opts)?;
    let summary = TargetSummary {
        i_act: target.i_act.clone(),
        phi: target.phi.clone(),
        s: target.s,
    };

    // shift identity probes (deterministic under the seed)
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut shift_max = 0.0f64;
    let probe_tol = opts.crit.quad_tol;
    let n = system.n_pendulums();
    for _ in 0..opts.shift_checks {
        let tau: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let phi: Vec<f64> = (0..system.rotor_dim())
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        let s = rng.gen_range(0.0..std::f64::consts::TAU);
        let sigma = rng.gen_range(-2.0..2.0);
        let d = check_shift_identity(
            system,
            &orbits,
            &tau,
            &target.i_act,
            &phi,
            s,
            sigma,
            probe_tol,
        )?;
        shift_max = shift_max.max(d);
    }

    let (good, degen) = find_critical_points(
        system,
        &orbits,
        &target.i_act,
        &target.phi,
        target.s,
        &opts.crit,
    )?;
    if good.is_empty() {
        return Ok(VerifyOutcome {
            report: VerifyReport {
                schema: "meldrift.verify.v1".into(),
                pass: false,
                lambdas,
                target: summary,
                h3a: None,
                h3a_failure: Some(format!(
                    "no nondegenerate critical points at the target ({} degenerate)",
                    degen.len()
                )),
                h3b: None,
                shift_identity_max: shift_max,
                shift_identity_bound: 10.0 * probe_tol,
                degenerate_critical_points: degen.len(),
            },
            branch: None,
        });
    }
    let start = &good[0];
    let bbox = BranchBox::centered(&start.base_point, opts.box_i_half, opts.box_angle_half);
    let d = system.rotor_dim();
    let steps = vec![opts.grid_steps; 2 * d + 1];
    let branch = continue_branch(system, &orbits, start, bbox, steps, &opts.crit)?;
    let h3a = h3a_report(&branch, &opts.crit);

    let grid = theta_grid_in_box(&branch, opts.theta_points);
    let h3b = h3b_check(
        system,
        &orbits,
        &branch,
        &target.i_act,
        &grid,
        opts.h3b_tol,
        &opts.crit,
    )?;

    let pass = h3a.pass && h3b.pass;
    Ok(VerifyOutcome {
        report: VerifyReport {
            schema: "meldrift.verify.v1".into(),
            pass,
            lambdas,
            target: summary,
            h3a: Some(h3a),
            h3a_failure: None,
            h3b: Some(h3b),
            shift_identity_max: shift_max,
            shift_identity_bound: 10.0 * probe_tol,
            degenerate_critical_points: degen.len(),
        },
        branch: Some(branch),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairCertificate {
    pub schema: String,
    pub no_op: bool,
    pub delta_budget: f64,
    /// Sum of the absolute amplitudes of every added mode.
    pub added_amplitude_sum: f64,
    pub stage1: Option<Stage1>,
    pub stage2: Option<Stage2>,
    pub h3b_stage: Option<H3bStage>,
    pub post_verification: VerifyReport,
}

/// Repairs a model failing either hypothesis at the target, re-verifies, and
/// emits the certificate together with the repaired system.
pub fn repair_model(
    system: &SystemSpec,
    target: &BasePoint,
    delta_budget: f64,
    opts: &PipelineOpts,
) -> Result<(RepairCertificate, SystemSpec)> {
    if !(delta_budget > 0.0) {
        return Err(Error::InvalidInput("repair budget must be positive".into()));
    }
    let orbits = compute_orbits(system, opts)?;
    let n = system.n_pendulums();
    let d = system.rotor_dim();

    let (good, degen) = find_critical_points(
        system,
        &orbits,
        &target.i_act,
        &target.phi,
        target.s,
        &opts.crit,
    )?;

    // Stage one runs only when no critical point exists at all; a merely
    // degenerate critical point goes straight to stage two.
    let mut current = system.clone();
    let mut stage1: Option<Stage1> = None;
    let tau_star: Vec<f64>;
    if let Some(best) = good.first() {
        tau_star = best.tau_star.clone();
    } else if let Some(first_degen) = degen.first() {
        tau_star = first_degen.tau_star.clone();
    } else {
        let st = repair_h3a_stage1(
            &current,
            &orbits,
            target,
            delta_budget / (4.0 * n as f64),
            &opts.crit,
        )?;
        current = current.with_extra_modes(&st.modes);
        tau_star = st.tau_star.clone();
        stage1 = Some(st);
    }

    // Stage two always records its construction; it adds modes only when the
    // Hessian at tau* is actually degenerate.
    let st2 = repair_h3a_stage2(
        &current,
        &orbits,
        target,
        &tau_star,
        delta_budget / (4.0 * n as f64),
        &opts.crit,
    )?;
    if !st2.skipped {
        current = current.with_extra_modes(&st2.modes);
    }
    let stage2 = Some(st2);

    // Intermediate verification provides the branch for the transversality
    // stage from the repaired-H3a system.
    let mid = verify_model(&current, target, opts)?;
    let branch = mid.branch.as_ref().ok_or_else(|| {
        Error::RepairFailure("critical-point repair did not yield a continuable branch".into())
    })?;

    let mut h3b_stage: Option<H3bStage> = None;
    let h3b_ok = mid.report.h3b.as_ref().map(|r| r.pass).unwrap_or(false);
    if !h3b_ok {
        let theta_hat: Vec<f64> = target
            .phi
            .iter()
            .zip(system.rotor.omega(&target.i_act))
            .map(|(&p, w)| p - w * target.s)
            .collect();
        let st = repair_h3b(
            &current,
            &orbits,
            branch,
            &target.i_act,
            &theta_hat,
            delta_budget / (4.0 * d as f64),
            &opts.crit,
        )?;
        current = current.with_extra_modes(&st.modes);
        h3b_stage = Some(st);
    }

    let added_amplitude_sum: f64 = stage1
        .iter()
        .flat_map(|s| &s.modes)
        .map(|m| m.amplitude.abs())
        .sum::<f64>()
        + stage2
            .iter()
            .flat_map(|s| &s.modes)
            .map(|m| m.amplitude.abs())
            .sum::<f64>()
        + h3b_stage
            .iter()
            .flat_map(|s| &s.modes)
            .map(|m| m.amplitude.abs())
            .sum::<f64>();
    let no_op = stage1.is_none()
        && stage2.as_ref().map(|s| s.skipped).unwrap_or(true)
        && h3b_stage.is_none();

    let post = verify_model(&current, target, opts)?;
    let certificate = RepairCertificate {
        schema: "meldrift.repair.v1".into(),
        no_op,
        delta_budget,
        added_amplitude_sum,
        stage1,
        stage2,
        h3b_stage,
        post_verification: post.report,
    };
    Ok((certificate, current))
}

/// Melnikov grid scan rows: `(tau..., I..., phi..., s, L, |grad_tau|, det_hess, est_error)`.
///
/// Grid nodes are evaluated on `workers` threads; the output row order is
/// fixed by the grid regardless of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn melnikov_scan_csv(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    taus: &[Vec<f64>],
    i_act: &[f64],
    phi: &[f64],
    ss: &[f64],
    tol: f64,
    workers: usize,
) -> Result<String> {
    let n = system.n_pendulums();
    let d = system.rotor_dim();
    if taus.is_empty() || ss.is_empty() {
        return Err(Error::InvalidInput("scan grid is empty".into()));
    }
    let mut hdr: Vec<String> = (0..n).map(|j| format!("tau{j}")).collect();
    hdr.extend((0..d).map(|j| format!("I{j}")));
    hdr.extend((0..d).map(|j| format!("phi{j}")));
    hdr.extend(["s", "L", "grad_tau_norm", "det_hess", "est_error"].map(String::from));

    let points: Vec<(usize, &Vec<f64>, f64)> = taus
        .iter()
        .flat_map(|tau| ss.iter().map(move |&s| (tau, s)))
        .enumerate()
        .map(|(j, (tau, s))| (j, tau, s))
        .collect();
    let workers = workers.max(1).min(points.len());
    let mut rows: Vec<Option<String>> = vec![None; points.len()];
    let chunk = points.len().div_ceil(workers);
    let results: Vec<Result<Vec<(usize, String)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = points
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&(j, tau, s)| {
                            let e = melnikov(system, orbits, tau, i_act, phi, s, tol)?;
                            let mut row: Vec<String> =
                                tau.iter().map(|x| crate::report::fmt_g17(*x)).collect();
                            row.extend(i_act.iter().map(|x| crate::report::fmt_g17(*x)));
                            row.extend(phi.iter().map(|x| crate::report::fmt_g17(*x)));
                            row.push(crate::report::fmt_g17(s));
                            row.push(crate::report::fmt_g17(e.value));
                            row.push(crate::report::fmt_g17(e.grad_tau_norm1()));
                            row.push(crate::report::fmt_g17(e.hess_tau.determinant()));
                            row.push(crate::report::fmt_g17(e.est_error));
                            Ok((j, row.join(",")))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scan worker panicked"))
            .collect()
    });
    for part in results {
        for (j, row) in part? {
            rows[j] = Some(row);
        }
    }
    let mut out = hdr.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.expect("all rows filled"));
        out.push('\n');
    }
    Ok(out)
}

/// Theta-scan rows: `(I..., theta..., Lstar, grad_I..., grad_theta...)`.
pub fn theta_scan_csv(
    system: &SystemSpec,
    orbits: &[HomoclinicOrbit],
    branch: &CriticalBranch,
    i0: &[f64],
    grid: &[Vec<f64>],
    opts: &CritOpts,
) -> Result<String> {
    let d = system.rotor_dim();
    let mut hdr: Vec<String> = (0..d).map(|j| format!("I{j}")).collect();
    hdr.extend((0..d).map(|j| format!("theta{j}")));
    hdr.push("Lstar".into());
    hdr.extend((0..d).map(|j| format!("grad_I{j}")));
    hdr.extend((0..d).map(|j| format!("grad_theta{j}")));
    let mut out = hdr.join(",");
    out.push('\n');
    for theta in grid {
        match crate::reduced::reduced_eval(system, orbits, branch, i0, theta, opts) {
            Ok(e) => {
                let mut row: Vec<String> = i0.iter().map(|x| crate::report::fmt_g17(*x)).collect();
                row.extend(theta.iter().map(|x| crate::report::fmt_g17(*x)));
                row.push(crate::report::fmt_g17(e.value));
                row.extend(e.grad_i.iter().map(|x| crate::report::fmt_g17(*x)));
                row.extend(e.grad_theta.iter().map(|x| crate::report::fmt_g17(*x)));
                out.push_str(&row.join(","));
                out.push('\n');
            }
            Err(Error::OutsideDomain(_)) | Err(Error::NumericalFailure(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

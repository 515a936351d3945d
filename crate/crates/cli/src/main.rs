//! Command-line front end: parses a model file, runs the verification or
//! repair pipeline, grid scans, shadowing studies, and drift demonstrations,
//! and writes CSV/JSON reports.
//!
//! Exit codes: 0 pass, 1 hypothesis verified false, 2 usage error,
//! 3 numerical failure.

// `!(x > 0)` comparisons deliberately reject NaN inputs
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use clap::{Args, Parser, Subcommand};
use meldrift::criticality::{BasePoint, CritOpts};
use meldrift::dynamics::{measure_diffusion, measure_homoclinic_jump, DynOpts};
use meldrift::effective::{integrate_effective, shadow_scaling};
use meldrift::pipeline::{
    compute_orbits, melnikov_scan_csv, repair_model, theta_scan_csv, verify_model, PipelineOpts,
};
use meldrift::reduced::{theta_grid_in_box, ScatteringState};
use meldrift::report::write_json;
use meldrift::Error as CoreError;
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "meldrift",
    version,
    about = "Melnikov drift verification for rotor-pendulum systems"
)]
struct Cli {
    /// Model configuration file (TOML)
    #[arg(long, global = true)]
    model: Option<PathBuf>,

    /// Output directory for reports
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// RNG seed for sampling-based checks
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,

    /// Worker threads for grid scans
    #[arg(long, global = true, default_value_t = 4)]
    workers: usize,

    /// Homoclinic loop per pendulum, e.g. "upper,lower" (default all upper)
    #[arg(long, global = true)]
    branches: Option<String>,

    #[command(flatten)]
    tols: TolArgs,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct TolArgs {
    /// Melnikov quadrature tolerance
    #[arg(long, global = true, default_value_t = 1e-10)]
    quad_tol: f64,
    /// Newton tolerance on |dL/dtau|_1
    #[arg(long, global = true, default_value_t = 1e-10)]
    newton_tol: f64,
    /// Hessian non-degeneracy margin
    #[arg(long, global = true, default_value_t = 1e-6)]
    nondegen_tol: f64,
    /// Action-transversality threshold on |dL*/dtheta|
    #[arg(long, global = true, default_value_t = 1e-4)]
    h3b_tol: f64,
    /// Integrator local tolerance
    #[arg(long, global = true, default_value_t = 1e-10)]
    ode_tol: f64,
}

#[derive(Args)]
struct TargetArgs {
    /// Target base point as "I...;phi...;s" (defaults to I = 1, phi = 0, s = 0)
    #[arg(long)]
    target: Option<String>,
    /// Continuation box half-width in each action
    #[arg(long, default_value_t = 0.2)]
    box_i: f64,
    /// Continuation box half-width in each angle
    #[arg(long, default_value_t = 0.5)]
    box_angle: f64,
    /// Grid nodes per box axis
    #[arg(long, default_value_t = 5)]
    grid: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full hypothesis pipeline and write a verdict
    Verify(TargetArgs),
    /// Construct repair perturbations for a failing model
    Repair {
        #[command(flatten)]
        target: TargetArgs,
        /// Perturbation budget (sum of added mode amplitudes stays below it)
        #[arg(long)]
        budget: f64,
    },
    /// Melnikov potential grid scan over (tau, s)
    Scan {
        #[arg(long, default_value_t = 24)]
        tau_steps: usize,
        #[arg(long, default_value_t = 16)]
        s_steps: usize,
        /// Fixed action values, comma separated
        #[arg(long, default_value = "1.0")]
        i_act: String,
        /// Fixed rotor angles, comma separated
        #[arg(long, default_value = "0.0")]
        phi: String,
    },
    /// Scattering pseudo-orbit shadowing study against the effective flow
    Shadow {
        /// Start point "I...;theta..."
        #[arg(long, default_value = "1.0;1.0")]
        x0: String,
        #[arg(long, default_value = "1e-2,5e-3,2.5e-3")]
        epsilons: String,
        #[arg(long, default_value_t = 1.0)]
        t_end: f64,
        /// Branch box center in the actions (defaults to the x0 actions)
        #[arg(long)]
        box_i_center: Option<String>,
        #[arg(long, default_value_t = 0.35)]
        box_i_half: f64,
        #[arg(long, default_value_t = 0.45)]
        box_theta_half: f64,
        #[arg(long, default_value_t = 21)]
        i_steps: usize,
        #[arg(long, default_value_t = 11)]
        theta_steps: usize,
    },
    /// Full-trajectory diffusion demonstration
    Diffuse {
        /// Witness point "I...;theta..."
        #[arg(long, default_value = "1.0;1.0")]
        witness: String,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.0)]
        t_end: f64,
        /// Sampling stride for the trajectory CSV
        #[arg(long, default_value_t = 32)]
        stride: usize,
    },
    /// Compute and dump pendulum separatrices
    Separatrix {
        /// Data half-span (0 picks the per-pendulum default)
        #[arg(long, default_value_t = 0.0)]
        t_span: f64,
    },
}

fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad number {x:?}: {e}"))
        })
        .collect()
}

fn parse_target(s: &str, d: usize) -> Result<BasePoint, String> {
    let parts: Vec<&str> = s.split(';').collect();
    if parts.len() != 3 {
        return Err("target must be \"I...;phi...;s\"".into());
    }
    let i_act = parse_floats(parts[0])?;
    let phi = parse_floats(parts[1])?;
    let s_val: f64 = parts[2].trim().parse().map_err(|e| format!("bad s: {e}"))?;
    if i_act.len() != d || phi.len() != d {
        return Err(format!("target needs {d} actions and {d} angles"));
    }
    Ok(BasePoint {
        i_act,
        phi,
        s: s_val,
    })
}

fn parse_state(s: &str, d: usize) -> Result<ScatteringState, String> {
    let parts: Vec<&str> = s.split(';').collect();
    if parts.len() != 2 {
        return Err("state must be \"I...;theta...\"".into());
    }
    let i_act = parse_floats(parts[0])?;
    let theta = parse_floats(parts[1])?;
    if i_act.len() != d || theta.len() != d {
        return Err(format!("state needs {d} actions and {d} angles"));
    }
    Ok(ScatteringState::new(i_act, theta))
}

const EXIT_HYPOTHESIS_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_)
        | CoreError::InvalidInput(_)
        | CoreError::DimensionMismatch { .. }
        | CoreError::MorseViolation { .. }
        | CoreError::NotUniqueMaximum { .. }
        | CoreError::Io(_) => EXIT_USAGE,
        _ => EXIT_NUMERICAL,
    }
}

fn usage_err(msg: String) -> (u8, String) {
    (EXIT_USAGE, msg)
}

fn run(cli: &Cli) -> Result<u8, (u8, String)> {
    let model_path = cli
        .model
        .as_ref()
        .ok_or_else(|| usage_err("--model is required".into()))?;
    let system =
        meldrift::config::load_model(model_path).map_err(|e| (exit_code_for(&e), e.to_string()))?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| usage_err(format!("cannot create {}: {e}", cli.out.display())))?;

    let crit = CritOpts {
        quad_tol: cli.tols.quad_tol,
        newton_tol: cli.tols.newton_tol,
        nondegen_tol: cli.tols.nondegen_tol,
        ..Default::default()
    };
    if !(crit.quad_tol > 0.0
        && crit.newton_tol > 0.0
        && crit.nondegen_tol > 0.0
        && cli.tols.h3b_tol > 0.0
        && cli.tols.ode_tol > 0.0)
    {
        return Err(usage_err("all tolerances must be positive".into()));
    }
    let core = |e: CoreError| (exit_code_for(&e), e.to_string());
    let branches = match &cli.branches {
        None => Vec::new(),
        Some(s) => s
            .split(',')
            .map(|b| match b.trim() {
                "upper" => Ok(meldrift::homoclinic::Branch::Upper),
                "lower" => Ok(meldrift::homoclinic::Branch::Lower),
                other => Err(usage_err(format!("unknown branch {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?,
    };

    match &cli.cmd {
        Cmd::Verify(targs) => {
            let opts = PipelineOpts {
                crit,
                h3b_tol: cli.tols.h3b_tol,
                box_i_half: targs.box_i,
                box_angle_half: targs.box_angle,
                grid_steps: targs.grid,
                seed: cli.seed,
                branches: branches.clone(),
                ..Default::default()
            };
            let target = match &targs.target {
                Some(t) => parse_target(t, system.rotor_dim()).map_err(usage_err)?,
                None => opts.default_target(&system),
            };
            let out = verify_model(&system, &target, &opts).map_err(core)?;
            write_json(&cli.out.join("verify.json"), &out.report).map_err(core)?;
            if let Some(branch) = &out.branch {
                std::fs::write(cli.out.join("branch.csv"), branch.to_csv())
                    .map_err(|e| usage_err(e.to_string()))?;
                let orbits = compute_orbits(&system, &opts).map_err(core)?;
                let grid = theta_grid_in_box(branch, opts.theta_points);
                let scan =
                    theta_scan_csv(&system, &orbits, branch, &target.i_act, &grid, &opts.crit)
                        .map_err(core)?;
                std::fs::write(cli.out.join("theta_scan.csv"), scan)
                    .map_err(|e| usage_err(e.to_string()))?;
            }
            if out.report.pass {
                println!("verify: PASS");
                Ok(0)
            } else {
                let reason = out.report.h3a_failure.clone().unwrap_or_else(|| {
                    if out.report.h3a.as_ref().map(|r| !r.pass).unwrap_or(false) {
                        "H3a: branch continuation failed the non-degeneracy margin".into()
                    } else {
                        "H3b: reduced gradient below threshold".into()
                    }
                });
                println!("verify: FAIL ({reason})");
                Ok(EXIT_HYPOTHESIS_FAIL)
            }
        }
        Cmd::Repair {
            target: targs,
            budget,
        } => {
            if !(*budget > 0.0) {
                return Err(usage_err("--budget must be positive".into()));
            }
            let opts = PipelineOpts {
                crit,
                h3b_tol: cli.tols.h3b_tol,
                box_i_half: targs.box_i,
                box_angle_half: targs.box_angle,
                grid_steps: targs.grid,
                seed: cli.seed,
                branches: branches.clone(),
                ..Default::default()
            };
            let target = match &targs.target {
                Some(t) => parse_target(t, system.rotor_dim()).map_err(usage_err)?,
                None => opts.default_target(&system),
            };
            let (cert, repaired) = repair_model(&system, &target, *budget, &opts).map_err(core)?;
            write_json(&cli.out.join("certificate.json"), &cert).map_err(core)?;
            meldrift::config::save_model(&repaired, &cli.out.join("repaired_model.toml"))
                .map_err(core)?;
            println!(
                "repair: {} (added amplitude {:.3e} of budget {budget})",
                if cert.no_op { "no-op" } else { "applied" },
                cert.added_amplitude_sum
            );
            if cert.post_verification.pass {
                Ok(0)
            } else {
                Ok(EXIT_NUMERICAL)
            }
        }
        Cmd::Scan {
            tau_steps,
            s_steps,
            i_act,
            phi,
        } => {
            if *tau_steps == 0 || *s_steps == 0 {
                return Err(usage_err(
                    "scan grid must have at least one point per axis".into(),
                ));
            }
            let i_act = parse_floats(i_act).map_err(usage_err)?;
            let phi = parse_floats(phi).map_err(usage_err)?;
            let opts = PipelineOpts {
                crit,
                seed: cli.seed,
                branches: branches.clone(),
                ..Default::default()
            };
            let orbits = compute_orbits(&system, &opts).map_err(core)?;
            let period = meldrift::melnikov::effective_tau_period(&system, &i_act, 0);
            let taus: Vec<Vec<f64>> = (0..*tau_steps)
                .map(|j| vec![period * j as f64 / *tau_steps as f64; system.n_pendulums()])
                .collect();
            let ss: Vec<f64> = (0..*s_steps)
                .map(|j| 2.0 * std::f64::consts::PI * j as f64 / *s_steps as f64)
                .collect();
            let csv = melnikov_scan_csv(
                &system,
                &orbits,
                &taus,
                &i_act,
                &phi,
                &ss,
                opts.crit.quad_tol,
                cli.workers,
            )
            .map_err(core)?;
            std::fs::write(cli.out.join("melnikov_scan.csv"), csv)
                .map_err(|e| usage_err(e.to_string()))?;
            println!("scan: wrote {} tau x {} s grid", tau_steps, s_steps);
            Ok(0)
        }
        Cmd::Shadow {
            x0,
            epsilons,
            t_end,
            box_i_center,
            box_i_half,
            box_theta_half,
            i_steps,
            theta_steps,
        } => {
            let d = system.rotor_dim();
            let x0 = parse_state(x0, d).map_err(usage_err)?;
            let eps = parse_floats(epsilons).map_err(usage_err)?;
            let opts = PipelineOpts {
                crit,
                seed: cli.seed,
                branches: branches.clone(),
                ..Default::default()
            };
            let orbits = compute_orbits(&system, &opts).map_err(core)?;
            let (good, _) = meldrift::criticality::find_critical_points(
                &system, &orbits, &x0.i_act, &x0.theta, 0.0, &opts.crit,
            )
            .map_err(core)?;
            let start = good.first().ok_or((
                EXIT_HYPOTHESIS_FAIL,
                "no nondegenerate critical point at the start state".to_string(),
            ))?;
            let i_center = match box_i_center {
                Some(t) => parse_floats(t).map_err(usage_err)?,
                None => x0.i_act.clone(),
            };
            let bbox = meldrift::criticality::BranchBox {
                i_center,
                i_half: vec![*box_i_half; d],
                phi_center: x0.theta.clone(),
                phi_half: vec![*box_theta_half; d],
                s_center: 0.0,
                s_half: 0.0,
            };
            let mut steps = vec![*i_steps; d];
            steps.extend(vec![*theta_steps; d]);
            steps.push(1);
            let branch = meldrift::criticality::continue_branch(
                &system, &orbits, start, bbox, steps, &opts.crit,
            )
            .map_err(core)?;
            let report = shadow_scaling(
                &system,
                &orbits,
                &branch,
                &x0,
                &eps,
                *t_end,
                cli.tols.ode_tol.min(1e-11),
                &opts.crit,
            )
            .map_err(core)?;
            write_json(&cli.out.join("shadow.json"), &report).map_err(core)?;
            let curve = integrate_effective(
                &system,
                &orbits,
                &branch,
                &x0,
                *t_end,
                cli.tols.ode_tol,
                &opts.crit,
            )
            .map_err(core)?;
            std::fs::write(cli.out.join("effective_curve.csv"), curve.to_csv())
                .map_err(|e| usage_err(e.to_string()))?;
            println!(
                "shadow: slope {:.3}, K {:.3}, r2 {:.4}{}",
                report.slope,
                report.fitted_k,
                report.r2,
                if report.degenerate {
                    " (degenerate)"
                } else {
                    ""
                }
            );
            Ok(0)
        }
        Cmd::Diffuse {
            witness,
            epsilon,
            t_end,
            stride,
        } => {
            if *epsilon == 0.0 {
                return Err(usage_err(
                    "--epsilon must be nonzero for diffusion runs".into(),
                ));
            }
            let d = system.rotor_dim();
            let w = parse_state(witness, d).map_err(usage_err)?;
            let opts = PipelineOpts {
                crit,
                seed: cli.seed,
                branches: branches.clone(),
                ..Default::default()
            };
            let orbits = compute_orbits(&system, &opts).map_err(core)?;
            let (good, _) = meldrift::criticality::find_critical_points(
                &system, &orbits, &w.i_act, &w.theta, 0.0, &opts.crit,
            )
            .map_err(core)?;
            let start = good.first().ok_or((
                EXIT_HYPOTHESIS_FAIL,
                "no nondegenerate critical point at the witness".to_string(),
            ))?;
            let bbox = meldrift::criticality::BranchBox::centered(&start.base_point, 0.2, 0.5);
            let branch = meldrift::criticality::continue_branch(
                &system,
                &orbits,
                start,
                bbox,
                vec![3; 2 * d + 1],
                &opts.crit,
            )
            .map_err(core)?;
            let t_end = if *t_end > 0.0 {
                *t_end
            } else {
                2.0 * std::f64::consts::PI * (1.0 / epsilon.abs()).floor()
            };
            let dyn_opts = DynOpts {
                ode_tol: cli.tols.ode_tol,
                ..Default::default()
            };
            let rec = measure_diffusion(
                &system, &orbits, &branch, &w.i_act, &w.theta, *epsilon, t_end, *stride, &dyn_opts,
                &opts.crit,
            )
            .map_err(core)?;
            // one-excursion jump comparison rides along in the summary
            let jump = measure_homoclinic_jump(
                &system, &orbits, &branch, &w.i_act, &w.theta, *epsilon, 0.0, &dyn_opts, &opts.crit,
            )
            .map_err(core)?;
            #[derive(Serialize)]
            struct DriftSummary<'a> {
                schema: &'a str,
                epsilon: f64,
                t_end: f64,
                drift: f64,
                energy_drift: f64,
                n_excursions: usize,
                mean_excursion_jump: f64,
                single_excursion_delta_i: &'a [f64],
                scattering_prediction: &'a [f64],
            }
            let mean_jump = if rec.excursion_jumps.is_empty() {
                0.0
            } else {
                rec.excursion_jumps.iter().sum::<f64>() / rec.excursion_jumps.len() as f64
            };
            write_json(
                &cli.out.join("drift.json"),
                &DriftSummary {
                    schema: "meldrift.drift.v1",
                    epsilon: rec.epsilon,
                    t_end: rec.t_end,
                    drift: rec.drift,
                    energy_drift: rec.energy_drift,
                    n_excursions: rec.n_excursions,
                    mean_excursion_jump: mean_jump,
                    single_excursion_delta_i: &jump.delta_i,
                    scattering_prediction: &jump.predicted,
                },
            )
            .map_err(core)?;
            std::fs::write(cli.out.join("trajectory.csv"), rec.trajectory_csv())
                .map_err(|e| usage_err(e.to_string()))?;
            println!(
                "diffuse: drift {:.4e} over {} excursions (t_end {t_end:.1})",
                rec.drift, rec.n_excursions
            );
            Ok(0)
        }
        Cmd::Separatrix { t_span } => {
            let opts = PipelineOpts {
                crit,
                t_span: *t_span,
                seed: cli.seed,
                branches: branches.clone(),
                ..Default::default()
            };
            let orbits = compute_orbits(&system, &opts).map_err(core)?;
            for (j, orbit) in orbits.iter().enumerate() {
                std::fs::write(cli.out.join(format!("separatrix_{j}.csv")), orbit.to_csv())
                    .map_err(|e| usage_err(e.to_string()))?;
                println!(
                    "separatrix {j}: lambda {:.6}, data span [-{:.2}, {:.2}], tail coeff {:.6}",
                    orbit.lambda,
                    orbit.t_backward(),
                    orbit.t_forward(),
                    orbit.tail_coeff
                );
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

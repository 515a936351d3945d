//! Explicit Runge-Kutta integrators.
//!
//! The workhorse is an adaptive 12-stage eighth-order method with embedded
//! fifth/third-order error estimation (Dormand-Prince 8(5,3)). A fixed-step
//! Strang-splitting leapfrog is provided as a symplectic alternative for long
//! runs of the separable full system.

use crate::error::{Error, Result};

/// Right-hand side of an autonomous-in-form ODE `y' = f(t, y)`.
pub trait OdeRhs {
    fn dim(&self) -> usize;
    fn eval(&mut self, t: f64, y: &[f64], dydt: &mut [f64]);
}

impl<F: FnMut(f64, &[f64], &mut [f64])> OdeRhs for (usize, F) {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&mut self, t: f64, y: &[f64], dydt: &mut [f64]) {
        (self.1)(t, y, dydt)
    }
}

/// Step-by-step control returned by the observer callback.
pub enum StepControl {
    Continue,
    /// Stop integration after this accepted step.
    Stop,
}

/// Observer invoked after every accepted step with `(t, y, dy/dt)`.
pub type StepObserver<'a> = dyn FnMut(f64, &[f64], &[f64]) -> StepControl + 'a;

mod dop853_tables {
    // 12-stage eighth-order coefficients (embedded 5th/3rd order error weights).
    pub(crate) const C: [f64; 12] = [
        0.0,
        5.26001519587677296e-02,
        7.89002279381516014e-02,
        1.18350341907227402e-01,
        2.81649658092772592e-01,
        3.33333333333333315e-01,
        2.50000000000000000e-01,
        3.07692307692307709e-01,
        6.51282051282051300e-01,
        5.99999999999999978e-01,
        8.57142857142857095e-01,
        1.00000000000000000e+00,
    ];
    pub(crate) const A: [[f64; 12]; 12] = [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [
            5.26001519587677296e-02,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
        [
            1.97250569845379004e-02,
            5.91751709536137011e-02,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
        [
            2.95875854768068505e-02,
            0.0,
            8.87627564304205446e-02,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
        [
            2.41365134159266692e-01,
            0.0,
            -8.84549479328286092e-01,
            9.24834003261791993e-01,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
        [
            3.70370370370370350e-02,
            0.0,
            0.0,
            1.70828608729473863e-01,
            1.25467687566822417e-01,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
        [
            3.71093750000000000e-02,
            0.0,
            0.0,
            1.70252211019544047e-01,
            6.02165389804559595e-02,
            -1.75781250000000000e-02,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
        [
            3.70920001185047893e-02,
            0.0,
            0.0,
            1.70383925712239981e-01,
            1.07262030446373280e-01,
            -1.53194377486244020e-02,
            8.27378916381402325e-03,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
        [
            6.24110958716075692e-01,
            0.0,
            0.0,
            -3.36089262944694145e+00,
            -8.68219346841725970e-01,
            2.75920996994467096e+01,
            2.01540675504778939e+01,
            -4.34898841810699608e+01,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
        [
            4.77662536438264340e-01,
            0.0,
            0.0,
            -2.48811461997166772e+00,
            -5.90290826836842975e-01,
            2.12300514481811931e+01,
            1.52792336328824234e+01,
            -3.32882109689848633e+01,
            -2.03312017085086269e-02,
            0.0,
            0.0,
            0.0,
        ],
        [
            -9.37142430085987299e-01,
            0.0,
            0.0,
            5.18637242884406380e+00,
            1.09143734899672951e+00,
            -8.14978701074692680e+00,
            -1.85200656599969591e+01,
            2.27394870993505052e+01,
            2.49360555267965234e+00,
            -3.04676447189821964e+00,
            0.0,
            0.0,
        ],
        [
            2.27331014751653804e+00,
            0.0,
            0.0,
            -1.05344954667372495e+01,
            -2.00087205822486247e+00,
            -1.79589318631187993e+01,
            2.79488845294199599e+01,
            -2.85899827713502352e+00,
            -8.87285693353062932e+00,
            1.23605671757943032e+01,
            6.43392746015763572e-01,
            0.0,
        ],
    ];
    pub(crate) const B: [f64; 12] = [
        5.42937341165687648e-02,
        0.0,
        0.0,
        0.0,
        0.0,
        4.45031289275240916e+00,
        1.89151789931450032e+00,
        -5.80120396001058491e+00,
        3.11164366957819905e-01,
        -1.52160949662516087e-01,
        2.01365400804030342e-01,
        4.47106157277725874e-02,
    ];
    pub(crate) const E3: [f64; 13] = [
        -1.89800754072407624e-01,
        0.0,
        0.0,
        0.0,
        0.0,
        4.45031289275240916e+00,
        1.89151789931450032e+00,
        -5.80120396001058491e+00,
        -4.22682321323791910e-01,
        -1.52160949662516087e-01,
        2.01365400804030342e-01,
        2.26517921983608213e-02,
        0.0,
    ];
    pub(crate) const E5: [f64; 13] = [
        1.31200449941948800e-02,
        0.0,
        0.0,
        0.0,
        0.0,
        -1.22515644637620436e+00,
        -4.95758949657250203e-01,
        1.66437718245498645e+00,
        -3.50328848749973665e-01,
        3.34179118713017476e-01,
        8.19232064851157099e-02,
        -2.23553078638862937e-02,
        0.0,
    ];
}

#[derive(Debug, Clone)]
pub struct Dop853Opts {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for Dop853Opts {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            max_step: f64::INFINITY,
            max_steps: 50_000_000,
        }
    }
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const ERROR_EXP: f64 = -1.0 / 8.0;

fn initial_step<R: OdeRhs>(
    rhs: &mut R,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    direction: f64,
    opts: &Dop853Opts,
) -> f64 {
    let dim = y0.len();
    let scale: Vec<f64> = y0
        .iter()
        .map(|&y| opts.atol + opts.rtol * y.abs())
        .collect();
    let d0 = (y0
        .iter()
        .zip(&scale)
        .map(|(y, s)| (y / s).powi(2))
        .sum::<f64>()
        / dim as f64)
        .sqrt();
    let d1 = (f0
        .iter()
        .zip(&scale)
        .map(|(f, s)| (f / s).powi(2))
        .sum::<f64>()
        / dim as f64)
        .sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let y1: Vec<f64> = y0
        .iter()
        .zip(f0)
        .map(|(y, f)| y + h0 * direction * f)
        .collect();
    let mut f1 = vec![0.0; dim];
    rhs.eval(t0 + h0 * direction, &y1, &mut f1);
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(&scale)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / dim as f64)
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 8.0)
    };
    (100.0 * h0).min(h1).min(opts.max_step)
}

/// Integrates from `t0` to `t_end` (either direction), invoking `observer`
/// after every accepted step with `(t, y, dydt_at_t)`.
///
/// On success returns `(t_final, y_final, n_steps)`. The integration lands
/// exactly on `t_end` unless the observer stops it early.
pub fn dop853<R: OdeRhs>(
    rhs: &mut R,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &Dop853Opts,
    observer: &mut StepObserver,
) -> Result<(f64, Vec<f64>, usize)> {
    use dop853_tables::{A, B, C, E3, E5};
    let dim = rhs.dim();
    if y0.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "state entries",
            expected: dim,
            got: y0.len(),
        });
    }
    if t_end == t0 {
        return Ok((t0, y0.to_vec(), 0));
    }
    let direction = (t_end - t0).signum();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut f = vec![0.0; dim];
    rhs.eval(t, &y, &mut f);
    let mut h = initial_step(rhs, t0, y0, &f, direction, opts);
    let mut k = vec![vec![0.0; dim]; 13];
    let mut y_stage = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];
    let mut steps = 0usize;

    loop {
        if steps >= opts.max_steps {
            return Err(Error::NumericalFailure(format!(
                "step budget {} exhausted at t = {t}",
                opts.max_steps
            )));
        }
        let remaining = (t_end - t) * direction;
        if remaining <= 0.0 {
            break;
        }
        h = h.min(opts.max_step).min(remaining);
        if h <= t.abs() * f64::EPSILON * 4.0 + f64::MIN_POSITIVE {
            return Err(Error::NumericalFailure(format!(
                "step size underflow at t = {t}"
            )));
        }
        // snap the last step onto t_end so accumulation never overshoots
        let last_step = h >= remaining * (1.0 - 1e-12);
        let hs = h * direction;

        k[0].copy_from_slice(&f);
        for s in 1..12 {
            for (j, ys) in y_stage.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (r, kr) in k.iter().enumerate().take(s) {
                    let a = A[s][r];
                    if a != 0.0 {
                        acc += a * kr[j];
                    }
                }
                *ys = y[j] + hs * acc;
            }
            let (before, after) = k.split_at_mut(s);
            let _ = before;
            rhs.eval(t + C[s] * hs, &y_stage, &mut after[0]);
        }
        for (j, yn) in y_new.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (r, br) in B.iter().enumerate() {
                if *br != 0.0 {
                    acc += br * k[r][j];
                }
            }
            *yn = y[j] + hs * acc;
        }
        let t_new = if last_step { t_end } else { t + hs };
        rhs.eval(t_new, &y_new, &mut k[12]);

        // 5th/3rd-order combined error norm
        let mut err5_sq = 0.0;
        let mut err3_sq = 0.0;
        for j in 0..dim {
            let scale = opts.atol + opts.rtol * y[j].abs().max(y_new[j].abs());
            let mut e5 = 0.0;
            let mut e3 = 0.0;
            for (r, kr) in k.iter().enumerate() {
                if E5[r] != 0.0 {
                    e5 += E5[r] * kr[j];
                }
                if E3[r] != 0.0 {
                    e3 += E3[r] * kr[j];
                }
            }
            err5_sq += (e5 / scale).powi(2);
            err3_sq += (e3 / scale).powi(2);
        }
        let denom = err5_sq + 0.01 * err3_sq;
        let error_norm = if denom > 0.0 {
            h * err5_sq / (denom * dim as f64).sqrt()
        } else {
            0.0
        };

        if error_norm < 1.0 {
            steps += 1;
            t = t_new;
            y.copy_from_slice(&y_new);
            f.copy_from_slice(&k[12]);
            let factor = if error_norm == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * error_norm.powf(ERROR_EXP)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            h *= factor;
            if let StepControl::Stop = observer(t, &y, &f) {
                return Ok((t, y, steps));
            }
        } else {
            h *= (SAFETY * error_norm.powf(ERROR_EXP)).max(MIN_FACTOR);
        }
    }
    Ok((t, y, steps))
}

/// Convenience wrapper that drops intermediate output.
pub fn dop853_final<R: OdeRhs>(
    rhs: &mut R,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &Dop853Opts,
) -> Result<(f64, Vec<f64>, usize)> {
    dop853(rhs, t0, y0, t_end, opts, &mut |_, _, _| {
        StepControl::Continue
    })
}

/// Classical fixed-step fourth-order Runge-Kutta, stepping `n` times by `h`.
pub fn rk4_fixed<R: OdeRhs>(rhs: &mut R, t0: f64, y: &mut [f64], h: f64, n: usize) {
    let dim = y.len();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let mut t = t0;
    for _ in 0..n {
        rhs.eval(t, y, &mut k1);
        for j in 0..dim {
            tmp[j] = y[j] + 0.5 * h * k1[j];
        }
        rhs.eval(t + 0.5 * h, &tmp, &mut k2);
        for j in 0..dim {
            tmp[j] = y[j] + 0.5 * h * k2[j];
        }
        rhs.eval(t + 0.5 * h, &tmp, &mut k3);
        for j in 0..dim {
            tmp[j] = y[j] + h * k3[j];
        }
        rhs.eval(t + h, &tmp, &mut k4);
        for j in 0..dim {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        t += h;
    }
}

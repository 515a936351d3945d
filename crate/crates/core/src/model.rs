//! The Hamiltonian family `H_eps = h(I) + sum_i sigma_i (p_i^2/2 + V_i(q_i)) + eps H_1(q, phi, t)`.
//!
//! Pendulum potentials are finite Fourier series on the circle, the rotor
//! Hamiltonian `h` is a polynomial in the actions of degree at most four, and
//! the perturbation is a finite sum of cosine modes in `(q, phi, t)`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const MORSE_TOL: f64 = 1e-8;
pub const UNIQUE_MAX_TOL: f64 = 1e-10;
pub const UNIQUE_MAX_EXCLUSION: f64 = 0.1;
pub const UNIQUE_MAX_GRID: usize = 2048;

/// One-dimensional Fourier series `f(q) = sum_k c_k cos(k q) + s_k sin(k q)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FourierSeries {
    /// Terms `(harmonic k >= 0, cosine amplitude, sine amplitude)`.
    pub terms: Vec<(u32, f64, f64)>,
}

impl FourierSeries {
    pub fn new(terms: Vec<(u32, f64, f64)>) -> Self {
        Self { terms }
    }

    pub fn eval(&self, q: f64) -> f64 {
        let mut v = 0.0;
        for &(k, c, s) in &self.terms {
            let kq = k as f64 * q;
            v += c * kq.cos() + s * kq.sin();
        }
        v
    }

    pub fn d1(&self, q: f64) -> f64 {
        let mut v = 0.0;
        for &(k, c, s) in &self.terms {
            let kf = k as f64;
            let kq = kf * q;
            v += -c * kf * kq.sin() + s * kf * kq.cos();
        }
        v
    }

    pub fn d2(&self, q: f64) -> f64 {
        let mut v = 0.0;
        for &(k, c, s) in &self.terms {
            let kf = k as f64;
            let kq = kf * q;
            v += -kf * kf * (c * kq.cos() + s * kq.sin());
        }
        v
    }

    /// Sum of `|k| * (|c_k| + |s_k|)`, an upper bound for `|f'|`.
    pub fn d1_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|&(k, c, s)| k as f64 * (c.abs() + s.abs()))
            .sum()
    }
}

/// A pendulum `sigma * (p^2/2 + V(q))` with a Morse maximum of `V` at `q = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendulumSpec {
    pub fourier_coeffs: FourierSeries,
    /// The sign in front of the pendulum, `+1` or `-1`.
    pub sign: f64,
}

impl PendulumSpec {
    /// Validates the Morse condition and the uniqueness of the maximum at `q = 0`.
    pub fn new(fourier_coeffs: FourierSeries, sign: f64) -> Result<Self> {
        if sign != 1.0 && sign != -1.0 {
            return Err(Error::InvalidInput(format!(
                "pendulum sign must be +1 or -1, got {sign}"
            )));
        }
        let v2 = fourier_coeffs.d2(0.0);
        if v2 >= -MORSE_TOL {
            return Err(Error::MorseViolation { v2, tol: MORSE_TOL });
        }
        let v1 = fourier_coeffs.d1(0.0);
        if v1.abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "V'(0) = {v1:e} must vanish (maximum normalized to q = 0)"
            )));
        }
        let v0 = fourier_coeffs.eval(0.0);
        for j in 0..UNIQUE_MAX_GRID {
            let q = 2.0 * PI * j as f64 / UNIQUE_MAX_GRID as f64;
            let dist = q.min(2.0 * PI - q);
            if dist <= UNIQUE_MAX_EXCLUSION {
                continue;
            }
            let excess = fourier_coeffs.eval(q) - (v0 - UNIQUE_MAX_TOL);
            if excess > 0.0 {
                return Err(Error::NotUniqueMaximum { q, excess });
            }
        }
        Ok(Self {
            fourier_coeffs,
            sign,
        })
    }

    pub fn potential(&self) -> &FourierSeries {
        &self.fourier_coeffs
    }

    /// Characteristic exponent `lambda = sqrt(-V''(0))`.
    pub fn lambda(&self) -> f64 {
        (-self.fourier_coeffs.d2(0.0)).sqrt()
    }
}

/// Rotor Hamiltonian `h(I)`: a multivariate polynomial of degree <= 4.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotorSpec {
    /// Monomials `coeff * prod_j I_j^powers[j]`.
    pub coefficients: Vec<Monomial>,
    dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Monomial {
    pub powers: Vec<u32>,
    pub coeff: f64,
}

impl RotorSpec {
    pub fn new(dim: usize, coefficients: Vec<Monomial>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("rotor dimension d must be >= 1".into()));
        }
        for m in &coefficients {
            if m.powers.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "monomial powers",
                    expected: dim,
                    got: m.powers.len(),
                });
            }
            let deg: u32 = m.powers.iter().sum();
            if deg > 4 {
                return Err(Error::InvalidInput(format!(
                    "rotor polynomial degree {deg} exceeds 4"
                )));
            }
            if !m.coeff.is_finite() {
                return Err(Error::InvalidInput("non-finite rotor coefficient".into()));
            }
        }
        Ok(Self { coefficients, dim })
    }

    /// The canonical rotor `h(I) = |I|^2 / 2`.
    pub fn quadratic(dim: usize) -> Self {
        let coefficients = (0..dim)
            .map(|j| {
                let mut powers = vec![0u32; dim];
                powers[j] = 2;
                Monomial { powers, coeff: 0.5 }
            })
            .collect();
        Self { coefficients, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, i: &[f64]) -> f64 {
        self.coefficients
            .iter()
            .map(|m| {
                m.coeff
                    * m.powers
                        .iter()
                        .zip(i)
                        .map(|(&p, &x)| x.powi(p as i32))
                        .product::<f64>()
            })
            .sum()
    }

    /// Frequency map `omega(I) = Dh(I)` by exact polynomial differentiation.
    pub fn omega(&self, i: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for m in &self.coefficients {
            for (j, wj) in w.iter_mut().enumerate() {
                if m.powers[j] == 0 {
                    continue;
                }
                let mut term = m.coeff * m.powers[j] as f64;
                for (r, &p) in m.powers.iter().enumerate() {
                    let p = if r == j { p - 1 } else { p };
                    term *= i[r].powi(p as i32);
                }
                *wj += term;
            }
        }
        w
    }

    /// `D omega(I) = D^2 h(I)`, a symmetric `d x d` matrix in row-major order.
    pub fn d_omega(&self, i: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for m in &self.coefficients {
            for j in 0..d {
                if m.powers[j] == 0 {
                    continue;
                }
                for r in 0..d {
                    let factor_exists = if r == j {
                        m.powers[j] >= 2
                    } else {
                        m.powers[r] >= 1
                    };
                    if !factor_exists {
                        continue;
                    }
                    let mut term = m.coeff * m.powers[j] as f64;
                    term *= if r == j {
                        (m.powers[j] - 1) as f64
                    } else {
                        m.powers[r] as f64
                    };
                    for (u, &p) in m.powers.iter().enumerate() {
                        let mut p = p;
                        if u == j {
                            p -= 1;
                        }
                        if u == r {
                            p -= 1;
                        }
                        term *= i[u].powi(p as i32);
                    }
                    out[j * d + r] += term;
                }
            }
        }
        out
    }
}

/// One perturbation mode `a cos(k.q + l.phi + m t + chi)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mode {
    pub k: Vec<i64>,
    pub l: Vec<i64>,
    pub m: i64,
    pub amplitude: f64,
    pub phase: f64,
}

impl Mode {
    /// Full angular argument at `(q, phi, t)`.
    pub fn arg(&self, q: &[f64], phi: &[f64], t: f64) -> f64 {
        let mut a = self.phase + self.m as f64 * t;
        for (kj, qj) in self.k.iter().zip(q) {
            a += *kj as f64 * qj;
        }
        for (lj, pj) in self.l.iter().zip(phi) {
            a += *lj as f64 * pj;
        }
        a
    }

    /// Angular argument with `q = 0`.
    pub fn arg_base(&self, phi: &[f64], t: f64) -> f64 {
        let mut a = self.phase + self.m as f64 * t;
        for (lj, pj) in self.l.iter().zip(phi) {
            a += *lj as f64 * pj;
        }
        a
    }
}

/// Perturbation `H_1(q, phi, t)`, a finite real Fourier sum independent of `(p, I)`.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PerturbationSpec {
    pub modes: Vec<Mode>,
}

impl PerturbationSpec {
    pub fn empty() -> Self {
        Self { modes: Vec::new() }
    }

    /// Sum of `|amplitude|` over modes.
    pub fn amplitude_sum(&self) -> f64 {
        self.modes.iter().map(|m| m.amplitude.abs()).sum()
    }
}

/// Complete description of the family `H_eps`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpec {
    pub rotor: RotorSpec,
    pub pendulums: Vec<PendulumSpec>,
    pub perturbation: PerturbationSpec,
    pub epsilon: f64,
}

impl SystemSpec {
    pub fn new(
        rotor: RotorSpec,
        pendulums: Vec<PendulumSpec>,
        perturbation: PerturbationSpec,
        epsilon: f64,
    ) -> Result<Self> {
        if pendulums.is_empty() {
            return Err(Error::InvalidInput("need at least one pendulum".into()));
        }
        let n = pendulums.len();
        let d = rotor.dim();
        for mode in &perturbation.modes {
            if mode.k.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "mode k entries",
                    expected: n,
                    got: mode.k.len(),
                });
            }
            if mode.l.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "mode l entries",
                    expected: d,
                    got: mode.l.len(),
                });
            }
            if !mode.amplitude.is_finite() || !mode.phase.is_finite() {
                return Err(Error::InvalidInput(
                    "non-finite mode amplitude/phase".into(),
                ));
            }
        }
        if !epsilon.is_finite() {
            return Err(Error::InvalidInput("non-finite epsilon".into()));
        }
        Ok(Self {
            rotor,
            pendulums,
            perturbation,
            epsilon,
        })
    }

    pub fn n_pendulums(&self) -> usize {
        self.pendulums.len()
    }

    pub fn rotor_dim(&self) -> usize {
        self.rotor.dim()
    }

    fn check_dims(&self, p: usize, q: usize, i: usize) -> Result<()> {
        let n = self.n_pendulums();
        let d = self.rotor_dim();
        if p != n {
            return Err(Error::DimensionMismatch {
                what: "p entries",
                expected: n,
                got: p,
            });
        }
        if q != n {
            return Err(Error::DimensionMismatch {
                what: "q entries",
                expected: n,
                got: q,
            });
        }
        if i != d {
            return Err(Error::DimensionMismatch {
                what: "I entries",
                expected: d,
                got: i,
            });
        }
        Ok(())
    }

    /// Unperturbed energy `h(I) + sum_i sigma_i (p_i^2/2 + V_i(q_i))`.
    pub fn eval_h0(&self, p: &[f64], q: &[f64], i: &[f64]) -> Result<f64> {
        self.check_dims(p.len(), q.len(), i.len())?;
        let mut v = self.rotor.eval(i);
        for (pen, (&pi, &qi)) in self.pendulums.iter().zip(p.iter().zip(q)) {
            v += pen.sign * (0.5 * pi * pi + pen.fourier_coeffs.eval(qi));
        }
        Ok(v)
    }

    /// Perturbation value `H_1(q, phi, t)`.
    pub fn eval_h1(&self, q: &[f64], phi: &[f64], t: f64) -> Result<f64> {
        if q.len() != self.n_pendulums() {
            return Err(Error::DimensionMismatch {
                what: "q entries",
                expected: self.n_pendulums(),
                got: q.len(),
            });
        }
        if phi.len() != self.rotor_dim() {
            return Err(Error::DimensionMismatch {
                what: "phi entries",
                expected: self.rotor_dim(),
                got: phi.len(),
            });
        }
        Ok(self
            .perturbation
            .modes
            .iter()
            .map(|m| m.amplitude * m.arg(q, phi, t).cos())
            .sum())
    }

    /// Gradient of `H_1` with respect to `q`.
    pub fn grad_h1_q(&self, q: &[f64], phi: &[f64], t: f64, out: &mut [f64]) {
        out.fill(0.0);
        for m in &self.perturbation.modes {
            let s = m.amplitude * m.arg(q, phi, t).sin();
            for (o, &kj) in out.iter_mut().zip(&m.k) {
                *o -= s * kj as f64;
            }
        }
    }

    /// Gradient of `H_1` with respect to `phi`.
    pub fn grad_h1_phi(&self, q: &[f64], phi: &[f64], t: f64, out: &mut [f64]) {
        out.fill(0.0);
        for m in &self.perturbation.modes {
            let s = m.amplitude * m.arg(q, phi, t).sin();
            for (o, &lj) in out.iter_mut().zip(&m.l) {
                *o -= s * lj as f64;
            }
        }
    }

    /// `dH_1/dt`.
    pub fn dh1_dt(&self, q: &[f64], phi: &[f64], t: f64) -> f64 {
        self.perturbation
            .modes
            .iter()
            .map(|m| -m.amplitude * m.m as f64 * m.arg(q, phi, t).sin())
            .sum()
    }

    /// Characteristic exponents `lambda_i = sqrt(-V_i''(0))`.
    pub fn characteristic_exponents(&self) -> Result<Vec<f64>> {
        self.pendulums
            .iter()
            .map(|p| {
                let v2 = p.fourier_coeffs.d2(0.0);
                if v2 >= -MORSE_TOL {
                    Err(Error::MorseViolation { v2, tol: MORSE_TOL })
                } else {
                    Ok((-v2).sqrt())
                }
            })
            .collect()
    }

    /// Returns a copy with additional perturbation modes and the same `epsilon`.
    pub fn with_extra_modes(&self, extra: &[Mode]) -> SystemSpec {
        let mut sys = self.clone();
        sys.perturbation.modes.extend_from_slice(extra);
        sys
    }
}

/// The classical pendulum potential `V(q) = cos(q) - 1`.
pub fn classical_potential() -> FourierSeries {
    FourierSeries::new(vec![(1, 1.0, 0.0), (0, -1.0, 0.0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn classical_pendulum() -> PendulumSpec {
        PendulumSpec::new(classical_potential(), 1.0).unwrap()
    }

    fn simple_system(modes: Vec<Mode>) -> SystemSpec {
        SystemSpec::new(
            RotorSpec::quadratic(1),
            vec![classical_pendulum()],
            PerturbationSpec { modes },
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn h0_values() {
        let sys = simple_system(vec![]);
        assert_eq!(sys.eval_h0(&[0.0], &[0.0], &[0.0]).unwrap(), 0.0);
        // (p=2, q=pi, I=1): 1/2 + (2 + cos pi - 1) = 0.5
        let v = sys.eval_h0(&[2.0], &[PI], &[1.0]).unwrap();
        assert_relative_eq!(v, 0.5, max_relative = 1e-14);
    }

    #[test]
    fn h0_sign_cancellation() {
        let sys = SystemSpec::new(
            RotorSpec::quadratic(1),
            vec![
                classical_pendulum(),
                PendulumSpec::new(classical_potential(), -1.0).unwrap(),
            ],
            PerturbationSpec::empty(),
            0.0,
        )
        .unwrap();
        let v = sys.eval_h0(&[1.0, 1.0], &[0.0, 0.0], &[0.0]).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn h0_dimension_mismatch() {
        let sys = simple_system(vec![]);
        assert!(matches!(
            sys.eval_h0(&[0.0, 0.0], &[0.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn h1_empty_is_zero() {
        let sys = simple_system(vec![]);
        assert_eq!(sys.eval_h1(&[1.2], &[0.3], 7.0).unwrap(), 0.0);
    }

    #[test]
    fn h1_single_mode() {
        let sys = simple_system(vec![Mode {
            k: vec![1],
            l: vec![0],
            m: 1,
            amplitude: 1.0,
            phase: 0.0,
        }]);
        assert_relative_eq!(sys.eval_h1(&[0.0], &[0.0], 0.0).unwrap(), 1.0);
    }

    /// `(cos q - 1) cos t` expanded into product-to-sum modes.
    pub(crate) fn cosq_cost_modes() -> Vec<Mode> {
        vec![
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
        ]
    }

    #[test]
    fn h1_product_mode_expansion() {
        let sys = simple_system(cosq_cost_modes());
        let q = PI / 2.0;
        let t = PI / 3.0;
        let direct = (q.cos() - 1.0) * t.cos();
        assert_relative_eq!(
            sys.eval_h1(&[q], &[0.0], t).unwrap(),
            direct,
            epsilon = 1e-15
        );
        assert_relative_eq!(direct, -0.5, epsilon = 1e-15);
        // and the full product at a few other points
        for (q, t) in [(0.1, 2.0), (3.0, -1.0), (5.5, 10.0)] {
            assert_relative_eq!(
                sys.eval_h1(&[q], &[0.0], t).unwrap(),
                (q.cos() - 1.0) * t.cos(),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn characteristic_exponent_classical() {
        let sys = simple_system(vec![]);
        let l = sys.characteristic_exponents().unwrap();
        assert_relative_eq!(l[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn characteristic_exponent_scaled() {
        // V = 4(cos q - 1) has lambda = 2
        let pen = PendulumSpec::new(FourierSeries::new(vec![(1, 4.0, 0.0), (0, -4.0, 0.0)]), 1.0)
            .unwrap();
        assert_relative_eq!(pen.lambda(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn morse_violation_flipped_potential() {
        // V = -(cos q - 1) has a minimum at 0: V''(0) = +1
        let r = PendulumSpec::new(FourierSeries::new(vec![(1, -1.0, 0.0), (0, 1.0, 0.0)]), 1.0);
        assert!(matches!(r, Err(Error::MorseViolation { .. })));
    }

    #[test]
    fn equal_height_double_maximum_rejected() {
        // V = cos(2q) - 1 peaks at both q = 0 and q = pi
        let v = FourierSeries::new(vec![(2, 1.0, 0.0), (0, -1.0, 0.0)]);
        assert!(matches!(
            PendulumSpec::new(v, 1.0),
            Err(Error::NotUniqueMaximum { .. })
        ));
    }

    #[test]
    fn shifted_maximum_rejected() {
        // V = cos(q - 1) has its maximum at q = 1, not 0; V'(0) != 0.
        let v = FourierSeries::new(vec![(1, (1.0f64).cos(), (1.0f64).sin())]);
        assert!(PendulumSpec::new(v, 1.0).is_err());
    }

    #[test]
    fn h1_periodicity() {
        let modes = vec![
            Mode {
                k: vec![2],
                l: vec![-1],
                m: 3,
                amplitude: 0.7,
                phase: 1.1,
            },
            Mode {
                k: vec![-1],
                l: vec![2],
                m: 0,
                amplitude: -0.2,
                phase: 0.4,
            },
        ];
        let sys = simple_system(modes);
        let mut rng_state = 42u64;
        let mut rand01 = move || {
            rng_state = rng_state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let q = 6.0 * rand01();
            let phi = 6.0 * rand01();
            let t = 6.0 * rand01();
            let base = sys.eval_h1(&[q], &[phi], t).unwrap();
            assert!((sys.eval_h1(&[q + 2.0 * PI], &[phi], t).unwrap() - base).abs() < 1e-12);
            assert!((sys.eval_h1(&[q], &[phi + 2.0 * PI], t).unwrap() - base).abs() < 1e-12);
            assert!((sys.eval_h1(&[q], &[phi], t + 2.0 * PI).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let modes = vec![
            Mode {
                k: vec![2],
                l: vec![-1],
                m: 3,
                amplitude: 0.7,
                phase: 1.1,
            },
            Mode {
                k: vec![1],
                l: vec![1],
                m: -2,
                amplitude: 0.3,
                phase: 2.0,
            },
        ];
        let sys = simple_system(modes);
        let h = 1e-5;
        let mut rng_state = 7u64;
        let mut rand01 = move || {
            rng_state = rng_state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let q = [6.0 * rand01()];
            let phi = [6.0 * rand01()];
            let t = 6.0 * rand01();
            let mut gq = [0.0];
            let mut gphi = [0.0];
            sys.grad_h1_q(&q, &phi, t, &mut gq);
            sys.grad_h1_phi(&q, &phi, t, &mut gphi);
            let fd_q = (sys.eval_h1(&[q[0] + h], &phi, t).unwrap()
                - sys.eval_h1(&[q[0] - h], &phi, t).unwrap())
                / (2.0 * h);
            let fd_phi = (sys.eval_h1(&q, &[phi[0] + h], t).unwrap()
                - sys.eval_h1(&q, &[phi[0] - h], t).unwrap())
                / (2.0 * h);
            let fd_t = (sys.eval_h1(&q, &phi, t + h).unwrap()
                - sys.eval_h1(&q, &phi, t - h).unwrap())
                / (2.0 * h);
            assert_relative_eq!(gq[0], fd_q, max_relative = 1e-6, epsilon = 1e-9);
            assert_relative_eq!(gphi[0], fd_phi, max_relative = 1e-6, epsilon = 1e-9);
            assert_relative_eq!(
                sys.dh1_dt(&q, &phi, t),
                fd_t,
                max_relative = 1e-6,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn rotor_gradient_and_hessian() {
        // h(I) = I1^2/2 + I1 I2^3 + 2 I2
        let rotor = RotorSpec::new(
            2,
            vec![
                Monomial {
                    powers: vec![2, 0],
                    coeff: 0.5,
                },
                Monomial {
                    powers: vec![1, 3],
                    coeff: 1.0,
                },
                Monomial {
                    powers: vec![0, 1],
                    coeff: 2.0,
                },
            ],
        )
        .unwrap();
        let i = [1.5, -0.7];
        let w = rotor.omega(&i);
        // dh/dI1 = I1 + I2^3, dh/dI2 = 3 I1 I2^2 + 2
        assert_relative_eq!(w[0], 1.5 + (-0.7f64).powi(3), epsilon = 1e-14);
        assert_relative_eq!(w[1], 3.0 * 1.5 * 0.49 + 2.0, epsilon = 1e-13);
        let dw = rotor.d_omega(&i);
        assert_relative_eq!(dw[0], 1.0, epsilon = 1e-14); // d2h/dI1^2
        assert_relative_eq!(dw[1], 3.0 * 0.49, epsilon = 1e-13); // d2h/dI1dI2
        assert_relative_eq!(dw[2], dw[1], epsilon = 1e-14); // symmetry
        assert_relative_eq!(dw[3], 6.0 * 1.5 * -0.7, epsilon = 1e-13);
        // degree > 4 rejected
        assert!(RotorSpec::new(
            1,
            vec![Monomial {
                powers: vec![5],
                coeff: 1.0
            }]
        )
        .is_err());
    }
}

#[cfg(test)]
mod h0_gradient_tests {
    use super::tests::cosq_cost_modes;
    use super::*;

    /// Analytic partials of the unperturbed energy match central differences.
    #[test]
    fn h0_partials_match_finite_differences() {
        let sys = SystemSpec::new(
            RotorSpec::quadratic(1),
            vec![PendulumSpec::new(classical_potential(), -1.0).unwrap()],
            PerturbationSpec {
                modes: cosq_cost_modes(),
            },
            0.0,
        )
        .unwrap();
        let h = 1e-5;
        let mut state = 3u64;
        let mut rand01 = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let (p, q, i) = (2.0 * rand01() - 1.0, 6.0 * rand01(), 2.0 * rand01() - 1.0);
            let sigma = sys.pendulums[0].sign;
            let dp = sigma * p;
            let dq = sigma * sys.pendulums[0].fourier_coeffs.d1(q);
            let di = sys.rotor.omega(&[i])[0];
            let fd_p = (sys.eval_h0(&[p + h], &[q], &[i]).unwrap()
                - sys.eval_h0(&[p - h], &[q], &[i]).unwrap())
                / (2.0 * h);
            let fd_q = (sys.eval_h0(&[p], &[q + h], &[i]).unwrap()
                - sys.eval_h0(&[p], &[q - h], &[i]).unwrap())
                / (2.0 * h);
            let fd_i = (sys.eval_h0(&[p], &[q], &[i + h]).unwrap()
                - sys.eval_h0(&[p], &[q], &[i - h]).unwrap())
                / (2.0 * h);
            assert!((dp - fd_p).abs() < 1e-6 * (1.0 + fd_p.abs()));
            assert!((dq - fd_q).abs() < 1e-6 * (1.0 + fd_q.abs()));
            assert!((di - fd_i).abs() < 1e-6 * (1.0 + fd_i.abs()));
        }
    }
}

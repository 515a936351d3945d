//! Adaptive Gauss-Kronrod (G7, K15) quadrature for vector-valued integrands.
//!
//! Panels are bisected worst-error-first until every component's accumulated
//! error estimate falls below the target or the panel budget runs out.

use crate::error::{Error, Result};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

// Abscissae (positive half) and weights of the 15-point Kronrod rule with the
// embedded 7-point Gauss rule, on [-1, 1].
const XGK: [f64; 8] = [
    0.991455371120812639,
    0.949107912342758525,
    0.864864423359769073,
    0.741531185599394440,
    0.586087235467691130,
    0.405845151377397167,
    0.207784955007898468,
    0.0,
];
const WGK: [f64; 8] = [
    0.0229353220105292250,
    0.0630920926299785533,
    0.104790010322250184,
    0.140653259715525919,
    0.169004726639267903,
    0.190350578064785410,
    0.204432940075298892,
    0.209482141084727828,
];
const WG: [f64; 4] = [
    0.129484966168869693,
    0.279705391489276667,
    0.381830050505118945,
    0.417959183673469388,
];

pub struct QuadOutcome {
    pub value: Vec<f64>,
    /// Accumulated per-component error estimate (max over components).
    pub error: f64,
    pub panels: usize,
}

struct Panel {
    a: f64,
    b: f64,
    value: Vec<f64>,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .partial_cmp(&other.error)
            .unwrap_or(Ordering::Equal)
    }
}

fn gk15<F: FnMut(f64, &mut [f64])>(f: &mut F, a: f64, b: f64, dim: usize) -> Panel {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut kronrod = vec![0.0; dim];
    let mut gauss = vec![0.0; dim];
    let mut buf = vec![0.0; dim];

    f(center, &mut buf);
    for (kr, &v) in kronrod.iter_mut().zip(&buf) {
        *kr += WGK[7] * v;
    }
    for (gr, &v) in gauss.iter_mut().zip(&buf) {
        *gr += WG[3] * v;
    }
    for j in 0..7 {
        let dx = half * XGK[j];
        let mut sum = vec![0.0; dim];
        f(center - dx, &mut buf);
        for (s, &v) in sum.iter_mut().zip(&buf) {
            *s += v;
        }
        f(center + dx, &mut buf);
        for (s, &v) in sum.iter_mut().zip(&buf) {
            *s += v;
        }
        for (kr, &v) in kronrod.iter_mut().zip(&sum) {
            *kr += WGK[j] * v;
        }
        if j % 2 == 1 {
            // odd indices are the Gauss-7 nodes
            for (gr, &v) in gauss.iter_mut().zip(&sum) {
                *gr += WG[j / 2] * v;
            }
        }
    }
    let mut err: f64 = 0.0;
    for (kr, gr) in kronrod.iter_mut().zip(&gauss) {
        *kr *= half;
        err = err.max((*kr - gr * half).abs());
    }
    Panel {
        a,
        b,
        value: kronrod,
        error: err,
    }
}

/// Integrates `f` over `[a, b]`, bisecting adaptively.
///
/// `f(t, out)` fills `out` with the `dim` integrand components. The target is
/// an absolute error `tol` on each component. On panel exhaustion the best
/// estimate is returned inside `Error::AccuracyError` context by the caller;
/// here we return the outcome with its honest error so callers can decide.
pub fn adaptive_gk<F: FnMut(f64, &mut [f64])>(
    mut f: F,
    a: f64,
    b: f64,
    dim: usize,
    tol: f64,
    max_panels: usize,
    initial_panels: usize,
) -> Result<QuadOutcome> {
    if !(a < b) {
        return Err(Error::InvalidInput(format!(
            "bad quadrature interval [{a}, {b}]"
        )));
    }
    let n0 = initial_panels.max(1);
    let mut heap = BinaryHeap::new();
    let mut total_err = 0.0;
    for j in 0..n0 {
        let pa = a + (b - a) * j as f64 / n0 as f64;
        let pb = a + (b - a) * (j + 1) as f64 / n0 as f64;
        let p = gk15(&mut f, pa, pb, dim);
        total_err += p.error;
        heap.push(p);
    }
    let mut panels = n0;
    while total_err > tol && panels < max_panels {
        let worst = heap.pop().expect("heap never empty");
        if worst.error <= 0.0 {
            heap.push(worst);
            break;
        }
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // interval at floating-point resolution; cannot refine further
            heap.push(worst);
            break;
        }
        total_err -= worst.error;
        let left = gk15(&mut f, worst.a, mid, dim);
        let right = gk15(&mut f, mid, worst.b, dim);
        total_err += left.error + right.error;
        heap.push(left);
        heap.push(right);
        panels += 1;
    }
    let mut value = vec![0.0; dim];
    for p in heap.iter() {
        for (v, pv) in value.iter_mut().zip(&p.value) {
            *v += pv;
        }
    }
    Ok(QuadOutcome {
        value,
        error: total_err,
        panels,
    })
}

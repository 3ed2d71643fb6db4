//! One-dimensional quadrature rules: Gauss–Hermite and Gauss–Legendre
//! nodes by Newton iteration on the three-term recurrences, and a globally
//! adaptive Gauss–Kronrod (7, 15) integrator for complex integrands.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use faer::{Mat, Side};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Nodes and weights of a 1D rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Rule for `E[f(X)]`, `X ~ N(0, 1)`: weights sum to one.
pub fn gauss_hermite_normal(n: usize) -> Rule {
    let (x, w) = gauss_hermite_physicists(n);
    let scale = 1.0 / PI.sqrt();
    Rule {
        nodes: x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
        weights: w.iter().map(|v| v * scale).collect(),
    }
}

/// Nodes and weights for weight `exp(-x^2)`, ascending. Golub–Welsch
/// supplies the starting points, Newton on the normalised recurrence
/// polishes nodes and weights.
fn gauss_hermite_physicists(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let jacobi = Mat::<f64>::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut guesses = jacobi
        .self_adjoint_eigenvalues(Side::Lower)
        .expect("tridiagonal eigenproblem");
    guesses.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for (k, &g) in guesses.iter().enumerate() {
        let mut z = g;
        let mut pp = 0.0;
        for _ in 0..20 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[k] = z;
        w[k] = 2.0 / (pp * pp);
    }
    // enforce exact symmetry
    for k in 0..n / 2 {
        let xs = 0.5 * (x[n - 1 - k] - x[k]);
        let ws = 0.5 * (w[k] + w[n - 1 - k]);
        x[k] = -xs;
        x[n - 1 - k] = xs;
        w[k] = ws;
        w[n - 1 - k] = ws;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Gauss–Legendre rule on `[-1, 1]`, ascending.
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    Rule { nodes: x, weights: w }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> Complex64, a: f64, b: f64) -> (Complex64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for k in 0..7 {
        let dx = h * XGK[k];
        let s = f(c - dx) + f(c + dx);
        kron += s * WGK[k];
        if k % 2 == 1 {
            gauss += s * WG[k / 2];
        }
    }
    let kron = kron * h;
    let gauss = gauss * h;
    (kron, (kron - gauss).norm())
}

struct Segment {
    a: f64,
    b: f64,
    value: Complex64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveResult {
    pub value: Complex64,
    pub error: f64,
    pub segments: usize,
}

/// Globally adaptive GK15 on `[a, b]` until the summed error estimate is
/// below `abs_tol`.
pub fn integrate_adaptive(
    f: impl Fn(f64) -> Complex64,
    a: f64,
    b: f64,
    abs_tol: f64,
    max_segments: usize,
) -> Result<AdaptiveResult> {
    let mut heap = BinaryHeap::new();
    let (value, error) = gk15(&f, a, b);
    heap.push(Segment { a, b, value, error });
    let mut err = error;
    let mut segments = 1;
    while !(err <= abs_tol) {
        if segments >= max_segments || !err.is_finite() {
            return Err(Error::NoConvergence {
                estimate: err,
                tolerance: abs_tol,
            });
        }
        let seg = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (seg.a + seg.b);
        let (v1, e1) = gk15(&f, seg.a, mid);
        let (v2, e2) = gk15(&f, mid, seg.b);
        heap.push(Segment { a: seg.a, b: mid, value: v1, error: e1 });
        heap.push(Segment { a: mid, b: seg.b, value: v2, error: e2 });
        segments += 1;
        // summed afresh: a running total cancels badly once a huge segment is split
        err = heap.iter().map(|s| s.error).sum();
    }
    let value: Complex64 = heap.iter().map(|s| s.value).sum();
    Ok(AdaptiveResult { value, error: err, segments })
}

/// Real-valued convenience wrapper around [`integrate_adaptive`].
pub fn integrate_real(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    abs_tol: f64,
    max_segments: usize,
) -> Result<(f64, f64)> {
    let r = integrate_adaptive(|x| Complex64::new(f(x), 0.0), a, b, abs_tol, max_segments)?;
    Ok((r.value.re, r.error))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        for n in [1usize, 2, 5, 16, 64, 200] {
            let r = gauss_hermite_normal(n);
            let m0: f64 = r.weights.iter().sum();
            assert!((m0 - 1.0).abs() < 1e-13, "n={n} m0={m0}");
            if n >= 3 {
                let m2: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
                let m4: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(4)).sum();
                assert!((m2 - 1.0).abs() < 1e-12, "n={n} m2={m2}");
                assert!((m4 - 3.0).abs() < 1e-11, "n={n} m4={m4}");
            }
            assert!(r.nodes.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn hermite_characteristic_function() {
        // E[cos(tX)] = exp(-t^2/2)
        let r = gauss_hermite_normal(64);
        let v: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * (1.5 * x).cos()).sum();
        assert!((v - (-1.125f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn legendre_polynomials_exact() {
        let r = gauss_legendre(10);
        let s: f64 = r.weights.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        let m18: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(18)).sum();
        assert!((m18 - 2.0 / 19.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_near_pole() {
        // int_{-1}^{1} dx / (x - 0.3 - 0.01i) = log((0.7 - 0.01i)/(-1.3 - 0.01i))
        let z0 = Complex64::new(0.3, 0.01);
        let r = integrate_adaptive(|x| (Complex64::new(x, 0.0) - z0).inv(), -1.0, 1.0, 1e-12, 10_000).unwrap();
        let exact = ((Complex64::new(1.0, 0.0) - z0) / (Complex64::new(-1.0, 0.0) - z0)).ln();
        assert!((r.value - exact).norm() < 1e-11);
    }

    #[test]
    fn adaptive_sqrt_endpoint() {
        let (v, _) = integrate_real(|x| (1.0 - x * x).max(0.0).sqrt(), -1.0, 1.0, 1e-12, 20_000).unwrap();
        assert!((v - PI / 2.0).abs() < 1e-11);
    }

    #[test]
    fn adaptive_reports_non_convergence() {
        let r = integrate_adaptive(|x| Complex64::new(1.0 / x.abs().sqrt().max(1e-300), 0.0), -1.0, 1.0, 1e-14, 20);
        assert!(matches!(r, Err(Error::NoConvergence { .. })));
    }
}

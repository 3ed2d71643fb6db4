//! Saddle-point package at energy `E`: the semicircle density, the complex
//! saddle `calE = E/2 - i sqrt(1 - E^2/4)`, the masses `m_r^2`, `m_i^2`,
//! the double-well profiles and the interaction vertices of the shifted
//! dual integral.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::kernel::{DecayFit, KernelKind, KernelMatrix, RadialProfile, TransformMethod, DENSE_TRANSFORM_LIMIT};
use crate::lattice::LatticeTorus;
use crate::quadrature::integrate_adaptive;

pub const DEFAULT_ETA: f64 = 0.1;
/// Upper end of the energy window.
pub const E_MAX: f64 = 1.8;

const I: Complex64 = Complex64::new(0.0, 1.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

pub fn semicircle(e: f64) -> f64 {
    if e.abs() >= 2.0 {
        0.0
    } else {
        (1.0 - e * e / 4.0).sqrt() / PI
    }
}

/// Stieltjes transform `int rho_sc(x) / (z - x) dx` for `Im z > 0`.
pub fn semicircle_stieltjes(z: Complex64) -> Complex64 {
    // branch chosen so that the result behaves like 1/z at infinity
    let s = (z - 2.0).sqrt() * (z + 2.0).sqrt();
    (z - s) / 2.0
}

/// Semicircle smoothed with a Lorentzian of half-width `eps`.
pub fn semicircle_broadened(e: f64, eps: f64) -> f64 {
    -semicircle_stieltjes(Complex64::new(e, eps)).im / PI
}

/// `calE(E)` for any `|E| < 2`, without the window check.
pub fn cal_e(e: f64) -> Complex64 {
    Complex64::new(e / 2.0, -(1.0 - e * e / 4.0).sqrt())
}

/// Checks `eta < |E| <= 1.8`.
pub fn check_window(e: f64, eta: f64) -> Result<()> {
    if !e.is_finite() {
        return Err(Error::EnergyWindow { energy: e, reason: "not finite".into() });
    }
    if e.abs() <= eta {
        return Err(Error::EnergyWindow {
            energy: e,
            reason: format!("|E| must exceed eta = {eta}"),
        });
    }
    if e.abs() > E_MAX {
        return Err(Error::EnergyWindow {
            energy: e,
            reason: format!("|E| must not exceed {E_MAX}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaddleData {
    #[serde(rename = "E")]
    pub e: f64,
    pub cal_e: Complex64,
    pub cal_e_r: f64,
    /// Positive magnitude, `Im calE = -cal_e_i`.
    pub cal_e_i: f64,
    pub rho_sc: f64,
    pub m_r2: f64,
    pub m_i2: f64,
    /// Critical points `calE_r +- i calE_i` of `f1`.
    pub saddle_a: [Complex64; 2],
    /// Critical points `-i calE_r +- calE_i` of `f2`.
    pub saddle_b: [Complex64; 2],
}

impl SaddleData {
    /// Saddle data for `|E| < 2` without enforcing the window.
    pub fn unchecked(e: f64) -> Self {
        let s = (1.0 - e * e / 4.0).sqrt();
        let r = e / 2.0;
        Self {
            e,
            cal_e: Complex64::new(r, -s),
            cal_e_r: r,
            cal_e_i: s,
            rho_sc: s / PI,
            m_r2: 2.0 * (1.0 - e * e / 4.0),
            m_i2: e * s,
            saddle_a: [Complex64::new(r, s), Complex64::new(r, -s)],
            saddle_b: [Complex64::new(s, -r), Complex64::new(-s, -r)],
        }
    }

    /// `1 - calE^2 = m_r^2 + i m_i^2`, the mass of the Hessian kernel.
    pub fn hessian_mass(&self) -> Complex64 {
        Complex64::new(self.m_r2, self.m_i2)
    }

    /// `f1(a) = a^2/2 + ln(E - a)`.
    pub fn f1(&self, a: Complex64) -> Complex64 {
        a * a / 2.0 + (self.e - a).ln()
    }

    pub fn f1_prime(&self, a: Complex64) -> Complex64 {
        a - (self.e - a).inv()
    }

    pub fn f1_second(&self, a: Complex64) -> Complex64 {
        let d = self.e - a;
        ONE - (d * d).inv()
    }

    /// `f2(b) = b^2/2 - ln(E - i b)`.
    pub fn f2(&self, b: Complex64) -> Complex64 {
        b * b / 2.0 - (self.e - I * b).ln()
    }

    pub fn f2_prime(&self, b: Complex64) -> Complex64 {
        b + I / (self.e - I * b)
    }

    pub fn f2_second(&self, b: Complex64) -> Complex64 {
        let d = self.e - I * b;
        ONE - (d * d).inv()
    }

    /// `|exp(-(f1(a + calE) - f1(calE)))|` for real `a`.
    pub fn well_f1(&self, a: f64) -> f64 {
        let x = Complex64::new(a, 0.0) * self.cal_e;
        (-a * a / 2.0 - a * self.cal_e_r).exp() / (ONE - x).norm()
    }

    /// `|exp(-(f2(b - i calE) - f2(-i calE)))|` for real `b`.
    pub fn well_f2(&self, b: f64) -> f64 {
        let x = I * b * self.cal_e;
        (-b * b / 2.0 + b * self.cal_e_i).exp() * (ONE - x).norm()
    }
}

pub fn saddle_data(e: f64, eta: f64) -> Result<SaddleData> {
    if !(eta > 0.0) {
        return Err(param("eta", format!("must be positive, got {eta}")));
    }
    check_window(e, eta)?;
    Ok(SaddleData::unchecked(e))
}

/// Residuals of the saddle identities at one energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaddleInvariants {
    #[serde(rename = "E")]
    pub e: f64,
    /// `|calE calE^* - 1|`
    pub unit_modulus: f64,
    /// `|E - calE - calE^*|`
    pub conjugate: f64,
    /// `|f1'(calE)|`
    pub f1_stationary: f64,
    /// `|f2'(-i calE)|`
    pub f2_stationary: f64,
    /// `|f1''(calE) - (1 - calE^2)|`
    pub f1_curvature: f64,
    /// `|f2''(-i calE) - (1 - calE^2)|`
    pub f2_curvature: f64,
    /// `|F2(0) - 1|`
    pub well_zero: f64,
    /// `|F2(2 calE_i) - 1|`
    pub well_second: f64,
}

impl SaddleInvariants {
    pub fn algebraic_max(&self) -> f64 {
        self.unit_modulus.max(self.conjugate)
    }

    pub fn analytic_max(&self) -> f64 {
        [
            self.f1_stationary,
            self.f2_stationary,
            self.f1_curvature,
            self.f2_curvature,
            self.well_zero,
            self.well_second,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn saddle_invariants(s: &SaddleData) -> SaddleInvariants {
    let ce = s.cal_e;
    let mass = ONE - ce * ce;
    let b0 = -I * ce;
    SaddleInvariants {
        e: s.e,
        unit_modulus: (ce * ce.conj() - 1.0).norm(),
        conjugate: (s.e - ce - ce.conj()).norm(),
        f1_stationary: s.f1_prime(ce).norm(),
        f2_stationary: s.f2_prime(b0).norm(),
        f1_curvature: (s.f1_second(ce) - mass).norm(),
        f2_curvature: (s.f2_second(b0) - mass).norm(),
        well_zero: (s.well_f2(0.0) - 1.0).abs(),
        well_second: (s.well_f2(2.0 * s.cal_e_i) - 1.0).abs(),
    }
}

/// `count` evenly spaced energies over `eta < E <= E_MAX` on both sides of zero.
pub fn window_grid(count: usize, eta: f64) -> Vec<f64> {
    let half = count / 2;
    let pos = count - half;
    let step = |k: usize, m: usize| eta + (E_MAX - eta) * (k + 1) as f64 / m as f64;
    let mut out: Vec<f64> = (0..half).rev().map(|k| -step(k, half)).collect();
    out.extend((0..pos).map(|k| step(k, pos)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WellProfiles {
    #[serde(rename = "E")]
    pub e: f64,
    /// False when `E` lies outside the window; the values are still computed.
    pub in_window: bool,
    pub a: Vec<f64>,
    pub f1: Vec<f64>,
    pub b: Vec<f64>,
    pub f2: Vec<f64>,
}

impl WellProfiles {
    /// Grid index of the largest `F1`.
    pub fn argmax_f1(&self) -> usize {
        self.f1
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// CSV rows `(z, F1, F2)`; both grids must coincide.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        if self.a != self.b {
            return Err(Error::Dimension("profile grids differ, cannot share a z column".into()));
        }
        let rows = self.a.iter().enumerate().map(|(k, z)| {
            vec![
                crate::kernel::fmt_f64(*z),
                crate::kernel::fmt_f64(self.f1[k]),
                crate::kernel::fmt_f64(self.f2[k]),
            ]
        });
        crate::io::write_csv(path, &["z", "F1", "F2"], rows)
    }
}

/// Double-well profiles on the given grids. Energies with `|E| >= 2` are rejected;
/// energies outside the window are computed but flagged.
pub fn well_profiles(e: f64, a_grid: &[f64], b_grid: &[f64]) -> Result<WellProfiles> {
    if !(e.abs() < 2.0) {
        return Err(Error::EnergyWindow {
            energy: e,
            reason: "profiles need |E| < 2".into(),
        });
    }
    let s = SaddleData::unchecked(e);
    Ok(WellProfiles {
        e,
        in_window: check_window(e, DEFAULT_ETA).is_ok(),
        a: a_grid.to_vec(),
        f1: a_grid.iter().map(|&a| s.well_f1(a)).collect(),
        b: b_grid.to_vec(),
        f2: b_grid.iter().map(|&b| s.well_f2(b)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    A,
    B,
}

/// Remainder `sum_{k>=3} x^k / k = -ln(1 - x) - x - x^2/2`.
pub(crate) fn log_remainder(x: Complex64) -> Complex64 {
    if x.norm() < 0.05 {
        let mut term = x * x * x;
        let mut sum = Complex64::default();
        for k in 3..40 {
            sum += term / k as f64;
            term *= x;
        }
        sum
    } else {
        -(ONE - x).ln() - x - x * x / 2.0
    }
}

/// Vertex `V(z)` by adaptive quadrature of its `t`-integral to 1e-12.
pub fn vertex_v(z: Complex64, e: f64, branch: Branch) -> Result<Complex64> {
    let ce = cal_e(e).conj();
    let (w, sign) = match branch {
        Branch::A => (z, 1.0),
        Branch::B => (I * z, -1.0),
    };
    if w == Complex64::default() {
        return Ok(Complex64::default());
    }
    let w3 = w * w * w;
    let r = integrate_adaptive(
        |t| {
            let d = ce - t * w;
            (1.0 - t) * (1.0 - t) * w3 / (d * d * d)
        },
        0.0,
        1.0,
        1e-12,
        4000,
    )?;
    Ok(sign * r.value)
}

/// Closed form of [`vertex_v`]: `+-R(w / calE^*)` with `R` the log remainder.
pub fn vertex_v_closed(z: Complex64, e: f64, branch: Branch) -> Complex64 {
    let ce = cal_e(e);
    match branch {
        Branch::A => log_remainder(z * ce),
        Branch::B => -log_remainder(I * z * ce),
    }
}

/// `D(a, b) = calE^2 - 1/((calE^* - a)(calE^* - i b))`.
pub fn vertex_d(a: f64, b: f64, e: f64) -> Complex64 {
    let ce = cal_e(e);
    let cs = ce.conj();
    ce * ce - ((cs - a) * (cs - I * b)).inv()
}

/// The `t`-integral representation of [`vertex_d`].
pub fn vertex_d_integral(a: f64, b: f64, e: f64) -> Result<Complex64> {
    let cs = cal_e(e).conj();
    let ib = I * b;
    let r = integrate_adaptive(
        |t| {
            let p = cs - t * a;
            let q = cs - t * ib;
            a / (p * p * q) + ib / (p * q * q)
        },
        0.0,
        1.0,
        1e-12,
        4000,
    )?;
    Ok(-r.value)
}

/// Observable vertex `V'_0 = -ln(calE^* - a_0)`.
pub fn vertex_v_obs(a0: f64, e: f64) -> Complex64 {
    -(cal_e(e).conj() - a0).ln()
}

/// Observable vertex `D'_0 = -1/((calE^* - a_0)(calE^* - i b_0))`.
pub fn vertex_d_obs(a0: f64, b0: f64, e: f64) -> Complex64 {
    let cs = cal_e(e).conj();
    -((cs - a0) * (cs - I * b0)).inv()
}

fn kernel_method(torus: &LatticeTorus) -> TransformMethod {
    if torus.volume() <= DENSE_TRANSFORM_LIMIT {
        TransformMethod::ModeSum
    } else {
        TransformMethod::Fft
    }
}

/// Real covariance `C = (-W^2 Delta + m_r^2)^{-1}`.
pub fn covariance_c(torus: &LatticeTorus, bandwidth: usize, saddle: &SaddleData) -> Result<KernelMatrix> {
    KernelMatrix::build(torus, bandwidth, Complex64::new(saddle.m_r2, 0.0), KernelKind::C)
}

/// Hessian covariance `B = (-W^2 Delta + 1 - calE^2)^{-1}`.
pub fn hessian_b(torus: &LatticeTorus, bandwidth: usize, saddle: &SaddleData) -> Result<KernelMatrix> {
    KernelMatrix::build(torus, bandwidth, saddle.hessian_mass(), KernelKind::B)
}

/// `G = (1 + i m_i^2 C)^{-1}`, built from its Fourier symbol.
pub fn g_kernel(torus: &LatticeTorus, bandwidth: usize, saddle: &SaddleData) -> Result<KernelMatrix> {
    let w2 = (bandwidth * bandwidth) as f64;
    let (mr, mi) = (saddle.m_r2, saddle.m_i2);
    KernelMatrix::from_symbol(
        torus,
        bandwidth,
        saddle.hessian_mass(),
        KernelKind::Custom,
        kernel_method(torus),
        |lambda| {
            let c = 1.0 / (w2 * lambda + mr);
            (ONE + I * mi * c).inv()
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GDecayReport {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "W")]
    pub w: usize,
    pub fit: DecayFit,
    /// `m_r / (2W)`.
    pub rate_bound: f64,
    pub value_at_w: f64,
    pub value_at_half_side: f64,
    /// `|G_ii - 1|`.
    pub diag_deviation: f64,
    /// `10 m_i^2 C_ii`.
    pub diag_bound: f64,
    pub profile: RadialProfile,
}

impl GDecayReport {
    pub fn passes(&self) -> bool {
        self.fit.rate >= self.rate_bound
            && self.value_at_half_side < self.value_at_w
            && self.diag_deviation <= self.diag_bound
    }
}

/// Fits the off-diagonal decay of `G` over radii in `[W, min(side)/2]`.
pub fn g_decay_check(e: f64, bandwidth: usize, torus: &LatticeTorus) -> Result<GDecayReport> {
    let saddle = saddle_data(e, DEFAULT_ETA)?;
    if torus.min_side() < 4 * bandwidth {
        return Err(Error::Geometry(format!(
            "min side {} is below 4W = {}",
            torus.min_side(),
            4 * bandwidth
        )));
    }
    let g = g_kernel(torus, bandwidth, &saddle)?;
    let c = covariance_c(torus, bandwidth, &saddle)?;
    let mut profile = g.radial_profile();
    profile.points.retain(|p| p.radius > 0.0);
    let half = torus.min_side() as f64 / 2.0;
    let fit = profile.fit(bandwidth as f64, half, 0.0)?;
    let at = |r: f64| {
        profile
            .value_at(r)
            .ok_or_else(|| Error::Geometry(format!("no site at radius {r}")))
    };
    Ok(GDecayReport {
        e,
        w: bandwidth,
        rate_bound: 0.5 * saddle.m_r2.sqrt() / bandwidth as f64,
        value_at_w: at(bandwidth as f64)?,
        value_at_half_side: at(half.floor())?,
        diag_deviation: (g.row()[0] - 1.0).norm(),
        diag_bound: 10.0 * saddle.m_i2 * c.row()[0].re,
        fit,
        profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn semicircle_values() {
        assert!((semicircle(0.0) - 1.0 / PI).abs() < 1e-15);
        assert_eq!(semicircle(2.0), 0.0);
        assert_eq!(semicircle(-2.0), 0.0);
        assert!((semicircle(1.0) - 3f64.sqrt() / (2.0 * PI)).abs() < 1e-15);
        assert!(semicircle(1.999_999_9) < 1e-3);
    }

    #[test]
    fn broadened_semicircle_tends_to_sharp() {
        for e in [0.0, 0.7, 1.5, -1.2] {
            assert!((semicircle_broadened(e, 1e-9) - semicircle(e)).abs() < 1e-7);
        }
        assert!(semicircle_broadened(3.0, 1e-9) < 1e-8);
    }

    #[test]
    fn saddle_at_one() {
        let s = saddle_data(1.0, DEFAULT_ETA).unwrap();
        assert!(close(s.cal_e, Complex64::new(0.5, -0.866_025_403_784_438_6), 1e-15));
        assert!((s.m_r2 - 1.5).abs() < 1e-15);
        assert!((s.m_i2 - 0.866_025_403_784_438_6).abs() < 1e-15);
        assert!((s.cal_e * s.cal_e.conj() - 1.0).norm() < 1e-14);
        assert!(close(s.hessian_mass(), ONE - s.cal_e * s.cal_e, 1e-14));
    }

    #[test]
    fn invariants_across_window() {
        let grid = window_grid(100, DEFAULT_ETA);
        assert_eq!(grid.len(), 100);
        assert!(grid.iter().all(|&e| check_window(e, DEFAULT_ETA).is_ok()));
        for e in grid {
            let inv = saddle_invariants(&saddle_data(e, DEFAULT_ETA).unwrap());
            assert!(inv.algebraic_max() < 1e-14, "{inv:?}");
            assert!(inv.analytic_max() < 1e-12, "{inv:?}");
        }
    }

    #[test]
    fn window_enforced() {
        assert!(matches!(saddle_data(0.05, 0.1), Err(Error::EnergyWindow { .. })));
        assert!(matches!(saddle_data(1.85, 0.1), Err(Error::EnergyWindow { .. })));
        assert!(saddle_data(-1.8, 0.1).is_ok());
    }

    #[test]
    fn saddle_points_are_critical() {
        let s = SaddleData::unchecked(1.3);
        for a in s.saddle_a {
            assert!(s.f1_prime(a).norm() < 1e-12);
        }
        for b in s.saddle_b {
            assert!(s.f2_prime(b).norm() < 1e-12);
        }
        assert!(close(s.saddle_b[1], -I * s.cal_e, 1e-15));
    }

    #[test]
    fn wells_at_one() {
        let s = SaddleData::unchecked(1.0);
        assert!((s.well_f2(0.0) - 1.0).abs() < 1e-12);
        assert!((s.well_f2(1.732_050_807_568_877_2) - 1.0).abs() < 1e-12);
        assert!((s.well_f1(0.0) - 1.0).abs() < 1e-15);
        assert!(s.well_f1(0.5) < 1.0 && s.well_f1(-0.5) < 1.0);
        // the profiles are |exp(-f)| evaluated straight from f1 and f2
        for x in [-1.3, 0.4, 2.2] {
            let d1 = (-(s.f1(Complex64::new(x, 0.0) + s.cal_e) - s.f1(s.cal_e))).exp().norm();
            let d2 = (-(s.f2(Complex64::new(x, 0.0) - I * s.cal_e) - s.f2(-I * s.cal_e))).exp().norm();
            assert!((d1 - s.well_f1(x)).abs() < 1e-13);
            assert!((d2 - s.well_f2(x)).abs() < 1e-13);
        }
    }

    #[test]
    fn profiles_flag_outside_window() {
        let grid: Vec<f64> = (-40..=40).map(|k| k as f64 * 0.05).collect();
        let p = well_profiles(1.0, &grid, &grid).unwrap();
        assert!(p.in_window);
        assert_eq!(grid[p.argmax_f1()], 0.0);
        let q = well_profiles(1.9, &grid, &grid).unwrap();
        assert!(!q.in_window);
        assert_ne!(grid[q.argmax_f1()], 0.0);
    }

    #[test]
    fn vertex_v_small_field_limit() {
        let e = 1.0;
        let cs = cal_e(e).conj();
        let a = Complex64::new(1e-4, 0.0);
        let v = vertex_v(a, e, Branch::A).unwrap();
        let limit = (3.0 * cs * cs * cs).inv();
        assert!((v / (a * a * a) - limit).norm() < 1e-3 * limit.norm());
        assert_eq!(vertex_v(Complex64::default(), e, Branch::B).unwrap(), Complex64::default());
    }

    #[test]
    fn vertex_v_closed_matches_quadrature() {
        for e in [-1.5, 0.5, 1.0, 1.7] {
            for z in [-3.0, -0.7, 0.2, 1.1, 4.0] {
                let z = Complex64::new(z, 0.0);
                for br in [Branch::A, Branch::B] {
                    let q = vertex_v(z, e, br).unwrap();
                    let c = vertex_v_closed(z, e, br);
                    assert!((q - c).norm() < 1e-10, "e={e} z={z} {br:?}: {q} vs {c}");
                }
            }
        }
    }

    #[test]
    fn translated_action_identity() {
        // -1/2 (1 - calE^2) a^2 + V(a) = -(f1(a + calE) - f1(calE))
        let s = SaddleData::unchecked(1.0);
        let mass = s.hessian_mass();
        for k in -10..=10 {
            let a = Complex64::new(0.3 * k as f64, 0.0);
            let lhs = -0.5 * mass * a * a + vertex_v(a, 1.0, Branch::A).unwrap();
            let rhs = -(s.f1(a + s.cal_e) - s.f1(s.cal_e));
            assert!((lhs - rhs).norm() < 1e-10, "a={a}");
            let b = a;
            let lhs = -0.5 * mass * b * b + vertex_v(b, 1.0, Branch::B).unwrap();
            let rhs = -(s.f2(b - I * s.cal_e) - s.f2(-I * s.cal_e));
            assert!((lhs - rhs).norm() < 1e-10, "b={b}");
        }
    }

    #[test]
    fn vertex_d_forms() {
        assert!(vertex_d(0.0, 0.0, 1.0).norm() < 1e-14);
        let c = vertex_d(0.3, 0.3, 1.0);
        let t = vertex_d_integral(0.3, 0.3, 1.0).unwrap();
        assert!((c - t).norm() < 1e-10);
        for (a, b) in [(-2.0, 1.5), (3.0, -0.4), (0.0, 2.0)] {
            let c = vertex_d(a, b, -0.8);
            let t = vertex_d_integral(a, b, -0.8).unwrap();
            assert!((c - t).norm() < 1e-10);
        }
        let ce = cal_e(1.0);
        assert!((vertex_d_obs(0.0, 0.0, 1.0) + ce * ce).norm() < 1e-14);
        assert!((vertex_v_obs(0.0, 1.0) + ce.conj().ln()).norm() < 1e-15);
    }

    #[test]
    fn g_equals_one_minus_b() {
        let t = LatticeTorus::new(&[6, 6]).unwrap();
        let s = SaddleData::unchecked(1.0);
        let g = g_kernel(&t, 2, &s).unwrap();
        let b = hessian_b(&t, 2, &s).unwrap();
        for (k, (gv, bv)) in g.row().iter().zip(b.row()).enumerate() {
            let expect = if k == 0 { ONE } else { Complex64::default() } - I * s.m_i2 * bv;
            assert!((gv - expect).norm() < 1e-12);
        }
    }
}

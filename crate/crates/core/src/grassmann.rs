//! Finite Grassmann algebra with dense subset-indexed storage, Berezin
//! integration and small supermatrices.
//!
//! Generators are ordered `chi_1, chi_1*, chi_2, chi_2*, ...`; bit `2i`
//! of a monomial mask is `chi_{i+1}` and bit `2i + 1` its partner. A
//! monomial is stored as the product of its generators in ascending bit
//! order, and every sign is derived from that order.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{param, Error, Result};
use crate::linalg::{det, from_mat, to_mat};
use crate::rng::stream;
use crate::susy_dual::{fermion_matrix, j_inverse, DualIntegrandSpec};

use faer::linalg::solvers::DenseSolveCore;

/// Hard cap on generator pairs (256 coefficients).
pub const MAX_PAIRS: usize = 4;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Generator {
    /// Zero-based pair index.
    pub pair: usize,
    pub conjugate: bool,
}

impl Generator {
    pub fn chi(pair: usize) -> Self {
        Self { pair, conjugate: false }
    }

    pub fn chi_star(pair: usize) -> Self {
        Self { pair, conjugate: true }
    }

    pub fn bit(self) -> usize {
        2 * self.pair + self.conjugate as usize
    }
}

/// The standard measure `prod_i dchi_i* dchi_i`, outermost first.
pub fn pair_measure(pairs: usize) -> Vec<Generator> {
    (0..pairs)
        .flat_map(|i| [Generator::chi_star(i), Generator::chi(i)])
        .collect()
}

/// Sign of `m(S) m(T) = sign * m(S | T)` for disjoint masks.
fn merge_sign(s: usize, t: usize) -> f64 {
    let mut swaps = 0u32;
    let mut rest = t;
    while rest != 0 {
        let bit = rest.trailing_zeros();
        swaps += (s >> (bit + 1)).count_ones();
        rest &= rest - 1;
    }
    if swaps % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrassmannElement {
    pairs: usize,
    coeffs: Vec<Complex64>,
}

impl GrassmannElement {
    pub fn zero(pairs: usize) -> Result<Self> {
        if pairs == 0 || pairs > MAX_PAIRS {
            return Err(param("pairs", format!("need 1..={MAX_PAIRS} generator pairs, got {pairs}")));
        }
        Ok(Self {
            pairs,
            coeffs: vec![ZERO; 1 << (2 * pairs)],
        })
    }

    pub fn scalar(pairs: usize, c: Complex64) -> Result<Self> {
        let mut g = Self::zero(pairs)?;
        g.coeffs[0] = c;
        Ok(g)
    }

    pub fn generator(pairs: usize, gen: Generator) -> Result<Self> {
        let mut g = Self::zero(pairs)?;
        if gen.pair >= pairs {
            return Err(param("generator", format!("pair {} outside an algebra of {pairs}", gen.pair)));
        }
        g.coeffs[1 << gen.bit()] = ONE;
        Ok(g)
    }

    /// Builds an element from a coefficient table of length `4^pairs`.
    pub fn from_coeffs(pairs: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        let z = Self::zero(pairs)?;
        if coeffs.len() != z.coeffs.len() {
            return Err(Error::Dimension(format!(
                "{} coefficients for {pairs} pairs",
                coeffs.len()
            )));
        }
        Ok(Self { pairs, coeffs })
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeff(&self, mask: usize) -> Complex64 {
        self.coeffs[mask]
    }

    pub fn scalar_part(&self) -> Complex64 {
        self.coeffs[0]
    }

    fn zero_like(&self) -> Self {
        Self {
            pairs: self.pairs,
            coeffs: vec![ZERO; self.coeffs.len()],
        }
    }

    fn scalar_like(&self, c: Complex64) -> Self {
        let mut g = self.zero_like();
        g.coeffs[0] = c;
        g
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| *c == ZERO)
    }

    /// No odd-degree terms.
    pub fn is_even(&self) -> bool {
        self.coeffs
            .iter()
            .enumerate()
            .all(|(m, c)| m.count_ones() % 2 == 0 || *c == ZERO)
    }

    /// No even-degree terms.
    pub fn is_odd(&self) -> bool {
        self.coeffs
            .iter()
            .enumerate()
            .all(|(m, c)| m.count_ones() % 2 == 1 || *c == ZERO)
    }

    /// Largest coefficient magnitude of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    fn same_algebra(&self, other: &Self) -> Result<()> {
        if self.pairs != other.pairs {
            return Err(Error::Dimension(format!(
                "algebras with {} and {} pairs",
                self.pairs, other.pairs
            )));
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.same_algebra(other)?;
        Ok(self.add_unchecked(other, ONE))
    }

    fn add_unchecked(&self, other: &Self, f: Complex64) -> Self {
        Self {
            pairs: self.pairs,
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + f * b).collect(),
        }
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            pairs: self.pairs,
            coeffs: self.coeffs.iter().map(|a| a * c).collect(),
        }
    }

    pub fn multiply(&self, other: &Self) -> Result<Self> {
        self.same_algebra(other)?;
        Ok(self.mul_unchecked(other))
    }

    fn mul_unchecked(&self, other: &Self) -> Self {
        let mut out = self.zero_like();
        for (s, a) in self.coeffs.iter().enumerate() {
            if *a == ZERO {
                continue;
            }
            for (t, b) in other.coeffs.iter().enumerate() {
                if *b == ZERO || s & t != 0 {
                    continue;
                }
                out.coeffs[s | t] += a * b * merge_sign(s, t);
            }
        }
        out
    }

    fn nilpotent_part(&self) -> Self {
        let mut g = self.clone();
        g.coeffs[0] = ZERO;
        g
    }

    /// Sum of `x^k / k!` over the powers of `x * scale` that survive; `x` nilpotent.
    fn series(x: &Self, coeff: impl Fn(usize) -> Complex64) -> Self {
        let mut sum = x.zero_like();
        let mut power = x.scalar_like(ONE);
        for k in 1..=2 * x.pairs {
            power = power.mul_unchecked(x);
            if power.is_zero() {
                break;
            }
            sum = sum.add_unchecked(&power, coeff(k));
        }
        sum
    }

    /// `exp(g)` for `g` without a scalar part; the series terminates by nilpotency.
    pub fn exp(&self) -> Result<Self> {
        if self.scalar_part() != ZERO {
            return Err(param("g", "exp needs a zero scalar part; split it off first"));
        }
        let mut fact = 1.0;
        let facts: Vec<f64> = (0..=2 * self.pairs)
            .map(|k| {
                if k > 0 {
                    fact *= k as f64;
                }
                fact
            })
            .collect();
        let s = Self::series(self, |k| (1.0 / facts[k]).into());
        Ok(s.add_unchecked(&self.scalar_like(ONE), ONE))
    }

    /// Multiplicative inverse; needs a nonzero scalar part.
    pub fn inverse(&self) -> Result<Self> {
        let s0 = self.scalar_part();
        if s0 == ZERO {
            return Err(Error::Singular("element has zero scalar part".into()));
        }
        let x = self.nilpotent_part().scale(-s0.inv());
        let s = Self::series(&x, |_| ONE);
        Ok(s.add_unchecked(&self.scalar_like(ONE), ONE).scale(s0.inv()))
    }

    /// Principal `ln` of the scalar part plus the terminating series for the rest.
    pub fn ln(&self) -> Result<Self> {
        let s0 = self.scalar_part();
        if s0 == ZERO {
            return Err(Error::Singular("ln of an element with zero scalar part".into()));
        }
        let x = self.nilpotent_part().scale(s0.inv());
        let s = Self::series(&x, |k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            (sign / k as f64).into()
        });
        Ok(s.add_unchecked(&self.scalar_like(s0.ln()), ONE))
    }

    /// Iterated Berezin integral `int dg_1 ... dg_k g`, the rightmost
    /// differential acting first, with `int dchi chi = 1/sqrt(2 pi)`.
    pub fn berezin_integrate(&self, measure: &[Generator]) -> Result<Self> {
        let mut seen = 0usize;
        for g in measure {
            if g.pair >= self.pairs {
                return Err(param(
                    "generator",
                    format!("pair {} outside an algebra of {}", g.pair, self.pairs),
                ));
            }
            let bit = 1 << g.bit();
            if seen & bit != 0 {
                return Err(param("measure", "generators must be distinct"));
            }
            seen |= bit;
        }
        let norm = 1.0 / (2.0 * PI).sqrt();
        let mut cur = self.clone();
        for g in measure.iter().rev() {
            let bit = g.bit();
            let mut next = cur.zero_like();
            for (m, c) in cur.coeffs.iter().enumerate() {
                if *c == ZERO || m & (1 << bit) == 0 {
                    continue;
                }
                // bring the generator to the front, then strip it
                let before = (m & ((1 << bit) - 1)).count_ones();
                let sign = if before % 2 == 0 { 1.0 } else { -1.0 };
                next.coeffs[m & !(1 << bit)] += c * sign * norm;
            }
            cur = next;
        }
        Ok(cur)
    }
}

/// `chi^+ M chi = sum_ij chi_i* M_ij chi_j`.
pub fn quadratic_form(m: &[Complex64], n: usize) -> Result<GrassmannElement> {
    if m.len() != n * n {
        return Err(Error::Dimension(format!("{} entries for a {n}x{n} matrix", m.len())));
    }
    let mut out = GrassmannElement::zero(n)?;
    for i in 0..n {
        for j in 0..n {
            let gi = GrassmannElement::generator(n, Generator::chi_star(i))?;
            let gj = GrassmannElement::generator(n, Generator::chi(j))?;
            out = out.add_unchecked(&gi.mul_unchecked(&gj), m[i * n + j]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DetIdentityReport {
    pub n: usize,
    pub engine: Complex64,
    pub oracle: Complex64,
    pub rel_error: f64,
}

impl DetIdentityReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

/// `int prod dchi* dchi exp(-chi^+ M chi)` by the engine against `det(M / 2 pi)`.
pub fn verify_det_identity(m: &[Complex64], n: usize) -> Result<DetIdentityReport> {
    let s = quadratic_form(m, n)?;
    let integral = s.scale(-ONE).exp()?.berezin_integrate(&pair_measure(n))?;
    if !integral.nilpotent_part().is_zero() {
        return Err(Error::Dimension("full integral left Grassmann terms behind".into()));
    }
    let engine = integral.scalar_part();
    let oracle = det(m, n) / (2.0 * PI).powi(n as i32);
    Ok(DetIdentityReport {
        n,
        engine,
        oracle,
        rel_error: (engine - oracle).norm() / oracle.norm(),
    })
}

/// Matrix with Grassmann entries, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrassmannMatrix {
    rows: usize,
    cols: usize,
    data: Vec<GrassmannElement>,
}

impl GrassmannMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<GrassmannElement>) -> Result<Self> {
        if data.len() != rows * cols || data.is_empty() {
            return Err(Error::Dimension(format!("{} entries for {rows}x{cols}", data.len())));
        }
        let pairs = data[0].pairs;
        if data.iter().any(|e| e.pairs != pairs) {
            return Err(Error::Dimension("entries from different algebras".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_complex(pairs: usize, rows: usize, cols: usize, m: &[Complex64]) -> Result<Self> {
        let data = m
            .iter()
            .map(|&c| GrassmannElement::scalar(pairs, c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, cols, data)
    }

    pub fn identity(pairs: usize, n: usize) -> Result<Self> {
        let m: Vec<Complex64> = (0..n * n).map(|k| if k % (n + 1) == 0 { ONE } else { ZERO }).collect();
        Self::from_complex(pairs, n, n, &m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pairs(&self) -> usize {
        self.data[0].pairs
    }

    pub fn get(&self, i: usize, j: usize) -> &GrassmannElement {
        &self.data[i * self.cols + j]
    }

    fn zeros(pairs: usize, rows: usize, cols: usize) -> Self {
        let z = GrassmannElement::zero(pairs).expect("pairs already validated");
        Self {
            rows,
            cols,
            data: vec![z; rows * cols],
        }
    }

    pub fn is_even(&self) -> bool {
        self.data.iter().all(GrassmannElement::is_even)
    }

    pub fn is_odd(&self) -> bool {
        self.data.iter().all(GrassmannElement::is_odd)
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|e| e.scale(c)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.combine(other, ONE)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.combine(other, -ONE)
    }

    fn combine(&self, other: &Self, f: Complex64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols || self.pairs() != other.pairs() {
            return Err(Error::Dimension("shape or algebra mismatch".into()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.add_unchecked(b, f))
                .collect(),
        })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows || self.pairs() != other.pairs() {
            return Err(Error::Dimension(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.pairs(), self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = GrassmannElement::zero(self.pairs())?;
                for k in 0..self.cols {
                    acc = acc.add_unchecked(&self.get(i, k).mul_unchecked(other.get(k, j)), ONE);
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn trace(&self) -> GrassmannElement {
        let mut t = self.data[0].zero_like();
        for i in 0..self.rows.min(self.cols) {
            t = t.add_unchecked(self.get(i, i), ONE);
        }
        t
    }

    fn scalar_parts(&self) -> Vec<Complex64> {
        self.data.iter().map(GrassmannElement::scalar_part).collect()
    }

    fn nilpotent_parts(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(GrassmannElement::nilpotent_part).collect(),
        }
    }

    /// Determinant of a square matrix with even entries (Leibniz expansion).
    pub fn det(&self) -> Result<GrassmannElement> {
        if self.rows != self.cols {
            return Err(Error::Dimension("determinant of a non-square matrix".into()));
        }
        if !self.is_even() {
            return Err(param("matrix", "determinant needs even entries"));
        }
        let n = self.rows;
        let mut total = self.data[0].zero_like();
        let mut perm: Vec<usize> = (0..n).collect();
        permutations(&mut perm, 0, 1.0, &mut |p, sign| {
            let mut term = self.data[0].scalar_like(sign.into());
            for (i, &j) in p.iter().enumerate() {
                term = term.mul_unchecked(self.get(i, j));
            }
            total = total.add_unchecked(&term, ONE);
        });
        Ok(total)
    }

    /// Inverse of a square even matrix with invertible scalar part:
    /// `A^{-1} = sum_k (-A0^{-1} N)^k A0^{-1}`, which terminates.
    pub fn inverse(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::Dimension("inverse of a non-square matrix".into()));
        }
        if !self.is_even() {
            return Err(param("matrix", "inverse needs even entries"));
        }
        let n = self.rows;
        let pairs = self.pairs();
        let a0 = to_mat(&self.scalar_parts(), n);
        if a0.determinant().norm() < 1e-300 {
            return Err(Error::Singular("scalar part of the block is singular".into()));
        }
        let a0_inv = Self::from_complex(pairs, n, n, &from_mat(&a0.partial_piv_lu().inverse()))?;
        let step = a0_inv.mul(&self.nilpotent_parts())?.scale(-ONE);
        let mut power = a0_inv.clone();
        let mut sum = a0_inv.clone();
        for _ in 0..2 * pairs {
            power = step.mul(&power)?;
            if power.data.iter().all(GrassmannElement::is_zero) {
                break;
            }
            sum = sum.add(&power)?;
        }
        Ok(sum)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

fn permutations(p: &mut Vec<usize>, k: usize, sign: f64, f: &mut impl FnMut(&[usize], f64)) {
    if k == p.len() {
        f(p, sign);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permutations(p, k + 1, if i == k { sign } else { -sign }, f);
        p.swap(k, i);
    }
}

/// `M = [[a, sigma], [rho, b]]` with even `a`, `b` and odd `sigma`, `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperMatrix {
    pub a: GrassmannMatrix,
    pub b: GrassmannMatrix,
    pub sigma: GrassmannMatrix,
    pub rho: GrassmannMatrix,
}

impl SuperMatrix {
    pub fn new(a: GrassmannMatrix, b: GrassmannMatrix, sigma: GrassmannMatrix, rho: GrassmannMatrix) -> Result<Self> {
        let (p, q) = (a.rows, b.rows);
        if a.cols != p || b.cols != q || sigma.rows != p || sigma.cols != q || rho.rows != q || rho.cols != p {
            return Err(Error::Dimension("inconsistent supermatrix blocks".into()));
        }
        let pairs = a.pairs();
        if [&b, &sigma, &rho].iter().any(|m| m.pairs() != pairs) {
            return Err(Error::Dimension("blocks from different algebras".into()));
        }
        if !a.is_even() || !b.is_even() {
            return Err(param("supermatrix", "diagonal blocks must be even"));
        }
        if !sigma.is_odd() || !rho.is_odd() {
            return Err(param("supermatrix", "off-diagonal blocks must be odd"));
        }
        Ok(Self { a, b, sigma, rho })
    }

    pub fn boson_dim(&self) -> usize {
        self.a.rows
    }

    pub fn fermion_dim(&self) -> usize {
        self.b.rows
    }

    pub fn pairs(&self) -> usize {
        self.a.pairs()
    }

    pub fn scale(&self, z: Complex64) -> Self {
        Self {
            a: self.a.scale(z),
            b: self.b.scale(z),
            sigma: self.sigma.scale(z),
            rho: self.rho.scale(z),
        }
    }

    /// `Tr a - Tr b`.
    pub fn supertrace(&self) -> GrassmannElement {
        self.a.trace().add_unchecked(&self.b.trace(), -ONE)
    }

    /// `a - sigma b^{-1} rho`.
    fn schur(&self, b_inv: &GrassmannMatrix) -> Result<GrassmannMatrix> {
        self.a.sub(&self.sigma.mul(b_inv)?.mul(&self.rho)?)
    }

    /// `det(a - sigma b^{-1} rho) / det b`.
    pub fn sdet(&self) -> Result<GrassmannElement> {
        let b_inv = self.b.inverse()?;
        let s = self.schur(&b_inv)?;
        s.det()?.multiply(&self.b.det()?.inverse()?)
    }

    /// Block inverse from the Schur complement of `b`.
    pub fn inverse(&self) -> Result<Self> {
        let b_inv = self.b.inverse()?;
        let s_inv = self.schur(&b_inv)?.inverse()?;
        let sigma_b = self.sigma.mul(&b_inv)?;
        let upper = s_inv.mul(&sigma_b)?.scale(-ONE);
        let lower = b_inv.mul(&self.rho)?.mul(&s_inv)?.scale(-ONE);
        let q = self.b.rows;
        let corr = GrassmannMatrix::identity(self.pairs(), q)?.add(&self.rho.mul(&s_inv)?.mul(&sigma_b)?)?;
        let bb = b_inv.mul(&corr)?;
        Self::new(s_inv, bb, upper, lower)
    }

    /// Product as full block matrices.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        let a = self.a.mul(&other.a)?.add(&self.sigma.mul(&other.rho)?)?;
        let sigma = self.a.mul(&other.sigma)?.add(&self.sigma.mul(&other.b)?)?;
        let rho = self.rho.mul(&other.a)?.add(&self.b.mul(&other.rho)?)?;
        let b = self.rho.mul(&other.sigma)?.add(&self.b.mul(&other.b)?)?;
        Self::new(a, b, sigma, rho)
    }

    pub fn identity(pairs: usize, p: usize, q: usize) -> Result<Self> {
        Self::new(
            GrassmannMatrix::identity(pairs, p)?,
            GrassmannMatrix::identity(pairs, q)?,
            GrassmannMatrix::zeros(pairs, p, q),
            GrassmannMatrix::zeros(pairs, q, p),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.a
            .max_abs_diff(&other.a)
            .max(self.b.max_abs_diff(&other.b))
            .max(self.sigma.max_abs_diff(&other.sigma))
            .max(self.rho.max_abs_diff(&other.rho))
    }

    /// `Str ln M` around the block-diagonal part: `ln det a - ln det b + Str ln(1 + Y)`
    /// with `Y = diag(a, b)^{-1} offdiag(sigma, rho)`, whose series terminates.
    pub fn supertrace_log(&self) -> Result<GrassmannElement> {
        let pairs = self.pairs();
        let (p, q) = (self.boson_dim(), self.fermion_dim());
        let a_inv = self.a.inverse()?;
        let b_inv = self.b.inverse()?;
        let y = Self::new(
            GrassmannMatrix::zeros(pairs, p, p),
            GrassmannMatrix::zeros(pairs, q, q),
            a_inv.mul(&self.sigma)?,
            b_inv.mul(&self.rho)?,
        )?;
        let mut total = self.a.det()?.ln()?.add_unchecked(&self.b.det()?.ln()?, -ONE);
        let mut power = y.clone();
        for k in 1..=2 * pairs + 1 {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            total = total.add_unchecked(&power.supertrace(), (sign / k as f64).into());
            power = power.mul(&y)?;
        }
        Ok(total)
    }
}

/// Coefficient error of `x - y` with the scalar part compared modulo `2 pi i`.
fn log_difference(x: &GrassmannElement, y: &GrassmannElement) -> f64 {
    let d = x.add_unchecked(y, -ONE);
    let s = d.scalar_part();
    let turns = (s.im / (2.0 * PI)).round();
    let scalar = (s - Complex64::new(0.0, 2.0 * PI * turns)).norm();
    scalar.max(d.nilpotent_part().coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SdetReport {
    pub boson_dim: usize,
    pub fermion_dim: usize,
    /// `max |Sdet(M) Sdet(M^{-1}) - 1|` over coefficients.
    pub inverse_error: f64,
    /// `max |M M^{-1} - 1|` over entries and coefficients.
    pub product_error: f64,
    /// `Str ln M` against `ln Sdet M`.
    pub str_ln_error: f64,
    /// `Sdet(zM)` against `Sdet(M)`; meaningful when both dimensions agree.
    pub scale_error: f64,
}

impl SdetReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.inverse_error <= tol && self.product_error <= tol && self.str_ln_error <= tol && self.scale_error <= tol
    }
}

pub fn sdet_and_identities(m: &SuperMatrix, z: Complex64) -> Result<SdetReport> {
    if m.boson_dim() != m.fermion_dim() {
        return Err(param("supermatrix", "scale invariance of Sdet needs equal block sizes"));
    }
    if z == ZERO {
        return Err(param("z", "scale factor must be nonzero"));
    }
    let pairs = m.pairs();
    let sdet = m.sdet()?;
    let inv = m.inverse()?;
    let one = GrassmannElement::scalar(pairs, ONE)?;
    let inverse_error = sdet.multiply(&inv.sdet()?)?.max_abs_diff(&one);
    let product_error = m
        .mul(&inv)?
        .max_abs_diff(&SuperMatrix::identity(pairs, m.boson_dim(), m.fermion_dim())?);
    let str_ln_error = log_difference(&m.supertrace_log()?, &sdet.ln()?);
    let scale_error = m.scale(z).sdet()?.max_abs_diff(&sdet);
    Ok(SdetReport {
        boson_dim: m.boson_dim(),
        fermion_dim: m.fermion_dim(),
        inverse_error,
        product_error,
        str_ln_error,
        scale_error,
    })
}

fn random_complex(rng: &mut impl Rng, scale: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * scale
}

/// Square complex matrix with standard complex normal entries.
pub fn random_matrix(rng: &mut impl Rng, n: usize) -> Vec<Complex64> {
    (0..n * n).map(|_| random_complex(rng, 1.0)).collect()
}

fn random_odd(rng: &mut impl Rng, pairs: usize, scale: f64) -> GrassmannElement {
    let coeffs = (0..1usize << (2 * pairs))
        .map(|m| {
            if m.count_ones() % 2 == 1 {
                random_complex(rng, scale)
            } else {
                ZERO
            }
        })
        .collect();
    GrassmannElement { pairs, coeffs }
}

/// Supermatrix with diagonal blocks near the identity and dense odd blocks.
pub fn random_supermatrix(rng: &mut impl Rng, pairs: usize, dim: usize) -> Result<SuperMatrix> {
    let near_one = |rng: &mut dyn FnMut() -> Complex64| -> Vec<Complex64> {
        (0..dim * dim)
            .map(|k| if k % (dim + 1) == 0 { ONE + rng() } else { rng() })
            .collect()
    };
    let mut draw = || random_complex(rng, 0.2);
    let a = near_one(&mut draw);
    let b = near_one(&mut draw);
    let odd = |rng: &mut dyn FnMut() -> GrassmannElement| -> Vec<GrassmannElement> {
        (0..dim * dim).map(|_| rng()).collect()
    };
    let mut draw_odd = || random_odd(rng, pairs, 0.5);
    let sigma = odd(&mut draw_odd);
    let rho = odd(&mut draw_odd);
    SuperMatrix::new(
        GrassmannMatrix::from_complex(pairs, dim, dim, &a)?,
        GrassmannMatrix::from_complex(pairs, dim, dim, &b)?,
        GrassmannMatrix::new(dim, dim, sigma)?,
        GrassmannMatrix::new(dim, dim, rho)?,
    )
}

/// `E_eps - R_i` for `R_i = [[a_i, rho_i*], [rho_i, i b_i]]`, with `rho_i` the
/// generator pair `site`.
pub fn site_supermatrix(pairs: usize, site: usize, e_eps: Complex64, a: f64, b: f64) -> Result<SuperMatrix> {
    let rho = GrassmannElement::generator(pairs, Generator::chi(site))?;
    let rho_star = GrassmannElement::generator(pairs, Generator::chi_star(site))?;
    SuperMatrix::new(
        GrassmannMatrix::from_complex(pairs, 1, 1, &[e_eps - a])?,
        GrassmannMatrix::from_complex(pairs, 1, 1, &[e_eps - Complex64::new(0.0, b)])?,
        GrassmannMatrix::new(1, 1, vec![rho_star.scale(-ONE)])?,
        GrassmannMatrix::new(1, 1, vec![rho.scale(-ONE)])?,
    )
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FermionMatch {
    /// Engine value of the fermionic integral.
    pub engine: Complex64,
    /// `det[J^{-1} - F - F'] / (2 pi)^n` from the dual module.
    pub closed_form: Complex64,
    pub rel_error: f64,
    /// Worst coefficient error of the per-site superdeterminant steps.
    pub sdet_error: f64,
}

impl FermionMatch {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol && self.sdet_error <= tol
    }
}

/// Rebuilds the fermionic factor of the raw dual integrand from the
/// per-site superdeterminants at fields `(a, b)`.
pub fn fermion_coefficient_match(spec: &DualIntegrandSpec, a: &[f64], b: &[f64]) -> Result<FermionMatch> {
    let n = spec.volume();
    if n > MAX_PAIRS {
        return Err(Error::VolumeCap { volume: n, cap: MAX_PAIRS });
    }
    let closed_form = det(&fermion_matrix(spec, a, b)?, n) / (2.0 * PI).powi(n as i32);
    let ee = spec.e_eps();
    let site = spec.site();
    let jinv = j_inverse(spec.kernel());
    let mut integrand = quadratic_form(&jinv, n)?.scale(-ONE).exp()?;
    let mut sdet_error: f64 = 0.0;
    for i in 0..n {
        let ea = ee - a[i];
        let eb = ee - Complex64::new(0.0, b[i]);
        let c = (ea * eb).inv();
        let rho = GrassmannElement::generator(n, Generator::chi(i))?;
        let rho_star = GrassmannElement::generator(n, Generator::chi_star(i))?;
        let pair = rho_star.multiply(&rho)?;
        // 1 / Sdet(E - R_i) = (E - ib)/(E - a) [1 - rho* rho c]^{-1} = (E - ib)/(E - a) exp(rho* rho c)
        let expo = pair.scale(c).exp()?;
        let m = site_supermatrix(n, i, ee, a[i], b[i])?;
        let inv_sdet = m.sdet()?.inverse()?;
        sdet_error = sdet_error.max(inv_sdet.max_abs_diff(&expo.scale(eb / ea)));
        integrand = integrand.multiply(&expo)?;
        if i == site {
            // (E - R_0)^{-1}_{11} = exp(rho_0* rho_0 c) / (E - a_0)
            let top = m.inverse()?.a.get(0, 0).clone();
            sdet_error = sdet_error.max(top.max_abs_diff(&expo.scale(ea.inv())));
            integrand = integrand.multiply(&expo)?;
        }
    }
    let engine = integrand.berezin_integrate(&pair_measure(n))?.scalar_part();
    Ok(FermionMatch {
        engine,
        closed_form,
        rel_error: (engine - closed_form).norm() / closed_form.norm(),
        sdet_error,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentitySuite {
    pub seed: u64,
    pub checks: Vec<IdentityCheck>,
    pub passed: bool,
}

/// Matrices per size for the determinant identity.
pub const DET_TRIALS: usize = 20;
pub const DET_TOLERANCE: f64 = 1e-12;
pub const SDET_TOLERANCE: f64 = 1e-10;

/// Determinant identity for random matrices at `N = 1, 2, 3` and the
/// supermatrix identities on random `1|1` and `2|2` supermatrices.
pub fn identity_suite(seed: u64) -> Result<IdentitySuite> {
    let mut checks = Vec::new();
    let mut push = |name: String, error: f64, tolerance: f64| {
        checks.push(IdentityCheck {
            name,
            error,
            tolerance,
            passed: error <= tolerance,
        });
    };
    for n in 1..=3usize {
        let mut rng = stream(seed, n as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..DET_TRIALS {
            let m = random_matrix(&mut rng, n);
            worst = worst.max(verify_det_identity(&m, n)?.rel_error);
        }
        push(format!("fermionic_gaussian_det_n{n}"), worst, DET_TOLERANCE);
    }
    for (dim, pairs) in [(1usize, 2usize), (2, 4)] {
        let mut rng = stream(seed, 10 + dim as u64);
        let m = random_supermatrix(&mut rng, pairs, dim)?;
        let r = sdet_and_identities(&m, Complex64::new(0.0, 3.0))?;
        let tag = format!("{dim}|{dim}");
        push(format!("sdet_inverse_{tag}"), r.inverse_error.max(r.product_error), SDET_TOLERANCE);
        push(format!("str_ln_sdet_{tag}"), r.str_ln_error, SDET_TOLERANCE);
        push(format!("sdet_scale_{tag}"), r.scale_error, SDET_TOLERANCE);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(IdentitySuite { seed, checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::variance_kernel;
    use crate::lattice::LatticeTorus;
    use crate::susy_dual::DualForm;
    use std::sync::Arc;

    fn gen(pairs: usize, g: Generator) -> GrassmannElement {
        GrassmannElement::generator(pairs, g).unwrap()
    }

    fn all_generators(pairs: usize) -> Vec<GrassmannElement> {
        (0..pairs)
            .flat_map(|i| [gen(pairs, Generator::chi(i)), gen(pairs, Generator::chi_star(i))])
            .collect()
    }

    #[test]
    fn anticommutation_and_nilpotency() {
        for pairs in 1..=3 {
            let gs = all_generators(pairs);
            for x in &gs {
                assert!(x.multiply(x).unwrap().is_zero());
                for y in &gs {
                    let xy = x.multiply(y).unwrap();
                    let yx = y.multiply(x).unwrap();
                    assert!(xy.try_add(&yx).unwrap().is_zero());
                }
            }
        }
    }

    #[test]
    fn associativity_on_triples() {
        for pairs in 1..=3 {
            let gs = all_generators(pairs);
            for x in &gs {
                for y in &gs {
                    for z in &gs {
                        let l = x.multiply(y).unwrap().multiply(z).unwrap();
                        let r = x.multiply(&y.multiply(z).unwrap()).unwrap();
                        assert_eq!(l, r);
                    }
                }
            }
        }
    }

    #[test]
    fn even_elements_commute() {
        let mut rng = stream(3, 0);
        for _ in 0..10 {
            let o1 = random_odd(&mut rng, 3, 1.0);
            let o2 = random_odd(&mut rng, 3, 1.0);
            let even = o1.multiply(&o2).unwrap();
            let other = random_odd(&mut rng, 3, 1.0);
            assert!(even.is_even());
            let d = even.multiply(&other).unwrap().max_abs_diff(&other.multiply(&even).unwrap());
            assert!(d < 1e-13);
        }
    }

    #[test]
    fn product_examples() {
        let c1 = gen(2, Generator::chi(0));
        let c2 = gen(2, Generator::chi(1));
        let x = c1.multiply(&c2).unwrap();
        let one = GrassmannElement::scalar(2, ONE).unwrap();
        let p = one.try_add(&x).unwrap().multiply(&one.try_add(&x.scale(-ONE)).unwrap()).unwrap();
        assert_eq!(p, one);
        assert!(c1.multiply(&gen(3, Generator::chi(0))).is_err());
        assert!(GrassmannElement::zero(5).is_err());
    }

    #[test]
    fn exp_terminates() {
        let c = Complex64::new(0.3, -1.2);
        let pair = gen(1, Generator::chi_star(0)).multiply(&gen(1, Generator::chi(0))).unwrap();
        let e = pair.scale(c).exp().unwrap();
        let one = GrassmannElement::scalar(1, ONE).unwrap();
        assert_eq!(e, one.try_add(&pair.scale(c)).unwrap());
        // (1 - c chi* chi)^{-1} = exp(c chi* chi)
        let inv = one.try_add(&pair.scale(-c)).unwrap().inverse().unwrap();
        assert!(inv.max_abs_diff(&e) < 1e-15);

        let p2 = |i| gen(2, Generator::chi_star(i)).multiply(&gen(2, Generator::chi(i))).unwrap();
        let g = p2(0).scale(c).try_add(&p2(1).scale(Complex64::new(-0.7, 0.2))).unwrap();
        let prod = g.exp().unwrap().multiply(&g.scale(-ONE).exp().unwrap()).unwrap();
        assert!(prod.max_abs_diff(&GrassmannElement::scalar(2, ONE).unwrap()) < 1e-15);
        assert!(GrassmannElement::scalar(1, ONE).unwrap().exp().is_err());
    }

    #[test]
    fn berezin_examples() {
        let one = GrassmannElement::scalar(1, ONE).unwrap();
        let d = [Generator::chi(0)];
        assert!(one.berezin_integrate(&d).unwrap().is_zero());
        let v = gen(1, Generator::chi(0)).berezin_integrate(&d).unwrap();
        assert!((v.scalar_part() - 1.0 / (2.0 * PI).sqrt()).norm() < 1e-16);
        let v = gen(1, Generator::chi_star(0))
            .berezin_integrate(&[Generator::chi_star(0)])
            .unwrap();
        assert!((v.scalar_part() - 1.0 / (2.0 * PI).sqrt()).norm() < 1e-16);

        let m = 2.0 * PI;
        let r = verify_det_identity(&[m.into()], 1).unwrap();
        assert!((r.engine - 1.0).norm() < 1e-14);
        assert!(one.berezin_integrate(&[Generator::chi(0), Generator::chi(0)]).is_err());
        assert!(one.berezin_integrate(&[Generator::chi(1)]).is_err());
    }

    #[test]
    fn berezin_sign_rule() {
        let c1 = gen(2, Generator::chi(0));
        let c2 = gen(2, Generator::chi(1));
        let d = [Generator::chi(0), Generator::chi(1)];
        let x = c2.multiply(&c1).unwrap().berezin_integrate(&d).unwrap();
        let y = c1.multiply(&c2).unwrap().berezin_integrate(&d).unwrap();
        assert!((x.scalar_part() + y.scalar_part()).norm() < 1e-16);
        assert!((x.scalar_part() - 1.0 / (2.0 * PI)).norm() < 1e-16);
    }

    #[test]
    fn det_identity_examples() {
        let tp = 2.0 * PI;
        let id = [tp.into(), ZERO, ZERO, tp.into()];
        assert!((verify_det_identity(&id, 2).unwrap().engine - 1.0).norm() < 1e-13);
        let diag = [tp.into(), ZERO, ZERO, (2.0 * tp).into()];
        assert!((verify_det_identity(&diag, 2).unwrap().engine - 2.0).norm() < 1e-13);
        for n in 1..=3 {
            let mut rng = stream(11, n as u64);
            for _ in 0..DET_TRIALS {
                let m = random_matrix(&mut rng, n);
                let r = verify_det_identity(&m, n).unwrap();
                assert!(r.passes(DET_TOLERANCE), "n={n} err={}", r.rel_error);
            }
        }
    }

    #[test]
    fn block_diagonal_sdet() {
        let a = [Complex64::new(1.5, 0.2), Complex64::new(0.1, 0.0), ZERO, Complex64::new(0.7, -0.3)];
        let m = SuperMatrix::new(
            GrassmannMatrix::from_complex(2, 2, 2, &a).unwrap(),
            GrassmannMatrix::from_complex(2, 2, 2, &a).unwrap(),
            GrassmannMatrix::zeros(2, 2, 2),
            GrassmannMatrix::zeros(2, 2, 2),
        )
        .unwrap();
        let s = m.sdet().unwrap();
        assert!(s.max_abs_diff(&GrassmannElement::scalar(2, ONE).unwrap()) < 1e-14);
    }

    #[test]
    fn site_sdet_matches_closed_form() {
        let ee = Complex64::new(0.8, 0.05);
        let (a, b) = (0.3, -0.4);
        let m = site_supermatrix(1, 0, ee, a, b).unwrap();
        let ea = ee - a;
        let eb = ee - Complex64::new(0.0, b);
        let pair = gen(1, Generator::chi_star(0)).multiply(&gen(1, Generator::chi(0))).unwrap();
        let one = GrassmannElement::scalar(1, ONE).unwrap();
        let expected = one.try_add(&pair.scale(-(ea * eb).inv())).unwrap().scale(ea / eb);
        assert!(m.sdet().unwrap().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn random_supermatrix_identities() {
        for (dim, pairs) in [(1usize, 2usize), (2, 4)] {
            let mut rng = stream(5, dim as u64);
            let m = random_supermatrix(&mut rng, pairs, dim).unwrap();
            let r = sdet_and_identities(&m, Complex64::new(0.0, 3.0)).unwrap();
            assert!(r.passes(SDET_TOLERANCE), "{r:?}");
        }
    }

    #[test]
    fn rejects_malformed_supermatrices() {
        let one = GrassmannMatrix::identity(1, 1).unwrap();
        assert!(SuperMatrix::new(one.clone(), one.clone(), one.clone(), GrassmannMatrix::zeros(1, 1, 1)).is_err());
        let z = GrassmannMatrix::zeros(1, 1, 1);
        let m = SuperMatrix::new(z.clone(), one.clone(), z.clone(), z.clone()).unwrap();
        assert!(m.sdet().is_ok());
        let m = SuperMatrix::new(one.clone(), z.clone(), z.clone(), z).unwrap();
        assert!(matches!(m.sdet(), Err(Error::Singular(_))));
    }

    #[test]
    fn fermionic_factor_matches_dual_module() {
        for sides in [vec![1usize], vec![2], vec![3]] {
            let k = Arc::new(variance_kernel(&LatticeTorus::new(&sides).unwrap(), 1).unwrap());
            let n = k.dim();
            let spec = DualIntegrandSpec::new(k, 0.9, 0.05, DualForm::Raw).unwrap();
            let a: Vec<f64> = (0..n).map(|i| 0.3 - 0.4 * i as f64).collect();
            let b: Vec<f64> = (0..n).map(|i| -0.2 + 0.5 * i as f64).collect();
            let r = fermion_coefficient_match(&spec, &a, &b).unwrap();
            assert!(r.passes(1e-12), "{r:?}");
        }
    }

    #[test]
    fn suite_passes() {
        let s = identity_suite(2024).unwrap();
        assert!(s.passed, "{:?}", s.checks);
        assert_eq!(s.checks.len(), 9);
    }
}

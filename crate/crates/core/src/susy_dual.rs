//! Deterministic quadrature of the dual (bosonic plus fermionic) integral
//! representation of `<G+_00>` on very small boxes, in its raw form and in
//! the form translated to the saddle `(a, b) -> (a + calE, b - i calE)`.
//!
//! Both forms are reported as the ratio of the observable integral to the
//! observable-free one, so no Gaussian normalisation constant is ever
//! tracked. The observable-free integral is additionally converted to an
//! absolute number (`norm_check`) that must equal one.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analytics::{check_window, hessian_b, SaddleData, DEFAULT_ETA};
use crate::ensemble::{sample_h, EnsembleSpec};
use crate::error::{param, Error, Result};
use crate::kernel::{KernelKind, KernelMatrix, TransformMethod};
use crate::linalg::{resolvent_matrix, small_det};
use crate::quadrature::{gauss_hermite_normal, gauss_legendre};
use crate::stats::{ComplexEstimate, ComplexMoments};

/// Largest box the tensor quadrature accepts.
pub const MAX_SITES: usize = 3;
/// Gauss–Hermite nodes per `b` field in the raw form.
pub const RAW_B_NODES: usize = 16;
/// Sample floor for [`mc_crosscheck`].
pub const MIN_MC_SAMPLES: usize = 10_000;

const I: Complex64 = Complex64::new(0.0, 1.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DualForm {
    Raw,
    Shifted,
}

impl std::str::FromStr for DualForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(DualForm::Raw),
            "shifted" => Ok(DualForm::Shifted),
            other => Err(param("form", format!("expected raw or shifted, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualIntegrandSpec {
    kernel_j: Arc<KernelMatrix>,
    energy: f64,
    epsilon: f64,
    form: DualForm,
    site: usize,
}

impl DualIntegrandSpec {
    pub fn new(kernel_j: Arc<KernelMatrix>, energy: f64, epsilon: f64, form: DualForm) -> Result<Self> {
        if kernel_j.kind() != KernelKind::J {
            return Err(param("kernel", format!("expected a J kernel, got {}", kernel_j.kind())));
        }
        if !energy.is_finite() {
            return Err(param("E", "energy must be finite"));
        }
        match form {
            DualForm::Raw => {
                if !(epsilon > 0.0) || !epsilon.is_finite() {
                    return Err(param("epsilon", "the raw form needs epsilon > 0"));
                }
            }
            DualForm::Shifted => {
                check_window(energy, DEFAULT_ETA)?;
                if !(epsilon >= 0.0) || !epsilon.is_finite() {
                    return Err(param("epsilon", "epsilon must be finite and non-negative"));
                }
            }
        }
        Ok(Self {
            kernel_j,
            energy,
            epsilon,
            form,
            site: 0,
        })
    }

    pub fn with_site(mut self, site: usize) -> Result<Self> {
        if site >= self.kernel_j.dim() {
            return Err(param("site", format!("{site} is outside the lattice")));
        }
        self.site = site;
        Ok(self)
    }

    pub fn with_form(&self, form: DualForm) -> Result<Self> {
        Self::new(self.kernel_j.clone(), self.energy, self.epsilon, form)?.with_site(self.site)
    }

    pub fn kernel(&self) -> &KernelMatrix {
        &self.kernel_j
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn form(&self) -> DualForm {
        self.form
    }

    pub fn site(&self) -> usize {
        self.site
    }

    pub fn volume(&self) -> usize {
        self.kernel_j.dim()
    }

    /// `E_eps = E + i eps`.
    pub fn e_eps(&self) -> Complex64 {
        Complex64::new(self.energy, self.epsilon)
    }

    /// `z* = E_eps - calE`, which is `calE^*` at `eps = 0`.
    fn z_star(&self) -> Complex64 {
        self.e_eps() - SaddleData::unchecked(self.energy).cal_e
    }
}

/// `J^{-1} = -W^2 Delta + 1`, dense.
pub fn j_inverse(kernel: &KernelMatrix) -> Vec<Complex64> {
    let w2 = (kernel.bandwidth() * kernel.bandwidth()) as f64;
    operator(kernel, move |l| Complex64::new(w2 * l + 1.0, 0.0))
}

fn operator(kernel: &KernelMatrix, f: impl Fn(f64) -> Complex64) -> Vec<Complex64> {
    KernelMatrix::from_symbol(
        kernel.torus(),
        kernel.bandwidth(),
        kernel.mass(),
        KernelKind::Custom,
        TransformMethod::ModeSum,
        f,
    )
    .expect("box is within the dimension cap")
    .entries()
    .to_vec()
}

fn quad_form(m: &[Complex64], x: &[Complex64]) -> Complex64 {
    let n = x.len();
    let mut s = ZERO;
    for i in 0..n {
        for j in 0..n {
            s += x[i] * m[i * n + j] * x[j];
        }
    }
    s
}

fn check_point(spec: &DualIntegrandSpec, a: &[f64], b: &[f64]) -> Result<()> {
    let n = spec.volume();
    if a.len() != n || b.len() != n {
        return Err(Error::Dimension(format!(
            "field vectors of length {} and {} for {n} sites",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(param("fields", "non-finite field value"));
    }
    Ok(())
}

/// `J^{-1} - F(a, b) - F'(a_0, b_0)`, the matrix of the fermionic Gaussian.
pub fn fermion_matrix(spec: &DualIntegrandSpec, a: &[f64], b: &[f64]) -> Result<Vec<Complex64>> {
    check_point(spec, a, b)?;
    if !(spec.epsilon > 0.0) {
        return Err(param("epsilon", "the raw form needs epsilon > 0"));
    }
    let n = spec.volume();
    let ee = spec.e_eps();
    let mut m = j_inverse(spec.kernel());
    for i in 0..n {
        let f = ((ee - a[i]) * (ee - I * b[i])).inv();
        m[i * n + i] -= f;
        if i == spec.site {
            m[i * n + i] -= f;
        }
    }
    Ok(m)
}

/// Raw integrand at real fields `(a, b)`, including its Gaussian weight.
pub fn integrand_raw(spec: &DualIntegrandSpec, a: &[f64], b: &[f64]) -> Result<Complex64> {
    let m = fermion_matrix(spec, a, b)?;
    let n = spec.volume();
    let ee = spec.e_eps();
    let jinv = j_inverse(spec.kernel());
    let ac: Vec<Complex64> = a.iter().map(|&v| v.into()).collect();
    let bc: Vec<Complex64> = b.iter().map(|&v| v.into()).collect();
    let weight = (-0.5 * (quad_form(&jinv, &ac) + quad_form(&jinv, &bc))).exp();
    let ratio: Complex64 = (0..n).map(|i| (ee - I * b[i]) / (ee - a[i])).product();
    let obs = (ee - a[spec.site]).inv();
    Ok(weight * ratio * obs * small_det(&m, n))
}

/// Translated integrand at real fields `(a, b)`: the weight `det B exp(-(a B^{-1} a + b B^{-1} b)/2)`
/// times `det[1 + (D + D'_0) B] exp(V'_0 + sum_j V_j)`.
pub fn integrand_shifted(spec: &DualIntegrandSpec, a: &[f64], b: &[f64]) -> Result<Complex64> {
    check_point(spec, a, b)?;
    check_window(spec.energy, DEFAULT_ETA)?;
    let ctx = ShiftedContext::new(spec)?;
    let n = spec.volume();
    let saddle = SaddleData::unchecked(spec.energy);
    let binv: Vec<Complex64> = {
        let mut m = j_inverse(spec.kernel());
        let c2 = saddle.cal_e * saddle.cal_e;
        for i in 0..n {
            m[i * n + i] -= c2;
        }
        m
    };
    let ac: Vec<Complex64> = a.iter().map(|&v| v.into()).collect();
    let bc: Vec<Complex64> = b.iter().map(|&v| v.into()).collect();
    let weight = ctx.det_b * (-0.5 * (quad_form(&binv, &ac) + quad_form(&binv, &bc))).exp();
    let (obs, _) = ctx.factor(a, b);
    Ok(weight * obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureScheme {
    /// Nodes per dimension before refinement.
    pub nodes: usize,
    /// Domain radius in whitened (standard deviation) units.
    pub truncation: f64,
    /// Bound on the doubling error estimate.
    pub tolerance: f64,
    /// Extra doublings allowed after the first comparison.
    pub max_refinements: usize,
}

impl Default for QuadratureScheme {
    fn default() -> Self {
        Self {
            nodes: 64,
            truncation: 12.0,
            tolerance: 1e-6,
            max_refinements: 2,
        }
    }
}

impl QuadratureScheme {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 16 {
            return Err(param("nodes", format!("need at least 16 per dimension, got {}", self.nodes)));
        }
        if !(self.truncation >= 8.0) {
            return Err(param(
                "truncation",
                format!("radius must be at least 8, got {}", self.truncation),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(param("tolerance", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureResult {
    /// `<G+_00>` as `I_obs / I_norm`.
    pub value: Complex64,
    /// The observable-free integral in absolute units; one when the representation is exact.
    pub norm_check: Complex64,
    /// Change of `value` under the last doubling of nodes.
    pub error_estimate: f64,
    pub nodes_used: usize,
    pub evaluations: u64,
    pub form: DualForm,
}

impl QuadratureResult {
    /// `-(1/pi) Im <G+_00>`.
    pub fn density(&self) -> f64 {
        -self.value.im / std::f64::consts::PI
    }
}

/// One sweep of a tensor rule: observable and normalisation sums.
#[derive(Debug, Clone, Copy)]
struct Sums {
    obs: Complex64,
    norm: Complex64,
    /// Converts `norm` into the absolute normalisation integral.
    norm_scale: Complex64,
    evaluations: u64,
}

impl Sums {
    fn value(&self) -> Complex64 {
        self.obs / self.norm
    }
}

/// Weighted 1D nodes in site or whitened coordinates.
#[derive(Debug, Clone)]
struct Axis {
    x: Vec<f64>,
    w: Vec<f64>,
}

fn hermite_axis(nodes: usize, truncation: f64) -> Axis {
    let r = gauss_hermite_normal(nodes);
    let (x, w) = r
        .nodes
        .iter()
        .zip(&r.weights)
        .filter(|(x, _)| x.abs() <= truncation)
        .map(|(x, w)| (*x, *w))
        .unzip();
    Axis { x, w }
}

/// Composite Gauss–Legendre rule in `t` with `a = centre + eps sinh t` on `[lo, hi]`.
/// The map flattens the pole at distance `eps` from the real axis.
fn sinh_axis(nodes: usize, centre: f64, eps: f64, lo: f64, hi: f64) -> Axis {
    const ORDER: usize = 8;
    let panels = nodes.div_ceil(ORDER).max(1);
    let gl = gauss_legendre(ORDER);
    let t0 = ((lo - centre) / eps).asinh();
    let t1 = ((hi - centre) / eps).asinh();
    let h = (t1 - t0) / panels as f64;
    let mut x = Vec::with_capacity(panels * ORDER);
    let mut w = Vec::with_capacity(panels * ORDER);
    for p in 0..panels {
        let mid = t0 + (p as f64 + 0.5) * h;
        for (s, ws) in gl.nodes.iter().zip(&gl.weights) {
            let t = mid + 0.5 * h * s;
            x.push(centre + eps * t.sinh());
            w.push(0.5 * h * ws * eps * t.cosh());
        }
    }
    Axis { x, w }
}

/// Calls `f(index)` for every multi-index of a tensor grid with `len` points per axis.
fn for_each_tensor(len: &[usize], mut f: impl FnMut(&[usize])) {
    if len.iter().any(|&l| l == 0) {
        return;
    }
    let mut idx = vec![0usize; len.len()];
    loop {
        f(&idx);
        let mut k = 0;
        loop {
            if k == len.len() {
                return;
            }
            idx[k] += 1;
            if idx[k] < len[k] {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Raw-form sums. The `a` fields use sinh-mapped composite rules in site
/// coordinates with the Gaussian weight evaluated explicitly; the `b`
/// fields, which enter polynomially, use `J`-whitened Gauss–Hermite.
fn raw_sums(spec: &DualIntegrandSpec, nodes: usize, truncation: f64) -> Sums {
    let n = spec.volume();
    let k = spec.kernel();
    let jinv = j_inverse(k);
    let jsqrt = {
        let w2 = (k.bandwidth() * k.bandwidth()) as f64;
        operator(k, move |l| Complex64::new(1.0 / (w2 * l + 1.0).sqrt(), 0.0))
    };
    let ee = spec.e_eps();
    let site = spec.site;

    let a_axes: Vec<Axis> = (0..n)
        .map(|i| {
            let sd = k.real_entry(i, i).sqrt();
            sinh_axis(nodes, spec.energy, spec.epsilon, -truncation * sd, truncation * sd)
        })
        .collect();
    // each b_j enters with degree at most one, so this rule is already exact
    let gh = hermite_axis(nodes.min(RAW_B_NODES), truncation);

    // b grid in site coordinates, shared by every a node
    let mut b_points: Vec<(f64, Vec<f64>)> = Vec::new();
    for_each_tensor(&vec![gh.x.len(); n], |idx| {
        let v: Vec<f64> = idx.iter().map(|&t| gh.x[t]).collect();
        let w: f64 = idx.iter().map(|&t| gh.w[t]).product();
        let b: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| jsqrt[i * n + j].re * v[j]).sum())
            .collect();
        b_points.push((w, b));
    });
    let b_site: Vec<Vec<Complex64>> = b_points
        .iter()
        .map(|(_, b)| b.iter().map(|&bi| ee - I * bi).collect())
        .collect();

    let mut obs = ZERO;
    let mut norm = ZERO;
    let mut evaluations = 0u64;
    let mut m = vec![ZERO; n * n];
    let lens: Vec<usize> = a_axes.iter().map(|ax| ax.x.len()).collect();
    for_each_tensor(&lens, |idx| {
        let a: Vec<f64> = (0..n).map(|i| a_axes[i].x[idx[i]]).collect();
        let wa: f64 = (0..n).map(|i| a_axes[i].w[idx[i]]).product();
        let ac: Vec<Complex64> = a.iter().map(|&v| v.into()).collect();
        let gauss = (-0.5 * quad_form(&jinv, &ac)).exp();
        let da: Vec<Complex64> = a.iter().map(|&ai| (ee - ai).inv()).collect();
        let pref = gauss * wa;
        let mut inner_obs = ZERO;
        let mut inner_norm = ZERO;
        for (p, (wb, _)) in b_points.iter().enumerate() {
            let bs = &b_site[p];
            let mut ratio = ONE;
            for i in 0..n {
                ratio *= bs[i] * da[i];
            }
            m.copy_from_slice(&jinv);
            for i in 0..n {
                m[i * n + i] -= da[i] / bs[i];
            }
            let det_norm = small_det(&m, n);
            m[site * n + site] -= da[site] / bs[site];
            let det_obs = small_det(&m, n);
            inner_norm += *wb * ratio * det_norm;
            inner_obs += *wb * ratio * da[site] * det_obs;
        }
        evaluations += b_points.len() as u64;
        obs += pref * inner_obs;
        norm += pref * inner_norm;
    });
    // the a-sum is a plain integral, the b-sum an expectation; the
    // normalisation integral is (2 pi)^{n} in absolute units
    let det_j: f64 = k.symbol().iter().map(|s| s.re).product();
    let scale = det_j.sqrt() / (2.0 * std::f64::consts::PI).powf(n as f64 / 2.0);
    Sums {
        obs,
        norm,
        norm_scale: scale.into(),
        evaluations,
    }
}

/// Saddle-translated pieces shared by the shifted integrand and its quadrature.
struct ShiftedContext {
    n: usize,
    site: usize,
    z: Complex64,
    cal_e: Complex64,
    b: Vec<Complex64>,
    det_b: Complex64,
}

impl ShiftedContext {
    fn new(spec: &DualIntegrandSpec) -> Result<Self> {
        let saddle = SaddleData::unchecked(spec.energy);
        let k = spec.kernel();
        let b = hessian_b(k.torus(), k.bandwidth(), &saddle)?;
        let det_b: Complex64 = b.symbol().iter().product();
        Ok(Self {
            n: spec.volume(),
            site: spec.site,
            z: spec.z_star(),
            cal_e: saddle.cal_e,
            b: b.entries().to_vec(),
            det_b,
        })
    }

    /// Observable and observable-free factors without the Gaussian weight.
    fn factor(&self, a: &[f64], b: &[f64]) -> (Complex64, Complex64) {
        let n = self.n;
        let (z, ce) = (self.z, self.cal_e);
        let ce2 = ce * ce;
        let mut ev = ONE;
        let mut d = [ZERO; MAX_SITES];
        let mut za0 = ONE;
        let mut zb0 = ONE;
        for i in 0..n {
            let (ai, bi) = (a[i], b[i]);
            let za = z - ai;
            let zb = z - I * bi;
            // e^{V(a)} e^{V(b)} with the log factors combined: (z - ib)/(z - a)
            let expo = -ce * ai - 0.5 * ce2 * ai * ai + I * ce * bi - 0.5 * ce2 * bi * bi;
            ev *= expo.exp() * zb / za;
            d[i] = ce2 - (za * zb).inv();
            if i == self.site {
                za0 = za;
                zb0 = zb;
            }
        }
        let mut m = [ZERO; MAX_SITES * MAX_SITES];
        let det_with = |extra: Complex64, m: &mut [Complex64]| {
            for i in 0..n {
                let di = d[i] + if i == self.site { extra } else { ZERO };
                for j in 0..n {
                    m[i * n + j] = di * self.b[i * n + j] + if i == j { ONE } else { ZERO };
                }
            }
            small_det(&m[..n * n], n)
        };
        let det_norm = det_with(ZERO, &mut m);
        let d_obs = -(za0 * zb0).inv();
        let det_obs = det_with(d_obs, &mut m);
        (ev * det_obs / za0, ev * det_norm)
    }
}

/// Shifted-form sums in `C`-whitened coordinates `a = C^{1/2} u`, `b = C^{1/2} v`.
/// The imaginary part of `B^{-1} = C^{-1} + i m_i^2` is carried as a phase.
fn shifted_sums(
    spec: &DualIntegrandSpec,
    nodes: usize,
    truncation: f64,
    mut visit: Option<&mut dyn FnMut(&[f64], Complex64)>,
) -> Result<Sums> {
    let n = spec.volume();
    let k = spec.kernel();
    let saddle = SaddleData::unchecked(spec.energy);
    let ctx = ShiftedContext::new(spec)?;
    let w2 = (k.bandwidth() * k.bandwidth()) as f64;
    let mr2 = saddle.m_r2;
    let csqrt = operator(k, move |l| Complex64::new(1.0 / (w2 * l + mr2).sqrt(), 0.0));
    let gh = hermite_axis(nodes, truncation);
    let half_phase = Complex64::new(0.0, -0.5 * saddle.m_i2);

    let mut fields: Vec<(f64, Vec<f64>, Complex64)> = Vec::new();
    for_each_tensor(&vec![gh.x.len(); n], |idx| {
        let u: Vec<f64> = idx.iter().map(|&t| gh.x[t]).collect();
        let w: f64 = idx.iter().map(|&t| gh.w[t]).product();
        let a: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| csqrt[i * n + j].re * u[j]).sum())
            .collect();
        let sq: f64 = a.iter().map(|v| v * v).sum();
        fields.push((w, a, (half_phase * sq).exp()));
    });

    let mut obs = ZERO;
    let mut norm = ZERO;
    let mut evaluations = 0u64;
    for (wa, a, pa) in &fields {
        for (wb, b, pb) in &fields {
            let (fo, fnorm) = ctx.factor(a, b);
            let w = *pa * *pb * (wa * wb);
            obs += w * fo;
            norm += w * fnorm;
            if let Some(f) = visit.as_mut() {
                f(b, w * fnorm);
            }
        }
        evaluations += fields.len() as u64;
    }
    // det C / det B = det(1 + i m_i^2 C), once per field set
    let det_c: f64 = k
        .torus()
        .laplacian_symbols()
        .iter()
        .map(|l| 1.0 / (w2 * l + mr2))
        .product();
    Ok(Sums {
        obs,
        norm,
        norm_scale: det_c / ctx.det_b,
        evaluations,
    })
}

fn sums_for(spec: &DualIntegrandSpec, nodes: usize, truncation: f64) -> Result<Sums> {
    match spec.form {
        DualForm::Raw => Ok(raw_sums(spec, nodes, truncation)),
        DualForm::Shifted => shifted_sums(spec, nodes, truncation, None),
    }
}

/// Tensor quadrature of `<G+_00>` with a doubling error estimate.
pub fn quadrature(spec: &DualIntegrandSpec, scheme: &QuadratureScheme) -> Result<QuadratureResult> {
    scheme.validate()?;
    let n = spec.volume();
    if n > MAX_SITES {
        return Err(Error::VolumeCap {
            volume: n,
            cap: MAX_SITES,
        });
    }
    let mut nodes = scheme.nodes;
    let mut prev = sums_for(spec, nodes, scheme.truncation)?;
    let mut evaluations = prev.evaluations;
    let mut err = f64::INFINITY;
    for _ in 0..=scheme.max_refinements {
        nodes *= 2;
        let next = sums_for(spec, nodes, scheme.truncation)?;
        evaluations += next.evaluations;
        err = (next.value() - prev.value()).norm();
        if err <= scheme.tolerance {
            return Ok(QuadratureResult {
                value: next.value(),
                norm_check: next.norm * next.norm_scale,
                error_estimate: err,
                nodes_used: nodes,
                evaluations,
                form: spec.form,
            });
        }
        prev = next;
    }
    Err(Error::NoConvergence {
        estimate: err,
        tolerance: scheme.tolerance,
    })
}

/// `<1/(E_eps - h)>` for `h ~ N(0, variance)` by adaptive quadrature, split at `E`.
pub fn gaussian_resolvent_oracle(energy: f64, eps: f64, variance: f64) -> Result<Complex64> {
    let sd = variance.sqrt();
    let z = Complex64::new(energy, eps);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * variance).sqrt();
    let f = |h: f64| (z - h).inv() * (-h * h / (2.0 * variance)).exp() * norm;
    let lo = -14.0 * sd;
    let hi = 14.0 * sd;
    let mid = energy.clamp(lo, hi);
    let left = crate::quadrature::integrate_adaptive(f, lo, mid, 1e-13, 20_000)?;
    let right = crate::quadrature::integrate_adaptive(f, mid, hi, 1e-13, 20_000)?;
    Ok(left.value + right.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    #[serde(rename = "E")]
    pub energy: f64,
    pub epsilon: f64,
    pub quadrature: QuadratureResult,
    pub monte_carlo: ComplexEstimate,
    /// Larger of the real and imaginary deviations in MC standard errors.
    pub z: f64,
    /// Monte Carlo average of the constant observable.
    pub mc_norm: f64,
}

impl CrossCheck {
    pub fn passes(&self, sigmas: f64) -> bool {
        self.z <= sigmas
    }
}

/// Compares the quadrature with the site-averaged Monte Carlo mean of `G+_jj`.
pub fn mc_crosscheck(
    spec: &DualIntegrandSpec,
    scheme: &QuadratureScheme,
    ensemble: &EnsembleSpec,
) -> Result<CrossCheck> {
    let a = spec.kernel();
    let b = ensemble.kernel();
    if a.torus() != b.torus() || a.bandwidth() != b.bandwidth() {
        return Err(Error::Config {
            field: "ensemble".into(),
            reason: "ensemble and dual integral use different kernels".into(),
        });
    }
    if ensemble.sample_count() < MIN_MC_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} samples, need at least {MIN_MC_SAMPLES}",
            ensemble.sample_count()
        )));
    }
    let quad = quadrature(spec, scheme)?;
    let n = ensemble.dim();
    let z = spec.e_eps();
    let mut g = ComplexMoments::default();
    let mut ones = 0usize;
    for s in 0..ensemble.sample_count() as u64 {
        let h = sample_h(ensemble, s)?;
        let r = resolvent_matrix(h.matrix(), n, z);
        let tr: Complex64 = (0..n).map(|j| r[(j, j)]).sum();
        g.push(tr / n as f64);
        ones += 1;
    }
    let mc = g.estimate();
    let diff = quad.value - mc.mean();
    Ok(CrossCheck {
        energy: spec.energy,
        epsilon: spec.epsilon,
        quadrature: quad,
        monte_carlo: mc,
        z: (diff.re / mc.re.stderr).abs().max((diff.im / mc.im.stderr).abs()),
        mc_norm: ones as f64 / ensemble.sample_count() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondSaddleReport {
    pub volume: usize,
    /// Share of `sum |w f|` from nodes with every `b_j` within `calE_i` of `2 calE_i`.
    pub fraction: f64,
}

/// Weight of the second well of the `b` double well in the shifted normalisation integral.
pub fn second_saddle_fraction(spec: &DualIntegrandSpec, scheme: &QuadratureScheme) -> Result<SecondSaddleReport> {
    scheme.validate()?;
    let spec = spec.with_form(DualForm::Shifted)?;
    if spec.volume() > MAX_SITES {
        return Err(Error::VolumeCap {
            volume: spec.volume(),
            cap: MAX_SITES,
        });
    }
    let ci = SaddleData::unchecked(spec.energy).cal_e_i;
    let mut inside = 0.0;
    let mut total = 0.0;
    let mut visit = |b: &[f64], v: Complex64| {
        let m = v.norm();
        total += m;
        if b.iter().all(|&bj| (bj - 2.0 * ci).abs() < ci) {
            inside += m;
        }
    };
    shifted_sums(&spec, scheme.nodes, scheme.truncation, Some(&mut visit))?;
    Ok(SecondSaddleReport {
        volume: spec.volume(),
        fraction: inside / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::variance_kernel;
    use crate::lattice::LatticeTorus;

    fn kernel(sides: &[usize]) -> Arc<KernelMatrix> {
        Arc::new(variance_kernel(&LatticeTorus::new(sides).unwrap(), 1).unwrap())
    }

    fn spec(sides: &[usize], e: f64, eps: f64, form: DualForm) -> DualIntegrandSpec {
        DualIntegrandSpec::new(kernel(sides), e, eps, form).unwrap()
    }

    #[test]
    fn raw_integrand_at_origin() {
        let s = spec(&[1], 1.0, 0.1, DualForm::Raw);
        let z = Complex64::new(1.0, 0.1);
        let expected = z.inv() * (1.0 - 2.0 / (z * z));
        let got = integrand_raw(&s, &[0.0], &[0.0]).unwrap();
        assert!((got - expected).norm() < 1e-14);
    }

    #[test]
    fn raw_form_needs_positive_epsilon() {
        assert!(DualIntegrandSpec::new(kernel(&[1]), 1.0, 0.0, DualForm::Raw).is_err());
        let s = spec(&[1], 1.0, 0.1, DualForm::Shifted);
        let s0 = DualIntegrandSpec::new(kernel(&[1]), 1.0, 0.0, DualForm::Shifted).unwrap();
        assert!(integrand_raw(&s0, &[1.0], &[0.0]).is_err());
        assert!(integrand_raw(&s, &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn raw_integrand_entire_in_b() {
        let s = spec(&[2], 0.7, 0.05, DualForm::Raw);
        for b in [-12.0, -3.0, 0.0, 5.0, 12.0] {
            let v = integrand_raw(&s, &[0.3, -0.2], &[b, -b]).unwrap();
            assert!(v.re.is_finite() && v.im.is_finite());
        }
    }

    #[test]
    fn shifted_integrand_at_origin() {
        let e = 1.0;
        let s = DualIntegrandSpec::new(kernel(&[1]), e, 0.0, DualForm::Shifted).unwrap();
        let sd = SaddleData::unchecked(e);
        let star = sd.cal_e.conj();
        let b = (1.0 - sd.cal_e * sd.cal_e).inv();
        let d0 = -(star * star).inv();
        let expected = b * (1.0 + d0 * b) / star;
        let got = integrand_shifted(&s, &[0.0], &[0.0]).unwrap();
        assert!((got - expected).norm() < 1e-13, "{got} vs {expected}");
        // at the origin V and D vanish, and V'_0 = -ln calE*
        let ctx = ShiftedContext::new(&s).unwrap();
        let (obs, norm) = ctx.factor(&[0.0], &[0.0]);
        assert!((norm - 1.0).norm() < 1e-15);
        assert!((obs - (1.0 + d0 * b) * (-star.ln()).exp()).norm() < 1e-14);
    }

    #[test]
    fn shifted_integrand_finite_everywhere() {
        let s = DualIntegrandSpec::new(kernel(&[2]), 1.5, 0.0, DualForm::Shifted).unwrap();
        for x in [-20.0, -1.0, 0.75, 3.0, 20.0] {
            let v = integrand_shifted(&s, &[x, 0.1], &[-x, x]).unwrap();
            assert!(v.re.is_finite() && v.im.is_finite());
        }
        assert!(DualIntegrandSpec::new(kernel(&[1]), 1.9, 0.0, DualForm::Shifted).is_err());
    }

    #[test]
    fn single_site_matches_gaussian_average() {
        for form in [DualForm::Raw, DualForm::Shifted] {
            for e in [0.5, 1.0, 1.5] {
                let r = quadrature(&spec(&[1], e, 0.05, form), &QuadratureScheme::default()).unwrap();
                let oracle = gaussian_resolvent_oracle(e, 0.05, 1.0).unwrap();
                assert!((r.value - oracle).norm() < 1e-6, "{form:?} E={e}: {} vs {oracle}", r.value);
                assert!((r.norm_check - 1.0).norm() < 1e-4, "{form:?} E={e}: {}", r.norm_check);
            }
        }
    }

    #[test]
    fn two_sites_raw_and_shifted_agree() {
        let raw = quadrature(&spec(&[2], 1.0, 0.05, DualForm::Raw), &QuadratureScheme::default()).unwrap();
        let sch = QuadratureScheme {
            nodes: 16,
            tolerance: 1e-5,
            max_refinements: 1,
            ..QuadratureScheme::default()
        };
        let shifted = quadrature(&spec(&[2], 1.0, 0.05, DualForm::Shifted), &sch).unwrap();
        assert!((raw.value - shifted.value).norm() < 1e-6, "{} vs {}", raw.value, shifted.value);
        assert!((raw.norm_check - 1.0).norm() < 1e-4);
        assert!((shifted.norm_check - 1.0).norm() < 1e-4);
    }

    #[test]
    fn density_is_even_in_energy() {
        for e in [0.5, 1.0, 1.5] {
            let p = quadrature(&spec(&[1], e, 0.05, DualForm::Raw), &QuadratureScheme::default()).unwrap();
            let m = quadrature(&spec(&[1], -e, 0.05, DualForm::Raw), &QuadratureScheme::default()).unwrap();
            assert!((p.density() - m.density()).abs() < 1e-6);
        }
    }

    #[test]
    fn centre_density_of_single_entry() {
        let r = quadrature(&spec(&[1], 0.0, 1e-3, DualForm::Raw), &QuadratureScheme::default()).unwrap();
        let oracle = gaussian_resolvent_oracle(0.0, 1e-3, 1.0).unwrap();
        assert!((r.value - oracle).norm() < 1e-6);
        assert!((r.density() - 0.398_942_280_4).abs() < 1e-3, "{}", r.density());
    }

    #[test]
    fn volume_cap_and_scheme_checks() {
        let s = spec(&[4], 1.0, 0.1, DualForm::Raw);
        assert!(matches!(quadrature(&s, &QuadratureScheme::default()), Err(Error::VolumeCap { .. })));
        let bad = QuadratureScheme {
            nodes: 8,
            ..QuadratureScheme::default()
        };
        assert!(bad.validate().is_err());
        let bad = QuadratureScheme {
            truncation: 4.0,
            ..QuadratureScheme::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tight_tolerance_reports_non_convergence() {
        let sch = QuadratureScheme {
            nodes: 16,
            tolerance: 1e-15,
            max_refinements: 0,
            ..QuadratureScheme::default()
        };
        let r = quadrature(&spec(&[1], 1.5, 0.05, DualForm::Shifted), &sch);
        assert!(matches!(r, Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn monte_carlo_agrees_on_one_site() {
        let s = spec(&[1], 0.5, 0.1, DualForm::Raw);
        let ens = EnsembleSpec::new(kernel(&[1]), MIN_MC_SAMPLES, 7).unwrap();
        let c = mc_crosscheck(&s, &QuadratureScheme::default(), &ens).unwrap();
        assert!(c.passes(4.0), "z = {}", c.z);
        assert_eq!(c.mc_norm, 1.0);
        let few = ens.with_sample_count(100).unwrap();
        assert!(matches!(
            mc_crosscheck(&s, &QuadratureScheme::default(), &few),
            Err(Error::InsufficientData(_))
        ));
        let other = EnsembleSpec::new(kernel(&[2]), MIN_MC_SAMPLES, 7).unwrap();
        assert!(mc_crosscheck(&s, &QuadratureScheme::default(), &other).is_err());
    }

    #[test]
    fn second_well_weight_shrinks_with_volume() {
        let sch = QuadratureScheme {
            nodes: 32,
            ..QuadratureScheme::default()
        };
        let one = second_saddle_fraction(&spec(&[1], 1.0, 0.0, DualForm::Shifted), &sch).unwrap();
        let two = second_saddle_fraction(&spec(&[2], 1.0, 0.0, DualForm::Shifted), &sch).unwrap();
        assert!(one.fraction > 0.0);
        assert!(two.fraction < one.fraction, "{} vs {}", two.fraction, one.fraction);
    }
}

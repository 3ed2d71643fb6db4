//! Spectral observables of sampled band matrices: eigenvalues, resolvent
//! rows, the averaged density of states and the two-point function
//! `R(x) = <G+_{0x} G+_{x0}>`.
//!
//! Per-sample work runs in parallel; every reduction walks the samples in
//! stream order so that results are bit-identical across runs and worker
//! counts.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{sample_h, EnsembleSpec};
use crate::error::{param, Error, Result};
use crate::io::write_csv;
use crate::kernel::{fit_log_points, fmt_f64, DecayFit};
use crate::lattice::LatticeTorus;
use crate::linalg;
use crate::stats::{ComplexEstimate, ComplexMoments, Estimate, Moments};

pub use crate::linalg::hermitian_eigenvalues;

/// Rows of `G+ = (E + i eps - H)^{-1}` must satisfy `G (z - H) = 1` to this accuracy.
pub const RESOLVENT_TOLERANCE: f64 = 1e-10;

/// `max(5 * 4/|Lambda|, 0.01)`: five bulk level spacings.
pub fn default_epsilon(volume: usize) -> f64 {
    (20.0 / volume as f64).max(0.01)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(param("epsilon", format!("broadening must be positive, got {eps}")));
    }
    Ok(())
}

/// Selected rows of the retarded resolvent, each verified to [`RESOLVENT_TOLERANCE`].
pub fn resolvent_entries(
    h: &[Complex64],
    n: usize,
    energy: f64,
    eps: f64,
    rows: &[usize],
) -> Result<Vec<Vec<Complex64>>> {
    check_eps(eps)?;
    if h.len() != n * n {
        return Err(Error::Dimension(format!("{} entries for a {n}x{n} matrix", h.len())));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::Dimension(format!("row {r} out of range for size {n}")));
    }
    let z = Complex64::new(energy, eps);
    let a = Mat::from_fn(n, n, |i, j| if i == j { z - h[i * n + j] } else { -h[i * n + j] });
    let lu = a.partial_piv_lu();
    let rhs = Mat::from_fn(n, rows.len(), |i, k| {
        if i == rows[k] {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::default()
        }
    });
    // row r of A^{-1} is column r of A^{-T}
    let sol = lu.solve_transpose(&rhs);
    let mut out = Vec::with_capacity(rows.len());
    for (k, &r) in rows.iter().enumerate() {
        let row: Vec<Complex64> = (0..n).map(|j| sol[(j, k)]).collect();
        let mut residual: f64 = 0.0;
        for j in 0..n {
            let v: Complex64 = (0..n).map(|i| row[i] * a[(i, j)]).sum();
            let target = if j == r { 1.0 } else { 0.0 };
            residual = residual.max((v - target).norm());
        }
        if residual > RESOLVENT_TOLERANCE {
            return Err(Error::NoConvergence {
                estimate: residual,
                tolerance: RESOLVENT_TOLERANCE,
            });
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveMethod {
    #[serde(rename = "eigendecomposition")]
    Eigen,
    #[serde(rename = "linear-solve")]
    LinearSolve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DosMode {
    Resolvent(SolveMethod),
    Histogram { bin_width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResult {
    pub energies: Vec<f64>,
    pub dos: Vec<Estimate>,
    /// Site-averaged `G+_jj`; empty in histogram mode.
    pub avg_g00: Vec<ComplexEstimate>,
    /// Broadening, or the bin width in histogram mode.
    pub epsilon: f64,
    pub sample_count: usize,
    pub mode: DosMode,
}

impl SpectralResult {
    /// Trapezoid integral of the DOS over the grid.
    pub fn integral(&self) -> f64 {
        self.energies
            .windows(2)
            .zip(self.dos.windows(2))
            .map(|(e, d)| 0.5 * (e[1] - e[0]) * (d[0].mean + d[1].mean))
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.energies.iter().enumerate().map(|(k, e)| {
            let im = self.avg_g00.get(k).map(|g| g.im.mean).unwrap_or(f64::NAN);
            vec![
                fmt_f64(*e),
                fmt_f64(self.dos[k].mean),
                fmt_f64(self.dos[k].stderr),
                fmt_f64(im),
                fmt_f64(self.epsilon),
                self.sample_count.to_string(),
            ]
        });
        write_csv(
            path,
            &["E", "dos_mean", "dos_stderr", "ImG00_mean", "epsilon", "samples"],
            rows,
        )
    }
}

/// Eigenvalues of every sample, in stream order.
pub fn sample_spectra(spec: &EnsembleSpec) -> Result<Vec<Vec<f64>>> {
    (0..spec.sample_count() as u64)
        .into_par_iter()
        .map(|s| {
            let h = sample_h(spec, s)?;
            hermitian_eigenvalues(h.matrix(), h.dim())
        })
        .collect()
}

/// `(1/n) sum_k 1/(z - lambda_k)`.
pub fn trace_resolvent(eigenvalues: &[f64], z: Complex64) -> Complex64 {
    let s: Complex64 = eigenvalues.iter().map(|&l| (z - l).inv()).sum();
    s / eigenvalues.len() as f64
}

/// `(1/n) sum_k 1/(z - lambda_k)^2 = (1/n) Tr G^2`.
pub fn trace_resolvent_sq(eigenvalues: &[f64], z: Complex64) -> Complex64 {
    let s: Complex64 = eigenvalues
        .iter()
        .map(|&l| {
            let g = (z - l).inv();
            g * g
        })
        .sum();
    s / eigenvalues.len() as f64
}

/// Eigenvalue density of one spectrum in the bin centred at `e`.
pub fn histogram_density(eigenvalues: &[f64], e: f64, bin_width: f64) -> f64 {
    let lo = e - bin_width / 2.0;
    let hi = e + bin_width / 2.0;
    let c = eigenvalues.iter().filter(|&&l| l >= lo && l < hi).count();
    c as f64 / (eigenvalues.len() as f64 * bin_width)
}

fn check_grid(energies: &[f64], samples: usize) -> Result<()> {
    if energies.is_empty() {
        return Err(param("energies", "empty energy grid"));
    }
    if samples < 2 {
        return Err(Error::InsufficientData(format!(
            "{samples} sample(s), need at least 2 for error bars"
        )));
    }
    Ok(())
}

/// Averaged density of states on `energies`.
pub fn estimate_dos(
    spec: &EnsembleSpec,
    energies: &[f64],
    eps: f64,
    mode: DosMode,
) -> Result<SpectralResult> {
    check_grid(energies, spec.sample_count())?;
    match mode {
        DosMode::Resolvent(_) => check_eps(eps)?,
        DosMode::Histogram { bin_width } => {
            if !(bin_width > 0.0) {
                return Err(param("bin_width", format!("must be positive, got {bin_width}")));
            }
        }
    }
    let per_sample: Vec<Vec<Complex64>> = match mode {
        DosMode::Resolvent(SolveMethod::Eigen) => sample_spectra(spec)?
            .into_iter()
            .map(|ev| {
                energies
                    .iter()
                    .map(|&e| trace_resolvent(&ev, Complex64::new(e, eps)))
                    .collect()
            })
            .collect(),
        DosMode::Resolvent(SolveMethod::LinearSolve) => (0..spec.sample_count() as u64)
            .into_par_iter()
            .map(|s| {
                let h = sample_h(spec, s)?;
                let n = h.dim();
                Ok(energies
                    .iter()
                    .map(|&e| {
                        let g = linalg::resolvent_matrix(h.matrix(), n, Complex64::new(e, eps));
                        let tr: Complex64 = (0..n).map(|j| g[(j, j)]).sum();
                        tr / n as f64
                    })
                    .collect())
            })
            .collect::<Result<_>>()?,
        DosMode::Histogram { bin_width } => sample_spectra(spec)?
            .into_iter()
            .map(|ev| {
                energies
                    .iter()
                    .map(|&e| Complex64::new(0.0, -PI * histogram_density(&ev, e, bin_width)))
                    .collect()
            })
            .collect(),
    };
    let (dos, avg_g00) = reduce_g(&per_sample, energies.len());
    let histogram = matches!(mode, DosMode::Histogram { .. });
    Ok(SpectralResult {
        energies: energies.to_vec(),
        dos,
        avg_g00: if histogram { Vec::new() } else { avg_g00 },
        epsilon: match mode {
            DosMode::Histogram { bin_width } => bin_width,
            DosMode::Resolvent(_) => eps,
        },
        sample_count: spec.sample_count(),
        mode,
    })
}

/// Resolvent DOS at several broadenings from precomputed spectra (one per sample, stream order).
pub fn dos_from_spectra(
    spectra: &[Vec<f64>],
    energies: &[f64],
    eps_list: &[f64],
) -> Result<Vec<SpectralResult>> {
    check_grid(energies, spectra.len())?;
    eps_list
        .iter()
        .map(|&eps| {
            check_eps(eps)?;
            let per_sample: Vec<Vec<Complex64>> = spectra
                .iter()
                .map(|ev| {
                    energies
                        .iter()
                        .map(|&e| trace_resolvent(ev, Complex64::new(e, eps)))
                        .collect()
                })
                .collect();
            let (dos, avg_g00) = reduce_g(&per_sample, energies.len());
            Ok(SpectralResult {
                energies: energies.to_vec(),
                dos,
                avg_g00,
                epsilon: eps,
                sample_count: spectra.len(),
                mode: DosMode::Resolvent(SolveMethod::Eigen),
            })
        })
        .collect()
}

/// Single-site estimator `-(1/pi) Im G+_{site,site}` by row solves.
pub fn estimate_dos_site(
    spec: &EnsembleSpec,
    energies: &[f64],
    eps: f64,
    site: usize,
) -> Result<SpectralResult> {
    check_grid(energies, spec.sample_count())?;
    check_eps(eps)?;
    if site >= spec.dim() {
        return Err(param("site", format!("{site} is outside the lattice")));
    }
    let per_sample: Vec<Vec<Complex64>> = (0..spec.sample_count() as u64)
        .into_par_iter()
        .map(|s| {
            let h = sample_h(spec, s)?;
            energies
                .iter()
                .map(|&e| Ok(resolvent_entries(h.matrix(), h.dim(), e, eps, &[site])?[0][site]))
                .collect()
        })
        .collect::<Result<_>>()?;
    let (dos, avg_g00) = reduce_g(&per_sample, energies.len());
    Ok(SpectralResult {
        energies: energies.to_vec(),
        dos,
        avg_g00,
        epsilon: eps,
        sample_count: spec.sample_count(),
        mode: DosMode::Resolvent(SolveMethod::LinearSolve),
    })
}

fn reduce_g(per_sample: &[Vec<Complex64>], len: usize) -> (Vec<Estimate>, Vec<ComplexEstimate>) {
    let mut dos = vec![Moments::default(); len];
    let mut g = vec![ComplexMoments::default(); len];
    for row in per_sample {
        for (k, v) in row.iter().enumerate() {
            dos[k].push(-v.im / PI);
            g[k].push(*v);
        }
    }
    (
        dos.iter().map(Moments::estimate).collect(),
        g.iter().map(ComplexMoments::estimate).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellPoint {
    pub radius: f64,
    /// Number of displacements in the shell.
    pub count: usize,
    pub r: ComplexEstimate,
    /// `<G+_{0x}>` averaged over the shell.
    pub g: ComplexEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPointProfile {
    pub energy: f64,
    pub epsilon: f64,
    pub sample_count: usize,
    /// Shells ordered by radius, starting with `x = 0`.
    pub shells: Vec<ShellPoint>,
    /// `sum_x R(x)` over the whole torus, i.e. `(1/n) Tr G^2`.
    pub r_total: ComplexEstimate,
    pub fit: Option<DecayFit>,
}

impl TwoPointProfile {
    /// Fits `log |R|` against radius on `[r_min, r_max]`.
    pub fn fit_window(&self, r_min: f64, r_max: f64) -> Result<DecayFit> {
        let pts: Vec<(f64, f64)> = self
            .shells
            .iter()
            .filter(|s| s.radius >= r_min - 1e-12 && s.radius <= r_max + 1e-12)
            .map(|s| (s.radius, s.r.mean().norm().ln()))
            .filter(|p| p.1.is_finite())
            .collect();
        fit_log_points(&pts)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.shells.iter().map(|s| {
            vec![
                fmt_f64(s.radius),
                fmt_f64(s.r.re.mean),
                fmt_f64(s.r.im.mean),
                fmt_f64(s.r.stderr()),
                s.count.to_string(),
            ]
        });
        write_csv(path, &["radius", "reR_mean", "imR_mean", "stderr", "count"], rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPointReport {
    pub at_eps: TwoPointProfile,
    pub at_half_eps: TwoPointProfile,
}

/// Per-sample displacement sums `(1/n) sum_y G_{y,y+x} G_{y+x,y}` and `(1/n) sum_y G_{y,y+x}`.
fn two_point_sample(g: &Mat<Complex64>, torus: &LatticeTorus) -> (Vec<Complex64>, Vec<Complex64>) {
    let n = torus.volume();
    let mut r = vec![Complex64::default(); n];
    let mut g1 = vec![Complex64::default(); n];
    for y in 0..n {
        for x in 0..n {
            let d = torus.displacement_index(y, x);
            let gyx = g[(y, x)];
            r[d] += gyx * g[(x, y)];
            g1[d] += gyx;
        }
    }
    let inv = 1.0 / n as f64;
    r.iter_mut().for_each(|v| *v *= inv);
    g1.iter_mut().for_each(|v| *v *= inv);
    (r, g1)
}

/// Displacements grouped by squared radius up to `max_radius`.
fn shells(torus: &LatticeTorus, max_radius: f64) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for d in 0..torus.volume() {
        let r2 = torus.displacement_norm_sq(d);
        if (r2 as f64) <= max_radius * max_radius + 1e-9 {
            out.entry(r2).or_default().push(d);
        }
    }
    out
}

/// `R(x)` at `eps` and `eps/2` on shared samples, with a decay fit on `[W, max_radius]`.
pub fn estimate_r(spec: &EnsembleSpec, energy: f64, eps: f64, max_radius: f64) -> Result<TwoPointReport> {
    check_eps(eps)?;
    let torus = spec.torus();
    let half_side = torus.min_side() as f64 / 2.0;
    if max_radius > half_side + 1e-12 {
        return Err(param(
            "max_radius",
            format!("{max_radius} exceeds half the smallest side ({half_side})"),
        ));
    }
    if spec.sample_count() < 2 {
        return Err(Error::InsufficientData("need at least 2 samples".into()));
    }
    let groups = shells(torus, max_radius);
    let n = torus.volume();
    let eps_list = [eps, eps / 2.0];
    // per sample, per epsilon: (shell R, shell G, total R)
    type Row = Vec<(Vec<Complex64>, Vec<Complex64>, Complex64)>;
    let per_sample: Vec<Row> = (0..spec.sample_count() as u64)
        .into_par_iter()
        .map(|s| {
            let h = sample_h(spec, s)?;
            let mut out = Vec::with_capacity(2);
            for &e in &eps_list {
                let g = linalg::resolvent_matrix(h.matrix(), n, Complex64::new(energy, e));
                let (r, g1) = two_point_sample(&g, torus);
                let total: Complex64 = r.iter().sum();
                let shell_mean = |v: &[Complex64]| -> Vec<Complex64> {
                    groups
                        .values()
                        .map(|ds| ds.iter().map(|&d| v[d]).sum::<Complex64>() / ds.len() as f64)
                        .collect()
                };
                out.push((shell_mean(&r), shell_mean(&g1), total));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let bandwidth = spec.kernel().bandwidth() as f64;
    let mut profiles = Vec::with_capacity(2);
    for (k, &e) in eps_list.iter().enumerate() {
        let mut rm = vec![ComplexMoments::default(); groups.len()];
        let mut gm = vec![ComplexMoments::default(); groups.len()];
        let mut tm = ComplexMoments::default();
        for row in &per_sample {
            let (r, g, t) = &row[k];
            for (j, v) in r.iter().enumerate() {
                rm[j].push(*v);
                gm[j].push(g[j]);
            }
            tm.push(*t);
        }
        let shells: Vec<ShellPoint> = groups
            .iter()
            .enumerate()
            .map(|(j, (r2, ds))| ShellPoint {
                radius: (*r2 as f64).sqrt(),
                count: ds.len(),
                r: rm[j].estimate(),
                g: gm[j].estimate(),
            })
            .collect();
        let mut profile = TwoPointProfile {
            energy,
            epsilon: e,
            sample_count: spec.sample_count(),
            shells,
            r_total: tm.estimate(),
            fit: None,
        };
        profile.fit = profile.fit_window(bandwidth, max_radius).ok();
        profiles.push(profile);
    }
    let at_half_eps = profiles.pop().expect("two profiles");
    let at_eps = profiles.pop().expect("two profiles");
    Ok(TwoPointReport { at_eps, at_half_eps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativePoint {
    pub energy: f64,
    /// Centred finite difference of the DOS estimate.
    pub finite_difference: Estimate,
    /// `(1/pi) Im sum_x R(E + i eps; 0, x)`.
    pub from_r: Estimate,
}

impl DerivativePoint {
    pub fn z_score(&self) -> f64 {
        self.finite_difference.z_score(&self.from_r)
    }
}

/// Compares `d rho / dE` by finite differences with `(1/pi) Im sum_x R(0, x)` on shared samples.
pub fn derivative_check(
    spec: &EnsembleSpec,
    energies: &[f64],
    eps: f64,
    step: f64,
) -> Result<Vec<DerivativePoint>> {
    check_grid(energies, spec.sample_count())?;
    check_eps(eps)?;
    if !(step > 0.0) {
        return Err(param("step", format!("must be positive, got {step}")));
    }
    let n = spec.dim();
    let torus = spec.torus();
    let per_sample: Vec<Vec<(f64, f64)>> = (0..spec.sample_count() as u64)
        .into_par_iter()
        .map(|s| {
            let h = sample_h(spec, s)?;
            let ev = hermitian_eigenvalues(h.matrix(), n)?;
            let rho = |e: f64| -trace_resolvent(&ev, Complex64::new(e, eps)).im / PI;
            Ok(energies
                .iter()
                .map(|&e| {
                    let fd = (rho(e + step) - rho(e - step)) / (2.0 * step);
                    let g = linalg::resolvent_matrix(h.matrix(), n, Complex64::new(e, eps));
                    let (r, _) = two_point_sample(&g, torus);
                    let total: Complex64 = r.iter().sum();
                    (fd, total.im / PI)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(energies
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let fd: Moments = per_sample.iter().map(|row| row[k].0).collect();
            let fr: Moments = per_sample.iter().map(|row| row[k].1).collect();
            DerivativePoint {
                energy: e,
                finite_difference: fd.estimate(),
                from_r: fr.estimate(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::variance_kernel;
    use std::sync::Arc;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn spec(sides: &[usize], w: usize, count: usize, seed: u64) -> EnsembleSpec {
        let t = LatticeTorus::new(sides).unwrap();
        EnsembleSpec::new(Arc::new(variance_kernel(&t, w).unwrap()), count, seed).unwrap()
    }

    #[test]
    fn eigenvalue_examples() {
        let px = [c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)];
        let ev = hermitian_eigenvalues(&px, 2).unwrap();
        assert!((ev[0] + 1.0).abs() < 1e-14 && (ev[1] - 1.0).abs() < 1e-14);
        assert_eq!(hermitian_eigenvalues(&[c(2.0, 0.0)], 1).unwrap(), vec![2.0]);
        // circulant with first row (0, 1, 1): lambda_k = 2 cos(2 pi k / 3)
        let row = [0.0, 1.0, 1.0];
        let m: Vec<Complex64> = (0..9).map(|k| c(row[(k % 3 + 3 - k / 3) % 3], 0.0)).collect();
        let ev = hermitian_eigenvalues(&m, 3).unwrap();
        let mut oracle: Vec<f64> = (0..3).map(|k| 2.0 * (2.0 * PI * k as f64 / 3.0).cos()).collect();
        oracle.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn eigen_reconstruction() {
        let s = spec(&[5, 5], 1, 1, 3);
        let h = sample_h(&s, 0).unwrap();
        let n = h.dim();
        let (vals, u) = linalg::hermitian_eigen(h.matrix(), n).unwrap();
        let v: Vec<Complex64> = (0..n).map(|k| c((k as f64).sin(), (k as f64 * 0.3).cos())).collect();
        let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        for i in 0..n {
            let hv: Complex64 = (0..n).map(|j| h.entry(i, j) * v[j]).sum();
            let rec: Complex64 = (0..n)
                .map(|k| {
                    let proj: Complex64 = (0..n).map(|j| u[(j, k)].conj() * v[j]).sum();
                    u[(i, k)] * vals[k] * proj
                })
                .sum();
            assert!((hv - rec).norm() <= 1e-8 * norm);
        }
    }

    #[test]
    fn shared_spectra_match_direct_estimate() {
        let s = spec(&[3, 3], 1, 6, 21);
        let grid = [-0.5, 0.0, 0.7];
        let spectra = sample_spectra(&s).unwrap();
        let multi = dos_from_spectra(&spectra, &grid, &[0.1, 0.2]).unwrap();
        for r in &multi {
            let direct = estimate_dos(&s, &grid, r.epsilon, DosMode::Resolvent(SolveMethod::Eigen)).unwrap();
            assert_eq!(&direct, r);
        }
        assert!(dos_from_spectra(&spectra, &grid, &[0.0]).is_err());
    }

    #[test]
    fn resolvent_examples() {
        let g = resolvent_entries(&[c(0.0, 0.0)], 1, 1.0, 0.1, &[0]).unwrap();
        assert!((g[0][0] - c(1.0, 0.1).inv()).norm() < 1e-15);
        let px = [c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)];
        let g = resolvent_entries(&px, 2, 0.0, 0.01, &[0, 1]).unwrap();
        let ee = c(0.0, 0.01);
        assert!((g[0][0] - ee / (ee * ee - 1.0)).norm() < 1e-12);
        assert!(matches!(
            resolvent_entries(&px, 2, 0.0, 0.0, &[0]),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn resolvent_rows_match_inverse() {
        let s = spec(&[4, 4], 1, 1, 11);
        let h = sample_h(&s, 0).unwrap();
        let n = h.dim();
        let rows = resolvent_entries(h.matrix(), n, 0.4, 0.05, &[0, 5, 9]).unwrap();
        let full = linalg::resolvent_matrix(h.matrix(), n, c(0.4, 0.05));
        for (k, &r) in [0usize, 5, 9].iter().enumerate() {
            for j in 0..n {
                assert!((rows[k][j] - full[(r, j)]).norm() < 1e-10);
            }
            assert!(rows[k][r].im < 0.0);
        }
    }

    #[test]
    fn one_site_dos_is_gaussian() {
        let s = spec(&[1], 1, 4000, 5);
        let r = estimate_dos(&s, &[0.0], 0.01, DosMode::Resolvent(SolveMethod::Eigen));
        // a 1x1 sample has a Cauchy-tailed estimator at tiny eps; use the histogram instead
        let h = estimate_dos(&s, &[0.0], 0.0, DosMode::Histogram { bin_width: 0.1 }).unwrap();
        let oracle = 1.0 / (2.0 * PI).sqrt();
        assert!((h.dos[0].mean - oracle).abs() < 4.0 * h.dos[0].stderr + 2e-3);
        assert!(r.unwrap().dos[0].mean > 0.0);
        let r = estimate_dos(&s, &[0.0], 0.3, DosMode::Resolvent(SolveMethod::Eigen)).unwrap();
        // Lorentzian-smoothed normal density at 0, half-width 0.3
        let (smooth, _) = crate::quadrature::integrate_real(
            |x| (-x * x / 2.0).exp() / (2.0 * PI).sqrt() * 0.3 / PI / (x * x + 0.09),
            -12.0,
            12.0,
            1e-12,
            10_000,
        )
        .unwrap();
        assert!((r.dos[0].mean - smooth).abs() < 4.0 * r.dos[0].stderr);
    }

    #[test]
    fn dos_invariants() {
        let s = spec(&[4, 4, 4], 2, 20, 9);
        let grid: Vec<f64> = (0..=240).map(|k| -6.0 + 0.05 * k as f64).collect();
        let r = estimate_dos(&s, &grid, 0.02, DosMode::Resolvent(SolveMethod::Eigen)).unwrap();
        assert!(r.dos.iter().all(|d| d.mean >= 0.0));
        assert!(r.avg_g00.iter().all(|g| g.im.mean < 0.0));
        assert!((r.integral() - 1.0).abs() < 0.02, "{}", r.integral());
        let far = estimate_dos(&s, &[3.0], 0.02, DosMode::Resolvent(SolveMethod::Eigen)).unwrap();
        assert!(far.dos[0].mean <= 0.01);
    }

    #[test]
    fn eigen_and_linear_solve_agree() {
        let s = spec(&[3, 3, 3], 1, 2, 1);
        let grid = [-1.0, 0.3, 1.2];
        let a = estimate_dos(&s, &grid, 0.05, DosMode::Resolvent(SolveMethod::Eigen)).unwrap();
        let b = estimate_dos(&s, &grid, 0.05, DosMode::Resolvent(SolveMethod::LinearSolve)).unwrap();
        for k in 0..3 {
            assert!((a.dos[k].mean - b.dos[k].mean).abs() < 1e-6);
        }
    }

    #[test]
    fn resolvent_is_lorentzian_smoothed_spectrum() {
        let s = spec(&[4, 4], 1, 1, 21);
        let h = sample_h(&s, 0).unwrap();
        let ev = hermitian_eigenvalues(h.matrix(), h.dim()).unwrap();
        let eps = 0.07;
        for e in [-1.1, 0.0, 0.6] {
            let lorentz: f64 = ev
                .iter()
                .map(|l| eps / PI / ((e - l) * (e - l) + eps * eps))
                .sum::<f64>()
                / ev.len() as f64;
            let g = linalg::resolvent_matrix(h.matrix(), h.dim(), c(e, eps));
            let tr: Complex64 = (0..h.dim()).map(|j| g[(j, j)]).sum();
            let dos = -tr.im / PI / h.dim() as f64;
            assert!((dos - lorentz).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_reduction() {
        let s = spec(&[4, 4, 4], 2, 6, 77);
        let a = estimate_dos(&s, &[0.5], 0.05, DosMode::Resolvent(SolveMethod::Eigen)).unwrap();
        let b = estimate_dos(&s, &[0.5], 0.05, DosMode::Resolvent(SolveMethod::Eigen)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn r_zero_one_site() {
        // <(G00)^2> = <1/(i - h)^2>, h ~ N(0, 1)
        let s = spec(&[1], 1, 20_000, 8);
        let r = estimate_r(&s, 0.0, 1.0, 0.0).unwrap().at_eps;
        let (re, _) = crate::quadrature::integrate_real(
            |h| ((c(-h, 1.0)).powi(-2)).re * (-h * h / 2.0).exp() / (2.0 * PI).sqrt(),
            -12.0,
            12.0,
            1e-12,
            10_000,
        )
        .unwrap();
        let (im, _) = crate::quadrature::integrate_real(
            |h| ((c(-h, 1.0)).powi(-2)).im * (-h * h / 2.0).exp() / (2.0 * PI).sqrt(),
            -12.0,
            12.0,
            1e-12,
            10_000,
        )
        .unwrap();
        let est = r.shells[0].r;
        assert!((est.re.mean - re).abs() < 4.0 * est.re.stderr);
        assert!((est.im.mean - im).abs() < 4.0 * est.im.stderr);
    }

    #[test]
    fn r_profile_shape() {
        let s = spec(&[6, 6, 6], 1, 4, 2);
        let rep = estimate_r(&s, 0.7, 0.1, 3.0).unwrap();
        assert_eq!(rep.at_eps.shells[0].radius, 0.0);
        assert!((rep.at_half_eps.epsilon - 0.05).abs() < 1e-15);
        assert!(estimate_r(&s, 0.7, 0.1, 3.5).is_err());
        for sh in &rep.at_eps.shells[1..] {
            assert!(sh.g.mean().norm() < 4.0 * sh.g.stderr() + 1e-12);
        }
    }

    #[test]
    fn site_and_translation_averages_agree() {
        let s = spec(&[3, 3, 3], 1, 200, 4);
        let grid = [0.5];
        let a = estimate_dos(&s, &grid, 0.1, DosMode::Resolvent(SolveMethod::Eigen)).unwrap();
        let b = estimate_dos_site(&s, &grid, 0.1, 0).unwrap();
        assert!(a.dos[0].z_score(&b.dos[0]).abs() < 3.0);
    }
}

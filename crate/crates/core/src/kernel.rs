//! Translation-invariant kernels `(-W^2 Delta + mass)^{-1}` on a torus.
//!
//! A kernel is determined by its Fourier symbol `1 / (W^2 lambda(k) + mass)`
//! with `lambda(k) = 2 sum_i (1 - cos k_i)`. The first row is obtained by an
//! inverse transform of the symbol (dense mode sum up to
//! [`DENSE_TRANSFORM_LIMIT`] sites, FFT above) and the dense matrix is filled
//! from it by translation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::io::{write_csv, write_json};
use crate::lattice::LatticeTorus;
use crate::stats::{linear_fit, LinearFit};

/// Largest volume transformed by the direct mode sum.
pub const DENSE_TRANSFORM_LIMIT: usize = 4096;

/// Dense kernels larger than this many bytes are refused.
pub const KERNEL_MEMORY_CAP: usize = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    /// Variance profile of the ensemble, mass 1.
    J,
    /// Real covariance around the saddle, mass `m_r^2`.
    C,
    /// Complex Hessian covariance, mass `1 - calE^2`.
    B,
    Custom,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KernelKind::J => "J",
            KernelKind::C => "C",
            KernelKind::B => "B",
            KernelKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMethod {
    ModeSum,
    Fft,
}

#[derive(Debug, Clone)]
pub struct KernelMatrix {
    torus: LatticeTorus,
    kind: KernelKind,
    mass: Complex64,
    bandwidth: usize,
    /// Fourier coefficient per mode, modes numbered like sites.
    symbol: Vec<Complex64>,
    /// `entry(0, j)`, indexed by displacement.
    row: Vec<Complex64>,
    entries: Vec<Complex64>,
}

impl KernelMatrix {
    /// Builds `(-W^2 Delta + mass)^{-1}`.
    pub fn build(
        torus: &LatticeTorus,
        bandwidth: usize,
        mass: Complex64,
        kind: KernelKind,
    ) -> Result<Self> {
        let method = if torus.volume() <= DENSE_TRANSFORM_LIMIT {
            TransformMethod::ModeSum
        } else {
            TransformMethod::Fft
        };
        Self::build_with(torus, bandwidth, mass, kind, method)
    }

    pub fn build_with(
        torus: &LatticeTorus,
        bandwidth: usize,
        mass: Complex64,
        kind: KernelKind,
        method: TransformMethod,
    ) -> Result<Self> {
        if bandwidth == 0 {
            return Err(param("W", "bandwidth must be at least 1"));
        }
        if !(mass.re > 0.0) || !mass.is_finite() {
            return Err(param(
                "mass",
                format!("real part must be positive, got {mass}"),
            ));
        }
        let w2 = (bandwidth * bandwidth) as f64;
        Self::from_symbol(torus, bandwidth, mass, kind, method, |lambda| {
            (w2 * lambda + mass).inv()
        })
    }

    /// Kernel with an arbitrary symbol `f(lambda(k))`.
    pub fn from_symbol(
        torus: &LatticeTorus,
        bandwidth: usize,
        mass: Complex64,
        kind: KernelKind,
        method: TransformMethod,
        f: impl Fn(f64) -> Complex64,
    ) -> Result<Self> {
        let n = torus.volume();
        let bytes = n
            .checked_mul(n)
            .and_then(|v| v.checked_mul(std::mem::size_of::<Complex64>()))
            .unwrap_or(usize::MAX);
        if bytes > KERNEL_MEMORY_CAP {
            return Err(Error::MemoryCap {
                bytes,
                cap: KERNEL_MEMORY_CAP,
            });
        }
        let symbol: Vec<Complex64> = torus.laplacian_symbols().into_iter().map(f).collect();
        let row = match method {
            TransformMethod::ModeSum => mode_sum(torus, &symbol),
            TransformMethod::Fft => fft_transform(torus, &symbol),
        };
        let mut entries = vec![Complex64::default(); n * n];
        for i in 0..n {
            for j in 0..n {
                entries[i * n + j] = row[torus.displacement_index(i, j)];
            }
        }
        Ok(Self {
            torus: torus.clone(),
            kind,
            mass,
            bandwidth,
            symbol,
            row,
            entries,
        })
    }

    pub fn torus(&self) -> &LatticeTorus {
        &self.torus
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn mass(&self) -> Complex64 {
        self.mass
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.torus.volume()
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.entries[i * self.dim() + j]
    }

    /// Real part of an entry; for J and C this is the whole entry.
    pub fn real_entry(&self, i: usize, j: usize) -> f64 {
        self.entry(i, j).re
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    /// Value as a function of the displacement index.
    pub fn row(&self) -> &[Complex64] {
        &self.row
    }

    pub fn symbol(&self) -> &[Complex64] {
        &self.symbol
    }

    /// Fourier coefficient at `k = 0`.
    pub fn zero_mode(&self) -> Complex64 {
        self.symbol[0]
    }

    /// Max-norm of `(-W^2 Delta + mass) K - 1`, evaluated on the dense matrix.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.dim();
        let w2 = (self.bandwidth * self.bandwidth) as f64;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let k_ij = self.entries[i * n + j];
                let mut lap = Complex64::default();
                for axis in 0..self.torus.dim() {
                    let (up, down) = self.torus.neighbours(i, axis);
                    lap += 2.0 * k_ij - self.entries[up * n + j] - self.entries[down * n + j];
                }
                let delta = if i == j { 1.0 } else { 0.0 };
                let r = w2 * lap + self.mass * k_ij - delta;
                worst = worst.max(r.norm());
            }
        }
        worst
    }

    pub fn max_row_sum_deviation(&self, target: f64) -> f64 {
        let n = self.dim();
        (0..n)
            .map(|i| {
                let s: Complex64 = self.entries[i * n..(i + 1) * n].iter().sum();
                (s - target).norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.entries[i * n + j] - self.entries[j * n + i]).norm());
            }
        }
        worst
    }

    /// Radius shells around site 0 with the largest modulus in each shell.
    pub fn radial_profile(&self) -> RadialProfile {
        let mut shells: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (disp, v) in self.row.iter().enumerate() {
            let r2 = self.torus.displacement_norm_sq(disp);
            let e = shells.entry(r2).or_insert((0.0, 0));
            e.0 = e.0.max(v.norm());
            e.1 += 1;
        }
        RadialProfile {
            points: shells
                .into_iter()
                .map(|(r2, (max_abs, count))| RadialPoint {
                    radius: (r2 as f64).sqrt(),
                    max_abs,
                    count,
                })
                .collect(),
        }
    }

    /// Radial profile plus an exponential fit over radii in `[W, min(side)/2]`.
    pub fn decay_profile(&self) -> Result<(RadialProfile, DecayFit)> {
        let profile = self.radial_profile();
        let r_max = self.torus.min_side() as f64 / 2.0;
        let fit = profile.fit(self.bandwidth as f64, r_max, 0.0)?;
        Ok((profile, fit))
    }

    pub fn sidecar(&self) -> KernelSidecar {
        KernelSidecar {
            d: self.torus.dim(),
            sides: self.torus.sides().to_vec(),
            w: self.bandwidth,
            mass_re: self.mass.re,
            mass_im: self.mass.im,
            kind: self.kind.to_string(),
        }
    }

    /// Writes `(i, j, re, im)` rows and the JSON sidecar next to it.
    pub fn export(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        let n = self.dim();
        let rows = (0..n).flat_map(|i| {
            (0..n).map(move |j| {
                let v = self.entries[i * n + j];
                vec![i.to_string(), j.to_string(), fmt_f64(v.re), fmt_f64(v.im)]
            })
        });
        write_csv(csv_path, &["i", "j", "re", "im"], rows)?;
        write_json(sidecar_path, &self.sidecar())
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSidecar {
    pub d: usize,
    pub sides: Vec<usize>,
    #[serde(rename = "W")]
    pub w: usize,
    pub mass_re: f64,
    pub mass_im: f64,
    pub kind: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialPoint {
    pub radius: f64,
    pub max_abs: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    pub points: Vec<RadialPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// `-slope` of `log |value|` against radius.
    pub rate: f64,
    /// `exp(intercept)`.
    pub amplitude: f64,
    pub residual_rms: f64,
    pub radii_used: usize,
}

impl DecayFit {
    pub(crate) fn from_linear(fit: LinearFit, radii_used: usize) -> Self {
        Self {
            rate: -fit.slope,
            amplitude: fit.intercept.exp(),
            residual_rms: fit.residual_rms,
            radii_used,
        }
    }
}

impl RadialProfile {
    /// Least-squares fit of `log(max_abs * (1 + r)^prefactor_power)` on `[r_min, r_max]`.
    pub fn fit(&self, r_min: f64, r_max: f64, prefactor_power: f64) -> Result<DecayFit> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.radius >= r_min - 1e-12 && p.radius <= r_max + 1e-12 && p.max_abs > 0.0)
            .map(|p| {
                (
                    p.radius,
                    p.max_abs.ln() + prefactor_power * (1.0 + p.radius).ln(),
                )
            })
            .collect();
        fit_log_points(&pts)
    }

    pub fn value_at(&self, radius: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| (p.radius - radius).abs() < 1e-9)
            .map(|p| p.max_abs)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["radius", "max_abs", "count"],
            self.points
                .iter()
                .map(|p| vec![fmt_f64(p.radius), fmt_f64(p.max_abs), p.count.to_string()]),
        )
    }
}

/// Fits `(radius, log value)` pairs; needs at least three distinct radii.
pub(crate) fn fit_log_points(pts: &[(f64, f64)]) -> Result<DecayFit> {
    if pts.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "{} radii in the fit window, need at least 3",
            pts.len()
        )));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    Ok(DecayFit::from_linear(linear_fit(&xs, &ys), pts.len()))
}

/// `(-W^2 Delta + mass)^{-1}`; see [`KernelMatrix::build`].
pub fn build_kernel(torus: &LatticeTorus, bandwidth: usize, mass: Complex64) -> Result<KernelMatrix> {
    let kind = if mass == Complex64::new(1.0, 0.0) {
        KernelKind::J
    } else {
        KernelKind::Custom
    };
    KernelMatrix::build(torus, bandwidth, mass, kind)
}

/// The ensemble variance profile `J = (-W^2 Delta + 1)^{-1}`.
pub fn variance_kernel(torus: &LatticeTorus, bandwidth: usize) -> Result<KernelMatrix> {
    KernelMatrix::build(torus, bandwidth, Complex64::new(1.0, 0.0), KernelKind::J)
}

fn mode_sum(torus: &LatticeTorus, symbol: &[Complex64]) -> Vec<Complex64> {
    let n = torus.volume();
    let dim = torus.dim();
    // phase tables e^{2 pi i m r / L} per axis, indexed by (m r) mod L
    let tables: Vec<Vec<Complex64>> = torus
        .sides()
        .iter()
        .map(|&l| {
            (0..l)
                .map(|t| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * t as f64 / l as f64))
                .collect()
        })
        .collect();
    let mode_coords: Vec<Vec<usize>> = (0..n).map(|m| torus.coords(m)).collect();
    let mut rc = vec![0; dim];
    let inv_n = 1.0 / n as f64;
    (0..n)
        .map(|r| {
            torus.coords_into(r, &mut rc);
            let mut acc = Complex64::default();
            for (m, mc) in mode_coords.iter().enumerate() {
                let mut phase = Complex64::new(1.0, 0.0);
                for axis in 0..dim {
                    let l = torus.sides()[axis];
                    phase *= tables[axis][(mc[axis] * rc[axis]) % l];
                }
                acc += symbol[m] * phase;
            }
            acc * inv_n
        })
        .collect()
}

fn fft_transform(torus: &LatticeTorus, symbol: &[Complex64]) -> Vec<Complex64> {
    let mut data = symbol.to_vec();
    let sides = torus.sides();
    let n = torus.volume();
    let mut planner = FftPlanner::new();
    let mut stride = n;
    for &len in sides {
        stride /= len;
        // inverse transform along this axis: e^{+i k r}
        let fft = planner.plan_fft_inverse(len);
        let mut line = vec![Complex64::default(); len];
        for start in 0..n {
            // start indexes the first element of a line: its coordinate on this axis is 0
            if (start / stride) % len != 0 {
                continue;
            }
            for (t, v) in line.iter_mut().enumerate() {
                *v = data[start + t * stride];
            }
            fft.process(&mut line);
            for (t, v) in line.iter().enumerate() {
                data[start + t * stride] = *v;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    data.iter_mut().for_each(|v| *v *= inv_n);
    data
}

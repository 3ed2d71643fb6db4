//! Gaussian Hermitian band matrices with `<H_ij H_kl> = delta_jk delta_il J_ij`.
//!
//! Off-diagonal entries have independent real and imaginary parts of
//! variance `J_ij / 2`; diagonal entries are real with variance `J_ii`.
//! Entries are drawn in lexicographic site order over the upper triangle
//! (row by row, diagonal first), from the stream `(base_seed, stream_id)`.

use std::f64::consts::{E, PI};
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::kernel::{KernelKind, KernelMatrix};
use crate::lattice::LatticeTorus;
use crate::rng;
use crate::stats::{ComplexEstimate, ComplexMoments};

#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    kernel_j: Arc<KernelMatrix>,
    sample_count: usize,
    base_seed: u64,
}

impl EnsembleSpec {
    pub fn new(kernel_j: Arc<KernelMatrix>, sample_count: usize, base_seed: u64) -> Result<Self> {
        if kernel_j.kind() != KernelKind::J {
            return Err(param(
                "kernel_j",
                format!("expected a J kernel, got {}", kernel_j.kind()),
            ));
        }
        if sample_count == 0 {
            return Err(param("sample_count", "must be at least 1"));
        }
        let n = kernel_j.dim();
        for i in 0..n {
            for j in 0..n {
                if !(kernel_j.real_entry(i, j) > 0.0) {
                    return Err(param(
                        "kernel_j",
                        format!("variance J[{i},{j}] = {} is not positive", kernel_j.real_entry(i, j)),
                    ));
                }
            }
        }
        Ok(Self {
            kernel_j,
            sample_count,
            base_seed,
        })
    }

    pub fn kernel(&self) -> &KernelMatrix {
        &self.kernel_j
    }

    pub fn torus(&self) -> &LatticeTorus {
        self.kernel_j.torus()
    }

    pub fn dim(&self) -> usize {
        self.kernel_j.dim()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn with_sample_count(&self, sample_count: usize) -> Result<Self> {
        Self::new(self.kernel_j.clone(), sample_count, self.base_seed)
    }

    pub fn with_seed(&self, base_seed: u64) -> Self {
        Self {
            base_seed,
            ..self.clone()
        }
    }
}

/// One draw `H`, dense row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrixSample {
    pub torus: LatticeTorus,
    h: Vec<Complex64>,
    pub seed: u64,
    pub stream_id: u64,
}

impl BandMatrixSample {
    pub fn dim(&self) -> usize {
        self.torus.volume()
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.h[i * self.dim() + j]
    }

    pub fn matrix(&self) -> &[Complex64] {
        &self.h
    }

    pub fn into_matrix(self) -> Vec<Complex64> {
        self.h
    }

    /// `max |H - H^dag|`; zero by construction.
    pub fn hermiticity_defect(&self) -> f64 {
        crate::linalg::hermiticity_defect(&self.h, self.dim())
    }
}

/// Draws sample `stream_id` of the ensemble.
pub fn sample_h(spec: &EnsembleSpec, stream_id: u64) -> Result<BandMatrixSample> {
    if stream_id >= spec.sample_count as u64 {
        return Err(param(
            "stream_id",
            format!("{stream_id} >= sample_count {}", spec.sample_count),
        ));
    }
    Ok(draw(spec, stream_id))
}

pub(crate) fn draw(spec: &EnsembleSpec, stream_id: u64) -> BandMatrixSample {
    let n = spec.dim();
    let k = &spec.kernel_j;
    let mut rng = rng::stream(spec.base_seed, stream_id);
    let mut h = vec![Complex64::default(); n * n];
    for i in 0..n {
        let sd = k.real_entry(i, i).sqrt();
        let x: f64 = rng.sample(StandardNormal);
        h[i * n + i] = Complex64::new(sd * x, 0.0);
        for j in i + 1..n {
            let sd = (0.5 * k.real_entry(i, j)).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let z = Complex64::new(sd * re, sd * im);
            h[i * n + j] = z;
            h[j * n + i] = z.conj();
        }
    }
    BandMatrixSample {
        torus: spec.torus().clone(),
        h,
        seed: spec.base_seed,
        stream_id,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub quad: (usize, usize, usize, usize),
    pub estimate: ComplexEstimate,
    /// `delta_jk delta_il J_ij`.
    pub expected: f64,
    /// Distance from the expected value in combined standard errors.
    pub z: f64,
}

impl CovarianceEstimate {
    pub fn consistent(&self, sigmas: f64) -> bool {
        self.z <= sigmas
    }
}

/// Sample means of `H_ij H_kl` for the requested index quadruples.
pub fn empirical_covariance(
    samples: &[BandMatrixSample],
    quads: &[(usize, usize, usize, usize)],
    kernel_j: &KernelMatrix,
) -> Result<Vec<CovarianceEstimate>> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("empty sample set".into()));
    }
    if samples.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "{} samples, covariance estimates need at least 100",
            samples.len()
        )));
    }
    let n = samples[0].dim();
    if kernel_j.dim() != n {
        return Err(Error::Dimension(format!(
            "kernel has {} sites, samples have {n}",
            kernel_j.dim()
        )));
    }
    quads
        .iter()
        .map(|&(i, j, k, l)| {
            if [i, j, k, l].iter().any(|&x| x >= n) {
                return Err(Error::Dimension(format!("index quadruple {:?} out of range", (i, j, k, l))));
            }
            let m: ComplexMoments = samples.iter().map(|s| s.entry(i, j) * s.entry(k, l)).collect();
            let estimate = m.estimate();
            let expected = if j == k && i == l {
                kernel_j.real_entry(i, j)
            } else {
                0.0
            };
            let diff = estimate.mean() - Complex64::new(expected, 0.0);
            let se = estimate.stderr();
            let z = if se > 0.0 { diff.norm() / se } else { f64::INFINITY };
            Ok(CovarianceEstimate {
                quad: (i, j, k, l),
                estimate,
                expected,
                z,
            })
        })
        .collect()
}

/// Log of the product density, with respect to `dRe dIm` for each
/// off-diagonal pair and `dH_ii` on the diagonal.
pub fn log_density(sample: &BandMatrixSample, kernel_j: &KernelMatrix) -> Result<f64> {
    let n = sample.dim();
    if kernel_j.dim() != n {
        return Err(Error::Dimension(format!(
            "kernel has {} sites, sample has {n}",
            kernel_j.dim()
        )));
    }
    let mut acc = 0.0;
    for i in 0..n {
        let v = kernel_j.real_entry(i, i);
        if !(v > 0.0) {
            return Err(param("kernel_j", format!("variance J[{i},{i}] = {v} is not positive")));
        }
        let x = sample.entry(i, i).re;
        acc += -0.5 * (2.0 * PI * v).ln() - x * x / (2.0 * v);
        for j in i + 1..n {
            let v = kernel_j.real_entry(i, j);
            if !(v > 0.0) {
                return Err(param("kernel_j", format!("variance J[{i},{j}] = {v} is not positive")));
            }
            acc += -(PI * v).ln() - sample.entry(i, j).norm_sqr() / v;
        }
    }
    Ok(acc)
}

/// Differential entropy of the product Gaussian in the same coordinates as
/// [`log_density`].
pub fn differential_entropy(kernel_j: &KernelMatrix) -> f64 {
    let n = kernel_j.dim();
    let mut acc = 0.0;
    for i in 0..n {
        acc += 0.5 * (2.0 * PI * E * kernel_j.real_entry(i, i)).ln();
        for j in i + 1..n {
            acc += (PI * E * kernel_j.real_entry(i, j)).ln();
        }
    }
    acc
}

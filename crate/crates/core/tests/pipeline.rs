use std::sync::Arc;

use bandwig::analytics::semicircle_broadened;
use bandwig::ensemble::{sample_h, EnsembleSpec};
use bandwig::harness::{self, Experiment, RunConfig};
use bandwig::kernel::variance_kernel;
use bandwig::lattice::LatticeTorus;
use bandwig::spectral::{dos_from_spectra, estimate_dos, estimate_r, sample_spectra, DosMode, SolveMethod};
use bandwig::susy_dual::{quadrature, DualForm, DualIntegrandSpec, QuadratureScheme};

fn ensemble(sides: &[usize], w: usize, samples: usize, seed: u64) -> EnsembleSpec {
    let t = LatticeTorus::new(sides).unwrap();
    EnsembleSpec::new(Arc::new(variance_kernel(&t, w).unwrap()), samples, seed).unwrap()
}

#[test]
fn two_site_kernel_matches_hand_inverse() {
    let t = LatticeTorus::new(&[2]).unwrap();
    let k = variance_kernel(&t, 1).unwrap();
    assert!((k.real_entry(0, 0) - 0.6).abs() < 1e-15);
    assert!((k.real_entry(0, 1) - 0.4).abs() < 1e-15);
}

#[test]
fn wide_band_dos_is_close_to_broadened_semicircle() {
    // 64-site ring with W = 16 is close to the mean-field regime
    let spec = ensemble(&[64], 16, 40, 3);
    let grid: Vec<f64> = (-12..=12).map(|k| k as f64 * 0.125).collect();
    let r = estimate_dos(&spec, &grid, 0.1, DosMode::Resolvent(SolveMethod::Eigen)).unwrap();
    for (e, d) in grid.iter().zip(&r.dos) {
        let target = semicircle_broadened(*e, 0.1);
        assert!((d.mean - target).abs() < 0.03, "E={e}: {} vs {target}", d.mean);
    }
}

#[test]
fn dos_integrates_to_one() {
    let spec = ensemble(&[4, 4], 2, 10, 8);
    let grid: Vec<f64> = (0..=2400).map(|k| -60.0 + 0.05 * k as f64).collect();
    let spectra = sample_spectra(&spec).unwrap();
    let r = &dos_from_spectra(&spectra, &grid, &[0.2]).unwrap()[0];
    // Lorentzian tails beyond +-60 carry about 2 * 0.2 / (60 pi)
    assert!((r.integral() - 1.0).abs() < 3e-3, "{}", r.integral());
}

#[test]
fn two_point_sum_matches_trace_of_g_squared() {
    // sum_x R(0, x) averaged over y is (1/N) Tr G^2
    let spec = ensemble(&[6], 2, 4, 12);
    let report = estimate_r(&spec, 0.4, 0.1, 3.0).unwrap();
    let n = spec.dim();
    let mut expected = bandwig::Complex64::default();
    for s in 0..4 {
        let h = sample_h(&spec, s).unwrap();
        let ev = bandwig::spectral::hermitian_eigenvalues(h.matrix(), n).unwrap();
        expected += bandwig::spectral::trace_resolvent_sq(&ev, bandwig::Complex64::new(0.4, 0.1));
    }
    expected /= 4.0;
    assert!((report.at_eps.r_total.mean() - expected).norm() < 1e-10);
}

#[test]
fn one_site_dual_density_is_smoothed_gaussian() {
    // at one site the dual value is <1/(E + i eps - h)>, h ~ N(0, 1)
    let t = LatticeTorus::new(&[1]).unwrap();
    let k = Arc::new(variance_kernel(&t, 1).unwrap());
    let spec = DualIntegrandSpec::new(k, 1.0, 0.05, DualForm::Shifted).unwrap();
    let q = quadrature(&spec, &QuadratureScheme::default()).unwrap();
    let gaussian = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    assert!((q.density() - gaussian).abs() < 5e-3, "{} vs {gaussian}", q.density());
}

#[test]
fn kernel_audit_run_passes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::new(Experiment::KernelAudit);
    c.d = 2;
    c.side_factor = 4;
    c.bandwidths = vec![1, 2];
    c.energies = vec![0.5, 1.5];
    c.export_kernels = true;
    c.output_dir = dir.path().to_path_buf();
    let m = harness::run(&c).unwrap();
    assert!(m.passed, "{:?}", m.failed_assertions());
    assert!(dir.path().join("kernel_audit.csv").exists());
    assert!(dir.path().join("kernel_J_W2.json").exists());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("kernel_J_W2.json")).unwrap()).unwrap();
    assert_eq!(sidecar["sides"], serde_json::json!([8, 8]));
}

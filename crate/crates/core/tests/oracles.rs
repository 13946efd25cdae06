//! Independent routes to values the library computes another way.

use std::f64::consts::PI;

use approx::assert_relative_eq;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use aqm_core::analysis::{bootstrap, fit_beam_position, PumpingDepletion};
use aqm_core::atomic::{clebsch_gordan_doubled, saturation_intensity, wigner6j, wigner6j_doubled, LinewidthParams};
use aqm_core::crosstalk::{
    bloch_angle_scan, detection_beam, gamma_from_intensity, psf_crosstalk, BeamGeometry, PsfOptions,
};
use aqm_core::detection::{
    monte_carlo_no_photon, optimal_detection_time, p_no_photon_dark, avg_detection_fidelity, AssetExposure,
    DetectionModel,
};
use aqm_core::holography::{
    field_at, ifta_generate, propagate, relative_intensity_continuous, fit_pupil_amplitude, IftaOptions, PupilField,
    TargetField,
};
use aqm_core::lindblad::{evolve, lindblad_rhs, CMatrix, CollapseOperator, DensityMatrix, EvolveOptions, ProbeBeam};
use aqm_core::protocols::{reset_time, Atom, RamseyModel};

/// ⟨j1 m1; j2 m2 | j m⟩ read off the eigenvectors of J² in the product
/// basis, phases fixed by ⟨j1 j1; j2 (j−j1) | j j⟩ > 0 and J₋ lowering.
/// Arguments are doubled.
fn cg_by_diagonalization(j1: i32, j2: i32) -> impl Fn(i32, i32, i32, i32) -> f64 {
    let basis: Vec<(i32, i32)> = (0..=j1).flat_map(|a| (0..=j2).map(move |b| (j1 - 2 * a, j2 - 2 * b))).collect();
    let dim = basis.len();
    let idx = |m1: i32, m2: i32| basis.iter().position(|&(a, b)| a == m1 && b == m2);
    let jf = |j: i32| j as f64 / 2.0;
    // ladder coefficient for |j m⟩ → |j m±1⟩, doubled m
    let ladder = |j: i32, m: i32, up: bool| {
        let (j, m) = (jf(j), jf(m));
        if up { (j * (j + 1.0) - m * (m + 1.0)).sqrt() } else { (j * (j + 1.0) - m * (m - 1.0)).sqrt() }
    };
    let mut jplus = DMatrix::<f64>::zeros(dim, dim);
    let mut jz = DMatrix::<f64>::zeros(dim, dim);
    for (c, &(m1, m2)) in basis.iter().enumerate() {
        jz[(c, c)] = jf(m1 + m2);
        if let Some(r) = idx(m1 + 2, m2) {
            jplus[(r, c)] += ladder(j1, m1, true);
        }
        if let Some(r) = idx(m1, m2 + 2) {
            jplus[(r, c)] += ladder(j2, m2, true);
        }
    }
    let jminus = jplus.transpose();
    let j2op = &jminus * &jplus + &jz * &jz + &jz;

    let mut table = std::collections::HashMap::new();
    let mut j = j1 + j2;
    while j >= (j1 - j2).abs() {
        // highest weight state: eigenvector of J² with m = j
        let sub: Vec<usize> = basis.iter().enumerate().filter(|(_, b)| b.0 + b.1 == j).map(|(k, _)| k).collect();
        let block = DMatrix::from_fn(sub.len(), sub.len(), |r, c| j2op[(sub[r], sub[c])]);
        let eig = block.symmetric_eigen();
        let target = jf(j) * (jf(j) + 1.0);
        let col = (0..sub.len()).min_by(|&a, &b| {
            (eig.eigenvalues[a] - target).abs().total_cmp(&(eig.eigenvalues[b] - target).abs())
        });
        let col = col.expect("non-empty block");
        let mut v = nalgebra::DVector::<f64>::zeros(dim);
        for (r, &k) in sub.iter().enumerate() {
            v[k] = eig.eigenvectors[(r, col)];
        }
        let anchor = idx(j1, j - j1).expect("anchor state exists");
        if v[anchor] < 0.0 {
            v = -v;
        }
        let mut m = j;
        loop {
            for (k, &(m1, m2)) in basis.iter().enumerate() {
                table.insert((m1, m2, j, m), v[k]);
            }
            if m == -j {
                break;
            }
            v = &jminus * v / ladder(j, m, false);
            m -= 2;
        }
        j -= 2;
    }
    move |m1, m2, j, m| *table.get(&(m1, m2, j, m)).unwrap_or(&0.0)
}

#[test]
fn clebsch_gordan_matches_diagonalization() {
    for (j1, j2) in [(1, 1), (2, 1), (2, 2), (3, 2), (4, 2), (3, 3)] {
        let oracle = cg_by_diagonalization(j1, j2);
        let mut j = j1 + j2;
        while j >= (j1 - j2).abs() {
            for m1 in (-j1..=j1).step_by(2) {
                for m2 in (-j2..=j2).step_by(2) {
                    let m = m1 + m2;
                    if m.abs() > j {
                        continue;
                    }
                    let want = oracle(m1, m2, j, m);
                    let got = clebsch_gordan_doubled(j1, m1, j2, m2, j, m);
                    assert!((got - want).abs() < 1e-12, "j1={j1} j2={j2} j={j} m1={m1} m2={m2}: {got} vs {want}");
                }
            }
            j -= 2;
        }
    }
}

/// 6j from four coupling coefficients (recoupling of three angular
/// momenta), all taken from the diagonalization oracle.
fn sixj_by_recoupling(j1: i32, j2: i32, j12: i32, j3: i32, j: i32, j23: i32) -> f64 {
    let c12 = cg_by_diagonalization(j1, j2);
    let c123 = cg_by_diagonalization(j12, j3);
    let c23 = cg_by_diagonalization(j2, j3);
    let c1_23 = cg_by_diagonalization(j1, j23);
    let m = j;
    let mut sum = 0.0;
    for m1 in (-j1..=j1).step_by(2) {
        for m2 in (-j2..=j2).step_by(2) {
            let m3 = m - m1 - m2;
            if m3.abs() > j3 {
                continue;
            }
            let (m12, m23) = (m1 + m2, m2 + m3);
            if m12.abs() > j12 || m23.abs() > j23 {
                continue;
            }
            sum += c12(m1, m2, j12, m12) * c123(m12, m3, j, m) * c23(m2, m3, j23, m23) * c1_23(m1, m23, j, m);
        }
    }
    let phase = if ((j1 + j2 + j3 + j) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    sum * phase / (((j12 + 1) * (j23 + 1)) as f64).sqrt()
}

#[test]
fn sixj_matches_recoupling() {
    assert_relative_eq!(wigner6j(0.5, 0.5, 1.0, 0.5, 0.5, 1.0).unwrap(), 1.0 / 6.0, max_relative = 1e-13);
    assert_relative_eq!(wigner6j(1.0, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap(), 1.0 / 6.0, max_relative = 1e-13);
    let cases = [
        (1, 1, 2, 1, 1, 2),
        (1, 1, 0, 1, 1, 2),
        (2, 2, 2, 2, 2, 2),
        (2, 1, 1, 2, 1, 1),
        (2, 2, 4, 2, 2, 0),
        (3, 1, 2, 2, 1, 3),
        (2, 2, 2, 1, 1, 3),
        (4, 2, 2, 2, 4, 2),
    ];
    for (a, b, c, d, e, f) in cases {
        let want = sixj_by_recoupling(a, b, c, d, e, f);
        let got = wigner6j_doubled([a, b, c, d, e, f]);
        assert!((got - want).abs() < 1e-12, "{{{a} {b} {c}; {d} {e} {f}}}/2: {got} vs {want}");
    }
}

#[test]
fn saturation_intensity_from_codata() {
    let h = 6.626_070_15e-34;
    let c = 299_792_458.0;
    let gamma = 2.0 * PI * 19.6e6;
    let lambda = 369.5e-9;
    let direct = PI * gamma * c * h / (3.0 * lambda * lambda * lambda);
    assert_relative_eq!(saturation_intensity(gamma, lambda).unwrap(), direct, max_relative = 1e-15);
    assert!((direct - 510.0).abs() < 5.0, "{direct}");
}

fn random_instance(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> (CMatrix, Vec<CollapseOperator>, DensityMatrix) {
    let mut h = CMatrix::zeros(dim, dim);
    for i in 0..dim {
        h[(i, i)] = Complex64::new(rng.random_range(-1.0..1.0) * scale, 0.0);
        for j in i + 1..dim {
            let z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
            h[(i, j)] = z;
            h[(j, i)] = z.conj();
        }
    }
    let ops = (0..dim)
        .map(|k| CollapseOperator::new(rng.random_range(0.0..scale), k, rng.random_range(0..dim)).unwrap())
        .collect();
    let psi: Vec<Complex64> = (0..dim).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let norm = psi.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let rho = DensityMatrix::pure(&psi.iter().map(|c| c / norm).collect::<Vec<_>>()).unwrap();
    (h, ops, rho)
}

#[test]
fn adaptive_integrator_matches_fixed_step_euler() {
    let gamma = LinewidthParams::yb171().gamma;
    let dt = 1e-4 / gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..4 {
        let (h, ops, rho0) = random_instance(&mut rng, 4, 0.05 * gamma);
        let steps = 10_000;
        let mut m = rho0.matrix().clone();
        for _ in 0..steps {
            m += lindblad_rhs(&m, &h, &ops) * Complex64::new(dt, 0.0);
        }
        let adaptive = evolve(&rho0, &h, &ops, steps as f64 * dt, &EvolveOptions::default()).unwrap();
        let diff = (adaptive.matrix() - &m).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "max deviation {diff:e}");
    }
}

#[test]
fn aqm_rate_is_linear_in_intensity_for_the_full_model() {
    let atom = Atom::default();
    let tau = 11e-6;
    let gamma_full = |i: f64| {
        let probe = detection_beam(i);
        let f = bloch_angle_scan(&[0.0], &probe, tau, RamseyModel::Full, &atom).unwrap()[0];
        -3.0 * f.ln() / tau
    };
    let (g1, g2, g4) = (gamma_full(2.5e-5), gamma_full(5e-5), gamma_full(1e-4));
    assert_relative_eq!(g2 / g1, 2.0, max_relative = 1e-3);
    // the leading correction is saturation, itself linear in I
    assert_relative_eq!((2.0 - g4 / g2) / (2.0 - g2 / g1), 2.0, max_relative = 0.05);
    let weak = gamma_from_intensity(&detection_beam(2.5e-5), &atom.params).unwrap().gamma;
    assert_relative_eq!(g1, weak, max_relative = 0.01);
}

#[test]
fn reset_time_halves_when_unsaturated_intensity_doubles() {
    // rate-equation limit: every pumping rate is linear in I
    let atom = Atom::default();
    let t = |i: f64| reset_time(&ProbeBeam::with_pi_fraction(i, 0.5, 1.0).unwrap(), &atom).unwrap().tau_op;
    assert_relative_eq!(t(0.01) / t(0.02), 2.0, max_relative = 0.03);
}

#[test]
fn truncated_psf_matches_sampled_fourier_pupil() {
    let lambda = LinewidthParams::yb171().wavelength;
    let (n, r_px) = (1024usize, 160.0);
    let w = 1.5e-6;
    // pupil amplitude exp(−k²w²/4) on the sampled disc
    let pupil = PupilField::gaussian(n, 1.0, r_px, 1.0, 0.16, lambda);
    let dk = 2.0 * PI * 0.16 / (lambda * r_px);
    let mut field = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            if pupil.inside(i, j) {
                let (x, y) = (j as f64 - (n / 2) as f64, i as f64 - (n / 2) as f64);
                let k2 = (x * x + y * y) * dk * dk;
                field[i * n + j] = Complex64::new((-k2 * w * w / 4.0).exp(), 0.0);
            }
        }
    }
    let dx = pupil.image_pitch();
    let peak = field_at(&field, n, 0.0, 0.0).norm_sqr();
    for d in [2.0 * w, 3.0 * w] {
        let sampled = field_at(&field, n, d / dx, 0.0).norm_sqr() / peak;
        let geom = BeamGeometry { offset: d, ..Default::default() };
        let quad = psf_crosstalk(&geom, None, &PsfOptions::default()).unwrap();
        assert_relative_eq!(quad, sampled, max_relative = 0.05);
    }
}

#[test]
fn gaussian_pupil_focuses_to_the_fourier_partner_waist() {
    let lambda = LinewidthParams::yb171().wavelength;
    let n = 512;
    let pupil = PupilField::gaussian(n, 1.0, 120.0, 1.0, 0.16, lambda);
    let w = 1.5e-6;
    let dk = 2.0 * PI * 0.16 / (lambda * pupil.aperture_px());
    let k0 = 2.0 / w;
    // 1/e amplitude radius k0 ↔ NA_eff = λ/(πw); keep it well inside the aperture
    assert!(k0 / dk < 0.5 * pupil.aperture_px());
    let field: Vec<Complex64> = (0..n * n)
        .map(|k| {
            let (x, y) = ((k % n) as f64 - (n / 2) as f64, (k / n) as f64 - (n / 2) as f64);
            Complex64::new((-(x * x + y * y) * dk * dk / (k0 * k0)).exp(), 0.0)
        })
        .collect();
    let dx = pupil.image_pitch();
    let peak = field_at(&field, n, 0.0, 0.0).norm_sqr();
    let at_w = field_at(&field, n, w / dx, 0.0).norm_sqr() / peak;
    assert_relative_eq!(at_w, (-2.0f64).exp(), max_relative = 1e-6);
}

#[test]
fn pupil_tilt_only_shifts_the_image() {
    let n = 256;
    let pupil = PupilField::gaussian(n, 1.0, 40.0, 30.0, 0.16, 369.5e-9);
    let f = pupil.field();
    let (sx, sy) = (7i64, -4i64);
    let tilted: Vec<Complex64> = f
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let (x, y) = ((k % n) as f64 - (n / 2) as f64, (k / n) as f64 - (n / 2) as f64);
            c * Complex64::from_polar(1.0, 2.0 * PI * (sx as f64 * x + sy as f64 * y) / n as f64)
        })
        .collect();
    let a = propagate(&f, n);
    let b = propagate(&tilted, n);
    let wrap = |v: i64| v.rem_euclid(n as i64) as usize;
    for i in 0..n {
        for j in 0..n {
            let src = a[i * n + j].norm_sqr();
            let dst = b[wrap(i as i64 + sy) * n + wrap(j as i64 + sx)].norm_sqr();
            assert!((src - dst).abs() < 1e-9 * a[(n / 2) * n + n / 2].norm_sqr());
        }
    }
}

#[test]
fn synthesized_beam_beats_the_hard_aperture_psf() {
    let lambda = LinewidthParams::yb171().wavelength;
    let n = 512;
    let pupil = PupilField::gaussian(n, 1.0, 64.0, 96.0, 0.16, lambda);
    let w = 1.5e-6;
    let center = (4.0 * w, 0.0);
    let target = TargetField::gaussian(&pupil, w, center).unwrap();
    let res = ifta_generate(&target, &pupil, 20, &IftaOptions::for_grid(n)).unwrap();
    let ifta = relative_intensity_continuous(&res.modulation, &pupil, center, (0.0, 0.0));
    let geom = BeamGeometry { offset: 4.0 * w, ..Default::default() };
    let psf = psf_crosstalk(&geom, None, &PsfOptions::default()).unwrap();
    assert!(ifta <= psf, "IFTA {ifta:e} vs PSF {psf:e}");
}

#[test]
fn ifta_converges_with_grid_size() {
    let lambda = LinewidthParams::yb171().wavelength;
    let w = 1.5e-6;
    let center = (4.0 * w, 0.0);
    let run = |n: usize| {
        // same ion-plane pitch: the aperture scales with the grid
        let pupil = PupilField::gaussian(n, 1.0, (n / 8) as f64, 1.5 * (n / 8) as f64, 0.16, lambda);
        let target = TargetField::gaussian(&pupil, w, center).unwrap();
        let res = ifta_generate(&target, &pupil, 20, &IftaOptions::for_grid(n)).unwrap();
        relative_intensity_continuous(&res.modulation, &pupil, center, (0.0, 0.0))
    };
    let (coarse, fine) = (run(512), run(1024));
    assert_relative_eq!(coarse, fine, max_relative = 0.1);
}

#[test]
fn two_way_dark_formula_agrees_with_telegraph_simulation() {
    let m = DetectionModel::new(5.5e6, 6.0, 98.0, 0.0, 0.04).unwrap();
    for t in [5e-6, 20e-6, 60e-6] {
        let mc = monte_carlo_no_photon(&m, t, false, false, 1_000_000, 5);
        assert!((mc.p - p_no_photon_dark(&m, t)).abs() < 1e-3);
    }
}

#[test]
fn optimum_without_crosstalk_matches_dense_grid() {
    let m = DetectionModel::new(5.5e6, 6.0, 98.0, 0.0, 0.04).unwrap();
    let asset = AssetExposure { gamma: 0.0, first_photon: true };
    let opt = optimal_detection_time(&m, &asset, 400e-6).unwrap();
    let best = (1..=400_000)
        .map(|k| k as f64 * 1e-9)
        .max_by(|a, b| avg_detection_fidelity(&m, *a).total_cmp(&avg_detection_fidelity(&m, *b)))
        .unwrap();
    assert!((opt.tau - best).abs() < 2e-9, "{} vs {best}", opt.tau);
    assert!(opt.tau.is_finite() && opt.tau > 0.0);
}

#[test]
fn noisy_pupil_profile_recovered_within_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let truth = [1.0, 3.0, -2.0, 14.0, 10.0, 0.02];
    let mut samples = Vec::new();
    for i in -5..=5 {
        for j in -5..=5 {
            let (x, y) = (4.0 * i as f64, 4.0 * j as f64);
            let z = aqm_core::analysis::Gaussian2d::value(&truth, x, y);
            let noisy = z * (1.0 + 0.05 * Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
            samples.push((x, y, noisy));
        }
    }
    let fit = fit_pupil_amplitude(&samples, 64).unwrap();
    let fit = fit.fit.expect("non-degenerate profile");
    for (k, want) in truth.iter().enumerate().take(5) {
        let err = fit.std_errors[k];
        assert!((fit.params[k] - want).abs() < 3.0 * err + 1e-12, "param {k}: {} ± {err} vs {want}", fit.params[k]);
    }
}

fn depletion_scan(center: f64, jitter: &[f64]) -> (Vec<f64>, Vec<f64>) {
    use aqm_core::analysis::Model;
    let xs: Vec<f64> = (0..15).map(|k| -3.5e-6 + 0.5e-6 * k as f64).collect();
    let ys = xs
        .iter()
        .zip(jitter)
        .map(|(x, dj)| PumpingDepletion.eval(&[1.0, 1.2, center, 1.5e-6], x + dj))
        .collect();
    (xs, ys)
}

#[test]
fn beam_drift_inflates_centre_uncertainty() {
    let still = vec![0.0; 15];
    let (xs, ys) = depletion_scan(0.0, &still);
    let quiet = fit_beam_position(&xs, &ys).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // drift of 0.2 µm over the scan, as a random walk
    let mut pos = 0.0;
    let drift: Vec<f64> = (0..15)
        .map(|_| {
            pos += rng.random_range(-1.0..1.0) * 0.2e-6 / 15f64.sqrt();
            pos
        })
        .collect();
    let (xs, ys) = depletion_scan(0.0, &drift);
    let drifting = fit_beam_position(&xs, &ys).unwrap();
    let e0 = quiet.error("x0").unwrap();
    let e1 = drifting.error("x0").unwrap();
    assert!(e1 > 10.0 * e0.max(1e-15), "{e0:e} → {e1:e}");
    assert_relative_eq!(drifting.get("w").unwrap(), 1.5e-6, max_relative = 0.1);
}

#[test]
fn bootstrap_approaches_analytic_error_with_many_resamples() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let normal = Normal::new(5.0, 2.0).unwrap();
    let data: Vec<f64> = (0..200).map(|_| normal.sample(&mut rng)).collect();
    let mean = |d: &[f64]| -> Result<f64, ()> { Ok(d.iter().sum::<f64>() / d.len() as f64) };
    let res = bootstrap(&data, mean, 2000, 3).unwrap();
    let m = mean(&data).unwrap();
    let s = (data.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (data.len() - 1) as f64).sqrt();
    assert_relative_eq!(res.std, s / (data.len() as f64).sqrt(), max_relative = 0.06);
}

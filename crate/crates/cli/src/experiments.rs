//! Named experiments. Each maps one resolved config to one CSV row.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use aqm_core::atomic::LinewidthParams;
use aqm_core::crosstalk::{
    aqm_estimate, bloch_angle_scan, default_scattering_rate, fidelity_from_contrast, fidelity_from_t2,
    gamma_from_intensity, gaussian_crosstalk, interion_gamma, p_aqm_from_gamma, p_aqm_star, psf_crosstalk, Process,
    ScatterModel, ScatterPolarization,
};
use aqm_core::detection::{
    avg_detection_fidelity, monte_carlo_no_photon, optimal_detection_time, p_no_photon_bright, p_no_photon_dark,
    AssetExposure, DetectionModel,
};
use aqm_core::holography::{
    binarize, first_order_image, ifta_generate, relative_intensity, relative_intensity_continuous,
    simulate_phase_sensing, window_power, wrap_phase, IftaOptions, Patch, PupilField, SensingOptions, TargetField,
    SQUARE_WAVE_GAIN,
};
use aqm_core::lindblad::ProbeBeam;
use aqm_core::protocols::{reset_time, simulate_ramsey, Atom, RamseyConfig};

use crate::scenario::{linspace, logspace, Axis, Config};

pub type RowResult = Result<Vec<f64>, String>;

pub struct Experiment {
    pub name: &'static str,
    pub description: &'static str,
    pub columns: &'static [&'static str],
    /// Config overrides applied before the scenario's own.
    pub defaults: fn() -> Value,
    pub axes: fn() -> Vec<Axis>,
    pub row: fn(&Config, &Row) -> RowResult,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

/// Per-row context.
pub struct Row {
    pub index: usize,
    pub seed: u64,
}

impl Row {
    /// Independent stream per row, so results do not depend on scheduling.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.index as u64);
        rng
    }
}

pub fn find(name: &str) -> Option<&'static Experiment> {
    ALL.iter().find(|e| e.name == name)
}

fn none() -> Value {
    json!({})
}

pub static ALL: [Experiment; 12] = [
    Experiment {
        name: "fig1c",
        description: "AQM probability of the asset vs intensity crosstalk I_X for reset and 11 µs detection, \
                      with the inter-ion scattering band over the field angle",
        columns: &["P_AQM_reset", "P_AQM_detect_11us", "P_star_band_lo", "P_star_band_hi"],
        defaults: none,
        axes: || vec![Axis::new("crosstalk.i_x", "I_X", logspace(1e-6, 1e-2, 41))],
        row: fig1c,
    },
    Experiment {
        name: "fig2b",
        description: "Ramsey contrast of the asset vs wait time, without light, with leaked detection light \
                      (simulated and closed form), and with inter-ion scattering added",
        columns: &["contrast_dark", "contrast_single_ion", "contrast_single_ion_analytic", "contrast_two_ion_analytic"],
        defaults: || json!({"crosstalk": {"i_x": 1e-3}}),
        axes: || vec![Axis::new("ramsey.wait", "wait", linspace(0.0, 1e-3, 21))],
        row: fig2b,
    },
    Experiment {
        name: "fig3b",
        description: "Reset τ_op and asset fidelity F_1|2 vs the π share and the F=1→F'=1 share of the \
                      reset light at I_2 = 1.25 I_sat, I_X = 5e-5",
        columns: &["tau_op", "F_1_2", "P_AQM"],
        defaults: || json!({"reset_beam": {"intensity_sat": 1.25}}),
        axes: || {
            vec![
                Axis::new("reset_beam.d1_11_fraction", "I11_over_I", vec![0.5, 0.75, 1.0]),
                Axis::new("reset_beam.pi_fraction", "I_pi_over_I", linspace(0.3, 0.95, 14)),
            ]
        },
        row: fig3b,
    },
    Experiment {
        name: "fig3c",
        description: "Asset fidelity during reset vs beam-to-asset distance d/w, Gaussian and \
                      NA-limited crosstalk",
        columns: &["I_X_gaussian", "I_X_psf", "F_1_2", "P_AQM"],
        defaults: || json!({"reset_beam": {"intensity_sat": 1.25}}),
        axes: || vec![Axis::new("beam.offset_waists", "d_over_w", linspace(0.0, 6.0, 25))],
        row: fig3c,
    },
    Experiment {
        name: "fig4a",
        description: "Asset fidelity vs π share of 11 µs detection light at 1.25 I_sat",
        columns: &["F_1_2", "P_AQM", "P_AQM_optical", "P_AQM_interion"],
        defaults: || json!({"detection_beam": {"intensity_sat": 1.25}}),
        axes: || vec![Axis::new("detection_beam.pi_fraction", "I_pi_over_I", linspace(0.0, 1.0, 21))],
        row: fig4a,
    },
    Experiment {
        name: "fig4b",
        description: "Asset fidelity during 11 µs detection vs beam-to-asset distance d/w",
        columns: &["I_X_gaussian", "I_X_psf", "F_1_2", "P_AQM"],
        defaults: || json!({"detection_beam": {"intensity_sat": 1.25}}),
        axes: || vec![Axis::new("beam.offset_waists", "d_over_w", linspace(0.0, 6.0, 25))],
        row: fig4b,
    },
    Experiment {
        name: "fig4d",
        description: "Process-ion detection fidelity, asset fidelity and their product vs detection time",
        columns: &["detection_fidelity", "asset_fidelity", "product"],
        defaults: none,
        axes: || vec![Axis::new("detection.tau", "tau_d", linspace(1e-6, 100e-6, 100))],
        row: fig4d,
    },
    Experiment {
        name: "fig4e",
        description: "Optimal detection time vs net detection efficiency",
        columns: &["optimal_tau_d"],
        defaults: none,
        axes: || vec![Axis::new("detection.efficiency", "efficiency", linspace(0.01, 0.10, 10))],
        row: fig4e,
    },
    Experiment {
        name: "figS4",
        description: "Asset infidelity vs Bloch angle θ of the initial state under weak detection light, \
                      with the Ramsey-contrast estimate for comparison",
        columns: &["infidelity", "infidelity_ramsey"],
        defaults: none,
        axes: || vec![Axis::new("bloch.theta", "theta", linspace(0.0, PI, 25))],
        row: fig_s4,
    },
    Experiment {
        name: "hologram",
        description: "Binary-hologram synthesis by IFTA with 4/π target scaling: crosstalk \
                      at the asset and first-order power gain vs spot distance",
        columns: &["crosstalk_binary", "crosstalk_continuous", "window_error", "gain"],
        defaults: none,
        axes: || vec![Axis::new("holography.offset_waists", "d_over_w", vec![2.0, 3.0, 4.0, 5.0, 6.0])],
        row: hologram,
    },
    Experiment {
        name: "phase-sense",
        description: "Aberration sensing with the ion: recovered two-patch pupil phase vs injected \
                      phase, with a random common phase per row",
        columns: &["recovered_phase", "error", "fringe_amplitude"],
        defaults: none,
        axes: || {
            let steps = 16;
            vec![Axis::new(
                "phase_sense.injected",
                "injected_phase",
                (0..steps).map(|k| -PI + 2.0 * PI * k as f64 / steps as f64).collect(),
            )]
        },
        row: phase_sense,
    },
    Experiment {
        name: "detection-mc",
        description: "Closed-form P(n=0) for bright and dark ions vs a Monte Carlo \
                      telegraph simulation",
        columns: &[
            "p0_bright_closed",
            "p0_bright_mc",
            "p0_bright_se",
            "p0_dark_closed",
            "p0_dark_mc",
            "p0_dark_se",
        ],
        defaults: none,
        axes: || vec![Axis::new("detection.tau", "t", linspace(2e-6, 50e-6, 25))],
        row: detection_mc,
    },
];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Scattered-light model whose AQM-active share follows the beam's
/// polarization.
fn scatter(process: Process, beam: &ProbeBeam, params: &LinewidthParams) -> ScatterModel {
    let active_share = match process {
        Process::Detection => beam.pi_fraction,
        Process::Reset => 1.0 - beam.pi_fraction,
    };
    ScatterModel {
        gamma_sc: default_scattering_rate(process, params),
        polarization: ScatterPolarization::ProcessMix,
        active_share,
    }
}

/// Memoizes expensive simulations shared between rows. Keys are the JSON
/// of the inputs; values are identical whichever row computes them first.
fn memo<T: Clone + Send + 'static>(
    cache: &'static OnceLock<Mutex<HashMap<String, Result<T, String>>>>,
    key: String,
    f: impl FnOnce() -> Result<T, String>,
) -> Result<T, String> {
    let map = cache.get_or_init(Default::default);
    if let Some(v) = map.lock().expect("cache lock").get(&key) {
        return v.clone();
    }
    let v = f();
    map.lock().expect("cache lock").insert(key, v.clone());
    v
}

fn reset_tau(beam: &ProbeBeam, atom: &Atom) -> Result<f64, String> {
    static CACHE: OnceLock<Mutex<HashMap<String, Result<f64, String>>>> = OnceLock::new();
    let key = serde_json::to_string(beam).expect("beam serializes");
    memo(&CACHE, key, || reset_time(beam, atom).map(|r| r.tau_op).map_err(err))
}

/// Detection rates at the configured efficiency, with any explicit rates
/// taking precedence over the simulated ones. Returns the model and the
/// simulated detection beam.
fn detection_model(cfg: &Config, atom: &Atom) -> Result<(DetectionModel, ProbeBeam), String> {
    static CACHE: OnceLock<Mutex<HashMap<String, Result<(DetectionModel, ProbeBeam), String>>>> = OnceLock::new();
    let i2 = cfg.detection_beam.intensity_sat;
    let (sim, beam) = memo(&CACHE, format!("{i2:?}"), || DetectionModel::from_simulation(i2, 1.0, atom).map_err(err))?;
    let d = &cfg.detection;
    let m = DetectionModel::new(
        d.r_o.unwrap_or(sim.r_o),
        d.r_b.unwrap_or(sim.r_b),
        d.r_d.unwrap_or(sim.r_d),
        d.r_bg,
        d.efficiency,
    )
    .map_err(err)?;
    Ok((m, beam))
}

fn fig1c(cfg: &Config, _: &Row) -> RowResult {
    let atom = Atom::default();
    let p = &atom.params;
    let chain = cfg.chain();
    let i_x = cfg.crosstalk.i_x;
    let det_beam = cfg.detection_beam.probe()?;
    let rst_beam = cfg.reset_beam.probe()?;
    let tau_d = cfg.detection.tau;
    let det_s = scatter(Process::Detection, &det_beam, p);
    let rst_s = scatter(Process::Reset, &rst_beam, p);
    let tau_r = reset_tau(&rst_beam, &atom)?;
    let det = aqm_estimate(Process::Detection, &det_beam, i_x, Some(tau_d), &chain, &det_s, &atom).map_err(err)?;
    let rst = aqm_estimate(Process::Reset, &rst_beam, i_x, Some(tau_r), &chain, &rst_s, &atom).map_err(err)?;
    let mut band = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..=30 {
        let mut c = chain;
        c.b_field_angle = PI / 2.0 * k as f64 / 30.0;
        let s = p_aqm_star(&c, Process::Detection, tau_d, &det_s, p).map_err(err)?;
        band = (band.0.min(s), band.1.max(s));
    }
    Ok(vec![rst.p_aqm, det.p_aqm, band.0, band.1])
}

fn fig2b(cfg: &Config, _: &Row) -> RowResult {
    let atom = Atom::default();
    let t = cfg.ramsey.wait;
    let template = cfg.detection_beam.probe()?;
    let leak = template.scaled(cfg.crosstalk.i_x * template.intensity_sat);
    let run = |probe: Option<ProbeBeam>| -> Result<f64, String> {
        let rc = RamseyConfig {
            waits: vec![t],
            probe,
            detuning: cfg.ramsey.detuning,
            model: cfg.ramsey.model,
            ..Default::default()
        };
        Ok(simulate_ramsey(&rc, &atom).map_err(err)?.contrast[0])
    };
    let gamma = gamma_from_intensity(&leak, &atom.params).map_err(err)?.gamma;
    let s = scatter(Process::Detection, &template, &atom.params);
    let g_star = interion_gamma(&cfg.chain(), Process::Detection, &s, &atom.params).map_err(err)?;
    Ok(vec![run(None)?, run(Some(leak))?, (-gamma * t / 2.0).exp(), (-(gamma + g_star) * t / 2.0).exp()])
}

fn reset_row(cfg: &Config, i_x: f64) -> Result<(f64, f64, f64), String> {
    let atom = Atom::default();
    let beam = cfg.reset_beam.probe()?;
    let tau = reset_tau(&beam, &atom)?;
    let gamma = gamma_from_intensity(&beam.scaled(i_x * beam.intensity_sat), &atom.params).map_err(err)?.gamma;
    let f = if gamma > 0.0 { fidelity_from_t2(tau, 2.0 / gamma).map_err(err)? } else { 1.0 };
    Ok((tau, f, p_aqm_from_gamma(gamma, tau)))
}

fn fig3b(cfg: &Config, _: &Row) -> RowResult {
    let (tau, f, p) = reset_row(cfg, cfg.crosstalk.i_x)?;
    Ok(vec![tau, f, p])
}

fn crosstalk_pair(cfg: &Config) -> Result<(f64, f64), String> {
    let g = cfg.beam_geometry();
    let gauss = gaussian_crosstalk(g.offset, g.waist);
    let psf = psf_crosstalk(&g, None, &cfg.psf_options()).map_err(err)?;
    Ok((gauss, psf))
}

fn fig3c(cfg: &Config, _: &Row) -> RowResult {
    let atom = Atom::default();
    let (gauss, psf) = crosstalk_pair(cfg)?;
    let beam = cfg.reset_beam.probe()?;
    let tau = reset_tau(&beam, &atom)?;
    let s = scatter(Process::Reset, &beam, &atom.params);
    let est = aqm_estimate(Process::Reset, &beam, psf, Some(tau), &cfg.chain(), &s, &atom).map_err(err)?;
    Ok(vec![gauss, psf, est.fidelity, est.p_aqm])
}

fn fig4a(cfg: &Config, _: &Row) -> RowResult {
    let atom = Atom::default();
    let beam = cfg.detection_beam.probe()?;
    let s = scatter(Process::Detection, &beam, &atom.params);
    let est = aqm_estimate(Process::Detection, &beam, cfg.crosstalk.i_x, Some(cfg.detection.tau), &cfg.chain(), &s, &atom)
        .map_err(err)?;
    Ok(vec![est.fidelity, est.p_aqm, est.optical, est.interion])
}

fn fig4b(cfg: &Config, _: &Row) -> RowResult {
    let atom = Atom::default();
    let (gauss, psf) = crosstalk_pair(cfg)?;
    let beam = cfg.detection_beam.probe()?;
    let s = scatter(Process::Detection, &beam, &atom.params);
    let est =
        aqm_estimate(Process::Detection, &beam, psf, Some(cfg.detection.tau), &cfg.chain(), &s, &atom).map_err(err)?;
    Ok(vec![gauss, psf, est.fidelity, est.p_aqm])
}

fn fig4d(cfg: &Config, _: &Row) -> RowResult {
    let atom = Atom::default();
    let (m, beam) = detection_model(cfg, &atom)?;
    let asset = AssetExposure::from_crosstalk(&beam, cfg.crosstalk.i_x, cfg.detection.first_photon, &atom).map_err(err)?;
    let t = cfg.detection.tau;
    let (fd, fa) = (avg_detection_fidelity(&m, t), asset.fidelity(t));
    Ok(vec![fd, fa, fd * fa])
}

fn fig4e(cfg: &Config, _: &Row) -> RowResult {
    let atom = Atom::default();
    let (m, beam) = detection_model(cfg, &atom)?;
    let asset = AssetExposure::from_crosstalk(&beam, cfg.crosstalk.i_x, cfg.detection.first_photon, &atom).map_err(err)?;
    let opt = optimal_detection_time(&m, &asset, cfg.detection.t_max).map_err(err)?;
    if !opt.unimodal {
        return Err(format!("fidelity product is not unimodal on [0, {}]", cfg.detection.t_max));
    }
    Ok(vec![opt.tau])
}

fn fig_s4(cfg: &Config, _: &Row) -> RowResult {
    let atom = Atom::default();
    let template = cfg.detection_beam.probe()?;
    let probe = template.scaled(cfg.crosstalk.i_x * template.intensity_sat);
    let tau = cfg.detection.tau;
    let f = bloch_angle_scan(&[cfg.bloch.theta], &probe, tau, cfg.bloch.model, &atom).map_err(err)?[0];
    let rc = RamseyConfig {
        waits: vec![tau],
        probe: Some(probe),
        detuning: cfg.ramsey.detuning,
        model: cfg.bloch.model,
        ..Default::default()
    };
    let contrast = simulate_ramsey(&rc, &atom).map_err(err)?.contrast[0];
    Ok(vec![1.0 - f, 1.0 - fidelity_from_contrast(contrast).map_err(err)?])
}

/// Addressing pupil scaled to an `n`-pixel hologram: the objective accepts
/// a disc of n/8 pixels and the illumination is 1.5 times wider.
fn addressing_pupil(n: usize, na: f64) -> PupilField {
    let pitch = 7.56e-6 * 1024.0 / n as f64;
    let r = (n / 8) as f64 * pitch;
    PupilField::gaussian(n, pitch, r, 1.5 * r, na, LinewidthParams::yb171().wavelength)
}

fn hologram(cfg: &Config, _: &Row) -> RowResult {
    let n = cfg.holography.grid as usize;
    let pupil = addressing_pupil(n, cfg.beam.na);
    let w = cfg.beam.waist;
    let center = (cfg.holography.offset_waists * w, 0.0);
    let target = TargetField::gaussian(&pupil, w, center).map_err(err)?;
    let opts = IftaOptions::for_grid(n);
    let res = ifta_generate(&target, &pupil, cfg.holography.iterations as usize, &opts).map_err(err)?;
    let binary = relative_intensity(&res.hologram, &pupil, center, (0.0, 0.0));
    let continuous = relative_intensity_continuous(&res.modulation, &pupil, center, (0.0, 0.0));
    let window = opts.window_waists * w;
    let power = |scale: f64| {
        let holo = binarize(&res.modulation, n, scale, opts.carrier);
        window_power(&first_order_image(&holo, &pupil), &pupil, center, window)
    };
    let gain = power(SQUARE_WAVE_GAIN) / power(1.0);
    Ok(vec![binary, continuous, *res.errors.last().expect("at least the initial error"), gain])
}

fn phase_sense(cfg: &Config, row: &Row) -> RowResult {
    let ps = &cfg.phase_sense;
    let n = ps.grid as usize;
    let mut pupil =
        PupilField::gaussian(n, 1.0, ps.aperture_radius, ps.beam_radius, cfg.beam.na, LinewidthParams::yb171().wavelength);
    let a = Patch { center: (ps.patch_a[0], ps.patch_a[1]), radius: ps.patch_radius };
    let b = Patch { center: (ps.patch_b[0], ps.patch_b[1]), radius: ps.patch_radius };
    let offset = row.rng().random_range(-PI..PI);
    let half = (n / 2) as f64;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 - half, i as f64 - half);
            if a.contains(x, y) {
                pupil.phase[i * n + j] = offset;
            } else if b.contains(x, y) {
                pupil.phase[i * n + j] = offset + ps.injected;
            }
        }
    }
    let steps = ps.phase_steps as usize;
    let phases: Vec<f64> = (0..steps).map(|k| 2.0 * PI * k as f64 / steps as f64).collect();
    let got = simulate_phase_sensing(&pupil, &a, &b, &phases, &SensingOptions::for_grid(n)).map_err(err)?;
    Ok(vec![got.phase, wrap_phase(got.phase - ps.injected), got.fringe_amplitude])
}

fn detection_mc(cfg: &Config, row: &Row) -> RowResult {
    let atom = Atom::default();
    let (m, _) = detection_model(cfg, &atom)?;
    let t = cfg.detection.tau;
    let trials = cfg.detection.trials as usize;
    let mut rng = row.rng();
    let (s_bright, s_dark) = (rng.random::<u64>(), rng.random::<u64>());
    let bright = monte_carlo_no_photon(&m, t, true, cfg.detection.one_way, trials, s_bright);
    let dark = monte_carlo_no_photon(&m, t, false, cfg.detection.one_way, trials, s_dark);
    Ok(vec![p_no_photon_bright(&m, t), bright.p, bright.std_error, p_no_photon_dark(&m, t), dark.p, dark.std_error])
}

//! Pulse-sequence simulators: Ramsey with light during the wait, optical
//! pumping reset and state-detection illumination.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{fit_exponential_decay, FitError};
use crate::atomic::{LevelScheme, LinewidthParams, DOWN, NUM_GROUND, UP};
use crate::lindblad::{
    build_hamiltonian, evolve, evolve_trajectory, evolve_uniform, spontaneous_collapse_ops, weak_probe_ops, CMatrix,
    CollapseOperator, CrossCoupling, DensityMatrix, EvolveOptions, LindbladError, Method, MicrowaveDrive, ProbeBeam,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Lindblad(#[from] LindbladError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("no reset: {0}")]
    NoReset(String),
    #[error("{0}")]
    Domain(String),
}

/// Level structure and linewidth shared by every protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub scheme: LevelScheme,
    pub params: LinewidthParams,
}

impl Default for Atom {
    fn default() -> Self {
        Self { scheme: LevelScheme::yb171(), params: LinewidthParams::yb171() }
    }
}

impl Atom {
    pub fn gamma(&self) -> f64 {
        self.params.gamma
    }

    fn excited_population(&self, rho: &DensityMatrix) -> f64 {
        self.scheme.excited_indices().map(|i| rho.population(i)).sum()
    }

    /// Photon scattering rate Γ·(P-manifold population).
    pub fn scattering_rate(&self, rho: &DensityMatrix) -> f64 {
        self.gamma() * self.excited_population(rho)
    }
}

/// Which master equation describes the asset ion during the wait.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RamseyModel {
    /// Ground manifold only, with effective scattering channels out of |↑⟩.
    #[default]
    Reduced,
    /// All eight levels with the probe in the Hamiltonian.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PulseModel {
    #[default]
    Ideal,
    /// Square microwave pulse of the given length, probe off.
    Finite { duration: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RamseyConfig {
    /// Microwave detuning Δ_uw (rad/s).
    pub detuning: f64,
    pub pulse: PulseModel,
    pub waits: Vec<f64>,
    /// Light reaching the asset ion during the wait.
    pub probe: Option<ProbeBeam>,
    pub repetitions: usize,
    pub model: RamseyModel,
    pub cross_coupling: CrossCoupling,
    /// Binomial shot noise with `repetitions` trials per point when set.
    pub shot_noise_seed: Option<u64>,
}

impl Default for RamseyConfig {
    fn default() -> Self {
        Self {
            detuning: 2.0 * PI * 10e3,
            pulse: PulseModel::Ideal,
            waits: Vec::new(),
            probe: None,
            repetitions: 200,
            model: RamseyModel::Reduced,
            cross_coupling: CrossCoupling::default(),
            shot_noise_seed: None,
        }
    }
}

impl RamseyConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.waits.is_empty() {
            return Err(ProtocolError::Domain("wait grid is empty".into()));
        }
        if self.waits.windows(2).any(|w| !(w[1] > w[0])) || !(self.waits[0] >= 0.0) {
            return Err(ProtocolError::Domain("wait grid must be non-negative and strictly increasing".into()));
        }
        if self.repetitions == 0 {
            return Err(ProtocolError::Domain("repetitions must be ≥ 1".into()));
        }
        if let PulseModel::Finite { duration } = self.pulse {
            if !(duration > 0.0) {
                return Err(ProtocolError::Domain("pulse duration must be positive".into()));
            }
        }
        if let Some(p) = &self.probe {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RamseyResult {
    pub waits: Vec<f64>,
    /// |↑⟩ population after the second pulse.
    pub p_up: Vec<f64>,
    /// Fringe contrast from a scan of the second-pulse phase.
    pub contrast: Vec<f64>,
    /// T₂* from an exponential fit to the contrast; infinite without decay.
    pub t2: f64,
    pub t2_error: f64,
    pub flags: Vec<String>,
}

/// π/2 rotation about an equatorial axis at angle `phase` on the clock pair.
pub fn ideal_half_pi(dim: usize, phase: f64) -> CMatrix {
    let mut u = CMatrix::identity(dim, dim);
    let c = (PI / 4.0).cos();
    let s = (PI / 4.0).sin();
    u[(DOWN, DOWN)] = Complex64::new(c, 0.0);
    u[(UP, UP)] = Complex64::new(c, 0.0);
    u[(UP, DOWN)] = Complex64::new(0.0, -s) * Complex64::from_polar(1.0, phase);
    u[(DOWN, UP)] = Complex64::new(0.0, -s) * Complex64::from_polar(1.0, -phase);
    u
}

struct RamseySystem {
    dim: usize,
    wait_h: CMatrix,
    wait_ops: Vec<CollapseOperator>,
    /// Diagonal of the wait Hamiltonian: the free evolution in the same frame.
    free_h: CMatrix,
}

fn ramsey_system(cfg: &RamseyConfig, atom: &Atom) -> Result<RamseySystem, ProtocolError> {
    let mw = MicrowaveDrive { rabi: 0.0, detuning: cfg.detuning, phase: 0.0 };
    let (dim, wait_h, wait_ops) = match cfg.model {
        RamseyModel::Reduced => {
            let h = build_hamiltonian(&atom.scheme, &atom.params, None, Some(&mw), CrossCoupling::Off)?;
            let ops = match &cfg.probe {
                Some(p) => weak_probe_ops(p, &atom.params)?,
                None => Vec::new(),
            };
            (NUM_GROUND, h.ground_block(), ops)
        }
        RamseyModel::Full => {
            let h = build_hamiltonian(&atom.scheme, &atom.params, cfg.probe.as_ref(), Some(&mw), cfg.cross_coupling)?;
            (atom.scheme.len(), h.matrix, spontaneous_collapse_ops(&atom.scheme, &atom.params))
        }
    };
    let free_h = CMatrix::from_diagonal(&wait_h.diagonal());
    Ok(RamseySystem { dim, wait_h, wait_ops, free_h })
}

fn apply_pulse(
    rho: &DensityMatrix,
    sys: &RamseySystem,
    pulse: PulseModel,
    phase: f64,
    opts: &EvolveOptions,
) -> Result<DensityMatrix, ProtocolError> {
    match pulse {
        PulseModel::Ideal => Ok(rho.transform(&ideal_half_pi(sys.dim, phase))),
        PulseModel::Finite { duration } => {
            let rabi = PI / 2.0 / duration;
            let mut h = sys.free_h.clone();
            let c = Complex64::from_polar(rabi / 2.0, phase);
            h[(UP, DOWN)] += c;
            h[(DOWN, UP)] += c.conj();
            Ok(evolve(rho, &h, &[], duration, opts)?)
        }
    }
}

const PHASE_STEPS: usize = 4;

fn free_propagator(diag_h: &CMatrix, t: f64) -> CMatrix {
    CMatrix::from_diagonal(&diag_h.diagonal().map(|e| Complex64::from_polar(1.0, -e.re * t)))
}

/// Prepare |↓⟩, π/2, wait T under the probe, π/2, read |↑⟩.
///
/// The contrast at each T comes from repeating the second pulse at four
/// phases and taking twice the first-harmonic amplitude, i.e. `2|ρ₀₂|` for
/// ideal pulses.
pub fn simulate_ramsey(cfg: &RamseyConfig, atom: &Atom) -> Result<RamseyResult, ProtocolError> {
    cfg.validate()?;
    let sys = ramsey_system(cfg, atom)?;
    let opts = EvolveOptions::default();
    let start = apply_pulse(&DensityMatrix::basis(sys.dim, DOWN), &sys, cfg.pulse, 0.0, &opts)?;
    let states = match cfg.model {
        // The reduced Hamiltonian is diagonal and commutes with the
        // weak-probe dissipator, so the dissipator is integrated alone and
        // the free precession applied exactly. Waits of many seconds would
        // otherwise need ~10⁶ fringe periods of integration.
        RamseyModel::Reduced => {
            let exact = EvolveOptions { method: Method::Exponential, ..opts };
            let zero = CMatrix::zeros(sys.dim, sys.dim);
            let damped = evolve_trajectory(&start, &zero, &sys.wait_ops, &cfg.waits, &exact)?;
            damped
                .iter()
                .zip(&cfg.waits)
                .map(|(rho, &t)| rho.transform(&free_propagator(&sys.free_h, t)))
                .collect()
        }
        RamseyModel::Full => evolve_trajectory(&start, &sys.wait_h, &sys.wait_ops, &cfg.waits, &opts)?,
    };

    let mut p_up = Vec::with_capacity(states.len());
    let mut contrast = Vec::with_capacity(states.len());
    for (k, rho) in states.iter().enumerate() {
        let mut p = [0.0; PHASE_STEPS];
        for (j, pj) in p.iter_mut().enumerate() {
            let phase = 2.0 * PI * j as f64 / PHASE_STEPS as f64;
            *pj = apply_pulse(rho, &sys, cfg.pulse, phase, &opts)?.population(UP).clamp(0.0, 1.0);
        }
        if let Some(seed) = cfg.shot_noise_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            for pj in p.iter_mut() {
                *pj = sample_binomial(*pj, cfg.repetitions, &mut rng)?;
            }
        }
        let b = (p[0] - p[2]) / 2.0;
        let c = (p[1] - p[3]) / 2.0;
        p_up.push(p[0]);
        contrast.push((2.0 * b.hypot(c)).clamp(0.0, 1.0));
    }

    let mut flags = Vec::new();
    let (t2, t2_error) = if contrast.iter().all(|&c| c >= 1.0 - 1e-9) {
        flags.push("no contrast decay".into());
        (f64::INFINITY, f64::NAN)
    } else if cfg.waits.len() < 3 {
        flags.push("too few waits for a T2 fit".into());
        (f64::NAN, f64::NAN)
    } else {
        match fit_exponential_decay(&cfg.waits, &contrast, None) {
            Ok(fit) => {
                flags.extend(fit.flags.iter().cloned());
                (fit.get("tau").expect("tau"), fit.error("tau").expect("tau"))
            }
            Err(e) => {
                flags.push(format!("T2 fit failed: {e}"));
                (f64::NAN, f64::NAN)
            }
        }
    };
    Ok(RamseyResult { waits: cfg.waits.clone(), p_up, contrast, t2, t2_error, flags })
}

pub const GRID_INTERVALS: usize = 5;
pub const GRID_POINTS: usize = 21;
pub const GRID_SPACING: f64 = 10e-6;
pub const GRID_START: f64 = 10e-6;

/// Five blocks of 21 waits at 10 µs spacing spread over `[10 µs, 2·T₂]`.
///
/// When `2·T₂` is too short for five separated 200 µs blocks the blocks
/// shrink to tile the window contiguously.
pub fn sample_wait_grid(t2_coarse: f64) -> Result<Vec<f64>, ProtocolError> {
    if !(t2_coarse > 0.0) || !t2_coarse.is_finite() {
        return Err(ProtocolError::Domain(format!("coarse T2 {t2_coarse} must be positive and finite")));
    }
    let end = 2.0 * t2_coarse;
    let start = GRID_START.min(end / 10.0);
    let span = (GRID_POINTS - 1) as f64 * GRID_SPACING;
    let n = GRID_INTERVALS as f64;
    let mut grid = Vec::with_capacity(GRID_INTERVALS * GRID_POINTS);
    if end - start >= n * span + (n - 1.0) * GRID_SPACING {
        let stride = (end - start - span) / (n - 1.0);
        for k in 0..GRID_INTERVALS {
            let s = start + k as f64 * stride;
            grid.extend((0..GRID_POINTS).map(|i| s + i as f64 * GRID_SPACING));
        }
    } else {
        let total = GRID_INTERVALS * GRID_POINTS - 1;
        grid.extend((0..=total).map(|i| start + (end - start) * i as f64 / total as f64));
    }
    Ok(grid)
}

/// Coarse T₂* from contrast at three waits.
///
/// The probe waits are `t, 3t, 9t`; `t` is rescaled until the middle point
/// retains between 20 % and 80 % contrast, then T₂ comes from a log-linear
/// fit through the three contrasts.
pub fn coarse_t2(cfg: &RamseyConfig, atom: &Atom) -> Result<f64, ProtocolError> {
    let mut t = 100e-6;
    for _ in 0..60 {
        let probe = RamseyConfig { waits: vec![t, 3.0 * t, 9.0 * t], shot_noise_seed: None, ..cfg.clone() };
        let r = simulate_ramsey(&probe, atom)?;
        let mid = r.contrast[1];
        if mid > 0.8 {
            t *= 4.0;
        } else if mid < 0.2 {
            t /= 4.0;
        } else {
            let (slope, _) = crate::analysis::log_linear(&r.waits, &r.contrast)
                .ok_or_else(|| ProtocolError::Domain("contrast vanished".into()))?;
            return Ok(-1.0 / slope);
        }
        if t > 1e6 {
            return Ok(f64::INFINITY);
        }
    }
    Err(ProtocolError::Domain("coarse T2 search did not bracket the decay".into()))
}

/// Sampled evolution of ρ and the fluorescence proxy Γ·(P population).
#[derive(Clone, Debug)]
pub struct IlluminationTrace {
    pub times: Vec<f64>,
    pub scattering_rate: Vec<f64>,
    pub states: Vec<DensityMatrix>,
}

impl IlluminationTrace {
    pub fn final_state(&self) -> &DensityMatrix {
        self.states.last().expect("trace holds the initial state")
    }
}

pub const DEFAULT_TRACE_STEPS: usize = 2000;

/// Evolves ρ₀ under `probe` with the full level structure.
pub fn illuminate(
    rho0: &DensityMatrix,
    probe: &ProbeBeam,
    duration: f64,
    steps: usize,
    cross: CrossCoupling,
    atom: &Atom,
) -> Result<IlluminationTrace, ProtocolError> {
    rho0.check()?;
    if rho0.dim() != atom.scheme.len() {
        return Err(LindbladError::Dimension { expected: atom.scheme.len(), got: rho0.dim() }.into());
    }
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(ProtocolError::Domain(format!("duration {duration} must be ≥ 0")));
    }
    let h = build_hamiltonian(&atom.scheme, &atom.params, Some(probe), None, cross)?;
    let ops = spontaneous_collapse_ops(&atom.scheme, &atom.params);
    let steps = if duration == 0.0 { 0 } else { steps.max(1) };
    let dt = if steps == 0 { 0.0 } else { duration / steps as f64 };
    let states = evolve_uniform(rho0, &h.matrix, &ops, dt, steps)?;
    let times = (0..=steps).map(|k| k as f64 * dt).collect();
    let scattering_rate = states.iter().map(|r| atom.scattering_rate(r)).collect();
    Ok(IlluminationTrace { times, scattering_rate, states })
}

/// Optical pumping into |↓⟩.
///
/// With `CrossCoupling::Off` only the near-resonant lines act, so forbidden
/// configurations stay exactly dark; the other modes add the GHz-detuned
/// hyperfine lines and their slow residual pumping.
pub fn simulate_reset(
    rho0: &DensityMatrix,
    probe: &ProbeBeam,
    duration: f64,
    cross: CrossCoupling,
    atom: &Atom,
) -> Result<IlluminationTrace, ProtocolError> {
    illuminate(rho0, probe, duration, DEFAULT_TRACE_STEPS, cross, atom)
}

/// Detection light on the asset ion; the scattering-rate trace is the
/// photon emission rate.
pub fn simulate_detection_illumination(
    rho0: &DensityMatrix,
    probe: &ProbeBeam,
    tau_d: f64,
    cross: CrossCoupling,
    atom: &Atom,
) -> Result<IlluminationTrace, ProtocolError> {
    illuminate(rho0, probe, tau_d, DEFAULT_TRACE_STEPS, cross, atom)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResetTime {
    /// Time from switching on the light until the fluorescence falls to
    /// peak/e.
    pub t1: f64,
    /// 7·T₁, the time for a 1 − e⁻⁷ reset.
    pub tau_op: f64,
}

pub const RESET_MULTIPLE: f64 = 7.0;
const MAX_RESET_WINDOW: f64 = 10e-3;

/// T₁ and τ_op = 7·T₁ from the simulated fluorescence of an ion starting in
/// |↑⟩.
///
/// The proxy rises from zero within tens of ns, far below the µs binning of
/// a fluorescence trace, so its peak plays the role of the initial value:
/// T₁ is the time from switching on the light until the fluorescence has
/// first fallen to peak/e, with linear interpolation between samples.
/// Timing from the peak instead would jump whenever the transient's global
/// maximum moves between its early ringing lobes.
/// Only near-resonant lines are kept: a drive that cannot reset resonantly
/// is reported as such rather than timed by its GHz-detuned leakage.
pub fn reset_time(probe: &ProbeBeam, atom: &Atom) -> Result<ResetTime, ProtocolError> {
    probe.validate()?;
    let rho0 = DensityMatrix::basis(atom.scheme.len(), UP);
    let mut window = 4e-6;
    loop {
        let trace = simulate_reset(&rho0, probe, window, CrossCoupling::Off, atom)?;
        let f = &trace.scattering_rate;
        let (ipk, &peak) = f.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
        if peak < 1e-12 * atom.gamma() {
            return Err(ProtocolError::NoReset("the probe does not scatter from |↑⟩".into()));
        }
        let level = peak / std::f64::consts::E;
        if let Some(k) = (ipk + 1..f.len()).find(|&k| f[k] <= level) {
            // resolve the decay with at least ~100 samples
            if k - ipk < 100 && window > 1e-9 {
                window /= 4.0;
                continue;
            }
            let (t0, t1) = (trace.times[k - 1], trace.times[k]);
            let frac = (f[k - 1] - level) / (f[k - 1] - f[k]);
            let cross = t0 + frac * (t1 - t0);
            return Ok(ResetTime { t1: cross, tau_op: RESET_MULTIPLE * cross });
        }
        window *= 4.0;
        if window > MAX_RESET_WINDOW {
            return Err(ProtocolError::NoReset(format!(
                "fluorescence stays above 1/e of its peak for {:.3e} s",
                MAX_RESET_WINDOW
            )));
        }
    }
}

/// Quasi-steady state reached from `rho0` after `settle` under `probe`.
pub fn settled_state(
    rho0: &DensityMatrix,
    probe: &ProbeBeam,
    settle: f64,
    cross: CrossCoupling,
    atom: &Atom,
) -> Result<DensityMatrix, ProtocolError> {
    let h = build_hamiltonian(&atom.scheme, &atom.params, Some(probe), None, cross)?;
    let ops = spontaneous_collapse_ops(&atom.scheme, &atom.params);
    let opts = EvolveOptions { method: Method::Exponential, ..Default::default() };
    Ok(evolve(rho0, &h.matrix, &ops, settle, &opts)?)
}

const SETTLE_TIME: f64 = 50e-6;

/// Bright-state photon scattering rate on the F=1 ↔ F′=0 cycling line, with
/// off-resonant couplings removed so the bright manifold is closed.
pub fn bright_scattering_rate(probe: &ProbeBeam, atom: &Atom) -> Result<f64, ProtocolError> {
    let rho0 = DensityMatrix::basis(atom.scheme.len(), UP);
    let rho = settled_state(&rho0, probe, SETTLE_TIME, CrossCoupling::Off, atom)?;
    Ok(atom.scattering_rate(&rho))
}

/// Polarization mix maximizing the bright scattering rate at the given
/// intensity and detuning, found by golden-section search over the π share
/// with σ± split equally.
pub fn optimal_detection_rate(intensity_sat: f64, detuning: f64, atom: &Atom) -> Result<(f64, f64), ProtocolError> {
    let rate = |pi: f64| -> Result<f64, ProtocolError> {
        let sigma = (1.0 - pi) / 2.0;
        let probe = ProbeBeam::new(intensity_sat, pi, sigma, sigma, 0.0, detuning)?;
        bright_scattering_rate(&probe, atom)
    };
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = rate(x1)?;
    let mut f2 = rate(x2)?;
    while b - a > 1e-4 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = rate(x2)?;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = rate(x1)?;
        }
    }
    let pi = (a + b) / 2.0;
    Ok((rate(pi)?, pi))
}

/// Population moved between |↓⟩ and the F=1 manifold by detection light,
/// expressed as the two leakage rates (bright→dark, dark→bright) over
/// `window`, with all off-resonant couplings on.
pub fn leakage_rates(probe: &ProbeBeam, window: f64, atom: &Atom) -> Result<(f64, f64), ProtocolError> {
    let n = atom.scheme.len();
    let bright = settled_state(&DensityMatrix::basis(n, UP), probe, window, CrossCoupling::Compatible, atom)?;
    let dark = settled_state(&DensityMatrix::basis(n, DOWN), probe, window, CrossCoupling::Compatible, atom)?;
    let to_dark = -(1.0 - bright.population(DOWN)).max(f64::MIN_POSITIVE).ln() / window;
    let to_bright = -(dark.population(DOWN)).max(f64::MIN_POSITIVE).ln() / window;
    Ok((to_dark, to_bright))
}

/// Binomial shot noise on a probability with `n` trials.
pub fn sample_binomial(p: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<f64, ProtocolError> {
    let d = Binomial::new(n as u64, p.clamp(0.0, 1.0)).map_err(|e| ProtocolError::Domain(e.to_string()))?;
    Ok(d.sample(rng) as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::analytic_ramsey_rho22;
    use approx::assert_relative_eq;

    fn weak_pi(i: f64) -> ProbeBeam {
        ProbeBeam::new(i, 1.0, 0.0, 0.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn probe_off_keeps_full_contrast() {
        let cfg = RamseyConfig { waits: vec![10e-6, 50e-6, 300e-6], ..Default::default() };
        let r = simulate_ramsey(&cfg, &Atom::default()).unwrap();
        for c in &r.contrast {
            assert_relative_eq!(*c, 1.0, epsilon = 1e-9);
        }
        assert!(r.t2.is_infinite());
    }

    #[test]
    fn reduced_ramsey_matches_closed_form() {
        let atom = Atom::default();
        let probe = weak_pi(3e-5);
        let gamma = atom.gamma() / 6.0 * 3e-5;
        let waits: Vec<f64> = (1..40).map(|k| k as f64 * 13e-6).collect();
        let cfg = RamseyConfig { waits: waits.clone(), probe: Some(probe), ..Default::default() };
        let r = simulate_ramsey(&cfg, &atom).unwrap();
        for (k, &t) in waits.iter().enumerate() {
            assert!((r.p_up[k] - analytic_ramsey_rho22(gamma, cfg.detuning, t)).abs() < 1e-8);
            assert!((r.contrast[k] - (-gamma * t / 2.0).exp()).abs() < 1e-8);
        }
        assert_relative_eq!(r.t2, 2.0 / gamma, max_relative = 1e-6);
    }

    #[test]
    fn fringes_oscillate_at_the_microwave_detuning() {
        let waits: Vec<f64> = (0..200).map(|k| k as f64 * 2e-6).collect();
        let cfg = RamseyConfig { waits: waits.clone(), ..Default::default() };
        let r = simulate_ramsey(&cfg, &Atom::default()).unwrap();
        // full period 100 µs: maxima at 0 and 100 µs, minimum at 50 µs
        assert!(r.p_up[0] > 0.999 && r.p_up[50] > 0.999 && r.p_up[25] < 1e-3);
    }

    #[test]
    fn finite_pulses_approach_ideal_ones() {
        let atom = Atom::default();
        let waits = vec![20e-6, 40e-6];
        let ideal = simulate_ramsey(&RamseyConfig { waits: waits.clone(), ..Default::default() }, &atom).unwrap();
        let cfg = RamseyConfig { waits, pulse: PulseModel::Finite { duration: 50e-9 }, ..Default::default() };
        let finite = simulate_ramsey(&cfg, &atom).unwrap();
        for k in 0..2 {
            assert!((ideal.p_up[k] - finite.p_up[k]).abs() < 1e-2);
        }
    }

    #[test]
    fn wait_grid_layout() {
        let g = sample_wait_grid(1e-3).unwrap();
        assert_eq!(g.len(), 105);
        assert_eq!(g[0], 10e-6);
        assert!(*g.last().unwrap() <= 2e-3 + 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!((g[20] - g[0] - 200e-6).abs() < 1e-12);
        let short = sample_wait_grid(100e-6).unwrap();
        assert_eq!(short.len(), 105);
        assert!(short.windows(2).all(|w| w[1] > w[0]));
        assert!(sample_wait_grid(0.0).is_err());
    }

    #[test]
    fn coarse_t2_close_to_truth() {
        let atom = Atom::default();
        let probe = weak_pi(3e-5);
        let gamma = atom.gamma() / 6.0 * 3e-5;
        let cfg = RamseyConfig { probe: Some(probe), ..Default::default() };
        let t2 = coarse_t2(&cfg, &atom).unwrap();
        assert_relative_eq!(t2, 2.0 / gamma, max_relative = 1e-6);
    }

    #[test]
    fn reset_from_up_reaches_down() {
        let atom = Atom::default();
        let probe = ProbeBeam::with_pi_fraction(1.25, 0.5, 1.0).unwrap();
        let rho0 = DensityMatrix::basis(8, UP);
        let trace = simulate_reset(&rho0, &probe, 30e-6, CrossCoupling::Compatible, &atom).unwrap();
        assert!(trace.final_state().population(DOWN) > 0.999);
        let zero = simulate_reset(&rho0, &probe, 0.0, CrossCoupling::Compatible, &atom).unwrap();
        assert_eq!(zero.final_state(), &rho0);
    }

    #[test]
    fn pure_pi_on_f1_to_f1_does_not_pump_up() {
        let atom = Atom::default();
        let probe = ProbeBeam::new(1.0, 1.0, 0.0, 0.0, 1.0, 0.0).unwrap();
        let rho0 = DensityMatrix::basis(8, UP);
        let trace = simulate_reset(&rho0, &probe, 5e-6, CrossCoupling::Off, &atom).unwrap();
        assert!((trace.final_state().population(UP) - 1.0).abs() < 1e-9);
        // the 2.1 GHz-detuned F′=0 line still pumps, slowly
        let leak = simulate_reset(&rho0, &probe, 5e-6, CrossCoupling::Compatible, &atom).unwrap();
        let lost = 1.0 - leak.final_state().population(UP);
        assert!(lost > 1e-4 && lost < 1e-2, "{lost}");
        assert!(matches!(reset_time(&probe, &atom), Err(ProtocolError::NoReset(_))));
    }

    #[test]
    fn dark_state_does_not_scatter_without_cross_coupling() {
        let atom = Atom::default();
        let rho0 = DensityMatrix::basis(8, DOWN);
        let t = simulate_detection_illumination(&rho0, &ProbeBeam::detection(1.0), 5e-6, CrossCoupling::Off, &atom)
            .unwrap();
        assert!(t.scattering_rate.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn bright_rate_below_two_level_bound() {
        let atom = Atom::default();
        let r = bright_scattering_rate(&ProbeBeam::detection(1.0), &atom).unwrap();
        assert!(r > 0.0 && r < atom.gamma() / 2.0);
    }
}

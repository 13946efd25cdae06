//! Photon-counting state detection of the process ion and the trade-off
//! between detection time and preservation of the asset ion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crosstalk::{fidelity_from_t2, gamma_from_intensity, CrosstalkError};
use crate::lindblad::ProbeBeam;
use crate::protocols::{leakage_rates, optimal_detection_rate, Atom, ProtocolError};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Crosstalk(#[from] CrosstalkError),
}

/// Rates in 1/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionModel {
    /// Bright-state scattering rate R_o.
    pub r_o: f64,
    /// Dark → bright pumping rate R_b.
    pub r_b: f64,
    /// Bright → dark pumping rate R_d.
    pub r_d: f64,
    /// Background count rate R_bg.
    pub r_bg: f64,
    /// Net detection efficiency ε_sys.
    pub efficiency: f64,
}

impl DetectionModel {
    pub fn new(r_o: f64, r_b: f64, r_d: f64, r_bg: f64, efficiency: f64) -> Result<Self, DetectionError> {
        let m = Self { r_o, r_b, r_d, r_bg, efficiency };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        if [self.r_o, self.r_b, self.r_d, self.r_bg].iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(DetectionError::Domain("rates must be finite and ≥ 0".into()));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(DetectionError::Domain(format!("efficiency {} outside (0, 1]", self.efficiency)));
        }
        Ok(())
    }

    /// Rates simulated for detection light at `intensity_sat` with the
    /// polarization that maximizes scattering: R_o from the closed bright
    /// cycle, R_d and R_b from off-resonant leakage over `leak_window`.
    pub fn from_simulation(intensity_sat: f64, efficiency: f64, atom: &Atom) -> Result<(Self, ProbeBeam), DetectionError> {
        let (r_o, pi) = optimal_detection_rate(intensity_sat, 0.0, atom)?;
        let sigma = (1.0 - pi) / 2.0;
        let beam = ProbeBeam::new(intensity_sat, pi, sigma, sigma, 0.0, 0.0).map_err(ProtocolError::from)?;
        let (r_d, r_b) = leakage_rates(&beam, LEAK_WINDOW, atom)?;
        Ok((Self::new(r_o, r_b, r_d, 0.0, efficiency)?, beam))
    }

    fn bright_rate(&self) -> f64 {
        self.efficiency * self.r_o
    }
}

const LEAK_WINDOW: f64 = 20e-6;

/// Which printing of the bright-state formula to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrightFormula {
    /// ε_sys multiplies R_o in both exponents.
    #[default]
    Corrected,
    /// The original source's second exponent, `e^{−(R_o + R_bg)t}`.
    AsPrinted,
}

/// P(n=0) for an ion prepared bright that may pump dark at R_d.
pub fn p_no_photon_bright(m: &DetectionModel, t: f64) -> f64 {
    p_no_photon_bright_with(m, t, BrightFormula::Corrected)
}

pub fn p_no_photon_bright_with(m: &DetectionModel, t: f64, formula: BrightFormula) -> f64 {
    let a = m.bright_rate() + m.r_d;
    let bg = (-m.r_bg * t).exp();
    let leak = if a > 0.0 { m.r_d / a * bg * -(-a * t).exp_m1() } else { 0.0 };
    let stay_rate = match formula {
        BrightFormula::Corrected => m.bright_rate(),
        BrightFormula::AsPrinted => m.r_o,
    };
    (leak + (-m.r_d * t).exp() * (-(stay_rate + m.r_bg) * t).exp()).clamp(0.0, 1.0)
}

/// P(n=0) for an ion prepared dark that may pump bright at R_b.
pub fn p_no_photon_dark(m: &DetectionModel, t: f64) -> f64 {
    let e = m.bright_rate();
    let b = m.r_b;
    let bg = (-m.r_bg * t).exp();
    // R_b/(εR_o − R_b)·(e^{−R_b t} − e^{−εR_o t}) = R_b·t·e^{−R_b t}·φ((R_b − εR_o)t)
    // with φ(x) = (e^x − 1)/x, which stays finite through εR_o = R_b.
    let x = (b - e) * t;
    let phi = if x.abs() < 1e-8 { 1.0 + x / 2.0 } else { x.exp_m1() / x };
    let pumped = b * t * (-b * t).exp() * phi;
    ((pumped + (-b * t).exp()) * bg).clamp(0.0, 1.0)
}

/// `[(1 − P_↑(0)) + P_↓(0)] / 2`.
pub fn avg_detection_fidelity(m: &DetectionModel, t: f64) -> f64 {
    ((1.0 - p_no_photon_bright(m, t)) + p_no_photon_dark(m, t)) / 2.0
}

/// Ending detection at the first photon halves the average exposure of the
/// neighbour.
pub fn first_photon_halving(tau_raw: f64) -> f64 {
    tau_raw / 2.0
}

/// Exposure of the asset ion while its neighbour is detected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetExposure {
    /// AQM rate γ of the leaked detection light.
    pub gamma: f64,
    pub first_photon: bool,
}

impl AssetExposure {
    /// Leak `i_x` of `beam` onto the asset.
    pub fn from_crosstalk(beam: &ProbeBeam, i_x: f64, first_photon: bool, atom: &Atom) -> Result<Self, DetectionError> {
        let gamma = gamma_from_intensity(&beam.scaled(beam.intensity_sat * i_x), &atom.params)?.gamma;
        Ok(Self { gamma, first_photon })
    }

    /// F_{1|2} after a detection of length `tau`.
    pub fn fidelity(&self, tau: f64) -> f64 {
        let exposure = if self.first_photon { first_photon_halving(tau) } else { tau };
        if self.gamma == 0.0 {
            return 1.0;
        }
        fidelity_from_t2(exposure, 2.0 / self.gamma).expect("γ > 0 and τ ≥ 0")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalTime {
    pub tau: f64,
    pub product: f64,
    pub detection_fidelity: f64,
    pub asset_fidelity: f64,
    /// False when the sampled product had several local maxima, in which
    /// case `tau` is the best grid point.
    pub unimodal: bool,
}

const SEARCH_POINTS: usize = 2001;

/// Maximizes `avg_detection_fidelity(τ)·F_{1|2}(τ)` on `[0, t_max]`:
/// a grid scan checks unimodality and brackets the peak, golden-section
/// refines it.
pub fn optimal_detection_time(m: &DetectionModel, asset: &AssetExposure, t_max: f64) -> Result<OptimalTime, DetectionError> {
    m.validate()?;
    if !(t_max > 0.0) {
        return Err(DetectionError::Domain("search window must be positive".into()));
    }
    let f = |t: f64| avg_detection_fidelity(m, t) * asset.fidelity(t);
    let grid: Vec<f64> = (0..SEARCH_POINTS).map(|k| t_max * k as f64 / (SEARCH_POINTS - 1) as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
    let imax = vals.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).expect("non-empty");
    let rises = vals.windows(2).map(|w| w[1] > w[0]).collect::<Vec<_>>();
    let turns = rises.windows(2).filter(|w| w[0] && !w[1]).count();
    let unimodal = turns <= 1;
    let tau = if unimodal && imax > 0 && imax + 1 < grid.len() {
        golden_max(&f, grid[imax - 1], grid[imax + 1])
    } else {
        grid[imax]
    };
    Ok(OptimalTime {
        tau,
        product: f(tau),
        detection_fidelity: avg_detection_fidelity(m, tau),
        asset_fidelity: asset.fidelity(tau),
        unimodal,
    })
}

fn golden_max(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while (b - a) > 1e-12 * b.abs().max(1e-12) {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        }
    }
    (a + b) / 2.0
}

/// Monte Carlo estimate of P(n=0) with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarloEstimate {
    pub p: f64,
    pub std_error: f64,
}

/// Telegraph-process photon simulation: the ion jumps bright↔dark at R_d
/// and R_b, emits detected photons at ε·R_o while bright and background
/// counts arrive at R_bg. With `one_way` the ion can leave its initial
/// state but never return, which is the process the closed forms describe.
pub fn monte_carlo_no_photon(
    m: &DetectionModel,
    t: f64,
    start_bright: bool,
    one_way: bool,
    trials: usize,
    seed: u64,
) -> MonteCarloEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dark_runs = 0usize;
    for _ in 0..trials {
        let mut bright = start_bright;
        let mut now = 0.0;
        let mut switched = false;
        let silent = loop {
            let emit = if bright { m.bright_rate() } else { 0.0 } + m.r_bg;
            let jump = match (bright, one_way && switched) {
                (_, true) => 0.0,
                (true, false) => m.r_d,
                (false, false) => m.r_b,
            };
            let total = emit + jump;
            if total == 0.0 {
                break true;
            }
            let u: f64 = rng.random();
            now += -(1.0 - u).ln() / total;
            if now > t {
                break true;
            }
            if rng.random::<f64>() * total < emit {
                break false;
            }
            bright = !bright;
            switched = true;
        };
        if silent {
            dark_runs += 1;
        }
    }
    let p = dark_runs as f64 / trials as f64;
    MonteCarloEstimate { p, std_error: (p * (1.0 - p) / trials as f64).sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model() -> DetectionModel {
        DetectionModel::new(5e6, 20.0, 100.0, 50.0, 0.04).unwrap()
    }

    #[test]
    fn limits() {
        let m = model();
        assert_eq!(p_no_photon_bright(&m, 0.0), 1.0);
        assert_eq!(p_no_photon_dark(&m, 0.0), 1.0);
        assert_eq!(avg_detection_fidelity(&m, 0.0), 0.5);
        let pure = DetectionModel::new(5e6, 0.0, 0.0, 0.0, 0.04).unwrap();
        let t = 7e-6;
        assert_relative_eq!(p_no_photon_bright(&pure, t), (-0.04 * 5e6 * t).exp(), max_relative = 1e-14);
        assert_eq!(p_no_photon_dark(&pure, t), 1.0);
        assert!(avg_detection_fidelity(&pure, 1e-3) > 1.0 - 1e-12);
    }

    #[test]
    fn dark_formula_through_the_singularity() {
        let m = DetectionModel::new(1000.0, 40.0, 0.0, 0.0, 0.04).unwrap();
        let t: f64 = 1e-2;
        // εR_o = R_b: P = e^{−bt}(1 + bt)
        let expect = (-40.0 * t).exp() * (1.0 + 40.0 * t);
        assert_relative_eq!(p_no_photon_dark(&m, t), expect, max_relative = 1e-7);
        let near = DetectionModel { r_b: 40.0 * (1.0 + 1e-9), ..m };
        assert_relative_eq!(p_no_photon_dark(&near, t), expect, max_relative = 1e-7);
    }

    #[test]
    fn printed_variant_differs_only_through_efficiency() {
        let m = model();
        let t = 10e-6;
        let full = DetectionModel { efficiency: 1.0, ..m };
        assert_relative_eq!(
            p_no_photon_bright_with(&full, t, BrightFormula::AsPrinted),
            p_no_photon_bright(&full, t),
            max_relative = 1e-14
        );
        assert!(p_no_photon_bright_with(&m, t, BrightFormula::AsPrinted) < p_no_photon_bright(&m, t));
    }

    #[test]
    fn halving() {
        assert_eq!(first_photon_halving(11e-6), 5.5e-6);
        assert_eq!(first_photon_halving(0.0), 0.0);
        let a = AssetExposure { gamma: 300.0, first_photon: true };
        let b = AssetExposure { gamma: 300.0, first_photon: false };
        assert_relative_eq!(a.fidelity(10e-6), b.fidelity(5e-6), max_relative = 1e-15);
    }

    #[test]
    fn monte_carlo_matches_closed_forms() {
        let m = DetectionModel::new(5e6, 2e4, 5e4, 1e4, 0.04).unwrap();
        let t = 20e-6;
        let mc = monte_carlo_no_photon(&m, t, true, true, 200_000, 3);
        assert!((mc.p - p_no_photon_bright(&m, t)).abs() < 4.0 * mc.std_error);
        let mc = monte_carlo_no_photon(&m, t, false, true, 200_000, 4);
        assert!((mc.p - p_no_photon_dark(&m, t)).abs() < 4.0 * mc.std_error);
    }

    #[test]
    fn optimum_without_crosstalk_is_finite() {
        let m = model();
        let asset = AssetExposure { gamma: 0.0, first_photon: true };
        let opt = optimal_detection_time(&m, &asset, 2e-3).unwrap();
        assert!(opt.tau > 0.0 && opt.tau < 2e-3, "{opt:?}");
        assert!(opt.unimodal);
    }

    #[test]
    fn optimum_shrinks_with_efficiency() {
        let asset = AssetExposure { gamma: 342.0, first_photon: true };
        let mut last = f64::INFINITY;
        for eff in [0.01, 0.02, 0.05, 0.1] {
            let m = DetectionModel { efficiency: eff, ..model() };
            let t = optimal_detection_time(&m, &asset, 500e-6).unwrap().tau;
            assert!(t < last);
            last = t;
        }
    }

    #[test]
    fn rejects_bad_models() {
        assert!(DetectionModel::new(-1.0, 0.0, 0.0, 0.0, 0.5).is_err());
        assert!(DetectionModel::new(1.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(DetectionModel::new(1.0, 0.0, 0.0, 0.0, 1.5).is_err());
    }
}

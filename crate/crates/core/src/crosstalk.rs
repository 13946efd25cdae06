//! Crosstalk bookkeeping: beam leakage onto the asset ion, photons scattered
//! by the process ion, and the fidelity chain that turns either into P_AQM.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::{LinewidthParams, UP};
use crate::lindblad::{
    build_hamiltonian, evolve, spontaneous_collapse_ops, weak_probe_ops, weak_probe_rates, CMatrix, CrossCoupling,
    DensityMatrix, EvolveOptions, LindbladError, ProbeBeam, POSITIVITY_TOL,
};
use crate::protocols::{
    coarse_t2, reset_time, sample_wait_grid, simulate_ramsey, Atom, ProtocolError, RamseyConfig, RamseyModel,
};

#[derive(Debug, Error)]
pub enum CrosstalkError {
    #[error(transparent)]
    Lindblad(#[from] LindbladError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("{0}")]
    Domain(String),
    #[error("PSF did not converge: {value:e} vs {refined:e} after grid refinement")]
    Convergence { value: f64, refined: f64 },
    #[error("T2 = {t2:e} s lies outside the simulated range [{lo:e}, {hi:e}]")]
    Extrapolation { t2: f64, lo: f64, hi: f64 },
}

/// Two-ion chain: spacing and the angle between B and the chain axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainGeometry {
    pub spacing: f64,
    /// θ_B; the quantization axis is along B, so π light is emitted with a
    /// sin²θ pattern about it.
    pub b_field_angle: f64,
}

impl Default for ChainGeometry {
    fn default() -> Self {
        Self { spacing: 6e-6, b_field_angle: PI / 2.0 }
    }
}

impl ChainGeometry {
    pub fn validate(&self) -> Result<(), CrosstalkError> {
        if !(self.spacing > 0.0) {
            return Err(CrosstalkError::Domain(format!("ion spacing {} must be positive", self.spacing)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    pub waist: f64,
    /// Offset of the asset ion from the beam centre.
    pub offset: f64,
    pub na: f64,
    /// Displacement of the beam from the centre of the field of view. The
    /// imaging model is isoplanatic, so this only matters through a
    /// field-dependent aberration supplied by the caller.
    pub fov_offset: f64,
}

impl Default for BeamGeometry {
    fn default() -> Self {
        Self { waist: 1.5e-6, offset: 0.0, na: 0.16, fov_offset: 0.0 }
    }
}

impl BeamGeometry {
    pub fn validate(&self) -> Result<(), CrosstalkError> {
        if !(self.waist > 0.0) {
            return Err(CrosstalkError::Domain("waist must be positive".into()));
        }
        if !(self.na > 0.0 && self.na < 1.0) {
            return Err(CrosstalkError::Domain(format!("NA {} must lie in (0, 1)", self.na)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    Detection,
    Reset,
}

/// Breakdown of the AQM probability of an asset ion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AqmEstimate {
    pub p_aqm: f64,
    /// F_{1|2} = (2/3)e^{−τ/T₂} + 1/3.
    pub fidelity: f64,
    pub optical: f64,
    pub interion: f64,
}

/// `e^{−2d²/w²}`.
pub fn gaussian_crosstalk(d: f64, w: f64) -> f64 {
    (-2.0 * d * d / (w * w)).exp()
}

/// Pupil-plane phase in units of radians, as a function of the normalized
/// pupil coordinates `(u, v)` inside the unit disc.
pub type Aberration<'a> = &'a dyn Fn(f64, f64) -> f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfOptions {
    /// Hard cutoff at the numerical aperture.
    pub truncate: bool,
    /// Relative agreement required between a quadrature and its refinement.
    pub tolerance: f64,
    pub wavelength: f64,
}

impl Default for PsfOptions {
    fn default() -> Self {
        Self { truncate: true, tolerance: 1e-6, wavelength: LinewidthParams::yb171().wavelength }
    }
}

/// Gauss–Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = x;
                p0 = 1.0;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Image-plane field of a focused Gaussian beam at `(x, y)` by direct
/// summation over the pupil in polar coordinates.
///
/// The pupil amplitude `exp(−k²w²/4)` is the Fourier partner of a waist-`w`
/// focus; the radial integral uses Gauss–Legendre nodes up to the NA
/// cutoff (or to where the Gaussian is negligible), the angular one the
/// trapezoid rule.
fn psf_field(geom: &BeamGeometry, opts: &PsfOptions, ab: Option<Aberration>, x: f64, y: f64, nk: usize, nphi: usize) -> Complex64 {
    let k_na = 2.0 * PI * geom.na / opts.wavelength;
    let k_gauss = 14.0 / geom.waist;
    let k_max = if opts.truncate { k_na } else { k_gauss.max(k_na) };
    let nodes = gauss_legendre(nk);
    let mut sum = Complex64::new(0.0, 0.0);
    for &(t, wt) in &nodes {
        let k = k_max * (t + 1.0) / 2.0;
        let amp = (-k * k * geom.waist * geom.waist / 4.0).exp() * k;
        let mut ring = Complex64::new(0.0, 0.0);
        for j in 0..nphi {
            let phi = 2.0 * PI * j as f64 / nphi as f64;
            let (s, c) = phi.sin_cos();
            let mut phase = k * (c * x + s * y);
            if let Some(f) = ab {
                phase += f(k / k_na * c, k / k_na * s);
            }
            ring += Complex64::from_polar(1.0, phase);
        }
        sum += ring * (amp * wt);
    }
    sum * (k_max / 2.0 * 2.0 * PI / nphi as f64)
}

fn quadrature_size(geom: &BeamGeometry, opts: &PsfOptions, r: f64) -> (usize, usize) {
    let k_na = 2.0 * PI * geom.na / opts.wavelength;
    let k_max = if opts.truncate { k_na } else { (14.0 / geom.waist).max(k_na) };
    let osc = (k_max * r).ceil() as usize;
    (osc + 48, 2 * osc + 64)
}

fn psf_intensity(geom: &BeamGeometry, opts: &PsfOptions, ab: Option<Aberration>, x: f64, y: f64, scale: usize) -> f64 {
    let (nk, nphi) = quadrature_size(geom, opts, x.hypot(y) + geom.waist);
    psf_field(geom, opts, ab, x, y, nk * scale, nphi * scale).norm_sqr()
}

/// Relative intensity at the asset offset `geom.offset`, normalized to the
/// beam's peak. The peak is on axis without aberrations and is searched
/// over ±w otherwise.
pub fn psf_crosstalk(geom: &BeamGeometry, ab: Option<Aberration>, opts: &PsfOptions) -> Result<f64, CrosstalkError> {
    geom.validate()?;
    let eval = |scale: usize| -> f64 {
        let at = psf_intensity(geom, opts, ab, geom.offset, 0.0, scale);
        let peak = match ab {
            None => psf_intensity(geom, opts, None, 0.0, 0.0, scale),
            Some(_) => {
                let mut best = 0.0f64;
                for i in -10..=10 {
                    for j in -10..=10 {
                        let (px, py) = (i as f64 * geom.waist / 10.0, j as f64 * geom.waist / 10.0);
                        best = best.max(psf_intensity(geom, opts, ab, px, py, scale));
                    }
                }
                best
            }
        };
        at / peak
    };
    let value = eval(1);
    let refined = eval(2);
    if (value - refined).abs() > opts.tolerance * refined.abs().max(1e-300) + 1e-300 {
        return Err(CrosstalkError::Convergence { value, refined });
    }
    Ok(refined)
}

/// π emission (detection) has a sin²θ_B pattern toward the neighbour;
/// σ emission (reset) has (1 + cos²θ_B)/2.
pub fn f_angle(process: Process, b_field_angle: f64) -> f64 {
    let (s, c) = b_field_angle.sin_cos();
    match process {
        Process::Detection => s * s,
        Process::Reset => (1.0 + c * c) / 2.0,
    }
}

/// Share of the scattered light whose polarization can disturb the asset.
pub fn f_pol(process: Process) -> f64 {
    match process {
        Process::Detection => 1.0 / 3.0,
        Process::Reset => 2.0 / 3.0,
    }
}

pub const DETECTION_I_AB: f64 = 9.5e-6;
pub const RESET_I_AB: f64 = 1.3e-6;

/// Γ_sc of the process ion giving `DETECTION_I_AB` or `RESET_I_AB` at 6 µm with
/// B ⊥ chain.
pub fn default_scattering_rate(process: Process, params: &LinewidthParams) -> f64 {
    let target = match process {
        Process::Detection => DETECTION_I_AB,
        Process::Reset => RESET_I_AB,
    };
    let a: f64 = 6e-6;
    target * params.i_sat * 4.0 * PI * a * a / (f_pol(process) * f_angle(process, PI / 2.0) * params.photon_energy())
}

/// `I_ab = f_pol·f_angle·hν·Γ_sc/(4πa²)` in units of I_sat.
pub fn interion_intensity(
    chain: &ChainGeometry,
    process: Process,
    gamma_sc: f64,
    params: &LinewidthParams,
) -> Result<f64, CrosstalkError> {
    chain.validate()?;
    let flux = params.photon_energy() * gamma_sc / (4.0 * PI * chain.spacing * chain.spacing);
    Ok(f_pol(process) * f_angle(process, chain.b_field_angle) * flux / params.i_sat)
}

/// How the scattered light's polarization enters the AQM rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterPolarization {
    /// I_ab acts with the polarization mix of the process beam, so only its
    /// AQM-active share (π for detection, σ± for reset) counts.
    #[default]
    ProcessMix,
    /// All of I_ab is taken as AQM-active, having already been filtered by
    /// f_pol.
    Selected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterModel {
    pub gamma_sc: f64,
    pub polarization: ScatterPolarization,
    /// AQM-active share of the process beam used by `ProcessMix`.
    pub active_share: f64,
}

pub const DETECTION_PI_FRACTION: f64 = 1.0 / 3.0;
pub const RESET_PI_FRACTION: f64 = 0.86;

impl ScatterModel {
    pub fn for_process(process: Process, params: &LinewidthParams) -> Self {
        let active_share = match process {
            Process::Detection => DETECTION_PI_FRACTION,
            Process::Reset => 1.0 - RESET_PI_FRACTION,
        };
        Self {
            gamma_sc: default_scattering_rate(process, params),
            polarization: ScatterPolarization::ProcessMix,
            active_share,
        }
    }

    fn share(&self) -> f64 {
        match self.polarization {
            ScatterPolarization::ProcessMix => self.active_share,
            ScatterPolarization::Selected => 1.0,
        }
    }
}

/// AQM rate γ of the asset under scattered light from the process ion.
pub fn interion_gamma(
    chain: &ChainGeometry,
    process: Process,
    model: &ScatterModel,
    params: &LinewidthParams,
) -> Result<f64, CrosstalkError> {
    let i_ab = interion_intensity(chain, process, model.gamma_sc, params)?;
    Ok(params.gamma / 6.0 * i_ab * model.share())
}

/// P*_AQM = 1 − e^{−γτ/3} for scattered light over τ.
pub fn p_aqm_star(
    chain: &ChainGeometry,
    process: Process,
    tau: f64,
    model: &ScatterModel,
    params: &LinewidthParams,
) -> Result<f64, CrosstalkError> {
    if !(tau >= 0.0) {
        return Err(CrosstalkError::Domain(format!("duration {tau} must be ≥ 0")));
    }
    let gamma = interion_gamma(chain, process, model, params)?;
    Ok(p_aqm_from_gamma(gamma, tau))
}

/// Worst-case (|↑⟩) AQM probability `1 − e^{−γτ/3}`.
pub fn p_aqm_from_gamma(gamma: f64, tau: f64) -> f64 {
    -(-gamma * tau / 3.0).exp_m1()
}

/// Asset fidelity after dephasing for τ: `(2/3)e^{−τ/T₂} + 1/3`.
pub fn fidelity_from_t2(tau: f64, t2: f64) -> Result<f64, CrosstalkError> {
    if !(t2 > 0.0) || !(tau >= 0.0) {
        return Err(CrosstalkError::Domain(format!("need T2 > 0 and τ ≥ 0 (got {t2}, {tau})")));
    }
    Ok(2.0 / 3.0 * (-tau / t2).exp() + 1.0 / 3.0)
}

pub fn fidelity_from_contrast(contrast: f64) -> Result<f64, CrosstalkError> {
    if !(0.0..=1.0).contains(&contrast) {
        return Err(CrosstalkError::Domain(format!("contrast {contrast} outside [0, 1]")));
    }
    Ok(2.0 / 3.0 * contrast + 1.0 / 3.0)
}

/// Hermitian square root of a PSD matrix; negative eigenvalues beyond the
/// positivity tolerance are an error, smaller ones are treated as zero.
fn psd_sqrt(m: &CMatrix) -> Result<CMatrix, CrosstalkError> {
    let herm = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = herm.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -POSITIVITY_TOL) {
        return Err(CrosstalkError::Domain("matrix is not positive semidefinite".into()));
    }
    let d = CMatrix::from_diagonal(&eig.eigenvalues.map(|l| Complex64::new(l.max(0.0).sqrt(), 0.0)));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.adjoint())
}

/// `tr√(√ρ₀ ρ_t √ρ₀)`.
pub fn uhlmann_fidelity(before: &DensityMatrix, after: &DensityMatrix) -> Result<f64, CrosstalkError> {
    if before.dim() != after.dim() {
        return Err(LindbladError::Dimension { expected: before.dim(), got: after.dim() }.into());
    }
    for rho in [before, after] {
        if rho.min_eigenvalue() < -POSITIVITY_TOL {
            return Err(CrosstalkError::Domain("density matrix is not positive semidefinite".into()));
        }
    }
    let s = psd_sqrt(before.matrix())?;
    let m = &s * after.matrix() * &s;
    let herm = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let f: f64 = herm.symmetric_eigenvalues().iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok(f.min(1.0))
}

/// γ from the AQM-active components of the light at the asset ion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// Set when I > 0.1 I_sat, where the linear weak-probe map is unreliable.
    pub outside_weak_regime: bool,
}

pub const WEAK_REGIME_LIMIT: f64 = 0.1;

pub fn gamma_from_intensity(probe: &ProbeBeam, params: &LinewidthParams) -> Result<GammaEstimate, CrosstalkError> {
    probe.validate()?;
    let gamma = weak_probe_rates(probe, params).iter().map(|(_, g)| g).sum();
    Ok(GammaEstimate { gamma, outside_weak_regime: probe.intensity_sat > WEAK_REGIME_LIMIT })
}

/// |ψ(θ)⟩ = cos(θ/2)|↑⟩ + sin(θ/2)|↓⟩ on `dim` levels.
pub fn bloch_state(theta: f64, dim: usize) -> DensityMatrix {
    let mut psi = vec![Complex64::new(0.0, 0.0); dim];
    psi[UP] = Complex64::new((theta / 2.0).cos(), 0.0);
    psi[crate::atomic::DOWN] = Complex64::new((theta / 2.0).sin(), 0.0);
    DensityMatrix::pure(&psi).expect("normalized")
}

/// Fidelity of the asset state after `tau` of light, for each Bloch angle.
///
/// Free precession in the chosen frame is removed before comparing, so the
/// result measures only the disturbance caused by the light.
pub fn bloch_angle_scan(
    thetas: &[f64],
    probe: &ProbeBeam,
    tau: f64,
    model: RamseyModel,
    atom: &Atom,
) -> Result<Vec<f64>, CrosstalkError> {
    probe.validate()?;
    let (dim, h, ops) = match model {
        RamseyModel::Reduced => (4, CMatrix::zeros(4, 4), weak_probe_ops(probe, &atom.params)?),
        RamseyModel::Full => {
            let h = build_hamiltonian(&atom.scheme, &atom.params, Some(probe), None, CrossCoupling::default())?;
            (atom.scheme.len(), h.matrix, spontaneous_collapse_ops(&atom.scheme, &atom.params))
        }
    };
    let undo = CMatrix::from_diagonal(&h.diagonal().map(|e| Complex64::from_polar(1.0, e.re * tau)));
    let opts = EvolveOptions::default();
    thetas
        .iter()
        .map(|&theta| {
            let rho0 = bloch_state(theta, dim);
            let rho = evolve(&rho0, &h, &ops, tau, &opts)?.transform(&undo);
            uhlmann_fidelity(&rho0, &rho)
        })
        .collect()
}

/// Simulated T₂* of an asset ion seeing `template` at relative intensity
/// `i_x` of a process beam at `i2` (I_sat units).
pub fn simulated_t2(i_x: f64, i2: f64, template: &ProbeBeam, atom: &Atom) -> Result<f64, CrosstalkError> {
    let probe = template.scaled(i_x * i2);
    let base = RamseyConfig { probe: Some(probe), model: RamseyModel::Reduced, ..Default::default() };
    let coarse = coarse_t2(&base, atom)?;
    if !coarse.is_finite() {
        return Ok(f64::INFINITY);
    }
    let cfg = RamseyConfig { waits: sample_wait_grid(coarse)?, ..base };
    Ok(simulate_ramsey(&cfg, atom)?.t2)
}

/// I_X bracket for the inversion; the upper end stays in the weak regime.
pub const IX_SEARCH_RANGE: (f64, f64) = (1e-8, 1e-2);

/// Inverts the simulated T₂*(I_X) map by bisection in log I_X.
pub fn estimate_ix_from_t2(t2: f64, i2: f64, template: &ProbeBeam, atom: &Atom) -> Result<f64, CrosstalkError> {
    if !(t2 > 0.0) {
        return Err(CrosstalkError::Domain(format!("T2 {t2} must be positive")));
    }
    if t2.is_infinite() {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (IX_SEARCH_RANGE.0, IX_SEARCH_RANGE.1);
    let t_lo = simulated_t2(lo, i2, template, atom)?;
    let t_hi = simulated_t2(hi, i2, template, atom)?;
    if !(t2 <= t_lo && t2 >= t_hi) {
        return Err(CrosstalkError::Extrapolation { t2, lo: t_hi, hi: t_lo });
    }
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if simulated_t2(mid, i2, template, atom)? > t2 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-6 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

/// Detection beam: resonant F=1 → F′=0 light with equal polarization thirds.
pub fn detection_beam(intensity_sat: f64) -> ProbeBeam {
    ProbeBeam::detection(intensity_sat)
}

/// Reset beam of the two-ion measurements: all light on F=1 → F′=1 with
/// 86 % π.
pub fn reset_beam(intensity_sat: f64) -> ProbeBeam {
    ProbeBeam::with_pi_fraction(intensity_sat, RESET_PI_FRACTION, 1.0).expect("valid fractions")
}

/// AQM of the asset ion during one operation on its neighbour: optical
/// crosstalk `i_x` of the process beam plus light scattered by the process
/// ion. `tau` defaults to the simulated τ_op for reset.
pub fn aqm_estimate(
    process: Process,
    beam: &ProbeBeam,
    i_x: f64,
    tau: Option<f64>,
    chain: &ChainGeometry,
    scatter: &ScatterModel,
    atom: &Atom,
) -> Result<AqmEstimate, CrosstalkError> {
    let tau = match (tau, process) {
        (Some(t), _) => t,
        (None, Process::Reset) => reset_time(beam, atom)?.tau_op,
        (None, Process::Detection) => {
            return Err(CrosstalkError::Domain("detection needs an explicit duration".into()));
        }
    };
    let g_opt = gamma_from_intensity(&beam.scaled(i_x * beam.intensity_sat), &atom.params)?.gamma;
    let g_star = interion_gamma(chain, process, scatter, &atom.params)?;
    let optical = p_aqm_from_gamma(g_opt, tau);
    let interion = p_aqm_from_gamma(g_star, tau);
    let gamma = g_opt + g_star;
    let fidelity = if gamma > 0.0 { fidelity_from_t2(tau, 2.0 / gamma)? } else { 1.0 };
    Ok(AqmEstimate { p_aqm: p_aqm_from_gamma(gamma, tau), fidelity, optical, interion })
}

/// F_{1|2} after a reset of the neighbour with crosstalk `i_x`:
/// the reset lasts its own τ_op and the asset dephases at the γ of the
/// leaked beam.
pub fn reset_fidelity(beam: &ProbeBeam, i_x: f64, atom: &Atom) -> Result<f64, CrosstalkError> {
    let tau = reset_time(beam, atom)?.tau_op;
    let gamma = gamma_from_intensity(&beam.scaled(i_x * beam.intensity_sat), &atom.params)?.gamma;
    if gamma == 0.0 {
        return Ok(1.0);
    }
    fidelity_from_t2(tau, 2.0 / gamma)
}

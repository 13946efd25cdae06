//! Fourier-plane binary holograms for the addressing beam: synthesis by an
//! iterative Fourier transform algorithm, propagation to the ion plane,
//! and the two-patch interference measurement of pupil phase.
//!
//! Grids are square and row-major with the optical axis at index `n/2`.
//! Fourier-plane pixel `(i, j)` sits at `(x, y) = (j − n/2, i − n/2)`.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{fit_gaussian_2d, FitError, FitResult, Gaussian2d};

#[derive(Debug, Error)]
pub enum HolographyError {
    #[error("{0}")]
    Domain(String),
    #[error("target outside the addressable band: {0}")]
    OutOfBand(String),
    #[error("no interference fringe: relative modulation {0:e}")]
    NoFringe(f64),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed grid file: {0}")]
    Format(String),
}

pub const DEFAULT_GRID: usize = 1024;

/// Illumination and aberration on the hologram plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PupilField {
    pub n: usize,
    pub amplitude: Vec<f64>,
    /// Radians.
    pub phase: Vec<f64>,
    /// Hologram pixel pitch in metres.
    pub pitch: f64,
    /// Radius of the disc on the hologram plane that the objective accepts.
    pub aperture_radius: f64,
    pub na: f64,
    pub wavelength: f64,
}

impl PupilField {
    /// The addressing setup: a 1024² hologram of 7.56 µm mirrors, the
    /// objective accepting a disc of 128 mirrors radius at NA 0.16, and
    /// Gaussian illumination 1.5 times wider than that disc.
    pub fn addressing() -> Self {
        let (n, pitch) = (DEFAULT_GRID, 7.56e-6);
        let r = (n / 8) as f64 * pitch;
        Self::gaussian(n, pitch, r, 1.5 * r, 0.16, crate::atomic::LinewidthParams::yb171().wavelength)
    }

    /// Gaussian illumination with 1/e amplitude radius `beam_radius`, no
    /// aberration.
    pub fn gaussian(n: usize, pitch: f64, aperture_radius: f64, beam_radius: f64, na: f64, wavelength: f64) -> Self {
        let mut amplitude = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (x, y) = centered(n, i, j);
                let r2 = (x * x + y * y) * pitch * pitch;
                amplitude[i * n + j] = (-r2 / (beam_radius * beam_radius)).exp();
            }
        }
        Self { n, amplitude, phase: vec![0.0; n * n], pitch, aperture_radius, na, wavelength }
    }

    pub fn validate(&self) -> Result<(), HolographyError> {
        let n = self.n;
        if n < 8 || n % 2 != 0 {
            return Err(HolographyError::Domain(format!("grid size {n} must be even and ≥ 8")));
        }
        if self.amplitude.len() != n * n || self.phase.len() != n * n {
            return Err(HolographyError::Domain("amplitude and phase maps must be n×n".into()));
        }
        if self.amplitude.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) || self.phase.iter().any(|p| !p.is_finite()) {
            return Err(HolographyError::Domain("amplitude must be finite and ≥ 0, phase finite".into()));
        }
        if !(self.pitch > 0.0 && self.wavelength > 0.0 && self.na > 0.0 && self.na < 1.0) {
            return Err(HolographyError::Domain("pitch, wavelength and NA must be positive, NA < 1".into()));
        }
        let r = self.aperture_px();
        if !(r >= 2.0 && r < n as f64 / 2.0) {
            return Err(HolographyError::Domain(format!("aperture radius {r} px must fit in the grid")));
        }
        Ok(())
    }

    /// Aperture radius in pixels.
    pub fn aperture_px(&self) -> f64 {
        self.aperture_radius / self.pitch
    }

    /// Ion-plane sampling. The aperture edge maps to the NA, so one pixel of
    /// spatial frequency is `NA/(λR)` and the image pitch its reciprocal
    /// over `n` samples.
    pub fn image_pitch(&self) -> f64 {
        self.wavelength * self.aperture_px() / (self.n as f64 * self.na)
    }

    pub fn inside(&self, i: usize, j: usize) -> bool {
        let (x, y) = centered(self.n, i, j);
        x * x + y * y <= self.aperture_px().powi(2)
    }

    /// `A·e^{iΦ}` inside the aperture, zero outside.
    pub fn field(&self) -> Vec<Complex64> {
        let n = self.n;
        let mut out = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                if self.inside(i, j) {
                    let k = i * n + j;
                    out[k] = Complex64::from_polar(self.amplitude[k], self.phase[k]);
                }
            }
        }
        out
    }
}

fn centered(n: usize, i: usize, j: usize) -> (f64, f64) {
    (j as f64 - (n / 2) as f64, i as f64 - (n / 2) as f64)
}

/// Desired ion-plane field of the first diffraction order.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetField {
    pub n: usize,
    pub field: Vec<Complex64>,
    /// Spot centre in metres.
    pub center: (f64, f64),
    pub waist: f64,
    /// Gain applied to the requested modulation at binarization.
    pub scale: f64,
}

pub const SQUARE_WAVE_GAIN: f64 = 4.0 / PI;

impl TargetField {
    /// Gaussian spot `exp(−|r − c|²/w²)` sampled on the ion plane of `pupil`.
    pub fn gaussian(pupil: &PupilField, waist: f64, center: (f64, f64)) -> Result<Self, HolographyError> {
        pupil.validate()?;
        if !(waist > 0.0) {
            return Err(HolographyError::Domain("waist must be positive".into()));
        }
        let n = pupil.n;
        let dx = pupil.image_pitch();
        let mut field = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                let (x, y) = centered(n, i, j);
                let r2 = (x * dx - center.0).powi(2) + (y * dx - center.1).powi(2);
                field[i * n + j] = Complex64::new((-r2 / (waist * waist)).exp(), 0.0);
            }
        }
        Ok(Self { n, field, center, waist, scale: SQUARE_WAVE_GAIN })
    }

    pub fn energy(&self) -> f64 {
        self.field.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Micromirror states and the grating carrier they ride on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryHologram {
    pub n: usize,
    pub mirrors: Vec<bool>,
    /// Carrier frequency in cycles across the grid along x and y.
    pub carrier: (i64, i64),
}

impl BinaryHologram {
    /// Carrier period in pixels, measured along the grating vector.
    pub fn carrier_period(&self) -> f64 {
        self.n as f64 / ((self.carrier.0 * self.carrier.0 + self.carrier.1 * self.carrier.1) as f64).sqrt()
    }

    pub fn fill_factor(&self) -> f64 {
        self.mirrors.iter().filter(|m| **m).count() as f64 / self.mirrors.len() as f64
    }
}

fn carrier_phase(n: usize, carrier: (i64, i64), i: usize, j: usize) -> f64 {
    let (x, y) = centered(n, i, j);
    2.0 * PI * (carrier.0 as f64 * x + carrier.1 as f64 * y) / n as f64
}

fn fft2(data: &mut [Complex64], n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    fft.process(data);
    transpose(data, n);
    fft.process(data);
    transpose(data, n);
}

fn transpose(data: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            data.swap(i * n + j, j * n + i);
        }
    }
}

fn roll_half(data: &mut [Complex64], n: usize) {
    let h = n / 2;
    for i in 0..n {
        data[i * n..(i + 1) * n].rotate_left(h);
    }
    data.rotate_left(h * n);
}

/// Unitary far-field transform of a centred field,
/// `E(x) = n⁻¹ Σ_u F(u) e^{−2πi u·x/n}`.
pub fn propagate(field: &[Complex64], n: usize) -> Vec<Complex64> {
    transform(field, n, false)
}

/// Inverse of [`propagate`].
pub fn propagate_back(image: &[Complex64], n: usize) -> Vec<Complex64> {
    transform(image, n, true)
}

fn transform(field: &[Complex64], n: usize, inverse: bool) -> Vec<Complex64> {
    assert_eq!(field.len(), n * n, "field must be n×n");
    assert!(n % 2 == 0, "grid size must be even");
    let mut data = field.to_vec();
    roll_half(&mut data, n);
    fft2(&mut data, n, inverse);
    roll_half(&mut data, n);
    let norm = 1.0 / n as f64;
    data.iter_mut().for_each(|c| *c *= norm);
    data
}

/// Band-limited evaluation of the propagated field at an arbitrary image
/// point, in pixels.
pub fn field_at(field: &[Complex64], n: usize, x: f64, y: f64) -> Complex64 {
    let mut sum = Complex64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let f = field[i * n + j];
            if f != Complex64::new(0.0, 0.0) {
                let (u, v) = centered(n, i, j);
                sum += f * Complex64::from_polar(1.0, -2.0 * PI * (u * x + v * y) / n as f64);
            }
        }
    }
    sum / n as f64
}

/// Hologram-plane field feeding the first order: mirrors times the
/// aberrated illumination, demodulated by the carrier so the order is
/// centred on the optical axis.
pub fn first_order_source(holo: &BinaryHologram, pupil: &PupilField) -> Vec<Complex64> {
    let n = pupil.n;
    let mut f = pupil.field();
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            f[k] = if holo.mirrors[k] {
                f[k] * Complex64::from_polar(1.0, -carrier_phase(n, holo.carrier, i, j))
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
    }
    f
}

/// Ion-plane field of the first order, all other orders included at their
/// displaced positions.
pub fn first_order_image(holo: &BinaryHologram, pupil: &PupilField) -> Vec<Complex64> {
    propagate(&first_order_source(holo, pupil), pupil.n)
}

/// `k`-th Fourier sine coefficient of a unit square wave.
pub fn square_wave_fundamental(k: u32) -> f64 {
    if k % 2 == 1 {
        4.0 / (PI * k as f64)
    } else {
        0.0
    }
}

/// Thresholds a complex modulation `m = a·e^{iψ}` (`a ≤ 1`) into a
/// grating. Locally the mirrors form a carrier-phase-shifted stripe
/// pattern of duty `D`, whose first-order coefficient is `sin(πD)/π·e^{iψ}`.
/// The duty is chosen so that this equals `scale·a/4`, i.e. `scale = 1`
/// reproduces a continuous grating `(1 + a cos)/2` and `scale = 4/π` uses
/// the square wave's larger fundamental.
pub fn binarize(modulation: &[Complex64], n: usize, scale: f64, carrier: (i64, i64)) -> BinaryHologram {
    let mut mirrors = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let m = modulation[i * n + j];
            let s = (PI * scale * m.norm() / 4.0).min(1.0);
            if s <= 0.0 {
                continue;
            }
            let duty = s.asin() / PI;
            mirrors[i * n + j] = (carrier_phase(n, carrier, i, j) + m.arg()).cos() > (PI * duty).cos();
        }
    }
    BinaryHologram { n, mirrors, carrier }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IftaOptions {
    pub carrier: (i64, i64),
    /// Signal-window radius in target waists.
    pub window_waists: f64,
}

impl IftaOptions {
    /// A quarter of the sampling rate along x and about a fifth along y. The
    /// higher orders of a thresholded grating land at multiples of the
    /// carrier, wrapped by the pixel sampling; this choice keeps them far
    /// from the first order, weighting order `n` by its `1/n` amplitude.
    pub fn for_grid(n: usize) -> Self {
        Self { carrier: ((n / 4) as i64, (0.196 * n as f64).round() as i64), window_waists: 6.0 }
    }
}

/// Distance in image pixels from the first order to the nearest aliased
/// order `m ∈ [−4, 6]`, `m ≠ 1`.
pub fn order_clearance(n: usize, carrier: (i64, i64)) -> f64 {
    let wrap = |v: i64| -> f64 {
        let n = n as i64;
        ((v % n + n + n / 2) % n - n / 2) as f64
    };
    (-4..=6)
        .filter(|m| *m != 1)
        .map(|m: i64| wrap((m - 1) * carrier.0).hypot(wrap((m - 1) * carrier.1)))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug)]
pub struct IftaResult {
    pub hologram: BinaryHologram,
    /// Continuous complex modulation before binarization, `|m| ≤ 1`.
    pub modulation: Vec<Complex64>,
    /// Relative signal-window error after each iteration, starting with
    /// the initial guess.
    pub errors: Vec<f64>,
}

/// Iterative Fourier transform algorithm with amplitude freedom outside a
/// disc around the target spot.
///
/// The unknown is the hologram-plane field `G`, confined to
/// `|G| ≤ A` inside the aperture. In the ion plane `G` must equal `α·T` on
/// the signal window, with `α` fixed by the initial guess, and is free
/// elsewhere. Both constraint sets are convex, so alternating projections
/// never increase the window error. The aberration only enters at the end,
/// when `G` is divided by `A·e^{iΦ}` to get the mirror modulation.
pub fn ifta_generate(
    target: &TargetField,
    pupil: &PupilField,
    iterations: usize,
    opts: &IftaOptions,
) -> Result<IftaResult, HolographyError> {
    pupil.validate()?;
    let n = pupil.n;
    if target.n != n {
        return Err(HolographyError::Domain("target and pupil grids differ".into()));
    }
    if iterations == 0 {
        return Err(HolographyError::Domain("at least one iteration is required".into()));
    }
    check_band(target, pupil, opts)?;

    let dx = pupil.image_pitch();
    let radius = opts.window_waists * target.waist / dx;
    let (cx, cy) = (target.center.0 / dx, target.center.1 / dx);
    let window: Vec<bool> = (0..n * n)
        .map(|k| {
            let (x, y) = centered(n, k / n, k % n);
            (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius
        })
        .collect();

    let limit: Vec<f64> = (0..n * n)
        .map(|k| if pupil.inside(k / n, k % n) { pupil.amplitude[k] } else { 0.0 })
        .collect();
    let project = |g: &mut [Complex64]| {
        for (c, &a) in g.iter_mut().zip(&limit) {
            let r = c.norm();
            if r > a {
                *c = if r > 0.0 { *c * (a / r) } else { Complex64::new(0.0, 0.0) };
            }
        }
    };

    // Start from the aperture-truncated ideal pupil, scaled so that no
    // pixel needs more than full modulation.
    let mut g = propagate_back(&target.field, n);
    let mut ratio = 0.0f64;
    for k in 0..n * n {
        if limit[k] > 0.0 {
            ratio = ratio.max(g[k].norm() / limit[k]);
        } else {
            g[k] = Complex64::new(0.0, 0.0);
        }
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(HolographyError::OutOfBand("target has no power inside the illuminated aperture".into()));
    }
    let alpha = 1.0 / ratio;
    g.iter_mut().for_each(|c| *c *= alpha);
    project(&mut g);

    let target_norm: f64 = window.iter().zip(&target.field).filter(|(w, _)| **w).map(|(_, t)| (t * alpha).norm_sqr()).sum::<f64>().sqrt();
    let mut errors = Vec::with_capacity(iterations + 1);
    for it in 0..=iterations {
        let mut e = propagate(&g, n);
        let mut err = 0.0;
        for k in 0..n * n {
            if window[k] {
                let want = target.field[k] * alpha;
                err += (e[k] - want).norm_sqr();
                e[k] = want;
            }
        }
        errors.push(err.sqrt() / target_norm);
        if it == iterations {
            break;
        }
        g = propagate_back(&e, n);
        project(&mut g);
    }

    let mut modulation = vec![Complex64::new(0.0, 0.0); n * n];
    for k in 0..n * n {
        if limit[k] > 0.0 {
            let m = g[k] * Complex64::from_polar(1.0 / limit[k], -pupil.phase[k]);
            modulation[k] = if m.norm() > 1.0 { m / m.norm() } else { m };
        }
    }
    let hologram = binarize(&modulation, n, target.scale, opts.carrier);
    Ok(IftaResult { hologram, modulation, errors })
}

fn check_band(target: &TargetField, pupil: &PupilField, opts: &IftaOptions) -> Result<(), HolographyError> {
    let n = pupil.n as f64;
    let dx = pupil.image_pitch();
    let na_eff = pupil.wavelength / (PI * target.waist);
    if na_eff >= pupil.na {
        return Err(HolographyError::OutOfBand(format!(
            "waist {:e} m needs NA {na_eff:.3} beyond the aperture's {:.3}",
            target.waist, pupil.na
        )));
    }
    let reach = (target.center.0.hypot(target.center.1) + opts.window_waists * target.waist) / dx;
    let spacing = order_clearance(pupil.n, opts.carrier);
    if reach >= spacing / 2.0 || reach >= n / 2.0 {
        return Err(HolographyError::OutOfBand(format!(
            "spot plus window reaches {reach:.1} px; the nearest other order is {spacing:.1} px away on a {n} px field"
        )));
    }
    Ok(())
}

/// Relative intensity of the first order at `at` against the spot centre,
/// both in metres.
pub fn relative_intensity(holo: &BinaryHologram, pupil: &PupilField, center: (f64, f64), at: (f64, f64)) -> f64 {
    let src = first_order_source(holo, pupil);
    let dx = pupil.image_pitch();
    let peak = field_at(&src, pupil.n, center.0 / dx, center.1 / dx).norm_sqr();
    field_at(&src, pupil.n, at.0 / dx, at.1 / dx).norm_sqr() / peak
}

/// Same as [`relative_intensity`] for a continuous modulation.
pub fn relative_intensity_continuous(modulation: &[Complex64], pupil: &PupilField, center: (f64, f64), at: (f64, f64)) -> f64 {
    let src: Vec<Complex64> = pupil.field().iter().zip(modulation).map(|(f, m)| f * m).collect();
    let dx = pupil.image_pitch();
    let peak = field_at(&src, pupil.n, center.0 / dx, center.1 / dx).norm_sqr();
    field_at(&src, pupil.n, at.0 / dx, at.1 / dx).norm_sqr() / peak
}

/// First-order power inside a disc of `radius` metres around `center`.
pub fn window_power(image: &[Complex64], pupil: &PupilField, center: (f64, f64), radius: f64) -> f64 {
    let n = pupil.n;
    let dx = pupil.image_pitch();
    (0..n * n)
        .filter(|k| {
            let (x, y) = centered(n, k / n, k % n);
            (x * dx - center.0).powi(2) + (y * dx - center.1).powi(2) <= radius * radius
        })
        .map(|k| image[k].norm_sqr())
        .sum()
}

/// Circular region of the hologram plane, in pixels from the axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub center: (f64, f64),
    pub radius: f64,
}

impl Patch {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.center.0).powi(2) + (y - self.center.1).powi(2) <= self.radius * self.radius
    }

    fn overlaps(&self, other: &Patch) -> bool {
        (self.center.0 - other.center.0).hypot(self.center.1 - other.center.1) <= self.radius + other.radius
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensingOptions {
    /// Pumping exposure: fluorescence falls to `e^{−exposure}` when both
    /// patches interfere fully constructively.
    pub exposure: f64,
    pub carrier: (i64, i64),
}

impl SensingOptions {
    pub fn for_grid(n: usize) -> Self {
        Self { exposure: 1.0, carrier: IftaOptions::for_grid(n).carrier }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSensing {
    /// Pupil phase of patch b relative to patch a, in [−π, π).
    pub phase: f64,
    /// Fringe amplitude of the pumped fraction, `−ln(fluorescence)`.
    pub fringe_amplitude: f64,
    pub mean_depletion: f64,
    pub fluorescence: Vec<f64>,
}

/// Two-patch interference measured with the ion as the sensor.
///
/// Patch a shows a 50% grating; patch b the same grating shifted by each
/// of `phases`. The ion at the image centre, prepared bright, is pumped
/// dark for a fixed time at a rate proportional to the first-order
/// intensity, so the remaining fluorescence is `exp(−κI)`. A sinusoid fit
/// to `−ln` of the fluorescence locates the constructive setting, whose
/// negative is the pupil phase difference.
pub fn simulate_phase_sensing(
    pupil: &PupilField,
    a: &Patch,
    b: &Patch,
    phases: &[f64],
    opts: &SensingOptions,
) -> Result<PhaseSensing, HolographyError> {
    pupil.validate()?;
    if a.overlaps(b) {
        return Err(HolographyError::Domain("patches must be disjoint".into()));
    }
    if phases.len() < 3 {
        return Err(HolographyError::Domain("need at least three phase settings".into()));
    }
    let n = pupil.n;
    let field = pupil.field();
    let mut members = Vec::new();
    let mut bound = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = centered(n, i, j);
            let which = if a.contains(x, y) {
                0
            } else if b.contains(x, y) {
                1
            } else {
                continue;
            };
            let k = i * n + j;
            bound += field[k].norm() / PI;
            members.push((which, carrier_phase(n, opts.carrier, i, j), field[k]));
        }
    }
    let i_ref = (bound / n as f64).powi(2);
    if !(i_ref > 0.0) {
        return Err(HolographyError::NoFringe(0.0));
    }
    let kappa = opts.exposure / i_ref;

    let mut fluorescence = Vec::with_capacity(phases.len());
    for &psi in phases {
        let mut e = Complex64::new(0.0, 0.0);
        for &(which, c, f) in &members {
            let shift = if which == 1 { psi } else { 0.0 };
            if (c + shift).cos() > 0.0 {
                e += f * Complex64::from_polar(1.0, -c);
            }
        }
        let intensity = (e / n as f64).norm_sqr();
        fluorescence.push((-kappa * intensity).exp());
    }

    // −ln F = c0 + c1 cos ψ + c2 sin ψ, linear in the coefficients.
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (&psi, &f) in phases.iter().zip(&fluorescence) {
        let row = Vector3::new(1.0, psi.cos(), psi.sin());
        ata += row * row.transpose();
        atb += row * -f.ln();
    }
    let c = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| HolographyError::Domain("phase settings do not resolve a sinusoid".into()))?;
    let amplitude = c[1].hypot(c[2]);
    let relative = if c[0] > 0.0 { amplitude / c[0] } else { 0.0 };
    if !(relative > 1e-6) {
        return Err(HolographyError::NoFringe(relative));
    }
    let constructive = c[2].atan2(c[1]);
    Ok(PhaseSensing {
        phase: wrap_phase(-constructive),
        fringe_amplitude: amplitude,
        mean_depletion: c[0],
        fluorescence,
    })
}

/// Wraps into [−π, π).
pub fn wrap_phase(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Debug)]
pub struct PupilAmplitudeFit {
    /// Intensity-profile fit; `None` when the profile is flat.
    pub fit: Option<FitResult>,
    /// Square root of the fitted intensity on every pixel.
    pub amplitude: Vec<f64>,
    pub residuals: Vec<f64>,
    pub flags: Vec<String>,
}

/// Smooths per-patch intensity samples `(x, y, I)` (pixels) into an
/// amplitude map with a 2-D Gaussian fit.
pub fn fit_pupil_amplitude(samples: &[(f64, f64, f64)], n: usize) -> Result<PupilAmplitudeFit, HolographyError> {
    if samples.len() < 6 {
        return Err(FitError::TooFewSamples { need: 6, got: samples.len() }.into());
    }
    let zs: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let zmin = zs.iter().cloned().fold(f64::INFINITY, f64::min);
    let zmax = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if zmax - zmin <= 1e-12 * zmax.abs().max(1e-300) {
        let level = zmax.max(0.0).sqrt();
        return Ok(PupilAmplitudeFit {
            fit: None,
            amplitude: vec![level; n * n],
            residuals: vec![0.0; samples.len()],
            flags: vec!["degenerate width".into()],
        });
    }
    let fit = fit_gaussian_2d(samples)?;
    let residuals = samples.iter().map(|s| s.2 - Gaussian2d::value(&fit.params, s.0, s.1)).collect();
    let mut amplitude = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = centered(n, i, j);
            amplitude[i * n + j] = Gaussian2d::value(&fit.params, x, y).max(0.0).sqrt();
        }
    }
    let flags = fit.flags.clone();
    Ok(PupilAmplitudeFit { fit: Some(fit), amplitude, residuals, flags })
}

/// Subtracts the least-squares plane `p + t_x·x + t_y·y` over the pixels
/// where `mask` holds, and returns `(p, t_x, t_y)`.
pub fn remove_piston_tilt(phase: &mut [f64], n: usize, mask: &[bool]) -> Result<(f64, f64, f64), HolographyError> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for i in 0..n {
        for j in 0..n {
            if mask[i * n + j] {
                let (x, y) = centered(n, i, j);
                let row = Vector3::new(1.0, x, y);
                ata += row * row.transpose();
                atb += row * phase[i * n + j];
            }
        }
    }
    let c = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| HolographyError::Domain("mask too small to fix a plane".into()))?;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = centered(n, i, j);
            phase[i * n + j] -= c[0] + c[1] * x + c[2] * y;
        }
    }
    Ok((c[0], c[1], c[2]))
}

/// Sampling metadata stored with a float grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub pitch: f64,
    pub wavelength: f64,
}

const GRID_MAGIC: &[u8; 8] = b"AQMGRID1";

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Row-major little-endian f64 grid behind a header of magic, `nx`, `ny`
/// (u64) and pitch, wavelength (f64). A `key = value` text sidecar repeats
/// the header at `<path>.meta`.
pub fn write_grid(path: &Path, data: &[f64], nx: usize, ny: usize, meta: &GridMeta) -> Result<(), HolographyError> {
    if data.len() != nx * ny {
        return Err(HolographyError::Domain(format!("{} values for a {nx}×{ny} grid", data.len())));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(GRID_MAGIC)?;
    out.write_all(&(nx as u64).to_le_bytes())?;
    out.write_all(&(ny as u64).to_le_bytes())?;
    out.write_all(&meta.pitch.to_le_bytes())?;
    out.write_all(&meta.wavelength.to_le_bytes())?;
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    let mut side = BufWriter::new(fs::File::create(sidecar(path))?);
    writeln!(side, "format = f64-le row-major")?;
    writeln!(side, "nx = {nx}")?;
    writeln!(side, "ny = {ny}")?;
    writeln!(side, "pitch_m = {:?}", meta.pitch)?;
    writeln!(side, "wavelength_m = {:?}", meta.wavelength)?;
    side.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<(Vec<f64>, usize, usize, GridMeta), HolographyError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 40 || &bytes[..8] != GRID_MAGIC {
        return Err(HolographyError::Format("missing header".into()));
    }
    let word = |k: usize| -> [u8; 8] { bytes[8 + 8 * k..16 + 8 * k].try_into().expect("8 bytes") };
    let nx = u64::from_le_bytes(word(0)) as usize;
    let ny = u64::from_le_bytes(word(1)) as usize;
    let meta = GridMeta { pitch: f64::from_le_bytes(word(2)), wavelength: f64::from_le_bytes(word(3)) };
    let body = &bytes[40..];
    if nx.checked_mul(ny).and_then(|c| c.checked_mul(8)) != Some(body.len()) {
        return Err(HolographyError::Format(format!("{} data bytes for a {nx}×{ny} grid", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((data, nx, ny, meta))
}

/// Binary PBM (P4), mirror on = black.
pub fn write_pbm(path: &Path, holo: &BinaryHologram) -> Result<(), HolographyError> {
    let n = holo.n;
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P4\n{n} {n}\n")?;
    let stride = n.div_ceil(8);
    for i in 0..n {
        let mut row = vec![0u8; stride];
        for j in 0..n {
            if holo.mirrors[i * n + j] {
                row[j / 8] |= 0x80 >> (j % 8);
            }
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pbm(path: &Path) -> Result<Vec<bool>, HolographyError> {
    let mut input = BufReader::new(fs::File::open(path)?);
    let mut header = Vec::new();
    while header.len() < 2 {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(HolographyError::Format("truncated PBM header".into()));
        }
        let line = line.split('#').next().unwrap_or("").trim().to_string();
        header.extend(line.split_whitespace().map(str::to_string));
    }
    if header[0] != "P4" {
        return Err(HolographyError::Format(format!("unsupported magic {}", header[0])));
    }
    let mut dims = header[1..].to_vec();
    if dims.len() < 2 {
        let mut line = String::new();
        input.read_line(&mut line)?;
        dims.extend(line.split_whitespace().map(str::to_string));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| HolographyError::Format(format!("bad dimension {s}")));
    let (w, h) = (parse(&dims[0])?, parse(&dims[1])?);
    let stride = w.div_ceil(8);
    let mut body = vec![0u8; stride * h];
    input.read_exact(&mut body)?;
    Ok((0..h * w).map(|k| body[(k / w) * stride + (k % w) / 8] & (0x80 >> (k % w % 8)) != 0).collect())
}

//! Density-matrix evolution: rotating-frame Hamiltonians, collapse operators
//! and the master-equation integrators.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomic::{
    decay_branching, signed_rabi_frequency, HyperfineManifold, LevelScheme, LinewidthParams,
    SpectralBranch, Transition, DOWN, NUM_GROUND, UP,
};

pub type CMatrix = DMatrix<Complex64>;

const I: Complex64 = Complex64::new(0.0, 1.0);

pub const TRACE_TOL: f64 = 1e-9;
pub const HERMITICITY_TOL: f64 = 1e-10;
pub const POSITIVITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LindbladError {
    #[error("no rotating frame exists: {0}")]
    NoRotatingFrame(String),
    #[error("integrator failed to converge: achieved error {achieved:e} at t = {time:e} s")]
    NonConvergence { achieved: f64, time: f64 },
    #[error("density matrix hygiene violated: {0}")]
    Hygiene(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    Domain(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    m: CMatrix,
}

impl DensityMatrix {
    /// Wraps a matrix after checking hygiene.
    pub fn new(m: CMatrix) -> Result<Self, LindbladError> {
        let rho = Self { m };
        rho.check()?;
        Ok(rho)
    }

    /// Wraps without checks; used on integrator output that is checked later.
    pub fn from_matrix_unchecked(m: CMatrix) -> Self {
        Self { m }
    }

    pub fn basis(dim: usize, k: usize) -> Self {
        let mut m = CMatrix::zeros(dim, dim);
        m[(k, k)] = Complex64::new(1.0, 0.0);
        Self { m }
    }

    /// |ψ⟩⟨ψ| for a normalised amplitude vector.
    pub fn pure(psi: &[Complex64]) -> Result<Self, LindbladError> {
        let norm: f64 = psi.iter().map(|c| c.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(LindbladError::Domain(format!("state norm {norm} is not 1")));
        }
        let n = psi.len();
        let m = CMatrix::from_fn(n, n, |i, j| psi[i] * psi[j].conj());
        Ok(Self { m })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn population(&self, k: usize) -> f64 {
        self.m[(k, k)].re
    }

    pub fn coherence(&self, i: usize, j: usize) -> Complex64 {
        self.m[(i, j)]
    }

    pub fn trace(&self) -> Complex64 {
        self.m.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.m[(i, j)] - self.m[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = (&self.m + self.m.adjoint()) * Complex64::new(0.5, 0.0);
        let mut ev: Vec<f64> = h.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Trace, Hermiticity and positivity within the module tolerances.
    /// Every call is tallied in [`hygiene_report`].
    pub fn check(&self) -> Result<(), LindbladError> {
        let tr = self.trace();
        let herm = self.hermiticity_error();
        let min = self.min_eigenvalue();
        record_hygiene((tr - 1.0).norm(), herm, min);
        if (tr - 1.0).norm() >= TRACE_TOL || tr.is_nan() {
            return Err(LindbladError::Hygiene(format!("|tr ρ - 1| = {:e}", (tr - 1.0).norm())));
        }
        if herm >= HERMITICITY_TOL {
            return Err(LindbladError::Hygiene(format!("‖ρ - ρ†‖ = {herm:e}")));
        }
        if min <= -POSITIVITY_TOL {
            return Err(LindbladError::Hygiene(format!("min eigenvalue {min:e}")));
        }
        Ok(())
    }

    /// Keeps the leading `dim × dim` block.
    pub fn truncate(&self, dim: usize) -> Self {
        Self { m: self.m.view((0, 0), (dim, dim)).into_owned() }
    }

    /// Embeds into a larger zero-padded space.
    pub fn embed(&self, dim: usize) -> Self {
        let mut m = CMatrix::zeros(dim, dim);
        let n = self.dim();
        m.view_mut((0, 0), (n, n)).copy_from(&self.m);
        Self { m }
    }

    /// Applies a unitary: U ρ U†.
    pub fn transform(&self, u: &CMatrix) -> Self {
        Self { m: u * &self.m * u.adjoint() }
    }
}

static CHECKS: AtomicU64 = AtomicU64::new(0);
// Non-negative f64 bit patterns order like the values, so fetch_max works.
static WORST_TRACE: AtomicU64 = AtomicU64::new(0);
static WORST_HERMITICITY: AtomicU64 = AtomicU64::new(0);
static WORST_NEGATIVITY: AtomicU64 = AtomicU64::new(0);

fn record_hygiene(trace: f64, herm: f64, min_eigenvalue: f64) {
    let bits = |x: f64| if x.is_nan() { f64::INFINITY.to_bits() } else { x.max(0.0).to_bits() };
    CHECKS.fetch_add(1, Ordering::Relaxed);
    WORST_TRACE.fetch_max(bits(trace), Ordering::Relaxed);
    WORST_HERMITICITY.fetch_max(bits(herm), Ordering::Relaxed);
    WORST_NEGATIVITY.fetch_max(bits(-min_eigenvalue), Ordering::Relaxed);
}

/// Worst deviations seen by [`DensityMatrix::check`] in this process.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HygieneReport {
    pub checks: u64,
    pub worst_trace_error: f64,
    pub worst_hermiticity_error: f64,
    /// Largest `−λ_min` over all checked matrices, floored at 0.
    pub worst_negativity: f64,
}

impl HygieneReport {
    pub fn within_tolerance(&self) -> bool {
        self.worst_trace_error < TRACE_TOL
            && self.worst_hermiticity_error < HERMITICITY_TOL
            && self.worst_negativity < POSITIVITY_TOL
    }
}

pub fn hygiene_report() -> HygieneReport {
    HygieneReport {
        checks: CHECKS.load(Ordering::Relaxed),
        worst_trace_error: f64::from_bits(WORST_TRACE.load(Ordering::Relaxed)),
        worst_hermiticity_error: f64::from_bits(WORST_HERMITICITY.load(Ordering::Relaxed)),
        worst_negativity: f64::from_bits(WORST_NEGATIVITY.load(Ordering::Relaxed)),
    }
}

/// Laser light illuminating one ion, described by its polarization and
/// spectral composition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeBeam {
    /// Total intensity in units of I_sat.
    pub intensity_sat: f64,
    pub pi_fraction: f64,
    pub sigma_plus_fraction: f64,
    pub sigma_minus_fraction: f64,
    /// Share of the intensity on the F=1 → F′=1 line; the remainder drives
    /// F=1 → F′=0.
    pub d1_11_fraction: f64,
    /// Detuning from each line centre (rad/s, positive = blue).
    pub detuning: f64,
}

impl ProbeBeam {
    pub fn new(
        intensity_sat: f64,
        pi_fraction: f64,
        sigma_plus_fraction: f64,
        sigma_minus_fraction: f64,
        d1_11_fraction: f64,
        detuning: f64,
    ) -> Result<Self, LindbladError> {
        let probe = Self {
            intensity_sat,
            pi_fraction,
            sigma_plus_fraction,
            sigma_minus_fraction,
            d1_11_fraction,
            detuning,
        };
        probe.validate()?;
        Ok(probe)
    }

    /// Polarization split with σ± sharing equally whatever π leaves.
    pub fn with_pi_fraction(intensity_sat: f64, pi_fraction: f64, d1_11_fraction: f64) -> Result<Self, LindbladError> {
        let sigma = (1.0 - pi_fraction) / 2.0;
        Self::new(intensity_sat, pi_fraction, sigma, sigma, d1_11_fraction, 0.0)
    }

    /// Resonant F=1 → F′=0 cycling light with equal polarization thirds.
    pub fn detection(intensity_sat: f64) -> Self {
        Self::with_pi_fraction(intensity_sat, 1.0 / 3.0, 0.0).expect("valid fractions")
    }

    pub fn validate(&self) -> Result<(), LindbladError> {
        let fracs = [self.pi_fraction, self.sigma_plus_fraction, self.sigma_minus_fraction, self.d1_11_fraction];
        if !(self.intensity_sat >= 0.0) || !self.intensity_sat.is_finite() {
            return Err(LindbladError::Domain(format!("intensity {} must be ≥ 0", self.intensity_sat)));
        }
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(LindbladError::Domain("fractions must lie in [0, 1]".into()));
        }
        let sum = self.pi_fraction + self.sigma_plus_fraction + self.sigma_minus_fraction;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(LindbladError::Domain(format!("polarization fractions sum to {sum}, not 1")));
        }
        if !self.detuning.is_finite() {
            return Err(LindbladError::Domain("detuning must be finite".into()));
        }
        Ok(())
    }

    pub fn polarization_fraction(&self, q: i32) -> f64 {
        match q {
            0 => self.pi_fraction,
            1 => self.sigma_plus_fraction,
            -1 => self.sigma_minus_fraction,
            _ => 0.0,
        }
    }

    /// Intensity (I_sat units) of the light resonant with `branch`.
    pub fn branch_intensity(&self, branch: SpectralBranch) -> f64 {
        match branch {
            SpectralBranch::D1To11 => self.intensity_sat * self.d1_11_fraction,
            SpectralBranch::D1To10 => self.intensity_sat * (1.0 - self.d1_11_fraction),
            _ => 0.0,
        }
    }

    pub fn scaled(&self, intensity_sat: f64) -> Self {
        Self { intensity_sat, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrowaveDrive {
    pub rabi: f64,
    pub detuning: f64,
    pub phase: f64,
}

impl Default for MicrowaveDrive {
    fn default() -> Self {
        Self { rabi: 0.0, detuning: 2.0 * PI * 10e3, phase: 0.0 }
    }
}

/// `L = √rate |to⟩⟨from|`; `from == to` gives a projector (dephasing) term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseOperator {
    pub rate: f64,
    pub from_level: usize,
    pub to_level: usize,
}

impl CollapseOperator {
    pub fn new(rate: f64, from_level: usize, to_level: usize) -> Result<Self, LindbladError> {
        if !(rate >= 0.0) {
            return Err(LindbladError::Domain(format!("collapse rate {rate} must be ≥ 0")));
        }
        Ok(Self { rate, from_level, to_level })
    }

    pub fn matrix(&self, dim: usize) -> CMatrix {
        let mut m = CMatrix::zeros(dim, dim);
        m[(self.to_level, self.from_level)] = Complex64::new(self.rate.sqrt(), 0.0);
        m
    }
}

/// How off-resonant couplings of each laser frequency to the other
/// hyperfine line are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossCoupling {
    /// Each laser frequency drives only its own line.
    Off,
    /// Keep off-resonant terms wherever a common rotating frame exists and
    /// drop the rest (reported on the Hamiltonian).
    #[default]
    Compatible,
    /// Keep all off-resonant terms; fail if no common frame exists.
    Strict,
}

impl FromStr for CrossCoupling {
    type Err = LindbladError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Self::Off),
            "compatible" | "on" => Ok(Self::Compatible),
            "strict" => Ok(Self::Strict),
            _ => Err(LindbladError::Domain(format!("unknown cross-coupling mode {s:?}"))),
        }
    }
}

/// A drive term left out because it has no consistent rotating frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DroppedTerm {
    pub source: DriveSource,
    pub lower: HyperfineManifold,
    pub upper: HyperfineManifold,
    pub detuning: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriveSource {
    Microwave,
    /// Light resonant with F=1 → F′=0.
    Laser10,
    /// Light resonant with F=1 → F′=1.
    Laser11,
}

impl fmt::Display for DriveSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Microwave => "microwave",
            Self::Laser10 => "laser F=1→F'=0",
            Self::Laser11 => "laser F=1→F'=1",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hamiltonian {
    pub matrix: CMatrix,
    pub dropped: Vec<DroppedTerm>,
}

impl Hamiltonian {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The S₁/₂ block, for the reduced four-level model.
    pub fn ground_block(&self) -> CMatrix {
        self.matrix.view((0, 0), (NUM_GROUND, NUM_GROUND)).into_owned()
    }
}

struct Edge {
    source: DriveSource,
    lower: HyperfineManifold,
    upper: HyperfineManifold,
    intensity: f64,
    detuning: f64,
}

/// Frame detunings of the four hyperfine manifolds (frame energy minus
/// manifold centre), kept as a weighted union-find:
/// `δ[x] = δ[root] + offset[x]`. Working with detunings rather than absolute
/// energies keeps GHz offsets from swamping kHz ones.
struct FrameSolver {
    parent: [usize; 4],
    offset: [f64; 4],
}

impl FrameSolver {
    fn new() -> Self {
        Self { parent: [0, 1, 2, 3], offset: [0.0; 4] }
    }

    fn find(&mut self, x: usize) -> (usize, f64) {
        if self.parent[x] == x {
            return (x, 0.0);
        }
        let (root, off) = self.find(self.parent[x]);
        self.parent[x] = root;
        self.offset[x] += off;
        (root, self.offset[x])
    }

    /// Imposes `pot[b] - pot[a] = w`. Returns false on an inconsistent cycle.
    fn union(&mut self, a: usize, b: usize, w: f64) -> bool {
        let (ra, oa) = self.find(a);
        let (rb, ob) = self.find(b);
        if ra == rb {
            let have = ob - oa;
            return (have - w).abs() <= 1e-9 * (w.abs() + have.abs()) + 1e-6;
        }
        // attach rb under ra
        self.parent[rb] = ra;
        self.offset[rb] = oa + w - ob;
        true
    }
}

/// Time-independent rotating-frame Hamiltonian for one ion under an optional
/// probe and an optional microwave.
///
/// Each drive frequency links two hyperfine manifolds; the frame energies are
/// the potentials solving all links simultaneously. Every connected set of
/// manifolds is anchored at the lower end of its most resonant link, so with
/// only a microwave the ground block is `−(Δ+Δ_zm)|1⟩⟨1| − Δ|2⟩⟨2| − (Δ−Δ_zm)|3⟩⟨3|`.
pub fn build_hamiltonian(
    scheme: &LevelScheme,
    params: &LinewidthParams,
    probe: Option<&ProbeBeam>,
    mw: Option<&MicrowaveDrive>,
    cross: CrossCoupling,
) -> Result<Hamiltonian, LindbladError> {
    use HyperfineManifold::*;
    let n = scheme.len();
    let centre = |hf| scheme.manifold_energy(hf);
    let mut edges = Vec::new();

    if let Some(mw) = mw {
        edges.push(Edge { source: DriveSource::Microwave, lower: S0, upper: S1, intensity: 0.0, detuning: mw.detuning });
    }
    if let Some(p) = probe {
        p.validate()?;
        let lasers = [
            (DriveSource::Laser10, centre(P0) - centre(S1), p.branch_intensity(SpectralBranch::D1To10)),
            (DriveSource::Laser11, centre(P1) - centre(S1), p.branch_intensity(SpectralBranch::D1To11)),
        ];
        for (source, omega, intensity) in lasers {
            if intensity <= 0.0 {
                continue;
            }
            for (lower, upper) in [(S1, P0), (S1, P1), (S0, P1)] {
                let own = matches!(
                    (source, upper),
                    (DriveSource::Laser10, P0) | (DriveSource::Laser11, P1)
                ) && lower == S1;
                if !own && cross == CrossCoupling::Off {
                    continue;
                }
                let detuning = (omega - (centre(upper) - centre(lower))) + p.detuning;
                edges.push(Edge { source, lower, upper, intensity, detuning });
            }
        }
    }
    // Near-resonant links anchor the frame before far-detuned ones.
    edges.sort_by(|a, b| a.detuning.abs().total_cmp(&b.detuning.abs()));

    let mut frame = FrameSolver::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for e in edges {
        if frame.union(e.lower.index(), e.upper.index(), e.detuning) {
            kept.push(e);
        } else if cross == CrossCoupling::Strict || e.source == DriveSource::Microwave {
            return Err(LindbladError::NoRotatingFrame(format!(
                "{} on {:?}↔{:?} is incommensurate with the other drives",
                e.source, e.lower, e.upper
            )));
        } else {
            dropped.push(DroppedTerm { source: e.source, lower: e.lower, upper: e.upper, detuning: e.detuning });
        }
    }

    let mut frame_detuning = [0.0; 4];
    let mut anchored: HashMap<usize, f64> = HashMap::new();
    // Each connected set is anchored at the lower end of its most resonant
    // link, so the near-resonant levels keep small diagonal entries.
    for e in &kept {
        let (root, off) = frame.find(e.lower.index());
        anchored.entry(root).or_insert(-off);
    }
    for hf in HyperfineManifold::ALL {
        let (root, off) = frame.find(hf.index());
        // ALL is ordered lowest first, so the first member seen anchors its set.
        let base = *anchored.entry(root).or_insert(-off);
        frame_detuning[hf.index()] = base + off;
    }

    let mut h = CMatrix::zeros(n, n);
    for i in 0..n {
        let hf = scheme.levels[i].hyperfine();
        h[(i, i)] = Complex64::new(scheme.zeeman_energy(i) - frame_detuning[hf.index()], 0.0);
    }
    for e in &kept {
        match e.source {
            DriveSource::Microwave => {
                let mw = mw.expect("microwave edge implies a drive");
                let c = Complex64::from_polar(mw.rabi / 2.0, mw.phase);
                h[(UP, DOWN)] += c;
                h[(DOWN, UP)] += c.conj();
            }
            _ => {
                let probe = probe.expect("laser edge implies a probe");
                for g in scheme.ground_indices() {
                    for x in scheme.excited_indices() {
                        if scheme.levels[g].hyperfine() != e.lower || scheme.levels[x].hyperfine() != e.upper {
                            continue;
                        }
                        let t = Transition::new(scheme, g, x).expect("valid indices");
                        let Some(pol) = t.polarization else { continue };
                        let share = e.intensity * probe.polarization_fraction(pol.q());
                        let omega = signed_rabi_frequency(scheme, share, &t, params);
                        h[(x, g)] += Complex64::new(omega / 2.0, 0.0);
                        h[(g, x)] += Complex64::new(omega / 2.0, 0.0);
                    }
                }
            }
        }
    }
    Ok(Hamiltonian { matrix: h, dropped })
}

/// One operator per allowed P₁/₂ → S₁/₂ decay channel.
pub fn spontaneous_collapse_ops(scheme: &LevelScheme, params: &LinewidthParams) -> Vec<CollapseOperator> {
    let mut ops = Vec::new();
    for e in scheme.excited_indices() {
        for (g, rate) in decay_branching(scheme, e, params).expect("excited level") {
            ops.push(CollapseOperator { rate, from_level: e, to_level: g });
        }
    }
    ops
}

/// Effective scattering channels of |↑⟩ under weak light of one
/// polarization/spectral class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakProbeClass {
    /// π light on F=1 → F′=0 (detection).
    D110Pi,
    /// σ⁺ light on F=1 → F′=1 (reset).
    D111SigmaPlus,
    /// σ⁻ light on F=1 → F′=1 (reset).
    D111SigmaMinus,
}

impl WeakProbeClass {
    pub const ALL: [WeakProbeClass; 3] = [Self::D110Pi, Self::D111SigmaPlus, Self::D111SigmaMinus];

    /// Final states reached from |↑⟩ (|↑⟩ itself marks the dephasing channel).
    pub fn targets(self) -> [usize; 3] {
        match self {
            Self::D110Pi => [2, 1, 3],
            Self::D111SigmaPlus => [2, 3, 0],
            Self::D111SigmaMinus => [2, 1, 0],
        }
    }
}

impl FromStr for WeakProbeClass {
    type Err = LindbladError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "d1_10_pi" | "d110_pi" | "detection_pi" => Ok(Self::D110Pi),
            "d1_11_sigma_plus" | "d111_sigma_plus" | "reset_sigma_plus" => Ok(Self::D111SigmaPlus),
            "d1_11_sigma_minus" | "d111_sigma_minus" | "reset_sigma_minus" => Ok(Self::D111SigmaMinus),
            _ => Err(LindbladError::Domain(format!("unknown weak-probe class {s:?}"))),
        }
    }
}

impl WeakProbeClass {
    /// Spectral line and polarization that open this channel.
    pub fn drive(self) -> (SpectralBranch, i32) {
        match self {
            Self::D110Pi => (SpectralBranch::D1To10, 0),
            Self::D111SigmaPlus => (SpectralBranch::D1To11, 1),
            Self::D111SigmaMinus => (SpectralBranch::D1To11, -1),
        }
    }
}

/// Weak-light scattering rate out of |↑⟩ for each channel:
/// `γ = Γ/6 · I_branch · f_q / (1 + 4δ²/Γ²)`.
pub fn weak_probe_rates(probe: &ProbeBeam, params: &LinewidthParams) -> [(WeakProbeClass, f64); 3] {
    let lorentz = 1.0 / (1.0 + 4.0 * probe.detuning.powi(2) / params.gamma.powi(2));
    WeakProbeClass::ALL.map(|class| {
        let (branch, q) = class.drive();
        let rate = params.gamma / 6.0 * probe.branch_intensity(branch) * probe.polarization_fraction(q) * lorentz;
        (class, rate)
    })
}

/// Collapse operators for every active weak-probe channel of `probe`.
pub fn weak_probe_ops(probe: &ProbeBeam, params: &LinewidthParams) -> Result<Vec<CollapseOperator>, LindbladError> {
    let mut ops = Vec::new();
    for (class, rate) in weak_probe_rates(probe, params) {
        if rate > 0.0 {
            ops.extend(weak_probe_collapse_ops(class, rate)?);
        }
    }
    Ok(ops)
}

/// `√(γ/3)` operators out of |↑⟩ for the given class.
pub fn weak_probe_collapse_ops(class: WeakProbeClass, gamma: f64) -> Result<Vec<CollapseOperator>, LindbladError> {
    class
        .targets()
        .iter()
        .map(|&to| CollapseOperator::new(gamma / 3.0, UP, to))
        .collect()
}

/// `1/4 + ½e^{−γt/2}cos(Δt) + ¼e^{−2γt/3}`: |↑⟩ population after a Ramsey
/// sequence with weak π detection light during the wait.
pub fn analytic_ramsey_rho22(gamma: f64, detuning: f64, t: f64) -> f64 {
    0.25 + 0.5 * (-gamma * t / 2.0).exp() * (detuning * t).cos() + 0.25 * (-2.0 * gamma * t / 3.0).exp()
}

/// Right-hand side of the master equation.
pub fn lindblad_rhs(rho: &CMatrix, h: &CMatrix, ops: &[CollapseOperator]) -> CMatrix {
    let hr = h * rho;
    let mut d = (&hr - hr.adjoint()) * (-I);
    let n = rho.nrows();
    for op in ops {
        let (f, t, r) = (op.from_level, op.to_level, op.rate);
        if r == 0.0 {
            continue;
        }
        d[(t, t)] += rho[(f, f)] * r;
        for k in 0..n {
            d[(f, k)] -= rho[(f, k)] * (r / 2.0);
            d[(k, f)] -= rho[(k, f)] * (r / 2.0);
        }
    }
    d
}

/// Superoperator acting on column-stacked ρ.
pub fn liouvillian(h: &CMatrix, ops: &[CollapseOperator]) -> CMatrix {
    let n = h.nrows();
    let id = CMatrix::identity(n, n);
    let mut l = (id.kronecker(h) - h.transpose().kronecker(&id)) * (-I);
    for op in ops {
        if op.rate == 0.0 {
            continue;
        }
        let c = op.matrix(n);
        let cdc = c.adjoint() * &c;
        l += c.conjugate().kronecker(&c);
        l -= (id.kronecker(&cdc) + cdc.transpose().kronecker(&id)) * Complex64::new(0.5, 0.0);
    }
    l
}

fn vectorize(m: &CMatrix) -> CMatrix {
    CMatrix::from_column_slice(m.len(), 1, m.as_slice())
}

fn unvectorize(v: &CMatrix, n: usize) -> CMatrix {
    CMatrix::from_column_slice(n, n, v.as_slice())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Dormand–Prince unless the segment spans too many fast oscillations.
    #[default]
    Auto,
    DormandPrince,
    /// Exact exponential of the Liouvillian.
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub method: Method,
    /// With `Auto`, switch to the exponential once `‖L‖·t` exceeds this.
    pub stiffness_threshold: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-13, max_steps: 2_000_000, method: Method::Auto, stiffness_threshold: 2e4 }
    }
}

fn generator_scale(h: &CMatrix, ops: &[CollapseOperator]) -> f64 {
    let hmax = h.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let n = h.nrows() as f64;
    let rates: f64 = ops.iter().map(|o| o.rate).sum();
    2.0 * n * hmax + rates
}

/// Evolves ρ₀ for time `t` under the master equation and checks hygiene.
pub fn evolve(
    rho0: &DensityMatrix,
    h: &CMatrix,
    ops: &[CollapseOperator],
    t: f64,
    opts: &EvolveOptions,
) -> Result<DensityMatrix, LindbladError> {
    let n = rho0.dim();
    if h.nrows() != n || h.ncols() != n {
        return Err(LindbladError::Dimension { expected: n, got: h.nrows() });
    }
    if let Some(op) = ops.iter().find(|o| o.from_level >= n || o.to_level >= n || !(o.rate >= 0.0)) {
        return Err(LindbladError::Domain(format!("bad collapse operator {op:?} for dimension {n}")));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(LindbladError::Domain(format!("duration {t} must be ≥ 0")));
    }
    if t == 0.0 {
        return Ok(rho0.clone());
    }
    let method = match opts.method {
        Method::Auto if generator_scale(h, ops) * t > opts.stiffness_threshold => Method::Exponential,
        Method::Auto => Method::DormandPrince,
        m => m,
    };
    let m = match method {
        Method::Exponential => {
            let prop = propagator(h, ops, t)?;
            unvectorize(&(prop * vectorize(rho0.matrix())), n)
        }
        _ => dormand_prince(rho0.matrix(), h, ops, t, opts)?,
    };
    let rho = DensityMatrix::from_matrix_unchecked(m);
    rho.check()?;
    Ok(rho)
}

/// `exp(L t)` on column-stacked density matrices.
///
/// The exponential is taken in a basis whose first coordinate is Tr ρ instead
/// of ρ₀₀. In that basis the generator's first row vanishes, so it is set to
/// exactly zero and the scaled Taylor series and squarings keep the trace
/// row at e₀ᵀ. A plain exponential lets rounding drift the trace by about
/// ε‖L‖t, which for long strongly driven segments crosses the hygiene bound.
pub fn propagator(h: &CMatrix, ops: &[CollapseOperator], t: f64) -> Result<CMatrix, LindbladError> {
    let n = h.nrows();
    let l = liouvillian(h, ops) * Complex64::new(t, 0.0);
    let d = n * n;
    let diag: Vec<usize> = (0..n).map(|i| i * (n + 1)).collect();

    // A = T L T⁻¹ with T adding every diagonal coordinate into coordinate 0.
    let mut a = l.clone();
    for k in 0..d {
        a[(0, k)] = diag.iter().map(|&ii| l[(ii, k)]).sum();
    }
    let scale = one_norm(&l).max(f64::MIN_POSITIVE);
    let leak = (0..d).map(|k| a[(0, k)].norm()).fold(0.0, f64::max);
    if leak > 1e-10 * scale {
        return Err(LindbladError::Domain(format!("generator does not preserve the trace (row residue {leak:e})")));
    }
    for k in 0..d {
        a[(0, k)] = Complex64::new(0.0, 0.0);
    }
    for &ii in &diag[1..] {
        for r in 0..d {
            let c0 = a[(r, 0)];
            a[(r, ii)] -= c0;
        }
    }

    let e = taylor_exp(&a);

    // P = T⁻¹ E T.
    let mut et = e.clone();
    for &ii in &diag[1..] {
        for r in 0..d {
            let c0 = e[(r, 0)];
            et[(r, ii)] += c0;
        }
    }
    let mut p = et.clone();
    for k in 0..d {
        let s: Complex64 = diag[1..].iter().map(|&ii| et[(ii, k)]).sum();
        p[(0, k)] = et[(0, k)] - s;
    }
    Ok(p)
}

fn one_norm(m: &CMatrix) -> f64 {
    m.column_iter().map(|c| c.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max)
}

/// Scaling and squaring with a degree-18 Taylor polynomial at ‖A‖₁ ≤ ½.
fn taylor_exp(a: &CMatrix) -> CMatrix {
    let d = a.nrows();
    let norm = one_norm(a);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let b = a * Complex64::new(0.5f64.powi(squarings), 0.0);
    let id = CMatrix::identity(d, d);
    // Horner form of Σ Bᵏ/k!.
    let mut e = id.clone();
    for k in (1..=18).rev() {
        e = &id + (&b * e) * Complex64::new(1.0 / k as f64, 0.0);
    }
    for _ in 0..squarings {
        e = &e * &e;
    }
    e
}

/// Samples ρ at every time in `times` (ascending, starting ≥ 0) by chaining
/// `evolve` between consecutive samples.
pub fn evolve_trajectory(
    rho0: &DensityMatrix,
    h: &CMatrix,
    ops: &[CollapseOperator],
    times: &[f64],
    opts: &EvolveOptions,
) -> Result<Vec<DensityMatrix>, LindbladError> {
    let mut out = Vec::with_capacity(times.len());
    let mut rho = rho0.clone();
    let mut now = 0.0;
    for &t in times {
        if t < now {
            return Err(LindbladError::Domain("sample times must be ascending".into()));
        }
        rho = evolve(&rho, h, ops, t - now, opts)?;
        now = t;
        out.push(rho.clone());
    }
    Ok(out)
}

/// Samples ρ on a uniform grid `k·dt`, `k = 0..=steps`, reusing one
/// exponential propagator.
pub fn evolve_uniform(
    rho0: &DensityMatrix,
    h: &CMatrix,
    ops: &[CollapseOperator],
    dt: f64,
    steps: usize,
) -> Result<Vec<DensityMatrix>, LindbladError> {
    let n = rho0.dim();
    let prop = propagator(h, ops, dt)?;
    let mut v = vectorize(rho0.matrix());
    let mut out = Vec::with_capacity(steps + 1);
    out.push(rho0.clone());
    for _ in 0..steps {
        v = &prop * v;
        let rho = DensityMatrix::from_matrix_unchecked(unvectorize(&v, n));
        rho.check()?;
        out.push(rho);
    }
    Ok(out)
}

// Dormand–Prince 5(4) tableau.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn dormand_prince(
    rho0: &CMatrix,
    h: &CMatrix,
    ops: &[CollapseOperator],
    t_end: f64,
    opts: &EvolveOptions,
) -> Result<CMatrix, LindbladError> {
    let mut y = rho0.clone();
    let mut t = 0.0;
    let scale = generator_scale(h, ops).max(1.0 / t_end);
    let mut dt = (0.1 / scale).min(t_end);
    let mut k: Vec<CMatrix> = vec![CMatrix::zeros(y.nrows(), y.ncols()); 7];
    k[0] = lindblad_rhs(&y, h, ops);
    let mut steps = 0;
    let mut last_err = 0.0;
    while t < t_end {
        if steps >= opts.max_steps {
            return Err(LindbladError::NonConvergence { achieved: last_err, time: t });
        }
        steps += 1;
        let step = dt.min(t_end - t);
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    ys += kj * Complex64::new(a * step, 0.0);
                }
            }
            k[s] = lindblad_rhs(&ys, h, ops);
        }
        let mut y5 = y.clone();
        let mut err_vec = CMatrix::zeros(y.nrows(), y.ncols());
        for s in 0..7 {
            if B5[s] != 0.0 {
                y5 += &k[s] * Complex64::new(B5[s] * step, 0.0);
            }
            let e = B5[s] - B4[s];
            if e != 0.0 {
                err_vec += &k[s] * Complex64::new(e * step, 0.0);
            }
        }
        let mut err: f64 = 0.0;
        for (idx, e) in err_vec.iter().enumerate() {
            let sc = opts.atol + opts.rtol * y[idx].norm().max(y5[idx].norm());
            err = err.max(e.norm() / sc);
        }
        last_err = err;
        if !err.is_finite() {
            return Err(LindbladError::NonConvergence { achieved: err, time: t });
        }
        if err <= 1.0 {
            t += step;
            y = y5;
            // FSAL: the seventh stage is the derivative at the new point.
            k[0] = k[6].clone();
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        dt = step * factor;
        if dt < 1e-14 * t_end {
            return Err(LindbladError::NonConvergence { achieved: err, time: t });
        }
    }
    Ok(y)
}

//! Angular-momentum algebra and the ¹⁷¹Yb⁺ S₁/₂ / P₁/₂ level model.
//!
//! Every coupling strength and decay branching used by the dynamics is
//! derived here from Clebsch–Gordan coefficients and Wigner 6j symbols, so
//! the rest of the crate never hard-codes a transition table.

use std::f64::consts::PI;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Planck constant (J s).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Speed of light (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AtomicError {
    #[error("angular momentum {0} is not a non-negative half-integer")]
    NotHalfInteger(f64),
    #[error("projection {0} is not a half-integer")]
    BadProjection(f64),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("level {0} is not a P1/2 level")]
    NotExcited(usize),
    #[error("level index {0} out of range")]
    BadLevel(usize),
}

/// A half-integer stored as twice its value, so triangle and parity checks
/// stay exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HalfInt(i32);

impl HalfInt {
    pub const fn from_doubled(twice: i32) -> Self {
        Self(twice)
    }

    pub const fn from_int(n: i32) -> Self {
        Self(2 * n)
    }

    /// Accepts any real that is an integer multiple of 1/2.
    pub fn from_f64(x: f64) -> Option<Self> {
        let d = 2.0 * x;
        let r = d.round();
        ((d - r).abs() < 1e-9 && r.abs() < i32::MAX as f64).then_some(Self(r as i32))
    }

    pub const fn doubled(self) -> i32 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 2.0
    }

    pub const fn is_integer(self) -> bool {
        self.0 % 2 == 0
    }
}

impl fmt::Display for HalfInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

fn ln_factorial(n: i32) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = vec![0.0; 512];
        for k in 1..t.len() {
            t[k] = t[k - 1] + (k as f64).ln();
        }
        t
    });
    debug_assert!(n >= 0);
    match table.get(n as usize) {
        Some(v) => *v,
        None => (1..=n).map(|k| (k as f64).ln()).sum(),
    }
}

/// Triangle rule on doubled values, including integer-perimeter parity.
fn triangle(a: i32, b: i32, c: i32) -> bool {
    a >= 0 && b >= 0 && c >= 0 && c <= a + b && a <= b + c && b <= a + c && (a + b + c) % 2 == 0
}

/// ln Δ(abc) on doubled values; assumes the triangle holds.
fn ln_delta(a: i32, b: i32, c: i32) -> f64 {
    0.5 * (ln_factorial((a + b - c) / 2) + ln_factorial((a - b + c) / 2)
        + ln_factorial((-a + b + c) / 2)
        - ln_factorial((a + b + c) / 2 + 1))
}

fn parse_j(x: f64) -> Result<HalfInt, AtomicError> {
    match HalfInt::from_f64(x) {
        Some(h) if h.doubled() >= 0 => Ok(h),
        _ => Err(AtomicError::NotHalfInteger(x)),
    }
}

/// Wigner 6j symbol `{j1 j2 j3; j4 j5 j6}` on doubled arguments.
///
/// Racah single-sum formula; each term is accumulated in log space.
pub fn wigner6j_doubled(j: [i32; 6]) -> f64 {
    let [j1, j2, j3, j4, j5, j6] = j;
    if !(triangle(j1, j2, j3) && triangle(j1, j5, j6) && triangle(j4, j2, j6) && triangle(j4, j5, j3))
    {
        return 0.0;
    }
    let a = [
        (j1 + j2 + j3) / 2,
        (j1 + j5 + j6) / 2,
        (j4 + j2 + j6) / 2,
        (j4 + j5 + j3) / 2,
    ];
    let b = [
        (j1 + j2 + j4 + j5) / 2,
        (j2 + j3 + j5 + j6) / 2,
        (j3 + j1 + j6 + j4) / 2,
    ];
    let prefactor = ln_delta(j1, j2, j3) + ln_delta(j1, j5, j6) + ln_delta(j4, j2, j6) + ln_delta(j4, j5, j3);
    let t_min = *a.iter().max().unwrap();
    let t_max = *b.iter().min().unwrap();
    let mut sum = 0.0;
    for t in t_min..=t_max {
        let ln_term = ln_factorial(t + 1)
            - a.iter().map(|&ai| ln_factorial(t - ai)).sum::<f64>()
            - b.iter().map(|&bi| ln_factorial(bi - t)).sum::<f64>();
        let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * (ln_term + prefactor).exp();
    }
    sum
}

/// Wigner 6j symbol `{j1 j2 j3; j4 j5 j6}`; zero whenever a triad fails the
/// triangle rule.
pub fn wigner6j(j1: f64, j2: f64, j3: f64, j4: f64, j5: f64, j6: f64) -> Result<f64, AtomicError> {
    let d = [j1, j2, j3, j4, j5, j6]
        .map(parse_j)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(wigner6j_doubled([
        d[0].doubled(),
        d[1].doubled(),
        d[2].doubled(),
        d[3].doubled(),
        d[4].doubled(),
        d[5].doubled(),
    ]))
}

/// Clebsch–Gordan coefficient `⟨j1 m1; j2 m2 | j m⟩` on doubled arguments,
/// Condon–Shortley phase.
pub fn clebsch_gordan_doubled(j1: i32, m1: i32, j2: i32, m2: i32, j: i32, m: i32) -> f64 {
    if m1 + m2 != m || !triangle(j1, j2, j) {
        return 0.0;
    }
    if m1.abs() > j1 || m2.abs() > j2 || m.abs() > j {
        return 0.0;
    }
    if (j1 + m1) % 2 != 0 || (j2 + m2) % 2 != 0 || (j + m) % 2 != 0 {
        return 0.0;
    }
    let h = |x: i32| x / 2;
    let ln_pre = 0.5
        * ((j as f64 + 1.0).ln() + ln_factorial(h(j + j1 - j2)) + ln_factorial(h(j - j1 + j2))
            + ln_factorial(h(j1 + j2 - j))
            - ln_factorial(h(j1 + j2 + j) + 1)
            + ln_factorial(h(j + m))
            + ln_factorial(h(j - m))
            + ln_factorial(h(j1 - m1))
            + ln_factorial(h(j1 + m1))
            + ln_factorial(h(j2 - m2))
            + ln_factorial(h(j2 + m2)));
    let k_min = 0.max(h(j2 - j - m1)).max(h(j1 + m2 - j));
    let k_max = h(j1 + j2 - j).min(h(j1 - m1)).min(h(j2 + m2));
    let mut sum = 0.0;
    for k in k_min..=k_max {
        let ln_den = ln_factorial(k)
            + ln_factorial(h(j1 + j2 - j) - k)
            + ln_factorial(h(j1 - m1) - k)
            + ln_factorial(h(j2 + m2) - k)
            + ln_factorial(h(j - j2 + m1) + k)
            + ln_factorial(h(j - j1 - m2) + k);
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * (ln_pre - ln_den).exp();
    }
    sum
}

/// Dipole coupling coefficient `⟨F,m_F | F′,m_F′; k,q⟩` as it appears in the
/// Wigner–Eckart reduction of `⟨F m_F|d_q|F′ m_F′⟩`.
///
/// Only rank `k = 1` is meaningful for electric-dipole couplings; anything
/// else, or `q` outside `{-1, 0, 1}`, returns zero.
pub fn clebsch_gordan(f: f64, mf: f64, fp: f64, mfp: f64, k: f64, q: f64) -> Result<f64, AtomicError> {
    let f = parse_j(f)?;
    let fp = parse_j(fp)?;
    let k = parse_j(k)?;
    let proj = |x: f64| HalfInt::from_f64(x).ok_or(AtomicError::BadProjection(x));
    let (mf, mfp, q) = (proj(mf)?, proj(mfp)?, proj(q)?);
    if k.doubled() != 2 || q.doubled().abs() > 2 || !q.is_integer() {
        return Ok(0.0);
    }
    Ok(clebsch_gordan_doubled(
        fp.doubled(),
        mfp.doubled(),
        k.doubled(),
        q.doubled(),
        f.doubled(),
        mf.doubled(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Manifold {
    S,
    P,
}

/// Hyperfine manifolds; rotating frames are assigned per manifold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HyperfineManifold {
    S0,
    S1,
    P0,
    P1,
}

impl HyperfineManifold {
    pub const ALL: [HyperfineManifold; 4] = [Self::S0, Self::S1, Self::P0, Self::P1];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Level {
    pub manifold: Manifold,
    pub f: i32,
    pub m: i32,
}

impl Level {
    pub fn hyperfine(&self) -> HyperfineManifold {
        match (self.manifold, self.f) {
            (Manifold::S, 0) => HyperfineManifold::S0,
            (Manifold::S, _) => HyperfineManifold::S1,
            (Manifold::P, 0) => HyperfineManifold::P0,
            (Manifold::P, _) => HyperfineManifold::P1,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.manifold {
            Manifold::S => "S1/2",
            Manifold::P => "P1/2",
        };
        write!(f, "{name}|F={},m={}⟩", self.f, self.m)
    }
}

/// |↓⟩ = S₁/₂|F=0, m=0⟩.
pub const DOWN: usize = 0;
/// |↑⟩ = S₁/₂|F=1, m=0⟩.
pub const UP: usize = 2;
pub const NUM_LEVELS: usize = 8;
pub const NUM_GROUND: usize = 4;

/// The eight S₁/₂ and P₁/₂ hyperfine/Zeeman levels of ¹⁷¹Yb⁺.
///
/// Ordering: |0⟩ S|0,0⟩, |1⟩ S|1,−1⟩, |2⟩ S|1,0⟩, |3⟩ S|1,+1⟩,
/// |4⟩ P|0,0⟩, |5⟩ P|1,−1⟩, |6⟩ P|1,0⟩, |7⟩ P|1,+1⟩.
/// All splittings are angular frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelScheme {
    pub levels: Vec<Level>,
    /// Ground F=1 Zeeman shift per unit m.
    pub zeeman_splitting: f64,
    /// Excited F′=1 Zeeman shift per unit m (g_F = 1/3 relative to the ground).
    pub p_zeeman_splitting: f64,
    pub hyperfine_splitting: f64,
    pub p_hyperfine_splitting: f64,
}

impl Default for LevelScheme {
    fn default() -> Self {
        Self::yb171()
    }
}

impl LevelScheme {
    pub fn yb171() -> Self {
        let zeeman = 2.0 * PI * 3.25e6;
        Self::with_splittings(zeeman, zeeman / 3.0, 2.0 * PI * 12.642_813e9, 2.0 * PI * 2.105e9)
    }

    pub fn with_splittings(zeeman: f64, p_zeeman: f64, hyperfine: f64, p_hyperfine: f64) -> Self {
        let level = |manifold, f, m| Level { manifold, f, m };
        let levels = vec![
            level(Manifold::S, 0, 0),
            level(Manifold::S, 1, -1),
            level(Manifold::S, 1, 0),
            level(Manifold::S, 1, 1),
            level(Manifold::P, 0, 0),
            level(Manifold::P, 1, -1),
            level(Manifold::P, 1, 0),
            level(Manifold::P, 1, 1),
        ];
        Self {
            levels,
            zeeman_splitting: zeeman,
            p_zeeman_splitting: p_zeeman,
            hyperfine_splitting: hyperfine,
            p_hyperfine_splitting: p_hyperfine,
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, i: usize) -> Result<&Level, AtomicError> {
        self.levels.get(i).ok_or(AtomicError::BadLevel(i))
    }

    pub fn ground_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.levels.len()).filter(|&i| self.levels[i].manifold == Manifold::S)
    }

    pub fn excited_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.levels.len()).filter(|&i| self.levels[i].manifold == Manifold::P)
    }

    /// Energy of manifold centre. The S F=1 centre is the zero; optical
    /// energies are measured from the P F′=0 level, so only differences
    /// against laser frequencies expressed the same way are meaningful.
    pub fn manifold_energy(&self, hf: HyperfineManifold) -> f64 {
        match hf {
            HyperfineManifold::S0 => -self.hyperfine_splitting,
            HyperfineManifold::S1 => 0.0,
            HyperfineManifold::P0 => 0.0,
            HyperfineManifold::P1 => self.p_hyperfine_splitting,
        }
    }

    /// Zeeman shift of level `i` relative to its manifold centre.
    pub fn zeeman_energy(&self, i: usize) -> f64 {
        let l = &self.levels[i];
        let zeeman = match l.manifold {
            Manifold::S => self.zeeman_splitting,
            Manifold::P => self.p_zeeman_splitting,
        };
        l.m as f64 * zeeman
    }

    pub fn level_energy(&self, i: usize) -> f64 {
        let l = &self.levels[i];
        let zeeman = match l.manifold {
            Manifold::S => self.zeeman_splitting,
            Manifold::P => self.p_zeeman_splitting,
        };
        self.manifold_energy(l.hyperfine()) + l.m as f64 * zeeman
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    Pi,
    SigmaPlus,
    SigmaMinus,
}

impl Polarization {
    pub fn from_q(q: i32) -> Option<Self> {
        match q {
            0 => Some(Self::Pi),
            1 => Some(Self::SigmaPlus),
            -1 => Some(Self::SigmaMinus),
            _ => None,
        }
    }

    pub fn q(self) -> i32 {
        match self {
            Self::Pi => 0,
            Self::SigmaPlus => 1,
            Self::SigmaMinus => -1,
        }
    }
}

/// Which optical line a transition belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpectralBranch {
    /// S F=1 → P F′=1 (optical pumping).
    D1To11,
    /// S F=1 → P F′=0 (cycling / detection).
    D1To10,
    /// S F=0 → P F′=1.
    F0ToF1,
    /// S F=0 → P F′=0, never dipole allowed.
    F0ToF0,
}

impl SpectralBranch {
    pub fn of(lower: &Level, upper: &Level) -> Self {
        match (lower.f, upper.f) {
            (1, 1) => Self::D1To11,
            (1, 0) => Self::D1To10,
            (0, 1) => Self::F0ToF1,
            _ => Self::F0ToF0,
        }
    }
}

/// Squared-coupling structure factor
/// `|⟨F m|F′ m′;1 q⟩|² (2F′+1)(2J+1){J J′ 1; F′ F I}² (2J_e+1)/(2J_g+1)`
/// for a ground level and an excited level (J = J′ = I = 1/2).
pub fn structural_factor(lower: &Level, upper: &Level) -> f64 {
    signed_structure(lower, upper).powi(2)
}

/// Signed square root of [`structural_factor`], carrying the
/// Clebsch–Gordan and 6j phases so interfering paths keep the correct sign.
pub fn signed_structure(lower: &Level, upper: &Level) -> f64 {
    if lower.manifold != Manifold::S || upper.manifold != Manifold::P {
        return 0.0;
    }
    let (j, jp, i) = (1, 1, 1); // doubled 1/2
    let (f, fp) = (2 * lower.f, 2 * upper.f);
    let (m, mp) = (2 * lower.m, 2 * upper.m);
    let cg = clebsch_gordan_doubled(fp, mp, 2, m - mp, f, m);
    if cg == 0.0 {
        return 0.0;
    }
    let sixj = wigner6j_doubled([j, jp, 2, fp, f, i]);
    // (-1)^(F'+J+1+I) with J = I = 1/2
    let phase = if (upper.f + 2) % 2 == 0 { 1.0 } else { -1.0 };
    let stat = ((fp + 1) as f64 * (j + 1) as f64 * (jp + 1) as f64 / (j + 1) as f64).sqrt();
    phase * cg * sixj * stat
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub lower: usize,
    pub upper: usize,
    pub polarization: Option<Polarization>,
    pub spectral_branch: SpectralBranch,
    pub allowed: bool,
}

impl Transition {
    pub fn new(scheme: &LevelScheme, lower: usize, upper: usize) -> Result<Self, AtomicError> {
        let lo = scheme.level(lower)?;
        let up = scheme.level(upper)?;
        if up.manifold != Manifold::P {
            return Err(AtomicError::NotExcited(upper));
        }
        let polarization = Polarization::from_q(up.m - lo.m);
        let allowed = polarization.is_some() && structural_factor(lo, up) > 1e-12;
        Ok(Self {
            lower,
            upper,
            polarization,
            spectral_branch: SpectralBranch::of(lo, up),
            allowed,
        })
    }

    /// Every (ground, excited) pair of the scheme, allowed or not.
    pub fn all(scheme: &LevelScheme) -> Vec<Transition> {
        let mut out = Vec::new();
        for g in scheme.ground_indices() {
            for e in scheme.excited_indices() {
                out.push(Transition::new(scheme, g, e).expect("indices from scheme"));
            }
        }
        out
    }
}

/// Natural linewidth, wavelength and the derived saturation intensity of
/// the S₁/₂ ↔ P₁/₂ line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinewidthParams {
    /// Spontaneous decay rate Γ (rad/s).
    pub gamma: f64,
    /// Wavelength λ (m).
    pub wavelength: f64,
    /// I_sat = πΓhc/(3λ³) (W/m²).
    pub i_sat: f64,
}

impl Default for LinewidthParams {
    fn default() -> Self {
        Self::yb171()
    }
}

impl LinewidthParams {
    pub fn new(gamma: f64, wavelength: f64) -> Result<Self, AtomicError> {
        let i_sat = saturation_intensity(gamma, wavelength)?;
        Ok(Self { gamma, wavelength, i_sat })
    }

    /// Γ = 2π × 19.6 MHz, λ = 369.5 nm.
    pub fn yb171() -> Self {
        Self::new(2.0 * PI * 19.6e6, 369.5e-9).expect("positive constants")
    }

    pub fn photon_energy(&self) -> f64 {
        PLANCK * SPEED_OF_LIGHT / self.wavelength
    }
}

pub fn saturation_intensity(gamma: f64, wavelength: f64) -> Result<f64, AtomicError> {
    if !(gamma > 0.0) {
        return Err(AtomicError::NonPositive { name: "gamma", value: gamma });
    }
    if !(wavelength > 0.0) {
        return Err(AtomicError::NonPositive { name: "wavelength", value: wavelength });
    }
    Ok(PI * gamma * SPEED_OF_LIGHT * PLANCK / (3.0 * wavelength.powi(3)))
}

/// Rabi frequency of one polarization component of intensity
/// `intensity_sat` (in units of I_sat) on `transition`.
///
/// `Ω² = (I/I_sat)(Γ²/2)·factor`, which is `(I/I_sat)Γ²/6` for every allowed
/// S₁/₂ ↔ P₁/₂ line. Forbidden transitions give zero.
pub fn rabi_frequency(
    scheme: &LevelScheme,
    intensity_sat: f64,
    transition: &Transition,
    params: &LinewidthParams,
) -> f64 {
    signed_rabi_frequency(scheme, intensity_sat, transition, params).abs()
}

pub(crate) fn signed_rabi_frequency(
    scheme: &LevelScheme,
    intensity_sat: f64,
    transition: &Transition,
    params: &LinewidthParams,
) -> f64 {
    if !transition.allowed || intensity_sat <= 0.0 {
        return 0.0;
    }
    let lo = &scheme.levels[transition.lower];
    let up = &scheme.levels[transition.upper];
    params.gamma * (intensity_sat / 2.0).sqrt() * signed_structure(lo, up)
}

/// Partial decay rates out of an excited level, proportional to the squared
/// dipole coupling and normalised so they sum to Γ.
pub fn decay_branching(
    scheme: &LevelScheme,
    upper: usize,
    params: &LinewidthParams,
) -> Result<Vec<(usize, f64)>, AtomicError> {
    let up = scheme.level(upper)?;
    if up.manifold != Manifold::P {
        return Err(AtomicError::NotExcited(upper));
    }
    let weights: Vec<(usize, f64)> = scheme
        .ground_indices()
        .map(|g| (g, structural_factor(&scheme.levels[g], up)))
        .filter(|(_, w)| *w > 1e-12)
        .collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    Ok(weights
        .into_iter()
        .map(|(g, w)| (g, params.gamma * w / total))
        .collect())
}

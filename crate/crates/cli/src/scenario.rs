//! Scenario files: experiment name, config overrides, sweep axes.
//!
//! The config is resolved in three layers: built-in defaults, the
//! experiment's own defaults, then the file's `config` object. Merging is
//! done on JSON values so every key the user writes can be checked against
//! a path that really exists.

use std::f64::consts::PI;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use aqm_core::crosstalk::{BeamGeometry, ChainGeometry, PsfOptions};
use aqm_core::lindblad::ProbeBeam;
use aqm_core::protocols::RamseyModel;

use crate::experiments::{self, Experiment};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub chain: ChainConfig,
    pub beam: BeamConfig,
    pub crosstalk: CrosstalkConfig,
    pub detection_beam: ProbeConfig,
    pub reset_beam: ProbeConfig,
    pub detection: DetectionConfig,
    pub ramsey: RamseyConfig,
    pub bloch: BlochConfig,
    pub holography: HolographyConfig,
    pub phase_sense: PhaseSenseConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Ion spacing a (m).
    pub spacing: f64,
    /// Angle between B and the chain axis (rad).
    pub b_field_angle: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub waist: f64,
    pub na: f64,
    /// Distance from the beam centre to the asset ion, in waists.
    pub offset_waists: f64,
    pub psf_truncate: bool,
    pub psf_tolerance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrosstalkConfig {
    /// Relative intensity I_X of the process beam at the asset ion.
    pub i_x: f64,
}

/// A beam's polarization and spectral split. Either σ share left as null
/// takes half of whatever π and the other σ share leave.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub intensity_sat: f64,
    pub pi_fraction: f64,
    pub sigma_plus_fraction: Option<f64>,
    pub sigma_minus_fraction: Option<f64>,
    pub d1_11_fraction: f64,
    pub detuning: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    pub efficiency: f64,
    /// Detection (or illumination) time τ_d.
    pub tau: f64,
    /// Upper end of the τ_opt search.
    pub t_max: f64,
    pub first_photon: bool,
    /// Rates left null are taken from the simulated detection beam.
    pub r_o: Option<f64>,
    pub r_b: Option<f64>,
    pub r_d: Option<f64>,
    pub r_bg: f64,
    pub trials: u64,
    pub one_way: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RamseyConfig {
    pub wait: f64,
    /// Microwave detuning (rad/s).
    pub detuning: f64,
    pub model: RamseyModel,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlochConfig {
    pub theta: f64,
    pub model: RamseyModel,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolographyConfig {
    pub grid: u64,
    pub iterations: u64,
    /// Target spot position, in waists from the optical axis.
    pub offset_waists: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSenseConfig {
    pub grid: u64,
    /// Pupil phase of patch b relative to patch a (rad).
    pub injected: f64,
    pub phase_steps: u64,
    /// Patch centres and radius in hologram pixels from the grid centre.
    pub patch_a: [f64; 2],
    pub patch_b: [f64; 2],
    pub patch_radius: f64,
    pub aperture_radius: f64,
    pub beam_radius: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            chain: ChainConfig { spacing: 6e-6, b_field_angle: PI / 2.0 },
            beam: BeamConfig { waist: 1.5e-6, na: 0.16, offset_waists: 4.0, psf_truncate: true, psf_tolerance: 1e-4 },
            crosstalk: CrosstalkConfig { i_x: 5e-5 },
            detection_beam: ProbeConfig {
                intensity_sat: 1.0,
                pi_fraction: 1.0 / 3.0,
                sigma_plus_fraction: None,
                sigma_minus_fraction: None,
                d1_11_fraction: 0.0,
                detuning: 0.0,
            },
            reset_beam: ProbeConfig {
                intensity_sat: 1.0,
                pi_fraction: 0.86,
                sigma_plus_fraction: None,
                sigma_minus_fraction: None,
                d1_11_fraction: 1.0,
                detuning: 0.0,
            },
            detection: DetectionConfig {
                efficiency: 0.04,
                tau: 11e-6,
                t_max: 500e-6,
                first_photon: true,
                r_o: None,
                r_b: None,
                r_d: None,
                r_bg: 0.0,
                trials: 100_000,
                one_way: true,
            },
            ramsey: RamseyConfig { wait: 100e-6, detuning: 2.0 * PI * 10e3, model: RamseyModel::Reduced },
            bloch: BlochConfig { theta: 0.0, model: RamseyModel::Full },
            holography: HolographyConfig { grid: 1024, iterations: 30, offset_waists: 4.0 },
            phase_sense: PhaseSenseConfig {
                grid: 512,
                injected: 1.0,
                phase_steps: 16,
                patch_a: [-30.0, 10.0],
                patch_b: [25.0, -20.0],
                patch_radius: 15.0,
                aperture_radius: 64.0,
                beam_radius: 96.0,
            },
        }
    }
}

impl ProbeConfig {
    /// σ shares with nulls filled in.
    pub fn sigma_fractions(&self) -> (f64, f64) {
        match (self.sigma_plus_fraction, self.sigma_minus_fraction) {
            (Some(p), Some(m)) => (p, m),
            (Some(p), None) => (p, 1.0 - self.pi_fraction - p),
            (None, Some(m)) => (1.0 - self.pi_fraction - m, m),
            (None, None) => ((1.0 - self.pi_fraction) / 2.0, (1.0 - self.pi_fraction) / 2.0),
        }
    }

    pub fn probe(&self) -> Result<ProbeBeam, String> {
        let (sp, sm) = self.sigma_fractions();
        ProbeBeam::new(self.intensity_sat, self.pi_fraction, sp, sm, self.d1_11_fraction, self.detuning)
            .map_err(|e| e.to_string())
    }

    fn check(&self, at: &str, out: &mut Vec<Diagnostic>) {
        nonneg(out, &format!("{at}.intensity_sat"), self.intensity_sat);
        unit(out, &format!("{at}.pi_fraction"), self.pi_fraction);
        unit(out, &format!("{at}.d1_11_fraction"), self.d1_11_fraction);
        finite(out, &format!("{at}.detuning"), self.detuning);
        let (sp, sm) = self.sigma_fractions();
        for (name, given, v) in
            [("sigma_plus_fraction", self.sigma_plus_fraction, sp), ("sigma_minus_fraction", self.sigma_minus_fraction, sm)]
        {
            if given.is_some() {
                unit(out, &format!("{at}.{name}"), v);
            }
        }
        let sum = self.pi_fraction + sp + sm;
        if (sum - 1.0).abs() > 1e-9 || sp < -1e-12 || sm < -1e-12 {
            out.push(Diagnostic::new(
                format!("{at}.pi_fraction"),
                format!(
                    "polarization fractions pi_fraction + sigma_plus_fraction + sigma_minus_fraction = {sum} \
                     (σ+ {sp}, σ− {sm}); they must be non-negative and sum to 1"
                ),
            ));
        }
    }
}

impl Config {
    pub fn chain(&self) -> ChainGeometry {
        ChainGeometry { spacing: self.chain.spacing, b_field_angle: self.chain.b_field_angle }
    }

    /// Beam geometry with the asset at `offset_waists` from the centre.
    pub fn beam_geometry(&self) -> BeamGeometry {
        BeamGeometry {
            waist: self.beam.waist,
            offset: self.beam.offset_waists * self.beam.waist,
            na: self.beam.na,
            fov_offset: 0.0,
        }
    }

    pub fn psf_options(&self) -> PsfOptions {
        PsfOptions { truncate: self.beam.psf_truncate, tolerance: self.beam.psf_tolerance, ..Default::default() }
    }

    /// Physics-range checks.
    pub fn check(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let d = &mut out;
        positive(d, "chain.spacing", self.chain.spacing);
        finite(d, "chain.b_field_angle", self.chain.b_field_angle);
        positive(d, "beam.waist", self.beam.waist);
        if !(self.beam.na > 0.0 && self.beam.na < 1.0) {
            d.push(Diagnostic::new("beam.na", format!("numerical aperture {} must lie in (0, 1)", self.beam.na)));
        }
        nonneg(d, "beam.offset_waists", self.beam.offset_waists);
        positive(d, "beam.psf_tolerance", self.beam.psf_tolerance);
        nonneg(d, "crosstalk.i_x", self.crosstalk.i_x);
        self.detection_beam.check("detection_beam", d);
        self.reset_beam.check("reset_beam", d);

        let det = &self.detection;
        if !(det.efficiency > 0.0 && det.efficiency <= 1.0) {
            d.push(Diagnostic::new("detection.efficiency", format!("efficiency {} must lie in (0, 1]", det.efficiency)));
        }
        nonneg(d, "detection.tau", det.tau);
        positive(d, "detection.t_max", det.t_max);
        for (name, r) in [("r_o", det.r_o), ("r_b", det.r_b), ("r_d", det.r_d)] {
            if let Some(r) = r {
                nonneg(d, &format!("detection.{name}"), r);
            }
        }
        nonneg(d, "detection.r_bg", det.r_bg);
        if det.trials == 0 {
            d.push(Diagnostic::new("detection.trials", "need at least one trial"));
        }

        nonneg(d, "ramsey.wait", self.ramsey.wait);
        finite(d, "ramsey.detuning", self.ramsey.detuning);
        finite(d, "bloch.theta", self.bloch.theta);

        grid(d, "holography.grid", self.holography.grid);
        if self.holography.iterations == 0 {
            d.push(Diagnostic::new("holography.iterations", "need at least one iteration"));
        }
        positive(d, "holography.offset_waists", self.holography.offset_waists);

        let ps = &self.phase_sense;
        grid(d, "phase_sense.grid", ps.grid);
        finite(d, "phase_sense.injected", ps.injected);
        if ps.phase_steps < 3 {
            d.push(Diagnostic::new("phase_sense.phase_steps", "a sinusoid fit needs at least 3 phase steps"));
        }
        positive(d, "phase_sense.patch_radius", ps.patch_radius);
        positive(d, "phase_sense.aperture_radius", ps.aperture_radius);
        positive(d, "phase_sense.beam_radius", ps.beam_radius);
        for (name, c) in [("patch_a", ps.patch_a), ("patch_b", ps.patch_b)] {
            if c[0].hypot(c[1]) + ps.patch_radius > ps.aperture_radius {
                d.push(Diagnostic::new(format!("phase_sense.{name}"), "patch extends outside the aperture"));
            }
        }
        out
    }
}

fn finite(out: &mut Vec<Diagnostic>, path: &str, v: f64) {
    if !v.is_finite() {
        out.push(Diagnostic::new(path, format!("{v} is not finite")));
    }
}

fn positive(out: &mut Vec<Diagnostic>, path: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        out.push(Diagnostic::new(path, format!("{v} must be positive")));
    }
}

fn nonneg(out: &mut Vec<Diagnostic>, path: &str, v: f64) {
    if !(v >= 0.0 && v.is_finite()) {
        out.push(Diagnostic::new(path, format!("{v} must be ≥ 0")));
    }
}

fn unit(out: &mut Vec<Diagnostic>, path: &str, v: f64) {
    if !(0.0..=1.0).contains(&v) {
        out.push(Diagnostic::new(path, format!("{v} must lie in [0, 1]")));
    }
}

fn grid(out: &mut Vec<Diagnostic>, path: &str, n: u64) {
    if n < 64 || n % 2 != 0 || n > 8192 {
        out.push(Diagnostic::new(path, format!("grid size {n} must be even and within [64, 8192]")));
    }
}

/// One sweep axis as written in the scenario file. Exactly one of
/// `values`, `linspace` and `logspace` is given.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisSpec {
    path: String,
    values: Option<Vec<f64>>,
    linspace: Option<Range>,
    logspace: Option<Range>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Range {
    start: f64,
    stop: f64,
    points: usize,
    #[serde(default = "yes")]
    endpoint: bool,
}

fn yes() -> bool {
    true
}

impl Range {
    fn linear(&self) -> Vec<f64> {
        let n = self.points;
        let div = if self.endpoint { n.saturating_sub(1).max(1) } else { n.max(1) };
        (0..n).map(|k| tidy(self.start + (self.stop - self.start) * k as f64 / div as f64)).collect()
    }
}

/// Rounds to 12 significant digits, so generated grids print as written
/// (0.4 rather than 0.39999999999999997).
fn tidy(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.11e}").parse().expect("formatted float parses")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    experiment: String,
    seed: Option<u64>,
    output: Option<PathBuf>,
    #[serde(default)]
    config: Map<String, Value>,
    sweep: Option<Vec<AxisSpec>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Axis {
    pub path: String,
    /// CSV column heading.
    pub column: String,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn new(path: &str, column: &str, values: Vec<f64>) -> Self {
        Self { path: path.into(), column: column.into(), values }
    }
}

pub fn linspace(start: f64, stop: f64, points: usize) -> Vec<f64> {
    Range { start, stop, points, endpoint: true }.linear()
}

pub fn logspace(start: f64, stop: f64, points: usize) -> Vec<f64> {
    linspace(start.log10(), stop.log10(), points).into_iter().map(|e| tidy(10f64.powf(e))).collect()
}

/// A scenario with every default filled in, ready to run.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub experiment: &'static Experiment,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Resolved config before any sweep value is applied.
    pub base: Value,
    pub axes: Vec<Axis>,
}

impl Scenario {
    /// Parses and checks a scenario. All problems found are returned
    /// together.
    pub fn parse(text: &str) -> Result<Scenario, Vec<Diagnostic>> {
        let raw: Value = serde_json::from_str(text)
            .map_err(|e| vec![Diagnostic::new("", format!("invalid JSON at line {}, column {}: {e}", e.line(), e.column()))])?;
        let file: ScenarioFile = serde_json::from_value(raw).map_err(|e| vec![Diagnostic::new("", e.to_string())])?;

        let mut diags = Vec::new();
        let Some(experiment) = experiments::find(&file.experiment) else {
            let names: Vec<&str> = experiments::ALL.iter().map(|e| e.name).collect();
            return Err(vec![Diagnostic::new(
                "experiment",
                format!("unknown experiment {:?}; known: {}", file.experiment, names.join(", ")),
            )]);
        };

        let mut base = serde_json::to_value(Config::default()).expect("config serializes");
        merge(&mut base, &(experiment.defaults)(), "config", &mut Vec::new());
        merge(&mut base, &Value::Object(file.config), "config", &mut diags);

        let axes = match file.sweep {
            None => (experiment.axes)(),
            Some(specs) => {
                let defaults = (experiment.axes)();
                specs
                    .into_iter()
                    .enumerate()
                    .filter_map(|(i, s)| resolve_axis(s, i, &defaults, &mut diags))
                    .collect()
            }
        };
        let mut seen = std::collections::HashSet::new();
        for (i, axis) in axes.iter().enumerate() {
            if !seen.insert(&axis.path) {
                diags.push(Diagnostic::new(format!("sweep[{i}].path"), format!("{} is swept twice", axis.path)));
            }
            match lookup(&base, &axis.path) {
                None => diags.push(Diagnostic::new(
                    format!("sweep[{i}].path"),
                    format!("config has no parameter {:?}", axis.path),
                )),
                Some(v) if !(v.is_number() || v.is_null()) => diags.push(Diagnostic::new(
                    format!("sweep[{i}].path"),
                    format!("{:?} is not a numeric parameter", axis.path),
                )),
                Some(v) if v.is_u64() => {
                    if axis.values.iter().any(|x| !(x.fract() == 0.0 && *x >= 0.0)) {
                        diags.push(Diagnostic::new(
                            format!("sweep[{i}]"),
                            format!("{:?} takes non-negative integers", axis.path),
                        ));
                    }
                }
                Some(_) => {}
            }
        }
        if !diags.is_empty() {
            return Err(diags);
        }

        let scenario = Scenario { experiment, seed: file.seed.unwrap_or(0), output: file.output, base, axes };
        // Every sweep point must be a valid config on its own.
        let mut found: Vec<Diagnostic> = Vec::new();
        for k in 0..scenario.len() {
            let point = scenario.point_value(k);
            let problems = match serde_json::from_value::<Config>(point) {
                Ok(cfg) => cfg.check(),
                Err(e) => vec![Diagnostic::new("config", e.to_string())],
            };
            for mut p in problems {
                if scenario.len() > 1 {
                    p.message = format!("{} (sweep point {k}: {})", p.message, scenario.describe_point(k));
                }
                if !found.iter().any(|f| f.path == p.path) {
                    found.push(p);
                }
            }
        }
        if found.is_empty() {
            Ok(scenario)
        } else {
            for f in &mut found {
                f.path = format!("config.{}", f.path);
            }
            Err(found)
        }
    }

    /// Number of sweep points: the product of the axis lengths.
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Axis values of point `k`; the first axis varies slowest.
    pub fn coordinates(&self, mut k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (i, axis) in self.axes.iter().enumerate().rev() {
            let n = axis.values.len();
            out[i] = axis.values[k % n];
            k /= n;
        }
        out
    }

    fn describe_point(&self, k: usize) -> String {
        self.axes
            .iter()
            .zip(self.coordinates(k))
            .map(|(a, v)| format!("{} = {v}", a.path))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn point_value(&self, k: usize) -> Value {
        let mut v = self.base.clone();
        for (axis, x) in self.axes.iter().zip(self.coordinates(k)) {
            let slot = lookup_mut(&mut v, &axis.path).expect("checked at parse time");
            *slot = if slot.is_u64() { Value::from(x as u64) } else { Value::from(x) };
        }
        v
    }

    pub fn config_at(&self, k: usize) -> Config {
        serde_json::from_value(self.point_value(k)).expect("checked at parse time")
    }

    /// Canonical JSON of everything that determines the output.
    pub fn canonical(&self) -> Value {
        serde_json::json!({
            "experiment": self.experiment.name,
            "seed": self.seed,
            "config": self.base,
            "sweep": self.axes,
        })
    }
}

fn resolve_axis(s: AxisSpec, i: usize, defaults: &[Axis], diags: &mut Vec<Diagnostic>) -> Option<Axis> {
    let at = format!("sweep[{i}]");
    let given = [s.values.is_some(), s.linspace.is_some(), s.logspace.is_some()];
    if given.iter().filter(|g| **g).count() != 1 {
        diags.push(Diagnostic::new(at, "give exactly one of values, linspace, logspace"));
        return None;
    }
    let values = if let Some(v) = s.values {
        v
    } else if let Some(r) = s.linspace {
        r.linear()
    } else {
        let r = s.logspace.expect("one is set");
        if !(r.start > 0.0 && r.stop > 0.0) {
            diags.push(Diagnostic::new(format!("{at}.logspace"), "logspace bounds must be positive"));
            return None;
        }
        Range { start: r.start.log10(), stop: r.stop.log10(), ..r }.linear().into_iter().map(|e| tidy(10f64.powf(e))).collect()
    };
    if values.is_empty() {
        diags.push(Diagnostic::new(at, "sweep grid is empty"));
        return None;
    }
    if values.iter().any(|v| !v.is_finite()) {
        diags.push(Diagnostic::new(at, "sweep values must be finite"));
        return None;
    }
    let path = s.path.strip_prefix("config.").unwrap_or(&s.path).to_string();
    let column = defaults.iter().find(|a| a.path == path).map_or(path.clone(), |a| a.column.clone());
    Some(Axis { path, column, values })
}

/// Overlays `patch` on `base`. Keys missing from `base` and values of the
/// wrong kind are reported rather than merged.
fn merge(base: &mut Value, patch: &Value, at: &str, diags: &mut Vec<Diagnostic>) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = format!("{at}.{k}");
                match b.get_mut(k) {
                    None => diags.push(Diagnostic::new(path, "unknown parameter")),
                    Some(slot) => merge(slot, v, &path, diags),
                }
            }
        }
        (slot, p) => {
            let fits = match (&*slot, p) {
                (Value::Null, _) | (_, Value::Null) => true,
                (Value::Number(_), Value::Number(_)) => true,
                (Value::Bool(_), Value::Bool(_)) => true,
                (Value::String(_), Value::String(_)) => true,
                (Value::Array(a), Value::Array(b)) => a.len() == b.len(),
                _ => false,
            };
            if fits {
                *slot = p.clone();
            } else {
                diags.push(Diagnostic::new(at, format!("expected a value like {slot}, got {p}")));
            }
        }
    }
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |v, k| v.as_object()?.get(k))
}

fn lookup_mut<'a>(v: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    path.split('.').try_fold(v, |v, k| v.as_object_mut()?.get_mut(k))
}

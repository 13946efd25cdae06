//! Least-squares fitting, resampling statistics and CSV tables.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum FitError {
    #[error("fit did not converge after {iterations} iterations (residual norm {residual:e})")]
    NonConvergence { iterations: usize, residual: f64, best: Box<FitResult> },
    #[error("rank-deficient Jacobian: parameters {0:?} are not identifiable")]
    RankDeficient(Vec<String>),
    #[error("not enough data: need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("statistic failed on {0} consecutive resamples")]
    ResampleExhausted(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// √(Σ rᵢ²), weighted when per-point σ are supplied.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Non-fatal diagnostics such as a parameter pinned at a bound.
    pub flags: Vec<String>,
}

impl FitResult {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.params[i])
    }

    pub fn error(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.std_errors[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop once the relative reduction of the cost falls below this.
    pub ftol: f64,
    /// Stop once the relative parameter step falls below this.
    pub xtol: f64,
    pub initial_lambda: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 500, ftol: 1e-15, xtol: 1e-12, initial_lambda: 1e-3 }
    }
}

/// A model `y = f(x; p)` with an optional analytic gradient in `p`.
pub trait Model {
    fn names(&self) -> Vec<String>;
    fn eval(&self, p: &[f64], x: f64) -> f64;
    /// Writes ∂f/∂p into `out`; returns false to request finite differences.
    fn gradient(&self, _p: &[f64], _x: f64, _out: &mut [f64]) -> bool {
        false
    }
    /// Maps an unconstrained step back onto valid parameters.
    fn project(&self, _p: &mut [f64]) {}
}

fn jacobian<M: Model + ?Sized>(model: &M, p: &[f64], xs: &[f64], w: &[f64]) -> DMatrix<f64> {
    let n = xs.len();
    let k = p.len();
    let mut j = DMatrix::zeros(n, k);
    let mut g = vec![0.0; k];
    let mut pp = p.to_vec();
    for (i, &x) in xs.iter().enumerate() {
        if model.gradient(p, x, &mut g) {
            for c in 0..k {
                j[(i, c)] = g[c] * w[i];
            }
        } else {
            for c in 0..k {
                let h = 1e-6 * p[c].abs().max(1e-6);
                pp[c] = p[c] + h;
                let fp = model.eval(&pp, x);
                pp[c] = p[c] - h;
                let fm = model.eval(&pp, x);
                pp[c] = p[c];
                j[(i, c)] = (fp - fm) / (2.0 * h) * w[i];
            }
        }
    }
    j
}

fn residuals<M: Model + ?Sized>(model: &M, p: &[f64], xs: &[f64], ys: &[f64], w: &[f64]) -> DVector<f64> {
    DVector::from_iterator(xs.len(), xs.iter().zip(ys).zip(w).map(|((&x, &y), &wi)| (y - model.eval(p, x)) * wi))
}

/// Levenberg–Marquardt with Marquardt diagonal scaling.
///
/// Per-point `sigmas` weight the residuals; without them the covariance is
/// scaled by the residual variance.
pub fn levenberg_marquardt<M: Model + ?Sized>(
    model: &M,
    xs: &[f64],
    ys: &[f64],
    sigmas: Option<&[f64]>,
    p0: &[f64],
    opts: &LmOptions,
) -> Result<FitResult, FitError> {
    let n = xs.len();
    let k = p0.len();
    if ys.len() != n {
        return Err(FitError::InvalidData("x and y lengths differ".into()));
    }
    if n < k {
        return Err(FitError::TooFewSamples { need: k, got: n });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(FitError::InvalidData("non-finite sample".into()));
    }
    let w: Vec<f64> = match sigmas {
        Some(s) if s.len() == n && s.iter().all(|&v| v > 0.0) => s.iter().map(|v| 1.0 / v).collect(),
        Some(_) => return Err(FitError::InvalidData("sigmas must be positive, one per sample".into())),
        None => vec![1.0; n],
    };
    let names = model.names();
    let mut p = p0.to_vec();
    model.project(&mut p);
    let mut r = residuals(model, &p, xs, ys, &w);
    let mut cost = r.norm_squared();
    let mut lambda = opts.initial_lambda;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let j = jacobian(model, &p, xs, &w);
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let mut improved = false;
        let mut small_step = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..k {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            model.project(&mut trial);
            let rt = residuals(model, &trial, xs, ys, &w);
            let ct = rt.norm_squared();
            if ct.is_finite() && ct <= cost {
                let rel_step = step
                    .iter()
                    .zip(&p)
                    .map(|(s, v)| s.abs() / (v.abs() + 1e-12))
                    .fold(0.0, f64::max);
                let rel_cost = (cost - ct) / cost.max(1e-300);
                p = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                small_step = rel_step < opts.xtol || rel_cost < opts.ftol;
                break;
            }
            lambda *= 4.0;
        }
        if !improved || small_step {
            converged = true;
            break;
        }
        if cost == 0.0 {
            converged = true;
            break;
        }
    }

    let j = jacobian(model, &p, xs, &w);
    let jtj = j.transpose() * &j;
    let scale = if sigmas.is_some() || n == k { 1.0 } else { cost / (n - k) as f64 };
    if jtj.iter().any(|v| !v.is_finite()) {
        return Err(FitError::RankDeficient(names));
    }
    // Condition is judged on the unit-free correlation form of JᵀJ so that
    // parameters with very different scales are not mistaken for degenerate.
    let diag: Vec<f64> = (0..k).map(|c| jtj[(c, c)]).collect();
    let zero: Vec<String> = (0..k).filter(|&c| !(diag[c] > 0.0)).map(|c| names[c].clone()).collect();
    if !zero.is_empty() {
        return Err(FitError::RankDeficient(zero));
    }
    let scaled = DMatrix::from_fn(k, k, |a, b| jtj[(a, b)] / (diag[a] * diag[b]).sqrt());
    let svd = scaled.clone().svd(true, true);
    let (imin, smin) = svd.singular_values.argmin();
    if smin < 1e-13 * svd.singular_values.max() {
        let v_t = svd.v_t.as_ref().expect("requested V");
        let null = v_t.row(imin);
        let involved = (0..k).filter(|&c| null[c].abs() > 0.1).map(|c| names[c].clone()).collect();
        return Err(FitError::RankDeficient(involved));
    }
    let inv = scaled.try_inverse().ok_or_else(|| FitError::RankDeficient(names.clone()))?;
    let cov = DMatrix::from_fn(k, k, |a, b| inv[(a, b)] / (diag[a] * diag[b]).sqrt() * scale);
    let std_errors = (0..k).map(|c| cov[(c, c)].max(0.0).sqrt()).collect();
    let result = FitResult {
        names,
        params: p,
        std_errors,
        covariance: cov,
        residual_norm: cost.sqrt(),
        iterations,
        converged,
        flags: Vec::new(),
    };
    if !converged {
        return Err(FitError::NonConvergence { iterations, residual: cost.sqrt(), best: Box::new(result) });
    }
    Ok(result)
}

/// `f(x) = A·e^{−x/τ} + C`, with `C` held at zero unless `with_offset`.
pub struct ExponentialDecay {
    pub with_offset: bool,
}

impl Model for ExponentialDecay {
    fn names(&self) -> Vec<String> {
        let mut n = vec!["amplitude".to_string(), "tau".to_string()];
        if self.with_offset {
            n.push("offset".into());
        }
        n
    }
    fn eval(&self, p: &[f64], x: f64) -> f64 {
        p[0] * (-x / p[1]).exp() + if self.with_offset { p[2] } else { 0.0 }
    }
    fn gradient(&self, p: &[f64], x: f64, out: &mut [f64]) -> bool {
        let e = (-x / p[1]).exp();
        out[0] = e;
        out[1] = p[0] * e * x / (p[1] * p[1]);
        if self.with_offset {
            out[2] = 1.0;
        }
        true
    }
    fn project(&self, p: &mut [f64]) {
        p[1] = p[1].max(1e-300);
    }
}

/// Fits `A·e^{−x/τ}` starting from a log-linear regression.
pub fn fit_exponential_decay(xs: &[f64], ys: &[f64], sigmas: Option<&[f64]>) -> Result<FitResult, FitError> {
    if xs.len() < 3 {
        return Err(FitError::TooFewSamples { need: 3, got: xs.len() });
    }
    let (slope, intercept) = log_linear(xs, ys).ok_or_else(|| FitError::InvalidData("no positive samples".into()))?;
    let tau0 = if slope < 0.0 { -1.0 / slope } else { 10.0 * (xs[xs.len() - 1] - xs[0]).abs().max(1e-300) };
    let model = ExponentialDecay { with_offset: false };
    let mut fit = levenberg_marquardt(&model, xs, ys, sigmas, &[intercept.exp(), tau0], &LmOptions::default())?;
    let span = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if fit.params[1] > 10.0 * span {
        fit.flags.push("tau exceeds ten times the sampled window".into());
    }
    Ok(fit)
}

/// Least-squares line through `(x, ln y)` over the positive samples.
pub fn log_linear(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(_, &y)| y > 0.0).map(|(&x, &y)| (x, y.ln())).collect();
    linear_regression(&pts)
}

fn linear_regression(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Decaying Ramsey fringe
/// `sin²(ωT+φ)·α·e^{−T/T₂} + β(1 − e^{−T/T₂}) + C`.
pub struct RamseyDecay;

impl RamseyDecay {
    pub const NAMES: [&'static str; 6] = ["t2", "alpha", "beta", "phi", "c", "omega"];
}

impl Model for RamseyDecay {
    fn names(&self) -> Vec<String> {
        Self::NAMES.iter().map(|s| s.to_string()).collect()
    }
    fn eval(&self, p: &[f64], t: f64) -> f64 {
        let [t2, alpha, beta, phi, c, omega] = [p[0], p[1], p[2], p[3], p[4], p[5]];
        let e = (-t / t2).exp();
        (omega * t + phi).sin().powi(2) * alpha * e + beta * (1.0 - e) + c
    }
    fn gradient(&self, p: &[f64], t: f64, out: &mut [f64]) -> bool {
        let [t2, alpha, beta, phi, _c, omega] = [p[0], p[1], p[2], p[3], p[4], p[5]];
        let e = (-t / t2).exp();
        let arg = omega * t + phi;
        let s2 = arg.sin().powi(2);
        let ds2 = (2.0 * arg).sin();
        let de_dt2 = e * t / (t2 * t2);
        out[0] = s2 * alpha * de_dt2 - beta * de_dt2;
        out[1] = s2 * e;
        out[2] = 1.0 - e;
        out[3] = ds2 * alpha * e;
        out[4] = 1.0;
        out[5] = ds2 * t * alpha * e;
        true
    }
    fn project(&self, p: &mut [f64]) {
        p[0] = p[0].max(1e-300);
    }
}

/// Angular frequency of the strongest periodogram peak of unevenly
/// sampled data, searched on `[ω_min, ω_max]`.
pub fn periodogram_peak(ts: &[f64], ys: &[f64], omega_min: f64, omega_max: f64, points: usize) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut best = (omega_min, f64::NEG_INFINITY);
    for k in 0..points {
        let w = omega_min + (omega_max - omega_min) * k as f64 / (points - 1).max(1) as f64;
        let (mut c, mut s) = (0.0, 0.0);
        for (&t, &y) in ts.iter().zip(ys) {
            c += (y - mean) * (w * t).cos();
            s += (y - mean) * (w * t).sin();
        }
        let power = c * c + s * s;
        if power > best.1 {
            best = (w, power);
        }
    }
    best.0
}

/// Fits Ramsey fringes `(T, P(↑))` with the decaying-sinusoid model.
///
/// ω starts at the periodogram peak (halved, since sin² doubles the fringe
/// frequency) and T₂ at the log-slope of the per-fringe contrast envelope.
/// When the data show no decay, T₂ is reported at ten times the window with
/// a flag.
pub fn fit_ramsey_decay(ts: &[f64], ys: &[f64]) -> Result<FitResult, FitError> {
    if ts.len() < 6 {
        return Err(FitError::TooFewSamples { need: 6, got: ts.len() });
    }
    let t_min = ts.iter().cloned().fold(f64::INFINITY, f64::min);
    let t_max = ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = t_max - t_min;
    if !(span > 0.0) {
        return Err(FitError::InvalidData("samples must span a positive interval".into()));
    }
    let dt_min = min_spacing(ts);
    let nyquist = PI / dt_min;
    let fringe = periodogram_peak(ts, ys, 2.0 * PI / span, nyquist, 4000);
    let omega0 = fringe / 2.0;

    let (t2_0, alpha0, c0) = envelope_guess(ts, ys, 2.0 * PI / fringe, span);
    let model = RamseyDecay;
    let mut best: Option<FitResult> = None;
    // sin² is π-periodic in φ; try a few starting phases and keep the best.
    for k in 0..4 {
        let phi0 = k as f64 * PI / 4.0;
        let p0 = [t2_0, alpha0, 0.5 * alpha0, phi0, c0, omega0];
        let candidate = match levenberg_marquardt(&model, ts, ys, None, &p0, &LmOptions::default()) {
            Ok(f) => f,
            Err(FitError::NonConvergence { best, .. }) => *best,
            Err(_) => continue,
        };
        if best.as_ref().is_none_or(|b| candidate.residual_norm < b.residual_norm) {
            best = Some(candidate);
        }
    }
    let mut fit = match best {
        Some(f) if f.params[0] <= 10.0 * t_max => f,
        _ => fit_undamped(ts, ys, omega0, t_max)?,
    };
    if fit.params[1] < 0.0 {
        // α < 0 is the same curve with φ shifted by π/2 and the envelope
        // moved into β and C; keep α positive for reporting.
        fit.flags.push("negative fringe amplitude".into());
    }
    Ok(fit)
}

/// Fallback for fringes without resolvable decay: fits `α·sin²(ωT+φ) + C`
/// and reports T₂ as a lower bound of ten times the window.
fn fit_undamped(ts: &[f64], ys: &[f64], omega0: f64, t_max: f64) -> Result<FitResult, FitError> {
    struct Undamped;
    impl Model for Undamped {
        fn names(&self) -> Vec<String> {
            ["alpha", "phi", "c", "omega"].iter().map(|s| s.to_string()).collect()
        }
        fn eval(&self, p: &[f64], t: f64) -> f64 {
            p[0] * (p[3] * t + p[1]).sin().powi(2) + p[2]
        }
    }
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<FitResult> = None;
    for k in 0..4 {
        let p0 = [hi - lo, k as f64 * PI / 4.0, lo, omega0];
        let candidate = match levenberg_marquardt(&Undamped, ts, ys, None, &p0, &LmOptions::default()) {
            Ok(f) => f,
            Err(FitError::NonConvergence { best, .. }) => *best,
            Err(_) => continue,
        };
        if best.as_ref().is_none_or(|b| candidate.residual_norm < b.residual_norm) {
            best = Some(candidate);
        }
    }
    let u = best.ok_or_else(|| FitError::RankDeficient(RamseyDecay.names()))?;
    let t2 = 10.0 * t_max;
    let params = vec![t2, u.params[0], 0.0, u.params[1], u.params[2], u.params[3]];
    let mut cov = DMatrix::zeros(6, 6);
    let map = [1usize, 3, 4, 5];
    for (a, &ia) in map.iter().enumerate() {
        for (b, &ib) in map.iter().enumerate() {
            cov[(ia, ib)] = u.covariance[(a, b)];
        }
    }
    cov[(0, 0)] = f64::INFINITY;
    let std_errors = (0..6).map(|c| cov[(c, c)].max(0.0).sqrt()).collect();
    Ok(FitResult {
        names: RamseyDecay.names(),
        params,
        std_errors,
        covariance: cov,
        residual_norm: u.residual_norm,
        iterations: u.iterations,
        converged: u.converged,
        flags: vec!["no resolvable decay: t2 lower-bounded at ten times the fit window".into()],
    })
}

fn min_spacing(ts: &[f64]) -> f64 {
    let mut s: Vec<f64> = ts.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min)
}

/// Per-fringe max−min envelope, then a log-linear slope for T₂.
fn envelope_guess(ts: &[f64], ys: &[f64], period: f64, span: f64) -> (f64, f64, f64) {
    let mut pts: Vec<(f64, f64)> = ts.iter().cloned().zip(ys.iter().cloned()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut env = Vec::new();
    let mut start = 0;
    while start < pts.len() {
        let t0 = pts[start].0;
        let end = pts[start..].iter().position(|p| p.0 >= t0 + period).map_or(pts.len(), |e| (start + e).max(start + 1));
        if end - start >= 3 {
            let lo = pts[start..end].iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let hi = pts[start..end].iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let tm = pts[start..end].iter().map(|p| p.0).sum::<f64>() / (end - start) as f64;
            env.push((tm, hi - lo));
        }
        start = end;
    }
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let slope = log_linear(&env.iter().map(|p| p.0).collect::<Vec<_>>(), &env.iter().map(|p| p.1).collect::<Vec<_>>());
    match slope {
        Some((s, b)) if s < 0.0 => (-1.0 / s, b.exp().clamp(0.05, 2.0), lo),
        _ => (5.0 * span, env.first().map_or(1.0, |e| e.1), lo),
    }
}

/// Beam-position response of a pumped ion:
/// `F(x) = B·exp(−κ·e^{−2(x−x₀)²/w²})`.
pub struct PumpingDepletion;

impl Model for PumpingDepletion {
    fn names(&self) -> Vec<String> {
        ["baseline", "kappa", "x0", "w"].iter().map(|s| s.to_string()).collect()
    }
    fn eval(&self, p: &[f64], x: f64) -> f64 {
        let g = (-2.0 * (x - p[2]).powi(2) / (p[3] * p[3])).exp();
        p[0] * (-p[1] * g).exp()
    }
    fn gradient(&self, p: &[f64], x: f64, out: &mut [f64]) -> bool {
        let [b, k, x0, w] = [p[0], p[1], p[2], p[3]];
        let u = x - x0;
        let g = (-2.0 * u * u / (w * w)).exp();
        let f = b * (-k * g).exp();
        out[0] = f / b;
        out[1] = -f * g;
        // ∂g/∂x0 = g·4u/w², ∂g/∂w = g·4u²/w³
        out[2] = -f * k * g * 4.0 * u / (w * w);
        out[3] = -f * k * g * 4.0 * u * u / (w * w * w);
        true
    }
    fn project(&self, p: &mut [f64]) {
        p[3] = p[3].abs().max(1e-300);
    }
}

/// Fits beam centre and waist from fluorescence after a fixed pumping time
/// at each beam offset. The fluorescence minimum must lie inside the scan.
pub fn fit_beam_position(xs: &[f64], ys: &[f64]) -> Result<FitResult, FitError> {
    if xs.len() < 5 {
        return Err(FitError::TooFewSamples { need: 5, got: xs.len() });
    }
    let mut pts: Vec<(f64, f64)> = xs.iter().cloned().zip(ys.iter().cloned()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let imin = pts.iter().enumerate().min_by(|a, b| a.1 .1.total_cmp(&b.1 .1)).map(|(i, _)| i).unwrap();
    if imin == 0 || imin == pts.len() - 1 {
        return Err(FitError::InvalidData("scan does not bracket the fluorescence minimum".into()));
    }
    let base = pts[0].1.max(pts[pts.len() - 1].1);
    let ymin = pts[imin].1;
    if !(base > 0.0 && ymin > 0.0 && ymin < base) {
        return Err(FitError::InvalidData("no depletion dip in the scan".into()));
    }
    let kappa0 = (base / ymin).ln();
    // width from the half-depth crossing on each side
    let half = (-kappa0 / 2.0).exp() * base;
    let left = pts[..imin].iter().rev().find(|p| p.1 >= half).map_or(pts[0].0, |p| p.0);
    let right = pts[imin..].iter().find(|p| p.1 >= half).map_or(pts[pts.len() - 1].0, |p| p.0);
    // g = 1/2 at |u| = w·√(ln2/2)
    let w0 = ((right - left) / 2.0 / (2f64.ln() / 2.0).sqrt()).max(min_spacing(xs));
    let xs_sorted: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys_sorted: Vec<f64> = pts.iter().map(|p| p.1).collect();
    levenberg_marquardt(&PumpingDepletion, &xs_sorted, &ys_sorted, None, &[base, kappa0, pts[imin].0, w0], &LmOptions::default())
}

/// Bootstrap summary of a scalar statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    pub std: f64,
    pub mean: f64,
    pub samples: Vec<f64>,
    /// Resamples redrawn after the statistic failed.
    pub redraws: usize,
}

pub const DEFAULT_RESAMPLES: usize = 20;
const MAX_CONSECUTIVE_REDRAWS: usize = 50;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Resamples `data` with replacement `n_resamples` times and reports the
/// spread of `statistic`. Resample `k` draws from its own ChaCha stream, so
/// the result depends only on `seed`.
pub fn bootstrap<T: Clone, E>(
    data: &[T],
    statistic: impl Fn(&[T]) -> Result<f64, E>,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapResult, FitError> {
    if data.is_empty() {
        return Err(FitError::TooFewSamples { need: 1, got: 0 });
    }
    bootstrap_impl(n_resamples, seed, |rng| {
        let resample: Vec<T> = (0..data.len()).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
        statistic(&resample).ok()
    })
}

/// Grouped bootstrap: every group (e.g. the repetitions at one wait time) is
/// resampled within itself, keeping the design of the experiment fixed.
pub fn bootstrap_grouped<T: Clone, E>(
    groups: &[Vec<T>],
    statistic: impl Fn(&[Vec<T>]) -> Result<f64, E>,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapResult, FitError> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(FitError::TooFewSamples { need: 1, got: 0 });
    }
    bootstrap_impl(n_resamples, seed, |rng| {
        let resample: Vec<Vec<T>> = groups
            .iter()
            .map(|g| (0..g.len()).map(|_| g[rng.random_range(0..g.len())].clone()).collect())
            .collect();
        statistic(&resample).ok()
    })
}

fn bootstrap_impl(
    n_resamples: usize,
    seed: u64,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Option<f64>,
) -> Result<BootstrapResult, FitError> {
    let mut samples = Vec::with_capacity(n_resamples);
    let mut redraws = 0;
    let mut stream = 0u64;
    let mut consecutive = 0;
    while samples.len() < n_resamples {
        let mut rng = stream_rng(seed, stream);
        stream += 1;
        match draw(&mut rng) {
            Some(v) if v.is_finite() => {
                samples.push(v);
                consecutive = 0;
            }
            _ => {
                redraws += 1;
                consecutive += 1;
                if consecutive >= MAX_CONSECUTIVE_REDRAWS {
                    return Err(FitError::ResampleExhausted(consecutive));
                }
            }
        }
    }
    let (mean, std) = sample_std(&samples);
    Ok(BootstrapResult { std, mean, samples, redraws })
}

/// Elliptical Gaussian on a plane:
/// `A·exp(−(x−x₀)²/(2s_x²) − (y−y₀)²/(2s_y²)) + C`.
pub struct Gaussian2d;

impl Gaussian2d {
    pub fn value(p: &[f64], x: f64, y: f64) -> f64 {
        let [a, x0, y0, sx, sy, c] = [p[0], p[1], p[2], p[3], p[4], p[5]];
        a * (-(x - x0).powi(2) / (2.0 * sx * sx) - (y - y0).powi(2) / (2.0 * sy * sy)).exp() + c
    }
}

/// Fits a 2-D Gaussian to scattered samples `(x, y, z)`.
pub fn fit_gaussian_2d(samples: &[(f64, f64, f64)]) -> Result<FitResult, FitError> {
    if samples.len() < 6 {
        return Err(FitError::TooFewSamples { need: 6, got: samples.len() });
    }
    let zmin = samples.iter().map(|s| s.2).fold(f64::INFINITY, f64::min);
    let zmax = samples.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
    if !(zmax - zmin > 1e-12 * zmax.abs().max(1e-300)) {
        return Err(FitError::RankDeficient(vec!["sx".into(), "sy".into()]));
    }
    let weights: Vec<f64> = samples.iter().map(|s| s.2 - zmin).collect();
    let wsum: f64 = weights.iter().sum();
    let x0 = samples.iter().zip(&weights).map(|(s, w)| s.0 * w).sum::<f64>() / wsum;
    let y0 = samples.iter().zip(&weights).map(|(s, w)| s.1 * w).sum::<f64>() / wsum;
    let sx = (samples.iter().zip(&weights).map(|(s, w)| (s.0 - x0).powi(2) * w).sum::<f64>() / wsum).sqrt();
    let sy = (samples.iter().zip(&weights).map(|(s, w)| (s.1 - y0).powi(2) * w).sum::<f64>() / wsum).sqrt();

    // The 2-D model rides on the 1-D machinery by indexing samples.
    struct Indexed<'a>(&'a [(f64, f64, f64)]);
    impl Model for Indexed<'_> {
        fn names(&self) -> Vec<String> {
            ["amplitude", "x0", "y0", "sx", "sy", "offset"].iter().map(|s| s.to_string()).collect()
        }
        fn eval(&self, p: &[f64], i: f64) -> f64 {
            let s = self.0[i as usize];
            Gaussian2d::value(p, s.0, s.1)
        }
        fn gradient(&self, p: &[f64], i: f64, out: &mut [f64]) -> bool {
            let s = self.0[i as usize];
            let [a, x0, y0, sx, sy, _] = [p[0], p[1], p[2], p[3], p[4], p[5]];
            let (u, v) = (s.0 - x0, s.1 - y0);
            let g = (-u * u / (2.0 * sx * sx) - v * v / (2.0 * sy * sy)).exp();
            out[0] = g;
            out[1] = a * g * u / (sx * sx);
            out[2] = a * g * v / (sy * sy);
            out[3] = a * g * u * u / (sx * sx * sx);
            out[4] = a * g * v * v / (sy * sy * sy);
            out[5] = 1.0;
            true
        }
        fn project(&self, p: &mut [f64]) {
            p[3] = p[3].abs().max(1e-300);
            p[4] = p[4].abs().max(1e-300);
        }
    }
    let idx: Vec<f64> = (0..samples.len()).map(|i| i as f64).collect();
    let zs: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let model = Indexed(samples);
    let p0 = [zmax - zmin, x0, y0, sx.max(1e-300), sy.max(1e-300), zmin];
    let mut fit = levenberg_marquardt(&model, &idx, &zs, None, &p0, &LmOptions::default())?;
    let extent = samples.iter().map(|s| s.0.abs().max(s.1.abs())).fold(0.0, f64::max);
    if fit.params[3] > 1e3 * extent || fit.params[4] > 1e3 * extent {
        fit.flags.push("degenerate width".into());
    }
    Ok(fit)
}

/// Writes a header row and numeric rows. Floats use Rust's shortest
/// round-trip formatting; NaN is written as `NaN`.
pub fn write_csv<W: Write>(mut out: W, headers: &[&str], rows: &[Vec<f64>]) -> std::io::Result<()> {
    writeln!(out, "{}", headers.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:?}")
    }
}

/// Reads a numeric CSV with a header row.
pub fn read_csv<R: BufRead>(input: R) -> Result<(Vec<String>, Vec<Vec<f64>>), FitError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| FitError::InvalidData("empty CSV".into()))?
        .map_err(|e| FitError::InvalidData(e.to_string()))?;
    let headers: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line.map_err(|e| FitError::InvalidData(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| FitError::InvalidData(format!("line {}: {e}", ln + 2)))?;
        if row.len() != headers.len() {
            return Err(FitError::InvalidData(format!("line {} has {} cells, expected {}", ln + 2, row.len(), headers.len())));
        }
        rows.push(row);
    }
    Ok((headers, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn exponential_exact_recovery() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * (-x / 0.7).exp()).collect();
        let f = fit_exponential_decay(&xs, &ys, None).unwrap();
        assert_relative_eq!(f.get("tau").unwrap(), 0.7, max_relative = 1e-9);
        assert_relative_eq!(f.get("amplitude").unwrap(), 2.5, max_relative = 1e-9);
    }

    #[test]
    fn ramsey_fit_on_exact_model() {
        let ts: Vec<f64> = (0..105).map(|i| 10e-6 + i as f64 * 10e-6).collect();
        let truth = [400e-6, 0.9, 0.45, 0.3, 0.05, PI * 1e4];
        let ys: Vec<f64> = ts.iter().map(|&t| RamseyDecay.eval(&truth, t)).collect();
        let f = fit_ramsey_decay(&ts, &ys).unwrap();
        assert_relative_eq!(f.get("t2").unwrap(), 400e-6, max_relative = 1e-6);
        assert_relative_eq!(f.get("omega").unwrap(), PI * 1e4, max_relative = 1e-8);
    }

    #[test]
    fn ramsey_fit_flags_no_decay() {
        let ts: Vec<f64> = (0..60).map(|i| 10e-6 + i as f64 * 10e-6).collect();
        let ys: Vec<f64> = ts.iter().map(|&t| (PI * 1e4 * t).sin().powi(2)).collect();
        let f = fit_ramsey_decay(&ts, &ys).unwrap();
        assert!(f.flags.iter().any(|s| s.contains("no resolvable decay")), "{:?}", f);
    }

    #[test]
    fn beam_position_recovery_and_translation() {
        let truth = [1000.0, 1.2, 0.3e-6, 1.5e-6];
        let xs: Vec<f64> = (0..21).map(|i| -5e-6 + i as f64 * 0.5e-6).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| PumpingDepletion.eval(&truth, x)).collect();
        let f = fit_beam_position(&xs, &ys).unwrap();
        assert_relative_eq!(f.get("w").unwrap(), 1.5e-6, max_relative = 1e-9);
        assert_relative_eq!(f.get("x0").unwrap(), 0.3e-6, max_relative = 1e-9);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 1e-6).collect();
        let g = fit_beam_position(&shifted, &ys).unwrap();
        assert!((g.get("x0").unwrap() - 1.3e-6).abs() < 1e-15);
        assert_relative_eq!(g.get("w").unwrap(), 1.5e-6, max_relative = 1e-9);
    }

    #[test]
    fn beam_position_requires_bracketing() {
        let truth = [1000.0, 1.2, 0.0, 1.5e-6];
        let xs: Vec<f64> = (0..8).map(|i| 0.5e-6 + i as f64 * 0.5e-6).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| PumpingDepletion.eval(&truth, x)).collect();
        assert!(matches!(fit_beam_position(&xs, &ys), Err(FitError::InvalidData(_))));
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let data = vec![3.0; 50];
        let mean = |d: &[f64]| -> Result<f64, ()> { Ok(d.iter().sum::<f64>() / d.len() as f64) };
        let b = bootstrap(&data, mean, DEFAULT_RESAMPLES, 1).unwrap();
        assert_eq!(b.std, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..200).map(|_| normal.sample(&mut rng)).collect();
        let a = bootstrap(&data, mean, 20, 42).unwrap();
        let b = bootstrap(&data, mean, 20, 42).unwrap();
        assert_eq!(a.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let c = bootstrap(&data, mean, 20, 43).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn bootstrap_redraws_failures() {
        let data: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let picky = |d: &[f64]| -> Result<f64, ()> { if d[0] < 3.0 { Err(()) } else { Ok(d[0]) } };
        let b = bootstrap(&data, picky, 20, 5).unwrap();
        assert_eq!(b.samples.len(), 20);
        assert!(b.redraws > 0);
        let never = |_: &[f64]| -> Result<f64, ()> { Err(()) };
        assert!(matches!(bootstrap(&data, never, 5, 5), Err(FitError::ResampleExhausted(_))));
    }

    #[test]
    fn gaussian_2d_exact_and_degenerate() {
        let truth = [2.0, 0.5, -0.25, 1.2, 0.8, 0.1];
        let mut s = Vec::new();
        for i in -6..=6 {
            for j in -6..=6 {
                let (x, y) = (i as f64 * 0.4, j as f64 * 0.4);
                s.push((x, y, Gaussian2d::value(&truth, x, y)));
            }
        }
        let f = fit_gaussian_2d(&s).unwrap();
        for (a, b) in f.params.iter().zip(truth) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let flat: Vec<_> = s.iter().map(|p| (p.0, p.1, 1.0)).collect();
        assert!(fit_gaussian_2d(&flat).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![vec![0.1, 1e-300, f64::NAN], vec![-2.5, 3.0, 1.0 / 3.0]];
        let mut buf = Vec::new();
        write_csv(&mut buf, &["a", "b", "c"], &rows).unwrap();
        let (h, back) = read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(h, vec!["a", "b", "c"]);
        assert_eq!(back[1][2].to_bits(), (1.0f64 / 3.0).to_bits());
        assert!(back[0][2].is_nan());
        assert_eq!(back[0][1], 1e-300);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(fit_ramsey_decay(&[1.0, 2.0], &[1.0, 2.0]), Err(FitError::TooFewSamples { .. })));
    }
}

//! Chi-square / noncentral chi-square calibration of residual detectors.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// Poisson tail mass left out of the noncentral mixture.
const MIXTURE_TAIL: f64 = 1e-14;
const BISECTION_ITERS: usize = 200;
/// Consistency tolerance between a stored threshold and its false-alarm rate.
const CONSISTENCY_TOL: f64 = 1e-8;

pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    gamma_lr(dof as f64 / 2.0, x / 2.0)
}

/// Survival function `1 − F_{χ²}(x; dof)`, computed without cancellation.
pub fn chi2_sf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(dof as f64 / 2.0, x / 2.0)
}

/// Poisson(μ) weights visited outward from the mode until the unvisited mass
/// drops below `MIXTURE_TAIL`; `visit(j, w)` is called for each term.
fn poisson_mixture(mu: f64, mut visit: impl FnMut(usize, f64)) {
    let mode = mu.floor() as usize;
    let log_w = |j: usize| -mu + j as f64 * mu.ln() - ln_gamma(j as f64 + 1.0);
    let mut mass = 0.0;
    let mut up = mode;
    let mut down = mode;
    let w0 = log_w(mode).exp();
    visit(mode, w0);
    mass += w0;
    let mut up_w = w0;
    let mut down_w = w0;
    while 1.0 - mass > MIXTURE_TAIL {
        // expand on whichever side currently carries more weight
        let next_up = up_w * mu / (up + 1) as f64;
        let next_down = if down > 0 { down_w * down as f64 / mu } else { 0.0 };
        if next_up == 0.0 && next_down == 0.0 {
            break;
        }
        if next_up >= next_down {
            up += 1;
            up_w = log_w(up).exp();
            visit(up, up_w);
            mass += up_w;
        } else {
            down -= 1;
            down_w = log_w(down).exp();
            visit(down, down_w);
            mass += down_w;
        }
    }
}

/// CDF of the noncentral chi-square distribution with noncentrality `lambda`.
pub fn noncentral_chi2_cdf(x: f64, dof: usize, lambda: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if lambda <= 0.0 {
        return chi2_cdf(x, dof);
    }
    let mut acc = 0.0;
    poisson_mixture(lambda / 2.0, |j, w| acc += w * chi2_cdf(x, dof + 2 * j));
    acc.clamp(0.0, 1.0)
}

/// `1 − F_{ncχ²}(x; dof, λ)`.
pub fn noncentral_chi2_sf(x: f64, dof: usize, lambda: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if lambda <= 0.0 {
        return chi2_sf(x, dof);
    }
    let mut acc = 0.0;
    poisson_mixture(lambda / 2.0, |j, w| acc += w * chi2_sf(x, dof + 2 * j));
    acc.clamp(0.0, 1.0)
}

fn check_probability(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::Validation(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

/// Threshold `h` with `1 − F_{χ²}(h; dof) = β`.
pub fn threshold_from_false_alarm(beta: f64, dof: usize) -> Result<f64> {
    check_probability("beta", beta)?;
    if dof == 0 {
        return Err(Error::Validation("degrees of freedom must be positive".into()));
    }
    let mut hi = dof as f64 + 1.0;
    while chi2_sf(hi, dof) > beta {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_sf(mid, dof) > beta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-step false-alarm probability of a plain chi-square detector with threshold `h`.
pub fn false_alarm_from_threshold(h: f64, dof: usize) -> f64 {
    chi2_sf(h, dof)
}

/// Bound on the `Q⁻¹`-weighted residual deviation that keeps the alarm rate within `β + ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StealthRadius {
    pub alpha: f64,
    pub dof: usize,
    pub threshold_used: f64,
}

/// Unique `α ≥ 0` with `1 − F_{ncχ²}(h; dof, α²) = β + ε`, `β = 1 − F_{χ²}(h; dof)`.
pub fn alpha_chi2(epsilon: f64, dof: usize, h: f64) -> Result<StealthRadius> {
    if dof == 0 {
        return Err(Error::Validation("degrees of freedom must be positive".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Validation(format!("threshold must be positive, got {h}")));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let beta = chi2_sf(h, dof);
    let target = beta + epsilon;
    if target >= 1.0 {
        return Err(Error::Domain(format!(
            "epsilon {epsilon} leaves no room above the false-alarm rate {beta:.6} (needs ε < 1 − β)"
        )));
    }
    let radius = |alpha| StealthRadius { alpha, dof, threshold_used: h };
    if epsilon == 0.0 {
        return Ok(radius(0.0));
    }
    let excess = |a: f64| noncentral_chi2_sf(h, dof, a * a) - target;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while excess(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Numerical("stealth radius bracket did not close".into()));
        }
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(radius(0.5 * (lo + hi)))
}

/// Cumulative SPRT radius at step `k`: `α_{χ²}(ε, kp, 2h + kp)`.
pub fn sprt_radius(epsilon: f64, p: usize, h: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Validation("SPRT step index starts at 1".into()));
    }
    Ok(alpha_chi2(epsilon, k * p, 2.0 * h + (k * p) as f64)?.alpha)
}

/// SPRT threshold whose first-step alarm probability equals `β`.
pub fn sprt_threshold_from_false_alarm(beta: f64, p: usize) -> Result<f64> {
    Ok((threshold_from_false_alarm(beta, p)? - p as f64) / 2.0)
}

/// No-attack alarm probability of the cumulative SPRT statistic at step `k`.
pub fn sprt_false_alarm(h: f64, p: usize, k: usize) -> f64 {
    chi2_sf(2.0 * h + (k * p) as f64, k * p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DetectorKind {
    /// `g_k = Σ_{i=1}^{T} c_i z_{k−T+i}ᵀ Q⁻¹ z_{k−T+i}`.
    Windowed { coefficients: Vec<f64> },
    /// `g_k = ½ Σ_{τ≤k} z_τᵀ Q⁻¹ z_τ − kp/2`.
    Sprt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    pub threshold_h: f64,
    pub beta: f64,
}

impl DetectorSpec {
    /// Single-step chi-square detector calibrated to false-alarm rate `beta`.
    pub fn chi_square(beta: f64, p: usize) -> Result<Self> {
        Ok(DetectorSpec {
            kind: DetectorKind::Windowed { coefficients: vec![1.0] },
            threshold_h: threshold_from_false_alarm(beta, p)?,
            beta,
        })
    }

    pub fn sprt(beta: f64, p: usize) -> Result<Self> {
        Ok(DetectorSpec { kind: DetectorKind::Sprt, threshold_h: sprt_threshold_from_false_alarm(beta, p)?, beta })
    }

    pub fn windowed(coefficients: Vec<f64>, threshold_h: f64, beta: f64) -> Result<Self> {
        let spec = DetectorSpec { kind: DetectorKind::Windowed { coefficients }, threshold_h, beta };
        spec.check_coefficients()?;
        Ok(spec)
    }

    fn check_coefficients(&self) -> Result<()> {
        if let DetectorKind::Windowed { coefficients } = &self.kind {
            if coefficients.is_empty() {
                return Err(Error::Validation("windowed detector needs at least one coefficient".into()));
            }
            if coefficients.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
                return Err(Error::Validation("window coefficients must be nonnegative".into()));
            }
            if !(*coefficients.last().unwrap() > 0.0) {
                return Err(Error::Validation("last window coefficient c_T must be strictly positive".into()));
            }
        }
        Ok(())
    }

    pub fn is_plain_chi_square(&self) -> bool {
        matches!(&self.kind, DetectorKind::Windowed { coefficients } if coefficients.len() == 1 && coefficients[0] == 1.0)
    }

    /// Range checks plus threshold/false-alarm consistency where a closed form exists.
    pub fn validate(&self, p: usize) -> Result<()> {
        check_probability("beta", self.beta)?;
        if !(self.threshold_h > 0.0 && self.threshold_h.is_finite()) {
            return Err(Error::Validation(format!("threshold must be positive, got {}", self.threshold_h)));
        }
        self.check_coefficients()?;
        let implied = match self.kind {
            DetectorKind::Sprt => Some(sprt_false_alarm(self.threshold_h, p, 1)),
            _ if self.is_plain_chi_square() => Some(chi2_sf(self.threshold_h, p)),
            _ => None,
        };
        if let Some(implied) = implied {
            if (implied - self.beta).abs() > CONSISTENCY_TOL {
                return Err(Error::Validation(format!(
                    "threshold {} implies false-alarm rate {implied:.10}, not beta {}",
                    self.threshold_h, self.beta
                )));
            }
        }
        Ok(())
    }

    /// No-attack alarm probability at step `k` (exact for chi-square and SPRT,
    /// nominal `β` for general windows).
    pub fn nominal_alarm_rate(&self, p: usize, k: usize) -> f64 {
        match self.kind {
            DetectorKind::Sprt => sprt_false_alarm(self.threshold_h, p, k),
            _ if self.is_plain_chi_square() => chi2_sf(self.threshold_h, p),
            _ => self.beta,
        }
    }
}

/// Inner/outer stealth radii for a windowed detector:
/// `α_under = α(ε, Tp, h/c_max)/√T`, `α_over = α(ε, p, h/c_T)`.
pub fn window_bounds(spec: &DetectorSpec, epsilon: f64, p: usize) -> Result<(f64, f64)> {
    spec.check_coefficients()?;
    let coefficients = match &spec.kind {
        DetectorKind::Windowed { coefficients } => coefficients,
        DetectorKind::Sprt => return Err(Error::Validation("window bounds need a windowed detector".into())),
    };
    let t = coefficients.len();
    let c_max = coefficients.iter().copied().fold(0.0, f64::max);
    let c_last = *coefficients.last().unwrap();
    let under = alpha_chi2(epsilon, t * p, spec.threshold_h / c_max)?.alpha / (t as f64).sqrt();
    let over = alpha_chi2(epsilon, p, spec.threshold_h / c_last)?.alpha;
    Ok((under, over))
}

/// Running detector statistic for one simulated trace.
#[derive(Debug, Clone)]
pub struct DetectorState {
    window: Vec<f64>,
    cumulative: f64,
    steps: usize,
}

impl DetectorState {
    pub fn new() -> Self {
        DetectorState { window: Vec::new(), cumulative: 0.0, steps: 0 }
    }

    /// Feed `zᵀQ⁻¹z` of the current step and return the detection statistic `g_k`.
    pub fn push(&mut self, spec: &DetectorSpec, energy: f64, p: usize) -> f64 {
        self.steps += 1;
        match &spec.kind {
            DetectorKind::Sprt => {
                self.cumulative += energy;
                0.5 * self.cumulative - 0.5 * (self.steps * p) as f64
            }
            DetectorKind::Windowed { coefficients } => {
                let t = coefficients.len();
                self.window.push(energy);
                if self.window.len() > t {
                    self.window.remove(0);
                }
                // newest energy pairs with c_T
                let offset = t - self.window.len();
                self.window.iter().enumerate().map(|(i, e)| coefficients[offset + i] * e).sum()
            }
        }
    }
}

impl Default for DetectorState {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn chi2_two_dof_closed_form() {
        let x = 2.0 * 2f64.ln();
        assert_abs_diff_eq!(noncentral_chi2_cdf(x, 2, 0.0), 0.5, epsilon = 1e-14);
        for &x in &[0.1, 1.0, 5.0, 20.0] {
            assert_abs_diff_eq!(chi2_sf(x, 2), (-x / 2.0).exp(), epsilon = 1e-14);
        }
        assert_eq!(noncentral_chi2_cdf(0.0, 3, 2.0), 0.0);
    }

    #[test]
    fn thresholds_two_dof() {
        assert_abs_diff_eq!(threshold_from_false_alarm(0.5, 2).unwrap(), 2.0 * 2f64.ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(threshold_from_false_alarm(0.015, 2).unwrap(), -2.0 * 0.015f64.ln(), epsilon = 1e-10);
        assert!(threshold_from_false_alarm(1.0 - 1e-9, 2).unwrap() < 1e-7);
        assert!(threshold_from_false_alarm(0.0, 2).is_err());
    }

    #[test]
    fn noncentral_series_matches_bessel_form_for_two_dof() {
        // For dof = 2 the density is ½ e^{−(x+λ)/2} I₀(√(λx)); integrate numerically.
        let (lambda, x_max) = (1.0, 3.0);
        let i0 = |z: f64| {
            let mut term = 1.0;
            let mut sum = 1.0;
            for k in 1..60 {
                term *= (z / 2.0) * (z / 2.0) / (k * k) as f64;
                sum += term;
            }
            sum
        };
        let pdf = |x: f64| 0.5 * (-(x + lambda) / 2.0).exp() * i0((lambda * x).sqrt());
        let n = 20_000;
        let hstep = x_max / n as f64;
        let mut simpson = pdf(0.0) + pdf(x_max);
        for i in 1..n {
            simpson += pdf(i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        simpson *= hstep / 3.0;
        assert_abs_diff_eq!(noncentral_chi2_cdf(x_max, 2, lambda), simpson, epsilon = 1e-10);
    }

    #[test]
    fn zero_slack_gives_zero_radius() {
        assert_eq!(alpha_chi2(0.0, 2, 8.0).unwrap().alpha, 0.0);
        assert_eq!(sprt_radius(0.0, 2, 5.0, 7).unwrap(), 0.0);
    }

    #[test]
    fn radius_round_trip() {
        let h = -2.0 * 0.015f64.ln();
        let r = alpha_chi2(0.001, 2, h).unwrap();
        let exceed = noncentral_chi2_sf(h, 2, r.alpha * r.alpha);
        assert_abs_diff_eq!(exceed, 0.016, epsilon = 1e-12);
    }

    #[test]
    fn excessive_slack_is_a_domain_error() {
        let h = threshold_from_false_alarm(0.2, 2).unwrap();
        assert!(matches!(alpha_chi2(0.85, 2, h), Err(Error::Domain(_))));
    }

    #[test]
    fn window_bounds_coincide_for_single_tap() {
        let spec = DetectorSpec::chi_square(0.015, 2).unwrap();
        let (u, o) = window_bounds(&spec, 0.001, 2).unwrap();
        assert_abs_diff_eq!(u, o, epsilon = 1e-14);
        assert_abs_diff_eq!(u, alpha_chi2(0.001, 2, spec.threshold_h).unwrap().alpha, epsilon = 1e-14);
    }

    #[test]
    fn window_bounds_ordered() {
        let spec = DetectorSpec::windowed(vec![1.0; 4], 10.0, 0.1).unwrap();
        let (u, o) = window_bounds(&spec, 0.001, 2).unwrap();
        assert!(u <= o, "{u} > {o}");
    }

    #[test]
    fn window_requires_positive_last_coefficient() {
        assert!(DetectorSpec::windowed(vec![1.0, 0.0], 10.0, 0.1).is_err());
        assert!(DetectorSpec::windowed(vec![0.0, 0.0], 10.0, 0.1).is_err());
    }

    #[test]
    fn sprt_first_step_matches_chi_square() {
        let spec = DetectorSpec::sprt(0.015, 2).unwrap();
        assert_abs_diff_eq!(2.0 * spec.threshold_h + 2.0, -2.0 * 0.015f64.ln(), epsilon = 1e-9);
        spec.validate(2).unwrap();
        assert_abs_diff_eq!(spec.nominal_alarm_rate(2, 1), 0.015, epsilon = 1e-10);
    }

    #[test]
    fn detector_state_windows() {
        let spec = DetectorSpec::windowed(vec![0.5, 1.0], 10.0, 0.1).unwrap();
        let mut st = DetectorState::new();
        assert_eq!(st.push(&spec, 2.0, 1), 2.0);
        assert_eq!(st.push(&spec, 4.0, 1), 5.0);
        assert_eq!(st.push(&spec, 1.0, 1), 3.0);
        let sprt = DetectorSpec::sprt(0.05, 1).unwrap();
        let mut st = DetectorState::new();
        assert_eq!(st.push(&sprt, 3.0, 1), 1.0);
        assert_eq!(st.push(&sprt, 0.0, 1), 0.5);
    }
}

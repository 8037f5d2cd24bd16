//! Two-axis vehicle following a circular reference under a sensor attack.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attack::AttackSequence;
use crate::detector::{DetectorSpec, DetectorState};
use crate::error::{Error, Result};
use crate::model::{PlantModel, SteadyStateFilter};
use crate::policy::EnforcementPolicy;
use crate::sim::{psd_factor, run_rng, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircularReference {
    pub radius: f64,
    pub speed: f64,
}

impl CircularReference {
    /// Position, velocity and acceleration of one axis at time `t`.
    fn axis(&self, t: f64, axis: usize) -> [f64; 3] {
        let w = self.speed / self.radius;
        let (s, c) = (w * t).sin_cos();
        let r = self.radius;
        if axis == 0 {
            [r * c, -r * w * s, -r * w * w * c]
        } else {
            [r * s, r * w * c, -r * w * w * s]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub reference: CircularReference,
    pub sampling_period: f64,
    pub duration: f64,
    /// Attack onset in seconds; attack step 1 is the first sample at or after it.
    pub attack_start: f64,
    /// Closed-loop poles of the estimate-feedback tracking controller.
    pub poles: [f64; 2],
}

impl Default for ScenarioConfig {
    // 3.14 is a speed in m/s, not π
    #[allow(clippy::approx_constant)]
    fn default() -> Self {
        ScenarioConfig {
            reference: CircularReference { radius: 100.0, speed: 3.14 },
            sampling_period: 0.01,
            duration: 20.0,
            attack_start: 5.0,
            poles: [0.9, 0.85],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTrace {
    pub time: Vec<f64>,
    pub reference: Vec<[f64; 2]>,
    pub position: Vec<[f64; 2]>,
    pub estimate: Vec<[f64; 2]>,
    /// `max_axis ‖e^a − e‖₂` against a same-seed attack-free run.
    pub deviation: Vec<f64>,
    pub tracking_error: Vec<f64>,
    pub alarm: Vec<bool>,
    pub seed: u64,
}

impl ScenarioTrace {
    pub fn max_deviation(&self) -> f64 {
        self.deviation.iter().copied().fold(0.0, f64::max)
    }
}

/// Ackermann gain for a single-input, two-state axis.
fn placement_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, poles: [f64; 2]) -> Result<DMatrix<f64>> {
    let ab = a * b;
    let ctrb = DMatrix::from_columns(&[b.column(0), ab.column(0)]);
    let inv = ctrb.try_inverse().ok_or_else(|| Error::Validation("axis model is not controllable".into()))?;
    let id = DMatrix::identity(2, 2);
    let phi = a * a - a * (poles[0] + poles[1]) + id * (poles[0] * poles[1]);
    Ok(DMatrix::from_row_slice(1, 2, &[0.0, 1.0]) * inv * phi)
}

struct AxisRun {
    errors: Vec<[DVector<f64>; 2]>,
    positions: Vec<[f64; 2]>,
    estimates: Vec<[f64; 2]>,
    alarms: Vec<bool>,
}

/// Run the scenario; `model` is the single-axis (position, velocity) model
/// duplicated on both axes, with the same attack applied to each.
#[allow(clippy::too_many_arguments)]
pub fn trajectory_scenario(
    model: &PlantModel,
    filter: &SteadyStateFilter,
    detector: &DetectorSpec,
    attack: Option<&AttackSequence>,
    policy: &EnforcementPolicy,
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<ScenarioTrace> {
    if model.n() != 2 || model.m() != 1 {
        return Err(Error::Validation("trajectory scenario expects a 2-state, single-input axis model".into()));
    }
    if !(cfg.duration > 0.0 && cfg.sampling_period > 0.0) {
        return Err(Error::Validation("duration and sampling period must be positive".into()));
    }
    let steps = (cfg.duration / cfg.sampling_period).round() as usize;
    let onset = (cfg.attack_start / cfg.sampling_period).ceil() as usize;
    let gain = placement_gain(&model.a, &model.b, cfg.poles)?;
    let p = model.p();
    let pattern = policy.pattern(&(0..p).collect::<Vec<_>>(), p, steps.max(1));
    let injection = |step: usize| -> Option<DVector<f64>> {
        let rel = step.checked_sub(onset)? + 1;
        let a = attack?.at(rel)?;
        let allowed = pattern.supports.get(rel - 1).map(Vec::as_slice).unwrap_or(&[]);
        let mut v = DVector::from_column_slice(a);
        for i in 0..p {
            if !allowed.contains(&i) {
                v[i] = 0.0;
            }
        }
        Some(v)
    };
    let attacked = run_axes(model, filter, detector, &gain, cfg, steps, seed, &injection);
    let clean = run_axes(model, filter, detector, &gain, cfg, steps, seed, &|_| None);
    let mut trace = ScenarioTrace {
        time: Vec::with_capacity(steps),
        reference: Vec::with_capacity(steps),
        position: attacked.positions.clone(),
        estimate: attacked.estimates.clone(),
        deviation: Vec::with_capacity(steps),
        tracking_error: Vec::with_capacity(steps),
        alarm: attacked.alarms.clone(),
        seed,
    };
    for i in 0..steps {
        let t = (i + 1) as f64 * cfg.sampling_period;
        let r = [cfg.reference.axis(t, 0)[0], cfg.reference.axis(t, 1)[0]];
        let dev = (0..2).map(|ax| (&attacked.errors[i][ax] - &clean.errors[i][ax]).norm()).fold(0.0, f64::max);
        let pos = attacked.positions[i];
        trace.time.push(t);
        trace.reference.push(r);
        trace.deviation.push(dev);
        trace.tracking_error.push(((pos[0] - r[0]).powi(2) + (pos[1] - r[1]).powi(2)).sqrt());
    }
    Ok(trace)
}

#[allow(clippy::too_many_arguments)]
fn run_axes(
    model: &PlantModel,
    filter: &SteadyStateFilter,
    detector: &DetectorSpec,
    gain: &DMatrix<f64>,
    cfg: &ScenarioConfig,
    steps: usize,
    seed: u64,
    injection: &dyn Fn(usize) -> Option<DVector<f64>>,
) -> AxisRun {
    let (a, b, c, k) = (&model.a, &model.b, &model.c, &filter.k);
    let p = model.p();
    let w_f = psd_factor(&model.w);
    let r_f = psd_factor(&model.r);
    let e0_f = psd_factor(&filter.posterior_covariance(c));
    let mut rngs = [run_rng(seed, 0), run_rng(seed, 1)];
    let mut x: [DVector<f64>; 2] = std::array::from_fn(|ax| {
        let r = cfg.reference.axis(0.0, ax);
        DVector::from_vec(vec![r[0], r[1]])
    });
    let mut x_hat = x.clone();
    for ax in 0..2 {
        x[ax] += &e0_f * standard_normal(&mut rngs[ax], 2);
    }
    let mut detectors = [DetectorState::new(), DetectorState::new()];
    let mut out = AxisRun { errors: Vec::new(), positions: Vec::new(), estimates: Vec::new(), alarms: Vec::new() };
    for step in 1..=steps {
        let t_prev = (step - 1) as f64 * cfg.sampling_period;
        let mut alarm = false;
        for ax in 0..2 {
            let r = cfg.reference.axis(t_prev, ax);
            let x_ref = DVector::from_vec(vec![r[0], r[1]]);
            let u = DVector::from_element(1, r[2]) - gain * (&x_hat[ax] - x_ref);
            let w = &w_f * standard_normal(&mut rngs[ax], 2);
            let v = &r_f * standard_normal(&mut rngs[ax], p);
            x[ax] = a * &x[ax] + b * &u + w;
            let mut y = c * &x[ax] + v;
            if let Some(inj) = injection(step) {
                y += inj;
            }
            let pred = a * &x_hat[ax] + b * &u;
            let z = y - c * &pred;
            x_hat[ax] = &pred + k * &z;
            let energy = (z.transpose() * &filter.q_inv * &z)[(0, 0)];
            alarm |= detectors[ax].push(detector, energy, p) > detector.threshold_h;
        }
        out.errors.push([&x[0] - &x_hat[0], &x[1] - &x_hat[1]]);
        out.positions.push([x[0][0], x[1][0]]);
        out.estimates.push([x_hat[0][0], x_hat[1][0]]);
        out.alarms.push(alarm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_hits_requested_poles() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.01, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0001, 0.01]);
        let g = placement_gain(&a, &b, [0.9, 0.85]).unwrap();
        let mut eig: Vec<f64> = (a - b * g).complex_eigenvalues().iter().map(|z| z.re).collect();
        eig.sort_by(f64::total_cmp);
        assert!((eig[0] - 0.85).abs() < 1e-9 && (eig[1] - 0.9).abs() < 1e-9);
    }
}

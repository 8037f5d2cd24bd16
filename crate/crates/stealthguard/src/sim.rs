//! Seeded Monte Carlo simulation of plant, filter, detector and attacker.
//!
//! Run `r` draws from its own ChaCha stream `(seed, r)`, and runs are reduced
//! in fixed-size blocks combined in block order, so summaries are bit-identical
//! whatever the thread count.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attack::AttackSequence;
use crate::detector::{DetectorSpec, DetectorState};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{PlantModel, SteadyStateFilter};
use crate::policy::EnforcementPolicy;
use crate::reach::SupportPattern;

const BLOCK: usize = 256;

/// Square-root factor `F` with `F Fᵀ = M` for a PSD matrix (singular allowed).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let eig = SymmetricEigen::new(m.clone());
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

pub fn standard_normal(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

/// Per-run random stream.
pub fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

/// How a supplied attack meets the enforcement schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackMode {
    /// The attacker knows the schedule; the sequence is injected as given.
    PolicyAware,
    /// The attacker ignores the schedule; protected measurements drop the injection.
    PolicyUnaware(EnforcementPolicy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub run: usize,
    pub seed: u64,
    /// `x_k`, `k = 1..=steps`.
    pub x: Vec<Vec<f64>>,
    pub x_hat: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub alarm: Vec<bool>,
}

impl SimulationTrace {
    /// Posterior estimation error `x_k − x̂_k`.
    pub fn error(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.x[k - 1]) - DVector::from_column_slice(&self.x_hat[k - 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub k: usize,
    pub alarm_rate: f64,
    pub nominal_rate: f64,
    /// 3σ Wilson score interval around `alarm_rate`.
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_error: Vec<f64>,
    /// Row-major covariance of `x_k − x̂_k`.
    pub error_cov: Vec<f64>,
    /// Row-major covariance of the one-step prediction error `x_k − A x̂_{k−1}`.
    pub prediction_error_cov: Vec<f64>,
    pub residual_cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub per_step: Vec<StepStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub summary: SimulationSummary,
    /// The first `keep_traces` runs.
    pub traces: Vec<SimulationTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub keep_traces: usize,
    pub exec: Execution,
}

/// Wilson score interval with `z` standard errors.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let phat = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (phat + z2 / (2.0 * nf)) / denom;
    let half = z * (phat * (1.0 - phat) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Precomputed noise factors and filter matrices shared by all runs.
pub struct Simulator<'a> {
    model: &'a PlantModel,
    filter: &'a SteadyStateFilter,
    detector: &'a DetectorSpec,
    w_factor: DMatrix<f64>,
    r_factor: DMatrix<f64>,
    e0_factor: DMatrix<f64>,
}

struct RunOutput {
    x: Vec<DVector<f64>>,
    x_hat: Vec<DVector<f64>>,
    pred_err: Vec<DVector<f64>>,
    z: Vec<DVector<f64>>,
    g: Vec<f64>,
    alarm: Vec<bool>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a PlantModel, filter: &'a SteadyStateFilter, detector: &'a DetectorSpec) -> Result<Self> {
        if filter.n() != model.n() || filter.p() != model.p() {
            return Err(Error::Validation("filter dimensions do not match the model".into()));
        }
        detector.validate(model.p())?;
        Ok(Simulator {
            model,
            filter,
            detector,
            w_factor: psd_factor(&model.w),
            r_factor: psd_factor(&model.r),
            e0_factor: psd_factor(&filter.posterior_covariance(&model.c)),
        })
    }

    /// One closed-loop run (zero control input) from steady state with `x̂_0 = 0`.
    fn run(&self, seed: u64, run: usize, steps: usize, attack: &dyn Fn(usize) -> Option<DVector<f64>>) -> RunOutput {
        let (a, c, k) = (&self.model.a, &self.model.c, &self.filter.k);
        let (n, p) = (self.model.n(), self.model.p());
        let mut rng = run_rng(seed, run);
        let mut x = &self.e0_factor * standard_normal(&mut rng, n);
        let mut x_hat = DVector::zeros(n);
        let mut det = DetectorState::new();
        let mut out = RunOutput {
            x: Vec::with_capacity(steps),
            x_hat: Vec::with_capacity(steps),
            pred_err: Vec::with_capacity(steps),
            z: Vec::with_capacity(steps),
            g: Vec::with_capacity(steps),
            alarm: Vec::with_capacity(steps),
        };
        for step in 1..=steps {
            let w = &self.w_factor * standard_normal(&mut rng, n);
            let v = &self.r_factor * standard_normal(&mut rng, p);
            x = a * &x + w;
            let mut y = c * &x + v;
            if let Some(inj) = attack(step) {
                y += inj;
            }
            let pred = a * &x_hat;
            let z = y - c * &pred;
            x_hat = &pred + k * &z;
            let energy = (z.transpose() * &self.filter.q_inv * &z)[(0, 0)];
            let g = det.push(self.detector, energy, p);
            out.pred_err.push(&x - &pred);
            out.x.push(x.clone());
            out.x_hat.push(x_hat.clone());
            out.z.push(z);
            out.g.push(g);
            out.alarm.push(g > self.detector.threshold_h);
        }
        out
    }

    /// A single trace; identical `(seed, run)` gives a bit-identical trace.
    pub fn trace(
        &self,
        seed: u64,
        run: usize,
        steps: usize,
        attack: Option<&AttackSequence>,
        mode: &AttackMode,
    ) -> SimulationTrace {
        let injector = self.injector(attack, mode, steps);
        let out = self.run(seed, run, steps, &|j| injector(j));
        to_trace(seed, run, out)
    }

    fn injector<'b>(
        &self,
        attack: Option<&'b AttackSequence>,
        mode: &AttackMode,
        steps: usize,
    ) -> impl Fn(usize) -> Option<DVector<f64>> + Sync + 'b {
        let p = self.model.p();
        let protected: Option<SupportPattern> = match mode {
            AttackMode::PolicyAware => None,
            AttackMode::PolicyUnaware(policy) => Some(policy.pattern(&(0..p).collect::<Vec<_>>(), p, steps)),
        };
        move |j| {
            let a = attack?.at(j)?;
            let mut v = DVector::from_column_slice(a);
            if let Some(pat) = &protected {
                let allowed = pat.support(j);
                for i in 0..p {
                    if !allowed.contains(&i) {
                        v[i] = 0.0;
                    }
                }
            }
            Some(v)
        }
    }

    pub fn simulate(
        &self,
        attack: Option<&AttackSequence>,
        mode: &AttackMode,
        cfg: &SimConfig,
    ) -> Result<SimulationResult> {
        if cfg.runs == 0 || cfg.steps == 0 {
            return Err(Error::Validation("runs and steps must be positive".into()));
        }
        if let Some(att) = attack {
            if att.steps.first().is_some_and(|a| a.len() != self.model.p()) {
                return Err(Error::Validation("attack vectors do not match the number of sensors".into()));
            }
            if att.horizon > cfg.steps {
                return Err(Error::Validation(format!(
                    "attack horizon {} exceeds simulated steps {}",
                    att.horizon, cfg.steps
                )));
            }
        }
        let injector = self.injector(attack, mode, cfg.steps);
        let blocks = cfg.runs.div_ceil(BLOCK);
        let partials = cfg.exec.map_range(0..blocks, |b| {
            let mut acc = Accumulator::new(cfg.steps, self.model.n(), self.model.p());
            let mut kept = Vec::new();
            for run in b * BLOCK..((b + 1) * BLOCK).min(cfg.runs) {
                let out = self.run(cfg.seed, run, cfg.steps, &|j| injector(j));
                acc.add(&out);
                if run < cfg.keep_traces {
                    kept.push(to_trace(cfg.seed, run, out));
                }
            }
            (acc, kept)
        });
        let mut total = Accumulator::new(cfg.steps, self.model.n(), self.model.p());
        let mut traces = Vec::new();
        for (acc, kept) in partials {
            total.merge(&acc);
            traces.extend(kept);
        }
        let per_step = total.finish(self.detector, self.model.p());
        Ok(SimulationResult {
            summary: SimulationSummary { runs: cfg.runs, steps: cfg.steps, seed: cfg.seed, per_step },
            traces,
        })
    }
}

fn to_trace(seed: u64, run: usize, out: RunOutput) -> SimulationTrace {
    let v = |xs: Vec<DVector<f64>>| xs.into_iter().map(|x| x.as_slice().to_vec()).collect();
    SimulationTrace { run, seed, x: v(out.x), x_hat: v(out.x_hat), z: v(out.z), g: out.g, alarm: out.alarm }
}

/// Convenience wrapper over [`Simulator::simulate`].
pub fn simulate(
    model: &PlantModel,
    filter: &SteadyStateFilter,
    detector: &DetectorSpec,
    attack: Option<&AttackSequence>,
    mode: &AttackMode,
    cfg: &SimConfig,
) -> Result<SimulationResult> {
    Simulator::new(model, filter, detector)?.simulate(attack, mode, cfg)
}

struct Accumulator {
    runs: u64,
    alarms: Vec<u64>,
    e_sum: Vec<DVector<f64>>,
    e_outer: Vec<DMatrix<f64>>,
    pe_sum: Vec<DVector<f64>>,
    pe_outer: Vec<DMatrix<f64>>,
    z_sum: Vec<DVector<f64>>,
    z_outer: Vec<DMatrix<f64>>,
}

impl Accumulator {
    fn new(steps: usize, n: usize, p: usize) -> Self {
        Accumulator {
            runs: 0,
            alarms: vec![0; steps],
            e_sum: vec![DVector::zeros(n); steps],
            e_outer: vec![DMatrix::zeros(n, n); steps],
            pe_sum: vec![DVector::zeros(n); steps],
            pe_outer: vec![DMatrix::zeros(n, n); steps],
            z_sum: vec![DVector::zeros(p); steps],
            z_outer: vec![DMatrix::zeros(p, p); steps],
        }
    }

    fn add(&mut self, out: &RunOutput) {
        self.runs += 1;
        for i in 0..self.alarms.len() {
            self.alarms[i] += out.alarm[i] as u64;
            let e = &out.x[i] - &out.x_hat[i];
            self.e_outer[i] += &e * e.transpose();
            self.e_sum[i] += e;
            self.pe_outer[i] += &out.pred_err[i] * out.pred_err[i].transpose();
            self.pe_sum[i] += &out.pred_err[i];
            self.z_outer[i] += &out.z[i] * out.z[i].transpose();
            self.z_sum[i] += &out.z[i];
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.runs += other.runs;
        for i in 0..self.alarms.len() {
            self.alarms[i] += other.alarms[i];
            self.e_sum[i] += &other.e_sum[i];
            self.e_outer[i] += &other.e_outer[i];
            self.pe_sum[i] += &other.pe_sum[i];
            self.pe_outer[i] += &other.pe_outer[i];
            self.z_sum[i] += &other.z_sum[i];
            self.z_outer[i] += &other.z_outer[i];
        }
    }

    fn finish(&self, detector: &DetectorSpec, p: usize) -> Vec<StepStats> {
        let n = self.runs as f64;
        let cov = |sum: &DVector<f64>, outer: &DMatrix<f64>| -> Vec<f64> {
            let mean = sum / n;
            let c = (outer - &mean * mean.transpose() * n) / (n - 1.0).max(1.0);
            c.transpose().as_slice().to_vec()
        };
        (0..self.alarms.len())
            .map(|i| {
                let (ci_low, ci_high) = wilson_interval(self.alarms[i], self.runs, 3.0);
                StepStats {
                    k: i + 1,
                    alarm_rate: self.alarms[i] as f64 / n,
                    nominal_rate: detector.nominal_alarm_rate(p, i + 1),
                    ci_low,
                    ci_high,
                    mean_error: (&self.e_sum[i] / n).as_slice().to_vec(),
                    error_cov: cov(&self.e_sum[i], &self.e_outer[i]),
                    prediction_error_cov: cov(&self.pe_sum[i], &self.pe_outer[i]),
                    residual_cov: cov(&self.z_sum[i], &self.z_outer[i]),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::attack_response;
    use crate::model::solve_steady_state_filter;

    fn setup() -> (PlantModel, SteadyStateFilter, DetectorSpec) {
        let model = PlantModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.01, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0001, 0.01]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 2.0,
            DMatrix::identity(2, 2) * 0.1,
            None,
        )
        .unwrap();
        let filter = solve_steady_state_filter(&model).unwrap();
        let det = DetectorSpec::chi_square(0.015, 2).unwrap();
        (model, filter, det)
    }

    #[test]
    fn replay_is_bit_identical() {
        let (m, f, d) = setup();
        let sim = Simulator::new(&m, &f, &d).unwrap();
        let a = sim.trace(7, 3, 20, None, &AttackMode::PolicyAware);
        let b = sim.trace(7, 3, 20, None, &AttackMode::PolicyAware);
        assert_eq!(a, b);
        assert_ne!(a, sim.trace(7, 4, 20, None, &AttackMode::PolicyAware));
    }

    #[test]
    fn attacked_minus_clean_is_attack_response() {
        let (m, f, d) = setup();
        let sim = Simulator::new(&m, &f, &d).unwrap();
        let steps: Vec<Vec<f64>> = (0..12).map(|j| vec![0.1 * j as f64, -0.05]).collect();
        let att = AttackSequence {
            horizon: 12,
            target_step: 12,
            steps: steps.clone(),
            achieved_error: 0.0,
            alpha: 0.0,
            stealth_cost: 0.0,
            prefix_feasible: true,
        };
        let clean = sim.trace(11, 0, 12, None, &AttackMode::PolicyAware);
        let hit = sim.trace(11, 0, 12, Some(&att), &AttackMode::PolicyAware);
        let resp = attack_response(&f, &steps);
        for k in 1..=12 {
            let de = hit.error(k) - clean.error(k);
            assert!((de - &resp[k - 1].0).norm() < 1e-10);
            let dz = DVector::from_column_slice(&hit.z[k - 1]) - DVector::from_column_slice(&clean.z[k - 1]);
            assert!((dz - &resp[k - 1].1).norm() < 1e-10);
        }
    }

    #[test]
    fn summary_independent_of_execution() {
        let (m, f, d) = setup();
        let cfg = SimConfig { runs: 700, steps: 5, seed: 3, keep_traces: 2, exec: Execution::Sequential };
        let seq = simulate(&m, &f, &d, None, &AttackMode::PolicyAware, &cfg).unwrap();
        let par = simulate(&m, &f, &d, None, &AttackMode::PolicyAware, &SimConfig { exec: Execution::Parallel, ..cfg })
            .unwrap();
        assert_eq!(seq.summary, par.summary);
        assert_eq!(seq.traces, par.traces);
        assert_eq!(seq.traces.len(), 2);
    }

    #[test]
    fn unaware_mode_drops_protected_injections() {
        let (m, f, d) = setup();
        let sim = Simulator::new(&m, &f, &d).unwrap();
        let att = AttackSequence {
            horizon: 6,
            target_step: 6,
            steps: vec![vec![1.0, 1.0]; 6],
            achieved_error: 0.0,
            alpha: 0.0,
            stealth_cost: 0.0,
            prefix_feasible: true,
        };
        let policy = EnforcementPolicy::global(1, 3, None).unwrap();
        let aware = sim.trace(1, 0, 6, Some(&att), &AttackMode::PolicyAware);
        let unaware = sim.trace(1, 0, 6, Some(&att), &AttackMode::PolicyUnaware(policy));
        assert_eq!(aware.z[1], unaware.z[1]);
        assert_ne!(aware.z[2], unaware.z[2]);
    }

    #[test]
    fn wilson_bounds() {
        let (lo, hi) = wilson_interval(15, 1000, 3.0);
        assert!(lo < 0.015 && 0.015 < hi);
        assert_eq!(wilson_interval(0, 0, 3.0), (0.0, 1.0));
    }
}

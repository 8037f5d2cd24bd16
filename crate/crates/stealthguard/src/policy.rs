//! Intermittent integrity-enforcement policies, their evaluation, and synthesis
//! of the longest safe enforcement period.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorKind, DetectorSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg;
use crate::model::{AttackScenario, PlantModel, SteadyStateFilter};
use crate::reach::{max_expected_error, CurvePoint, RadiusSchedule, RegionSweep, StealthBudget, SupportPattern};
use crate::structure::structural_report;

/// Largest period tried by the synthesis loop.
pub const MAX_PERIOD: usize = 512;
/// Periods examined per evaluation before giving up on a fixpoint.
pub const MAX_PERIODS: usize = 200;
/// Horizon used when a pattern never enforces (no fixpoint to look for).
pub const UNENFORCED_HORIZON: usize = MAX_PERIOD;

/// Blocks of `f` attack-free steps starting at `t0, t0 + L, t0 + 2L, …`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub f: usize,
    pub period: usize,
    pub t0: usize,
}

impl BlockSchedule {
    /// `t0` defaults to the period.
    pub fn new(f: usize, period: usize, t0: Option<usize>) -> Result<Self> {
        let s = BlockSchedule { f, period, t0: t0.unwrap_or(period) };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || self.period == 0 {
            return Err(Error::Validation("block length f and period L must be at least 1".into()));
        }
        if !self.is_continuous() && self.t0 < 2 {
            return Err(Error::Validation(format!("first block start t0 must exceed 1, got {}", self.t0)));
        }
        Ok(())
    }

    /// `L ≤ f`: blocks overlap and every step is protected.
    pub fn is_continuous(&self) -> bool {
        self.period <= self.f
    }

    pub fn enforced(&self, j: usize) -> bool {
        self.is_continuous() || (j >= self.t0 && (j - self.t0) % self.period < self.f)
    }

    /// Block ends `≤ horizon`.
    pub fn block_ends(&self, horizon: usize) -> Vec<usize> {
        if self.is_continuous() {
            return (1..=horizon).collect();
        }
        (0..).map(|i| self.t0 + i * self.period + self.f - 1).take_while(|&t| t <= horizon).collect()
    }

    /// First block end at or after `k`.
    fn block_end_after(&self, k: usize) -> usize {
        if self.is_continuous() {
            return k;
        }
        let first = self.t0 + self.f - 1;
        if k <= first {
            first
        } else {
            first + (k - first).div_ceil(self.period) * self.period
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSchedule {
    pub sensor: usize,
    #[serde(flatten)]
    pub schedule: BlockSchedule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnforcementPolicy {
    None,
    Global(BlockSchedule),
    /// Per-sensor schedules; sensors without an entry are never protected.
    SensorWise {
        sensors: Vec<SensorSchedule>,
    },
}

impl EnforcementPolicy {
    pub fn global(f: usize, period: usize, t0: Option<usize>) -> Result<Self> {
        Ok(EnforcementPolicy::Global(BlockSchedule::new(f, period, t0)?))
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            EnforcementPolicy::None => Ok(()),
            EnforcementPolicy::Global(s) => s.validate(),
            EnforcementPolicy::SensorWise { sensors } => {
                for s in sensors {
                    if s.sensor >= p {
                        return Err(Error::Validation(format!("sensor index {} out of range (p = {p})", s.sensor)));
                    }
                    s.schedule.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Pattern repetition length (for phase-aligned containment checks).
    pub fn period(&self) -> Option<usize> {
        match self {
            EnforcementPolicy::None => None,
            EnforcementPolicy::Global(s) => Some(s.period),
            EnforcementPolicy::SensorWise { sensors } if sensors.is_empty() => None,
            EnforcementPolicy::SensorWise { sensors } => {
                Some(sensors.iter().fold(1, |acc, s| lcm(acc, s.schedule.period)))
            }
        }
    }

    fn anchor_after(&self, k: usize) -> usize {
        match self {
            EnforcementPolicy::None => k,
            EnforcementPolicy::Global(s) => s.block_end_after(k),
            EnforcementPolicy::SensorWise { sensors } => {
                sensors.iter().map(|s| s.schedule.block_end_after(k)).min().unwrap_or(k)
            }
        }
    }

    /// Per-step supports for steps `1..=horizon`, extended so every step in the
    /// horizon has an anchor inside the pattern.
    pub fn pattern(&self, compromised: &[usize], p: usize, horizon: usize) -> SupportPattern {
        let ext = if horizon == 0 { 0 } else { self.anchor_after(horizon).max(horizon) };
        let supports = (1..=ext)
            .map(|j| match self {
                EnforcementPolicy::None => compromised.to_vec(),
                EnforcementPolicy::Global(s) => {
                    if s.enforced(j) {
                        Vec::new()
                    } else {
                        compromised.to_vec()
                    }
                }
                EnforcementPolicy::SensorWise { sensors } => compromised
                    .iter()
                    .copied()
                    .filter(|&i| !sensors.iter().any(|s| s.sensor == i && s.schedule.enforced(j)))
                    .collect(),
            })
            .collect();
        let mut anchors: Vec<usize> = match self {
            EnforcementPolicy::None => Vec::new(),
            EnforcementPolicy::Global(s) => s.block_ends(ext),
            EnforcementPolicy::SensorWise { sensors } => {
                sensors.iter().flat_map(|s| s.schedule.block_ends(ext)).collect()
            }
        };
        anchors.sort_unstable();
        anchors.dedup();
        SupportPattern { p, compromised: compromised.to_vec(), supports, anchors }
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

impl fmt::Display for EnforcementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnforcementPolicy::None => write!(f, "none"),
            EnforcementPolicy::Global(s) => write!(f, "{}:{}:{}", s.f, s.period, s.t0),
            EnforcementPolicy::SensorWise { sensors } => {
                let parts: Vec<String> = sensors
                    .iter()
                    .map(|s| format!("{}@{}:{}:{}", s.sensor, s.schedule.f, s.schedule.period, s.schedule.t0))
                    .collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

/// `none`, `f:L` or `f:L:t0`.
impl FromStr for EnforcementPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(EnforcementPolicy::None);
        }
        let nums: std::result::Result<Vec<usize>, _> = s.split(':').map(|x| x.trim().parse::<usize>()).collect();
        let nums = nums.map_err(|_| Error::Validation(format!("policy '{s}' is not of the form f:L[:t0]")))?;
        match nums.as_slice() {
            [f, l] => EnforcementPolicy::global(*f, *l, None),
            [f, l, t0] => EnforcementPolicy::global(*f, *l, Some(*t0)),
            _ => Err(Error::Validation(format!("policy '{s}' is not of the form f:L[:t0]"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Safe,
    Unsafe,
    /// Iteration cap reached without a fixpoint and without exceeding the threshold.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyVerdict {
    pub status: VerdictStatus,
    pub sup_error: f64,
    pub threshold: f64,
    /// Last anchor before the region union stopped growing.
    pub fixpoint_horizon: Option<usize>,
    pub periods_examined: usize,
    /// Stealth radius of the first planning anchor.
    pub alpha: f64,
    pub curve: Vec<CurvePoint>,
}

impl PolicyVerdict {
    pub fn safe(&self) -> bool {
        self.status == VerdictStatus::Safe
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub schedule: RadiusSchedule,
    pub max_periods: usize,
    /// Stop at the first step whose bound exceeds the threshold.
    pub stop_when_unsafe: bool,
    pub exec: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            schedule: RadiusSchedule::FirstBlock,
            max_periods: MAX_PERIODS,
            stop_when_unsafe: true,
            exec: Execution::Parallel,
        }
    }
}

pub(crate) fn sprt_budget(
    detector: &DetectorSpec,
    scenario: &AttackScenario,
    p: usize,
    schedule: RadiusSchedule,
) -> Result<StealthBudget> {
    if detector.kind != DetectorKind::Sprt {
        return Err(Error::Validation(
            "reachable regions are defined for the cumulative SPRT detector; windowed detectors only get radius bounds"
                .into(),
        ));
    }
    Ok(StealthBudget::new(scenario.epsilon, detector.threshold_h, p, schedule))
}

/// Accumulate regions period by period until the per-phase regions of a new
/// period are contained in those of the previous one.
pub fn evaluate_policy(
    model: &PlantModel,
    filter: &SteadyStateFilter,
    detector: &DetectorSpec,
    scenario: &AttackScenario,
    policy: &EnforcementPolicy,
    safe_threshold: f64,
    opts: &EvalOptions,
) -> Result<PolicyVerdict> {
    let p = model.p();
    policy.validate(p)?;
    if !(safe_threshold > 0.0) {
        return Err(Error::Validation(format!("safety threshold must be positive, got {safe_threshold}")));
    }
    let budget = sprt_budget(detector, scenario, p, opts.schedule)?;
    let k_set = &scenario.compromised;
    let Some(period) = policy.period() else {
        let pattern = policy.pattern(k_set, p, UNENFORCED_HORIZON);
        let mut sweep = RegionSweep::new(filter, &pattern, budget, scenario.gamma);
        let regions = sweep.regions(1, UNENFORCED_HORIZON, opts.exec)?;
        let curve = to_curve(&pattern, &regions);
        let sup = regions.iter().map(|r| r.max_error()).fold(0.0, f64::max);
        let status = if sup <= safe_threshold { VerdictStatus::Safe } else { VerdictStatus::Unsafe };
        let alpha = regions.first().map(|r| r.alpha).unwrap_or(0.0);
        return Ok(PolicyVerdict {
            status,
            sup_error: sup,
            threshold: safe_threshold,
            fixpoint_horizon: None,
            periods_examined: 0,
            alpha,
            curve,
        });
    };
    let first_end = policy.anchor_after(1);
    let horizon = first_end + opts.max_periods * period;
    let pattern = policy.pattern(k_set, p, horizon);
    let mut sweep = RegionSweep::new(filter, &pattern, budget, scenario.gamma);

    let mut ys: Vec<DMatrix<f64>> = Vec::new();
    let mut curve = Vec::new();
    let mut sup: f64 = 0.0;
    let mut alpha = 0.0;
    let mut status = VerdictStatus::Unknown;
    let mut fixpoint = None;
    let mut periods = 0;
    let mut lo = 1;
    let mut hi = first_end;
    loop {
        let regions = sweep.regions(lo, hi, opts.exec)?;
        if lo == 1 {
            alpha = regions.first().map(|r| r.alpha).unwrap_or(0.0);
        }
        let mut contained = lo > 1;
        for r in &regions {
            let bound = r.max_error();
            sup = sup.max(bound);
            curve.push(CurvePoint {
                k: r.k,
                bound: max_expected_error(r),
                anchor: r.t_anchor,
                enforced: pattern.enforced(r.k),
            });
            if lo > 1 && contained {
                contained = if r.k > period {
                    linalg::lowner_leq(&r.y, &ys[r.k - period - 1])
                } else {
                    linalg::lowner_leq(&r.y, &DMatrix::zeros(r.y.nrows(), r.y.ncols()))
                };
            }
            ys.push(r.y.clone());
        }
        if sup > safe_threshold && opts.stop_when_unsafe {
            status = VerdictStatus::Unsafe;
            break;
        }
        if contained {
            fixpoint = Some(lo - 1);
            status = if sup <= safe_threshold { VerdictStatus::Safe } else { VerdictStatus::Unsafe };
            break;
        }
        if periods == opts.max_periods {
            if sup > safe_threshold {
                status = VerdictStatus::Unsafe;
            }
            break;
        }
        periods += 1;
        lo = hi + 1;
        hi += period;
    }
    Ok(PolicyVerdict {
        status,
        sup_error: sup,
        threshold: safe_threshold,
        fixpoint_horizon: fixpoint,
        periods_examined: periods,
        alpha,
        curve,
    })
}

fn to_curve(pattern: &SupportPattern, regions: &[crate::reach::ReachableRegion]) -> Vec<CurvePoint> {
    regions
        .iter()
        .map(|r| CurvePoint {
            k: r.k,
            bound: max_expected_error(r),
            anchor: r.t_anchor,
            enforced: pattern.enforced(r.k),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `L* + 1` was evaluated unsafe.
    FirstUnsafe,
    /// `L* + 1` hit the inner iteration cap; `L*` is kept conservatively.
    Inconclusive,
    /// Every period up to the cap was safe.
    PeriodCap,
    /// Stable system: no enforcement needed at all.
    NoEnforcementNeeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignStep {
    pub period: usize,
    pub status: VerdictStatus,
    pub sup_error: f64,
    pub fixpoint_horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOutcome {
    pub policy: EnforcementPolicy,
    pub f: usize,
    pub l_star: usize,
    pub verdict: PolicyVerdict,
    pub history: Vec<DesignStep>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignOptions {
    /// Override of the structurally required block length.
    pub f: Option<usize>,
    pub max_period: usize,
    pub eval: EvalOptions,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions { f: None, max_period: MAX_PERIOD, eval: EvalOptions::default() }
    }
}

/// Increase `L` from 1 and accept `L − 1` at the first unsafe period. Candidate
/// periods are evaluated in batches as wide as the executor; the acceptance rule
/// is still applied strictly in order.
pub fn design_periodic_policy(
    model: &PlantModel,
    filter: &SteadyStateFilter,
    detector: &DetectorSpec,
    scenario: &AttackScenario,
    safe_threshold: f64,
    opts: &DesignOptions,
) -> Result<DesignOutcome> {
    let structural = structural_report(model, Some(&scenario.compromised))?;
    let mut f = opts.f.unwrap_or(structural.f_required);
    // inner evaluations run sequentially; the batch provides the parallelism
    let inner = EvalOptions { exec: Execution::Sequential, ..opts.eval };
    if f == 0 {
        let verdict =
            evaluate_policy(model, filter, detector, scenario, &EnforcementPolicy::None, safe_threshold, &opts.eval)?;
        if verdict.safe() {
            return Ok(DesignOutcome {
                policy: EnforcementPolicy::None,
                f: 0,
                l_star: opts.max_period,
                verdict,
                history: Vec::new(),
                stop: StopReason::NoEnforcementNeeded,
            });
        }
        f = 1;
    }
    let mut history = Vec::new();
    let mut best: Option<PolicyVerdict> = None;
    let mut stop = StopReason::PeriodCap;
    let width = opts.eval.exec.width();
    let mut next = 1;
    'outer: while next <= opts.max_period {
        let batch: Vec<usize> = (next..=(next + width - 1).min(opts.max_period)).collect();
        next += batch.len();
        let results = opts.eval.exec.map(&batch, |&l| {
            let policy = EnforcementPolicy::global(f, l, None)?;
            evaluate_policy(model, filter, detector, scenario, &policy, safe_threshold, &inner)
        });
        for (&l, res) in batch.iter().zip(results) {
            let verdict = res?;
            history.push(DesignStep {
                period: l,
                status: verdict.status,
                sup_error: verdict.sup_error,
                fixpoint_horizon: verdict.fixpoint_horizon,
            });
            match verdict.status {
                VerdictStatus::Safe => best = Some(verdict),
                VerdictStatus::Unsafe => {
                    stop = StopReason::FirstUnsafe;
                    break 'outer;
                }
                VerdictStatus::Unknown => {
                    stop = StopReason::Inconclusive;
                    break 'outer;
                }
            }
        }
    }
    let Some(verdict) = best else {
        return Err(Error::NoFeasiblePolicy(format!(
            "period L = 1 with f = {f} already exceeds the threshold {safe_threshold}"
        )));
    };
    let l_star = history.iter().take_while(|s| s.status == VerdictStatus::Safe).count();
    Ok(DesignOutcome { policy: EnforcementPolicy::global(f, l_star, None)?, f, l_star, verdict, history, stop })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        assert_eq!("1:30:30".parse::<EnforcementPolicy>().unwrap().to_string(), "1:30:30");
        assert_eq!("2:20".parse::<EnforcementPolicy>().unwrap().to_string(), "2:20:20");
        assert_eq!("none".parse::<EnforcementPolicy>().unwrap(), EnforcementPolicy::None);
        assert!("1:x".parse::<EnforcementPolicy>().is_err());
        assert!("1:5:1".parse::<EnforcementPolicy>().is_err());
        assert!("0:5".parse::<EnforcementPolicy>().is_err());
    }

    #[test]
    fn global_pattern_layout() {
        let pol = EnforcementPolicy::global(2, 5, None).unwrap();
        let pat = pol.pattern(&[0, 1], 2, 12);
        // blocks {5,6}, {10,11}, {15,16}; step 12 plans until 16
        assert_eq!(pat.horizon(), 16);
        assert_eq!(pat.anchors, vec![6, 11, 16]);
        let enforced: Vec<usize> = (1..=16).filter(|&j| pat.enforced(j)).collect();
        assert_eq!(enforced, vec![5, 6, 10, 11, 15, 16]);
        assert_eq!(pat.support(1), &[0, 1]);
    }

    #[test]
    fn continuous_policy_enforces_everything() {
        let pol = EnforcementPolicy::global(3, 2, None).unwrap();
        let pat = pol.pattern(&[0], 1, 4);
        assert!((1..=4).all(|j| pat.enforced(j)));
        assert_eq!(pat.anchor_for(3).unwrap(), 3);
    }

    #[test]
    fn sensor_wise_pattern() {
        let pol = EnforcementPolicy::SensorWise {
            sensors: vec![
                SensorSchedule { sensor: 0, schedule: BlockSchedule::new(1, 3, None).unwrap() },
                SensorSchedule { sensor: 1, schedule: BlockSchedule::new(1, 2, None).unwrap() },
            ],
        };
        assert_eq!(pol.period(), Some(6));
        let pat = pol.pattern(&[0, 1], 2, 6);
        assert_eq!(pat.support(2), &[0]);
        assert_eq!(pat.support(3), &[1]);
        assert_eq!(pat.support(5), &[0, 1]);
        assert_eq!(pat.support(6), &[] as &[usize]);
        assert_eq!(pat.anchors, vec![2, 3, 4, 6]);
    }
}

//! Reachable estimation-error regions under a stealthiness budget.
//!
//! Attack effects follow `Δe_k = (A − KCA)Δe_{k−1} − K a_k`,
//! `Δz_k = CAΔe_{k−1} + a_k` with `Δe_0 = 0`. Two routes compute the same
//! ellipsoids: the dense one builds the stacked maps and the Gram matrix `Θ_t`
//! explicitly; the sweep folds them into an `n × n` forward Gramian and a
//! backward cost-to-go, which keeps long horizons at `O(t·n³)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detector::sprt_radius;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::{self, select_block, select_columns, select_rows, selection, symmetrize};
use crate::model::SteadyStateFilter;

/// Per-step compromised supports `K̃_1..K̃_t` and enforcement-block ends.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportPattern {
    pub p: usize,
    pub compromised: Vec<usize>,
    /// `supports[j − 1] = K̃_j`.
    pub supports: Vec<Vec<usize>>,
    /// Ascending ends of enforcement blocks inside the horizon.
    pub anchors: Vec<usize>,
}

impl SupportPattern {
    /// Pattern with every step attackable on all of `compromised`.
    pub fn unenforced(p: usize, compromised: &[usize], horizon: usize) -> Self {
        SupportPattern {
            p,
            compromised: compromised.to_vec(),
            supports: vec![compromised.to_vec(); horizon],
            anchors: Vec::new(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.supports.len()
    }

    pub fn support(&self, j: usize) -> &[usize] {
        &self.supports[j - 1]
    }

    /// `|Q_k| = Σ_{i≤k} |K̃_i|`.
    pub fn cumulative_size(&self, k: usize) -> usize {
        self.supports[..k].iter().map(Vec::len).sum()
    }

    pub fn first_block_end(&self) -> Option<usize> {
        self.anchors.first().copied()
    }

    /// End of the first enforcement block at or after `k`; `k` itself when the
    /// pattern has no enforcement at all.
    pub fn anchor_for(&self, k: usize) -> Result<usize> {
        if self.anchors.is_empty() {
            return Ok(k);
        }
        self.anchors.iter().copied().find(|&t| t >= k).ok_or_else(|| {
            Error::Validation(format!("pattern of horizon {} has no anchor for step {k}", self.horizon()))
        })
    }

    pub fn enforced(&self, j: usize) -> bool {
        self.supports[j - 1].len() < self.compromised.len()
    }
}

/// How the cumulative stealth radius is tied to the planning anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusSchedule {
    /// Radius fixed at the end of the first enforcement block for every anchor.
    #[default]
    FirstBlock,
    /// Radius recomputed as `α(ε, tp, 2h + tp)` at each anchor `t`.
    PerAnchor,
}

/// SPRT stealthiness budget: slack `ε`, threshold `h`, residual dimension `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StealthBudget {
    pub epsilon: f64,
    pub h: f64,
    pub p: usize,
    pub schedule: RadiusSchedule,
}

impl StealthBudget {
    pub fn new(epsilon: f64, h: f64, p: usize, schedule: RadiusSchedule) -> Self {
        StealthBudget { epsilon, h, p, schedule }
    }

    /// Step whose cumulative radius governs attacks planned until `anchor`.
    pub fn radius_step(&self, pattern: &SupportPattern, anchor: usize) -> usize {
        match (self.schedule, pattern.first_block_end()) {
            (RadiusSchedule::FirstBlock, Some(t1)) => t1,
            _ => anchor,
        }
    }

    pub fn alpha(&self, pattern: &SupportPattern, anchor: usize) -> Result<f64> {
        sprt_radius(self.epsilon, self.p, self.h, self.radius_step(pattern, anchor))
    }
}

/// Centered ellipsoid `{e : eᵀY⁻¹e ≤ 1}` of estimation errors reachable at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachableRegion {
    /// `Ỹ_k + γΣ`.
    pub y: DMatrix<f64>,
    /// Attack-only part `Ỹ_k`.
    pub y_attack: DMatrix<f64>,
    pub gamma: f64,
    pub k: usize,
    pub t_anchor: usize,
    pub alpha: f64,
    /// Condition number of `Θ_t` when the dense route was used.
    pub theta_condition: Option<f64>,
}

impl ReachableRegion {
    /// Largest semi-axis of the full region, `√λ_max(Y)`.
    pub fn max_error(&self) -> f64 {
        semi_axis(&self.y)
    }
}

fn semi_axis(y: &DMatrix<f64>) -> f64 {
    linalg::max_eigenvalue(y).max(0.0).sqrt()
}

/// Worst expected estimation error `√λ_max(Ỹ_k)` of the attack-only ellipsoid.
pub fn max_expected_error(region: &ReachableRegion) -> f64 {
    semi_axis(&region.y_attack)
}

/// Same-center ellipsoid containment: `Y_inner ⪯ Y_outer`.
pub fn region_contained(inner: &ReachableRegion, outer: &ReachableRegion) -> bool {
    linalg::lowner_leq(&inner.y, &outer.y)
}

fn check_step(pattern: &SupportPattern, k: usize) -> Result<()> {
    if k == 0 || k > pattern.horizon() {
        return Err(Error::Validation(format!("step {k} outside pattern horizon 1..={}", pattern.horizon())));
    }
    Ok(())
}

/// `M_k P†_{Q_k} = [(A−KCA)^{k−1} K P†_{K̃₁} | … | K P†_{K̃_k}]`, so that `Δe_k = −M_k P† a`.
pub fn error_map(filter: &SteadyStateFilter, pattern: &SupportPattern, k: usize) -> Result<DMatrix<f64>> {
    check_step(pattern, k)?;
    let n = filter.n();
    let mut m = DMatrix::zeros(n, 0);
    for j in 1..=k {
        let block = select_columns(&filter.k, pattern.support(j));
        let prev = &filter.f * &m;
        m = hcat(&prev, &block);
    }
    Ok(m)
}

/// `N_k P†_{Q_k} = [−CA M_{k−1} P†_{Q_{k−1}} | P†_{K̃_k}]`, so that `Δz_k = N_k P† a`.
pub fn residual_map(filter: &SteadyStateFilter, pattern: &SupportPattern, k: usize) -> Result<DMatrix<f64>> {
    check_step(pattern, k)?;
    let prev = if k == 1 { DMatrix::zeros(filter.n(), 0) } else { error_map(filter, pattern, k - 1)? };
    Ok(hcat(&(-&filter.ca * prev), &selection(pattern.p, pattern.support(k))))
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

/// Stealthiness Gram matrix `Θ_t = Σ_τ [N_τ P† 0]ᵀ Q⁻¹ [N_τ P† 0]`, built incrementally.
pub fn theta_matrix(filter: &SteadyStateFilter, pattern: &SupportPattern, t: usize) -> Result<DMatrix<f64>> {
    check_step(pattern, t)?;
    let size = pattern.cumulative_size(t);
    let mut theta = DMatrix::zeros(size, size);
    let mut m_prev = DMatrix::zeros(filter.n(), 0);
    for tau in 1..=t {
        let sel = selection(pattern.p, pattern.support(tau));
        let n_tau = hcat(&(-&filter.ca * &m_prev), &sel);
        let cols = n_tau.ncols();
        let contrib = n_tau.transpose() * &filter.q_inv * &n_tau;
        let mut view = theta.view_mut((0, 0), (cols, cols));
        view += contrib;
        m_prev = hcat(&(&filter.f * &m_prev), &select_columns(&filter.k, pattern.support(tau)));
    }
    Ok(symmetrize(&theta))
}

fn theta_condition(theta: &DMatrix<f64>) -> f64 {
    let eig = linalg::sym_eigenvalues(theta);
    let (lo, hi) = (eig.min(), eig.max());
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Dense evaluation of the step-`k` region planned until its anchor.
pub fn reachable_region(
    filter: &SteadyStateFilter,
    pattern: &SupportPattern,
    budget: &StealthBudget,
    k: usize,
    gamma: f64,
) -> Result<ReachableRegion> {
    check_step(pattern, k)?;
    let t = pattern.anchor_for(k)?;
    check_step(pattern, t)?;
    let n = filter.n();
    let alpha = budget.alpha(pattern, t)?;
    let size_t = pattern.cumulative_size(t);
    let (y_attack, theta_condition) = if size_t == 0 {
        (DMatrix::zeros(n, n), None)
    } else {
        let theta = theta_matrix(filter, pattern, t)?;
        let cond = theta_condition(&theta);
        let m_k = error_map(filter, pattern, k)?;
        let mut e_bar = DMatrix::zeros(n, size_t);
        e_bar.view_mut((0, 0), m_k.shape()).copy_from(&m_k);
        let chol = theta
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("Θ_{t} is not positive definite (condition {cond:.3e})")))?;
        let l = chol.l();
        let x = l
            .solve_lower_triangular(&e_bar.transpose())
            .ok_or_else(|| Error::Numerical("triangular solve against Θ failed".into()))?;
        (symmetrize(&(x.transpose() * x)) * (alpha * alpha), Some(cond))
    };
    let y = &y_attack + &filter.sigma * gamma;
    Ok(ReachableRegion { y, y_attack, gamma, k, t_anchor: t, alpha, theta_condition })
}

fn complement(p: usize, s: &[usize]) -> Vec<usize> {
    (0..p).filter(|i| !s.contains(i)).collect()
}

/// One step of the forward Gramian `P_k = E_k Θ_k⁻¹ E_kᵀ` (minimum stealth
/// cost of reaching each error direction by step `k`).
pub fn forward_step(filter: &SteadyStateFilter, p_prev: &DMatrix<f64>, support: &[usize]) -> Result<DMatrix<f64>> {
    let p = filter.p();
    let c = complement(p, support);
    let ks = select_columns(&filter.k, support);
    let phi = &filter.f + &ks * select_rows(&filter.ca, support);
    let q_ss = select_block(&filter.q, support, support);
    let cx = &phi * p_prev * phi.transpose() + &ks * q_ss * ks.transpose();
    if c.is_empty() {
        return Ok(symmetrize(&cx));
    }
    let h = select_rows(&filter.ca, &c);
    let cy = &h * p_prev * h.transpose() + select_block(&filter.q, &c, &c);
    let cxy = &phi * p_prev * h.transpose() + &ks * select_block(&filter.q, support, &c);
    let gain = linalg::spd_solve(&cy, &cxy.transpose(), "residual conditioning block")?;
    Ok(symmetrize(&(cx - cxy * gain)))
}

/// One step back of the stealth cost-to-go: `S_{j−1}` from `S_j` and `K̃_j`.
pub fn backward_step(filter: &SteadyStateFilter, s_next: &DMatrix<f64>, support: &[usize]) -> Result<DMatrix<f64>> {
    let (f, ca, q_inv) = (&filter.f, &filter.ca, &filter.q_inv);
    let base = ca.transpose() * q_inv * ca + f.transpose() * s_next * f;
    if support.is_empty() {
        return Ok(symmetrize(&base));
    }
    let g_sel = selection(filter.p(), support);
    let kg = &filter.k * &g_sel;
    let hb = g_sel.transpose() * q_inv * &g_sel + kg.transpose() * s_next * &kg;
    let g = g_sel.transpose() * q_inv * ca - kg.transpose() * s_next * f;
    let sol = linalg::spd_solve(&hb, &g, "attack cost Hessian")?;
    Ok(symmetrize(&(base - g.transpose() * sol)))
}

/// `α² P (I + S P)⁻¹`.
fn combine(p: &DMatrix<f64>, s: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    let m = DMatrix::identity(n, n) + s * p;
    let xt =
        m.transpose().lu().solve(p).ok_or_else(|| Error::Numerical("singular forward/backward combination".into()))?;
    Ok(symmetrize(&xt.transpose()) * (alpha * alpha))
}

/// One point of an error curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub bound: f64,
    pub anchor: usize,
    pub enforced: bool,
}

/// Incremental region evaluation along a pattern using the two-filter form.
#[derive(Debug, Clone)]
pub struct RegionSweep<'a> {
    filter: &'a SteadyStateFilter,
    pattern: &'a SupportPattern,
    budget: StealthBudget,
    gamma: f64,
    /// `forward[k] = P_k`, starting from `P_0 = 0`.
    forward: Vec<DMatrix<f64>>,
}

impl<'a> RegionSweep<'a> {
    pub fn new(filter: &'a SteadyStateFilter, pattern: &'a SupportPattern, budget: StealthBudget, gamma: f64) -> Self {
        let n = filter.n();
        RegionSweep { filter, pattern, budget, gamma, forward: vec![DMatrix::zeros(n, n)] }
    }

    fn extend_forward(&mut self, upto: usize) -> Result<()> {
        while self.forward.len() <= upto {
            let j = self.forward.len();
            let next = forward_step(self.filter, &self.forward[j - 1], self.pattern.support(j))?;
            self.forward.push(next);
        }
        Ok(())
    }

    /// Regions for steps `lo..=hi`, grouped by anchor; backward passes for
    /// distinct anchors run under `exec`.
    pub fn regions(&mut self, lo: usize, hi: usize, exec: Execution) -> Result<Vec<ReachableRegion>> {
        check_step(self.pattern, lo)?;
        check_step(self.pattern, hi)?;
        let mut groups: Vec<(usize, usize, usize)> = Vec::new();
        for k in lo..=hi {
            let t = self.pattern.anchor_for(k)?;
            check_step(self.pattern, t)?;
            match groups.last_mut() {
                Some((_, last, anchor)) if *anchor == t => *last = k,
                _ => groups.push((k, k, t)),
            }
        }
        let far = groups.iter().map(|g| g.2).max().unwrap_or(hi);
        self.extend_forward(far)?;
        let this = &*self;
        let batches = exec.map(&groups, |&(first, last, anchor)| this.anchor_group(first, last, anchor));
        let mut out = Vec::with_capacity(hi + 1 - lo);
        for batch in batches {
            out.extend(batch?);
        }
        Ok(out)
    }

    fn anchor_group(&self, first: usize, last: usize, anchor: usize) -> Result<Vec<ReachableRegion>> {
        let n = self.filter.n();
        let alpha = self.budget.alpha(self.pattern, anchor)?;
        let mut s = DMatrix::zeros(n, n);
        let mut rev = Vec::with_capacity(last + 1 - first);
        for j in (first..=anchor).rev() {
            if j <= last {
                let y_attack = combine(&self.forward[j], &s, alpha)?;
                let y = &y_attack + &self.filter.sigma * self.gamma;
                rev.push(ReachableRegion {
                    y,
                    y_attack,
                    gamma: self.gamma,
                    k: j,
                    t_anchor: anchor,
                    alpha,
                    theta_condition: None,
                });
            }
            if j > first {
                s = backward_step(self.filter, &s, self.pattern.support(j))?;
            }
        }
        rev.reverse();
        Ok(rev)
    }
}

/// Worst expected error at every step `1..=horizon` (attack-only, `√λ_max(Ỹ_k)`).
pub fn error_curve(
    filter: &SteadyStateFilter,
    pattern: &SupportPattern,
    budget: &StealthBudget,
    horizon: usize,
    exec: Execution,
) -> Result<Vec<CurvePoint>> {
    if horizon == 0 {
        return Ok(Vec::new());
    }
    let mut sweep = RegionSweep::new(filter, pattern, *budget, 0.0);
    let regions = sweep.regions(1, horizon, exec)?;
    Ok(regions
        .iter()
        .map(|r| CurvePoint {
            k: r.k,
            bound: max_expected_error(r),
            anchor: r.t_anchor,
            enforced: pattern.enforced(r.k),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{solve_steady_state_filter, PlantModel};
    use approx::assert_relative_eq;

    fn vehicle() -> SteadyStateFilter {
        let model = PlantModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.01, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0001, 0.01]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 2.0,
            DMatrix::identity(2, 2) * 0.1,
            None,
        )
        .unwrap();
        solve_steady_state_filter(&model).unwrap()
    }

    fn periodic(p: usize, horizon: usize, f: usize, l: usize) -> SupportPattern {
        let all: Vec<usize> = (0..p).collect();
        let enforced = |j: usize| j >= l && (j - l) % l < f;
        SupportPattern {
            p,
            compromised: all.clone(),
            supports: (1..=horizon).map(|j| if enforced(j) { vec![] } else { all.clone() }).collect(),
            anchors: (0..).map(|i| l + i * l + f - 1).take_while(|&t| t <= horizon).collect(),
        }
    }

    /// Direct simulation of the attack dynamics for stacked support-restricted attacks.
    fn simulate(
        filter: &SteadyStateFilter,
        pattern: &SupportPattern,
        a: &[f64],
        k: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = filter.n();
        let mut de = DMatrix::zeros(n, 1);
        let mut dz = DMatrix::zeros(filter.p(), 1);
        let mut idx = 0;
        for j in 1..=k {
            let mut aj = DMatrix::zeros(filter.p(), 1);
            for &s in pattern.support(j) {
                aj[(s, 0)] = a[idx];
                idx += 1;
            }
            dz = &filter.ca * &de + &aj;
            de = &filter.f * &de - &filter.k * &aj;
        }
        (de, dz)
    }

    #[test]
    fn first_error_block_is_gain_columns() {
        let f = vehicle();
        let pat = SupportPattern::unenforced(2, &[1], 3);
        let m = error_map(&f, &pat, 1).unwrap();
        assert_eq!(m, f.k.columns(1, 1).into_owned());
        let n1 = residual_map(&f, &pat, 1).unwrap();
        assert_eq!(n1, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
    }

    #[test]
    fn maps_reproduce_impulse_responses() {
        let f = vehicle();
        let pat = periodic(2, 6, 1, 3);
        for k in 1..=6 {
            let m = error_map(&f, &pat, k).unwrap();
            let nmap = residual_map(&f, &pat, k).unwrap();
            let size = pat.cumulative_size(k);
            assert_eq!(m.ncols(), size);
            for col in 0..size {
                let mut a = vec![0.0; size];
                a[col] = 1.0;
                let (de, dz) = simulate(&f, &pat, &a, k);
                for r in 0..2 {
                    assert!((de[(r, 0)] + m[(r, col)]).abs() < 1e-12);
                    assert!((dz[(r, 0)] - nmap[(r, col)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn theta_incremental_identity() {
        let f = vehicle();
        let pat = periodic(2, 8, 1, 3);
        let t7 = theta_matrix(&f, &pat, 7).unwrap();
        let t8 = theta_matrix(&f, &pat, 8).unwrap();
        let n8 = residual_map(&f, &pat, 8).unwrap();
        let mut embedded = DMatrix::zeros(t8.nrows(), t8.ncols());
        embedded.view_mut((0, 0), t7.shape()).copy_from(&t7);
        let diff = t8 - embedded - n8.transpose() * &f.q_inv * n8;
        assert!(diff.norm() < 1e-10);
    }

    #[test]
    fn theta_one_is_identity_for_unit_residual_covariance() {
        let mut f = vehicle();
        f.q = DMatrix::identity(2, 2);
        f.q_inv = DMatrix::identity(2, 2);
        let pat = SupportPattern::unenforced(2, &[0, 1], 1);
        assert_eq!(theta_matrix(&f, &pat, 1).unwrap(), DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn sweep_matches_dense_route() {
        let f = vehicle();
        let pat = periodic(2, 26, 1, 6);
        for schedule in [RadiusSchedule::FirstBlock, RadiusSchedule::PerAnchor] {
            let budget = StealthBudget::new(0.001, 3.2, 2, schedule);
            let mut sweep = RegionSweep::new(&f, &pat, budget, 0.3);
            let fast = sweep.regions(1, 23, Execution::Sequential).unwrap();
            for r in &fast {
                let dense = reachable_region(&f, &pat, &budget, r.k, 0.3).unwrap();
                assert_eq!(dense.t_anchor, r.t_anchor);
                assert!((&dense.y - &r.y).norm() <= 1e-9 * (1.0 + dense.y.norm()), "k = {}", r.k);
            }
        }
    }

    #[test]
    fn gamma_shifts_by_sigma() {
        let f = vehicle();
        let pat = periodic(2, 10, 1, 4);
        let b = StealthBudget::new(0.001, 3.2, 2, RadiusSchedule::FirstBlock);
        let r0 = reachable_region(&f, &pat, &b, 5, 0.0).unwrap();
        let r1 = reachable_region(&f, &pat, &b, 5, 0.25).unwrap();
        assert!((&r1.y - &r0.y - &f.sigma * 0.25).norm() < 1e-12);
        assert_relative_eq!(max_expected_error(&r0), max_expected_error(&r1), epsilon = 1e-12);
    }

    #[test]
    fn fully_enforced_prefix_gives_empty_region() {
        let f = vehicle();
        let pat =
            SupportPattern { p: 2, compromised: vec![0, 1], supports: vec![vec![]; 4], anchors: vec![1, 2, 3, 4] };
        let b = StealthBudget::new(0.001, 3.2, 2, RadiusSchedule::FirstBlock);
        let r = reachable_region(&f, &pat, &b, 3, 0.0).unwrap();
        assert_eq!(max_expected_error(&r), 0.0);
        let curve = error_curve(&f, &pat, &b, 4, Execution::Sequential).unwrap();
        assert!(curve.iter().all(|c| c.bound == 0.0));
    }

    #[test]
    fn semi_axis_examples() {
        let mk = |y: DMatrix<f64>| ReachableRegion {
            y: y.clone(),
            y_attack: y,
            gamma: 0.0,
            k: 1,
            t_anchor: 1,
            alpha: 1.0,
            theta_condition: None,
        };
        assert_relative_eq!(max_expected_error(&mk(DMatrix::identity(2, 2))), 1.0);
        assert_relative_eq!(max_expected_error(&mk(DMatrix::from_diagonal(&nalgebra::dvector![4.0, 1.0]))), 2.0);
    }

    #[test]
    fn anchor_lookup() {
        let pat = periodic(2, 20, 2, 5);
        assert_eq!(pat.anchors, vec![6, 11, 16]);
        assert_eq!(pat.anchor_for(1).unwrap(), 6);
        assert_eq!(pat.anchor_for(7).unwrap(), 11);
        assert!(pat.anchor_for(17).is_err());
        assert_eq!(SupportPattern::unenforced(1, &[0], 5).anchor_for(4).unwrap(), 4);
    }
}

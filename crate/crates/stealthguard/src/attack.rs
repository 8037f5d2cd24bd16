//! Closed-form worst-case stealthy attack sequences.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SteadyStateFilter;
use crate::reach::{error_map, theta_matrix, StealthBudget, SupportPattern};

/// Slack allowed when re-checking prefix stealth constraints.
const PREFIX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSequence {
    /// Planning horizon (the anchor of the target step).
    pub horizon: usize,
    pub target_step: usize,
    /// `a_1..a_t` as full `p`-vectors, zero outside each step's support.
    pub steps: Vec<Vec<f64>>,
    /// `‖Δe_k‖₂` of the noise-free attack response at the target step.
    pub achieved_error: f64,
    pub alpha: f64,
    /// `√(Σ_τ≤t ‖Δz_τ‖²_{Q⁻¹})`.
    pub stealth_cost: f64,
    /// Every prefix `τ < t` respects its scheduled radius.
    pub prefix_feasible: bool,
}

impl AttackSequence {
    pub fn zero(p: usize, horizon: usize, target_step: usize, alpha: f64) -> Self {
        AttackSequence {
            horizon,
            target_step,
            steps: vec![vec![0.0; p]; horizon],
            achieved_error: 0.0,
            alpha,
            stealth_cost: 0.0,
            prefix_feasible: true,
        }
    }

    /// Injection at step `j` (1-based); zero past the horizon.
    pub fn at(&self, j: usize) -> Option<&[f64]> {
        if j == 0 {
            return None;
        }
        self.steps.get(j - 1).map(Vec::as_slice)
    }
}

/// Noise-free attack response: `(Δe_j, Δz_j)` for `j = 1..=steps.len()`.
pub fn attack_response(filter: &SteadyStateFilter, steps: &[Vec<f64>]) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut de = DVector::zeros(filter.n());
    steps
        .iter()
        .map(|a| {
            let a = DVector::from_column_slice(a);
            let dz = &filter.ca * &de + &a;
            de = &filter.f * &de - &filter.k * &a;
            (de.clone(), dz)
        })
        .collect()
}

/// Maximize `‖Δe_k‖₂` subject to `‖P a‖_{Θ_t} ≤ α` at the anchor `t` of `k`.
pub fn synthesize_worst_attack(
    filter: &SteadyStateFilter,
    pattern: &SupportPattern,
    budget: &StealthBudget,
    k: usize,
) -> Result<AttackSequence> {
    if k == 0 || k > pattern.horizon() {
        return Err(Error::Validation(format!("target step {k} outside pattern horizon")));
    }
    let t = pattern.anchor_for(k)?;
    if t > pattern.horizon() {
        return Err(Error::Validation(format!("pattern does not cover anchor {t} of step {k}")));
    }
    let p = pattern.p;
    let alpha = budget.alpha(pattern, t)?;
    let size_t = pattern.cumulative_size(t);
    let size_k = pattern.cumulative_size(k);
    if size_k == 0 || alpha == 0.0 {
        return Ok(AttackSequence::zero(p, t, k, alpha));
    }
    let theta = theta_matrix(filter, pattern, t)?;
    let l = theta.cholesky().ok_or_else(|| Error::Numerical(format!("Θ_{t} is not positive definite")))?.l();
    let m_k = error_map(filter, pattern, k)?;
    let mut e_bar = DMatrix::zeros(filter.n(), size_t);
    e_bar.view_mut((0, 0), m_k.shape()).copy_from(&m_k);
    // B = Ē L⁻ᵀ; its top right singular vector is the worst whitened attack.
    let x = l
        .solve_lower_triangular(&e_bar.transpose())
        .ok_or_else(|| Error::Numerical("triangular solve against Θ failed".into()))?;
    let gram = x.transpose() * &x;
    let eig = SymmetricEigen::new(gram);
    let (imax, &lmax) = eig.eigenvalues.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("n ≥ 1");
    if lmax <= 0.0 {
        return Ok(AttackSequence::zero(p, t, k, alpha));
    }
    let u1 = eig.eigenvectors.column(imax).into_owned();
    let v1 = (&x * u1) / lmax.sqrt();
    let b = v1 * alpha;
    let stacked = l
        .transpose()
        .solve_upper_triangular(&b)
        .ok_or_else(|| Error::Numerical("triangular solve against Θ failed".into()))?;

    let mut steps = Vec::with_capacity(t);
    let mut idx = 0;
    for j in 1..=t {
        let mut a = vec![0.0; p];
        for &s in pattern.support(j) {
            a[s] = stacked[idx];
            idx += 1;
        }
        steps.push(a);
    }
    let response = attack_response(filter, &steps);
    let achieved_error = response[k - 1].0.norm();
    let mut energy = 0.0;
    let mut prefix_feasible = true;
    for (i, (_, dz)) in response.iter().enumerate() {
        energy += (dz.transpose() * &filter.q_inv * dz)[(0, 0)];
        let tau = i + 1;
        if tau < t {
            let a_tau = budget.alpha(pattern, tau)?;
            if energy.sqrt() > a_tau * (1.0 + PREFIX_TOL) {
                prefix_feasible = false;
            }
        }
    }
    Ok(AttackSequence {
        horizon: t,
        target_step: k,
        steps,
        achieved_error,
        alpha,
        stealth_cost: energy.sqrt(),
        prefix_feasible,
    })
}

//! Plant model, steady-state Kalman filter and attack scenario.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, checked_symmetric, spd_solve, symmetrize};

/// Relative convergence tolerance of the Riccati fixed-point iteration.
pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITER: usize = 1_000_000;
/// Rank tolerance for observability/controllability decisions.
pub const RANK_TOL: f64 = 1e-9;

/// Discrete LTI plant `x⁺ = Ax + Bu + w`, `y = Cx + v` with `w ~ N(0, W)`, `v ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sensor_names: Vec<String>,
}

impl PlantModel {
    /// Validates dimensions, covariance definiteness and observability.
    /// Covariances are symmetrized after the tolerance check.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        w: DMatrix<f64>,
        r: DMatrix<f64>,
        sensor_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = a.nrows();
        let p = c.nrows();
        if n == 0 || b.ncols() == 0 || p == 0 {
            return Err(Error::Validation("n, m and p must all be at least 1".into()));
        }
        if !a.is_square() {
            return Err(Error::Validation(format!("A must be square, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Validation(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if c.ncols() != n {
            return Err(Error::Validation(format!("C has {} columns, expected {n}", c.ncols())));
        }
        if w.shape() != (n, n) {
            return Err(Error::Validation(format!("W must be {n}x{n}")));
        }
        if r.shape() != (p, p) {
            return Err(Error::Validation(format!("R must be {p}x{p}")));
        }
        let all_finite = [&a, &b, &c, &w, &r].iter().all(|m| m.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(Error::Validation("matrices must contain finite entries".into()));
        }
        let w = checked_symmetric(&w, "W")?;
        let r = checked_symmetric(&r, "R")?;
        if !linalg::is_psd(&w) {
            return Err(Error::Validation("W must be positive semidefinite".into()));
        }
        if r.clone().cholesky().is_none() || linalg::min_eigenvalue(&r) <= 0.0 {
            return Err(Error::Validation("R must be positive definite".into()));
        }
        let sensor_names = match sensor_names {
            Some(names) if names.len() != p => {
                return Err(Error::Validation(format!("{} sensor names for {p} outputs", names.len())))
            }
            Some(names) => names,
            None => (0..p).map(|i| format!("y{}", i + 1)).collect(),
        };
        let model = PlantModel { a, b, c, w, r, sensor_names };
        if model.observability_rank(n) < n {
            return Err(Error::Unobservable("(A, C) is not observable".into()));
        }
        Ok(model)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// `[C; CA; …; CA^{blocks−1}]`.
    pub fn observability_matrix(&self, blocks: usize) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p());
        let mut o = DMatrix::zeros(blocks * p, n);
        let mut row = self.c.clone();
        for i in 0..blocks {
            o.view_mut((i * p, 0), (p, n)).copy_from(&row);
            row = &row * &self.a;
        }
        o
    }

    pub fn observability_rank(&self, blocks: usize) -> usize {
        linalg::rank(&self.observability_matrix(blocks), RANK_TOL)
    }

    pub fn sensor_index(&self, name: &str) -> Option<usize> {
        self.sensor_names.iter().position(|s| s == name)
    }
}

/// Steady-state Kalman filter: prediction covariance `Σ`, gain `K`, residual covariance `Q`.
#[derive(Debug, Clone)]
pub struct SteadyStateFilter {
    pub sigma: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
    /// Closed-loop error dynamics `A − KCA`.
    pub f: DMatrix<f64>,
    /// `CA`, the map from the previous error to the residual.
    pub ca: DMatrix<f64>,
    pub iterations: usize,
}

impl SteadyStateFilter {
    pub fn n(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn p(&self) -> usize {
        self.q.nrows()
    }

    /// Covariance of the updated estimate error `x − x̂`, i.e. `(I − KC)Σ`.
    pub fn posterior_covariance(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        symmetrize(&((DMatrix::identity(n, n) - &self.k * c) * &self.sigma))
    }
}

fn riccati_step(model: &PlantModel, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, c) = (&model.a, &model.c);
    let s = c * sigma * c.transpose() + &model.r;
    let cs_at = c * sigma * a.transpose();
    let gain_term = cs_at.transpose() * spd_solve(&s, &cs_at, "innovation covariance")?;
    Ok(symmetrize(&(a * sigma * a.transpose() + &model.w - gain_term)))
}

/// Largest Riccati residual `‖Σ − Ric(Σ)‖` of a candidate prediction covariance.
pub fn riccati_residual(model: &PlantModel, sigma: &DMatrix<f64>) -> Result<f64> {
    Ok((riccati_step(model, sigma)? - sigma).norm())
}

/// Fixed-point Riccati iteration to the steady-state filter.
pub fn solve_steady_state_filter(model: &PlantModel) -> Result<SteadyStateFilter> {
    let n = model.n();
    if model.observability_rank(n) < n {
        return Err(Error::Unobservable("(A, C) is not observable".into()));
    }
    let mut sigma = model.w.clone();
    let mut iterations = 0;
    loop {
        let next = riccati_step(model, &sigma)?;
        iterations += 1;
        let diff = (&next - &sigma).norm();
        let scale = next.norm();
        if !diff.is_finite() || !scale.is_finite() {
            return Err(Error::Numerical("Riccati iteration diverged".into()));
        }
        sigma = next;
        if diff <= DARE_TOL * scale || diff == 0.0 {
            break;
        }
        if iterations >= DARE_MAX_ITER {
            return Err(Error::Numerical(format!(
                "Riccati iteration did not converge in {DARE_MAX_ITER} steps (last change {diff:.3e})"
            )));
        }
    }
    filter_from_sigma(model, sigma, iterations)
}

fn filter_from_sigma(model: &PlantModel, sigma: DMatrix<f64>, iterations: usize) -> Result<SteadyStateFilter> {
    let c = &model.c;
    let q = symmetrize(&(c * &sigma * c.transpose() + &model.r));
    let q_inv = linalg::spd_inverse(&q, "residual covariance Q")?;
    let k = &sigma * c.transpose() * &q_inv;
    let ca = c * &model.a;
    let f = &model.a - &k * &ca;
    let rho = linalg::spectral_radius(&f);
    if rho >= 1.0 {
        return Err(Error::Numerical(format!("closed-loop error dynamics unstable (spectral radius {rho})")));
    }
    Ok(SteadyStateFilter { sigma, k, q, q_inv, f, ca, iterations })
}

/// Compromised sensors `K`, stealth slack `ε` and confidence scaling `γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    /// Zero-based, sorted, duplicate-free sensor indices.
    pub compromised: Vec<usize>,
    pub epsilon: f64,
    pub gamma: f64,
}

impl AttackScenario {
    pub fn new(mut compromised: Vec<usize>, epsilon: f64, gamma: f64, p: usize) -> Result<Self> {
        compromised.sort_unstable();
        compromised.dedup();
        if let Some(&bad) = compromised.iter().find(|&&i| i >= p) {
            return Err(Error::Validation(format!("compromised sensor index {bad} out of range (p = {p})")));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Validation(format!("epsilon must lie in [0, 1), got {epsilon}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Validation(format!("gamma must be a nonnegative number, got {gamma}")));
        }
        Ok(AttackScenario { compromised, epsilon, gamma })
    }

    /// Every sensor compromised.
    pub fn all_sensors(p: usize, epsilon: f64, gamma: f64) -> Result<Self> {
        Self::new((0..p).collect(), epsilon, gamma, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(a: f64, c: f64, w: f64, r: f64) -> PlantModel {
        let m = |x| DMatrix::from_element(1, 1, x);
        PlantModel::new(m(a), m(1.0), m(c), m(w), m(r), None).unwrap()
    }

    #[test]
    fn zero_process_noise_gives_zero_gain() {
        let f = solve_steady_state_filter(&scalar(0.5, 1.0, 0.0, 1.0)).unwrap();
        assert_eq!(f.sigma[(0, 0)], 0.0);
        assert_eq!(f.k[(0, 0)], 0.0);
        assert_eq!(f.q[(0, 0)], 1.0);
    }

    #[test]
    fn random_walk_matches_golden_ratio() {
        // σ = σ + 1 − σ²/(σ + 1)  ⇔  σ² − σ − 1 = 0
        let f = solve_steady_state_filter(&scalar(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(f.sigma[(0, 0)], (1.0 + 5f64.sqrt()) / 2.0, epsilon = 1e-10);
    }

    #[test]
    fn unobservable_pair_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let err = PlantModel::new(
            a,
            DMatrix::from_element(2, 1, 1.0),
            c,
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            None,
        );
        assert!(matches!(err, Err(Error::Unobservable(_))));
    }

    #[test]
    fn indefinite_r_rejected() {
        let m = |x| DMatrix::from_element(1, 1, x);
        assert!(PlantModel::new(m(1.0), m(1.0), m(1.0), m(1.0), m(-1.0), None).is_err());
    }

    #[test]
    fn scenario_validation() {
        assert!(AttackScenario::new(vec![0, 3], 0.001, 0.0, 2).is_err());
        assert!(AttackScenario::new(vec![0], 1.5, 0.0, 2).is_err());
        assert!(AttackScenario::new(vec![0], 0.001, -1.0, 2).is_err());
        assert_eq!(AttackScenario::new(vec![1, 0, 1], 0.0, 0.0, 2).unwrap().compromised, vec![0, 1]);
    }
}

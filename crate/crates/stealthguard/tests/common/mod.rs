#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use stealthguard::io::{parse_model, ModelBundle};
use stealthguard::model::{PlantModel, SteadyStateFilter};
use stealthguard::reach::SupportPattern;

pub fn fixture(name: &str) -> ModelBundle {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    parse_model(&path).expect("fixture parses")
}

pub fn vehicle() -> ModelBundle {
    fixture("vehicle_axis.json")
}

pub fn scalar_toy() -> PlantModel {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    PlantModel::new(one(1.2), one(1.0), one(1.0), one(1.0), one(1.0), None).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Random observable `(A, C)` with PD noise; `A` may be unstable.
pub fn random_system(rng: &mut ChaCha8Rng, n: usize, p: usize) -> PlantModel {
    loop {
        let a = uniform(rng, n, n, 1.3);
        let c = uniform(rng, p, n, 1.0);
        let g = uniform(rng, n, n, 1.0);
        let w = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
        let r = DMatrix::from_fn(p, p, |i, j| if i == j { rng.random_range(0.1..2.0) } else { 0.0 });
        if let Ok(m) = PlantModel::new(a, DMatrix::zeros(n, 1), c, w, r, None) {
            return m;
        }
    }
}

/// Random supports on `1..=horizon` drawn from subsets of `compromised`.
pub fn random_supports(rng: &mut ChaCha8Rng, p: usize, compromised: &[usize], horizon: usize) -> SupportPattern {
    let supports =
        (0..horizon).map(|_| compromised.iter().copied().filter(|_| rng.random_bool(0.7)).collect()).collect();
    SupportPattern { p, compromised: compromised.to_vec(), supports, anchors: Vec::new() }
}

/// Direct recursion `Δe_k = FΔe_{k−1} − K a_k`, `Δz_k = CAΔe_{k−1} + a_k`
/// for an attack given as the concatenation of per-step supported entries.
/// Returns the error at `k` and the stealth cost `Σ_{τ≤t} Δzᵀ Q⁻¹ Δz`.
pub fn replay(
    filter: &SteadyStateFilter,
    pattern: &SupportPattern,
    k: usize,
    t: usize,
    x: &[f64],
) -> (DVector<f64>, f64) {
    let n = filter.k.nrows();
    let p = pattern.p;
    let mut e = DVector::zeros(n);
    let mut e_k = DVector::zeros(n);
    let mut cost = 0.0;
    let mut idx = 0;
    for tau in 1..=t {
        let mut a = DVector::zeros(p);
        for &s in pattern.support(tau) {
            a[s] = x[idx];
            idx += 1;
        }
        let z = &filter.ca * &e + &a;
        cost += (z.transpose() * &filter.q_inv * &z)[(0, 0)];
        e = &filter.f * &e - &filter.k * &a;
        if tau == k {
            e_k = e.clone();
        }
    }
    (e_k, cost)
}

/// Brute-force `max ‖Δe_k‖` over attacks with stealth cost `≤ α²`: random
/// restarts plus shrinking-step hill climbing on the scale-free ratio.
pub fn brute_force_max_error(
    filter: &SteadyStateFilter,
    pattern: &SupportPattern,
    k: usize,
    t: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let dim = pattern.cumulative_size(t);
    if dim == 0 {
        return 0.0;
    }
    let ratio = |x: &[f64]| {
        let (e, cost) = replay(filter, pattern, k, t, x);
        if cost <= 0.0 {
            0.0
        } else {
            e.norm() * alpha / cost.sqrt()
        }
    };
    let mut best = 0.0f64;
    for _ in 0..48 {
        let mut x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut val = ratio(&x);
        let mut step = 0.5;
        while step > 1e-7 {
            let mut improved = false;
            for _ in 0..4 * dim {
                let i = rng.random_range(0..dim);
                for dir in [1.0, -1.0] {
                    let mut y = x.clone();
                    y[i] += dir * step;
                    let v = ratio(&y);
                    if v > val {
                        x = y;
                        val = v;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best = best.max(val);
    }
    best
}

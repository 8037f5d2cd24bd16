//! Observability index, unstable eigenstructure and the perfect-attackability test.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix};
use crate::model::{AttackScenario, PlantModel, SteadyStateFilter, RANK_TOL};

/// Guard band: `|λ| ≥ 1 − UNSTABLE_GUARD` counts as unstable.
pub const UNSTABLE_GUARD: f64 = 1e-9;
/// Eigenvalues closer than this (relative) are treated as one repeated eigenvalue.
const CLUSTER_TOL: f64 = 1e-6;
/// Projection residual bound (relative to ‖v‖) for reachability of an eigenvector.
pub const REACH_TOL: f64 = 1e-8;

/// Complex vector stored as `[re, im]` pairs for serialization.
pub type ComplexVec = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnstableMode {
    pub eigenvalue: [f64; 2],
    pub algebraic_multiplicity: usize,
    /// Jordan chains, head eigenvector first.
    pub chains: Vec<Vec<ComplexVec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralReport {
    pub psi: usize,
    pub q_un: usize,
    /// Unstable modes whose eigenvector is visible only through compromised sensors.
    pub q_un_restricted: Option<usize>,
    pub f_required: usize,
    pub unstable_eigenstructure: Vec<UnstableMode>,
}

struct Cluster {
    lambda: Complex<f64>,
    multiplicity: usize,
}

fn unstable_clusters(a: &DMatrix<f64>) -> Vec<Cluster> {
    let eig: Vec<Complex<f64>> = a.complex_eigenvalues().iter().copied().collect();
    let mut clusters: Vec<(Complex<f64>, usize)> = Vec::new();
    for z in eig.into_iter().filter(|z| z.norm() >= 1.0 - UNSTABLE_GUARD) {
        match clusters.iter_mut().find(|(c, _)| (*c - z).norm() <= CLUSTER_TOL * (1.0 + z.norm())) {
            Some((c, m)) => {
                *c = (*c * (*m as f64) + z) / ((*m + 1) as f64);
                *m += 1;
            }
            None => clusters.push((z, 1)),
        }
    }
    clusters.sort_by(|a, b| b.0.norm().total_cmp(&a.0.norm()).then(b.0.im.total_cmp(&a.0.im)));
    clusters
        .into_iter()
        .map(|(mut lambda, multiplicity)| {
            if lambda.im.abs() <= CLUSTER_TOL * (1.0 + lambda.norm()) {
                lambda.im = 0.0;
            }
            Cluster { lambda, multiplicity }
        })
        .collect()
}

fn shifted(a: &DMatrix<f64>, lambda: Complex<f64>) -> CMatrix {
    let n = a.nrows();
    linalg::to_complex(a) - CMatrix::identity(n, n) * lambda
}

/// Null space of `N^j`; at the top level the dimension is pinned to the algebraic multiplicity.
fn kernel_power(n_mat: &CMatrix, j: usize, top: usize, multiplicity: usize) -> CMatrix {
    let dim = n_mat.nrows();
    let mut pow = CMatrix::identity(dim, dim);
    for _ in 0..j {
        pow = &pow * n_mat;
    }
    if j == top {
        linalg::complex_smallest_subspace(&pow, multiplicity)
    } else {
        let ker = linalg::complex_null_space(&pow, RANK_TOL);
        if ker.ncols() > multiplicity {
            linalg::complex_smallest_subspace(&pow, multiplicity)
        } else {
            ker
        }
    }
}

fn hstack(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let rows = a.nrows().max(b.nrows());
    let mut out = CMatrix::zeros(rows, a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

/// Jordan chains for one eigenvalue: for each chain the head eigenvector comes first.
fn jordan_chains(a: &DMatrix<f64>, cluster: &Cluster) -> Vec<Vec<DVector<Complex<f64>>>> {
    let n = a.nrows();
    let m = cluster.multiplicity;
    let nm = shifted(a, cluster.lambda);
    // Level at which the kernel reaches the full generalized eigenspace.
    let mut kernels = vec![CMatrix::zeros(n, 0)];
    let mut top = m;
    for j in 1..=m {
        let ker = kernel_power(&nm, j, m, m);
        let done = ker.ncols() >= m;
        kernels.push(ker);
        if done {
            top = j;
            break;
        }
    }
    if kernels.len() <= top {
        kernels.push(kernel_power(&nm, top, top, m));
    }
    let mut chains: Vec<Vec<DVector<Complex<f64>>>> = Vec::new();
    for level in (1..=top).rev() {
        // Already-covered directions at this level: lower kernel plus existing chain members.
        let mut covered = kernels[level - 1].clone();
        for chain in &chains {
            if chain.len() >= level {
                let v = &chain[level - 1];
                covered = hstack(&covered, &CMatrix::from_column_slice(n, 1, v.as_slice()));
            }
        }
        let base_rank = linalg::complex_rank(&covered, RANK_TOL);
        let mut rank = base_rank;
        let cand = &kernels[level];
        for col in 0..cand.ncols() {
            let w = cand.column(col).into_owned();
            let trial = hstack(&covered, &CMatrix::from_column_slice(n, 1, w.as_slice()));
            let r = linalg::complex_rank(&trial, RANK_TOL);
            if r > rank {
                rank = r;
                covered = trial;
                let mut chain = vec![DVector::zeros(n); level];
                let mut v = w.clone();
                for slot in (0..level).rev() {
                    chain[slot] = v.clone();
                    v = &nm * v;
                }
                for v in chain.iter_mut() {
                    let norm = v.norm();
                    if norm > 0.0 {
                        *v /= Complex::new(norm, 0.0);
                    }
                }
                chains.push(chain);
            }
        }
    }
    chains
}

fn support_outside(c: &DMatrix<f64>, compromised: &[usize]) -> Vec<usize> {
    (0..c.nrows()).filter(|i| !compromised.contains(i)).collect()
}

/// `‖P_{K^c} C v‖ ≤ tol · ‖C‖‖v‖`: the output direction of `v` is confined to `K`.
fn output_within(c: &DMatrix<f64>, v: &DVector<Complex<f64>>, compromised: &[usize]) -> bool {
    let cv = linalg::to_complex(c) * v;
    let outside = support_outside(c, compromised);
    let leak: f64 = outside.iter().map(|&i| cv[i].norm_sqr()).sum::<f64>().sqrt();
    leak <= RANK_TOL * (1.0 + c.norm()) * v.norm()
}

fn to_serial(v: &DVector<Complex<f64>>) -> ComplexVec {
    v.iter().map(|z| [z.re, z.im]).collect()
}

/// Observability index: smallest `i` with `rank [C; …; CA^{i−1}] = n`.
pub fn observability_index(model: &PlantModel) -> Result<usize> {
    let n = model.n();
    (1..=n)
        .find(|&i| model.observability_rank(i) == n)
        .ok_or_else(|| Error::Unobservable("(A, C) is not observable".into()))
}

pub fn structural_report(model: &PlantModel, compromised: Option<&[usize]>) -> Result<StructuralReport> {
    let psi = observability_index(model)?;
    let clusters = unstable_clusters(&model.a);
    let q_un: usize = clusters.iter().map(|c| c.multiplicity).sum();
    let mut modes = Vec::with_capacity(clusters.len());
    let mut restricted = 0;
    for cluster in &clusters {
        let chains = jordan_chains(&model.a, cluster);
        if let Some(k) = compromised {
            restricted +=
                chains.iter().filter(|ch| output_within(&model.c, &ch[0], k)).map(|ch| ch.len()).sum::<usize>();
        }
        modes.push(UnstableMode {
            eigenvalue: [cluster.lambda.re, cluster.lambda.im],
            algebraic_multiplicity: cluster.multiplicity,
            chains: chains.iter().map(|ch| ch.iter().map(to_serial).collect()).collect(),
        });
    }
    let q_un_restricted = compromised.map(|_| restricted.min(cluster_total(&clusters)));
    let q_eff = q_un_restricted.unwrap_or(q_un);
    let f_required = if q_eff == 0 { 0 } else { psi.min(q_eff) };
    Ok(StructuralReport { psi, q_un, q_un_restricted, f_required, unstable_eigenstructure: modes })
}

fn cluster_total(clusters: &[Cluster]) -> usize {
    clusters.iter().map(|c| c.multiplicity).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackabilityVerdict {
    pub attackable: bool,
    pub witness: Option<ComplexVec>,
    pub witness_eigenvalue: Option<[f64; 2]>,
}

/// Orthonormal basis of the `2n`-step reachable subspace of `(A − KCA, K·P_Kᵀ)`.
pub fn attack_reachable_basis(filter: &SteadyStateFilter, compromised: &[usize]) -> DMatrix<f64> {
    let n = filter.n();
    let b = linalg::select_columns(&filter.k, compromised);
    let blocks = 2 * n;
    let mut ctrb = DMatrix::zeros(n, blocks * b.ncols());
    let mut cur = b.clone();
    for i in 0..blocks {
        ctrb.view_mut((0, i * b.ncols()), (n, b.ncols())).copy_from(&cur);
        cur = &filter.f * cur;
    }
    linalg::column_basis(&ctrb, RANK_TOL)
}

/// An unstable eigenvector `v` with `supp(Cv) ⊆ K` that is reachable by the
/// attack dynamics makes the estimation error unboundedly steerable.
pub fn is_perfectly_attackable(
    model: &PlantModel,
    filter: &SteadyStateFilter,
    scenario: &AttackScenario,
) -> Result<AttackabilityVerdict> {
    let n = model.n();
    if filter.n() != n || filter.p() != model.p() {
        return Err(Error::Validation("filter dimensions do not match the model".into()));
    }
    let none = AttackabilityVerdict { attackable: false, witness: None, witness_eigenvalue: None };
    let k = &scenario.compromised;
    if k.is_empty() {
        return Ok(none);
    }
    let basis = linalg::to_complex(&attack_reachable_basis(filter, k));
    let projector = CMatrix::identity(n, n) - &basis * basis.adjoint();
    let outside = support_outside(&model.c, k);
    let c_out = linalg::to_complex(&linalg::select_rows(&model.c, &outside));
    for cluster in unstable_clusters(&model.a) {
        let eigenspace = linalg::complex_null_space(&shifted(&model.a, cluster.lambda), RANK_TOL);
        let eigenspace = if eigenspace.ncols() == 0 {
            linalg::complex_smallest_subspace(&shifted(&model.a, cluster.lambda), 1)
        } else {
            eigenspace
        };
        // Eigenvectors whose outputs vanish on the protected sensors.
        let qualifying = if outside.is_empty() {
            eigenspace.clone()
        } else {
            let coeffs = linalg::complex_null_space(&(&c_out * &eigenspace), RANK_TOL);
            &eigenspace * coeffs
        };
        if qualifying.ncols() == 0 {
            continue;
        }
        let (q, _) = orthonormalize(&qualifying);
        let residual = &projector * &q;
        let (s, v) = linalg::complex_svd(&residual);
        let smallest = *s.last().expect("non-empty subspace");
        if smallest <= REACH_TOL {
            let w = v.column(v.ncols() - 1).into_owned();
            let witness = &q * w;
            return Ok(AttackabilityVerdict {
                attackable: true,
                witness: Some(to_serial(&witness)),
                witness_eigenvalue: Some([cluster.lambda.re, cluster.lambda.im]),
            });
        }
    }
    Ok(none)
}

fn orthonormalize(m: &CMatrix) -> (CMatrix, usize) {
    let qr = m.clone().qr();
    let q = qr.q();
    let cols = m.ncols().min(q.ncols());
    (q.columns(0, cols).into_owned(), cols)
}

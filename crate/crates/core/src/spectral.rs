//! Eigenstructure of the Gram matrix `G = D D^T`, the orthogonal projectors onto
//! its range and co-range, and certificates evaluated along trajectories.
//!
//! The projector is built from the eigendecomposition `G = V diag(lambda) V^T`
//! by keeping the eigenvectors whose eigenvalue exceeds
//! `rank_tol * max(1, lambda_max)`. This works at any rank. The closed form
//! `D (D^T D)^{-1} D^T` is available as [`projector_full_rank`] when `rank D = K`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::calculus::{cost, grad_x_cost, jacobian, Jacobian};
use crate::flow::Trajectory;
use crate::model::{Network, ParamVector};
use crate::{Dataset, Error, Result};

/// Relative spectral cutoff used for numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GramAnalysis {
    pub gram: DMatrix<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the unit eigenvector of `eigenvalues[i]`; `R` is the transpose.
    pub eigenvectors: DMatrix<f64>,
    pub rank: usize,
    pub p: DMatrix<f64>,
    pub p_perp: DMatrix<f64>,
    /// Smallest retained eigenvalue, zero when the rank is zero.
    pub lambda_min_pos: f64,
    /// Number of columns `K` of the analysed Jacobian.
    pub param_count: usize,
}

impl GramAnalysis {
    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0).max(0.0)
    }

    /// Smallest eigenvalue of `G`, taken as zero unless `G` has full rank.
    pub fn lambda_min(&self) -> f64 {
        if self.rank == self.dim() {
            self.eigenvalues.last().copied().unwrap_or(0.0).max(0.0)
        } else {
            0.0
        }
    }

    /// `max(1, lambda_max)`, the scale for absolute residual thresholds.
    pub fn scale(&self) -> f64 {
        self.lambda_max().max(1.0)
    }

    /// The rotation `R` with `G = R^T diag(lambda) R`.
    pub fn rotation(&self) -> DMatrix<f64> {
        self.eigenvectors.transpose()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        mat_vec(&self.p, v)
    }

    pub fn project_perp(&self, v: &[f64]) -> Vec<f64> {
        mat_vec(&self.p_perp, v)
    }
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    assert_eq!(m.ncols(), v.len());
    (0..m.nrows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn check_rank_tol(rank_tol: f64) -> Result<()> {
    if !(rank_tol.is_finite() && rank_tol >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rank_tol must be finite and nonnegative, got {rank_tol}"
        )));
    }
    Ok(())
}

pub fn analyze(d: &Jacobian, rank_tol: f64) -> Result<GramAnalysis> {
    check_rank_tol(rank_tol)?;
    let dm = d.matrix();
    if dm.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Jacobian"));
    }
    let n = dm.nrows();
    let g = dm * dm.transpose();
    let gram = (&g + g.transpose()) * 0.5;

    let eig = SymmetricEigen::new(gram.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);

    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);
    let cutoff = rank_tol * lambda_max.max(1.0);
    let rank = eigenvalues.iter().take_while(|&&l| l > cutoff).count();

    let retained = eigenvectors.columns(0, rank);
    let p = retained.clone() * retained.transpose();
    let p_perp = DMatrix::identity(n, n) - &p;
    let lambda_min_pos = if rank > 0 { eigenvalues[rank - 1] } else { 0.0 };

    Ok(GramAnalysis {
        gram,
        eigenvalues,
        eigenvectors,
        rank,
        p,
        p_perp,
        lambda_min_pos,
        param_count: dm.ncols(),
    })
}

/// `D (D^T D)^{-1} D^T`, defined only when `D` has full column rank `K`.
pub fn projector_full_rank(d: &Jacobian, rank_tol: f64) -> Result<DMatrix<f64>> {
    check_rank_tol(rank_tol)?;
    let dm = d.matrix();
    if dm.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Jacobian"));
    }
    let k = dm.ncols();
    let dtd = dm.transpose() * dm;
    let dtd = (&dtd + dtd.transpose()) * 0.5;
    let eig = dtd.clone().symmetric_eigenvalues();
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let rank = eig.iter().filter(|&&l| l > rank_tol * hi.max(1.0)).count();
    if k == 0 || rank < k {
        return Err(Error::Singular { condition });
    }
    let chol = dtd.cholesky().ok_or(Error::Singular { condition })?;
    let x = chol.solve(&dm.transpose());
    Ok(dm * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommutationResidual {
    /// `max |G P - P G|`.
    pub commutator: f64,
    /// `max |G - P G P|`.
    pub sandwich: f64,
}

impl CommutationResidual {
    pub fn max(&self) -> f64 {
        self.commutator.max(self.sandwich)
    }
}

pub fn commutation_check(a: &GramAnalysis) -> CommutationResidual {
    let gp = &a.gram * &a.p;
    let pg = &a.p * &a.gram;
    let pgp = &pg * &a.p;
    CommutationResidual {
        commutator: max_abs(&(&gp - &pg)),
        sandwich: max_abs(&(&a.gram - &pgp)),
    }
}

/// Entrywise maxima of the projector identities at one analysed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProjectorResiduals {
    /// `P^2 - P`.
    pub idempotence: f64,
    /// `P - P^T`.
    pub symmetry: f64,
    /// `P + P_perp - I`.
    pub complement: f64,
    /// `P D - D`.
    pub range_containment: f64,
    pub commutator: f64,
    pub sandwich: f64,
    /// `|G - V diag(lambda) V^T|`.
    pub reconstruction: f64,
    /// `|V^T V - I|`.
    pub orthogonality: f64,
}

impl ProjectorResiduals {
    pub fn max(&self) -> f64 {
        [
            self.idempotence,
            self.symmetry,
            self.complement,
            self.range_containment,
            self.commutator,
            self.sandwich,
            self.reconstruction,
            self.orthogonality,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn projector_residuals(a: &GramAnalysis, d: &Jacobian) -> ProjectorResiduals {
    let n = a.dim();
    let eye = DMatrix::<f64>::identity(n, n);
    let comm = commutation_check(a);
    let v = &a.eigenvectors;
    let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&a.eigenvalues));
    ProjectorResiduals {
        idempotence: max_abs(&(&a.p * &a.p - &a.p)),
        symmetry: max_abs(&(&a.p - a.p.transpose())),
        complement: max_abs(&(&a.p + &a.p_perp - &eye)),
        range_containment: max_abs(&(&a.p * d.matrix() - d.matrix())),
        commutator: comm.commutator,
        sandwich: comm.sandwich,
        reconstruction: max_abs(&(&a.gram - v * lambda * v.transpose())),
        orthogonality: max_abs(&(v.transpose() * v - &eye)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostSplit {
    /// `C(x[Z])`.
    pub total: f64,
    /// `(N/2) |P grad_x C|^2`.
    pub range_part: f64,
    /// `(N/2) |P_perp grad_x C|^2`.
    pub corange_part: f64,
}

impl CostSplit {
    pub fn from_analysis(a: &GramAnalysis, grad_x: &[f64], n: usize, total: f64) -> Self {
        let half_n = n as f64 / 2.0;
        let sq = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
        Self {
            total,
            range_part: half_n * sq(a.project(grad_x)),
            corange_part: half_n * sq(a.project_perp(grad_x)),
        }
    }

    /// `|total - range - corange| / total` (zero at a perfect fit).
    pub fn pythagoras_residual(&self) -> f64 {
        let diff = (self.total - self.range_part - self.corange_part).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.total.abs()
        }
    }
}

/// Gram analysis, output gradient and cost split at one parameter point.
#[derive(Debug, Clone)]
pub struct PointDiagnostics {
    pub jacobian: Jacobian,
    pub analysis: GramAnalysis,
    pub grad_x: Vec<f64>,
    pub split: CostSplit,
}

pub fn diagnose_point(net: &Network, z: &ParamVector, data: &Dataset, rank_tol: f64) -> Result<PointDiagnostics> {
    let ux = net.forward_all(z, data)?;
    let total = cost(&ux, data)?;
    let grad_x = grad_x_cost(&ux, data)?;
    let jac = jacobian(net, z, data)?;
    let analysis = analyze(&jac, rank_tol)?;
    let split = CostSplit::from_analysis(&analysis, &grad_x, data.n(), total);
    Ok(PointDiagnostics {
        jacobian: jac,
        analysis,
        grad_x,
        split,
    })
}

pub fn cost_split(net: &Network, z: &ParamVector, data: &Dataset, rank_tol: f64) -> Result<CostSplit> {
    Ok(diagnose_point(net, z, data, rank_tol)?.split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RankCertificate {
    /// `rank(D D^T) = QN`, the necessary condition for a gradient-reachable global minimum.
    pub possible_global_min: bool,
    pub rank: usize,
    pub qn: usize,
    pub k: usize,
}

impl RankCertificate {
    pub fn from_analysis(a: &GramAnalysis) -> Self {
        Self {
            possible_global_min: a.rank == a.dim(),
            rank: a.rank,
            qn: a.dim(),
            k: a.param_count,
        }
    }

    /// Full rank `QN` requires `K >= QN`.
    pub fn full_rank_admissible(&self) -> bool {
        self.k >= self.qn
    }
}

pub fn rank_certificate(net: &Network, z: &ParamVector, data: &Dataset, rank_tol: f64) -> Result<RankCertificate> {
    let jac = jacobian(net, z, data)?;
    Ok(RankCertificate::from_analysis(&analyze(&jac, rank_tol)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayCertificate {
    /// `min lambda_min(D D^T)` over samples with `s >= s0`.
    pub lambda: f64,
    /// Time of the first sample at or after the requested `s0`.
    pub s0: f64,
    pub reference_cost: f64,
    pub samples_checked: usize,
    /// Samples with `C(s) > C(s0) exp(-2 lambda (s - s0) / N) (1 + tol)`.
    pub envelope_violations: usize,
}

/// Counts points `(s, cost)` above the exponential envelope anchored at the first point.
pub fn envelope_violations(points: &[(f64, f64)], n: usize, lambda: f64, tol: f64) -> usize {
    let Some(&(s0, c0)) = points.first() else {
        return 0;
    };
    points
        .iter()
        .filter(|&&(s, c)| c > c0 * (-2.0 * lambda * (s - s0) / n as f64).exp() * (1.0 + tol))
        .count()
}

pub fn decay_certificate(
    net: &Network,
    traj: &Trajectory,
    data: &Dataset,
    s0: f64,
    rank_tol: f64,
    tol: f64,
) -> Result<DecayCertificate> {
    let window: Vec<_> = traj.samples.iter().filter(|s| s.s >= s0).collect();
    if window.is_empty() {
        return Err(Error::InvalidArgument(format!("no trajectory samples at s >= {s0}")));
    }
    let mut lambda = f64::INFINITY;
    for sample in &window {
        let z = ParamVector::from_vec(&net.shape, sample.state.clone())?;
        let a = analyze(&jacobian(net, &z, data)?, rank_tol)?;
        lambda = lambda.min(a.lambda_min());
    }
    let points: Vec<(f64, f64)> = window.iter().map(|s| (s.s, s.cost)).collect();
    Ok(DecayCertificate {
        lambda,
        s0: points[0].0,
        reference_cost: points[0].1,
        samples_checked: points.len(),
        envelope_violations: envelope_violations(&points, data.n(), lambda, tol),
    })
}

/// One row of the per-sample diagnostic export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub s: f64,
    pub rank: usize,
    pub lambda_min_pos: f64,
    pub range_part: f64,
    pub corange_part: f64,
    pub total_cost: f64,
}

pub fn trajectory_diagnostics(
    net: &Network,
    traj: &Trajectory,
    data: &Dataset,
    rank_tol: f64,
) -> Result<Vec<DiagnosticRow>> {
    traj.samples
        .iter()
        .map(|sample| {
            let z = ParamVector::from_vec(&net.shape, sample.state.clone())?;
            let diag = diagnose_point(net, &z, data, rank_tol)?;
            Ok(DiagnosticRow {
                s: sample.s,
                rank: diag.analysis.rank,
                lambda_min_pos: diag.analysis.lambda_min_pos,
                range_part: diag.split.range_part,
                corange_part: diag.split.corange_part,
                total_cost: diag.split.total,
            })
        })
        .collect()
}

/// `(s, previous rank, new rank)` wherever the sampled rank changes.
pub fn rank_transitions(rows: &[DiagnosticRow]) -> Vec<(f64, usize, usize)> {
    rows.windows(2)
        .filter(|w| w[0].rank != w[1].rank)
        .map(|w| (w[1].s, w[0].rank, w[1].rank))
        .collect()
}

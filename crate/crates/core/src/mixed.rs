//! Mixed-model view of penalized smooths and REML estimation.
//!
//! Coefficients are `(β, b)`: `β` stacks the parametric columns and every
//! smooth block, `b` holds one random intercept per group. A smooth with
//! penalty `S` and smoothing parameter `λ` is a random effect with precision
//! `λS/σ²`, so `λ = σ²/σ_λ²`. The random intercept enters as a ridge penalty
//! `λ_b I` with `λ_b = σ²/σ_b²`. The residual variance is profiled out and the
//! criterion is minimised over `log λ` by BFGS.
//!
//! The random intercepts are absorbed analytically: with `D = diag(n_g + λ_b)`
//! the coefficient system reduces to the Schur complement
//! `H = XᵀX + S_λ − Σ_g x̄_g x̄_gᵀ / D_g` (`x̄_g` = column sums of the group's
//! rows). Groups of equal size share `D_g`, so the per-group sums are
//! collapsed by size once and each evaluation costs O(p³) regardless of the
//! number of groups.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::basis::BasisBlock;
use crate::error::{Error, Result};
use crate::linalg::{column_scaled_rank, null_space_basis, sorted_symmetric_eigen, NULL_EIGEN_REL_TOL};
use crate::optim::{minimize_bfgs, BfgsOptions};

/// Penalty null space / range space split of one smooth.
#[derive(Debug, Clone)]
pub struct MixedDecomposition {
    /// Unpenalized columns `X U₀`.
    pub fixed_columns: DMatrix<f64>,
    /// Whitened penalized columns `X U₊ Λ₊^{-1/2}`; their implied penalty is `I`.
    pub random_columns: DMatrix<f64>,
    /// `[U₀ | U₊ Λ₊^{-1/2}]`: maps (fixed, random) coefficients back to the basis.
    pub back_transform: DMatrix<f64>,
}

impl MixedDecomposition {
    /// Design reassembled from the split, `[F R] T⁻¹`.
    pub fn reconstruct_design(&self) -> DMatrix<f64> {
        let joined = self.joined_columns();
        let inv = self
            .back_transform
            .clone()
            .try_inverse()
            .expect("back transform is invertible by construction");
        joined * inv
    }

    pub fn joined_columns(&self) -> DMatrix<f64> {
        let (n, f, r) = (
            self.fixed_columns.nrows(),
            self.fixed_columns.ncols(),
            self.random_columns.ncols(),
        );
        let mut out = DMatrix::zeros(n, f + r);
        out.columns_mut(0, f).copy_from(&self.fixed_columns);
        out.columns_mut(f, r).copy_from(&self.random_columns);
        out
    }
}

/// Split a block into penalty null-space and whitened range-space columns.
pub fn decompose_penalty(block: &BasisBlock) -> Result<MixedDecomposition> {
    let s = block.penalty();
    let (values, vectors) = sorted_symmetric_eigen(&s);
    let p = values.len();
    let max = values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if let Some(&min) = values.iter().next() {
        if min < -NULL_EIGEN_REL_TOL * max {
            return Err(Error::Numerical(format!(
                "penalty of `{}` has negative eigenvalue {min:e}",
                block.term_label
            )));
        }
    }
    let n_null = values
        .iter()
        .filter(|&&v| max == 0.0 || v <= NULL_EIGEN_REL_TOL * max)
        .count();
    let mut back = DMatrix::zeros(p, p);
    for j in 0..p {
        let scale = if j < n_null { 1.0 } else { values[j].sqrt().recip() };
        back.set_column(j, &(vectors.column(j) * scale));
    }
    let joined = &block.design * &back;
    Ok(MixedDecomposition {
        fixed_columns: joined.columns(0, n_null).into_owned(),
        random_columns: joined.columns(n_null, p - n_null).into_owned(),
        back_transform: back,
    })
}

/// `λ = σ²/σ_λ²`; a zero `σ_λ` gives `+∞`.
pub fn smoothing_parameter_from_variances(sigma: f64, sigma_lambda: f64) -> f64 {
    if sigma_lambda == 0.0 {
        f64::INFINITY
    } else {
        (sigma / sigma_lambda).powi(2)
    }
}

/// Inputs of one additive mixed model fit.
#[derive(Debug, Clone)]
pub struct MixedProblem {
    pub parametric: DMatrix<f64>,
    pub parametric_names: Vec<String>,
    pub blocks: Vec<BasisBlock>,
    /// Group index (0-based, contiguous) of every row; `None` for no random intercept.
    pub grouping: Option<Vec<usize>>,
    pub y: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub bfgs: BfgsOptions,
    /// Half-width of the box on each `log λ` around its scale-based centre.
    pub log_lambda_bound: f64,
    /// Multipliers of the penalty scale used as starting points.
    pub start_multipliers: [f64; 3],
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            bfgs: BfgsOptions::default(),
            log_lambda_bound: 20.0,
            start_multipliers: [0.1, 10.0, 1000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// Between-group SD; 0 when there is no random intercept or it was pinned.
    pub sigma_b: f64,
    /// True when σ_b could not be separated from σ and was set to 0.
    pub sigma_b_pinned: bool,
    pub sigma: f64,
    pub penalty_labels: Vec<String>,
    pub sigma_lambda: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermKind {
    Parametric,
    Smooth,
}

/// Position and complexity of one term inside the coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermFit {
    pub label: String,
    pub kind: TermKind,
    pub start: usize,
    pub ncols: usize,
    pub edf: f64,
    pub null_space_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Objective (negative log restricted likelihood) after every accepted step of the winning start.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub beta_hat: DVector<f64>,
    pub coef_covariance: DMatrix<f64>,
    pub variance_components: VarianceComponents,
    pub terms: Vec<TermFit>,
    /// `Σ_k λ_k S_k` per smooth block, in term order.
    pub block_penalties: Vec<DMatrix<f64>>,
    pub random_intercepts: Vec<f64>,
    pub random_intercept_edf: f64,
    pub fitted_values: Vec<f64>,
    pub residuals: Vec<f64>,
    pub n_obs: usize,
    pub residual_df: f64,
    /// Restricted log-likelihood at the estimate (absent for fixed-λ fits with λ = 0).
    pub reml_value: Option<f64>,
    pub convergence: ConvergenceReport,
}

impl FittedModel {
    pub fn term(&self, label: &str) -> Option<&TermFit> {
        self.terms.iter().find(|t| t.label == label)
    }

    pub fn total_edf(&self) -> f64 {
        self.terms.iter().map(|t| t.edf).sum::<f64>() + self.random_intercept_edf
    }

    pub fn term_coefficients(&self, term: &TermFit) -> DVector<f64> {
        self.beta_hat.rows(term.start, term.ncols).into_owned()
    }

    pub fn term_covariance(&self, term: &TermFit) -> DMatrix<f64> {
        self.coef_covariance
            .view((term.start, term.start), (term.ncols, term.ncols))
            .into_owned()
    }
}

/// Per-term edf from a fitted model: `p_j − tr(Σ̂_jj S_λj)/σ̂²`.
pub fn compute_edf(fitted: &FittedModel) -> Vec<f64> {
    let s2 = fitted.variance_components.sigma.powi(2);
    let mut smooth = fitted.block_penalties.iter();
    fitted
        .terms
        .iter()
        .map(|t| match t.kind {
            TermKind::Parametric => t.ncols as f64,
            TermKind::Smooth => {
                let s = smooth.next().expect("one penalty per smooth term");
                let cov = fitted.term_covariance(t);
                t.ncols as f64 - (cov.component_mul(s)).sum() / s2
            }
        })
        .collect()
}

/// Sufficient statistics of all groups that share one size.
#[derive(Debug, Clone)]
struct SizeClass {
    size: f64,
    count: usize,
    outer: DMatrix<f64>,
    cross: DVector<f64>,
    yy: f64,
}

#[derive(Debug, Clone)]
struct GroupStats {
    group_of_row: Vec<usize>,
    sums: DMatrix<f64>,
    y_sums: DVector<f64>,
    sizes: Vec<usize>,
    classes: Vec<SizeClass>,
}

impl GroupStats {
    fn new(x: &DMatrix<f64>, y: &DVector<f64>, grouping: &[usize]) -> Result<Self> {
        let q = grouping.iter().max().map_or(0, |m| m + 1);
        let p = x.ncols();
        let mut sums = DMatrix::zeros(p, q);
        let mut y_sums = DVector::zeros(q);
        let mut sizes = vec![0usize; q];
        for (i, &g) in grouping.iter().enumerate() {
            sizes[g] += 1;
            y_sums[g] += y[i];
            for j in 0..p {
                sums[(j, g)] += x[(i, j)];
            }
        }
        if sizes.contains(&0) {
            return Err(Error::Spec("group indices must be contiguous from 0".into()));
        }
        let mut by_size: BTreeMap<usize, SizeClass> = BTreeMap::new();
        for g in 0..q {
            let class = by_size.entry(sizes[g]).or_insert_with(|| SizeClass {
                size: sizes[g] as f64,
                count: 0,
                outer: DMatrix::zeros(p, p),
                cross: DVector::zeros(p),
                yy: 0.0,
            });
            let col = sums.column(g);
            class.count += 1;
            class.outer.ger(1.0, &col, &col, 1.0);
            class.cross.axpy(y_sums[g], &col, 1.0);
            class.yy += y_sums[g] * y_sums[g];
        }
        Ok(Self {
            group_of_row: grouping.to_vec(),
            sums,
            y_sums,
            sizes,
            classes: by_size.into_values().collect(),
        })
    }

    fn n_groups(&self) -> usize {
        self.sizes.len()
    }
}

#[derive(Debug, Clone)]
struct BlockPrior {
    offset: usize,
    size: usize,
    penalties: Vec<usize>,
    null_dim: usize,
    rank: usize,
    /// Log pseudo-determinant of the single penalty (single-penalty blocks).
    log_det: f64,
    /// Fixed null-space basis used to regularise multi-penalty determinants.
    null_basis: Option<DMatrix<f64>>,
    /// Orthogonal map from working coordinates to the block's own coefficients.
    rotation: DMatrix<f64>,
}

/// Profiled REML criterion with analytic gradient on `log λ`.
#[derive(Debug, Clone)]
pub struct RemlCriterion {
    x: DMatrix<f64>,
    y: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    p0: usize,
    blocks: Vec<BlockPrior>,
    /// `(block, offset, matrix)` for every smoothing parameter.
    penalties: Vec<(usize, usize, DMatrix<f64>)>,
    penalty_labels: Vec<String>,
    groups: Option<GroupStats>,
    nu: f64,
    labels: Vec<String>,
    parametric_names: Vec<String>,
}

struct Solution {
    beta: DVector<f64>,
    h_inv: DMatrix<f64>,
    log_det_h: f64,
    rss: f64,
    lambda: Vec<f64>,
    lambda_b: Option<f64>,
}

impl RemlCriterion {
    pub fn new(problem: &MixedProblem) -> Result<Self> {
        let n = problem.y.len();
        let p0 = problem.parametric.ncols();
        if problem.parametric.nrows() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: problem.parametric.nrows(),
            });
        }
        let p = p0 + problem.blocks.iter().map(|b| b.ncols()).sum::<usize>();
        if p >= n {
            return Err(Error::Spec(format!(
                "model has {p} coefficients but only {n} observations"
            )));
        }
        let mut x = DMatrix::zeros(n, p);
        x.columns_mut(0, p0).copy_from(&problem.parametric);
        let mut blocks = Vec::new();
        let mut penalties = Vec::new();
        let mut penalty_labels = Vec::new();
        let mut fixed_parts = vec![problem.parametric.clone()];
        let mut offset = p0;
        for (bi, block) in problem.blocks.iter().enumerate() {
            if block.nrows() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: block.nrows(),
                });
            }
            let size = block.ncols();
            let total = block.penalty();
            let null = null_space_basis(&total);
            fixed_parts.push(&block.design * &null);
            let null_dim = null.ncols();
            // work in the penalty eigenbasis so huge λ only inflates the diagonal
            let (values, rotation) = sorted_symmetric_eigen(&total);
            x.columns_mut(offset, size).copy_from(&(&block.design * &rotation));
            let mut idx = Vec::new();
            for (k, s) in block.penalties.iter().enumerate() {
                idx.push(penalties.len());
                let mut rotated = crate::linalg::symmetrized(&(rotation.transpose() * s * &rotation));
                for j in 0..null_dim {
                    rotated.row_mut(j).fill(0.0);
                    rotated.column_mut(j).fill(0.0);
                }
                penalties.push((bi, offset, rotated));
                penalty_labels.push(if block.penalties.len() == 1 {
                    block.term_label.clone()
                } else {
                    format!("{}[{}]", block.term_label, k + 1)
                });
            }
            let (log_det, null_basis) = if block.penalties.len() == 1 {
                let ld = values.iter().skip(null_dim).map(|v| v.ln()).sum();
                (ld, None)
            } else {
                (0.0, Some(DMatrix::identity(size, null_dim)))
            };
            blocks.push(BlockPrior {
                offset,
                size,
                penalties: idx,
                null_dim,
                rank: size - null_dim,
                log_det,
                null_basis,
                rotation,
            });
            offset += size;
        }

        let fixed_cols: usize = fixed_parts.iter().map(|m| m.ncols()).sum();
        let mut fixed = DMatrix::zeros(n, fixed_cols);
        let mut c = 0;
        for part in &fixed_parts {
            fixed.columns_mut(c, part.ncols()).copy_from(part);
            c += part.ncols();
        }
        let rank = column_scaled_rank(&fixed, 1e-9);
        if rank < fixed_cols {
            return Err(Error::Identifiability(format!(
                "unpenalized part of the model has rank {rank} < {fixed_cols} columns; \
                 some terms are perfectly collinear"
            )));
        }

        let groups = match &problem.grouping {
            None => None,
            Some(g) => {
                if g.len() != n {
                    return Err(Error::LengthMismatch {
                        expected: n,
                        actual: g.len(),
                    });
                }
                Some(GroupStats::new(&x, &problem.y, g)?)
            }
        };

        let mut labels = problem.parametric_names.clone();
        labels.extend(problem.blocks.iter().map(|b| b.term_label.clone()));
        let xt = x.transpose();
        Ok(Self {
            xtx: &xt * &x,
            xty: &xt * &problem.y,
            yty: problem.y.dot(&problem.y),
            y: problem.y.clone(),
            x,
            p0,
            blocks,
            penalties,
            penalty_labels,
            groups,
            nu: (n - fixed_cols) as f64,
            labels,
            parametric_names: problem.parametric_names.clone(),
        })
    }

    /// Number of optimised log-parameters (smoothing parameters, then λ_b if present).
    pub fn n_params(&self) -> usize {
        self.penalties.len() + usize::from(self.groups.is_some())
    }

    pub fn has_random_intercept(&self) -> bool {
        self.groups.is_some()
    }

    fn drop_random_intercept(&mut self) {
        self.groups = None;
    }

    fn split(&self, rho: &DVector<f64>) -> (Vec<f64>, Option<f64>) {
        let m = self.penalties.len();
        let lambda = (0..m).map(|k| rho[k].exp()).collect();
        let lambda_b = self.groups.as_ref().map(|_| rho[m].exp());
        (lambda, lambda_b)
    }

    fn solve(&self, lambda: &[f64], lambda_b: Option<f64>) -> Result<Solution> {
        let mut h = self.xtx.clone();
        let mut rhs = self.xty.clone();
        for ((_, off, s), &l) in self.penalties.iter().zip(lambda) {
            let size = s.nrows();
            let mut view = h.view_mut((*off, *off), (size, size));
            view += s * l;
        }
        let mut rss_groups = 0.0;
        if let (Some(g), Some(lb)) = (&self.groups, lambda_b) {
            for c in &g.classes {
                let d = c.size + lb;
                h -= &c.outer / d;
                rhs -= &c.cross / d;
                rss_groups += c.yy / d;
            }
        }
        let chol = Cholesky::new(crate::linalg::symmetrized(&h)).ok_or_else(|| {
            Error::Numerical("penalized normal equations are not positive definite".into())
        })?;
        let beta = chol.solve(&rhs);
        let log_det_h = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let h_inv = chol.inverse();
        // yᵀy − γ̂ᵀCᵀy, written with the random intercepts absorbed
        let rss = self.yty - rss_groups - rhs.dot(&beta);
        Ok(Solution {
            beta,
            h_inv,
            log_det_h,
            rss,
            lambda: lambda.to_vec(),
            lambda_b,
        })
    }

    fn multi_penalty_factor(&self, block: &BlockPrior, lambda: &[f64]) -> Result<Cholesky<f64, Dyn>> {
        let nb = block.null_basis.as_ref().expect("multi-penalty block");
        let mut m = nb * nb.transpose();
        for &k in &block.penalties {
            m += &self.penalties[k].2 * lambda[k];
        }
        Cholesky::new(crate::linalg::symmetrized(&m))
            .ok_or_else(|| Error::Numerical("tensor penalty is not positive definite on its range".into()))
    }

    /// Negative restricted log-likelihood and its gradient in `log λ`.
    fn criterion(&self, sol: &Solution) -> Result<(f64, DVector<f64>)> {
        let nu = self.nu;
        let rss = sol.rss;
        if !(rss > 0.0) {
            return Err(Error::Numerical("non-positive penalized residual sum of squares".into()));
        }
        let mut log_det_a = sol.log_det_h;
        let mut log_det_p = 0.0;
        let mut grad = DVector::zeros(self.n_params());

        for block in &self.blocks {
            if block.null_basis.is_none() {
                let k = block.penalties[0];
                log_det_p += block.rank as f64 * sol.lambda[k].ln() + block.log_det;
                grad[k] -= block.rank as f64;
            } else {
                let chol = self.multi_penalty_factor(block, &sol.lambda)?;
                log_det_p += 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let inv = chol.inverse();
                for &k in &block.penalties {
                    grad[k] -= sol.lambda[k] * inv.component_mul(&self.penalties[k].2).sum();
                }
            }
        }
        for (k, (_, off, s)) in self.penalties.iter().enumerate() {
            let size = s.nrows();
            let bk = sol.beta.rows(*off, size);
            let quad = (s * bk).dot(&bk);
            let hk = sol.h_inv.view((*off, *off), (size, size));
            let tr = hk.component_mul(s).sum();
            grad[k] += sol.lambda[k] * (nu * quad / rss + tr);
        }
        if let (Some(g), Some(lb)) = (&self.groups, sol.lambda_b) {
            let q = g.n_groups() as f64;
            let m = self.penalties.len();
            let mut bb = 0.0;
            let mut tr = 0.0;
            let mut weighted = DMatrix::zeros(self.xtx.nrows(), self.xtx.nrows());
            for c in &g.classes {
                let d = c.size + lb;
                log_det_a += c.count as f64 * d.ln();
                let quad = (&c.outer * &sol.beta).dot(&sol.beta);
                bb += (c.yy - 2.0 * sol.beta.dot(&c.cross) + quad) / (d * d);
                tr += c.count as f64 / d;
                weighted += &c.outer / (d * d);
            }
            tr += sol.h_inv.component_mul(&weighted).sum();
            log_det_p += q * lb.ln();
            grad[m] = lb * (nu * bb / rss + tr) - q;
        }
        let value = 0.5
            * (nu * (2.0 * std::f64::consts::PI * rss / nu).ln() + nu + log_det_a - log_det_p);
        Ok((value, grad * 0.5))
    }

    /// Negative restricted log-likelihood and gradient at `log λ = rho`.
    pub fn evaluate(&self, rho: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (lambda, lambda_b) = self.split(rho);
        let sol = self.solve(&lambda, lambda_b)?;
        self.criterion(&sol)
    }

    /// Centre of the search box for each log-parameter.
    fn log_scales(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .penalties
            .iter()
            .map(|(_, off, s)| {
                let size = s.nrows();
                let data = self.xtx.view((*off, *off), (size, size)).trace();
                let pen = s.trace();
                if data > 0.0 && pen > 0.0 {
                    (data / pen).ln()
                } else {
                    0.0
                }
            })
            .collect();
        if self.groups.is_some() {
            out.push(0.0);
        }
        out
    }

    fn assemble(&self, sol: &Solution, convergence: ConvergenceReport, pinned: bool) -> Result<FittedModel> {
        let n = self.y.len();
        let sigma2 = sol.rss / self.nu;
        let p = sol.beta.len();
        let mut rotation = DMatrix::identity(p, p);
        for block in &self.blocks {
            rotation
                .view_mut((block.offset, block.offset), (block.size, block.size))
                .copy_from(&block.rotation);
        }
        let beta_hat = &rotation * &sol.beta;
        let cov = crate::linalg::symmetrized(&(&rotation * &sol.h_inv * rotation.transpose() * sigma2));

        let mut block_penalties = Vec::new();
        let mut terms: Vec<TermFit> = self
            .parametric_names
            .iter()
            .enumerate()
            .map(|(j, name)| TermFit {
                label: name.clone(),
                kind: TermKind::Parametric,
                start: j,
                ncols: 1,
                edf: 1.0,
                null_space_dim: 1,
            })
            .collect();
        for (bi, block) in self.blocks.iter().enumerate() {
            let mut s = DMatrix::zeros(block.size, block.size);
            for &k in &block.penalties {
                s += &self.penalties[k].2 * sol.lambda[k];
            }
            let hj = sol.h_inv.view((block.offset, block.offset), (block.size, block.size));
            let edf = block.size as f64 - hj.component_mul(&s).sum();
            block_penalties.push(crate::linalg::symmetrized(&(&block.rotation * s * block.rotation.transpose())));
            terms.push(TermFit {
                label: self.labels[self.p0 + bi].clone(),
                kind: TermKind::Smooth,
                start: block.offset,
                ncols: block.size,
                edf,
                null_space_dim: block.null_dim,
            });
        }

        let mut fitted: Vec<f64> = (&self.x * &sol.beta).iter().copied().collect();
        let mut random_intercepts = Vec::new();
        let mut ri_edf = 0.0;
        if let (Some(g), Some(lb)) = (&self.groups, sol.lambda_b) {
            random_intercepts = (0..g.n_groups())
                .map(|k| (g.y_sums[k] - g.sums.column(k).dot(&sol.beta)) / (g.sizes[k] as f64 + lb))
                .collect();
            for (i, &k) in g.group_of_row.iter().enumerate() {
                fitted[i] += random_intercepts[k];
            }
            let mut weighted = DMatrix::zeros(self.xtx.nrows(), self.xtx.nrows());
            let mut tr = 0.0;
            for c in &g.classes {
                let d = c.size + lb;
                tr += c.count as f64 / d;
                weighted += &c.outer / (d * d);
            }
            tr += sol.h_inv.component_mul(&weighted).sum();
            ri_edf = g.n_groups() as f64 - lb * tr;
        }
        let residuals: Vec<f64> = self.y.iter().zip(&fitted).map(|(y, f)| y - f).collect();

        let sigma = sigma2.sqrt();
        let sigma_lambda = sol.lambda.iter().map(|l| sigma / l.sqrt()).collect();
        let variance_components = VarianceComponents {
            sigma_b: sol.lambda_b.map_or(0.0, |lb| sigma / lb.sqrt()),
            sigma_b_pinned: pinned,
            sigma,
            penalty_labels: self.penalty_labels.clone(),
            sigma_lambda,
            lambda: sol.lambda.clone(),
        };
        let reml_value = self
            .criterion(sol)
            .ok()
            .map(|(v, _)| -v)
            .filter(|v| v.is_finite());
        let total_edf = terms.iter().map(|t| t.edf).sum::<f64>() + ri_edf;
        Ok(FittedModel {
            beta_hat,
            coef_covariance: cov,
            variance_components,
            terms,
            block_penalties,
            random_intercepts,
            random_intercept_edf: ri_edf,
            fitted_values: fitted,
            residuals,
            n_obs: n,
            residual_df: n as f64 - total_edf,
            reml_value,
            convergence,
        })
    }
}

/// Fit at given smoothing parameters (and random-intercept ratio `λ_b = σ²/σ_b²`).
pub fn fit_fixed(problem: &MixedProblem, lambda: &[f64], lambda_b: Option<f64>) -> Result<FittedModel> {
    let crit = RemlCriterion::new(problem)?;
    if lambda.len() != crit.penalties.len() {
        return Err(Error::LengthMismatch {
            expected: crit.penalties.len(),
            actual: lambda.len(),
        });
    }
    if crit.groups.is_some() && lambda_b.is_none() {
        return Err(Error::Spec("random-intercept ratio required when grouping is present".into()));
    }
    let sol = crit.solve(lambda, lambda_b.filter(|_| crit.groups.is_some()))?;
    crit.assemble(
        &sol,
        ConvergenceReport {
            iterations: 0,
            gradient_norm: 0.0,
            converged: true,
            trace: Vec::new(),
        },
        false,
    )
}

/// Estimate smoothing parameters and variance components by REML.
pub fn fit_reml(problem: &MixedProblem) -> Result<FittedModel> {
    fit_reml_with(problem, &FitOptions::default())
}

pub fn fit_reml_with(problem: &MixedProblem, options: &FitOptions) -> Result<FittedModel> {
    let mut crit = RemlCriterion::new(problem)?;
    let mut pinned = false;
    if let Some(g) = &crit.groups {
        if g.sizes.iter().all(|&s| s == 1) {
            crit.drop_random_intercept();
            pinned = true;
        }
    }
    let (mut rho, mut report) = optimise(&crit, options)?;

    if crit.has_random_intercept() {
        let m = crit.penalties.len();
        let h = 1e-3;
        let mut up = rho.clone();
        up[m] += h;
        let mut down = rho.clone();
        down[m] -= h;
        let curvature = match (crit.evaluate(&up), crit.evaluate(&down)) {
            (Ok((_, gu)), Ok((_, gd))) => (gu[m] - gd[m]) / (2.0 * h),
            _ => f64::INFINITY,
        };
        if curvature.abs() < 1e-8 {
            crit.drop_random_intercept();
            pinned = true;
            (rho, report) = optimise(&crit, options)?;
        }
    }

    let (lambda, lambda_b) = crit.split(&rho);
    let sol = crit.solve(&lambda, lambda_b)?;
    crit.assemble(&sol, report, pinned)
}

fn optimise(crit: &RemlCriterion, options: &FitOptions) -> Result<(DVector<f64>, ConvergenceReport)> {
    let m = crit.n_params();
    if m == 0 {
        let (v, _) = crit.evaluate(&DVector::zeros(0))?;
        return Ok((
            DVector::zeros(0),
            ConvergenceReport {
                iterations: 0,
                gradient_norm: 0.0,
                converged: true,
                trace: vec![v],
            },
        ));
    }
    let centre = DVector::from_vec(crit.log_scales());
    let lo = centre.add_scalar(-options.log_lambda_bound);
    let hi = centre.add_scalar(options.log_lambda_bound);
    let n_smooth = crit.penalties.len();

    let mut best: Option<crate::optim::BfgsResult> = None;
    let mut unconverged: Option<crate::optim::BfgsResult> = None;
    let mut first_error = None;
    for &mult in &options.start_multipliers {
        let mut x0 = centre.clone();
        for k in 0..n_smooth {
            x0[k] += mult.ln();
        }
        match minimize_bfgs(|r| crit.evaluate(r), x0, &lo, &hi, &options.bfgs) {
            Ok(res) if res.converged => {
                if best.as_ref().is_none_or(|b| res.value < b.value) {
                    best = Some(res);
                }
            }
            Ok(res) => unconverged = Some(res),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
        // the starting multipliers only move smoothing parameters
        if n_smooth == 0 && best.is_some() {
            break;
        }
    }
    match best {
        Some(res) => Ok((
            res.x,
            ConvergenceReport {
                iterations: res.iterations,
                gradient_norm: res.projected_gradient_norm,
                converged: true,
                trace: res.trace,
            },
        )),
        None => match (unconverged, first_error) {
            (Some(res), _) => Err(Error::Convergence {
                iterations: res.iterations,
                gradient_norm: res.projected_gradient_norm,
                trace: res.trace,
            }),
            (None, Some(e)) => Err(e),
            (None, None) => unreachable!("at least one starting point is tried"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{apply_sum_to_zero_constraint, build_cr_basis, varying_coefficient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn intercept(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    fn smooth(x: &[f64], k: usize) -> BasisBlock {
        let (b, _) = build_cr_basis(x, k, None).unwrap();
        let mut c = apply_sum_to_zero_constraint(&b);
        c.term_label = "s(x)".into();
        c
    }

    /// Dense oracle: build `[X Z]`, penalty and solve the full system.
    fn brute_force(problem: &MixedProblem, lambda: &[f64], lambda_b: f64) -> (DVector<f64>, DMatrix<f64>, f64) {
        let n = problem.y.len();
        let p0 = problem.parametric.ncols();
        let p: usize = p0 + problem.blocks.iter().map(|b| b.ncols()).sum::<usize>();
        let q = problem.grouping.as_ref().map_or(0, |g| g.iter().max().unwrap() + 1);
        let mut c = DMatrix::zeros(n, p + q);
        c.columns_mut(0, p0).copy_from(&problem.parametric);
        let mut pen = DMatrix::zeros(p + q, p + q);
        let mut off = p0;
        let mut k = 0;
        for b in &problem.blocks {
            c.columns_mut(off, b.ncols()).copy_from(&b.design);
            for s in &b.penalties {
                let mut v = pen.view_mut((off, off), (b.ncols(), b.ncols()));
                v += s * lambda[k];
                k += 1;
            }
            off += b.ncols();
        }
        if let Some(g) = &problem.grouping {
            for (i, &gi) in g.iter().enumerate() {
                c[(i, p + gi)] = 1.0;
            }
            for j in 0..q {
                pen[(p + j, p + j)] = lambda_b;
            }
        }
        let a = c.transpose() * &c + pen;
        let a_inv = a.try_inverse().unwrap();
        let gamma = &a_inv * c.transpose() * &problem.y;
        let rss = problem.y.dot(&problem.y) - gamma.dot(&(c.transpose() * &problem.y));
        (gamma.rows(0, p).into_owned(), a_inv.view((0, 0), (p, p)).into_owned(), rss)
    }

    #[test]
    fn smoothing_parameter_arithmetic() {
        let l = smoothing_parameter_from_variances(133.410, 21.457);
        assert!((l - 38.66).abs() < 0.01, "{l}");
        assert_eq!(smoothing_parameter_from_variances(1.0, 1.0), 1.0);
        assert_eq!(smoothing_parameter_from_variances(2.0, 0.5), 16.0);
        assert!(smoothing_parameter_from_variances(1.0, 0.0).is_infinite());
    }

    #[test]
    fn decomposition_of_spline_penalty() {
        let x: Vec<f64> = (0..60).map(|i| i as f64 / 59.0).collect();
        let (b, _) = build_cr_basis(&x, 8, None).unwrap();
        let d = decompose_penalty(&b).unwrap();
        assert_eq!(d.fixed_columns.ncols(), 2);
        assert!((d.reconstruct_design() - &b.design).amax() < 1e-10);
        let r = b.penalties[0].nrows() - 2;
        let t = d.back_transform.columns(2, r);
        let implied = t.transpose() * &b.penalties[0] * t;
        assert!((implied - DMatrix::<f64>::identity(r, r)).amax() < 1e-10);
    }

    #[test]
    fn decomposition_of_identity_penalty() {
        let design = DMatrix::from_fn(10, 3, |i, j| ((i + 1) * (j + 2)) as f64);
        let block = BasisBlock {
            design: design.clone(),
            penalties: vec![DMatrix::identity(3, 3)],
            constraint_transform: DMatrix::identity(3, 3),
            null_space_dim: 0,
            term_label: "ridge".into(),
            knots: vec![],
        };
        let d = decompose_penalty(&block).unwrap();
        assert_eq!(d.fixed_columns.ncols(), 0);
        // columns come back in eigenvector order; they span the same space with unit scaling
        assert!((d.random_columns.transpose() * &d.random_columns - design.transpose() * &design).trace().abs() < 1e-8);
    }

    #[test]
    fn negative_penalty_rejected() {
        let block = BasisBlock {
            design: DMatrix::identity(3, 2),
            penalties: vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])],
            constraint_transform: DMatrix::identity(2, 2),
            null_space_dim: 0,
            term_label: "bad".into(),
            knots: vec![],
        };
        assert!(matches!(decompose_penalty(&block), Err(Error::Numerical(_))));
    }

    #[test]
    fn decomposition_fit_matches_direct_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let x: Vec<f64> = (0..120).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = DVector::from_iterator(120, x.iter().map(|&v| 1.0 + 2.0 * v * v + noise.sample(&mut rng)));
        let block = smooth(&x, 10);
        let lambda = 0.37;
        let direct = MixedProblem {
            parametric: intercept(120),
            parametric_names: vec!["(Intercept)".into()],
            blocks: vec![block.clone()],
            grouping: None,
            y: y.clone(),
        };
        let direct_fit = fit_fixed(&direct, &[lambda], None).unwrap();

        let d = decompose_penalty(&block).unwrap();
        let nf = d.fixed_columns.ncols();
        let nr = d.random_columns.ncols();
        let mut parametric = DMatrix::zeros(120, 1 + nf);
        parametric.column_mut(0).fill(1.0);
        parametric.columns_mut(1, nf).copy_from(&d.fixed_columns);
        let random = BasisBlock {
            design: d.random_columns.clone(),
            penalties: vec![DMatrix::identity(nr, nr)],
            constraint_transform: DMatrix::identity(nr, nr),
            null_space_dim: 0,
            term_label: "r".into(),
            knots: vec![],
        };
        let mixed = MixedProblem {
            parametric,
            parametric_names: (0..=nf).map(|i| format!("f{i}")).collect(),
            blocks: vec![random],
            grouping: None,
            y: y.clone(),
        };
        let mixed_fit = fit_fixed(&mixed, &[lambda], None).unwrap();
        for (a, b) in direct_fit.fitted_values.iter().zip(&mixed_fit.fitted_values) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn no_smooths_no_groups_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let y = DVector::from_fn(n, |i, _| 2.0 + x[(i, 1)] - 3.0 * x[(i, 2)] + rng.random_range(-0.1..0.1));
        let problem = MixedProblem {
            parametric: x.clone(),
            parametric_names: vec!["a".into(), "b".into(), "c".into()],
            blocks: vec![],
            grouping: None,
            y: y.clone(),
        };
        let fit = fit_reml(&problem).unwrap();
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
        assert!((&fit.beta_hat - ols).amax() < 1e-10);
        assert!((fit.total_edf() - 3.0).abs() < 1e-12);
    }

    fn wiggly_problem(seed: u64, n: usize) -> (Vec<f64>, MixedProblem) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = DVector::from_iterator(n, x.iter().map(|&v| (6.0 * v).sin() + noise.sample(&mut rng)));
        let problem = MixedProblem {
            parametric: intercept(n),
            parametric_names: vec!["(Intercept)".into()],
            blocks: vec![smooth(&x, 10)],
            grouping: None,
            y,
        };
        (x, problem)
    }

    #[test]
    fn huge_lambda_gives_straight_line() {
        let (x, problem) = wiggly_problem(2, 150);
        let fit = fit_fixed(&problem, &[1e10], None).unwrap();
        let n = x.len();
        let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let line = (design.transpose() * &design).try_inverse().unwrap() * design.transpose() * &problem.y;
        let ols = &design * line;
        let sd = (problem.y.variance() * n as f64 / (n - 1) as f64).sqrt();
        let worst = fit
            .fitted_values
            .iter()
            .zip(ols.iter())
            .map(|(a, b)| (a - b).abs() / sd)
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
        assert!((fit.terms[1].edf - 1.0).abs() < 0.01);
    }

    #[test]
    fn zero_lambda_is_unpenalized_least_squares() {
        let (_, problem) = wiggly_problem(3, 150);
        let fit = fit_fixed(&problem, &[0.0], None).unwrap();
        let b = &problem.blocks[0].design;
        let mut x = DMatrix::zeros(150, 1 + b.ncols());
        x.column_mut(0).fill(1.0);
        x.columns_mut(1, b.ncols()).copy_from(b);
        let ls = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &problem.y;
        assert!((&fit.beta_hat - ls).amax() < 1e-8);
        assert!((fit.terms[1].edf - b.ncols() as f64).abs() < 1e-8);
        assert!(fit.reml_value.is_none());
    }

    #[test]
    fn covariance_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, mut problem) = wiggly_problem(5, 120);
        let grouping: Vec<usize> = (0..x.len()).map(|i| i / 3).collect();
        for (i, g) in grouping.iter().enumerate() {
            problem.y[i] += ((*g as f64) * 0.37).sin() + rng.random_range(-0.05..0.05);
        }
        problem.grouping = Some(grouping);
        let fit = fit_reml(&problem).unwrap();
        let vc = &fit.variance_components;
        let lb = (vc.sigma / vc.sigma_b).powi(2);
        let (beta, a_inv, rss) = brute_force(&problem, &vc.lambda, lb);
        assert!((&fit.beta_hat - beta).amax() < 1e-8);
        let nu = 120.0 - 2.0;
        let cov = a_inv * (rss / nu);
        let rel = (&fit.coef_covariance - &cov).amax() / cov.amax();
        assert!(rel < 1e-8, "{rel}");
        let edf = compute_edf(&fit);
        for (t, e) in fit.terms.iter().zip(&edf) {
            assert!((t.edf - e).abs() < 1e-8);
        }
    }

    #[test]
    fn balanced_one_way_matches_anova_reml() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (groups, per) = (50, 4);
        let b = Normal::new(0.0, 1.5).unwrap();
        let e = Normal::new(0.0, 1.0).unwrap();
        let mut y = Vec::new();
        let mut grouping = Vec::new();
        for g in 0..groups {
            let bg = b.sample(&mut rng);
            for _ in 0..per {
                y.push(10.0 + bg + e.sample(&mut rng));
                grouping.push(g);
            }
        }
        let n = y.len();
        let grand = y.iter().sum::<f64>() / n as f64;
        let means: Vec<f64> = (0..groups)
            .map(|g| y[g * per..(g + 1) * per].iter().sum::<f64>() / per as f64)
            .collect();
        let ssw: f64 = (0..n).map(|i| (y[i] - means[grouping[i]]).powi(2)).sum();
        let ssb: f64 = means.iter().map(|m| per as f64 * (m - grand).powi(2)).sum();
        let msw = ssw / (n - groups) as f64;
        let msb = ssb / (groups - 1) as f64;
        let sigma2 = msw;
        let sigma_b2 = (msb - msw) / per as f64;
        assert!(sigma_b2 > 0.0);

        let problem = MixedProblem {
            parametric: intercept(n),
            parametric_names: vec!["(Intercept)".into()],
            blocks: vec![],
            grouping: Some(grouping),
            y: DVector::from_vec(y),
        };
        let fit = fit_reml(&problem).unwrap();
        let vc = &fit.variance_components;
        assert!((vc.sigma.powi(2) - sigma2).abs() / sigma2 < 1e-6, "{} vs {sigma2}", vc.sigma.powi(2));
        assert!(
            (vc.sigma_b.powi(2) - sigma_b2).abs() / sigma_b2 < 1e-6,
            "{} vs {sigma_b2}",
            vc.sigma_b.powi(2)
        );
        assert!((fit.beta_hat[0] - grand).abs() < 1e-8);
    }

    #[test]
    fn singleton_groups_pin_sigma_b() {
        let (x, mut problem) = wiggly_problem(6, 80);
        problem.grouping = Some((0..x.len()).collect());
        let fit = fit_reml(&problem).unwrap();
        assert!(fit.variance_components.sigma_b_pinned);
        assert_eq!(fit.variance_components.sigma_b, 0.0);
    }

    fn finite_difference_check(problem: &MixedProblem, rho: &DVector<f64>) -> f64 {
        let crit = RemlCriterion::new(problem).unwrap();
        let (_, g) = crit.evaluate(rho).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..rho.len() {
            let mut up = rho.clone();
            up[k] += h;
            let mut dn = rho.clone();
            dn[k] -= h;
            let fd = (crit.evaluate(&up).unwrap().0 - crit.evaluate(&dn).unwrap().0) / (2.0 * h);
            let rel = (fd - g[k]).abs() / g[k].abs().max(1e-2);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5 {
            let n = 90;
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let y = DVector::from_fn(n, |i, _| {
                (4.0 * x[i]).sin() + z[i] * x[i] + (i / 3) as f64 * 0.01 + rng.random_range(-0.3..0.3)
            });
            let sx = smooth(&x, 6);
            let sz = smooth(&z, 5);
            let tensor = apply_sum_to_zero_constraint(
                &crate::basis::tensor_product(&sx, &sz, crate::basis::TensorMode::Interaction).unwrap(),
            );
            let vc = varying_coefficient(&build_cr_basis(&x, 5, None).unwrap().0, &z).unwrap();
            let problem = MixedProblem {
                parametric: intercept(n),
                parametric_names: vec!["(Intercept)".into()],
                blocks: vec![sx, tensor, vc],
                grouping: Some((0..n).map(|i| i / 3).collect()),
                y,
            };
            let crit = RemlCriterion::new(&problem).unwrap();
            let rho = DVector::from_fn(crit.n_params(), |_, _| rng.random_range(-3.0..3.0));
            let worst = finite_difference_check(&problem, &rho);
            assert!(worst < 1e-4, "trial {trial}: {worst}");
        }
    }

    #[test]
    fn reml_optimum_has_small_gradient_and_monotone_trace() {
        let (x, mut problem) = wiggly_problem(8, 150);
        problem.grouping = Some((0..x.len()).map(|i| i / 2).collect());
        let fit = fit_reml(&problem).unwrap();
        assert!(fit.convergence.converged);
        assert!(fit.convergence.trace.windows(2).all(|w| w[1] <= w[0]));
        let edf = fit.terms[1].edf;
        assert!(edf > 3.0 && edf < 9.0, "{edf}");
        for (l, s) in fit.variance_components.lambda.iter().zip(&fit.variance_components.sigma_lambda) {
            let back = smoothing_parameter_from_variances(fit.variance_components.sigma, *s);
            assert!((back - l).abs() / l < 1e-12);
        }
    }

    #[test]
    fn collinear_fixed_part_is_rejected() {
        let (x, mut problem) = wiggly_problem(7, 60);
        let mut p = DMatrix::zeros(60, 2);
        p.column_mut(0).fill(1.0);
        for i in 0..60 {
            p[(i, 1)] = 3.0 - 2.0 * x[i];
        }
        problem.parametric = p;
        problem.parametric_names = vec!["(Intercept)".into(), "lin".into()];
        assert!(matches!(fit_reml(&problem), Err(Error::Identifiability(_))));
    }

    /// Cohort-style varying-coefficient edf over 100 longitudinal replicates
    /// whose true coefficient function is a straight line.
    fn straight_line_vc_edfs() -> Vec<f64> {
        let mut edfs = Vec::new();
        for r in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + r);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let person = Normal::new(0.0, 2.0).unwrap();
            let (mut a, mut c, mut g, mut y) = (vec![], vec![], vec![], vec![]);
            for id in 0..250 {
                let visits = rng.random_range(1..=3);
                let a0: f64 = rng.random_range(4.0..90.0);
                // birth date = baseline date − baseline age
                let ci = rng.random_range(30.0..40.0) - a0;
                let b = person.sample(&mut rng);
                let mut age = a0;
                for v in 0..visits {
                    if v > 0 {
                        age += rng.random_range(1.0..6.0);
                    }
                    a.push(age);
                    c.push(ci);
                    g.push(id);
                    y.push((age / 15.0).sin() * 5.0 + (0.01 + 0.001 * age) * ci + b + noise.sample(&mut rng));
                }
            }
            let n = y.len();
            let vc = varying_coefficient(&build_cr_basis(&a, 5, None).unwrap().0, &c).unwrap();
            let problem = MixedProblem {
                parametric: intercept(n),
                parametric_names: vec!["(Intercept)".into()],
                blocks: vec![smooth(&a, 20), vc],
                grouping: Some(g),
                y: DVector::from_vec(y),
            };
            edfs.push(fit_reml(&problem).unwrap().terms[2].edf);
        }
        edfs
    }

    #[test]
    fn straight_line_varying_coefficient_keeps_null_space() {
        let edfs = straight_line_vc_edfs();
        assert!(edfs.iter().all(|&e| e > 2.0 - 1e-6 && e < 5.0), "{edfs:?}");
        let at_line = edfs.iter().filter(|&&e| e < 2.01).count();
        assert!(at_line >= 30, "{at_line}");
    }

    #[test]
    fn straight_line_varying_coefficient_has_edf_near_two() {
        let edfs = straight_line_vc_edfs();
        let below = edfs.iter().filter(|&&e| e < 2.5).count();
        assert!(below >= 90, "{below}: {edfs:?}");
    }
}

//! Cubic regression spline bases, second-derivative penalties, identifiability
//! constraints, varying-coefficient columns, tensor products and ordered-factor
//! difference smooths.
//!
//! The cubic regression spline is parameterised by its values at the knots:
//! coefficient `j` is `f(knot_j)`. The second derivatives at the knots follow
//! from the natural-spline conditions through a banded system, which also
//! yields the exact penalty `∫ f''(x)² dx = βᵀ S β` over the knot range.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Factor;
use crate::error::{Error, Result};
use crate::linalg::{null_space_dim, orthogonal_complement, row_kronecker};

/// Strictly increasing knot locations (at least three).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct KnotVector(Vec<f64>);

impl KnotVector {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 3 {
            return Err(Error::Spec(format!(
                "a cubic regression spline needs at least 3 knots, got {}",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Spec("knots must be finite and strictly increasing".into()));
        }
        Ok(Self(knots))
    }

    pub fn equispaced(a: f64, b: f64, k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::Spec(format!("k must be at least 3, got {k}")));
        }
        Self::new((0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect())
    }

    /// `k` knots at quantiles of the distinct values of `x`, with the end
    /// knots at the range limits (sample min/max unless `range` is given).
    pub fn from_quantiles(x: &[f64], k: usize, range: Option<(f64, f64)>) -> Result<Self> {
        if k < 3 {
            return Err(Error::Spec(format!("k must be at least 3, got {k}")));
        }
        let mut u: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
        u.sort_by(f64::total_cmp);
        u.dedup();
        if u.len() < k {
            return Err(Error::Rank(format!(
                "{} distinct values cannot support {k} basis functions",
                u.len()
            )));
        }
        let last = (u.len() - 1) as f64;
        let mut knots: Vec<f64> = (0..k)
            .map(|i| {
                let pos = i as f64 * last / (k - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(u.len() - 1);
                let frac = pos - lo as f64;
                u[lo] + frac * (u[hi] - u[lo])
            })
            .collect();
        if let Some((a, b)) = range {
            if !(a < b) {
                return Err(Error::Spec("integration range must satisfy a < b".into()));
            }
            knots[0] = a;
            knots[k - 1] = b;
        }
        Self::new(knots)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.0[0], self.0[self.0.len() - 1])
    }
}

impl TryFrom<Vec<f64>> for KnotVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<KnotVector> for Vec<f64> {
    fn from(k: KnotVector) -> Self {
        k.0
    }
}

/// Natural cubic spline in value parameterisation over a fixed knot vector.
#[derive(Debug, Clone)]
pub struct CubicRegressionSpline {
    knots: KnotVector,
    /// Maps knot values to knot second derivatives (k × k, first/last rows zero).
    second_deriv: DMatrix<f64>,
    penalty: DMatrix<f64>,
}

impl CubicRegressionSpline {
    pub fn new(knots: KnotVector) -> Self {
        let x = knots.as_slice();
        let k = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let mut d = DMatrix::zeros(k - 2, k);
        let mut b = DMatrix::zeros(k - 2, k - 2);
        for i in 0..k - 2 {
            d[(i, i)] = 1.0 / h[i];
            d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
            d[(i, i + 2)] = 1.0 / h[i + 1];
            b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
            if i + 1 < k - 2 {
                b[(i, i + 1)] = h[i + 1] / 6.0;
                b[(i + 1, i)] = h[i + 1] / 6.0;
            }
        }
        let chol = nalgebra::Cholesky::new(b).expect("tridiagonal B is positive definite");
        let binv_d = chol.solve(&d);
        let mut second_deriv = DMatrix::zeros(k, k);
        second_deriv.rows_mut(1, k - 2).copy_from(&binv_d);
        let penalty = d.transpose() * &binv_d;
        let penalty = (&penalty + penalty.transpose()) * 0.5;
        Self {
            knots,
            second_deriv,
            penalty,
        }
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    /// `S` with `βᵀSβ = ∫ f''²` over the knot range.
    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    fn interval(&self, x: f64) -> usize {
        let kn = self.knots.as_slice();
        let k = kn.len();
        match kn.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => i.min(k - 2),
            Err(i) => i.saturating_sub(1).min(k - 2),
        }
    }

    fn value_row(&self, j: usize, x: f64, row: &mut [f64]) {
        let kn = self.knots.as_slice();
        let h = kn[j + 1] - kn[j];
        let am = (kn[j + 1] - x) / h;
        let ap = (x - kn[j]) / h;
        let cm = ((kn[j + 1] - x).powi(3) / h - h * (kn[j + 1] - x)) / 6.0;
        let cp = ((x - kn[j]).powi(3) / h - h * (x - kn[j])) / 6.0;
        row.iter_mut().for_each(|v| *v = 0.0);
        row[j] += am;
        row[j + 1] += ap;
        for (c, v) in row.iter_mut().enumerate() {
            *v += cm * self.second_deriv[(j, c)] + cp * self.second_deriv[(j + 1, c)];
        }
    }

    fn slope_row(&self, j: usize, x: f64, row: &mut [f64]) {
        let kn = self.knots.as_slice();
        let h = kn[j + 1] - kn[j];
        let cm = (-3.0 * (kn[j + 1] - x).powi(2) / h + h) / 6.0;
        let cp = (3.0 * (x - kn[j]).powi(2) / h - h) / 6.0;
        row.iter_mut().for_each(|v| *v = 0.0);
        row[j] -= 1.0 / h;
        row[j + 1] += 1.0 / h;
        for (c, v) in row.iter_mut().enumerate() {
            *v += cm * self.second_deriv[(j, c)] + cp * self.second_deriv[(j + 1, c)];
        }
    }

    /// Basis evaluated at `x` (n × k). Outside the knot range the spline is
    /// extended linearly.
    pub fn design(&self, x: &[f64]) -> DMatrix<f64> {
        let k = self.dim();
        let (lo, hi) = self.knots.range();
        let mut out = DMatrix::zeros(x.len(), k);
        let mut row = vec![0.0; k];
        let mut slope = vec![0.0; k];
        for (i, &xi) in x.iter().enumerate() {
            if xi < lo {
                self.value_row(0, lo, &mut row);
                self.slope_row(0, lo, &mut slope);
                for c in 0..k {
                    out[(i, c)] = row[c] + (xi - lo) * slope[c];
                }
            } else if xi > hi {
                self.value_row(k - 2, hi, &mut row);
                self.slope_row(k - 2, hi, &mut slope);
                for c in 0..k {
                    out[(i, c)] = row[c] + (xi - hi) * slope[c];
                }
            } else {
                self.value_row(self.interval(xi), xi, &mut row);
                for c in 0..k {
                    out[(i, c)] = row[c];
                }
            }
        }
        out
    }
}

/// Design columns for one model term together with its penalties.
#[derive(Debug, Clone)]
pub struct BasisBlock {
    pub design: DMatrix<f64>,
    /// One penalty per smoothing parameter (two for tensor products).
    pub penalties: Vec<DMatrix<f64>>,
    /// Maps free coefficients to the raw (unconstrained) basis coefficients.
    pub constraint_transform: DMatrix<f64>,
    pub null_space_dim: usize,
    pub term_label: String,
    pub knots: Vec<KnotVector>,
}

impl BasisBlock {
    pub fn ncols(&self) -> usize {
        self.design.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.design.nrows()
    }

    /// Sum of the penalties, i.e. the penalty at unit smoothing parameters.
    pub fn penalty(&self) -> DMatrix<f64> {
        let p = self.ncols();
        self.penalties
            .iter()
            .fold(DMatrix::zeros(p, p), |acc, s| acc + s)
    }

    fn refresh_null_space(&mut self) {
        self.null_space_dim = null_space_dim(&self.penalty());
    }
}

/// Cubic regression spline basis with `k` knots at quantiles of `x`.
pub fn build_cr_basis(
    x: &[f64],
    k: usize,
    range: Option<(f64, f64)>,
) -> Result<(BasisBlock, KnotVector)> {
    if k < 3 {
        return Err(Error::Spec(format!("k must be at least 3, got {k}")));
    }
    let knots = KnotVector::from_quantiles(x, k, range)?;
    Ok((cr_block(x, &knots, "s"), knots))
}

/// Cubic regression spline block over explicit knots.
pub fn cr_block(x: &[f64], knots: &KnotVector, label: &str) -> BasisBlock {
    let spline = CubicRegressionSpline::new(knots.clone());
    let k = spline.dim();
    BasisBlock {
        design: spline.design(x),
        penalties: vec![spline.penalty().clone()],
        constraint_transform: DMatrix::identity(k, k),
        null_space_dim: 2,
        term_label: label.to_string(),
        knots: vec![knots.clone()],
    }
}

/// Reparameterise so every design column sums to zero over the rows.
pub fn apply_sum_to_zero_constraint(block: &BasisBlock) -> BasisBlock {
    let sums = DVector::from_iterator(
        block.ncols(),
        block.design.column_iter().map(|c| c.sum()),
    );
    let z = orthogonal_complement(&sums);
    let mut out = BasisBlock {
        design: &block.design * &z,
        penalties: block
            .penalties
            .iter()
            .map(|s| {
                let t = z.transpose() * s * &z;
                (&t + t.transpose()) * 0.5
            })
            .collect(),
        constraint_transform: &block.constraint_transform * &z,
        null_space_dim: 0,
        term_label: block.term_label.clone(),
        knots: block.knots.clone(),
    };
    out.refresh_null_space();
    out
}

/// Multiply every design column by `z`, representing `β(x)·z`.
pub fn varying_coefficient(block: &BasisBlock, z: &[f64]) -> Result<BasisBlock> {
    if z.len() != block.nrows() {
        return Err(Error::LengthMismatch {
            expected: block.nrows(),
            actual: z.len(),
        });
    }
    let mut out = block.clone();
    for (i, &zi) in z.iter().enumerate() {
        out.design.row_mut(i).scale_mut(zi);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorMode {
    /// All pairwise products of the marginal bases.
    Full,
    /// Products of sum-to-zero marginals: main effects removed.
    Interaction,
}

/// Tensor product of two single-penalty marginal blocks with penalty
/// `λx Sx⊗I + λy I⊗Sy`.
///
/// `Full` returns the `kx·ky` unconstrained product columns; callers apply
/// [`apply_sum_to_zero_constraint`] for an identifiable term. `Interaction`
/// builds on sum-to-zero marginals and so has `(kx−1)(ky−1)` columns.
pub fn tensor_product(bx: &BasisBlock, by: &BasisBlock, mode: TensorMode) -> Result<BasisBlock> {
    if bx.nrows() != by.nrows() {
        return Err(Error::LengthMismatch {
            expected: bx.nrows(),
            actual: by.nrows(),
        });
    }
    let (mx, my) = match mode {
        TensorMode::Full => (bx.clone(), by.clone()),
        TensorMode::Interaction => (apply_sum_to_zero_constraint(bx), apply_sum_to_zero_constraint(by)),
    };
    let sx = mx.penalty();
    let sy = my.penalty();
    let (px, py) = (mx.ncols(), my.ncols());
    let design = row_kronecker(&mx.design, &my.design)?;
    let penalties = vec![
        sx.kronecker(&DMatrix::<f64>::identity(py, py)),
        DMatrix::<f64>::identity(px, px).kronecker(&sy),
    ];
    let mut knots = mx.knots.clone();
    knots.extend(my.knots.iter().cloned());
    let label = match mode {
        TensorMode::Full => format!("t2({},{})", bx.term_label, by.term_label),
        TensorMode::Interaction => format!("ti({},{})", bx.term_label, by.term_label),
    };
    let mut out = BasisBlock {
        design,
        penalties,
        constraint_transform: mx.constraint_transform.kronecker(&my.constraint_transform),
        null_space_dim: 0,
        term_label: label,
        knots,
    };
    out.refresh_null_space();
    Ok(out)
}

/// Difference smooths for an ordered factor with `L` levels.
///
/// Returns `L−1` sum-to-zero blocks, block `l` being the basis restricted to
/// rows at level `l+1` (zero elsewhere), together with the `L−1` indicator
/// columns carrying the level offsets that the centred smooths cannot.
pub fn factor_difference_smooths(
    block: &BasisBlock,
    factor: &Factor,
) -> Result<(Vec<BasisBlock>, DMatrix<f64>)> {
    if !factor.ordered {
        return Err(Error::Spec(
            "factor smooths need an ordered factor; declare the factor as ordered".into(),
        ));
    }
    if factor.codes.len() != block.nrows() {
        return Err(Error::LengthMismatch {
            expected: block.nrows(),
            actual: factor.codes.len(),
        });
    }
    let n_levels = factor.levels.len();
    let n_extra = n_levels.saturating_sub(1);
    let mut blocks = Vec::with_capacity(n_extra);
    let mut offsets = DMatrix::zeros(block.nrows(), n_extra);
    for level in 1..n_levels {
        let mut masked = block.clone();
        for (i, &code) in factor.codes.iter().enumerate() {
            if code != level {
                masked.design.row_mut(i).fill(0.0);
            } else {
                offsets[(i, level - 1)] = 1.0;
            }
        }
        masked.term_label = format!("{}:{}", block.term_label, factor.levels[level]);
        blocks.push(apply_sum_to_zero_constraint(&masked));
    }
    Ok((blocks, offsets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent route to ∫ f''²: recover the cubic on each knot interval
    /// from four evaluations of the basis, then Simpson's rule on f''².
    pub(crate) fn simpson_penalty(spline: &CubicRegressionSpline, beta: &DVector<f64>) -> f64 {
        let kn = spline.knots().as_slice().to_vec();
        let mut total = 0.0;
        for w in kn.windows(2) {
            let (a, b) = (w[0], w[1]);
            let h = b - a;
            let ts = [0.1, 0.4, 0.6, 0.9];
            let xs: Vec<f64> = ts.iter().map(|t| a + t * h).collect();
            let fx = spline.design(&xs) * beta;
            // cubic in local coordinate u = (x - a)/h
            let v = DMatrix::from_fn(4, 4, |i, j| ts[i].powi(j as i32));
            let c = v.lu().solve(&fx).unwrap();
            let f2 = |u: f64| (2.0 * c[2] + 6.0 * c[3] * u) / (h * h);
            let simpson = h / 6.0 * (f2(0.0).powi(2) + 4.0 * f2(0.5).powi(2) + f2(1.0).powi(2));
            total += simpson;
        }
        total
    }

    #[test]
    fn interpolation_at_knot() {
        let knots = KnotVector::new(vec![0.0, 0.5, 1.0]).unwrap();
        let s = CubicRegressionSpline::new(knots);
        let row = s.design(&[0.5]);
        for (got, want) in row.iter().zip([0.0, 1.0, 0.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_and_linear_functions_are_unpenalised() {
        let knots = KnotVector::new(vec![0.0, 0.2, 0.5, 0.7, 1.3]).unwrap();
        let s = CubicRegressionSpline::new(knots.clone());
        let ones = DVector::from_element(5, 1.0);
        assert!((ones.transpose() * s.penalty() * &ones)[0].abs() < 1e-12);
        let lin = DVector::from_column_slice(knots.as_slice());
        assert!((lin.transpose() * s.penalty() * &lin)[0].abs() < 1e-12);
        let blk = cr_block(&[0.1, 0.6], &knots, "x");
        assert_eq!(null_space_dim(&blk.penalty()), 2);
    }

    #[test]
    fn penalty_matches_simpson_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [5usize, 8, 10, 20] {
            let knots = if k == 8 {
                KnotVector::equispaced(0.0, 1.0, k).unwrap()
            } else {
                let mut v: Vec<f64> = (0..k).map(|i| i as f64 + rng.random_range(-0.3..0.3)).collect();
                v[0] = 0.0;
                KnotVector::new(v).unwrap()
            };
            let s = CubicRegressionSpline::new(knots);
            for _ in 0..100 {
                let beta = DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
                let exact = (beta.transpose() * s.penalty() * &beta)[0];
                let quad = simpson_penalty(&s, &beta);
                assert!(((exact - quad) / quad).abs() < 1e-6, "k={k}: {exact} vs {quad}");
            }
        }
    }

    #[test]
    fn linear_extrapolation_outside_range() {
        let knots = KnotVector::equispaced(0.0, 1.0, 6).unwrap();
        let s = CubicRegressionSpline::new(knots);
        let beta = DVector::from_fn(6, |i, _| (i as f64 * 0.7).sin());
        let f = |x: f64| (s.design(&[x]) * &beta)[0];
        let d1 = f(1.5) - f(1.25);
        let d2 = f(1.25) - f(1.0);
        assert!((d1 - d2).abs() < 1e-10);
    }

    #[test]
    fn too_few_distinct_values() {
        assert!(matches!(build_cr_basis(&[1.0, 1.0, 2.0, 2.0], 3, None), Err(Error::Rank(_))));
        assert!(matches!(build_cr_basis(&[1.0, 2.0, 3.0], 2, None), Err(Error::Spec(_))));
    }

    #[test]
    fn sum_to_zero_constraint_centres_columns() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 / 7.0).sin() * 3.0 + i as f64 * 0.1).collect();
        let (b, _) = build_cr_basis(&x, 20, None).unwrap();
        let c = apply_sum_to_zero_constraint(&b);
        assert_eq!(c.ncols(), 19);
        for col in c.design.column_iter() {
            assert!(col.sum().abs() < 1e-10);
        }
        assert_eq!(c.null_space_dim, 1);
    }

    #[test]
    fn constrained_fit_with_intercept_matches_unconstrained_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..80).map(|_| rng.random_range(0.0..10.0)).collect();
        let y = DVector::from_iterator(80, x.iter().map(|v| v.sin() + rng.random_range(-0.2..0.2)));
        let (b, _) = build_cr_basis(&x, 8, None).unwrap();
        let c = apply_sum_to_zero_constraint(&b);
        let mut xc = DMatrix::from_element(80, 8, 1.0);
        xc.columns_mut(1, 7).copy_from(&c.design);
        let fit_u = &b.design * b.design.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        let fit_c = &xc * xc.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        assert!((fit_u - fit_c).amax() < 1e-8);
        // constant target
        let y1 = DVector::from_element(80, 4.2);
        let fu = &b.design * b.design.clone().svd(true, true).solve(&y1, 1e-12).unwrap();
        let fc = &xc * xc.clone().svd(true, true).solve(&y1, 1e-12).unwrap();
        assert!((fu - fc).amax() < 1e-8);
    }

    #[test]
    fn varying_coefficient_edge_cases() {
        let x = [0.0, 0.3, 0.5, 0.9, 1.0];
        let (b, _) = build_cr_basis(&x, 4, None).unwrap();
        let zero = varying_coefficient(&b, &[0.0; 5]).unwrap();
        assert_eq!(zero.design.amax(), 0.0);
        let same = varying_coefficient(&b, &[1.0; 5]).unwrap();
        assert_eq!(same.design, b.design);
        assert_eq!(same.penalties, b.penalties);
        assert!(varying_coefficient(&b, &[1.0; 3]).is_err());
    }

    #[test]
    fn full_tensor_dimensions_and_constant_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(4.0..90.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..12.0)).collect();
        let (bx, _) = build_cr_basis(&x, 20, None).unwrap();
        let (bt, _) = build_cr_basis(&t, 5, None).unwrap();
        let full = tensor_product(&bx, &bt, TensorMode::Full).unwrap();
        assert_eq!(full.ncols(), 100);
        // value parameterisation: rows of each marginal sum to one, hence so do
        // the product rows; the all-ones coefficient is the constant function
        let ones = DVector::from_element(100, 1.0);
        assert!((&full.design * ones - DVector::from_element(n, 1.0)).amax() < 1e-12);
        assert_eq!(full.null_space_dim, 4);
        let constrained = apply_sum_to_zero_constraint(&full);
        assert_eq!(constrained.ncols(), 99);
        let ti = tensor_product(&bx, &bt, TensorMode::Interaction).unwrap();
        assert_eq!(ti.ncols(), 19 * 4);
        assert!(tensor_product(&bx, &cr_block(&t[..10], &bt.knots[0], "t"), TensorMode::Full).is_err());
    }

    #[test]
    fn interaction_tensor_annihilates_additive_functions_on_grid() {
        let gx: Vec<f64> = (0..15).map(|i| i as f64 / 14.0).collect();
        let gy: Vec<f64> = (0..9).map(|i| 2.0 * i as f64 / 8.0).collect();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for &a in &gx {
            for &b in &gy {
                x.push(a);
                y.push(b);
            }
        }
        let (bx, _) = build_cr_basis(&x, 6, None).unwrap();
        let (by, _) = build_cr_basis(&y, 4, None).unwrap();
        let ti = tensor_product(&bx, &by, TensorMode::Interaction).unwrap();
        let v = DVector::from_iterator(
            x.len(),
            x.iter().zip(&y).map(|(a, b)| (3.0 * a).sin() + b * b - 0.4 * b),
        );
        let q = ti.design.clone().qr().q();
        let proj = &q * (q.transpose() * &v);
        assert!(proj.norm() < 1e-8 * v.norm(), "{}", proj.norm());
    }

    fn ordered(codes: Vec<usize>, n_levels: usize) -> Factor {
        Factor {
            levels: (0..n_levels).map(|l| l.to_string()).collect(),
            codes,
            ordered: true,
        }
    }

    #[test]
    fn factor_difference_smooths_counts_and_zero_rows() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let codes: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (b, _) = build_cr_basis(&x, 6, None).unwrap();
        let (blocks, offsets) = factor_difference_smooths(&b, &ordered(codes.clone(), 3)).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(offsets.ncols(), 2);
        for blk in &blocks {
            for (i, &c) in codes.iter().enumerate() {
                if c == 0 {
                    assert!(blk.design.row(i).iter().all(|v| *v == 0.0));
                }
            }
        }
        let (none, off) = factor_difference_smooths(&b, &ordered(vec![0; 30], 1)).unwrap();
        assert!(none.is_empty());
        assert_eq!(off.ncols(), 0);
        let (all_base, _) = factor_difference_smooths(&b, &ordered(vec![0; 30], 3)).unwrap();
        assert!(all_base.iter().all(|blk| blk.design.amax() == 0.0));
        let mut unordered = ordered(codes, 3);
        unordered.ordered = false;
        assert!(matches!(factor_difference_smooths(&b, &unordered), Err(Error::Spec(_))));
    }
}

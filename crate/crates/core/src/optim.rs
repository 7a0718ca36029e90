//! Box-constrained BFGS with a monotone backtracking line search.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop once the projected gradient ∞-norm falls below this.
    pub grad_tol: f64,
    /// ... or once an accepted step changes the objective by less than this, relatively.
    pub rel_tol: f64,
    /// Largest allowed ∞-norm of a single step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
            max_step: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    /// ∞-norm of the gradient with bound-active components removed.
    pub projected_gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted step (starting value first).
    pub trace: Vec<f64>,
}

fn projected(g: &DVector<f64>, x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(g.len(), |i, _| {
        let at_lo = x[i] <= lo[i] && g[i] > 0.0;
        let at_hi = x[i] >= hi[i] && g[i] < 0.0;
        if at_lo || at_hi {
            0.0
        } else {
            g[i]
        }
    })
}

fn clamp(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].clamp(lo[i], hi[i]))
}

/// Minimise `f` (returning value and gradient) over the box `[lo, hi]`.
pub fn minimize_bfgs<F>(
    mut f: F,
    x0: DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    opts: &BfgsOptions,
) -> Result<BfgsResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let mut x = clamp(&x0, lo, hi);
    let (mut fx, mut g) = f(&x)?;
    let mut trace = vec![fx];
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        let pg = projected(&g, &x, lo, hi);
        if pg.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let free: Vec<bool> = (0..n).map(|i| pg[i] != 0.0 || (x[i] > lo[i] && x[i] < hi[i])).collect();
        let mut h = hinv.clone();
        for i in 0..n {
            if !free[i] {
                h.row_mut(i).fill(0.0);
                h.column_mut(i).fill(0.0);
            }
        }
        let mut dir = -(&h * &pg);
        if dir.dot(&pg) >= 0.0 {
            dir = -pg.clone();
            hinv = DMatrix::identity(n, n);
            fresh = true;
        }
        let dmax = dir.amax();
        if dmax > opts.max_step {
            dir *= opts.max_step / dmax;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let xn = clamp(&(&x + &dir * step), lo, hi);
            let s = &xn - &x;
            if s.amax() == 0.0 {
                break;
            }
            match f(&xn) {
                Ok((fxn, gn)) if fxn.is_finite() && fxn <= fx + 1e-4 * g.dot(&s) => {
                    accepted = Some((xn, fxn, gn));
                    break;
                }
                _ => step *= 0.5,
            }
        }

        let Some((xn, fxn, gn)) = accepted else {
            if fresh {
                // no descent possible even along the projected gradient
                converged = pg.amax() < opts.grad_tol.sqrt();
                break;
            }
            hinv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };

        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }

        let rel = (fx - fxn).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fxn;
        g = gn;
        trace.push(fx);
        if rel < opts.rel_tol {
            converged = true;
            break;
        }
    }

    let pg = projected(&g, &x, lo, hi);
    if pg.amax() < opts.grad_tol {
        converged = true;
    }
    Ok(BfgsResult {
        projected_gradient_norm: pg.amax(),
        x,
        value: fx,
        gradient: g,
        iterations,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            Ok((v, g))
        };
        let lo = DVector::from_element(2, -10.0);
        let hi = DVector::from_element(2, 10.0);
        let opts = BfgsOptions {
            max_iter: 500,
            rel_tol: 0.0,
            ..Default::default()
        };
        let r = minimize_bfgs(f, DVector::from_vec(vec![-1.2, 1.0]), &lo, &hi, &opts).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &DVector<f64>| Ok(((x[0] + 3.0).powi(2), DVector::from_vec(vec![2.0 * (x[0] + 3.0)])));
        let lo = DVector::from_element(1, -1.0);
        let hi = DVector::from_element(1, 1.0);
        let r = minimize_bfgs(f, DVector::from_vec(vec![0.5]), &lo, &hi, &BfgsOptions::default()).unwrap();
        assert_eq!(r.x[0], -1.0);
        assert!(r.converged);
    }
}

//! Posterior curve simulation, confidence bands, HDIs and term diagnostics.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::data::{format_f64, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::linalg::{psd_factor, truncated_pinv};
use crate::mixed::{FittedModel, TermFit, TermKind};
use crate::model::{normal_quantile, EffectDesign, ModelFit, TermBasis};

/// Draws per RNG substream; fixed so results do not depend on the worker count.
const BLOCK: usize = 512;

pub const DEFAULT_HDI_DRAWS: usize = 20_000;
pub const DEFAULT_BAND_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorCurveSample {
    /// `n_draws × grid.len()`.
    pub draws: DMatrix<f64>,
    pub grid: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Pointwise,
    Simultaneous,
    Hdi,
}

impl IntervalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IntervalKind::Pointwise => "pointwise",
            IntervalKind::Simultaneous => "simultaneous",
            IntervalKind::Hdi => "hdi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub kind: IntervalKind,
}

/// Band around a curve estimate at each grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub intervals: Vec<IntervalEstimate>,
    /// Multiple of the pointwise SE used for the half-width.
    pub multiplier: f64,
}

/// CSV with columns grid, estimate, lower, upper, kind; one block per band.
pub fn write_bands_csv<W: Write>(writer: W, bands: &[&Band]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["grid", "estimate", "lower", "upper", "kind"])?;
    for band in bands {
        for ((g, e), iv) in band.grid.iter().zip(&band.estimate).zip(&band.intervals) {
            w.write_record([
                format_f64(*g),
                format_f64(*e),
                format_f64(iv.lower),
                format_f64(iv.upper),
                iv.kind.as_str().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("level must lie in (0, 1), got {level}")))
    }
}

/// Linear functional of β with its estimate and the factor mapping standard
/// normal draws to deviations.
struct CurveLaw {
    mean: DVector<f64>,
    /// `X F` with `Σ̂ = F Fᵀ`.
    loading: DMatrix<f64>,
}

impl CurveLaw {
    fn new(fitted: &FittedModel, design: &DMatrix<f64>) -> Result<Self> {
        if design.ncols() != fitted.beta_hat.len() {
            return Err(Error::LengthMismatch {
                expected: fitted.beta_hat.len(),
                actual: design.ncols(),
            });
        }
        let factor = psd_factor(&fitted.coef_covariance)?;
        Ok(Self {
            mean: design * &fitted.beta_hat,
            loading: design * factor,
        })
    }

    /// Standardized deviations for draws of block `b`, row-major per draw.
    fn block_deviations(&self, seed: u64, block: usize, count: usize) -> DMatrix<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(block as u64);
        let r = self.loading.ncols();
        let z = DMatrix::from_fn(r, count, |_, _| StandardNormal.sample(&mut rng));
        &self.loading * z
    }

    fn blocks(n_draws: usize) -> Vec<(usize, usize)> {
        (0..n_draws.div_ceil(BLOCK))
            .map(|b| (b, BLOCK.min(n_draws - b * BLOCK)))
            .collect()
    }
}

/// Draws of `design · β_s` with `β_s ~ N(β̂, Σ̂_β)`.
pub fn sample_posterior_curves(
    fitted: &FittedModel,
    design: &DMatrix<f64>,
    grid: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<PosteriorCurveSample> {
    if n_draws == 0 {
        return Err(Error::Config("at least one posterior draw is required".into()));
    }
    if grid.len() != design.nrows() {
        return Err(Error::LengthMismatch {
            expected: design.nrows(),
            actual: grid.len(),
        });
    }
    let law = CurveLaw::new(fitted, design)?;
    let g = grid.len();
    let parts: Vec<DMatrix<f64>> = CurveLaw::blocks(n_draws)
        .into_par_iter()
        .map(|(b, count)| law.block_deviations(seed, b, count))
        .collect();
    let mut draws = DMatrix::zeros(n_draws, g);
    let mut row = 0;
    for dev in parts {
        for d in 0..dev.ncols() {
            for j in 0..g {
                draws[(row, j)] = law.mean[j] + dev[(j, d)];
            }
            row += 1;
        }
    }
    Ok(PosteriorCurveSample {
        draws,
        grid: grid.to_vec(),
        seed,
    })
}

/// `estimate ± z_{(1+level)/2} · se` at each point.
pub fn pointwise_band(grid: &[f64], estimate: &[f64], se: &[f64], level: f64) -> Result<Band> {
    check_level(level)?;
    let z = normal_quantile(level);
    Ok(scaled_band(grid, estimate, se, level, z, IntervalKind::Pointwise))
}

fn scaled_band(grid: &[f64], estimate: &[f64], se: &[f64], level: f64, m: f64, kind: IntervalKind) -> Band {
    let intervals = estimate
        .iter()
        .zip(se)
        .map(|(&e, &s)| IntervalEstimate {
            lower: e - m * s,
            upper: e + m * s,
            level,
            kind,
        })
        .collect();
    Band {
        grid: grid.to_vec(),
        estimate: estimate.to_vec(),
        intervals,
        multiplier: m,
    }
}

/// Simultaneous band from the `level` quantile of `max_g |deviation_g / se_g|`
/// over posterior draws. The multiplier never falls below the pointwise one.
pub fn simultaneous_band(
    fitted: &FittedModel,
    effect: &EffectDesign,
    level: f64,
    n_draws: usize,
    seed: u64,
) -> Result<Band> {
    check_level(level)?;
    if n_draws == 0 {
        return Err(Error::Config("at least one posterior draw is required".into()));
    }
    let law = CurveLaw::new(fitted, &effect.design)?;
    let se: Vec<f64> = law.loading.row_iter().map(|r| r.norm()).collect();
    let mut maxima: Vec<f64> = CurveLaw::blocks(n_draws)
        .into_par_iter()
        .flat_map_iter(|(b, count)| {
            let dev = law.block_deviations(seed, b, count);
            let se = &se;
            (0..count)
                .map(move |d| {
                    dev.column(d)
                        .iter()
                        .zip(se)
                        .filter(|(_, &s)| s > 0.0)
                        .fold(0.0f64, |m, (v, s)| m.max((v / s).abs()))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    let idx = ((level * n_draws as f64).ceil() as usize).clamp(1, n_draws) - 1;
    let m = maxima[idx].max(normal_quantile(level));
    let estimate: Vec<f64> = law.mean.iter().copied().collect();
    Ok(scaled_band(&effect.abscissa, &estimate, &se, level, m, IntervalKind::Simultaneous))
}

/// Shortest interval containing `ceil(level · n)` sample points; ties go to
/// the leftmost window.
pub fn hdi(sample: &[f64], level: f64) -> Result<IntervalEstimate> {
    check_level(level)?;
    if sample.is_empty() {
        return Err(Error::Config("HDI of an empty sample".into()));
    }
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = ((level * n as f64).ceil() as usize).clamp(1, n);
    let best = (0..=n - m)
        .min_by(|&i, &j| (v[i + m - 1] - v[i]).total_cmp(&(v[j + m - 1] - v[j])))
        .expect("non-empty");
    Ok(IntervalEstimate {
        lower: v[best],
        upper: v[best + m - 1],
        level,
        kind: IntervalKind::Hdi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeAtMax {
    pub ages: Vec<f64>,
    pub mean: f64,
    pub hdi: IntervalEstimate,
}

impl AgeAtMax {
    /// One-row summary: posterior_mean, hdi_lower, hdi_upper, level.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["posterior_mean", "hdi_lower", "hdi_upper", "level"])?;
        w.write_record([
            format_f64(self.mean),
            format_f64(self.hdi.lower),
            format_f64(self.hdi.upper),
            format_f64(self.hdi.level),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Location of each draw's maximum over the grid (ties to the smallest
/// abscissa) and the HDI of those locations.
pub fn age_at_max_distribution(sample: &PosteriorCurveSample, level: f64) -> Result<AgeAtMax> {
    if sample.grid.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    let ages: Vec<f64> = sample
        .draws
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                let better = row[j] > row[best] || (row[j] == row[best] && sample.grid[j] < sample.grid[best]);
                if better {
                    best = j;
                }
            }
            sample.grid[best]
        })
        .collect();
    let hdi = hdi(&ages, level)?;
    let mean = ages.iter().sum::<f64>() / ages.len() as f64;
    Ok(AgeAtMax { ages, mean, hdi })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub label: String,
    pub edf: f64,
    /// Rank of the pseudo-inverse (rounded edf), the numerator df.
    pub ref_df: f64,
    pub residual_df: f64,
    /// `β̂ᵀ Σ̂⁻ β̂ / ref_df`.
    pub statistic: f64,
    pub p_value: f64,
}

/// Wald test that a term's coefficients are zero, with an F(rank, residual df) reference.
pub fn wald_term_test(fitted: &FittedModel, term: &TermFit) -> WaldTest {
    let rank = (term.edf.round() as usize).clamp(1, term.ncols.max(1));
    let beta = fitted.term_coefficients(term);
    let v = fitted.term_covariance(term);
    let quad = beta.dot(&(truncated_pinv(&v, rank) * &beta)).max(0.0);
    let statistic = quad / rank as f64;
    let df2 = fitted.residual_df.max(1.0);
    let p_value = if statistic > 0.0 {
        let f = FisherSnedecor::new(rank as f64, df2).expect("positive df");
        1.0 - f.cdf(statistic)
    } else {
        1.0
    };
    WaldTest {
        label: term.label.clone(),
        edf: term.edf,
        ref_df: rank as f64,
        residual_df: df2,
        statistic,
        p_value,
    }
}

/// Wald tests for every smooth term.
pub fn smooth_term_tests(fitted: &FittedModel) -> Vec<WaldTest> {
    fitted
        .terms
        .iter()
        .filter(|t| t.kind == TermKind::Smooth)
        .map(|t| wald_term_test(fitted, t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisCheck {
    pub label: String,
    pub k_prime: usize,
    pub edf: f64,
    pub k_index: f64,
    pub p_value: f64,
}

fn k_index_of(residuals: &[f64], order: &[usize], variance: f64) -> f64 {
    let diffs: f64 = order
        .windows(2)
        .map(|w| (residuals[w[1]] - residuals[w[0]]).powi(2))
        .sum();
    diffs / (order.len() - 1) as f64 / (2.0 * variance)
}

/// Residual-pattern check for a univariate smooth: k-index is the mean squared
/// first difference of residuals ordered by `covariate`, over twice the
/// residual variance; p is the share of `n_permutations` random orderings
/// with a k-index at most the observed one.
pub fn basis_dimension_check(
    fitted: &FittedModel,
    term: &TermFit,
    covariate: &[f64],
    n_permutations: usize,
    seed: u64,
) -> Result<BasisCheck> {
    let r = &fitted.residuals;
    if covariate.len() != r.len() {
        return Err(Error::LengthMismatch {
            expected: r.len(),
            actual: covariate.len(),
        });
    }
    if r.len() < 3 {
        return Err(Error::Config("too few residuals for a basis dimension check".into()));
    }
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let variance = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| covariate[a].total_cmp(&covariate[b]));
    let observed = k_index_of(r, &order, variance);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut perm = order.clone();
    let at_most = (0..n_permutations)
        .filter(|_| {
            perm.shuffle(&mut rng);
            k_index_of(r, &perm, variance) <= observed
        })
        .count();
    Ok(BasisCheck {
        label: term.label.clone(),
        k_prime: term.ncols,
        edf: term.edf,
        k_index: observed,
        p_value: (at_most + 1) as f64 / (n_permutations + 1) as f64,
    })
}

/// Basis checks for every univariate smooth of a model fitted to `dataset`.
pub fn check_model_bases(
    model: &ModelFit,
    dataset: &LongitudinalDataset,
    n_permutations: usize,
    seed: u64,
) -> Result<Vec<BasisCheck>> {
    let data = if model.spec.baseline_only {
        dataset.baseline_subset()
    } else {
        dataset.clone()
    };
    let frame = data.to_frame();
    let mut out = Vec::new();
    for term in &model.terms {
        let TermBasis::Spline {
            var,
            by: None,
            restrict: None,
            ..
        } = &term.basis
        else {
            continue;
        };
        let fit_term = model
            .fit
            .term(&term.label)
            .ok_or_else(|| Error::Spec(format!("term `{}` missing from the fit", term.label)))?;
        out.push(basis_dimension_check(
            &model.fit,
            fit_term,
            frame.numeric(var)?,
            n_permutations,
            seed,
        )?);
    }
    Ok(out)
}

//! Model specifications, design assembly, prediction and effect curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::basis::{
    apply_sum_to_zero_constraint, build_cr_basis, factor_difference_smooths, tensor_product,
    varying_coefficient, BasisBlock, CubicRegressionSpline, KnotVector, TensorMode,
};
use crate::data::{columns, Column, Factor, Frame, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::linalg::{quad_diag, row_kronecker};
use crate::mixed::{fit_reml, FittedModel, MixedProblem};

/// Version tag written into serialized model files.
pub const FORMAT_VERSION: u32 = 1;

pub const INTERCEPT: &str = "(Intercept)";

/// Variables that carry the age/time/cohort structure of a model.
const TIME_STRUCTURE: [&str; 5] = [
    columns::AGE,
    columns::BASELINE_AGE,
    columns::TIME,
    columns::BIRTH_DATE,
    columns::DATE,
];

/// The six model families compared in the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Smooth of age fitted to first visits only.
    #[serde(rename = "1a")]
    AgeBaselineOnly,
    /// Smooth of age with a random intercept.
    #[serde(rename = "1b")]
    Age,
    /// Smooth of baseline age plus a baseline-age varying slope in time.
    #[serde(rename = "2a")]
    BaselineAgeVaryingTime,
    /// Full tensor smooth of baseline age and time.
    #[serde(rename = "2b")]
    BaselineAgeTimeTensor,
    /// Smooth of age plus a linear birth-date offset.
    #[serde(rename = "3a")]
    AgeCohortOffset,
    /// Smooth of age plus an age-varying birth-date coefficient.
    #[serde(rename = "3b")]
    AgeCohortVarying,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::AgeBaselineOnly,
        Variant::Age,
        Variant::BaselineAgeVaryingTime,
        Variant::BaselineAgeTimeTensor,
        Variant::AgeCohortOffset,
        Variant::AgeCohortVarying,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Variant::AgeBaselineOnly => "1a",
            Variant::Age => "1b",
            Variant::BaselineAgeVaryingTime => "2a",
            Variant::BaselineAgeTimeTensor => "2b",
            Variant::AgeCohortOffset => "3a",
            Variant::AgeCohortVarying => "3b",
        }
    }

    pub fn needs_cohort(self) -> bool {
        matches!(self, Variant::AgeCohortOffset | Variant::AgeCohortVarying)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Spec(format!("unknown model variant `{s}` (expected one of 1a, 1b, 2a, 2b, 3a, 3b)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TermSpec {
    Smooth { var: String, k: usize },
    VaryingCoefficient { smooth_var: String, by_var: String, k: usize },
    TensorFull { var1: String, var2: String, k1: usize, k2: usize },
    TensorInteraction { var1: String, var2: String, k1: usize, k2: usize },
    FactorSmooth { smooth_var: String, factor: String, k: usize },
    Parametric { var: String },
    OrderedFactorMain { var: String },
    RandomIntercept { group: String },
}

impl TermSpec {
    fn variables(&self) -> Vec<&str> {
        match self {
            TermSpec::Smooth { var, .. } | TermSpec::Parametric { var } | TermSpec::OrderedFactorMain { var } => {
                vec![var]
            }
            TermSpec::VaryingCoefficient { smooth_var, by_var, .. } => vec![smooth_var, by_var],
            TermSpec::TensorFull { var1, var2, .. } | TermSpec::TensorInteraction { var1, var2, .. } => {
                vec![var1, var2]
            }
            TermSpec::FactorSmooth { smooth_var, factor, .. } => vec![smooth_var, factor],
            TermSpec::RandomIntercept { group } => vec![group],
        }
    }
}

/// Declarative model: an outcome, an ordered list of terms and an implicit intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcome: String,
    pub terms: Vec<TermSpec>,
    /// Fit to each participant's first visit only.
    #[serde(default)]
    pub baseline_only: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let n_ri = self
            .terms
            .iter()
            .filter(|t| matches!(t, TermSpec::RandomIntercept { .. }))
            .count();
        if n_ri > 1 {
            return Err(Error::Spec("at most one random intercept is allowed".into()));
        }
        for t in &self.terms {
            if let TermSpec::FactorSmooth { factor, .. } = t {
                let has_main = self
                    .terms
                    .iter()
                    .any(|m| matches!(m, TermSpec::OrderedFactorMain { var } if var == factor));
                if !has_main {
                    return Err(Error::Spec(format!(
                        "factor smooth by `{factor}` needs the ordered-factor main effect of `{factor}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn random_intercept_group(&self) -> Option<&str> {
        self.terms.iter().find_map(|t| match t {
            TermSpec::RandomIntercept { group } => Some(group.as_str()),
            _ => None,
        })
    }

    fn uses(&self, var: &str) -> bool {
        self.terms.iter().any(|t| {
            !matches!(t, TermSpec::RandomIntercept { .. }) && t.variables().contains(&var)
        })
    }
}

/// Basis dimensions of the canonical variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisDims {
    pub k_age: usize,
    pub k_time: usize,
    pub k_cohort: usize,
}

impl Default for BasisDims {
    fn default() -> Self {
        Self {
            k_age: 20,
            k_time: 5,
            k_cohort: 5,
        }
    }
}

/// Specification of one of the six variants, with covariates as parametric terms.
pub fn canonical_spec(variant: Variant, dims: BasisDims, outcome: &str, covariates: &[String]) -> ModelSpec {
    let s = |v: &str, k| TermSpec::Smooth { var: v.into(), k };
    let ri = TermSpec::RandomIntercept {
        group: columns::PARTICIPANT.into(),
    };
    let mut terms = match variant {
        Variant::AgeBaselineOnly => vec![s(columns::AGE, dims.k_age)],
        Variant::Age => vec![s(columns::AGE, dims.k_age), ri],
        Variant::BaselineAgeVaryingTime => vec![
            s(columns::BASELINE_AGE, dims.k_age),
            TermSpec::VaryingCoefficient {
                smooth_var: columns::BASELINE_AGE.into(),
                by_var: columns::TIME.into(),
                k: dims.k_time,
            },
            ri,
        ],
        Variant::BaselineAgeTimeTensor => vec![
            TermSpec::TensorFull {
                var1: columns::BASELINE_AGE.into(),
                var2: columns::TIME.into(),
                k1: dims.k_age,
                k2: dims.k_time,
            },
            ri,
        ],
        Variant::AgeCohortOffset => vec![
            s(columns::AGE, dims.k_age),
            TermSpec::Parametric {
                var: columns::BIRTH_DATE.into(),
            },
            ri,
        ],
        Variant::AgeCohortVarying => vec![
            s(columns::AGE, dims.k_age),
            TermSpec::VaryingCoefficient {
                smooth_var: columns::AGE.into(),
                by_var: columns::BIRTH_DATE.into(),
                k: dims.k_cohort,
            },
            ri,
        ],
    };
    terms.extend(covariates.iter().map(|c| TermSpec::Parametric { var: c.clone() }));
    ModelSpec {
        outcome: outcome.into(),
        terms,
        baseline_only: variant == Variant::AgeBaselineOnly,
        variant: Some(variant),
    }
}

/// Recipe that regenerates a term's design columns on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermBasis {
    Intercept,
    Numeric {
        var: String,
    },
    /// Treatment coding: one indicator per non-reference level.
    Indicators {
        var: String,
        levels: Vec<String>,
    },
    Spline {
        var: String,
        knots: KnotVector,
        /// Multiply every column by this variable.
        by: Option<String>,
        /// Keep only rows at `(factor, level)`.
        restrict: Option<(String, String)>,
        transform: DMatrix<f64>,
    },
    Tensor {
        var1: String,
        var2: String,
        knots1: KnotVector,
        knots2: KnotVector,
        mode: TensorMode,
        transform: DMatrix<f64>,
    },
}

impl TermBasis {
    fn variables(&self) -> Vec<&str> {
        match self {
            TermBasis::Intercept => vec![],
            TermBasis::Numeric { var } | TermBasis::Indicators { var, .. } => vec![var],
            TermBasis::Spline { var, by, restrict, .. } => {
                let mut v = vec![var.as_str()];
                v.extend(by.as_deref());
                v.extend(restrict.as_ref().map(|(f, _)| f.as_str()));
                v
            }
            TermBasis::Tensor { var1, var2, .. } => vec![var1, var2],
        }
    }

    fn design(&self, frame: &Frame) -> Result<DMatrix<f64>> {
        let n = frame.nrows();
        Ok(match self {
            TermBasis::Intercept => DMatrix::from_element(n, 1, 1.0),
            TermBasis::Numeric { var } => DMatrix::from_column_slice(n, 1, frame.numeric(var)?),
            TermBasis::Indicators { var, levels } => {
                let codes = level_codes(frame.factor(var)?, levels, var)?;
                DMatrix::from_fn(n, levels.len() - 1, |i, j| f64::from(codes[i] == j + 1))
            }
            TermBasis::Spline {
                var,
                knots,
                by,
                restrict,
                transform,
            } => {
                let mut raw = CubicRegressionSpline::new(knots.clone()).design(frame.numeric(var)?);
                if let Some(by) = by {
                    for (i, &z) in frame.numeric(by)?.iter().enumerate() {
                        raw.row_mut(i).scale_mut(z);
                    }
                }
                if let Some((factor, level)) = restrict {
                    let f = frame.factor(factor)?;
                    for i in 0..n {
                        if f.levels[f.codes[i]] != *level {
                            raw.row_mut(i).fill(0.0);
                        }
                    }
                }
                raw * transform
            }
            TermBasis::Tensor {
                var1,
                var2,
                knots1,
                knots2,
                transform,
                ..
            } => {
                let a = CubicRegressionSpline::new(knots1.clone()).design(frame.numeric(var1)?);
                let b = CubicRegressionSpline::new(knots2.clone()).design(frame.numeric(var2)?);
                row_kronecker(&a, &b)? * transform
            }
        })
    }
}

fn level_codes(factor: &Factor, levels: &[String], var: &str) -> Result<Vec<usize>> {
    factor
        .codes
        .iter()
        .map(|&c| {
            let name = &factor.levels[c];
            levels
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| Error::Spec(format!("level `{name}` of `{var}` was not seen in training")))
        })
        .collect()
}

/// One model term and where its coefficients live in β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledTerm {
    pub label: String,
    pub basis: TermBasis,
    pub start: usize,
    pub ncols: usize,
    pub penalized: bool,
}

/// Design blocks ready for fitting plus everything prediction needs.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub problem: MixedProblem,
    pub terms: Vec<AssembledTerm>,
    pub variable_ranges: BTreeMap<String, (f64, f64)>,
    pub reference_values: BTreeMap<String, f64>,
    pub group_labels: Vec<String>,
}

fn numeric_range(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn smooth_label(var: &str) -> String {
    format!("s({var})")
}

/// Build design blocks for `spec` on `dataset`.
///
/// Parametric columns (intercept first, then parametric terms in order) come
/// before all smooth blocks, which follow term order.
pub fn assemble(spec: &ModelSpec, dataset: &LongitudinalDataset) -> Result<Assembly> {
    spec.validate()?;
    let data = if spec.baseline_only {
        dataset.baseline_subset()
    } else {
        dataset.clone()
    };
    let frame = data.to_frame();
    let n = frame.nrows();
    let y = DVector::from_column_slice(frame.numeric(&spec.outcome)?);

    let mut param_cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut param_names = vec![INTERCEPT.to_string()];
    let mut param_terms = vec![AssembledTerm {
        label: INTERCEPT.into(),
        basis: TermBasis::Intercept,
        start: 0,
        ncols: 1,
        penalized: false,
    }];
    let mut blocks: Vec<BasisBlock> = Vec::new();
    let mut smooth_terms: Vec<AssembledTerm> = Vec::new();
    let mut variable_ranges = BTreeMap::new();
    let mut reference_values = BTreeMap::new();

    for var in spec.terms.iter().flat_map(|t| t.variables()) {
        if !frame.contains(var) {
            return Err(Error::Schema { column: var.into() });
        }
        if let Ok(v) = frame.numeric(var) {
            variable_ranges.insert(var.to_string(), numeric_range(v));
        }
    }

    let mut push_smooth = |block: BasisBlock, basis: TermBasis, blocks: &mut Vec<BasisBlock>| {
        smooth_terms.push(AssembledTerm {
            label: block.term_label.clone(),
            basis,
            start: 0,
            ncols: block.ncols(),
            penalized: true,
        });
        blocks.push(block);
    };

    for term in &spec.terms {
        match term {
            TermSpec::Smooth { var, k } => {
                let x = frame.numeric(var)?;
                let (raw, knots) = build_cr_basis(x, *k, None)?;
                let mut block = apply_sum_to_zero_constraint(&raw);
                block.term_label = smooth_label(var);
                let basis = TermBasis::Spline {
                    var: var.clone(),
                    knots,
                    by: None,
                    restrict: None,
                    transform: block.constraint_transform.clone(),
                };
                push_smooth(block, basis, &mut blocks);
            }
            TermSpec::VaryingCoefficient { smooth_var, by_var, k } => {
                let x = frame.numeric(smooth_var)?;
                let z = frame.numeric(by_var)?;
                let (raw, knots) = build_cr_basis(x, *k, None)?;
                let mut block = varying_coefficient(&raw, z)?;
                block.term_label = format!("{}:{by_var}", smooth_label(smooth_var));
                let basis = TermBasis::Spline {
                    var: smooth_var.clone(),
                    knots,
                    by: Some(by_var.clone()),
                    restrict: None,
                    transform: block.constraint_transform.clone(),
                };
                push_smooth(block, basis, &mut blocks);
            }
            TermSpec::TensorFull { var1, var2, k1, k2 } | TermSpec::TensorInteraction { var1, var2, k1, k2 } => {
                let mode = if matches!(term, TermSpec::TensorFull { .. }) {
                    TensorMode::Full
                } else {
                    TensorMode::Interaction
                };
                let (bx, kx) = build_cr_basis(frame.numeric(var1)?, *k1, None)?;
                let (by, ky) = build_cr_basis(frame.numeric(var2)?, *k2, None)?;
                let product = tensor_product(&bx, &by, mode)?;
                let mut block = match mode {
                    TensorMode::Full => apply_sum_to_zero_constraint(&product),
                    TensorMode::Interaction => product,
                };
                block.term_label = match mode {
                    TensorMode::Full => format!("t2({var1},{var2})"),
                    TensorMode::Interaction => format!("ti({var1},{var2})"),
                };
                let basis = TermBasis::Tensor {
                    var1: var1.clone(),
                    var2: var2.clone(),
                    knots1: kx,
                    knots2: ky,
                    mode,
                    transform: block.constraint_transform.clone(),
                };
                push_smooth(block, basis, &mut blocks);
            }
            TermSpec::FactorSmooth { smooth_var, factor, k } => {
                let x = frame.numeric(smooth_var)?;
                let f = frame.factor(factor)?;
                let (raw, knots) = build_cr_basis(x, *k, None)?;
                let (diff_blocks, _) = factor_difference_smooths(&raw, f)?;
                for (level, mut block) in f.levels.iter().skip(1).zip(diff_blocks) {
                    block.term_label = format!("{}:{factor}{level}", smooth_label(smooth_var));
                    let basis = TermBasis::Spline {
                        var: smooth_var.clone(),
                        knots: knots.clone(),
                        by: None,
                        restrict: Some((factor.clone(), level.clone())),
                        transform: block.constraint_transform.clone(),
                    };
                    push_smooth(block, basis, &mut blocks);
                }
            }
            TermSpec::Parametric { var } | TermSpec::OrderedFactorMain { var } => {
                let start = param_cols.len();
                let basis = match frame.column(var)? {
                    Column::Numeric(v) => {
                        param_cols.push(v.clone());
                        param_names.push(var.clone());
                        reference_values.insert(var.clone(), v.iter().sum::<f64>() / n as f64);
                        TermBasis::Numeric { var: var.clone() }
                    }
                    Column::Factor(f) => {
                        if matches!(term, TermSpec::OrderedFactorMain { .. }) && !f.ordered {
                            return Err(Error::Spec(format!(
                                "`{var}` must be declared as an ordered factor"
                            )));
                        }
                        for (l, level) in f.levels.iter().enumerate().skip(1) {
                            param_cols.push(f.codes.iter().map(|&c| f64::from(c == l)).collect());
                            param_names.push(format!("{var}{level}"));
                        }
                        TermBasis::Indicators {
                            var: var.clone(),
                            levels: f.levels.clone(),
                        }
                    }
                };
                param_terms.push(AssembledTerm {
                    label: var.clone(),
                    basis,
                    start,
                    ncols: param_cols.len() - start,
                    penalized: false,
                });
            }
            TermSpec::RandomIntercept { .. } => {}
        }
    }

    let p0 = param_cols.len();
    let mut offset = p0;
    for t in &mut smooth_terms {
        t.start = offset;
        offset += t.ncols;
    }
    let parametric = DMatrix::from_fn(n, p0, |i, j| param_cols[j][i]);

    let (grouping, group_labels) = match spec.random_intercept_group() {
        None => (None, Vec::new()),
        Some(g) => {
            let f = frame.factor(g)?;
            (Some(compact_codes(&f.codes)), f.levels.clone())
        }
    };

    let mut terms = param_terms;
    terms.extend(smooth_terms);
    Ok(Assembly {
        problem: MixedProblem {
            parametric,
            parametric_names: param_names,
            blocks,
            grouping,
            y,
        },
        terms,
        variable_ranges,
        reference_values,
        group_labels,
    })
}

/// Relabel codes to 0..q in first-appearance order.
fn compact_codes(codes: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    codes
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// A fitted model together with the recipes needed to predict from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub spec_hash: String,
    pub terms: Vec<AssembledTerm>,
    pub variable_ranges: BTreeMap<String, (f64, f64)>,
    pub reference_values: BTreeMap<String, f64>,
    pub group_labels: Vec<String>,
    pub fit: FittedModel,
}

/// Assemble and fit by REML.
pub fn fit_model(spec: &ModelSpec, dataset: &LongitudinalDataset) -> Result<ModelFit> {
    let assembly = assemble(spec, dataset)?;
    let fit = fit_reml(&assembly.problem)?;
    Ok(ModelFit {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        spec_hash: spec.hash(),
        terms: assembly.terms,
        variable_ranges: assembly.variable_ranges,
        reference_values: assembly.reference_values,
        group_labels: assembly.group_labels,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Rows mapping β to a curve evaluated at `abscissa`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectDesign {
    pub abscissa: Vec<f64>,
    pub design: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Curve of a derived effect with its pointwise standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCurve {
    pub abscissa: Vec<f64>,
    pub estimate: Vec<f64>,
    pub pointwise_se: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EffectCurve {
    /// CSV with columns abscissa, estimate, se, lower, upper (pointwise band at `level`).
    pub fn write_csv<W: Write>(&self, writer: W, abscissa_name: &str, level: f64) -> Result<()> {
        let z = normal_quantile(level);
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([abscissa_name, "estimate", "se", "lower", "upper"])?;
        for i in 0..self.abscissa.len() {
            let (e, s) = (self.estimate[i], self.pointwise_se[i]);
            w.write_record([
                crate::data::format_f64(self.abscissa[i]),
                crate::data::format_f64(e),
                crate::data::format_f64(s),
                crate::data::format_f64(e - z * s),
                crate::data::format_f64(e + z * s),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Two-sided standard normal multiplier for a central interval of mass `level`.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0)
}

impl ModelFit {
    pub fn to_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn from_json<R: Read>(reader: R) -> Result<Self> {
        let fit: Self = serde_json::from_reader(reader)?;
        if fit.format_version != FORMAT_VERSION {
            return Err(Error::Serialization(format!(
                "model file version {} is not supported (expected {FORMAT_VERSION})",
                fit.format_version
            )));
        }
        if fit.spec.hash() != fit.spec_hash {
            return Err(Error::Serialization("model file spec hash does not match its spec".into()));
        }
        Ok(fit)
    }

    pub fn variant(&self) -> Option<Variant> {
        self.spec.variant
    }

    pub fn uses_cohort(&self) -> bool {
        self.spec.uses(columns::BIRTH_DATE) || self.spec.uses(columns::DATE)
    }

    fn model_variables(&self) -> BTreeSet<&str> {
        self.terms.iter().flat_map(|t| t.basis.variables()).collect()
    }

    /// Fill derivable time-structure columns and pin absent covariates to reference values.
    pub fn complete_grid(&self, grid: &Frame) -> Result<Frame> {
        let mut out = grid.clone();
        let n = grid.nrows();
        let num = |f: &Frame, name: &str| f.numeric(name).ok().map(<[f64]>::to_vec);
        if !out.contains(columns::AGE) {
            if let (Some(a0), Some(t)) = (num(&out, columns::BASELINE_AGE), num(&out, columns::TIME)) {
                out.insert_numeric(columns::AGE, a0.iter().zip(&t).map(|(a, t)| a + t).collect());
            }
        }
        if !out.contains(columns::BIRTH_DATE) {
            if let (Some(d), Some(a)) = (num(&out, columns::DATE), num(&out, columns::AGE)) {
                out.insert_numeric(columns::BIRTH_DATE, d.iter().zip(&a).map(|(d, a)| d - a).collect());
            }
        }
        if !out.contains(columns::DATE) {
            if let (Some(c), Some(a)) = (num(&out, columns::BIRTH_DATE), num(&out, columns::AGE)) {
                out.insert_numeric(columns::DATE, c.iter().zip(&a).map(|(c, a)| c + a).collect());
            }
        }
        for term in &self.terms {
            match &term.basis {
                TermBasis::Numeric { var } if !out.contains(var) => {
                    if let Some(&r) = self.reference_values.get(var) {
                        out.insert_numeric(var, vec![r; n]);
                    }
                }
                TermBasis::Indicators { var, levels } if !out.contains(var) => {
                    out.insert_factor(
                        var,
                        Factor {
                            levels: levels.clone(),
                            codes: vec![0; n],
                            ordered: false,
                        },
                    );
                }
                _ => {}
            }
        }
        for var in self.model_variables() {
            if !out.contains(var) {
                return Err(Error::Schema { column: var.into() });
            }
        }
        Ok(out)
    }

    /// Population-level design matrix for a completed grid.
    pub fn design(&self, grid: &Frame) -> Result<DMatrix<f64>> {
        let p = self.fit.beta_hat.len();
        let mut x = DMatrix::zeros(grid.nrows(), p);
        for term in &self.terms {
            let block = term.basis.design(grid)?;
            x.columns_mut(term.start, term.ncols).copy_from(&block);
        }
        Ok(x)
    }

    fn extrapolation_warnings(&self, grid: &Frame) -> Vec<String> {
        let mut out = Vec::new();
        for var in self.model_variables() {
            let (Some(&(lo, hi)), Ok(v)) = (self.variable_ranges.get(var), grid.numeric(var)) else {
                continue;
            };
            let slack = 1e-9 * (hi - lo).abs().max(1.0);
            let (glo, ghi) = numeric_range(v);
            if glo < lo - slack || ghi > hi + slack {
                out.push(format!(
                    "`{var}` ranges over [{glo}, {ghi}] but the model was fitted on [{lo}, {hi}]; values outside are extrapolated"
                ));
            }
        }
        out
    }

    /// Prediction rows for `grid`, with `abscissa_var` as the curve abscissa.
    pub fn prediction_design(&self, grid: &Frame, abscissa_var: &str) -> Result<EffectDesign> {
        let grid = self.complete_grid(grid)?;
        Ok(EffectDesign {
            abscissa: grid.numeric(abscissa_var)?.to_vec(),
            design: self.design(&grid)?,
            warnings: self.extrapolation_warnings(&grid),
        })
    }

    /// Population-level prediction (random intercepts excluded) with pointwise SE.
    pub fn predict(&self, grid: &Frame) -> Result<Prediction> {
        let grid = self.complete_grid(grid)?;
        let x = self.design(&grid)?;
        let estimate = (&x * &self.fit.beta_hat).iter().copied().collect();
        let se = quad_diag(&x, &self.fit.coef_covariance)
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        Ok(Prediction {
            estimate,
            se,
            warnings: self.extrapolation_warnings(&grid),
        })
    }

    /// Point estimate and pointwise SE of a linear functional of β.
    pub fn evaluate(&self, effect: EffectDesign) -> EffectCurve {
        let EffectDesign {
            abscissa,
            design: x,
            warnings,
        } = effect;
        let estimate = (&x * &self.fit.beta_hat)
            .iter()
            .map(|&v| if v == 0.0 { 0.0 } else { v })
            .collect();
        let pointwise_se = quad_diag(&x, &self.fit.coef_covariance)
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        EffectCurve {
            abscissa,
            estimate,
            pointwise_se,
            warnings,
        }
    }

    /// Grid rows following one participant from `baseline_age` for `times`.
    fn follow_up_grid(&self, baseline_age: f64, cohort: Option<f64>, times: &[f64]) -> Result<Frame> {
        let n = times.len();
        let mut g = Frame::new(n);
        let ages: Vec<f64> = times.iter().map(|t| baseline_age + t).collect();
        g.insert_numeric(columns::BASELINE_AGE, vec![baseline_age; n]);
        g.insert_numeric(columns::TIME, times.to_vec());
        if let Some(c) = cohort {
            g.insert_numeric(columns::BIRTH_DATE, vec![c; n]);
            g.insert_numeric(columns::DATE, ages.iter().map(|a| c + a).collect());
        }
        g.insert_numeric(columns::AGE, ages);
        self.complete_grid(&g)
    }

    /// Contrast rows `X(t) − X(0)` following a fixed-cohort participant from
    /// `baseline_age` over `t = 0, step, …, horizon`.
    pub fn longitudinal_design(
        &self,
        baseline_age: f64,
        cohort: Option<f64>,
        horizon: f64,
        step: f64,
    ) -> Result<EffectDesign> {
        if !(horizon > 0.0) || !(step > 0.0) {
            return Err(Error::Config("horizon and step must be positive".into()));
        }
        if self.uses_cohort() && cohort.is_none() {
            return Err(Error::Config(
                "this model has a cohort term; a birth date (cohort) is required for longitudinal effects".into(),
            ));
        }
        let count = (horizon / step + 1e-9).floor() as usize + 1;
        let times: Vec<f64> = (0..count).map(|i| i as f64 * step).collect();
        let at_t = self.follow_up_grid(baseline_age, cohort, &times)?;
        let at_0 = self.follow_up_grid(baseline_age, cohort, &vec![0.0; count])?;
        Ok(EffectDesign {
            design: self.design(&at_t)? - self.design(&at_0)?,
            warnings: self.extrapolation_warnings(&at_t),
            abscissa: times,
        })
    }

    /// Change in the outcome as a fixed-cohort participant ages from
    /// `baseline_age`, on `t = 0, step, …, horizon`; exactly 0 at `t = 0`.
    pub fn longitudinal_effect(
        &self,
        baseline_age: f64,
        cohort: Option<f64>,
        horizon: f64,
        step: f64,
    ) -> Result<EffectCurve> {
        Ok(self.evaluate(self.longitudinal_design(baseline_age, cohort, horizon, step)?))
    }

    /// Rows of the age/time/cohort terms for participants of age `ages` seen
    /// at calendar `date` (decimal years since 1970), i.e. at `t = 0`.
    pub fn cross_sectional_design(&self, date: Option<f64>, ages: &[f64]) -> Result<EffectDesign> {
        if self.uses_cohort() && date.is_none() {
            return Err(Error::Config(
                "this model has a cohort term; a measurement date is required for cross-sectional effects".into(),
            ));
        }
        let n = ages.len();
        let mut g = Frame::new(n);
        g.insert_numeric(columns::AGE, ages.to_vec());
        g.insert_numeric(columns::BASELINE_AGE, ages.to_vec());
        g.insert_numeric(columns::TIME, vec![0.0; n]);
        if let Some(d) = date {
            g.insert_numeric(columns::DATE, vec![d; n]);
        }
        let g = self.complete_grid(&g)?;
        let mut x = self.design(&g)?;
        for term in &self.terms {
            let structural = term
                .basis
                .variables()
                .iter()
                .any(|v| TIME_STRUCTURE.contains(v));
            if !structural {
                x.columns_mut(term.start, term.ncols).fill(0.0);
            }
        }
        Ok(EffectDesign {
            design: x,
            warnings: self.extrapolation_warnings(&g),
            abscissa: ages.to_vec(),
        })
    }

    /// Age differences across participants observed at calendar `date`.
    pub fn cross_sectional_effect(&self, date: Option<f64>, ages: &[f64]) -> Result<EffectCurve> {
        Ok(self.evaluate(self.cross_sectional_design(date, ages)?))
    }

    /// Parametric coefficients with t-based p-values and normal-quantile CIs.
    pub fn parametric_table(&self, level: f64) -> Vec<CoefficientRow> {
        let df = self.fit.residual_df.max(1.0);
        let t_dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
        let z = normal_quantile(level);
        self.fit
            .terms
            .iter()
            .filter(|t| t.kind == crate::mixed::TermKind::Parametric)
            .map(|t| {
                let estimate = self.fit.beta_hat[t.start];
                let se = self.fit.coef_covariance[(t.start, t.start)].max(0.0).sqrt();
                let stat = estimate / se;
                CoefficientRow {
                    name: t.label.clone(),
                    estimate,
                    se,
                    t_value: stat,
                    p_value: 2.0 * (1.0 - t_dist.cdf(stat.abs())),
                    lower: estimate - z * se,
                    upper: estimate + z * se,
                }
            })
            .collect()
    }

    /// Coefficient of a numeric parametric term scaled by `scale` (e.g. a
    /// per-year cohort slope times 50 years), with its interval.
    pub fn scaled_coefficient(&self, name: &str, scale: f64, level: f64) -> Result<ScaledEstimate> {
        let t = self
            .fit
            .term(name)
            .ok_or_else(|| Error::Spec(format!("no parametric coefficient named `{name}`")))?;
        let estimate = self.fit.beta_hat[t.start];
        let se = self.fit.coef_covariance[(t.start, t.start)].max(0.0).sqrt();
        Ok(scaled_interval(estimate, se, scale, level))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t_value: f64,
    pub p_value: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledEstimate {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `scale·estimate ± z·scale·se`.
pub fn scaled_interval(estimate: f64, se: f64, scale: f64, level: f64) -> ScaledEstimate {
    let z = normal_quantile(level);
    let (e, s) = (estimate * scale, se * scale.abs());
    ScaledEstimate {
        estimate: e,
        se: s,
        lower: e - z * s,
        upper: e + z * s,
    }
}

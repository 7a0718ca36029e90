//! Synthetic lifespan data and the Monte Carlo model comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{format_f64, LongitudinalDataset, ObservationRow, DATE_ORIGIN_YEAR};
use crate::error::{Error, Result};
use crate::model::{canonical_spec, fit_model, BasisDims, ModelFit, Variant};

pub const AGE_RANGE: (f64, f64) = (4.0, 90.0);
pub const DEFAULT_MAGNITUDE_FRACTION: f64 = 0.005;
pub const DEFAULT_REFERENCE_BIRTH_YEAR: f64 = 1958.0;
pub const OUTCOME: &str = "volume";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveShape {
    /// Steep growth in childhood, then slow decline that accelerates late.
    HippocampusLike,
    /// Inverted U peaking in mid-life.
    WhiteMatterLike,
    /// Early peak followed by a steady decline.
    CortexLike,
}

impl CurveShape {
    pub const ALL: [CurveShape; 3] = [
        CurveShape::HippocampusLike,
        CurveShape::WhiteMatterLike,
        CurveShape::CortexLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurveShape::HippocampusLike => "hippocampus-like",
            CurveShape::WhiteMatterLike => "white-matter-like",
            CurveShape::CortexLike => "cortex-like",
        }
    }

    pub fn value(self, a: f64) -> f64 {
        match self {
            CurveShape::HippocampusLike => {
                3600.0 + 1000.0 * (1.0 - (-(a - 4.0) / 6.0).exp())
                    - 4.0 * (a - 4.0)
                    - 600.0 / (1.0 + (-(a - 70.0) / 8.0).exp())
            }
            CurveShape::WhiteMatterLike => 350.0 + 150.0 * (-((a - 45.0) / 25.0).powi(2)).exp(),
            CurveShape::CortexLike => {
                let u = (a - 4.0) / 6.0;
                450.0 - 1.5 * (a - 4.0) + 80.0 * u * (1.0 - u).exp()
            }
        }
    }
}

/// Dependence of the outcome on birth date, relative to a reference cohort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CohortRegime {
    None,
    /// `slope · (c − c_ref)`, the same at every age.
    Offset { slope: f64 },
    /// `slope · ramp(a) · (c − c_ref)`, where the ramp is 0 up to `onset_age`,
    /// then rises linearly, with mean 1 over `[onset_age, 90]`.
    Interaction { slope: f64, onset_age: f64 },
}

impl CohortRegime {
    pub fn name(&self) -> &'static str {
        match self {
            CohortRegime::None => "none",
            CohortRegime::Offset { .. } => "offset",
            CohortRegime::Interaction { .. } => "interaction",
        }
    }
}

const RAMP_BEND: f64 = 10.0;

fn raw_ramp(a: f64, onset: f64) -> f64 {
    let u = a - onset;
    if u <= 0.0 {
        0.0
    } else if u < RAMP_BEND {
        u * u / (2.0 * RAMP_BEND)
    } else {
        u - RAMP_BEND / 2.0
    }
}

/// Closed-form mean of [`raw_ramp`] over `[onset, 90]`.
fn raw_ramp_mean(onset: f64) -> f64 {
    let integral = |x: f64| {
        let u = x - onset;
        if u <= 0.0 {
            0.0
        } else if u < RAMP_BEND {
            u.powi(3) / (6.0 * RAMP_BEND)
        } else {
            RAMP_BEND * RAMP_BEND / 6.0 + (u * u - RAMP_BEND * RAMP_BEND) / 2.0 - RAMP_BEND / 2.0 * (u - RAMP_BEND)
        }
    };
    integral(AGE_RANGE.1) / (AGE_RANGE.1 - onset)
}

/// C¹ ramp: zero up to `onset`, quadratic for 10 years, then linear; scaled
/// to mean 1 over the ages past `onset`, so that where the interaction acts its
/// average per-birth-year magnitude matches the offset regime.
fn ramp(a: f64, onset: f64) -> f64 {
    raw_ramp(a, onset) / raw_ramp_mean(onset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub shape: CurveShape,
    pub regime: CohortRegime,
    /// Calendar year (decimal) at which the cohort term is zero.
    pub reference_birth_year: f64,
}

impl GroundTruth {
    pub fn region(&self) -> &'static str {
        self.shape.name()
    }

    pub fn curve(&self, a: f64) -> f64 {
        self.shape.value(a)
    }

    /// Cohort term for birth date `c` (years since 1970).
    pub fn cohort_effect(&self, a: f64, c: f64) -> f64 {
        let dc = c - self.reference_birth_date();
        match self.regime {
            CohortRegime::None => 0.0,
            CohortRegime::Offset { slope } => slope * dc,
            CohortRegime::Interaction { slope, onset_age } => slope * ramp(a, onset_age) * dc,
        }
    }

    pub fn value(&self, a: f64, c: f64) -> f64 {
        self.curve(a) + self.cohort_effect(a, c)
    }

    /// Reference cohort in years since 1970.
    pub fn reference_birth_date(&self) -> f64 {
        self.reference_birth_year - DATE_ORIGIN_YEAR
    }

    /// True change from `a0` to `a0 + t` for birth date `c`.
    pub fn longitudinal_effect(&self, a0: f64, t: f64, c: f64) -> f64 {
        self.value(a0 + t, c) - self.value(a0, c)
    }
}

/// Mean, SD and range of a curve over `[4, 90]` at 0.01-year resolution.
pub fn curve_summary(shape: CurveShape) -> (f64, f64, f64) {
    let n = ((AGE_RANGE.1 - AGE_RANGE.0) / 0.01).round() as usize + 1;
    let v: Vec<f64> = (0..n).map(|i| shape.value(AGE_RANGE.0 + i as f64 * 0.01)).collect();
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    (mean, sd, hi - lo)
}

/// The three shapes under the three regimes. Cohort slopes are
/// `magnitude_fraction` of each curve's range per birth year.
pub fn builtin_truths(magnitude_fraction: f64) -> Vec<GroundTruth> {
    let mut out = Vec::new();
    for shape in CurveShape::ALL {
        let slope = magnitude_fraction * curve_summary(shape).2;
        for regime in [
            CohortRegime::None,
            CohortRegime::Offset { slope },
            CohortRegime::Interaction { slope, onset_age: 40.0 },
        ] {
            out.push(GroundTruth {
                shape,
                regime,
                reference_birth_year: DEFAULT_REFERENCE_BIRTH_YEAR,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingProtocol {
    pub n_participants: usize,
    /// Timepoints per participant are uniform on `1..=max_timepoints`.
    pub max_timepoints: usize,
    pub interval_range_years: (f64, f64),
    pub baseline_age_range: (f64, f64),
    /// Calendar years; equal endpoints give identical baseline dates.
    pub baseline_date_range: (f64, f64),
    pub sigma_b_fraction: f64,
    pub sigma_fraction: f64,
    pub seed: u64,
}

impl Default for SamplingProtocol {
    fn default() -> Self {
        Self {
            n_participants: 1000,
            max_timepoints: 3,
            interval_range_years: (1.0, 6.0),
            baseline_age_range: AGE_RANGE,
            baseline_date_range: (2000.0, 2010.0),
            sigma_b_fraction: 0.5,
            sigma_fraction: 0.2,
            seed: 1,
        }
    }
}

impl SamplingProtocol {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.n_participants == 0 || self.max_timepoints == 0 {
            return Err(Error::Config("need at least one participant and one timepoint".into()));
        }
        if !ordered(self.interval_range_years)
            || !ordered(self.baseline_age_range)
            || !ordered(self.baseline_date_range)
        {
            return Err(Error::Config("protocol ranges must be finite and ordered".into()));
        }
        if self.interval_range_years.0 <= 0.0 || self.baseline_age_range.0 <= 0.0 {
            return Err(Error::Config("intervals and ages must be positive".into()));
        }
        if !(self.sigma_b_fraction >= 0.0) || !(self.sigma_fraction >= 0.0) {
            return Err(Error::Config("noise fractions must be non-negative".into()));
        }
        Ok(())
    }
}

/// Named experiment scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// n = 250, 100 replicates.
    Desk,
    /// n = 1000, 1000 replicates.
    Full,
    /// Desk scale with every baseline on 1 January 2005.
    DeskIdenticalDates,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
            Preset::DeskIdenticalDates => "desk-identical-dates",
        }
    }

    pub fn protocol(self) -> SamplingProtocol {
        match self {
            Preset::Desk => SamplingProtocol {
                n_participants: 250,
                ..Default::default()
            },
            Preset::Full => SamplingProtocol::default(),
            Preset::DeskIdenticalDates => SamplingProtocol {
                n_participants: 250,
                baseline_date_range: (2005.0, 2005.0),
                ..Default::default()
            },
        }
    }

    pub fn n_replicates(self) -> usize {
        match self {
            Preset::Desk | Preset::DeskIdenticalDates => 100,
            Preset::Full => 1000,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Preset::Desk, Preset::Full, Preset::DeskIdenticalDates]
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (desk, full, desk-identical-dates)")))
    }
}

/// Draw one dataset from `truth` under `protocol` (deterministic in `protocol.seed`).
pub fn sample_dataset(truth: &GroundTruth, protocol: &SamplingProtocol) -> Result<LongitudinalDataset> {
    protocol.validate()?;
    let (_, sd, _) = curve_summary(truth.shape);
    let sigma_b = protocol.sigma_b_fraction * sd;
    let sigma = protocol.sigma_fraction * sd;
    let person = Normal::new(0.0, sigma_b).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let uniform = |rng: &mut ChaCha20Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };

    let mut rng = ChaCha20Rng::seed_from_u64(protocol.seed);
    let width = protocol.n_participants.to_string().len();
    let mut rows = Vec::new();
    for i in 0..protocol.n_participants {
        let m = rng.random_range(1..=protocol.max_timepoints);
        let a0 = uniform(&mut rng, protocol.baseline_age_range);
        let d0 = uniform(&mut rng, protocol.baseline_date_range) - DATE_ORIGIN_YEAR;
        let c = d0 - a0;
        let b = person.sample(&mut rng);
        let mut t = 0.0;
        for j in 0..m {
            if j > 0 {
                t += uniform(&mut rng, protocol.interval_range_years);
            }
            let age = a0 + t;
            rows.push(ObservationRow {
                participant_id: format!("s{i:0width$}"),
                age,
                measurement_date: d0 + t,
                outcome: truth.value(age, c) + b + noise.sample(&mut rng),
                covariates: BTreeMap::new(),
            });
        }
    }
    LongitudinalDataset::from_rows(rows, OUTCOME, BTreeMap::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseDecomposition {
    pub rmse: f64,
    pub bias: f64,
    pub variance: f64,
}

/// `bias = mean − truth`, population variance, `rmse = √(bias² + variance)`.
pub fn decompose_mse(estimates: &[f64], truth: f64) -> Result<MseDecomposition> {
    if estimates.len() < 2 {
        return Err(Error::Config("MSE decomposition needs at least two replicates".into()));
    }
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let variance = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let bias = mean - truth;
    Ok(MseDecomposition {
        rmse: (bias * bias + variance).sqrt(),
        bias,
        variance,
    })
}

/// Seed of replicate `r`: the first 8 bytes of SHA-256 over both seeds.
pub fn replicate_seed(master_seed: u64, replicate: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update((replicate as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub n_replicates: usize,
    pub master_seed: u64,
    pub baseline_ages: Vec<f64>,
    /// Effects are evaluated at `t = 1, …, horizon_years`.
    pub horizon_years: usize,
    pub dims: BasisDims,
    /// Also score the population curve at the mid-study date.
    pub cross_sectional: bool,
    pub cross_sectional_ages: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            n_replicates: 100,
            master_seed: 1,
            baseline_ages: vec![10.0, 35.0, 60.0],
            horizon_years: 12,
            dims: BasisDims::default(),
            cross_sectional: false,
            cross_sectional_ages: (1..=18).map(|i| 5.0 * i as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub region: String,
    pub regime: String,
    pub variant: Variant,
    pub baseline_age: f64,
    pub t: f64,
    pub rmse: f64,
    pub bias: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSectionalCell {
    pub region: String,
    pub regime: String,
    pub variant: Variant,
    pub age: f64,
    pub rmse: f64,
    pub bias: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCount {
    pub region: String,
    pub regime: String,
    pub variant: Variant,
    pub attempted: usize,
    pub failed: usize,
    /// Error kinds seen, with counts.
    pub kinds: BTreeMap<String, usize>,
}

/// One row of the averaged table: root mean MSE, root mean squared bias and
/// mean variance over all baseline ages and times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedRow {
    pub region: String,
    pub regime: String,
    pub variant: Variant,
    pub rmse: f64,
    pub bias: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub master_seed: u64,
    pub preset: Option<String>,
    pub n_replicates: usize,
    pub cells: Vec<CellResult>,
    pub cross_sectional: Vec<CrossSectionalCell>,
    pub failures: Vec<FailureCount>,
}

/// Per-replicate estimates of one variant, or the reason it failed.
type VariantOutcome = std::result::Result<(Vec<f64>, Vec<f64>), String>;

/// Mid-point of the baseline dates, in years since 1970.
pub fn mid_study_date(protocol: &SamplingProtocol) -> f64 {
    0.5 * (protocol.baseline_date_range.0 + protocol.baseline_date_range.1) - DATE_ORIGIN_YEAR
}

/// Birth date of participants aged `baseline_age` at the mid-study date;
/// longitudinal effects are scored for this cohort.
pub fn evaluation_cohort(protocol: &SamplingProtocol, baseline_age: f64) -> f64 {
    mid_study_date(protocol) - baseline_age
}

fn score_variant(
    fit: &ModelFit,
    protocol: &SamplingProtocol,
    config: &ExperimentConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mid_date = mid_study_date(protocol);
    let mut long = Vec::new();
    for &a0 in &config.baseline_ages {
        let cohort = Some(evaluation_cohort(protocol, a0));
        let curve = fit.longitudinal_effect(a0, cohort, config.horizon_years as f64, 1.0)?;
        long.extend_from_slice(&curve.estimate[1..]);
    }
    let mut cross = Vec::new();
    if config.cross_sectional {
        let ages = &config.cross_sectional_ages;
        let mut g = crate::data::Frame::new(ages.len());
        g.insert_numeric(crate::data::columns::AGE, ages.clone());
        g.insert_numeric(crate::data::columns::BASELINE_AGE, ages.clone());
        g.insert_numeric(crate::data::columns::TIME, vec![0.0; ages.len()]);
        g.insert_numeric(crate::data::columns::DATE, vec![mid_date; ages.len()]);
        cross = fit.predict(&g)?.estimate;
    }
    Ok((long, cross))
}

fn run_replicate(
    truth: &GroundTruth,
    protocol: &SamplingProtocol,
    config: &ExperimentConfig,
    replicate: usize,
) -> Result<Vec<VariantOutcome>> {
    let protocol = SamplingProtocol {
        seed: replicate_seed(config.master_seed, replicate),
        ..protocol.clone()
    };
    let data = sample_dataset(truth, &protocol)?;
    Ok(config
        .variants
        .iter()
        .map(|&v| {
            let spec = canonical_spec(v, config.dims, OUTCOME, &[]);
            fit_model(&spec, &data)
                .and_then(|fit| score_variant(&fit, &protocol, config))
                .map_err(|e| e.kind().to_string())
        })
        .collect())
}

/// Fit every variant to `n_replicates` datasets per truth and summarise
/// longitudinal accuracy per (baseline age, t). Replicates run in parallel;
/// results do not depend on the worker count.
pub fn run_experiment(
    truths: &[GroundTruth],
    protocol: &SamplingProtocol,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    protocol.validate()?;
    if config.variants.is_empty() {
        return Err(Error::Config("no model variants requested".into()));
    }
    if config.n_replicates < 2 {
        return Err(Error::Config("at least two replicates are required".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..truths.len())
        .flat_map(|k| (0..config.n_replicates).map(move |r| (k, r)))
        .collect();
    let outcomes: Vec<Vec<VariantOutcome>> = jobs
        .par_iter()
        .map(|&(k, r)| run_replicate(&truths[k], protocol, config, r))
        .collect::<Result<_>>()?;

    let mid_date = mid_study_date(protocol);
    let ts: Vec<f64> = (1..=config.horizon_years).map(|t| t as f64).collect();
    let mut cells = Vec::new();
    let mut cross_cells = Vec::new();
    let mut failures = Vec::new();
    for (k, truth) in truths.iter().enumerate() {
        let reps = &outcomes[k * config.n_replicates..(k + 1) * config.n_replicates];
        for (vi, &variant) in config.variants.iter().enumerate() {
            let mut kinds = BTreeMap::new();
            let mut ok = Vec::new();
            for rep in reps {
                match &rep[vi] {
                    Ok(v) => ok.push(v),
                    Err(kind) => *kinds.entry(kind.clone()).or_insert(0) += 1,
                }
            }
            failures.push(FailureCount {
                region: truth.region().into(),
                regime: truth.regime.name().into(),
                variant,
                attempted: reps.len(),
                failed: reps.len() - ok.len(),
                kinds,
            });
            if ok.len() < 2 {
                continue;
            }
            let mut idx = 0;
            for &a0 in &config.baseline_ages {
                for &t in &ts {
                    let est: Vec<f64> = ok.iter().map(|(l, _)| l[idx]).collect();
                    let c = evaluation_cohort(protocol, a0);
                    let d = decompose_mse(&est, truth.longitudinal_effect(a0, t, c))?;
                    cells.push(CellResult {
                        region: truth.region().into(),
                        regime: truth.regime.name().into(),
                        variant,
                        baseline_age: a0,
                        t,
                        rmse: d.rmse,
                        bias: d.bias,
                        variance: d.variance,
                    });
                    idx += 1;
                }
            }
            if config.cross_sectional {
                for (j, &a) in config.cross_sectional_ages.iter().enumerate() {
                    let est: Vec<f64> = ok.iter().map(|(_, c)| c[j]).collect();
                    let d = decompose_mse(&est, truth.value(a, mid_date - a))?;
                    cross_cells.push(CrossSectionalCell {
                        region: truth.region().into(),
                        regime: truth.regime.name().into(),
                        variant,
                        age: a,
                        rmse: d.rmse,
                        bias: d.bias,
                        variance: d.variance,
                    });
                }
            }
        }
    }
    Ok(ExperimentReport {
        master_seed: config.master_seed,
        preset: None,
        n_replicates: config.n_replicates,
        cells,
        cross_sectional: cross_cells,
        failures,
    })
}

impl ExperimentReport {
    /// Averages over baseline ages and times per (region, regime, variant).
    pub fn averaged(&self) -> Vec<AveragedRow> {
        let mut acc: BTreeMap<(String, String, Variant), (f64, f64, usize)> = BTreeMap::new();
        let mut order = Vec::new();
        for c in &self.cells {
            let key = (c.region.clone(), c.regime.clone(), c.variant);
            let e = acc.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (0.0, 0.0, 0)
            });
            e.0 += c.bias * c.bias;
            e.1 += c.variance;
            e.2 += 1;
        }
        order
            .into_iter()
            .map(|key| {
                let (b2, var, n) = acc[&key];
                let (b2, var) = (b2 / n as f64, var / n as f64);
                AveragedRow {
                    region: key.0,
                    regime: key.1,
                    variant: key.2,
                    rmse: (b2 + var).sqrt(),
                    bias: b2.sqrt(),
                    variance: var,
                }
            })
            .collect()
    }

    pub fn average_rmse(&self, region: &str, regime: &str, variant: Variant) -> Option<f64> {
        self.averaged()
            .into_iter()
            .find(|r| r.region == region && r.regime == regime && r.variant == variant)
            .map(|r| r.rmse)
    }

    /// Columns region, regime, variant, baseline_age, t, rmse, bias, variance.
    pub fn write_cells_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["region", "regime", "variant", "baseline_age", "t", "rmse", "bias", "variance"])?;
        for c in &self.cells {
            w.write_record([
                c.region.clone(),
                c.regime.clone(),
                c.variant.to_string(),
                format_f64(c.baseline_age),
                format_f64(c.t),
                format_f64(c.rmse),
                format_f64(c.bias),
                format_f64(c.variance),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_averaged_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["region", "regime", "variant", "rmse", "bias", "variance"])?;
        for r in self.averaged() {
            w.write_record([
                r.region,
                r.regime,
                r.variant.to_string(),
                format_f64(r.rmse),
                format_f64(r.bias),
                format_f64(r.variance),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_cross_sectional_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["region", "regime", "variant", "age", "rmse", "bias", "variance"])?;
        for c in &self.cross_sectional {
            w.write_record([
                c.region.clone(),
                c.regime.clone(),
                c.variant.to_string(),
                format_f64(c.age),
                format_f64(c.rmse),
                format_f64(c.bias),
                format_f64(c.variance),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_failures_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["region", "regime", "variant", "attempted", "failed", "kinds"])?;
        for f in &self.failures {
            let kinds = f
                .kinds
                .iter()
                .map(|(k, n)| format!("{k}:{n}"))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                f.region.clone(),
                f.regime.clone(),
                f.variant.to_string(),
                f.attempted.to_string(),
                f.failed.to_string(),
                kinds,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn total_failures(&self) -> usize {
        self.failures.iter().map(|f| f.failed).sum()
    }
}

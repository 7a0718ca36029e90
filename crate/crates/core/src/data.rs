//! Long-format longitudinal data: ingestion, derived age/time/cohort
//! variables, and a simple named-column frame consumed by model assembly.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::ops::Range;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the per-participant birth date (years).
pub const BIRTH_DATE_TOL: f64 = 1e-6;

/// Days per year used when converting calendar dates to decimal years.
pub const DAYS_PER_YEAR: f64 = 365.25;

/// Calendar year of the decimal-date origin (1970-01-01).
pub const DATE_ORIGIN_YEAR: f64 = 1970.0;

/// Column names every frame built from a dataset exposes.
pub mod columns {
    pub const PARTICIPANT: &str = "participant";
    pub const AGE: &str = "age";
    pub const DATE: &str = "date";
    pub const BASELINE_AGE: &str = "baseline_age";
    pub const TIME: &str = "time";
    pub const BIRTH_DATE: &str = "birth_date";
}

/// How the measurement-date column is encoded in the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DateFormat {
    /// ISO-8601 `YYYY-MM-DD` when the cell parses as one, otherwise a calendar decimal year.
    #[default]
    Auto,
    Iso,
    /// Decimal calendar year, e.g. `2010.5`.
    CalendarYear,
    /// Decimal years since 1970-01-01 (the internal representation).
    YearsSince1970,
}

/// Column-name map for [`load_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub participant: String,
    pub age: String,
    pub date: String,
    pub outcome: String,
    /// Covariate columns to keep; `None` keeps every non-required column.
    pub covariates: Option<Vec<String>>,
    /// Columns forced to be categorical even if their values look numeric.
    pub categorical: Vec<String>,
    /// Ordered factors with their level order (an empty list means natural sort order).
    pub ordered: BTreeMap<String, Vec<String>>,
    pub date_format: DateFormat,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            participant: "participant".into(),
            age: "age".into(),
            date: "date".into(),
            outcome: "outcome".into(),
            covariates: None,
            categorical: Vec::new(),
            ordered: BTreeMap::new(),
            date_format: DateFormat::Auto,
        }
    }
}

impl Schema {
    /// Schema that re-reads a file produced by [`LongitudinalDataset::write_csv`].
    pub fn for_dataset(ds: &LongitudinalDataset) -> Self {
        let mut ordered = BTreeMap::new();
        let mut categorical = Vec::new();
        for (name, f) in &ds.factors {
            if f.ordered {
                ordered.insert(name.clone(), f.levels.clone());
            } else {
                categorical.push(name.clone());
            }
        }
        Self {
            outcome: ds.outcome_name.clone(),
            covariates: Some(ds.covariate_names.clone()),
            categorical,
            ordered,
            date_format: DateFormat::YearsSince1970,
            ..Self::default()
        }
    }
}

/// Value of one covariate on one row. Categorical values hold a level index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CovariateValue {
    Numeric(f64),
    Level(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorLevels {
    pub levels: Vec<String>,
    pub ordered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub participant_id: String,
    /// Age in years.
    pub age: f64,
    /// Decimal years since 1970-01-01.
    pub measurement_date: f64,
    pub outcome: f64,
    pub covariates: BTreeMap<String, CovariateValue>,
}

/// Mean and SD removed by [`standardize_covariate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn back_transform(&self, z: f64) -> f64 {
        self.mean + self.sd * z
    }
}

/// Observations grouped by participant (contiguous, sorted by age) with
/// baseline age, time since baseline and birth date derived per row.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    rows: Vec<ObservationRow>,
    baseline_age: Vec<f64>,
    time: Vec<f64>,
    birth_date: Vec<f64>,
    participants: Vec<String>,
    participant_ranges: Vec<Range<usize>>,
    participant_of_row: Vec<usize>,
    outcome_name: String,
    covariate_names: Vec<String>,
    factors: BTreeMap<String, FactorLevels>,
    standardization: BTreeMap<String, Standardization>,
}

impl LongitudinalDataset {
    /// Build from rows in arbitrary order. Participants keep first-appearance
    /// order; rows within a participant are stably sorted by age.
    pub fn from_rows(
        rows: Vec<ObservationRow>,
        outcome_name: &str,
        factors: BTreeMap<String, FactorLevels>,
    ) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if !(r.age > 0.0) || !r.age.is_finite() {
                return Err(Error::Parse {
                    row: i + 1,
                    column: columns::AGE.into(),
                    message: format!("age must be positive and finite, got {}", r.age),
                });
            }
            if !r.measurement_date.is_finite() {
                return Err(Error::Parse {
                    row: i + 1,
                    column: columns::DATE.into(),
                    message: "measurement date is not finite".into(),
                });
            }
            if !r.outcome.is_finite() {
                return Err(Error::Parse {
                    row: i + 1,
                    column: outcome_name.into(),
                    message: "outcome is not finite".into(),
                });
            }
        }

        let mut order: Vec<String> = Vec::new();
        let mut by_participant: HashMap<String, Vec<ObservationRow>> = HashMap::new();
        for r in rows {
            if !by_participant.contains_key(&r.participant_id) {
                order.push(r.participant_id.clone());
            }
            by_participant.entry(r.participant_id.clone()).or_default().push(r);
        }

        let covariate_names: Vec<String> = {
            let mut names: Vec<String> = by_participant
                .values()
                .flat_map(|rs| rs.iter().flat_map(|r| r.covariates.keys().cloned()))
                .collect();
            names.sort();
            names.dedup();
            names
        };

        let mut out_rows = Vec::new();
        let mut baseline_age = Vec::new();
        let mut time = Vec::new();
        let mut birth_date = Vec::new();
        let mut ranges = Vec::new();
        let mut participant_of_row = Vec::new();
        for (pidx, id) in order.iter().enumerate() {
            let mut rs = by_participant.remove(id).expect("participant present");
            rs.sort_by(|a, b| a.age.total_cmp(&b.age));
            let start = out_rows.len();
            let a1 = rs[0].age;
            let c1 = rs[0].measurement_date - rs[0].age;
            for r in rs {
                let t = r.age - a1;
                if t < 0.0 {
                    return Err(Error::Consistency(format!(
                        "negative time since baseline for participant `{id}`"
                    )));
                }
                let c = r.measurement_date - r.age;
                if (c - c1).abs() > BIRTH_DATE_TOL {
                    return Err(Error::Consistency(format!(
                        "participant `{id}` has inconsistent birth dates ({c1} vs {c}); \
                         check that ages and measurement dates agree"
                    )));
                }
                baseline_age.push(a1);
                time.push(t);
                birth_date.push(c1);
                participant_of_row.push(pidx);
                out_rows.push(r);
            }
            ranges.push(start..out_rows.len());
        }

        Ok(Self {
            rows: out_rows,
            baseline_age,
            time,
            birth_date,
            participants: order,
            participant_ranges: ranges,
            participant_of_row,
            outcome_name: outcome_name.to_string(),
            covariate_names,
            factors,
            standardization: BTreeMap::new(),
        })
    }

    pub fn rows(&self) -> &[ObservationRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_participants(&self) -> usize {
        self.participants.len()
    }

    pub fn participant_ids(&self) -> &[String] {
        &self.participants
    }

    /// Row indices belonging to participant `i` (in participant order).
    pub fn participant_rows(&self, i: usize) -> Range<usize> {
        self.participant_ranges[i].clone()
    }

    /// Index of the participant owning each row.
    pub fn participant_index(&self) -> &[usize] {
        &self.participant_of_row
    }

    /// m_i for each participant.
    pub fn timepoints_per_participant(&self) -> Vec<usize> {
        self.participant_ranges.iter().map(|r| r.len()).collect()
    }

    pub fn baseline_age(&self) -> &[f64] {
        &self.baseline_age
    }

    pub fn time_since_baseline(&self) -> &[f64] {
        &self.time
    }

    /// Birth date in decimal years since 1970-01-01.
    pub fn birth_date(&self) -> &[f64] {
        &self.birth_date
    }

    /// Birth date as a decimal calendar year.
    pub fn birth_year(&self, row: usize) -> f64 {
        self.birth_date[row] + DATE_ORIGIN_YEAR
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn factors(&self) -> &BTreeMap<String, FactorLevels> {
        &self.factors
    }

    pub fn standardization(&self, name: &str) -> Option<Standardization> {
        self.standardization.get(name).copied()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.age).collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.outcome).collect()
    }

    pub fn dates(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.measurement_date).collect()
    }

    /// Keep only each participant's first row (t = 0).
    pub fn baseline_subset(&self) -> Self {
        let rows: Vec<ObservationRow> = self
            .participant_ranges
            .iter()
            .map(|r| self.rows[r.start].clone())
            .collect();
        let mut ds = Self::from_rows(rows, &self.outcome_name, self.factors.clone())
            .expect("subset of a valid dataset is valid");
        ds.covariate_names = self.covariate_names.clone();
        ds.standardization = self.standardization.clone();
        ds
    }

    /// Named-column view used by model assembly.
    pub fn to_frame(&self) -> Frame {
        let mut f = Frame::new(self.len());
        f.insert_factor(
            columns::PARTICIPANT,
            Factor {
                levels: self.participants.clone(),
                codes: self.participant_of_row.clone(),
                ordered: false,
            },
        );
        f.insert_numeric(columns::AGE, self.ages());
        f.insert_numeric(columns::DATE, self.dates());
        f.insert_numeric(&self.outcome_name, self.outcomes());
        f.insert_numeric(columns::BASELINE_AGE, self.baseline_age.clone());
        f.insert_numeric(columns::TIME, self.time.clone());
        f.insert_numeric(columns::BIRTH_DATE, self.birth_date.clone());
        for name in &self.covariate_names {
            if let Some(levels) = self.factors.get(name) {
                let codes = self
                    .rows
                    .iter()
                    .map(|r| match r.covariates.get(name) {
                        Some(CovariateValue::Level(l)) => *l,
                        _ => 0,
                    })
                    .collect();
                f.insert_factor(
                    name,
                    Factor {
                        levels: levels.levels.clone(),
                        codes,
                        ordered: levels.ordered,
                    },
                );
            } else {
                let vals = self
                    .rows
                    .iter()
                    .map(|r| match r.covariates.get(name) {
                        Some(CovariateValue::Numeric(v)) => *v,
                        _ => f64::NAN,
                    })
                    .collect();
                f.insert_numeric(name, vals);
            }
        }
        f
    }

    /// Write as long-format CSV with dates in years since 1970 and shortest
    /// round-trip decimal formatting, so [`load_dataset`] with
    /// [`Schema::for_dataset`] reproduces every numeric field bit-exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "participant".to_string(),
            "age".into(),
            "date".into(),
            self.outcome_name.clone(),
        ];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.participant_id.clone(),
                format_f64(r.age),
                format_f64(r.measurement_date),
                format_f64(r.outcome),
            ];
            for name in &self.covariate_names {
                rec.push(match r.covariates.get(name) {
                    Some(CovariateValue::Numeric(v)) => format_f64(*v),
                    Some(CovariateValue::Level(l)) => self.factors[name].levels[*l].clone(),
                    None => String::new(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest decimal representation that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Parse a date cell into decimal years since 1970-01-01.
pub fn parse_date(cell: &str, format: DateFormat) -> std::result::Result<f64, String> {
    let cell = cell.trim();
    let iso = || -> std::result::Result<f64, String> {
        let d = NaiveDate::parse_from_str(cell, "%Y-%m-%d").map_err(|e| e.to_string())?;
        let origin = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid origin");
        Ok((d - origin).num_days() as f64 / DAYS_PER_YEAR)
    };
    let number = || cell.parse::<f64>().map_err(|e| e.to_string());
    match format {
        DateFormat::Iso => iso(),
        DateFormat::CalendarYear => number().map(|y| y - DATE_ORIGIN_YEAR),
        DateFormat::YearsSince1970 => number(),
        DateFormat::Auto => iso().or_else(|_| number().map(|y| y - DATE_ORIGIN_YEAR)),
    }
}

/// Read a long-format CSV into a [`LongitudinalDataset`].
pub fn load_dataset<R: Read>(source: R, schema: &Schema) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema { column: name.into() })
    };
    let pid = find(&schema.participant)?;
    let age = find(&schema.age)?;
    let date = find(&schema.date)?;
    let outcome = find(&schema.outcome)?;
    let required = [pid, age, date, outcome];
    let cov_cols: Vec<(String, usize)> = match &schema.covariates {
        Some(names) => names
            .iter()
            .map(|n| find(n).map(|i| (n.clone(), i)))
            .collect::<Result<_>>()?,
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !required.contains(i))
            .map(|(i, h)| (h.clone(), i))
            .collect(),
    };

    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;

    let parse_num = |rec: &csv::StringRecord, row: usize, col: usize, name: &str| -> Result<f64> {
        let cell = rec.get(col).unwrap_or("").trim();
        cell.parse::<f64>().map_err(|_| Error::Parse {
            row,
            column: name.into(),
            message: format!("`{cell}` is not a number"),
        })
    };

    // Decide which covariates are categorical and fix their level order.
    let mut factors: BTreeMap<String, FactorLevels> = BTreeMap::new();
    for (name, col) in &cov_cols {
        let cells: Vec<&str> = records.iter().map(|r| r.get(*col).unwrap_or("").trim()).collect();
        let forced = schema.categorical.contains(name) || schema.ordered.contains_key(name);
        let numeric = cells.iter().all(|c| c.parse::<f64>().is_ok());
        if !forced && numeric {
            continue;
        }
        let ordered = schema.ordered.contains_key(name);
        let levels = match schema.ordered.get(name) {
            Some(given) if !given.is_empty() => {
                if let Some(bad) = cells.iter().find(|c| !given.iter().any(|g| g == *c)) {
                    return Err(Error::Spec(format!(
                        "value `{bad}` of ordered factor `{name}` is not among its declared levels"
                    )));
                }
                given.clone()
            }
            _ => natural_levels(&cells),
        };
        factors.insert(name.clone(), FactorLevels { levels, ordered });
    }

    let mut rows = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let row = i + 1;
        let a = parse_num(rec, row, age, &schema.age)?;
        let y = parse_num(rec, row, outcome, &schema.outcome)?;
        let dcell = rec.get(date).unwrap_or("");
        let d = parse_date(dcell, schema.date_format).map_err(|m| Error::Parse {
            row,
            column: schema.date.clone(),
            message: format!("`{}` is not a date: {m}", dcell.trim()),
        })?;
        let mut covariates = BTreeMap::new();
        for (name, col) in &cov_cols {
            let cell = rec.get(*col).unwrap_or("").trim();
            let v = match factors.get(name) {
                Some(f) => CovariateValue::Level(
                    f.levels.iter().position(|l| l == cell).expect("level collected above"),
                ),
                None => CovariateValue::Numeric(parse_num(rec, row, *col, name)?),
            };
            covariates.insert(name.clone(), v);
        }
        rows.push(ObservationRow {
            participant_id: rec.get(pid).unwrap_or("").trim().to_string(),
            age: a,
            measurement_date: d,
            outcome: y,
            covariates,
        });
    }
    let mut ds = LongitudinalDataset::from_rows(rows, &schema.outcome, factors)?;
    ds.covariate_names = cov_cols.into_iter().map(|(n, _)| n).collect();
    Ok(ds)
}

fn natural_levels(cells: &[&str]) -> Vec<String> {
    let mut levels: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
    levels.sort();
    levels.dedup();
    if levels.iter().all(|l| l.parse::<f64>().is_ok()) {
        levels.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .total_cmp(&b.parse::<f64>().unwrap())
        });
    }
    levels
}

/// Replace a numeric covariate by its z-score (sample SD), retaining mean and
/// SD for back-transformation.
pub fn standardize_covariate(ds: &LongitudinalDataset, name: &str) -> Result<LongitudinalDataset> {
    if ds.factors.contains_key(name) {
        return Err(Error::Spec(format!("covariate `{name}` is categorical")));
    }
    let values: Vec<f64> = ds
        .rows
        .iter()
        .map(|r| match r.covariates.get(name) {
            Some(CovariateValue::Numeric(v)) => Ok(*v),
            _ => Err(Error::Schema { column: name.into() }),
        })
        .collect::<Result<_>>()?;
    let n = values.len() as f64;
    let mut mean = values.iter().sum::<f64>() / n;
    // second pass removes the rounding error of the first
    mean += values.iter().map(|v| v - mean).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::DegenerateCovariate(name.into()));
    }
    let mut z: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
    let zmean = z.iter().sum::<f64>() / n;
    z.iter_mut().for_each(|v| *v -= zmean);

    let mut out = ds.clone();
    for (r, v) in out.rows.iter_mut().zip(z) {
        r.covariates.insert(name.into(), CovariateValue::Numeric(v));
    }
    out.standardization.insert(name.into(), Standardization { mean, sd });
    Ok(out)
}

/// Categorical column: level labels plus per-row level index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub levels: Vec<String>,
    pub codes: Vec<usize>,
    pub ordered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Factor(Factor),
}

/// Named columns of equal length (training data or a prediction grid).
#[derive(Debug, Clone, Default)]
pub struct Frame {
    nrows: usize,
    columns: BTreeMap<String, Column>,
}

impl Frame {
    pub fn new(nrows: usize) -> Self {
        Self {
            nrows,
            columns: BTreeMap::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn insert_numeric(&mut self, name: &str, values: Vec<f64>) {
        assert_eq!(values.len(), self.nrows, "column `{name}` has wrong length");
        self.columns.insert(name.into(), Column::Numeric(values));
    }

    pub fn insert_factor(&mut self, name: &str, factor: Factor) {
        assert_eq!(factor.codes.len(), self.nrows, "column `{name}` has wrong length");
        self.columns.insert(name.into(), Column::Factor(factor));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::Schema { column: name.into() })
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Factor(_) => Err(Error::Spec(format!("column `{name}` is categorical, expected numeric"))),
        }
    }

    pub fn factor(&self, name: &str) -> Result<&Factor> {
        match self.column(name)? {
            Column::Factor(f) => Ok(f),
            Column::Numeric(_) => Err(Error::Spec(format!("column `{name}` is numeric, expected categorical"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Frame {
        let mut out = Frame::new(idx.len());
        for (name, col) in &self.columns {
            let c = match col {
                Column::Numeric(v) => Column::Numeric(idx.iter().map(|&i| v[i]).collect()),
                Column::Factor(f) => Column::Factor(Factor {
                    levels: f.levels.clone(),
                    codes: idx.iter().map(|&i| f.codes[i]).collect(),
                    ordered: f.ordered,
                }),
            };
            out.columns.insert(name.clone(), c);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn load(text: &str) -> Result<LongitudinalDataset> {
        load_dataset(text.as_bytes(), &Schema::default())
    }

    #[test]
    fn time_since_baseline_is_age_minus_first_age() {
        let ds = load("participant,age,date,outcome\np1,12.5,2002.5,2\np1,10.0,2000.0,1\np1,16.0,2006.0,3\n").unwrap();
        assert_eq!(ds.time_since_baseline(), &[0.0, 2.5, 6.0]);
        assert_eq!(ds.baseline_age(), &[10.0, 10.0, 10.0]);
        assert_eq!(ds.outcomes(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn birth_date_is_date_minus_age() {
        let ds = load("participant,age,date,outcome\np1,30.0,2010.0,1\n").unwrap();
        assert!((ds.birth_year(0) - 1980.0).abs() < 1e-9);
        assert!((ds.birth_date()[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn iso_dates_use_day_count_over_365_25() {
        let d = parse_date("1971-01-01", DateFormat::Auto).unwrap();
        assert!((d - 365.0 / 365.25).abs() < 1e-15);
        assert_eq!(parse_date("40", DateFormat::YearsSince1970).unwrap(), 40.0);
    }

    #[test]
    fn missing_column_names_the_column() {
        let err = load("participant,age,when,outcome\np1,3,2000,1\n").unwrap_err();
        match err {
            Error::Schema { column } => assert_eq!(column, "date"),
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn non_numeric_age_reports_row() {
        let err = load("participant,age,date,outcome\np1,3,2000,1\np2,old,2000,1\n").unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "age");
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn inconsistent_birth_dates_are_rejected() {
        let err = load("participant,age,date,outcome\np1,10,2000,1\np1,12,2003,1\n").unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn same_day_repeat_scans_are_kept() {
        let ds = load("participant,age,date,outcome\np1,10,2000,1\np1,10,2000,1.1\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.time_since_baseline(), &[0.0, 0.0]);
    }

    #[test]
    fn categorical_covariates_are_label_encoded() {
        let ds = load("participant,age,date,outcome,sex\np1,10,2000,1,M\np2,11,2000,1,F\n").unwrap();
        assert_eq!(ds.factors()["sex"].levels, vec!["F", "M"]);
        assert_eq!(ds.rows()[0].covariates["sex"], CovariateValue::Level(1));
    }

    #[test]
    fn standardize_simple_column() {
        let ds = load("participant,age,date,outcome,icv\np1,10,2000,1,1\np2,11,2000,1,2\np3,12,2000,1,3\n").unwrap();
        let z = standardize_covariate(&ds, "icv").unwrap();
        let vals: Vec<f64> = z
            .rows()
            .iter()
            .map(|r| match r.covariates["icv"] {
                CovariateValue::Numeric(v) => v,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(vals, vec![-1.0, 0.0, 1.0]);
        assert_eq!(z.standardization("icv").unwrap(), Standardization { mean: 2.0, sd: 1.0 });
    }

    #[test]
    fn standardize_constant_column_fails() {
        let ds = load("participant,age,date,outcome,icv\np1,10,2000,1,5\np2,11,2000,1,5\n").unwrap();
        assert!(matches!(
            standardize_covariate(&ds, "icv"),
            Err(Error::DegenerateCovariate(_))
        ));
    }

    #[test]
    fn standardized_normal_column_has_zero_mean_unit_sd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(100.0, 15.0).unwrap();
        let mut text = String::from("participant,age,date,outcome,icv\n");
        for i in 0..1000 {
            text.push_str(&format!("p{i},20,2000,1,{:?}\n", normal.sample(&mut rng)));
        }
        let z = standardize_covariate(&load(&text).unwrap(), "icv").unwrap();
        let vals: Vec<f64> = z
            .to_frame()
            .numeric("icv")
            .unwrap()
            .to_vec();
        // direct recomputation
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 1e-12, "mean {mean}");
        assert!((sd - 1.0).abs() < 1e-12, "sd {sd}");
    }

    #[test]
    fn write_then_load_is_bit_exact() {
        let text = "participant,age,date,outcome,icv,sex\n\
                    a,10.123456789012345,2000.3333333333333,8123.456,0.1,F\n\
                    a,13.623456789012345,2003.8333333333333,8200.5,0.1,F\n\
                    b,71.3,2009.9,7000.25,-1.7,M\n";
        let ds = load(text).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = load_dataset(buf.as_slice(), &Schema::for_dataset(&ds)).unwrap();
        assert_eq!(ds.rows(), back.rows());
        assert_eq!(ds.birth_date(), back.birth_date());
        assert_eq!(ds.time_since_baseline(), back.time_since_baseline());
    }
}

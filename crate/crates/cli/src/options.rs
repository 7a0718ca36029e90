//! Shared flags and the TOML config file that can stand in for them.

use std::path::{Path, PathBuf};

use clap::Args;
use lifespan_core::data::{parse_date, DateFormat};
use lifespan_core::{Error, Result};
use serde::Deserialize;

/// Flags shared by every command. Each may also be set in `--config`;
/// a flag given on the command line wins.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct Options {
    /// TOML file with any of these options (keys are the flag names).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Long-format CSV with one row per observation.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML column map for --data (participant, age, date, outcome, covariates, categorical, ordered, date_format).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Outcome column (overrides the schema).
    #[arg(long)]
    pub outcome: Option<String>,
    /// Comma-separated covariates added as parametric terms to --variant models.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,

    /// TOML model specification.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// One of 1a, 1b, 2a, 2b, 3a, 3b.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub k_age: Option<usize>,
    #[arg(long)]
    pub k_time: Option<usize>,
    #[arg(long)]
    pub k_cohort: Option<usize>,

    /// Fitted model file written by `fit`.
    #[arg(long)]
    pub model: Option<PathBuf>,

    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long)]
    pub grid_min: Option<f64>,
    #[arg(long)]
    pub grid_max: Option<f64>,
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Interval level in (0, 1).
    #[arg(long)]
    pub level: Option<f64>,
    /// Posterior draws.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Calendar date: YYYY-MM-DD or a decimal year.
    #[arg(long)]
    pub date: Option<String>,
    /// Comma-separated baseline ages for longitudinal effects.
    #[arg(long, value_delimiter = ',')]
    pub baselines: Option<Vec<f64>>,
    /// Years of follow-up for longitudinal effects.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Also write the posterior draws matrix.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub write_draws: Option<bool>,

    /// Simulation preset: desk, full or desk-identical-dates.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub participants: Option<usize>,
    /// Comma-separated variants to compare (default: all six).
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Cohort slope as a fraction of the curve range per birth year.
    #[arg(long)]
    pub magnitude: Option<f64>,
    /// Add the cross-sectional accuracy section.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub cross_sectional: Option<bool>,
    /// Write a single synthetic dataset instead of running the experiment.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub dataset_only: Option<bool>,
    /// Built-in truth for --dataset-only (hippocampus-like, white-matter-like, cortex-like).
    #[arg(long)]
    pub truth: Option<String>,
    /// Cohort regime for --dataset-only (none, offset, interaction).
    #[arg(long)]
    pub regime: Option<String>,

    /// Directory written by `simulate`, read by `report`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Permutations for the basis-dimension check.
    #[arg(long)]
    pub permutations: Option<usize>,
}

macro_rules! fill {
    ($dst:expr, $src:expr; $($field:ident),+ $(,)?) => {
        $( if $dst.$field.is_none() { $dst.$field = $src.$field; } )+
    };
}

impl Options {
    /// Fill unset flags from `--config`, if given.
    pub fn resolve(mut self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)?;
        let file: Options = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        fill!(self, file;
            data, schema, outcome, covariates, spec, variant, k_age, k_time, k_cohort, model,
            seed, out, grid_min, grid_max, grid_step, level, draws, date, baselines, horizon,
            write_draws, preset, replicates, participants, variants, magnitude, cross_sectional,
            dataset_only, truth, regime, input, permutations);
        Ok(self)
    }

    pub fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| Error::Config(format!("--{flag} is required")))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        Self::require(&self.out, "out").map(PathBuf::as_path)
    }

    pub fn seed(&self) -> Result<u64> {
        Self::require(&self.seed, "seed").copied()
    }

    pub fn level(&self) -> Result<f64> {
        let level = self.level.unwrap_or(0.95);
        if level > 0.0 && level < 1.0 {
            Ok(level)
        } else {
            Err(Error::Config(format!("--level must lie in (0, 1), got {level}")))
        }
    }

    /// `--date` in years since 1970.
    pub fn date(&self) -> Result<Option<f64>> {
        self.date
            .as_deref()
            .map(|d| parse_date(d, DateFormat::Auto).map_err(|e| Error::Config(format!("--date `{d}`: {e}"))))
            .transpose()
    }

    /// Points `min, min + step, …` up to `max` inclusive.
    pub fn grid(&self, default_min: f64, default_max: f64, default_step: f64) -> Result<Vec<f64>> {
        let lo = self.grid_min.unwrap_or(default_min);
        let hi = self.grid_max.unwrap_or(default_max);
        let step = self.grid_step.unwrap_or(default_step);
        if !(step > 0.0) || !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("bad grid: min {lo}, max {hi}, step {step}")));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| lo + i as f64 * step).collect())
    }
}

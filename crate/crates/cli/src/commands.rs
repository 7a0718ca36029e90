//! One function per subcommand.

use std::fs::File;
use std::io::{BufReader, Write};

use lifespan_core::data::{columns, format_f64, load_dataset, Frame, LongitudinalDataset, Schema};
use lifespan_core::inference::{
    age_at_max_distribution, check_model_bases, pointwise_band, sample_posterior_curves, simultaneous_band,
    smooth_term_tests, write_bands_csv, DEFAULT_HDI_DRAWS,
};
use lifespan_core::model::{canonical_spec, fit_model, normal_quantile, BasisDims, EffectCurve, ModelFit, ModelSpec, Variant};
use lifespan_core::sim::{
    builtin_truths, run_experiment, sample_dataset, CurveShape, ExperimentConfig, ExperimentReport, Preset,
    DEFAULT_MAGNITUDE_FRACTION,
};
use lifespan_core::{Error, Result};

use crate::options::Options;
use crate::output::{render_table, sig4, Outputs};

fn load_data(opts: &Options) -> Result<LongitudinalDataset> {
    let path = Options::require(&opts.data, "data")?;
    let mut schema = match &opts.schema {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str::<Schema>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Schema::default(),
    };
    if let Some(o) = &opts.outcome {
        schema.outcome = o.clone();
    }
    if let (None, Some(c)) = (&schema.covariates, &opts.covariates) {
        schema.covariates = Some(c.clone());
    }
    load_dataset(BufReader::new(File::open(path)?), &schema)
}

fn load_model(opts: &Options) -> Result<ModelFit> {
    let path = Options::require(&opts.model, "model")?;
    ModelFit::from_json(BufReader::new(File::open(path)?))
}

fn resolve_spec(opts: &Options, data: &LongitudinalDataset) -> Result<ModelSpec> {
    match (&opts.spec, &opts.variant) {
        (Some(_), Some(_)) => Err(Error::Config("give either --spec or --variant, not both".into())),
        (Some(path), None) => ModelSpec::from_toml(&std::fs::read_to_string(path)?),
        (None, Some(v)) => {
            let variant: Variant = v.parse()?;
            let d = BasisDims::default();
            let dims = BasisDims {
                k_age: opts.k_age.unwrap_or(d.k_age),
                k_time: opts.k_time.unwrap_or(d.k_time),
                k_cohort: opts.k_cohort.unwrap_or(d.k_cohort),
            };
            let covariates = opts.covariates.clone().unwrap_or_default();
            Ok(canonical_spec(variant, dims, data.outcome_name(), &covariates))
        }
        (None, None) => Err(Error::Config("--spec or --variant is required".into())),
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn age_range(model: &ModelFit) -> (f64, f64) {
    model
        .variable_ranges
        .get(columns::AGE)
        .or_else(|| model.variable_ranges.get(columns::BASELINE_AGE))
        .copied()
        .unwrap_or((4.0, 90.0))
}

/// Grid of participants seen at `age` on `date` (if any), at baseline.
fn age_frame(ages: &[f64], date: Option<f64>) -> Frame {
    let n = ages.len();
    let mut g = Frame::new(n);
    g.insert_numeric(columns::AGE, ages.to_vec());
    g.insert_numeric(columns::BASELINE_AGE, ages.to_vec());
    g.insert_numeric(columns::TIME, vec![0.0; n]);
    if let Some(d) = date {
        g.insert_numeric(columns::DATE, vec![d; n]);
    }
    g
}

pub fn fit(opts: &Options) -> Result<()> {
    let data = load_data(opts)?;
    let spec = resolve_spec(opts, &data)?;
    let level = opts.level()?;
    let mut out = Outputs::new(opts.out_dir()?)?;
    let model = fit_model(&spec, &data)?;

    model.to_json(out.create("model.json")?)?;
    out.create("spec.toml")?.write_all(spec.to_toml()?.as_bytes())?;

    let ptable = model.parametric_table(level);
    let mut w = csv::Writer::from_writer(out.create("parametric.csv")?);
    w.write_record(["term", "estimate", "se", "t_value", "p_value", "lower", "upper"])?;
    for r in &ptable {
        w.write_record([
            r.name.clone(),
            format_f64(r.estimate),
            format_f64(r.se),
            format_f64(r.t_value),
            format_f64(r.p_value),
            format_f64(r.lower),
            format_f64(r.upper),
        ])?;
    }
    w.flush()?;

    let stable = smooth_term_tests(&model.fit);
    let mut w = csv::Writer::from_writer(out.create("smooth.csv")?);
    w.write_record(["term", "edf", "ref_df", "statistic", "p_value"])?;
    for t in &stable {
        w.write_record([
            t.label.clone(),
            format_f64(t.edf),
            format_f64(t.ref_df),
            format_f64(t.statistic),
            format_f64(t.p_value),
        ])?;
    }
    w.flush()?;

    let vc = &model.fit.variance_components;
    let has_group = model.spec.terms.iter().any(|t| matches!(t, lifespan_core::model::TermSpec::RandomIntercept { .. }));
    let mut vrows: Vec<(String, String, f64, Option<f64>)> = Vec::new();
    if has_group {
        vrows.push((columns::PARTICIPANT.into(), "(Intercept)".into(), vc.sigma_b, None));
    }
    for ((label, s), l) in vc.penalty_labels.iter().zip(&vc.sigma_lambda).zip(&vc.lambda) {
        vrows.push((label.clone(), "smooth".into(), *s, Some(*l)));
    }
    vrows.push(("Residual".into(), String::new(), vc.sigma, None));
    let mut w = csv::Writer::from_writer(out.create("variance.csv")?);
    w.write_record(["group", "name", "std_dev", "lambda"])?;
    for (g, n, s, l) in &vrows {
        w.write_record([g.clone(), n.clone(), format_f64(*s), l.map(format_f64).unwrap_or_default()])?;
    }
    w.flush()?;

    let mut summary = String::new();
    let variant = spec.variant.map(|v| format!(" (variant {v})")).unwrap_or_default();
    summary.push_str(&format!(
        "outcome {}{variant}: {} observations, {} participants\n",
        spec.outcome,
        model.fit.n_obs,
        if spec.baseline_only { model.fit.n_obs } else { data.n_participants() }
    ));
    if let Some(r) = model.fit.reml_value {
        summary.push_str(&format!(
            "REML {}  iterations {}  total edf {}\n",
            sig4(r),
            model.fit.convergence.iterations,
            sig4(model.fit.total_edf())
        ));
    }
    let pct = format!("{}%", sig4(100.0 * level));
    summary.push_str("\nParametric coefficients:\n");
    let rows: Vec<Vec<String>> = ptable
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                sig4(r.estimate),
                sig4(r.se),
                sig4(r.t_value),
                sig4(r.p_value),
                sig4(r.lower),
                sig4(r.upper),
            ]
        })
        .collect();
    summary.push_str(&render_table(
        &["", "Estimate", "Std. Error", "t value", "Pr(>|t|)", &format!("lower {pct}"), &format!("upper {pct}")],
        &rows,
    ));
    if !stable.is_empty() {
        summary.push_str("\n\nSmooth terms:\n");
        let rows: Vec<Vec<String>> = stable
            .iter()
            .map(|t| vec![t.label.clone(), sig4(t.edf), sig4(t.ref_df), sig4(t.statistic), sig4(t.p_value)])
            .collect();
        summary.push_str(&render_table(&["", "edf", "Ref.df", "F", "p-value"], &rows));
    }
    summary.push_str("\n\nVariance components:\n");
    let rows: Vec<Vec<String>> = vrows
        .iter()
        .map(|(g, n, s, _)| vec![g.clone(), n.clone(), sig4(*s)])
        .collect();
    summary.push_str(&render_table(&["Groups", "Name", "Std.Dev."], &rows));
    if vc.sigma_b_pinned {
        summary.push_str("\n(participant SD not identifiable from the residual SD here; set to 0)");
    }
    summary.push('\n');
    out.create("summary.txt")?.write_all(summary.as_bytes())?;
    print!("{summary}");
    out.commit();
    Ok(())
}

pub fn predict(opts: &Options) -> Result<()> {
    let model = load_model(opts)?;
    let (lo, hi) = age_range(&model);
    let ages = opts.grid(lo, hi, 0.1)?;
    let level = opts.level()?;
    let mut out = Outputs::new(opts.out_dir()?)?;
    let p = model.predict(&age_frame(&ages, opts.date()?))?;
    warn_all(&p.warnings);
    let curve = EffectCurve {
        abscissa: ages,
        estimate: p.estimate,
        pointwise_se: p.se,
        warnings: p.warnings,
    };
    curve.write_csv(out.create("predictions.csv")?, "age", level)?;
    out.commit();
    Ok(())
}

pub fn effects(opts: &Options) -> Result<()> {
    let model = load_model(opts)?;
    let level = opts.level()?;
    let date = opts.date()?;
    let baselines = opts.baselines.clone().unwrap_or_else(|| vec![10.0, 30.0, 50.0, 70.0]);
    let horizon = opts.horizon.unwrap_or(15.0);
    let (lo, hi) = age_range(&model);
    let ages = opts.grid(lo, hi, 0.1)?;
    let step = opts.grid_step.unwrap_or(0.1);
    let z = normal_quantile(level);

    let mut out = Outputs::new(opts.out_dir()?)?;
    let cross = model.cross_sectional_effect(date, &ages)?;
    warn_all(&cross.warnings);
    cross.write_csv(out.create("cross_sectional.csv")?, "age", level)?;

    let mut w = csv::Writer::from_writer(out.create("longitudinal.csv")?);
    w.write_record(["baseline_age", "t", "estimate", "se", "lower", "upper"])?;
    for &a0 in &baselines {
        let cohort = date.map(|d| d - a0);
        let curve = model.longitudinal_effect(a0, cohort, horizon, step)?;
        warn_all(&curve.warnings);
        for i in 0..curve.abscissa.len() {
            let (e, s) = (curve.estimate[i], curve.pointwise_se[i]);
            w.write_record([
                format_f64(a0),
                format_f64(curve.abscissa[i]),
                format_f64(e),
                format_f64(s),
                format_f64(e - z * s),
                format_f64(e + z * s),
            ])?;
        }
    }
    w.flush()?;
    drop(w);
    out.commit();
    Ok(())
}

pub fn sample(opts: &Options) -> Result<()> {
    let model = load_model(opts)?;
    let seed = opts.seed()?;
    let level = opts.level()?;
    let draws = opts.draws.unwrap_or(DEFAULT_HDI_DRAWS);
    let (lo, hi) = age_range(&model);
    let ages = opts.grid(lo, hi, 0.1)?;
    let mut out = Outputs::new(opts.out_dir()?)?;

    let effect = model.prediction_design(&age_frame(&ages, opts.date()?), columns::AGE)?;
    warn_all(&effect.warnings);
    let sample = sample_posterior_curves(&model.fit, &effect.design, &ages, draws, seed)?;
    let curve = model.evaluate(effect.clone());
    let pointwise = pointwise_band(&ages, &curve.estimate, &curve.pointwise_se, level)?;
    let simultaneous = simultaneous_band(&model.fit, &effect, level, draws, seed)?;
    write_bands_csv(out.create("bands.csv")?, &[&pointwise, &simultaneous])?;

    let peak = age_at_max_distribution(&sample, level)?;
    peak.write_summary_csv(out.create("age_at_max.csv")?)?;
    let mut w = csv::Writer::from_writer(out.create("age_at_max_draws.csv")?);
    w.write_record(["draw", "age"])?;
    for (i, a) in peak.ages.iter().enumerate() {
        w.write_record([i.to_string(), format_f64(*a)])?;
    }
    w.flush()?;
    drop(w);

    if opts.write_draws.unwrap_or(false) {
        let mut w = csv::Writer::from_writer(out.create("draws.csv")?);
        let mut header = vec!["draw".to_string()];
        header.extend(ages.iter().map(|a| format_f64(*a)));
        w.write_record(&header)?;
        for (i, row) in sample.draws.row_iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| format_f64(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    println!(
        "age at maximum: mean {}, {}% HDI [{}, {}] from {draws} draws; simultaneous multiplier {}",
        sig4(peak.mean),
        sig4(100.0 * level),
        sig4(peak.hdi.lower),
        sig4(peak.hdi.upper),
        sig4(simultaneous.multiplier)
    );
    out.commit();
    Ok(())
}

fn parse_variants(opts: &Options) -> Result<Vec<Variant>> {
    match &opts.variants {
        None => Ok(Variant::ALL.to_vec()),
        Some(v) => v.iter().map(|s| s.parse()).collect(),
    }
}

fn print_averaged(report: &ExperimentReport) -> String {
    let rows: Vec<Vec<String>> = report
        .averaged()
        .into_iter()
        .map(|r| vec![r.region, r.regime, r.variant.to_string(), sig4(r.rmse), sig4(r.bias), sig4(r.variance.sqrt())])
        .collect();
    render_table(&["region", "regime", "variant", "RMSE", "Bias", "sqrt(Var)"], &rows)
}

pub fn simulate(opts: &Options) -> Result<()> {
    let seed = opts.seed()?;
    let preset: Preset = opts.preset.as_deref().unwrap_or("desk").parse()?;
    let mut protocol = preset.protocol();
    if let Some(n) = opts.participants {
        protocol.n_participants = n;
    }
    let magnitude = opts.magnitude.unwrap_or(DEFAULT_MAGNITUDE_FRACTION);
    let truths = builtin_truths(magnitude);

    if opts.dataset_only.unwrap_or(false) {
        let shape = opts.truth.as_deref().unwrap_or(CurveShape::HippocampusLike.name());
        let regime = opts.regime.as_deref().unwrap_or("none");
        let truth = truths
            .iter()
            .find(|t| t.region() == shape && t.regime.name() == regime)
            .ok_or_else(|| Error::Config(format!("no built-in truth `{shape}` with regime `{regime}`")))?;
        protocol.seed = seed;
        let mut out = Outputs::new(opts.out_dir()?)?;
        let ds = sample_dataset(truth, &protocol)?;
        ds.write_csv(out.create("dataset.csv")?)?;
        let schema = toml::to_string(&Schema::for_dataset(&ds)).map_err(|e| Error::Config(e.to_string()))?;
        out.create("schema.toml")?.write_all(schema.as_bytes())?;
        out.commit();
        return Ok(());
    }

    let config = ExperimentConfig {
        variants: parse_variants(opts)?,
        n_replicates: opts.replicates.unwrap_or(preset.n_replicates()),
        master_seed: seed,
        cross_sectional: opts.cross_sectional.unwrap_or(false),
        ..Default::default()
    };
    let mut out = Outputs::new(opts.out_dir()?)?;
    let mut report = run_experiment(&truths, &protocol, &config)?;
    report.preset = Some(preset.name().to_string());
    serde_json::to_writer_pretty(out.create("report.json")?, &report)?;
    report.write_cells_csv(out.create("cells.csv")?)?;
    report.write_averaged_csv(out.create("averaged.csv")?)?;
    report.write_failures_csv(out.create("failures.csv")?)?;
    if config.cross_sectional {
        report.write_cross_sectional_csv(out.create("cross_sectional.csv")?)?;
    }
    let run = serde_json::json!({
        "master_seed": seed,
        "preset": preset.name(),
        "n_participants": protocol.n_participants,
        "n_replicates": config.n_replicates,
        "magnitude_fraction": magnitude,
        "variants": config.variants,
        "failed_fits": report.total_failures(),
    });
    serde_json::to_writer_pretty(out.create("run.json")?, &run)?;
    eprintln!("{} failed fits excluded", report.total_failures());
    println!("{}", print_averaged(&report));
    out.commit();
    Ok(())
}

pub fn report(opts: &Options) -> Result<()> {
    let input = Options::require(&opts.input, "input")?;
    let report: ExperimentReport = serde_json::from_reader(BufReader::new(File::open(input.join("report.json"))?))?;
    let mut out = Outputs::new(opts.out_dir()?)?;
    report.write_averaged_csv(out.create("averaged.csv")?)?;

    let averaged = report.averaged();
    let mut best = Vec::new();
    let mut keys: Vec<(String, String)> = averaged.iter().map(|r| (r.region.clone(), r.regime.clone())).collect();
    keys.dedup();
    for (region, regime) in keys {
        let winner = averaged
            .iter()
            .filter(|r| r.region == region && r.regime == regime)
            .min_by(|a, b| a.rmse.total_cmp(&b.rmse))
            .expect("non-empty group");
        best.push(vec![region, regime, winner.variant.to_string(), sig4(winner.rmse)]);
    }
    let text = format!(
        "{}\n\nLowest average RMSE:\n{}\n",
        print_averaged(&report),
        render_table(&["region", "regime", "variant", "RMSE"], &best)
    );
    out.create("table.txt")?.write_all(text.as_bytes())?;
    print!("{text}");
    out.commit();
    Ok(())
}

pub fn check(opts: &Options) -> Result<()> {
    let model = load_model(opts)?;
    let data = load_data(opts)?;
    let seed = opts.seed()?;
    let checks = check_model_bases(&model, &data, opts.permutations.unwrap_or(200), seed)?;
    let mut out = Outputs::new(opts.out_dir()?)?;
    let mut w = csv::Writer::from_writer(out.create("basis_check.csv")?);
    w.write_record(["term", "k_prime", "edf", "k_index", "p_value"])?;
    for c in &checks {
        w.write_record([
            c.label.clone(),
            c.k_prime.to_string(),
            format_f64(c.edf),
            format_f64(c.k_index),
            format_f64(c.p_value),
        ])?;
    }
    w.flush()?;
    drop(w);
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| vec![c.label.clone(), c.k_prime.to_string(), sig4(c.edf), sig4(c.k_index), sig4(c.p_value)])
        .collect();
    println!("{}", render_table(&["", "k'", "edf", "k-index", "p-value"], &rows));
    for c in &checks {
        if c.p_value < 0.05 && c.edf > 0.8 * c.k_prime as f64 {
            eprintln!("warning: {} may need a larger basis (low k-index p-value with edf near k')", c.label);
        }
    }
    out.commit();
    Ok(())
}

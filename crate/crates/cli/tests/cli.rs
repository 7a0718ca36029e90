use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn lifespan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lifespan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lifespan(args);
    assert!(
        out.status.success(),
        "lifespan {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Table as (header, rows of f64 with non-numeric cells as NaN).
fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (h, rows) = read_table(path);
    let i = h.iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
    schema: PathBuf,
}

fn dataset(regime: &str, participants: usize, seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    ok(&[
        "simulate",
        "--dataset-only",
        "--truth",
        "hippocampus-like",
        "--regime",
        regime,
        "--participants",
        &participants.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&ds),
    ]);
    Fixture {
        data: ds.join("dataset.csv"),
        schema: ds.join("schema.toml"),
        dir,
    }
}

impl Fixture {
    fn fit(&self, variant: &str, name: &str) -> PathBuf {
        let out = self.dir.path().join(name);
        ok(&[
            "fit",
            "--data",
            s(&self.data),
            "--schema",
            s(&self.schema),
            "--variant",
            variant,
            "--out",
            s(&out),
        ]);
        out
    }
}

#[test]
fn parametric_intervals_use_the_normal_quantile() {
    let fx = dataset("offset", 200, 11);
    let fit = fx.fit("3a", "fit");
    let p = fit.join("parametric.csv");
    let (est, se, lo, hi) = (column(&p, "estimate"), column(&p, "se"), column(&p, "lower"), column(&p, "upper"));
    assert_eq!(est.len(), 2);
    for i in 0..est.len() {
        assert!((lo[i] - (est[i] - 1.959964 * se[i])).abs() <= 1e-4 * se[i]);
        assert!((hi[i] - (est[i] + 1.959964 * se[i])).abs() <= 1e-4 * se[i]);
    }
    let (_, rows) = read_table(&p);
    assert_eq!(rows[0][0], "(Intercept)");
    assert_eq!(rows[1][0], "birth_date");
    for f in ["model.json", "spec.toml", "smooth.csv", "variance.csv", "summary.txt"] {
        assert!(fit.join(f).exists(), "{f}");
    }
}

#[test]
fn purely_parametric_fit_is_least_squares() {
    let fx = dataset("none", 120, 5);
    let spec = fx.dir.path().join("ols.toml");
    fs::write(
        &spec,
        "outcome = \"volume\"\n[[terms]]\ntype = \"parametric\"\nvar = \"age\"\n",
    )
    .unwrap();
    let out = fx.dir.path().join("ols");
    ok(&["fit", "--data", s(&fx.data), "--schema", s(&fx.schema), "--spec", s(&spec), "--out", s(&out)]);

    let x = column(&fx.data, "age");
    let y = column(&fx.data, "volume");
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let se_slope = (rss / (n - 2.0) / sxx).sqrt();

    let p = out.join("parametric.csv");
    let (est, se) = (column(&p, "estimate"), column(&p, "se"));
    assert!((est[0] - intercept).abs() < 1e-6 * intercept.abs());
    assert!((est[1] - slope).abs() < 1e-6 * slope.abs().max(1.0));
    assert!((se[1] - se_slope).abs() < 1e-6 * se_slope);
}

#[test]
fn refitting_reproduces_the_model() {
    let fx = dataset("none", 150, 3);
    let a = fx.fit("1b", "a");
    let b = fx.fit("1b", "b");
    assert_eq!(fs::read(a.join("model.json")).unwrap(), fs::read(b.join("model.json")).unwrap());
    assert_eq!(fs::read(a.join("parametric.csv")).unwrap(), fs::read(b.join("parametric.csv")).unwrap());
}

#[test]
fn effects_start_at_zero_and_age_only_curves_agree() {
    let fx = dataset("none", 200, 9);
    let fit = fx.fit("1b", "fit");
    let out = fx.dir.path().join("eff");
    ok(&[
        "effects",
        "--model",
        s(&fit.join("model.json")),
        "--baselines",
        "20,40",
        "--horizon",
        "10",
        "--grid-min",
        "20",
        "--grid-max",
        "50",
        "--grid-step",
        "0.5",
        "--out",
        s(&out),
    ]);
    let long = out.join("longitudinal.csv");
    let (a0, t, est) = (column(&long, "baseline_age"), column(&long, "t"), column(&long, "estimate"));
    for i in 0..t.len() {
        if t[i] == 0.0 {
            assert_eq!(est[i], 0.0);
            assert_eq!(column(&long, "se")[i], 0.0);
        }
    }
    let cross = out.join("cross_sectional.csv");
    let (age, cs) = (column(&cross, "age"), column(&cross, "estimate"));
    let at = |a: f64| cs[age.iter().position(|x| (x - a).abs() < 1e-9).unwrap()];
    for i in 0..t.len() {
        if ((t[i] * 2.0).round() - t[i] * 2.0).abs() < 1e-9 {
            let expected = at(a0[i] + t[i]) - at(a0[i]);
            assert!((est[i] - expected).abs() < 1e-6 * (1.0 + expected.abs()), "a0 {} t {}", a0[i], t[i]);
        }
    }
}

#[test]
fn predictions_and_samples_cover_the_grid_in_order() {
    let fx = dataset("offset", 200, 21);
    let fit = fx.fit("3a", "fit");
    let model = fit.join("model.json");
    let pred = fx.dir.path().join("pred");
    ok(&["predict", "--model", s(&model), "--date", "2005", "--out", s(&pred)]);
    let age = column(&pred.join("predictions.csv"), "age");
    assert!(age.len() > 100);
    assert!(age.windows(2).all(|w| w[1] > w[0]));

    let samp = fx.dir.path().join("samp");
    ok(&[
        "sample", "--model", s(&model), "--date", "2005", "--draws", "1000", "--seed", "4", "--write-draws",
        "--grid-min", "5", "--grid-max", "80", "--grid-step", "1", "--out", s(&samp),
    ]);
    let bands = samp.join("bands.csv");
    let (_, rows) = read_table(&bands);
    let (lo, hi) = (column(&bands, "lower"), column(&bands, "upper"));
    let n = rows.len() / 2;
    assert_eq!(n, 76);
    for i in 0..n {
        assert_eq!(rows[i][4], "pointwise");
        assert_eq!(rows[n + i][4], "simultaneous");
        assert!(lo[n + i] <= lo[i] && hi[n + i] >= hi[i]);
    }
    let peak = column(&samp.join("age_at_max.csv"), "posterior_mean")[0];
    assert!((5.0..=80.0).contains(&peak));
    assert_eq!(column(&samp.join("age_at_max_draws.csv"), "age").len(), 1000);
    let (h, d) = read_table(&samp.join("draws.csv"));
    assert_eq!((h.len(), d.len()), (77, 1000));
}

#[test]
fn simulation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "simulate", "--seed", "17", "--participants", "150", "--replicates", "2", "--variants", "1b,3a",
            "--out", s(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["cells.csv", "averaged.csv", "failures.csv", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rep = dir.path().join("rep");
    let out = ok(&["report", "--input", s(&a), "--out", s(&rep)]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Lowest average RMSE"));
    assert!(rep.join("table.txt").exists());
}

#[test]
fn errors_are_json_and_leave_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("o");
    let r = lifespan(&["fit", "--data", s(&missing), "--variant", "1b", "--out", s(&out)]);
    assert!(!r.status.success());
    let err: serde_json::Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(err["error"], "io");
    assert!(!out.exists());

    // Cohort models need a date for longitudinal effects; the cross-sectional
    // file written before the failure must be removed.
    let fx = dataset("offset", 150, 2);
    let fit = fx.fit("3a", "fit");
    let eff = fx.dir.path().join("eff");
    let r = lifespan(&["effects", "--model", s(&fit.join("model.json")), "--out", s(&eff)]);
    assert!(!r.status.success());
    let last = String::from_utf8(r.stderr).unwrap();
    let err: serde_json::Value = serde_json::from_str(last.lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "config");
    assert!(!eff.exists());

    let r = lifespan(&["fit", "--data", s(&fx.data), "--schema", s(&fx.schema), "--variant", "9z", "--out", s(&eff)]);
    let err: serde_json::Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(err["error"], "spec");
}

#[test]
fn flags_override_the_config_file() {
    let fx = dataset("none", 150, 8);
    let out = fx.dir.path().join("cfg-out");
    let cfg = fx.dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "data = {:?}\nschema = {:?}\nvariant = \"1a\"\nout = {:?}\nk-age = 8\n",
            s(&fx.data),
            s(&fx.schema),
            s(&out)
        ),
    )
    .unwrap();
    ok(&["fit", "--config", s(&cfg), "--variant", "1b"]);
    let spec = fs::read_to_string(out.join("spec.toml")).unwrap();
    assert!(spec.contains("variant = \"1b\""));
    assert!(spec.contains("k = 8"));

    fs::write(&cfg, "varient = \"1b\"\n").unwrap();
    let r = lifespan(&["fit", "--config", s(&cfg)]);
    let err: serde_json::Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

use std::fs;
use std::path::Path;
use std::process::Command;

use cepreg::experiments::generate_example1;
use cepreg::io::{emit_fit, export_panel, ingest, FitDocument};
use cepreg::rng::substream;
use cepreg::{fit_two_stage, PipelineConfig};

fn cepreg(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cepreg")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn sample_files(dir: &Path) -> (String, String) {
    let sim = generate_example1(30, 48, 2, &mut substream(41, 0)).unwrap();
    let s = dir.join("series.csv");
    let c = dir.join("covariates.csv");
    export_panel(&sim.panel, &s, &c).unwrap();
    (s.to_str().unwrap().to_string(), c.to_str().unwrap().to_string())
}

#[test]
fn fit_document_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let sim = generate_example1(30, 48, 2, &mut substream(42, 0)).unwrap();
    let fit = fit_two_stage(&sim.panel, &PipelineConfig::default()).unwrap();
    let effects = fit.effects(17).unwrap();
    let (json, csv) = emit_fit(&fit, sim.panel.covariate_names(), &effects, None, Some(9), dir.path()).unwrap();
    let doc: FitDocument = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    for (p, row) in doc.coefficients.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            assert_eq!(*v, fit.model.coefficients[(p, k)]);
        }
    }
    assert_eq!(doc.k, fit.k());
    assert_eq!(doc.frequencies, effects.frequencies);
    let rows = fs::read_to_string(csv).unwrap().lines().count() - 1;
    assert_eq!(rows, (2 + 1) * 17);
}

#[test]
fn zero_coefficients_give_zero_beta_curves() {
    let dir = tempfile::tempdir().unwrap();
    let sim = generate_example1(30, 48, 1, &mut substream(43, 0)).unwrap();
    let mut fit = fit_two_stage(&sim.panel, &PipelineConfig::default()).unwrap();
    fit.model.coefficients.fill(0.0);
    let effects = fit.effects(9).unwrap();
    let (json, csv) = emit_fit(&fit, sim.panel.covariate_names(), &effects, None, None, dir.path()).unwrap();
    let doc: FitDocument = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert!(doc.beta.iter().flatten().all(|v| *v == 0.0));
    let text = fs::read_to_string(csv).unwrap();
    for line in text.lines().filter(|l| l.starts_with("beta:")) {
        let estimate: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(estimate, 0.0);
    }
}

#[test]
fn simulated_panel_ingests_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let sim = generate_example1(12, 40, 3, &mut substream(44, 0)).unwrap();
    let s = dir.path().join("s.csv");
    let c = dir.path().join("c.csv");
    export_panel(&sim.panel, &s, &c).unwrap();
    let (panel, report) = ingest(&s, &c).unwrap();
    assert_eq!(panel, sim.panel);
    assert_eq!((report.n, report.t, report.p), (12, 40, 3));
}

#[test]
fn cli_fit_and_bootstrap_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (s, c) = sample_files(dir.path());
    let out = dir.path().join("fit");
    let (code, stdout, stderr) = cepreg(&["fit", "--series", &s, "--covariates", &c, "--grid", "20", "--output", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("K = "));
    let doc: FitDocument = serde_json::from_str(&fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(doc.alpha.len(), 20);
    assert!(doc.bands.is_none());

    let out = dir.path().join("boot");
    let (code, _, stderr) = cepreg(&[
        "bootstrap", "--series", &s, "--covariates", &c, "--bootstrap", "50", "--grid", "10", "--estimator", "envelope",
        "--dim", "1", "--output", out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stderr}");
    let doc: FitDocument = serde_json::from_str(&fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    let bands = doc.bands.unwrap();
    assert_eq!(bands.lower.len(), 3);
    let csv = fs::read_to_string(out.join("effects.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| !l.ends_with(",,")));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (s, c) = sample_files(dir.path());
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();

    let missing = dir.path().join("missing.csv");
    let (code, _, _) = cepreg(&["fit", "--series", missing.to_str().unwrap(), "--covariates", &c, "--output", o]);
    assert_eq!(code, 2);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x1,x2\n1,oops\n").unwrap();
    let (code, _, stderr) = cepreg(&["fit", "--series", &s, "--covariates", bad.to_str().unwrap(), "--output", o]);
    assert_eq!(code, 2);
    assert!(stderr.contains("row 2, column 2"), "{stderr}");

    let (code, _, _) = cepreg(&["fit", "--series", &s, "--covariates", &c, "--k", "500", "--output", o]);
    assert_eq!(code, 4);
    let (code, _, _) = cepreg(&["fit", "--series", &s, "--covariates", &c, "--dim", "1", "--output", o]);
    assert_eq!(code, 4);
    let (code, _, _) = cepreg(&["fit", "--series", &s, "--covariates", &c, "--k", "many", "--output", o]);
    assert_eq!(code, 4);
    let (code, _, _) = cepreg(&["bootstrap", "--series", &s, "--covariates", &c, "--bootstrap", "10", "--output", o]);
    assert_eq!(code, 4);
}

#[test]
fn cli_simulate_from_cepstral_truth() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.json");
    fs::write(
        &truth,
        r#"{"alpha": [0.0, 1.0], "beta": [[0.0, 0.0, 0.5], [0.2]], "noise_sd": [0.3, 0.2], "covariates": {"ar": {"tau": 0.3}}}"#,
    )
    .unwrap();
    let out = dir.path().join("sim");
    let (code, _, stderr) = cepreg(&[
        "simulate", "--truth", truth.to_str().unwrap(), "--n", "15", "--t", "32", "--seed", "3", "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stderr}");
    let (panel, report) = ingest(&out.join("series.csv"), &out.join("covariates.csv")).unwrap();
    assert_eq!((report.n, report.t, report.p), (15, 32, 2));
    assert_eq!(panel.covariate_names(), ["x1", "x2"]);
}

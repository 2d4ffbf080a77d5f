use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn circe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circe"))
        .args(args)
        .env_remove("CIRCE_MG_SEED")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn spec(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("specs").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn fit_json(input: &Path, extra: &[&str]) -> (Value, i32) {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("fit.json");
    let mut args = vec!["fit", "--input", s(input), "--output", s(&out)];
    args.extend_from_slice(extra);
    let res = circe(&args);
    let code = res.status.code().unwrap();
    assert!(code == 0 || code == 2, "{}", String::from_utf8_lossy(&res.stderr));
    (read_json(&out), code)
}

#[test]
fn defaults_for_minimal_csv() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.csv");
    fs::write(&data, "y,h_1\n1.0,1.0\n2.5,2.0\n2.0,1.5\n").unwrap();
    let (report, _) = fit_json(&data, &[]);
    assert_eq!(report["schema_version"], "1");
    assert_eq!((report["n"].as_u64(), report["p"].as_u64(), report["q"].as_u64()), (Some(3), Some(1), Some(1)));
    assert_eq!(report["noise_known"], false);
}

#[test]
fn malformed_cell_is_located() {
    let res = circe(&["fit", "--input", s(&fixture("malformed.csv"))]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("row 7") && err.contains("h_2"), "{err}");
}

#[test]
fn golden_fit_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("fit.json");
    let res = circe(&[
        "fit",
        "--input",
        s(&fixture("demo1.csv")),
        "--output",
        s(&out),
        "--form",
        "log-gaussian",
        "--seed",
        "7",
    ]);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&out).unwrap(), fs::read_to_string(fixture("demo1_fit.json")).unwrap());
}

#[test]
fn closed_form_through_cli() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.csv");
    fs::write(&data, "y,h_1,group\n2,1,1\n6,2,2\n3.3,1.1,1\n-0.4,0.5,2\n").unwrap();
    let (report, _) = fit_json(&data, &["--model", "pooled"]);
    let z = [2.0, 3.0, 3.0, -0.8];
    let mean = z.iter().sum::<f64>() / 4.0;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
    assert!((report["params"]["m"][0].as_f64().unwrap() - mean).abs() < 1e-8);
    assert!((report["params"]["sigma2"][0][0].as_f64().unwrap() - var).abs() < 1e-8);
}

#[test]
fn nested_models_and_single_group_reduction() {
    let (multi, _) = fit_json(&fixture("demo1.csv"), &[]);
    let (pooled, _) = fit_json(&fixture("demo1.csv"), &["--model", "pooled"]);
    assert!(multi["loglik"].as_f64().unwrap() >= pooled["loglik"].as_f64().unwrap());
    assert_eq!(multi["n_params"], 3);
    assert_eq!(pooled["n_params"], 2);

    let dir = TempDir::new().unwrap();
    let single = dir.path().join("single.csv");
    let text = fs::read_to_string(fixture("demo1.csv")).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    fs::write(&single, stripped).unwrap();
    let (a, _) = fit_json(&single, &["--model", "multigroup"]);
    let (b, _) = fit_json(&single, &["--model", "pooled"]);
    for key in ["params", "loglik", "aic", "nec", "raw_sigma2"] {
        assert_eq!(a[key], b[key], "{key}");
    }
}

#[test]
fn perfect_fit_is_flagged_degenerate() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.csv");
    let mut text = String::from("y,h_1,r\n");
    for k in 1..=20 {
        let h = 0.5 + k as f64 * 0.25;
        text.push_str(&format!("{},{},0.1\n", 2.0 * h, h));
    }
    fs::write(&data, text).unwrap();
    let fit = dir.path().join("fit.json");
    assert!(circe(&["fit", "--input", s(&data), "--output", s(&fit)]).status.success());
    let out = dir.path().join("diag");
    let res = circe(&["diagnose", "--input", s(&data), "--params", s(&fit), "--output", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let residuals = fs::read_to_string(out.join("residuals.csv")).unwrap();
    for line in residuals.lines().skip(1) {
        assert_eq!(line.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 0.0);
    }
    let ks = read_json(&out.join("ks.json"));
    assert_eq!(ks["degenerate"], true);
    assert_eq!(ks["statistic"].as_f64().unwrap(), 0.5);
    assert_eq!(ks["reject_at_5pct"], true);
}

#[test]
fn simulated_at_truth_passes_ks() {
    let dir = TempDir::new().unwrap();
    let params = dir.path().join("truth.json");
    fs::write(&params, r#"{"m": [1.0], "sigma2": [[0.04], [0.12]]}"#).unwrap();
    let mut passed = 0;
    for seed in 1..=20 {
        let data = dir.path().join(format!("d{seed}.csv"));
        let sim = circe(&["simulate", "--input", s(&spec("demo1.json")), "--output", s(&data), "--seed", &seed.to_string()]);
        assert!(sim.status.success());
        let out = dir.path().join(format!("diag{seed}"));
        assert!(circe(&["diagnose", "--input", s(&data), "--params", s(&params), "--output", s(&out)]).status.success());
        if read_json(&out.join("ks.json"))["p_value"].as_f64().unwrap() > 0.05 {
            passed += 1;
        }
    }
    assert!(passed >= 18, "{passed}/20");
}

#[test]
fn diagnose_missing_params_file() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.json");
    let res = circe(&[
        "diagnose",
        "--input",
        s(&fixture("demo1.csv")),
        "--params",
        s(&missing),
        "--output",
        s(dir.path()),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("nope.json"));
}

#[test]
fn diagnostics_round_trip_through_report() {
    let dir = TempDir::new().unwrap();
    let fit = dir.path().join("fit.json");
    assert!(circe(&["fit", "--input", s(&fixture("demo1.csv")), "--output", s(&fit)]).status.success());
    let report = read_json(&fit);
    let bare = dir.path().join("bare.json");
    fs::write(&bare, serde_json::to_string(&report["params"]).unwrap()).unwrap();
    for (params, out) in [(&fit, "a"), (&bare, "b")] {
        let res = circe(&["diagnose", "--input", s(&fixture("demo1.csv")), "--params", s(params), "--output", s(&dir.path().join(out))]);
        assert!(res.status.success());
    }
    for file in ["residuals.csv", "qq.csv", "ks.json", "diagnostics.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(file)).unwrap(),
            fs::read(dir.path().join("b").join(file)).unwrap(),
            "{file}"
        );
    }
    let diag = read_json(&dir.path().join("a/diagnostics.json"));
    assert_eq!(diag["nec"], report["nec"]);
}

#[test]
fn test_command_reports_wald_and_aic() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("test.json");
    let res = circe(&["test", "--input", s(&fixture("demo1.csv")), "--output", s(&out)]);
    assert_eq!(res.status.code(), Some(0));
    let report = read_json(&out);
    let wald = report["wald"].as_array().unwrap();
    assert_eq!(wald.len(), 1);
    let w = wald[0]["statistic"].as_f64().unwrap();
    let p = wald[0]["p_value"].as_f64().unwrap();
    assert_eq!(wald[0]["reject_at_5pct"].as_bool().unwrap(), w > 3.841459);
    assert!((0.0..=1.0).contains(&p));
    let pooled = report["aic"]["pooled"]["aic"].as_f64().unwrap();
    let multi = report["aic"]["multigroup"]["aic"].as_f64().unwrap();
    let preferred = if multi < pooled { "multigroup" } else { "pooled" };
    assert_eq!(report["preferred_model"], preferred);
}

#[test]
fn commands_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        assert!(circe(&["simulate", "--input", s(&spec("demo1.json")), "--output", s(out)]).status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let (fa, fb) = (dir.path().join("fa.json"), dir.path().join("fb.json"));
    for (out, jobs) in [(&fa, "1"), (&fb, "3")] {
        assert!(circe(&["fit", "--input", s(&a), "--output", s(out), "--jobs", jobs]).status.success());
    }
    assert_eq!(fs::read(&fa).unwrap(), fs::read(&fb).unwrap());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("fit.json");
    let res = Command::new(env!("CARGO_BIN_EXE_circe"))
        .args(["fit", "--input", s(&fixture("demo1.csv")), "--output", s(&out)])
        .env("CIRCE_MG_SEED", "99")
        .output()
        .unwrap();
    assert!(res.status.success());
    assert_eq!(read_json(&out)["config"]["seed"], 99);
}

#[test]
fn usage_errors_exit_with_one() {
    let res = circe(&["fit", "--input", s(&fixture("demo1.csv")), "--model", "bogus"]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(circe(&[]).status.code(), Some(1));
    assert_eq!(circe(&["--help"]).status.code(), Some(0));
}

#[test]
fn g_ref_column_shifts_y() {
    let dir = TempDir::new().unwrap();
    let (shifted, plain) = (dir.path().join("s.csv"), dir.path().join("p.csv"));
    fs::write(&shifted, "y,h_1,g_ref\n3,1,1\n4.5,1.5,1.5\n2.2,0.8,0.2\n").unwrap();
    fs::write(&plain, "y,h_1\n2,1\n3,1.5\n2.0,0.8\n").unwrap();
    let (a, _) = fit_json(&shifted, &[]);
    let (b, _) = fit_json(&plain, &[]);
    assert_eq!(a["params"], b["params"]);
}

#[test]
fn replicate_minimal_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("rep");
    let res = circe(&["replicate", "--input", s(&spec("demo1.json")), "--output", s(&out), "--replications", "1"]);
    assert!(matches!(res.status.code(), Some(0) | Some(2)));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["schema_version"], "1");
    assert_eq!(report["n_replications"], 1);
    assert_eq!(report["blocks"][0]["outcomes"].as_array().unwrap().len(), 1);
    let violin = fs::read_to_string(out.join("violin.csv")).unwrap();
    assert_eq!(violin.lines().count(), 1 + 3);
    assert!(violin.starts_with("parameter,group,factor,n_tilde,replication,value\n"));
}

#[test]
fn demo3d_nec_curve_is_monotone() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("rep");
    let res = circe(&[
        "replicate",
        "--input",
        s(&spec("demo3d.json")),
        "--output",
        s(&out),
        "--replications",
        "20",
        "--sizes",
        "30,480",
        "--starts",
        "0",
        "--max-iter",
        "2000",
    ]);
    assert!(matches!(res.status.code(), Some(0) | Some(2)), "{}", String::from_utf8_lossy(&res.stderr));
    let curve = fs::read_to_string(out.join("nec_curve.csv")).unwrap();
    let rows: Vec<Vec<f64>> = curve
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].len(), 10);
    for col in 1..10 {
        assert!(rows[1][col] < rows[0][col], "column {col}");
    }
}

#[test]
fn non_convergence_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("fit.json");
    let res = circe(&["fit", "--input", s(&fixture("demo1.csv")), "--output", s(&out), "--max-iter", "1"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(read_json(&out)["convergence"]["converged"], false);
}

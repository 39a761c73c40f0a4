use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn homquant(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homquant")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn config_arg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn data_rows(text: &str) -> Vec<csv::StringRecord> {
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    csv::Reader::from_reader(body.as_bytes()).records().map(Result::unwrap).collect()
}

#[test]
fn printed_certificate_verifies() {
    let tmp = TempDir::new().unwrap();
    let out = homquant(&["verify", "--certificate", &config_arg("printed_certificate.json")], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    let report: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert!(report["margins"]["margin_mono"].as_f64().unwrap() > 0.0);
    assert!(report["margins"]["margin_w"].as_f64().unwrap() < 0.0);
    assert_eq!(report["within_rounding_slack"], true);
}

#[test]
fn synthesis_is_certified_and_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_arg("chain.json");
    for dir in ["a", "b"] {
        let out = homquant(&["synthesize", "--config", &cfg, "--out", dir], tmp.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(tmp.path().join("a/certificate.json")).unwrap();
    let b = fs::read(tmp.path().join("b/certificate.json")).unwrap();
    assert_eq!(a, b);
    let doc: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(doc["margins"]["margin_w"].as_f64().unwrap() < 0.0);
    assert_eq!(doc["config_hash"].as_str().unwrap().len(), 64);

    let out = homquant(&["verify", "--certificate", "a/certificate.json"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

#[test]
fn uncontrollable_plant_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{"plant": {"A": [[0, 0], [0, 0]], "B": [[1], [0]]}, "delta": 0.4}"#,
    );
    let out = homquant(&["synthesize", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not controllable"));
}

#[test]
fn corrupted_certificate_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let path = write_config(tmp.path(), "cert.json", r#"{"P": [[1.0, 0.0], [0.0"#);
    let out = homquant(&["verify", "--certificate", &path, "--config", &config_arg("chain.json")], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failing_certificate_exits_with_infeasible_code() {
    let tmp = TempDir::new().unwrap();
    let path = write_config(tmp.path(), "cert.json", r#"{"A": [[0.0]], "B": [[1.0]], "P": [[1.0]], "K": [[0.5]]}"#);
    let out = homquant(&["verify", "--certificate", &path], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scalar_relay_settles_at_one_second() {
    let tmp = TempDir::new().unwrap();
    let out = homquant(&["simulate", "--config", &config_arg("scalar.json"), "--out", "s"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("s/summary.json")).unwrap()).unwrap();
    let t = summary["summary"]["settling_time"].as_f64().unwrap();
    assert!((t - 1.0).abs() <= 1e-3, "{t}");
    let text = fs::read_to_string(tmp.path().join("s/trajectory.csv")).unwrap();
    assert!(text.starts_with("# config_hash="));
    let header = text.lines().nth(1).unwrap();
    assert_eq!(header, "t,x1,u1,seed_index,hom_norm,lyap_rate");
}

#[test]
fn zero_initial_state_stays_at_origin() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "zero.json",
        &format!(
            r#"{{"plant": {{"A": [[0.0, 2.0, 3.0], [0.0, 0.0, 4.0], [0.0, 0.0, 0.0]], "B": [[0.0], [0.0], [1.5]]}},
               "delta": 0.4, "tau": 2.5, "certificate": "{}",
               "simulation": {{"x0": [0.0, 0.0, 0.0], "t_end": 0.5}}}}"#,
            config_arg("printed_certificate.json")
        ),
    );
    let out = homquant(&["simulate", "--config", &cfg, "--out", "z"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&fs::read_to_string(tmp.path().join("z/trajectory.csv")).unwrap());
    assert!(!rows.is_empty());
    for row in rows {
        for v in row.iter().skip(1).take(4) {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0);
        }
        assert_eq!(&row[5], "");
    }
}

#[test]
fn divergence_exits_with_code_three() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "unstable.json",
        r#"{"plant": {"A": [[0.0]], "B": [[1.0]]}, "delta": 0.4, "tau": 2.5,
            "certificate": "cert.json", "quantizer": {"budget": 2},
            "simulation": {"x0": [1.0], "t_end": 30.0, "h": 0.01}}"#,
    );
    write_config(tmp.path(), "cert.json", r#"{"P": [[1.0]], "K": [[-1.0]]}"#);
    // A destabilizing constant input overwhelms the unit relay.
    let mut text = fs::read_to_string(&cfg).unwrap();
    text = text.replace(r#""h": 0.01"#, r#""h": 0.01, "perturbation": {"kind": "matched-custom-amplitude", "amplitude": 1e9}"#);
    fs::write(&cfg, text).unwrap();
    let out = homquant(&["simulate", "--config", &cfg, "--out", "d"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn quantize_demo_writes_codes() {
    let tmp = TempDir::new().unwrap();
    let out = homquant(&["quantize-demo", "--config", &config_arg("chain.json"), "--out", "q", "--bits", "10"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&fs::read_to_string(tmp.path().join("q/codes.csv")).unwrap());
    assert_eq!(rows.len(), 8);
    assert_eq!(&rows[0][5], "0");
    assert!(rows.iter().all(|r| r[7].len() == 10));
    let q: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("q/quantizer.json")).unwrap()).unwrap();
    assert_eq!(q["quantizer"]["N"], 1024);
    assert_eq!(q["quantizer"]["m"], 22);
    assert_eq!(q["code_width"], 10);
}

#[test]
fn budget_sweep() {
    let tmp = TempDir::new().unwrap();
    let out = homquant(
        &["sweep", "--config", &config_arg("chain.json"), "--out", "w", "--budgets", "8,64,128,256,512,1024", "--t-end", "8"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&fs::read_to_string(tmp.path().join("w/sweep.csv")).unwrap());
    let budgets: Vec<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(budgets, [8, 64, 128, 256, 512, 1024]);
    assert_eq!(&rows[0][6], "budget-too-small");
    let deltas: Vec<f64> = rows[1..].iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(deltas.windows(2).all(|w| w[1] <= w[0]), "{deltas:?}");
    for r in &rows[1..4] {
        assert_eq!(&r[3], "false");
    }
    for r in &rows[4..] {
        assert_eq!(&r[3], "true");
        assert!(r[5].parse::<f64>().unwrap() > 0.0);
    }
}

#[test]
fn flags_override_config_and_change_hash() {
    let tmp = TempDir::new().unwrap();
    let cfg = config_arg("scalar.json");
    let run = |extra: &[&str], dir: &str| {
        let mut args = vec!["simulate", "--config", &cfg, "--out", dir, "--t-end", "1.5"];
        args.extend_from_slice(extra);
        assert_eq!(homquant(&args, tmp.path()).status.code(), Some(0));
        let s: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join(dir).join("summary.json")).unwrap()).unwrap();
        (s["config_hash"].as_str().unwrap().to_string(), s["summary"]["samples"].as_u64().unwrap())
    };
    let (h1, n1) = run(&[], "a");
    let (h2, n2) = run(&["--h", "0.001"], "b");
    assert_ne!(h1, h2);
    assert_eq!(n1, 15001);
    assert_eq!(n2, 1501);
}

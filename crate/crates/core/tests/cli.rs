use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const ATOM: &str = r#"{"name":"one","atoms":[{"kappa":1,"weight":2}]}"#;

fn forge(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_soliton-forge"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("SOLITON_FORGE_THREADS", n),
        None => cmd.env_remove("SOLITON_FORGE_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn column(path: &Path) -> Vec<(f64, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,q"));
    lines
        .map(|l| {
            let (x, q) = l.split_once(',').unwrap();
            (x.parse().unwrap(), q.parse().unwrap())
        })
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gas_single_atom() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "atom.json", ATOM);
    let out = dir.path().join("q.csv");
    let o = forge(&["gas", "--measure", &m, "--xmin", "-5", "--xmax", "5", "--nx", "201", "--t", "0", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = column(&out);
    assert_eq!(rows.len(), 201);
    assert_eq!(rows[100].0, 0.0);
    assert!((rows[100].1 + 2.0).abs() < 1e-10);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(!text.contains('\r'));
}

#[test]
fn gas_empty_measure_is_zero() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "empty.json", r#"{"name":"empty"}"#);
    let out = dir.path().join("q.csv");
    let o = forge(&["gas", "--measure", &m, "--nx", "11", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(column(&out).iter().all(|&(_, q)| q == 0.0));
}

#[test]
fn gas_pole_exits_numeric() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "pole.json", r#"{"name":"pole","atoms":[{"kappa":0.5,"weight":-1}]}"#);
    let out = dir.path().join("q.csv");
    let o = forge(&["gas", "--measure", &m, "--xmin", "0", "--xmax", "2", "--nx", "201", "--t", "1", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("x = 1.000"), "{}", stderr(&o));
}

#[test]
fn malformed_measure_names_field() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "bad.json", r#"{"name":"bad","atoms":[{"kappa":1}]}"#);
    let o = forge(&["gas", "--measure", &m], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("weight"), "{}", stderr(&o));
    let m = write(&dir, "bad2.json", r#"{"name":"bad","densities":[{"form":"uniform","params":{"c":1},"support":[1,"x"],"sign":1}]}"#);
    let o = forge(&["gas", "--measure", &m], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("support"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_config() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "atom.json", ATOM);
    assert_eq!(forge(&["gas", "--measure", &m, "--nx", "1"], None).status.code(), Some(2));
    assert_eq!(forge(&["gas", "--measure", &m, "--scheme", "spline"], None).status.code(), Some(2));
    assert_eq!(forge(&["gas", "--measure", &m], Some("many")).status.code(), Some(2));
    let cond = write(&dir, "c.json", r#"{"name":"c","densities":[{"form":"condensate","params":{"h":1},"support":[0,1],"sign":1}]}"#);
    assert_eq!(forge(&["solitons", "--measure", &cond], None).status.code(), Some(2));
}

#[test]
fn multi_time_files() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "atom.json", ATOM);
    let out = dir.path().join("q.csv");
    let o = forge(&["gas", "--measure", &m, "--nx", "21", "--t", "0,0.5", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = column(&dir.path().join("q_t0.csv"));
    let b = column(&dir.path().join("q_t0.5.csv"));
    assert_eq!(a.len(), 21);
    assert!(a.iter().zip(&b).any(|(p, q)| p.1 != q.1));
}

#[test]
fn output_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "c.json", r#"{"name":"c","densities":[{"form":"condensate","params":{"h":1},"support":[0,1],"sign":1}],"atoms":[{"kappa":1.2,"weight":0.5}]}"#);
    let mut outputs = Vec::new();
    for (i, threads) in [None, Some("1"), Some("0"), Some("3")].into_iter().enumerate() {
        let out = dir.path().join(format!("q{i}.csv"));
        let o = forge(&["gas", "--measure", &m, "--xmin", "-20", "--xmax", "20", "--nx", "201", "--out", out.to_str().unwrap()], threads);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn condensate_levels_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c.csv");
    let rep = dir.path().join("levels.json");
    let o = forge(
        &["condensate", "--h", "1", "--xmin", "-40", "--xmax", "40", "--nx", "801", "--out", out.to_str().unwrap(), "--report", rep.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    let left = v[0]["left_level"].as_f64().unwrap();
    let right = v[0]["right_level"].as_f64().unwrap();
    assert!((left + 1.0).abs() < 5e-2, "{left}");
    assert!(right.abs() < 1e-4, "{right}");
}

#[test]
fn darboux_matches_solitons() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "atom.json", ATOM);
    let d = dir.path().join("d.csv");
    let s = dir.path().join("s.csv");
    let args = ["--xmin", "-5", "--xmax", "5", "--nx", "101", "--t", "0.3"];
    let o = forge(&[&["darboux", "--measure", &m, "--out", d.to_str().unwrap()], &args[..]].concat(), None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = forge(&[&["solitons", "--measure", &m, "--out", s.to_str().unwrap()], &args[..]].concat(), None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let err = column(&d)
        .iter()
        .zip(column(&s))
        .map(|(a, b)| (a.1 - b.1).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn verify_report_and_forced_failure() {
    let dir = TempDir::new().unwrap();
    let m = write(&dir, "atom.json", ATOM);
    let rep = dir.path().join("r.json");
    let o = forge(&["verify", "--measure", &m, "--xmin", "-5", "--xmax", "5", "--nx", "201", "--out", rep.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    let checks = v["checks"].as_array().unwrap();
    assert!(checks.iter().any(|c| c["name"] == "darboux_reduction" && c["pass"] == true));
    assert!(checks.iter().all(|c| c["pass"] == true));
    assert_eq!(v["config_echo"]["grid"]["nx"], 201);

    let o = forge(&["verify", "--measure", &m, "--xmin", "-5", "--xmax", "5", "--checks", "kdv_residual", "--tol", "kdv_residual=1e-15", "--out", rep.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(4));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert_eq!(v["checks"][0]["pass"], false);
}

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
[grid]
n_x = 6
n_v = 8
[init]
kind = "perturbed"
amplitude = 0.01
mode = 1
[march]
steps = 2
[io]
snapshot_every = 1
"#;

fn vpb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpb")).args(args).env("RUST_LOG", "warn").output().expect("vpb runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(|x| x.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn simulate_writes_diagnostics_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = vpb(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("diag.csv"));
    assert_eq!(header, ["t", "mass", "sup_wf", "l2_f", "grad_phi_sup", "nullflux_max", "picard_iterations"]);
    assert_eq!(rows.len(), 3);
    assert!(rows[2][6] >= 1.0);
    for step in 0..3 {
        assert!(out.join(format!("phi_{step:05}.bin")).exists());
        assert!(out.join(format!("phi_{step:05}.txt")).exists());
    }
    assert!(out.join("config.toml").exists());
}

#[test]
fn simulate_at_t_end_zero_writes_initial_row_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = vpb(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--t-end", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = csv_rows(&out.join("diag.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], 0.0);
}

#[test]
fn same_seed_gives_identical_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = vpb(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "11"]);
        assert!(o.status.success());
        files.push(std::fs::read(out.join("diag.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn constraint_violation_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[physics]\nbeta = 0.9\n");
    let o = vpb(&["simulate", "--config", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta < 2/3"));
    let o = vpb(&["simulate", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn trace_matches_chord_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = vpb(&["trace", "--out", out.to_str().unwrap(), "--samples", "50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("trace.csv"));
    assert_eq!(rows.len(), 50);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for r in &rows {
        assert!((r[col("t_b")] - r[col("chord_t_b")]).abs() < 1e-9);
        let xb = [r[col("xb1")], r[col("xb2")], r[col("xb3")]];
        let norm = xb.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!(r[col("alpha")] >= 0.0);
    }
}

#[test]
fn verify_passes_on_a_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[grid]\nn_x = 6\nn_v = 8\n");
    let out = dir.path().join("out");
    let o = vpb(&["verify", "--config", &cfg, "--out", out.to_str().unwrap(), "--steps", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = std::fs::read_to_string(out.join("verify_report.csv")).unwrap();
    assert!(text.starts_with("name,value,threshold,pass"));
    assert!(text.lines().skip(1).all(|l| l.ends_with("true")));
}

#[test]
fn calibrate_kernels_writes_constants() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = vpb(&["calibrate-kernels", "--out", out.to_str().unwrap(), "--n-v", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let consts: toml::Table = std::fs::read_to_string(out.join("kernel_constants.toml")).unwrap().parse().unwrap();
    for key in ["c_k1", "c_k2"] {
        let v = consts[key].as_float().unwrap();
        assert!(v.is_finite() && v > 0.0);
    }
}

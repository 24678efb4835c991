use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn barrierfem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_barrierfem"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = "grid_n = 2\nneig = 20\niters = 6\nt_switch = 3\nrefresh_n = 4\nshape = sphere c=0,0,0 r=10\n";

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn grid_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", "grid_n = 1\n");
    let out = ok(barrierfem(dir.path(), &["grid", "--config", &cfg]));
    assert!(out.contains("6 tets, 6 interior faces"), "{out}");
    let mesh = barrierfem::io::load_mesh(&dir.path().join("mesh.txt")).unwrap();
    assert_eq!(mesh.num_tets(), 6);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "c.txt", SMALL);
    ok(barrierfem(d, &["grid", "--config", &cfg]));
    let out = ok(barrierfem(d, &["phantom", "--config", &cfg]));
    assert!(out.contains("barrier faces"));
    ok(barrierfem(d, &["forward", "--config", &cfg]));

    let signals = fs::read_to_string(d.join("signals.txt")).unwrap();
    let rows: Vec<Vec<f64>> = signals
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 36);
    let volume = 27.2f64.powi(3);
    for r in rows.iter().filter(|r| r[3] == 0.0) {
        assert!((r[6] - volume).abs() <= 1e-8 * volume, "{r:?}");
    }
    let again = tempfile::tempdir().unwrap();
    fs::copy(d.join("mesh.txt"), again.path().join("mesh.txt")).unwrap();
    fs::copy(d.join("truth_field.txt"), again.path().join("truth_field.txt")).unwrap();
    ok(barrierfem(again.path(), &["forward", "--config", &cfg]));
    assert_eq!(fs::read_to_string(again.path().join("signals.txt")).unwrap(), signals);

    ok(barrierfem(d, &["invert", "--config", &cfg, "--workers", "1"]));
    let history = fs::read_to_string(d.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "iter,loss_total,loss_data,reg_cont,reg_man,lr,phase");
    assert_eq!(lines.len(), 7);
    let phases: Vec<&str> = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(phases, ["long", "long", "long", "short", "short", "short"]);

    ok(barrierfem(d, &["invert", "--config", &cfg, "--workers", "3"]));
    assert_eq!(fs::read_to_string(d.join("history.csv")).unwrap(), history);

    ok(barrierfem(d, &["invert", "--config", &cfg, "--mode", "joint"]));
    let joint = fs::read_to_string(d.join("history.csv")).unwrap();
    assert!(joint.lines().skip(1).all(|l| l.ends_with(",joint")));

    let report = ok(barrierfem(d, &["eval", "--config", &cfg]));
    assert!(report.contains("signal_mse="));
    let csv = fs::read_to_string(d.join("metrics.csv")).unwrap();
    let mut csv_lines = csv.lines();
    assert_eq!(csv_lines.next(), Some("case,signal_mse,cd_l2,bad_edge_pct,n_faces,n_active_edges"));
    assert_eq!(csv_lines.next().unwrap().split(',').count(), 6);

    let self_cfg = write_config(d, "self.txt", &format!("{SMALL}case = truth\nfield = truth_field.txt\n"));
    ok(barrierfem(d, &["eval", "--config", &self_cfg]));
    let row = fs::read_to_string(d.join("metrics.csv")).unwrap();
    let fields: Vec<&str> = row.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&fields[..3], ["truth", "0", "0"]);

    let open: String = (0..fs::read_to_string(d.join("truth_field.txt")).unwrap().lines().count())
        .map(|f| format!("{f} 0.1\n"))
        .collect();
    fs::write(d.join("open.txt"), open).unwrap();
    let empty_cfg = write_config(d, "empty.txt", &format!("{SMALL}field = open.txt\n"));
    let report = ok(barrierfem(d, &["eval", "--config", &empty_cfg]));
    assert!(report.contains("cd_l2=undefined"), "{report}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = write_config(d, "bad.txt", "grid_n = 2\nbogus = 1\n");
    assert_eq!(barrierfem(d, &["grid", "--config", &bad]).status.code(), Some(2));
    let cfg = write_config(d, "c.txt", SMALL);
    assert_eq!(barrierfem(d, &["phantom", "--config", &cfg]).status.code(), Some(4));
    assert_eq!(barrierfem(d, &["grid", "--mode", "split"]).status.code(), Some(2));
    fs::write(d.join("mesh.txt"), "VERTICES 4\n0 0 0\n").unwrap();
    let out = barrierfem(d, &["phantom", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unexpected end of input"));
    // Nothing was written by the failing commands.
    assert!(!d.join("truth_field.txt").exists());
}

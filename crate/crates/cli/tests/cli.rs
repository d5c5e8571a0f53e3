use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tblsae");

/// Deterministic pseudo-noise in [-1, 1); enough for a market with a learnable lead.
fn noise(i: usize, salt: u64) -> f64 {
    let mut x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt;
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 29;
    (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn write_market(dir: &Path, n: usize) {
    let t0 = 1_577_836_800i64;
    let mut s = 0.0;
    let mut signal = Vec::with_capacity(n);
    for i in 0..n {
        s = 0.9 * s + 0.75 * noise(i, 1);
        signal.push(s);
    }
    let mut bars = String::from("timestamp,open,high,low,close\n");
    let mut feat = String::from("timestamp,value\n");
    let mut p = 100.0;
    for i in 0..n {
        let prev = p;
        if i > 0 {
            p *= 1.0 + 0.0005 * signal[i - 1] + 0.003 * noise(i, 2);
        }
        let t = t0 + 900 * i as i64;
        bars.push_str(&format!("{t},{prev},{},{},{p}\n", prev.max(p), prev.min(p)));
        feat.push_str(&format!("{t},{}\n", signal[i]));
    }
    fs::write(dir.join("bars.csv"), bars).unwrap();
    fs::write(dir.join("signal.csv"), feat).unwrap();
}

fn write_config(dir: &Path, approach: u8) -> PathBuf {
    let text = format!(
        r#"approach = {approach}
seed = 21

[[assets]]
symbol = "SYN"
bars = "bars.csv"
cost = 0.0001
features = [{{ name = "signal", path = "signal.csv" }}]

[labels]
lambda = 0.002
horizon = 10

[walkforward]
period_len = 200
max_train_periods = 2

[fracdiff]
tau = 1e-3
max_weights = 60

[sae]
epochs = 10
"#
    );
    let path = dir.join(format!("approach{approach}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn tblsae(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_is_bitwise_deterministic_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_market(dir.path(), 1000);
    let cfg = write_config(dir.path(), 4);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&tblsae(&["--jobs", "1", "run", "--config", s(&cfg), "--out", s(&a)]));
    ok(&tblsae(&["--jobs", "3", "run", "--config", s(&cfg), "--out", s(&b)]));
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|(p, _)| p.ends_with("trades.csv")));
    assert_eq!(fa, fb);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    write_market(dir.path(), 800);
    let cfg = write_config(dir.path(), 2);
    let out = dir.path().join("out");
    ok(&tblsae(&["run", "--config", s(&cfg), "--seed", "99", "--out", s(&out)]));
    let eq = fs::read_to_string(out.join("SYN/equity.csv")).unwrap();
    assert!(eq.starts_with("# seed=99 config_digest="));
    let effective = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(effective.contains("seed = 99"));
}

#[test]
fn invalid_approach_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    write_market(dir.path(), 800);
    let cfg = write_config(dir.path(), 5);
    let out = dir.path().join("out");
    let res = tblsae(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("approach"));
    assert!(!out.exists());
}

#[test]
fn label_writes_one_row_per_bar_but_the_last() {
    let dir = tempfile::tempdir().unwrap();
    write_market(dir.path(), 300);
    let out = dir.path().join("labels.csv");
    ok(&tblsae(&[
        "label",
        "--bars",
        s(&dir.path().join("bars.csv")),
        "--lambda",
        "0.002",
        "--horizon",
        "10",
        "--out",
        s(&out),
    ]));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# seed=0 config_digest="));
    assert_eq!(lines[1], "timestamp,label");
    assert_eq!(lines.len() - 2, 299);
    assert!(lines[2..].iter().all(|l| matches!(l.rsplit(',').next(), Some("1" | "0" | "-1"))));

    let bad = tblsae(&["label", "--bars", s(&dir.path().join("bars.csv")), "--lambda", "-1", "--horizon", "3", "--out", s(&out)]);
    assert!(!bad.status.success());
}

#[test]
fn fracdiff_scan_reports_every_order() {
    let dir = tempfile::tempdir().unwrap();
    write_market(dir.path(), 600);
    let out = dir.path().join("scan.csv");
    ok(&tblsae(&[
        "fracdiff-scan",
        "--bars",
        s(&dir.path().join("bars.csv")),
        "--feature",
        &format!("signal={}", s(&dir.path().join("signal.csv"))),
        "--tau",
        "1e-3",
        "--out",
        s(&out),
    ]));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "feature,d,adf_stat,p_value,corr");
    assert_eq!(rows.len(), 1 + 2 * 21);
    assert!(rows[1].starts_with("close,0,"));
    assert!(rows.last().unwrap().starts_with("signal,1,"));
}

#[test]
fn ingest_writes_canonical_files() {
    let dir = tempfile::tempdir().unwrap();
    write_market(dir.path(), 400);
    let out = dir.path().join("clean");
    ok(&tblsae(&[
        "ingest",
        "--bars",
        s(&dir.path().join("bars.csv")),
        "--symbol",
        "SYN",
        "--frequency",
        "30",
        "--feature",
        &format!("signal={}", s(&dir.path().join("signal.csv"))),
        "--out",
        s(&out),
    ]));
    let bars = fs::read_to_string(out.join("bars.csv")).unwrap();
    assert_eq!(bars.lines().filter(|l| !l.starts_with('#')).count(), 1 + 200);
    assert!(out.join("features.csv").exists());
}

#[test]
fn report_reads_run_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_market(dir.path(), 800);
    let cfg = write_config(dir.path(), 4);
    let run = dir.path().join("run");
    ok(&tblsae(&["run", "--config", s(&cfg), "--out", s(&run)]));
    let rep = dir.path().join("rep");
    let res = tblsae(&[
        "report",
        "--equity",
        s(&run.join("SYN/equity.csv")),
        "--baseline",
        s(&run.join("SYN/benchmark_equity.csv")),
        "--trades",
        s(&run.join("SYN/trades.csv")),
        "--periods-per-year",
        "6552",
        "--out",
        s(&rep),
    ]);
    ok(&res);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(rep.join("report.json")).unwrap()).unwrap();
    let first = &json["reports"][0];
    for key in ["arc", "asd", "mdd", "mld_years", "ir", "ir_star2", "n_trades", "dm", "ir_test"] {
        assert!(!first[key].is_null(), "missing {key}");
    }
    let table = fs::read_to_string(rep.join("report.txt")).unwrap();
    assert!(table.contains("IR**") && table.contains("MDD"));
    assert!(String::from_utf8_lossy(&res.stdout).contains("\"arc\""));
}

#[test]
fn sweep_writes_a_heat_table() {
    let dir = tempfile::tempdir().unwrap();
    write_market(dir.path(), 800);
    let cfg = write_config(dir.path(), 4);
    let mut text = fs::read_to_string(&cfg).unwrap();
    text.push_str("\n[sweep]\n\"sae.noise_rate\" = [0.0, 0.05]\n\"sae.bottleneck_fraction\" = [0.2, 0.4]\n");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("sweep");
    ok(&tblsae(&["--jobs", "2", "sweep", "--config", s(&cfg), "--out", s(&out)]));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("sae.bottleneck_fraction,sae.noise_rate,IR,IR_star2"));
    assert_eq!(rows.len(), 5);
    assert!(out.join("cell_003/report.json").exists());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn geomano(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geomano")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_bad_flags() {
    let help = geomano(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["gen-data", "train", "eval", "scan-check", "bench"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    assert_eq!(code(&geomano(&["scan-check", "--no-such-flag"])), 1);
    assert_eq!(code(&geomano(&["frobnicate"])), 1);
}

#[test]
fn scan_check_reports_deviations() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.txt");
    let out = geomano(&["scan-check", "--max-size", "16", "--trials", "10", "--out", path(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(report).unwrap();
    for key in ["parallel_vs_naive", "tiled_vs_naive", "scan2d_vs_manhattan"] {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap();
        let v: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
        assert!(v <= 1e-12);
    }
    assert!(String::from_utf8_lossy(&out.stderr).contains("build"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = geomano(&["bench", "--sizes", "16x16x2x4", "--tile", "5", "--variants", "naive,parallel,tiled", "--out", path(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,H,W,N,ED,seconds,points_per_sec,peak_bytes");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("tiled5,16,16,2,4,"));
    let peak: usize = lines[3].rsplit(',').next().unwrap().parse().unwrap();
    assert!(peak > 0);
    assert_eq!(code(&geomano(&["bench", "--variants", "warp", "--out", path(&dir.path().join("x.csv"))])), 1);
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = geomano(&[
        "gen-data", "--n-train", "8", "--n-test", "4", "--size", "16", "--seed", "3", "--out-dir", path(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train.gmno", "test.gmno", "stats.txt"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, "depth = 1\nembed_dim = 8\nn_dstates = 2\npatches = 4x4\nepochs = 2\n").unwrap();
    let out = geomano(&[
        "--threads", "1", "train", "--config", path(&cfg), "--data-dir", path(&data), "--out-dir", path(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<Vec<f64>> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.windows(2).all(|w| w[1][5] <= w[0][5]));

    let out = geomano(&["eval", "--run-dir", path(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let diff: f64 = text
        .lines()
        .find(|l| l.starts_with("difference"))
        .and_then(|l| l.split('=').nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(diff <= 1e-10);

    let again = dir.path().join("again");
    let out = geomano(&[
        "--threads", "1", "train", "--config", path(&cfg), "--data-dir", path(&data), "--out-dir", path(&again),
    ]);
    assert_eq!(code(&out), 0);
    let strip = |s: String| s.lines().map(|l| l.split(',').take(4).collect::<Vec<_>>().join(",")).collect::<Vec<_>>();
    assert_eq!(strip(fs::read_to_string(again.join("metrics.csv")).unwrap()), strip(metrics));
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = geomano(&["train", "--data-dir", path(&dir.path().join("missing")), "--out-dir", path(dir.path())]);
    assert_eq!(code(&out), 1);
    let out = geomano(&["train", "--set", "lr=-1"]);
    assert_eq!(code(&out), 1);
    let out = geomano(&["gen-data", "--n-train", "0", "--out-dir", path(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn numerical_failure_exits_two() {
    let out = geomano(&["scan-check", "--max-size", "4", "--trials", "2", "--tolerance=-1"]);
    assert_eq!(code(&out), 2);
}

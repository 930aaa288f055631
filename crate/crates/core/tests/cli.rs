//! End-to-end runs of the `loca` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seeds = [1, 2]

[dataset]
classes = 4
dims = 6
samples = 400
cluster_spread = 1.0
label_noise = 0.1
modes_per_class = 2
seed = 5

[teacher]
hidden = [16]
epochs = 3
batch_size = 32
lr = 0.05
momentum = 0.9
seed = 1

[student]
hidden = [8]
epochs = 3
batch_size = 32
lr = 0.05
momentum = 0.9

[loss]
tau = 4.0
beta = 0.9
gamma = 0.1

[calibration]
alpha = 0.95
"#;

fn loca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loca"))
        .args(args)
        .output()
        .expect("spawn loca")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Ten 3-class rows; rows 0, 4 and 7 are mis-instructed.
fn ten_rows(dir: &TempDir) -> (PathBuf, PathBuf) {
    let mut logits = String::from("class_0,class_1,class_2\n");
    let mut labels = String::new();
    for i in 0..10 {
        let top = i % 3;
        let row: Vec<String> = (0..3)
            .map(|j| if j == top { "2.5".to_string() } else { format!("0.{j}") })
            .collect();
        logits.push_str(&row.join(","));
        logits.push('\n');
        let label = if [0, 4, 7].contains(&i) { (top + 1) % 3 } else { top };
        labels.push_str(&format!("{label}\n"));
    }
    (write(dir, "t.csv", &logits), write(dir, "t.labels", &labels))
}

#[test]
fn stats_reports_ratio() {
    let dir = TempDir::new().unwrap();
    let (logits, labels) = ten_rows(&dir);
    let out = loca(&["stats", "--logits", s(&logits), "--labels", s(&labels)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("total=10"));
    assert!(stdout(&out).contains("misinstructed=3"));
    assert!(stdout(&out).contains("ratio=0.3000"));

    let logits = write(&dir, "one.csv", "class_0,class_1\n0.1,2.0\n");
    let labels = write(&dir, "one.labels", "1\n");
    let out = loca(&["stats", "--logits", s(&logits), "--labels", s(&labels)]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("ratio=0.0000"));
}

#[test]
fn stats_rejects_short_label_file() {
    let dir = TempDir::new().unwrap();
    let (logits, _) = ten_rows(&dir);
    let labels = write(&dir, "short.labels", &"0\n".repeat(9));
    let out = loca(&["stats", "--logits", s(&logits), "--labels", s(&labels)]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("10") && err.contains('9'), "{err}");
}

#[test]
fn stats_reports_malformed_line() {
    let dir = TempDir::new().unwrap();
    let logits = write(&dir, "bad.csv", "class_0,class_1\n0.1,0.2\n0.3,abc\n");
    let labels = write(&dir, "bad.labels", "0\n1\n");
    let out = loca(&["stats", "--logits", s(&logits), "--labels", s(&labels)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(":3:"), "{}", stderr(&out));

    let missing = dir.path().join("nope.csv");
    let out = loca(&["stats", "--logits", s(&missing), "--labels", s(&labels)]);
    assert_eq!(out.status.code(), Some(2));
}

fn read_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn calibrate_fixes_misinstructed_rows_only() {
    let dir = TempDir::new().unwrap();
    let logits = write(
        &dir,
        "p.csv",
        &format!(
            "class_0,class_1\n{},{}\n1.0,-1.0\n",
            0.4f64.ln(),
            0.6f64.ln()
        ),
    );
    let labels = write(&dir, "p.labels", "0\n0\n");
    let output = dir.path().join("out.csv");
    let out = loca(&[
        "calibrate", "--logits", s(&logits), "--labels", s(&labels),
        "--alpha", "0.9", "--output", s(&output),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_rows(&output);
    assert!((rows[0][0] - 0.55).abs() < 1e-9 && (rows[0][1] - 0.45).abs() < 1e-9);
    let e2 = (2.0f64).exp();
    assert!((rows[1][0] - e2 / (e2 + 1.0)).abs() < 1e-9);

    // the output is itself a dump whose argmax always matches the labels
    let out = loca(&["stats", "--logits", s(&output), "--labels", s(&labels)]);
    assert!(stdout(&out).contains("ratio=0.0000"), "{}", stdout(&out));
}

#[test]
fn calibrate_round_trip_on_larger_dump() {
    let dir = TempDir::new().unwrap();
    let (logits, labels) = ten_rows(&dir);
    let output = dir.path().join("out.csv");
    let out = loca(&[
        "calibrate", "--logits", s(&logits), "--labels", s(&labels),
        "--alpha", "0.95", "--tau", "2", "--output", s(&output),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("calibrated=3"));
    for row in read_rows(&output) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let out = loca(&["stats", "--logits", s(&output), "--labels", s(&labels)]);
    assert!(stdout(&out).contains("ratio=0.0000"));
}

#[test]
fn calibrate_rejects_bad_arguments() {
    let dir = TempDir::new().unwrap();
    let (logits, labels) = ten_rows(&dir);
    let output = dir.path().join("out.csv");
    for (alpha, tau) in [("1.0", "1"), ("0", "1"), ("-0.5", "1"), ("0.9", "0"), ("0.9", "-2")] {
        let out = loca(&[
            "calibrate", "--logits", s(&logits), "--labels", s(&labels),
            "--alpha", alpha, "--tau", tau, "--output", s(&output),
        ]);
        assert_eq!(out.status.code(), Some(2), "alpha={alpha} tau={tau}");
    }
    assert!(!output.exists());
}

#[test]
fn demo_single_seed_has_zero_spread() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "small.toml", SMALL);
    let report = dir.path().join("report.txt");
    let out = loca(&["demo", "--config", s(&cfg), "--seeds", "3", "--output", s(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text, stdout(&out));
    let header = "policy,mean_top1,std_top1,delta_vs_none,calibrated,dropped,seconds";
    let rows: Vec<&str> = text
        .lines()
        .skip_while(|l| *l != header)
        .skip(1)
        .take(3)
        .collect();
    assert_eq!(rows.len(), 3, "{text}");
    for (row, policy) in rows.iter().zip(["none", "skip", "loca"]) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[0], policy);
        assert_eq!(f[2].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn demo_rejects_invalid_config() {
    let dir = TempDir::new().unwrap();
    let bad = SMALL
        .replace("alpha = 0.95", "alpha = 1.5")
        .replace("momentum = 0.9\n\n[loss]", "momentum = 1.2\n\n[loss]");
    let cfg = write(&dir, "bad.toml", &bad);
    let out = loca(&["demo", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("calibration.alpha"), "{err}");
    assert!(err.contains("student.momentum"), "{err}");

    let cfg = write(&dir, "typo.toml", &SMALL.replace("label_noise", "label_nose"));
    let out = loca(&["demo", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_dedupes_and_warns() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "small.toml", SMALL);
    let out = loca(&[
        "sweep-alpha", "--config", s(&cfg), "--seeds", "1",
        "--alpha", "0.9,0.9,0.99,1.0",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("duplicate alpha=0.9"), "{err}");
    assert!(err.contains("warning: alpha=1"), "{err}");
    let text = stdout(&out);
    // one summary row and one per-run row each
    for label in ["loca-0.9,", "loca-0.99,", "loca-1,"] {
        assert_eq!(text.lines().filter(|l| l.starts_with(label)).count(), 2, "{text}");
    }
}

#[test]
fn sweep_rejects_empty_list() {
    let out = loca(&["sweep-alpha", "--alpha", ""]);
    assert_eq!(out.status.code(), Some(2));
    let out = loca(&["sweep-alpha"]);
    assert_eq!(out.status.code(), Some(2));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &["--n-train", "64", "--width", "16", "--depth", "2"];

fn lab(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_warmup-lab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn warmup-lab");
    assert!(
        out.status.success(),
        "warmup-lab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).copied().collect()
}

#[test]
fn train_writes_trajectory_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(
        dir.path(),
        &with_small(&["train", "--steps", "15", "--lr", "0.05", "--out", "t.csv"]),
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps_run"], 15);
    let csv = fs::read_to_string(dir.path().join("t.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,lr,minibatch_loss,train_loss,test_loss,test_acc,sharpness,precond_sharpness,thr_gd,thr_mom,thr_adam,event"
    );
    assert_eq!(lines.count(), 15);
}

#[test]
fn lrc_prints_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(
        dir.path(),
        &with_small(&["lrc", "--target-lr", "1.0", "--warmup-steps", "100"]),
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let header = lines
        .iter()
        .position(|l| *l == "lower,upper,critical_lr,t_fp,t_reach,t_save")
        .expect("csv header");
    let row: Vec<f64> = lines[header + 1]
        .split(',')
        .map(|x| x.parse().unwrap())
        .collect();
    assert_eq!(row.len(), 6);
    assert!(row[0] < row[1] && row[2] > 0.0);
    let r = (row[2] / 1.0f64).min(1.0);
    assert_eq!(row[4], (100.0 * (1.0 - r)).ceil().max(1.0));
    assert_eq!(row[5], 100.0 * r - row[3] / 2.0);
}

#[test]
fn sweep_resumes_from_existing_file() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_small(&[
        "sweep",
        "--steps",
        "10",
        "--warmups",
        "1,4",
        "--seeds",
        "0",
        "--max-columns",
        "2",
        "--out",
        "p.csv",
    ]);
    lab(dir.path(), &args);
    let first = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert_eq!(first.lines().count(), 5);
    assert!(first.starts_with(
        "warmup_steps,target_lr,best_test_acc,final_train_acc,status,steps_run,seed\n"
    ));
    let out = lab(dir.path(), &args);
    assert!(String::from_utf8_lossy(&out.stderr).contains("(4 reused)"));
    assert_eq!(fs::read_to_string(dir.path().join("p.csv")).unwrap(), first);
}

#[test]
fn pcw_writes_lr_trace() {
    let dir = tempfile::tempdir().unwrap();
    lab(
        dir.path(),
        &with_small(&[
            "pcw",
            "--steps",
            "200",
            "--target-lr",
            "1.0",
            "--out",
            "pcw.csv",
        ]),
    );
    let csv = fs::read_to_string(dir.path().join("pcw.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,lr,loss");
    let lrs: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(!lrs.is_empty());
    assert!(lrs.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn generated_cifar_layout_trains() {
    let dir = tempfile::tempdir().unwrap();
    lab(
        dir.path(),
        &[
            "gen-data",
            "--out",
            "data",
            "--n-train",
            "40",
            "--n-test",
            "10",
        ],
    );
    let test_batch = fs::metadata(dir.path().join("data/test_batch.bin")).unwrap();
    assert_eq!(test_batch.len(), 10 * 3073);
    lab(
        dir.path(),
        &[
            "train",
            "--data-dir",
            "data",
            "--steps",
            "3",
            "--width",
            "8",
            "--depth",
            "2",
            "--lr",
            "0.01",
            "--probe-every",
            "0",
            "--out",
            "c.csv",
        ],
    );
    assert_eq!(
        fs::read_to_string(dir.path().join("c.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

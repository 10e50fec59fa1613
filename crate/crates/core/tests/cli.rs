use std::path::PathBuf;
use std::process::{Command, Output};

fn grace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grace")).args(args).output().unwrap()
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("grace-cli-{}-{tag}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn flags_override_config_file() {
    let dir = scratch("override");
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nseed = 5\nepochs = 3\ntrain_samples = 24\neval_samples = 8\nbits = 8\n").unwrap();
    let out = grace(&[
        "train-toy", "--variant", "ce_only", "--epochs", "1", "--bits", "fp", "--out", dir.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // seed from the file, epochs and bits from the flags
    let csv = std::fs::read_to_string(dir.join("ce_only_fp_seed5.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,variant,train_loss,eval_ce,eval_acc,beta,ema_gdkd");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,ce_only,"));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn rejects_bad_input() {
    let dir = scratch("bad");
    let d = dir.to_str().unwrap();
    assert!(!grace(&["train-toy", "--bits", "3", "--out", d]).status.success());
    assert!(!grace(&["train-toy", "--variant", "nope", "--out", d]).status.success());
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "not_a_key = 1\n").unwrap();
    let out = grace(&["train-toy", "--out", d, "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
    assert!(!grace(&["quant-bench", "--bits", "5"]).status.success());
    assert!(!grace(&["entropy-error", "--bins", "2", "--out", dir.join("b.csv").to_str().unwrap()]).status.success());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn controller_and_bench_outputs() {
    let dir = scratch("ctl");
    let traj = dir.join("traj.csv");
    let out = grace(&["simulate-controller", "--steps", "200", "--mode", "fixed", "--out", traj.to_str().unwrap()]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&traj).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,beta,ema_loss,raw_loss"));
    assert_eq!(lines.count(), 200);

    let out = grace(&["quant-bench", "--bits", "8", "--group-size", "64", "--rows", "8", "--cols", "128", "--iters", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "impl,bytes,ns_per_matvec,max_abs_err");
    assert!(rows.iter().any(|r| r.starts_with("packed_int8,")));
    std::fs::remove_dir_all(dir).unwrap();
}

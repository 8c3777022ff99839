use std::path::PathBuf;
use std::process::{Command, Output};

fn dir(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("cli")
        .join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthlab"))
        .args(args)
        .output()
        .unwrap()
}

fn read(d: &PathBuf, f: &str) -> String {
    std::fs::read_to_string(d.join(f)).unwrap()
}

#[test]
fn gradcheck_defaults_pass() {
    let d = dir("gradcheck");
    let o = run(&["gradcheck", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let s = read(&d, "summary.txt");
    let line = s
        .lines()
        .find(|l| l.starts_with("max relative gradient error"))
        .unwrap();
    let v: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(v < 1e-5);
    assert_eq!(read(&d, "gradcheck.csv").lines().count(), 1 + 4 * 2 * 4);
}

#[test]
fn linear_limit_reaches_e() {
    let d = dir("limit");
    let o = run(&["limit-ode", "--act", "linear", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let s = read(&d, "summary.txt");
    let h1: f64 = s
        .lines()
        .find_map(|l| l.strip_prefix("H(1) = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((h1 - std::f64::consts::E).abs() < 1e-6);
    assert!(read(&d, "limit.csv").starts_with("tau,pair_i,pair_j,H,Phi,G\n"));
}

#[test]
fn config_file_with_flag_override() {
    let d = dir("config");
    let cfg = d.join("run.cfg");
    std::fs::write(
        &cfg,
        "# small run\nwidth = 8\nsteps = 5 # short\nsamples = 64\n",
    )
    .unwrap();
    let out = d.join("out");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let echoed = read(&out, "config.txt");
    assert!(echoed.contains("width = 8\n"));
    assert!(echoed.contains("steps = 3\n"));
    assert!(read(&out, "config.input.txt").contains("steps = 5"));
    let loss = read(&out, "loss.csv");
    assert!(loss.starts_with("scheme,N,L,K,lr,gamma0,seed,step,train_loss,diverged\n"));
    assert!(loss.lines().last().unwrap().contains(",3,"));
    assert!(out.join("model.ckpt").exists());
}

#[test]
fn config_errors_exit_two() {
    let d = dir("errors");
    let bad = d.join("bad.cfg");
    std::fs::write(&bad, "depth = 4\nwdith = 3\n").unwrap();
    let o = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("wdith"));

    let o = run(&["train", "--config", "/no/such/file.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("'config'"));

    let o = run(&["teleport"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = run(&["train", "--width", "many", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));

    let o = run(&["gradcheck", "--workers", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_three_with_results() {
    let d = dir("diverge");
    let o = run(&[
        "train",
        "--scheme",
        "sp",
        "--eta0",
        "1e5",
        "--steps",
        "20",
        "--samples",
        "64",
        "--out",
        d.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(read(&d, "summary.txt").contains("diverged = true"));
    assert!(read(&d, "loss.csv").lines().last().unwrap().ends_with(",1"));
}

#[test]
fn sweep_writes_optimum_table() {
    let d = dir("sweep");
    let o = run(&[
        "sweep",
        "--widths",
        "16",
        "--depths",
        "2,4",
        "--lr_points",
        "2",
        "--steps",
        "10",
        "--samples",
        "128",
        "--seeds",
        "1",
        "--out",
        d.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let optima = read(&d, "optima.csv");
    // 2 schemes x 2 cells x 2 rates
    assert_eq!(optima.lines().count(), 1 + 8);
    assert_eq!(
        optima.lines().skip(1).filter(|l| l.ends_with(",1")).count(),
        4
    );
    assert!(read(&d, "summary.txt").contains("mup_sqrtl: max_index_shift"));
}

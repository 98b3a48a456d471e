use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use thrifty::data::{encode_raw, synthetic};
use thrifty::metrics::MetricLog;

fn thrifty(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thrifty"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// 48 samples of 4 separable classes at 3×8×8; 32 train, 16 test.
fn raw_dataset(dir: &Path) {
    let all = synthetic(48, 4, (3, 8, 8), 0.3, 11).unwrap();
    let write = |name: &str, idx: Vec<usize>| {
        let ds = all.subset(&idx);
        let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
        fs::write(dir.join(name), encode_raw(&ds.images, &labels).unwrap()).unwrap();
    };
    write("train.rawt", (0..32).collect());
    write("test.rawt", (32..48).collect());
}

struct Fixture {
    _tmp: TempDir,
    data: PathBuf,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("data");
        fs::create_dir(&data).unwrap();
        raw_dataset(&data);
        let root = tmp.path().to_path_buf();
        Fixture { _tmp: tmp, data, root }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train(&self, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec![
            "train",
            "--dataset",
            "raw",
            "--classes",
            "4",
            "--data-dir",
            self.data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--filters",
            "6",
            "--iterations",
            "3",
            "--history",
            "1",
            "--pools",
            "1",
            "--lr-drops",
            "",
            "--lr",
            "0.05",
            "--batch-size",
            "8",
        ];
        args.extend_from_slice(extra);
        if !extra.contains(&"--epochs") {
            args.extend_from_slice(&["--epochs", "2"]);
        }
        thrifty(&args)
    }
}

#[test]
fn count_matches_closed_form() {
    let o = thrifty(&["count", "--filters", "64", "--iterations", "15", "--history", "5"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("params core    38784"), "{}", stdout(&o));
}

#[test]
fn conv_mode_changes_only_the_core_term() {
    let run = |mode: &str| {
        let o = thrifty(&["count", "--filters", "32", "--iterations", "10", "--history", "3", "--conv-mode", mode]);
        assert_eq!(code(&o), 0);
        stdout(&o)
            .lines()
            .filter(|l| l.starts_with("params"))
            .map(str::to_owned)
            .collect::<Vec<_>>()
    };
    let (a, b) = (run("classical"), run("grouped"));
    let differing: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.clone()).collect();
    assert!(differing[0].starts_with("params core"));
    assert!(a.iter().zip(&b).any(|(x, y)| x.starts_with("params alpha") && x == y));
    assert!(a.iter().zip(&b).any(|(x, y)| x.starts_with("params head") && x == y));
}

#[test]
fn plan_rows_are_sorted_by_macs() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("plan.csv");
    let o = thrifty(&[
        "plan",
        "--budget",
        "40000",
        "--iterations",
        "15,30",
        "--history",
        "0,5",
        "--pools",
        "1,2,4",
        "--schedule",
        "regular",
        "--schedule",
        "front_loaded",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let mut rdr = csv::Reader::from_path(&csv).unwrap();
    let macs: Vec<u64> = rdr
        .deserialize::<thrifty::planner::PlanRow>()
        .map(|r| r.unwrap().macs_total)
        .collect();
    assert_eq!(macs.len(), 24);
    assert!(macs.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&thrifty(&["count", "--no-such-flag"])), 2);
    assert_eq!(code(&thrifty(&["count", "--iterations", "3"])), 2);
    assert_eq!(code(&thrifty(&["count", "--filters", "8", "--iterations", "3", "--pools", "9"])), 2);
    assert_eq!(code(&thrifty(&["plan", "--budget", "10", "--iterations", "5"])), 2);
}

#[test]
fn help_lists_defaults() {
    for (cmd, needle) in [
        ("train", "[default: 128]"),
        ("eval", "[default: 128]"),
        ("plan", "[default: full]"),
        ("count", "[default: 32x32]"),
        ("gradcheck", "[default: 0.0001]"),
        ("export-activations", "[default: test]"),
        ("sweep", "[default: 1]"),
        ("ablate", "[default: 0]"),
    ] {
        let o = thrifty(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        assert!(stdout(&o).contains(needle), "{cmd}: {}", stdout(&o));
    }
}

#[test]
fn gradcheck_reports_every_group() {
    let o = thrifty(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    for g in ["conv", "gamma", "beta", "alpha", "fc_w", "fc_b"] {
        assert!(out.lines().any(|l| l.starts_with(g) && l.contains("PASS")), "{out}");
    }
    let o = thrifty(&["gradcheck", "--corrupt", "gamma"]);
    assert_eq!(code(&o), 4);
    assert!(stdout(&o).lines().any(|l| l.starts_with("gamma") && l.contains("FAIL")));
}

#[test]
fn missing_data_dir_leaves_no_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let o = thrifty(&[
        "train",
        "--dataset",
        "cifar10",
        "--data-dir",
        tmp.path().join("absent").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--budget",
        "40000",
        "--iterations",
        "15",
        "--history",
        "5",
        "--pools",
        "4",
        "--schedule",
        "regular",
    ]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn training_is_deterministic_and_eval_reproduces_it() {
    let fx = Fixture::new();
    let (a, b) = (fx.out("a"), fx.out("b"));
    for dir in [&a, &b] {
        let o = fx.train(dir, &["--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["metrics.csv", "last.ckpt", "best.ckpt", "spec.toml"] {
        let (x, y) = (fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
        assert!(x == y || file == "spec.toml", "{file} differs");
    }
    let log = MetricLog::read_csv(a.join("metrics.csv")).unwrap();
    assert_eq!(log.len(), 2);

    let o = thrifty(&[
        "eval",
        "--checkpoint",
        a.join("last.ckpt").to_str().unwrap(),
        "--dataset",
        "raw",
        "--classes",
        "4",
        "--data-dir",
        fx.data.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let printed: f64 = stdout(&o).trim().strip_prefix("test_acc ").unwrap().parse().unwrap();
    assert_eq!(printed, log.last().unwrap().test_acc);
}

#[test]
fn echoed_spec_reruns_identically() {
    let fx = Fixture::new();
    let a = fx.out("a");
    assert_eq!(code(&fx.train(&a, &["--seed", "3"])), 0);
    let b = fx.out("b");
    let o = thrifty(&["train", "--config", a.join("spec.toml").to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("last.ckpt")).unwrap(), fs::read(b.join("last.ckpt")).unwrap());
}

#[test]
fn budget_is_respected() {
    let fx = Fixture::new();
    let out = fx.out("budget");
    let o = fx.train(&out, &["--budget", "3000", "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    let total: u64 = line
        .split_whitespace()
        .find_map(|w| w.strip_prefix("params_total="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(total <= 3000);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let fx = Fixture::new();
    let full = fx.out("full");
    assert_eq!(code(&fx.train(&full, &["--epochs", "3"])), 0);
    let part = fx.out("part");
    assert_eq!(code(&fx.train(&part, &["--epochs", "1"])), 0);
    let o = fx.train(&part, &["--epochs", "3", "--resume"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (x, y) = (
        MetricLog::read_csv(full.join("metrics.csv")).unwrap(),
        MetricLog::read_csv(part.join("metrics.csv")).unwrap(),
    );
    assert!(x.same_values(&y), "{x:?} vs {y:?}");
    assert_eq!(fs::read(full.join("last.ckpt")).unwrap(), fs::read(part.join("last.ckpt")).unwrap());
}

#[test]
fn damaged_checkpoints_exit_3() {
    let fx = Fixture::new();
    let out = fx.out("run");
    assert_eq!(code(&fx.train(&out, &["--epochs", "1"])), 0);
    let good = fs::read(out.join("last.ckpt")).unwrap();
    let eval = |bytes: &[u8]| {
        let p = fx.out("bad.ckpt");
        fs::write(&p, bytes).unwrap();
        code(&thrifty(&[
            "eval",
            "--checkpoint",
            p.to_str().unwrap(),
            "--dataset",
            "raw",
            "--classes",
            "4",
            "--data-dir",
            fx.data.to_str().unwrap(),
        ]))
    };
    assert_eq!(eval(&good), 0);
    assert_eq!(eval(&good[..good.len() / 2]), 3);
    let mut magic = good.clone();
    magic[0] ^= 0xff;
    assert_eq!(eval(&magic), 3);
}

#[test]
fn export_writes_t_by_f_matrix() {
    let fx = Fixture::new();
    let out = fx.out("run");
    assert_eq!(code(&fx.train(&out, &["--epochs", "1"])), 0);
    let csv = fx.out("acts.csv");
    let o = thrifty(&[
        "export-activations",
        "--checkpoint",
        out.join("best.ckpt").to_str().unwrap(),
        "--dataset",
        "raw",
        "--classes",
        "4",
        "--data-dir",
        fx.data.to_str().unwrap(),
        "--site",
        "pre-shortcut",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = thrifty::metrics::read_matrix(&csv).unwrap();
    assert_eq!((m.len(), m[0].len()), (3, 6));
    assert!(m.iter().flatten().all(|&v| v >= 0.0));
}

#[test]
fn ablate_writes_report() {
    let fx = Fixture::new();
    let out = fx.out("ablate");
    let o = thrifty(&[
        "ablate",
        "--dataset",
        "raw",
        "--classes",
        "4",
        "--data-dir",
        fx.data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--filters",
        "4",
        "--iterations",
        "3",
        "--history",
        "2",
        "--epochs",
        "1",
        "--batch-size",
        "16",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(text.lines().count(), 6);
    for sub in ["phase1", "a", "b", "c"] {
        assert!(out.join(sub).join("metrics.csv").exists(), "{sub}");
    }
    let alpha = thrifty::metrics::read_matrix(out.join("alpha.csv")).unwrap();
    assert!(alpha.iter().flatten().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn sweep_tabulates_every_entry() {
    let fx = Fixture::new();
    let manifest = fx.out("sweep.toml");
    fs::write(
        &manifest,
        "[defaults]\niterations = 2\nhistory = 1\n\n[[config]]\nname = \"small\"\nfilters = 4\n\n[[config]]\nname = \"budget\"\nbudget = 900\npools = 1\n",
    )
    .unwrap();
    let csv = fx.out("sweep.csv");
    let o = thrifty(&[
        "sweep",
        "--manifest",
        manifest.to_str().unwrap(),
        "--dataset",
        "raw",
        "--classes",
        "4",
        "--data-dir",
        fx.data.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--repeats",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<thrifty::metrics::SweepRow> = thrifty::metrics::read_rows(&csv).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.status == "ok" && r.runs == 2));
    assert!(rows[1].params_total.unwrap() <= 900);
}

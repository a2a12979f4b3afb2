use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "synth.samples_per_class=40",
    "synth.features=8",
    "synth.sigma=1.0",
    "teacher.hidden=16",
    "teacher.epochs=2",
    "ldc.feature_dim=16",
    "epochs=3",
    "rank.epochs=2",
    "batch=32",
];

fn schedkd(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_schedkd"));
    cmd.arg("--out").arg(out);
    for kv in TINY {
        cmd.arg("--set").arg(kv);
    }
    cmd.args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn distill_is_byte_reproducible_and_eval_agrees() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let o = schedkd(dir, &["--seed", "7", "--mode", "exponential", "distill"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "model.ldc", "cost.csv", "scores.csv", "teacher.lgt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    let test_acc: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    let o = schedkd(a.path(), &["eval"]);
    assert_eq!(code(&o), 0);
    let eval: f64 = stdout(&o).trim().parse().unwrap();
    assert!((eval - test_acc).abs() < 5e-7, "{eval} vs {test_acc}");
}

#[test]
fn different_seed_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&schedkd(a.path(), &["--seed", "1", "distill"])), 0);
    assert_eq!(code(&schedkd(b.path(), &["--seed", "2", "distill"])), 0);
    assert_ne!(
        fs::read(a.path().join("metrics.csv")).unwrap(),
        fs::read(b.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn gen_data_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = schedkd(dir.path(), &["gen-data"]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "label,f0,f1,f2,f3,f4,f5,f6,f7");
    assert_eq!(lines.count(), 200);
}

#[test]
fn teacher_cache_is_reused_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&schedkd(dir.path(), &["--seed", "3", "train-teacher"])), 0);
    let cache = fs::read(dir.path().join("teacher.lgt")).unwrap();
    assert_eq!(code(&schedkd(dir.path(), &["--seed", "3", "distill"])), 0);
    assert_eq!(fs::read(dir.path().join("teacher.lgt")).unwrap(), cache);

    // a cache from another seed belongs to other data
    let o = schedkd(dir.path(), &["--seed", "4", "distill"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
}

#[test]
fn rank_writes_scores_and_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let o = schedkd(dir.path(), &["rank", "--overlap", "0.3,1.0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("overlap q=1 1.000000"), "{out}");
    let scores = fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    assert_eq!(scores.lines().next().unwrap(), "index,score,rank");
    assert_eq!(scores.lines().count(), 1 + 167);
}

#[test]
fn cost_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = schedkd(dir.path(), &["cost", "--csv"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "name,bmacs,fpmacs,size_bytes");
    // (8 features + 5 classes) * 16 dims
    assert!(lines.next().unwrap().starts_with("ldc,208,0,"));
    let o = schedkd(dir.path(), &["cost"]);
    assert!(stdout(&o).contains("BMACs(1e6)"));
}

#[test]
fn sweep_writes_axis_column() {
    let dir = tempfile::tempdir().unwrap();
    let o = schedkd(dir.path(), &["sweep", "--axis", "tau", "--values", "1,2,4,8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("tau,epoch,alpha,"));
    let groups: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups.len(), 4);
    for v in ["1", "2", "4", "8"] {
        assert!(dir.path().join(format!("tau={v}/model.ldc")).exists());
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&schedkd(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&schedkd(dir.path(), &["--mode", "cosine", "distill"])), 1);
    assert_eq!(code(&schedkd(dir.path(), &["--set", "nonsense=1", "distill"])), 1);
    assert_eq!(code(&schedkd(dir.path(), &["sweep", "--axis", "bogus", "--values", "1"])), 1);

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "# comment\ngamma = 1.5\n").unwrap();
    let o = schedkd(dir.path(), &["--config", cfg.to_str().unwrap(), "distill"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gamma") && err.contains("line 2"), "{err}");
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let o = schedkd(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("distill"));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&schedkd(dir.path(), &["eval"])), 2);
    let bad = dir.path().join("model.ldc");
    fs::write(&bad, b"LDC1 not really a model").unwrap();
    fs::write(dir.path().join("quant.csv"), "").unwrap();
    fs::write(dir.path().join("test.csv"), "label,f0\n0,1.0\n").unwrap();
    assert_eq!(code(&schedkd(dir.path(), &["eval"])), 2);

    let csv = dir.path().join("broken.csv");
    fs::write(&csv, "label,f0,f1\n0,1.0,abc\n").unwrap();
    let o = schedkd(
        dir.path(),
        &["--set", "data.source=csv", "--set", &format!("data.path={}", csv.display()), "--set", "data.classes=2", "distill"],
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn numeric_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = schedkd(dir.path(), &["--set", "teacher.lr=1e300", "distill"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("model.ldc").exists());
}

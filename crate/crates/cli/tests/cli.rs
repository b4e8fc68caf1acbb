use std::path::Path;
use std::process::{Command, Output};

use idp_core::envs::read_dataset;
use idp_core::planners::{init_params, Differentiation};
use idp_core::training::Checkpoint;

fn idp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idp"))
        .args(["--threads", "1"])
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn idp")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_small(dir: &Path) {
    let o = idp(
        dir,
        &[
            "gen", "--task", "maze", "--size", "7", "--train", "10", "--val", "3", "--test", "3", "--seed", "1",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, extra: &str) {
    let text = format!(
        "channels = 4\nforward_max_iter = 15\nbackward_max_iter = 5\nepochs = 1\nbatch_size = 4\n\
         train_data = train.idpd\nval_data = val.idpd\n{extra}"
    );
    std::fs::write(dir.join("train.cfg"), text).unwrap();
}

#[test]
fn gen_writes_requested_counts_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let o = idp(
        dir.path(),
        &[
            "gen", "--task", "maze", "--size", "15", "--train", "10", "--val", "2", "--test", "2", "--seed", "1",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("status=ok "));
    let first: Vec<Vec<u8>> = ["train", "val", "test"]
        .iter()
        .map(|n| std::fs::read(dir.path().join(format!("{n}.idpd"))).unwrap())
        .collect();
    for (name, count) in [("train", 10), ("val", 2), ("test", 2)] {
        let ds = read_dataset(&dir.path().join(format!("{name}.idpd"))).unwrap();
        assert_eq!((ds.samples.len(), ds.map_size), (count, 15));
    }
    idp(
        dir.path(),
        &[
            "gen", "--task", "maze", "--size", "15", "--train", "10", "--val", "2", "--test", "2", "--seed", "1",
        ],
    );
    for (n, bytes) in ["train", "val", "test"].iter().zip(first) {
        assert_eq!(std::fs::read(dir.path().join(format!("{n}.idpd"))).unwrap(), bytes);
    }
}

#[test]
fn cspace_maps_follow_the_bin_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = idp(
        dir.path(),
        &[
            "gen", "--task", "cspace", "--bins", "18", "--train", "2", "--val", "1", "--test", "1", "--out", "cs",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let ds = read_dataset(&dir.path().join("cs/train.idpd")).unwrap();
    assert!(ds.samples.iter().all(|s| s.grid.size == 18));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["gen", "--task", "maze", "--train", "1", "--val", "1", "--test", "1"],
        &[
            "gen", "--task", "cspace", "--bins", "20", "--train", "1", "--val", "1", "--test", "1",
        ],
        &[
            "gen", "--task", "maze", "--size", "9", "--bins", "18", "--train", "1", "--val", "1", "--test", "1",
        ],
        &["frobnicate"],
    ];
    for args in cases {
        let o = idp(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
    }
    assert_eq!(idp(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    write_config(dir.path(), "learning_rate = 0.1\n");
    let o = idp(dir.path(), &["train", "--config", "train.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("line 8"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "");
    let o = idp(dir.path(), &["train", "--config", "train.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_learning_rate_keeps_the_initial_tensors() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    write_config(dir.path(), "lr = 0\nseed = 5\ntest_data = test.idpd\n");
    let o = idp(dir.path(), &["train", "--config", "train.cfg", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout(&o);
    assert!(summary.contains("test_success="), "{summary}");
    let ck = Checkpoint::load(&dir.path().join("run/last.idpc")).unwrap();
    assert_eq!(ck.params, init_params(&ck.config.planner, 5).unwrap());
    let curve = std::fs::read_to_string(dir.path().join("run/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2);

    let o = idp(
        dir.path(),
        &["eval", "--checkpoint", "run/best.idpc", "--data", "val.idpd"],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("success="));
}

#[test]
fn explicit_mode_is_selected_by_config() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    write_config(dir.path(), "differentiation = explicit\nk_layer = 30\n");
    let o = idp(dir.path(), &["train", "--config", "train.cfg"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = Checkpoint::load(&dir.path().join("last.idpc")).unwrap();
    assert_eq!(ck.config.planner.differentiation, Differentiation::Explicit);
    assert_eq!(ck.config.planner.k_layer, 30);
}

#[test]
fn resume_continues_to_the_new_epoch_budget() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    write_config(dir.path(), "");
    assert_eq!(
        idp(dir.path(), &["train", "--config", "train.cfg", "--out", "a"])
            .status
            .code(),
        Some(0)
    );
    let text = std::fs::read_to_string(dir.path().join("train.cfg"))
        .unwrap()
        .replace("epochs = 1", "epochs = 2");
    std::fs::write(dir.path().join("train.cfg"), text).unwrap();
    let o = idp(
        dir.path(),
        &[
            "train",
            "--config",
            "train.cfg",
            "--out",
            "a",
            "--resume",
            "a/last.idpc",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        idp(dir.path(), &["train", "--config", "train.cfg", "--out", "b"])
            .status
            .code(),
        Some(0)
    );
    let a = Checkpoint::load(&dir.path().join("a/last.idpc")).unwrap();
    let b = Checkpoint::load(&dir.path().join("b/last.idpc")).unwrap();
    assert_eq!(a, b);
    let rows = |d: &str| {
        std::fs::read_to_string(dir.path().join(d).join("curve.csv"))
            .unwrap()
            .lines()
            .count()
    };
    assert_eq!(rows("a"), rows("b"));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    write_config(dir.path(), "");
    idp(dir.path(), &["train", "--config", "train.cfg"]);
    let mut bytes = std::fs::read(dir.path().join("last.idpc")).unwrap();
    bytes[4] = 99; // version field
    std::fs::write(dir.path().join("bad.idpc"), bytes).unwrap();
    let o = idp(dir.path(), &["eval", "--checkpoint", "bad.idpc", "--data", "val.idpd"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_small_mazes() {
    let dir = tempfile::tempdir().unwrap();
    let o = idp(dir.path(), &["gradcheck", "--size", "6", "--seed", "2", "--out", "gc"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("status=ok"));
    assert!(dir.path().join("gc/gradcheck.csv").exists());
}

#[test]
fn bench_emits_one_row_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let o = idp(
        dir.path(),
        &[
            "bench",
            "--sizes",
            "5,7",
            "--ks",
            "3,4",
            "--mode",
            "both",
            "--k-bwd",
            "2",
            "--samples",
            "1",
            "--out",
            "b",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 11
[synth]
n_users = 4
n_classes = 3
n_dynamic = 3
windows_per_class = 6
window_len = 64
[split]
window_len = 64
[pretrain]
max_epochs = 1
steps_per_epoch = 2
batch_size = 8
[classifier]
max_epochs = 2
batch_size = 16
[protocol]
n_runs = 2
budgets = [1, 3]
"#;

fn selfhar(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfhar"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SELFHAR_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = selfhar(args, cwd);
    assert!(
        out.status.success(),
        "selfhar {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

/// synth, pretrain and eval-semi chained through their output directories.
fn chain(root: &Path, cfg: &Path, tag: &str) -> PathBuf {
    let c = cfg.to_str().unwrap();
    let data = format!("{tag}/data");
    let pre = format!("{tag}/pre");
    let semi = format!("{tag}/semi");
    ok(&["--config", c, "--out", &data, "synth"], root);
    ok(
        &["--config", c, "--out", &pre, "pretrain", "--data", &data],
        root,
    );
    let trunk = format!("{pre}/trunk.ckpt");
    ok(
        &[
            "--config",
            c,
            "--out",
            &semi,
            "eval-semi",
            "--data",
            &data,
            "--trunk",
            &trunk,
        ],
        root,
    );
    root.join(semi)
}

#[test]
fn synth_pretrain_eval_chain_writes_reports() {
    let (dir, cfg) = setup();
    let semi = chain(dir.path(), &cfg, "a");
    for f in [
        "semi_supervised.csv",
        "semi_supervised_summary.json",
        "config.toml",
    ] {
        assert!(semi.join(f).is_file(), "missing {f}");
    }
    for f in [
        "train.wds",
        "test.wds",
        "unlabeled.wds",
        "raw.wds",
        "config.toml",
    ] {
        assert!(dir.path().join("a/data").join(f).is_file(), "missing {f}");
    }
    for f in ["tpn.ckpt", "trunk.ckpt", "pretrain_log.csv"] {
        assert!(dir.path().join("a/pre").join(f).is_file(), "missing {f}");
    }
    // 2 budgets x 3 default modes x 2 runs
    assert_eq!(csv_rows(&semi.join("semi_supervised.csv")), 12);
    let summary: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(semi.join("semi_supervised_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["n_records"], 12);
}

#[test]
fn identical_seeds_give_identical_reports() {
    let (dir, cfg) = setup();
    let a = fs::read(chain(dir.path(), &cfg, "x").join("semi_supervised.csv")).unwrap();
    let b = fs::read(chain(dir.path(), &cfg, "y").join("semi_supervised.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn worker_count_does_not_change_results() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "--out", "data", "synth"], dir.path());
    ok(
        &[
            "--config",
            c,
            "--jobs",
            "1",
            "--out",
            "one",
            "eval-semi",
            "--data",
            "data",
            "--modes",
            "supervised_scratch",
        ],
        dir.path(),
    );
    ok(
        &[
            "--config",
            c,
            "--jobs",
            "3",
            "--out",
            "three",
            "eval-semi",
            "--data",
            "data",
            "--modes",
            "supervised_scratch",
        ],
        dir.path(),
    );
    let a = fs::read(dir.path().join("one/semi_supervised.csv")).unwrap();
    let b = fs::read(dir.path().join("three/semi_supervised.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn default_protocol_produces_one_row_per_budget_mode_and_run() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    // Default budgets (6), modes (3) and runs (10): 180 rows.
    let full = TINY.replace("n_runs = 2\nbudgets = [1, 3]\n", "");
    let full_cfg = dir.path().join("full.toml");
    fs::write(&full_cfg, full).unwrap();
    let f = full_cfg.to_str().unwrap();
    ok(&["--config", c, "--out", "data", "synth"], dir.path());
    ok(
        &["--config", c, "--out", "pre", "pretrain", "--data", "data"],
        dir.path(),
    );
    ok(
        &[
            "--config",
            f,
            "--out",
            "semi",
            "eval-semi",
            "--data",
            "data",
            "--trunk",
            "pre/trunk.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(csv_rows(&dir.path().join("semi/semi_supervised.csv")), 180);
}

#[test]
fn written_config_reproduces_itself() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    ok(
        &[
            "--config", c, "--seed", "5", "--out", "first", "synth", "--users", "5",
        ],
        dir.path(),
    );
    let written = dir.path().join("first/config.toml");
    ok(
        &[
            "--config",
            written.to_str().unwrap(),
            "--out",
            "second",
            "synth",
        ],
        dir.path(),
    );
    let a = fs::read_to_string(&written).unwrap();
    let b = fs::read_to_string(dir.path().join("second/config.toml")).unwrap();
    assert_eq!(a, b);
    assert!(a.contains("seed = 5"));
    assert!(a.contains("n_users = 5"));
    assert_eq!(
        fs::read(dir.path().join("first/raw.wds")).unwrap(),
        fs::read(dir.path().join("second/raw.wds")).unwrap()
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        selfhar(&["no-such-command"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(selfhar(&["eval-semi"], dir.path()).status.code(), Some(2));
    assert_eq!(
        selfhar(&["synth", "--users", "many"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_input_exits_with_one_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = selfhar(
        &["--out", "run", "eval-semi", "--data", "absent"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent/train.wds"), "{err}");
    assert!(
        !dir.path().join("run").exists(),
        "failed run left its output directory"
    );
}

#[test]
fn non_empty_output_needs_overwrite() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "--out", "data", "synth"], dir.path());
    assert_eq!(
        selfhar(&["--config", c, "--out", "data", "synth"], dir.path())
            .status
            .code(),
        Some(1)
    );
    ok(
        &["--config", c, "--out", "data", "--overwrite", "synth"],
        dir.path(),
    );
}

#[test]
fn output_root_comes_from_the_environment() {
    let (dir, cfg) = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_selfhar"))
        .args(["--config", cfg.to_str().unwrap(), "synth"])
        .current_dir(dir.path())
        .env("SELFHAR_OUT", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("root/synth/train.wds").is_file());
}

#[test]
fn prepare_windows_a_csv_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("user_id,activity,timestamp,ax,ay,az\n");
    for u in 0..4 {
        for a in [1, 4] {
            for t in 0..200 {
                let v = ((t as f64) * 0.1 * a as f64).sin();
                csv.push_str(&format!("u{u},{a},{t},{v},{},{}\n", 0.5 * v, 1.0 - v));
            }
        }
    }
    fs::write(dir.path().join("rec.csv"), csv).unwrap();
    fs::write(dir.path().join("c.toml"), "[split]\nwindow_len = 50\n").unwrap();
    ok(
        &[
            "--config", "c.toml", "--out", "prep", "prepare", "--input", "rec.csv",
        ],
        dir.path(),
    );
    let classes: Vec<i64> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("prep/classes.json")).unwrap())
            .unwrap();
    assert_eq!(classes, vec![1, 4]);
    let split: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("prep/split.json")).unwrap())
            .unwrap();
    // 200 samples, window 50, overlap 0.5: 7 windows per recording
    assert_eq!(split["test_users"].as_array().unwrap().len(), 1);
    assert_eq!(split["windows"]["test"], 14);
    assert_eq!(split["windows"]["train"], 42);
}

#[test]
fn analysis_commands_write_their_tables() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    let p = dir.path();
    ok(
        &["--config", c, "--out", "data", "synth", "--windows", "40"],
        p,
    );
    ok(
        &["--config", c, "--out", "pre", "pretrain", "--data", "data"],
        p,
    );
    ok(
        &[
            "--config",
            c,
            "--out",
            "clf",
            "train",
            "--data",
            "data",
            "--trunk",
            "pre/trunk.ckpt",
            "--mode",
            "finetune_conv_c",
        ],
        p,
    );
    ok(
        &[
            "--config",
            c,
            "--out",
            "emb",
            "export-embeddings",
            "--data",
            "data",
            "--model",
            "clf/classifier.ckpt",
        ],
        p,
    );
    let emb = fs::read_to_string(p.join("emb/embeddings.csv")).unwrap();
    let header = emb.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 100);
    let test_windows = 40 * 3;
    assert_eq!(emb.lines().count() - 1, test_windows);

    ok(
        &[
            "--config",
            c,
            "--out",
            "sal",
            "analyze-saliency",
            "--data",
            "data",
            "--model",
            "clf/classifier.ckpt",
            "--max-windows",
            "4",
        ],
        p,
    );
    let sal = fs::read_to_string(p.join("sal/saliency.csv")).unwrap();
    assert_eq!(sal.lines().count(), 5);
    assert_eq!(sal.lines().next().unwrap().split(',').count(), 2 + 64);

    ok(
        &[
            "--config",
            c,
            "--out",
            "sv",
            "analyze-svcca",
            "--data",
            "data",
            "--model-a",
            "clf/classifier.ckpt",
            "--model-b",
            "pre/tpn.ckpt",
        ],
        p,
    );
    let grid = fs::read_to_string(p.join("sv/svcca.csv")).unwrap();
    assert_eq!(grid.lines().count(), 5);
    // Frozen blocks are shared, so the conv_a pair matches exactly.
    let conv_a: f64 = grid
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(conv_a > 0.999, "{grid}");
}

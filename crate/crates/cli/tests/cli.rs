use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
workers = 2

[env]
horizon = 6
mean_batch_size = 8.0

[gen]
episodes = 4

[model]
embed_dim = 8
layers = 1
heads = 1
context = 4

[train]
epochs = 2
lr = 1e-3

[dpo]
epochs = 1

[eval]
episodes = 2
"#;

fn jdbp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jdbp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_project() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("jdbp.toml"), TINY).unwrap();
    dir
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--config", "jdbp.toml", "--out", "run"];
    full.extend_from_slice(args);
    let out = jdbp(dir, &full);
    assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    out
}

#[test]
fn help_marks_published_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = jdbp(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("dpo.beta = 0.15 (published default)"), "{text}");
    assert!(text.contains("train.lr = 1e-4 (published default)"));
    for sub in ["gen", "train", "dpo", "eval", "ablate", "oracle-verify", "report"] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&jdbp(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&jdbp(dir.path(), &["train", "--variant", "bogus"])), 1);
    assert_eq!(code(&jdbp(dir.path(), &["eval"])), 1);
}

#[test]
fn config_errors_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let out = jdbp(dir.path(), &["--config", "bad.toml", "gen"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train.batch_size"), "{}", stderr(&out));

    fs::write(dir.path().join("typo.toml"), "[dpo]\nbeta = 0.1\nbta = 2\n").unwrap();
    let out = jdbp(dir.path(), &["--config", "typo.toml", "gen"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    assert_eq!(code(&jdbp(dir.path(), &["--config", "missing.toml", "gen"])), 1);
}

#[test]
fn oracle_verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = jdbp(dir.path(), &["oracle-verify", "--instances", "60"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("60 of 60 instances verified"));
    assert_eq!(code(&jdbp(dir.path(), &["oracle-verify", "--max-items", "99"])), 1);
}

#[test]
fn missing_inputs_exit_three() {
    let dir = tiny_project();
    let out = jdbp(dir.path(), &["--config", "jdbp.toml", "--out", "run", "train"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("jdbp gen"));
}

#[test]
fn corrupt_checkpoint_exits_three() {
    let dir = tiny_project();
    fs::write(dir.path().join("junk.ckpt"), b"JDBPCKPT not really").unwrap();
    let out = jdbp(dir.path(), &["--config", "jdbp.toml", "eval", "--checkpoint", "junk.ckpt"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn full_workflow() {
    let dir = tiny_project();
    let d = dir.path();
    ok(d, &["--quiet", "gen"]);
    let data = d.join("run/data");
    let manifest = fs::read(data.join("manifest.json")).unwrap();
    let records = fs::read(data.join("stage1.jsonl")).unwrap();
    ok(d, &["--quiet", "gen"]);
    assert_eq!(fs::read(data.join("manifest.json")).unwrap(), manifest);
    assert_eq!(fs::read(data.join("stage1.jsonl")).unwrap(), records);

    for variant in ["stage1", "his-rtg", "no-gca"] {
        ok(d, &["--quiet", "train", "--variant", variant]);
    }
    let ckpts = d.join("run/checkpoints");
    let stage1 = fs::read(ckpts.join("stage1.ckpt")).unwrap();
    ok(d, &["--quiet", "train"]);
    assert_eq!(fs::read(ckpts.join("stage1.ckpt")).unwrap(), stage1);
    let loss = fs::read_to_string(ckpts.join("stage1_loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,mean_loss,grad_norm\n"), "{loss}");
    assert_eq!(loss.lines().count(), 3);

    ok(d, &["--quiet", "dpo"]);
    assert!(ckpts.join("full.ckpt").is_file());
    assert!(fs::read_to_string(ckpts.join("full_dpo.csv")).unwrap().starts_with("epoch,mean_loss,mean_gap_to_preferred"));

    let out = ok(d, &["ablate"]);
    let table = String::from_utf8_lossy(&out.stdout);
    for label in ["pid", "stage1", "full", "his_rtg", "no_gca", "stage1_ge_pid"] {
        assert!(table.contains(label), "{table}");
    }
    let reports = d.join("run/reports/ablation");
    let rows = fs::read_to_string(reports.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 5 * 2);

    let summary = fs::read(reports.join("summary.csv")).unwrap();
    ok(d, &["--quiet", "report"]);
    assert_eq!(fs::read(reports.join("summary.csv")).unwrap(), summary);

    ok(d, &["--quiet", "eval", "--checkpoint", "run/checkpoints/full.ckpt"]);
    let rows = fs::read_to_string(d.join("run/reports/eval/rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2);
    assert!(rows.contains("\nfull,"));
}

#[test]
fn seed_flag_changes_the_dataset() {
    let dir = tiny_project();
    let d = dir.path();
    ok(d, &["--quiet", "gen"]);
    let a = fs::read(d.join("run/data/stage1.jsonl")).unwrap();
    ok(d, &["--quiet", "--seed", "7", "gen"]);
    let b = fs::read(d.join("run/data/stage1.jsonl")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn checkpoint_under_another_shape_is_rejected() {
    let dir = tiny_project();
    let d = dir.path();
    ok(d, &["--quiet", "gen"]);
    ok(d, &["--quiet", "train"]);
    fs::write(d.join("wide.toml"), TINY.replace("embed_dim = 8", "embed_dim = 16")).unwrap();
    let out = jdbp(d, &["--config", "wide.toml", "--out", "run", "eval", "--checkpoint", "run/checkpoints/stage1.ckpt"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("shape mismatch"), "{}", stderr(&out));
}

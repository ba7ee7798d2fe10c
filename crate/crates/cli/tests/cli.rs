use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MINI: &str = r#"
name = "mini"
seed = 2
method = "wa"

[dataset]
kind = "synthetic"
classes = 4
train_per_class = 10
test_per_class = 4
size = 16

[protocol]
kind = "lfs"
num_tasks = 2

[budget]
reference_images = 4

[compression.fixed]
method = "jpeg"
quality = 40

[train]
backbone = "resnet8"
base_width = 4
epochs_first = 1
epochs_incremental = 1
milestones = []
batch_size = 8
"#;

fn cilcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cilcomp")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, format!("output_dir = {:?}\n{body}", dir.join("out").display().to_string())).unwrap();
    path.display().to_string()
}

#[test]
fn missing_config_exits_with_2() {
    let out = cilcomp(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_override_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINI);
    for set in ["protocol.num_tasks=3", "budget", "method=\"lwf\""] {
        let out = cilcomp(&["prepare", "--config", &cfg, "--set", set]);
        assert_eq!(out.status.code(), Some(2), "{set}");
    }
}

#[test]
fn unreadable_dataset_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &MINI.replace("kind = \"synthetic\"", "kind = \"folder\"\nroot = \"/nonexistent\"")
        .replace("classes = 4\ntrain_per_class = 10\ntest_per_class = 4\nsize = 16\n", ""));
    let out = cilcomp(&["prepare", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINI);
    let out = cilcomp(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out");
    for f in ["config.toml", "metrics.jsonl", "summary.json", "summary.md", "accuracy.svg", "steps/step1/buffer.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join("PARTIAL").exists());
    let summary = fs::read_to_string(run.join("summary.md")).unwrap();
    assert!(summary.contains("Avg") && summary.contains("Last"));

    let out = cilcomp(&["report", "--config", &cfg]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 of 2 steps"));
}

#[test]
fn domain_shift_requires_exemplar_scope() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINI);
    let out = cilcomp(&["domain-shift", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let out = cilcomp(&["domain-shift", "--config", &cfg, "--set", "compression.scope=\"exemplars_only\""]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/domain_shift.csv").exists());
}

#[test]
fn rd_curve_and_selection() {
    let dir = tempfile::tempdir().unwrap();
    let body = MINI.replace("[compression.fixed]\nmethod = \"jpeg\"\nquality = 40\n", "")
        + "\n[[compression.candidates]]\nmethod = \"jpeg\"\nqualities = [20, 60]\n";
    let cfg = write_config(dir.path(), &body);
    let out = cilcomp(&["rd-curve", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
    let out = cilcomp(&["select-codec", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("selected jpeg-q"));
    for f in ["probe.csv", "probe.svg", "codec_scores.csv", "selection.json"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

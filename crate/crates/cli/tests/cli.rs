use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
train_sequences = 4
test_sequences = 2

[head]
steps = 40

[tokenizer]
enc_depth = 1
dec_depth = 1

[tokenizer_train]
steps = 12
batch_size = 4

[predictor]
depth = 1

[predictor_train]
steps = 6
batch_size = 2
k = 3

[eval]
k = 3

[sweep]
train_ks = [1, 2]
eval_ks = [1, 2]
"#;

struct Run {
    root: PathBuf,
    config: PathBuf,
    _tmp: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Run {
            root: tmp.path().join("out"),
            config,
            _tmp: tmp,
        }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_deltaworld"))
            .arg("--quiet")
            .arg("--out")
            .arg(&self.root)
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn checkpoint_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    read_dir_sorted(dir)
        .into_iter()
        .filter(|(n, _)| n == "manifest.json" || n.ends_with(".bin"))
        .collect()
}

#[test]
fn every_mode_runs_end_to_end() {
    let r = Run::new();
    r.ok(&["gen-data"]);
    r.ok(&["train-tokenizer", "--mode", "frame"]);
    r.ok(&["train-tokenizer", "--mode", "delta"]);
    for mode in ["disc-spatial", "bom-spatial", "bom-frame", "bom-delta", "disc-delta"] {
        r.ok(&["train-predictor", "--mode", mode]);
        r.ok(&["eval", "--mode", mode]);
        let eval = r.root.join(format!("eval-{mode}"));
        for f in ["metrics.csv", "bars.csv", "summary.json"] {
            assert!(eval.join(f).is_file(), "{mode}: missing {f}");
        }
        let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("# config_hash="));
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("summary.json")).unwrap()).unwrap();
        assert!(summary["config_hash"].is_string());
    }
    r.ok(&["flops"]);
    let flops = fs::read_to_string(r.root.join("flops/flops.csv")).unwrap();
    assert!(flops.contains("delta") && flops.contains("spatial"));
    r.ok(&["sweep"]);
    let heat = r.root.join("sweep-bom-delta/heatmap.csv");
    r.ok(&["plot", heat.to_str().unwrap(), r.root.join("eval-bom-delta/bars.csv").to_str().unwrap()]);
    let pngs = fs::read_dir(r.root.join("plots"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 2);
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let straight = Run::new();
    straight.ok(&["gen-data"]);
    straight.ok(&["train-tokenizer", "--mode", "delta"]);
    straight.ok(&["train-predictor", "--mode", "bom-delta"]);

    let resumed = Run::new();
    resumed.ok(&["gen-data"]);
    resumed.ok(&["--set", "tokenizer_train.steps=5", "train-tokenizer", "--mode", "delta"]);
    resumed.ok(&["train-tokenizer", "--mode", "delta", "--resume"]);
    resumed.ok(&["--set", "predictor_train.steps=2", "train-predictor", "--mode", "bom-delta"]);
    resumed.ok(&["train-predictor", "--mode", "bom-delta", "--resume"]);

    for dir in ["tokenizer-delta", "predictor-bom-delta"] {
        let a = checkpoint_files(&straight.root.join(dir));
        let b = checkpoint_files(&resumed.root.join(dir));
        assert!(!a.is_empty());
        assert!(a == b, "{dir}: resumed checkpoint differs");
        // the stamp line carries the hash of the first run's config
        let log = |r: &Run| {
            let s = fs::read_to_string(r.root.join(dir).join("train_log.csv")).unwrap();
            s.lines().skip(1).map(str::to_owned).collect::<Vec<_>>()
        };
        assert_eq!(log(&straight), log(&resumed), "{dir}: logs differ");
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = Run::new();
    let b = Run::new();
    for r in [&a, &b] {
        r.ok(&["--seed", "5", "gen-data"]);
        r.ok(&["--seed", "5", "train-tokenizer", "--mode", "delta"]);
    }
    for dir in ["data/train", "data/head", "tokenizer-delta"] {
        assert!(read_dir_sorted(&a.root.join(dir)) == read_dir_sorted(&b.root.join(dir)), "{dir} differs");
    }
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let r = Run::new();
    let out = r.cmd(&["train-predictor", "--mode", "bom-pixels"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("error: kind=usage"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn sweep_rejects_regression_modes() {
    let r = Run::new();
    let out = r.cmd(&["sweep", "--mode", "disc-delta"]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error: kind=usage"), "{}", stderr(&out));
}

#[test]
fn missing_inputs_name_the_path() {
    let r = Run::new();
    let out = r.cmd(&["train-tokenizer", "--mode", "delta"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.starts_with("error: kind="), "{err}");
    assert!(err.contains("toyvfm"), "{err}");

    let gone = r.root.join("nowhere/bars.csv");
    let out = r.cmd(&["plot", gone.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nowhere/bars.csv"), "{}", stderr(&out));
}

#[test]
fn bad_overrides_are_rejected() {
    let r = Run::new();
    let out = r.cmd(&["--set", "predictor_train.stepz=3", "flops"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("stepz"), "{}", stderr(&out));
    let out = r.cmd(&["--set", "no-equals-sign", "flops"]);
    assert!(stderr(&out).starts_with("error: kind=usage"), "{}", stderr(&out));
}

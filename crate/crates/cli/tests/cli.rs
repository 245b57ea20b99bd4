use std::path::Path;
use std::process::{Command, Output};

use xeroalign_core::data::{Corpus, Split};
use xeroalign_core::training::{evaluate, load_checkpoint, EvalReport};

const SPEC: &str = r#"
seed = 3
train_size = 48
dev_size = 12
test_size = 12
cognate_rate = 0.4
max_len = 16
targets = [{ name = "xa", word_order = "none" }, { name = "xb", word_order = "reverse" }]
[[intents]]
name = "alarm"
templates = ["wake me at [time]", "alarm for [time] on [day]", "set an alarm [day]"]
[[intents]]
name = "call"
templates = ["call [who] now", "ring [who] at [time]", "phone [who] [day]"]
[[intents]]
name = "rain"
templates = ["will it rain [day]", "is rain expected at [time]", "rain forecast for [day]", "any rain [day] at [time]"]
[slots]
time = ["seven", "half past six", "noon", "ten", "eleven", "nine"]
day = ["monday", "next friday", "tomorrow", "sunday"]
who = ["mom", "my boss", "bob", "the office"]
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xeroalign")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
    dir
}

fn write_run_config(dir: &Path, name: &str, train: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(
        &p,
        format!("[data]\nspec = \"spec.toml\"\n\n[train]\nepochs = 2\nbatch_size = 16\nmax_lr = 0.003\n{train}"),
    )
    .unwrap();
    p
}

fn read_report(dir: &Path) -> EvalReport {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_is_byte_reproducible() {
    let w = workspace();
    let (a, b) = (w.path().join("a"), w.path().join("b"));
    let spec = w.path().join("spec.toml");
    ok(&["gen-data", "--config", s(&spec), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&spec), "--out", s(&b)]);
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 12, "{names:?}");
    assert!(names.contains(&"train.xb.jsonl".to_string()));
    assert!(names.contains(&"test.stats.json".to_string()));
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
    let c = w.path().join("c");
    ok(&["gen-data", "--config", s(&spec), "--seed", "4", "--out", s(&c)]);
    assert_ne!(
        std::fs::read(a.join("train.xa.jsonl")).unwrap(),
        std::fs::read(c.join("train.xa.jsonl")).unwrap()
    );
}

#[test]
fn unknown_slot_is_a_config_error_naming_the_template() {
    let w = workspace();
    let bad = SPEC.replace("call [who] now", "call [person] now");
    let spec = w.path().join("bad.toml");
    std::fs::write(&spec, bad).unwrap();
    let out = bin(&["gen-data", "--config", s(&spec), "--out", s(&w.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("call [person] now"), "{err}");
}

#[test]
fn argument_errors_and_help_exit_codes() {
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["run", "--out", "x"]).status.code(), Some(1));
    let w = workspace();
    let missing = w.path().join("nope.toml");
    let out = bin(&["run", "--config", s(&missing), "--out", s(&w.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = write_run_config(w.path(), "bad.toml", "mode = \"zero_shot\"\nbogus_key = 1\n");
    assert_eq!(bin(&["run", "--config", s(&cfg), "--out", s(&w.path().join("r"))]).status.code(), Some(1));
}

#[test]
fn run_writes_a_reloadable_run_directory() {
    let w = workspace();
    let cfg = write_run_config(w.path(), "run.toml", "mode = \"xeroalign\"\nseed = 0\n");
    let out = w.path().join("run");
    ok(&["run", "--config", s(&cfg), "--seed", "7", "--out", s(&out)]);
    for f in ["config.toml", "history.csv", "steps.csv", "report.json", "checkpoint/manifest.json", "checkpoint/tensors.bin"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let echo = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echo.contains("seed = 7"), "{echo}");

    let report = read_report(&out);
    assert_eq!(report.split, Split::Test);
    assert_eq!(report.languages.len(), 2);

    let gen = w.path().join("data");
    ok(&["gen-data", "--config", s(&w.path().join("spec.toml")), "--out", s(&gen)]);
    let corpus = Corpus::load_dir(&gen).unwrap();
    let ck = load_checkpoint(out.join("checkpoint")).unwrap();
    assert_eq!(ck.config.seed, 7);
    assert_eq!(evaluate(&ck.model, &corpus, Split::Test).unwrap(), report);
}

#[test]
fn zero_lambda_run_matches_zero_shot() {
    let w = workspace();
    let a = write_run_config(w.path(), "a.toml", "mode = \"xeroalign\"\nlambda = 0.0\nseed = 1\n");
    let b = write_run_config(w.path(), "b.toml", "mode = \"zero_shot\"\nseed = 1\n");
    ok(&["run", "--config", s(&a), "--out", s(&w.path().join("a"))]);
    ok(&["run", "--config", s(&b), "--out", s(&w.path().join("b"))]);
    assert_eq!(read_report(&w.path().join("a")), read_report(&w.path().join("b")));
    assert_eq!(
        std::fs::read(w.path().join("a/checkpoint/tensors.bin")).unwrap(),
        std::fs::read(w.path().join("b/checkpoint/tensors.bin")).unwrap()
    );
}

#[test]
fn matrix_aggregates_modes_over_seeds_and_report_plots_runs() {
    let w = workspace();
    let cfg = w.path().join("matrix.toml");
    std::fs::write(
        &cfg,
        r#"seeds = [0, 1, 2]
[data]
spec = "spec.toml"
[train]
epochs = 2
batch_size = 16
max_lr = 0.003
[[cells]]
mode = "zero_shot"
[[cells]]
mode = "xeroalign"
[[cells]]
mode = "target"
"#,
    )
    .unwrap();
    let out = w.path().join("m");
    ok(&["matrix", "--config", s(&cfg), "--out", s(&out), "--jobs", "2"]);
    let runs: Vec<_> = std::fs::read_dir(out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 9);
    for f in ["results.csv", "results.json", "results.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r["seeds"].as_array().unwrap().len(), 3);
        assert_eq!(r["average"]["intent_accuracy"]["n"], 3);
    }
    assert!(table["relative_improvement"]["tiny"].is_number());
    let txt = std::fs::read_to_string(out.join("results.txt")).unwrap();
    assert!(txt.contains("tiny/xeroalign") && txt.contains(" / "), "{txt}");
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3);

    ok(&["report", "--out", s(&out)]);
    let one = out.join("runs/tiny__xeroalign__seed0");
    for f in ["losses.svg", "accuracy.svg", "alignment.svg", "summary.json"] {
        let body = std::fs::read_to_string(one.join(f)).unwrap();
        assert!(!body.is_empty(), "{f}");
    }
    assert!(std::fs::read_to_string(one.join("losses.svg")).unwrap().starts_with("<svg"));

    std::fs::remove_file(one.join("history.csv")).unwrap();
    let out2 = bin(&["report", "--out", s(&out)]);
    assert_eq!(out2.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out2.stderr).contains("history.csv"));
}

#[test]
fn grid_has_baseline_and_one_row_per_target() {
    let w = workspace();
    let cfg = w.path().join("grid.toml");
    std::fs::write(
        &cfg,
        "seeds = [0]\n[data]\nspec = \"spec.toml\"\n[train]\nepochs = 2\nbatch_size = 16\nmax_lr = 0.003\n",
    )
    .unwrap();
    let out = w.path().join("g");
    ok(&["grid-one-language", "--config", s(&cfg), "--out", s(&out)]);
    let grid: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("grid.json")).unwrap()).unwrap();
    let labels: Vec<&str> = grid["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["zero_shot", "align-xa", "align-xb"]);
    assert!(out.join("grid.csv").exists() && out.join("grid.txt").exists());
}

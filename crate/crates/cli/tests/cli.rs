use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FAST: &str = r#"
seed = 5

[data]
plant = "stirred-tank"
scenario = "balanced"
train_counts = [120, 120]
test_counts = [60, 60]

[model]
hidden = 32
embed_dim = 16

[train]
stage1_epochs = 8
stage2_epochs = 10
"#;

fn sccam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sccam")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in {text}"))
}

#[test]
fn generate_is_deterministic_and_follows_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let a = sccam(&["generate", "--scenario", "long-tail", "--seed", "3", "--out", "a"], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    let text = stdout(&a);
    assert_eq!(value(&text, "train_counts"), "780,20");
    assert_eq!(value(&text, "test_counts"), "200,200");
    let b = sccam(&["generate", "--scenario", "long-tail", "--seed", "3", "--out", "b"], dir.path());
    assert_eq!(value(&stdout(&b), "manifest_checksum"), value(&text, "manifest_checksum"));
    let manifest = fs::read_to_string(dir.path().join("a/manifest.txt")).unwrap();
    assert_eq!(manifest, fs::read_to_string(dir.path().join("b/manifest.txt")).unwrap());
    assert!(manifest.contains("variables=level,temperature,steam,cold_water,hot_water\n"));
    assert!(manifest.contains("fault.1=kind:step variable:steam magnitude:3"));
    let header = fs::read_to_string(dir.path().join("a/train/class_1.csv")).unwrap();
    assert!(header.starts_with("level,temperature,steam,cold_water,hot_water\n"));
}

#[test]
fn benchmark_plant_has_eleven_classes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[data]\nplant = \"benchmark-plant\"\ntrain_counts = [30, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3]\ntest_counts = [5, 5, 5, 5, 5, 5, 5, 5, 5, 5, 5]\n").unwrap();
    let o = sccam(&["generate", "--config", "c.toml", "--scenario", "imbalanced", "--out", "d"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "classes"), "11");
    let manifest = fs::read_to_string(dir.path().join("d/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("file.train.")).count(), 11);
    assert_eq!(manifest.lines().filter(|l| l.starts_with("fault.")).count(), 10);
}

#[test]
fn configuration_and_path_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = sccam(&["train", "--data", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));

    fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = sccam(&["generate", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = sccam(&["generate", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = sccam(&["generate", "--scenario", "skewed"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = sccam(&["evaluate", "--checkpoint", "none.ckpt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_evaluate_explain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fs::write(cwd.join("fast.toml"), FAST).unwrap();
    let o = sccam(&["generate", "--config", "fast.toml"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = sccam(&["train", "--config", "fast.toml", "--out", "run1"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let accuracy: f64 = value(&text, "accuracy").parse().unwrap();
    assert!(accuracy >= 0.99, "{text}");

    // Identical config and seed give an identical report.
    let o = sccam(&["train", "--config", "fast.toml", "--out", "run2"], cwd);
    assert!(o.status.success());
    let r1 = fs::read(cwd.join("run1/report.txt")).unwrap();
    assert_eq!(r1, fs::read(cwd.join("run2/report.txt")).unwrap());
    let report = String::from_utf8(r1).unwrap();
    assert!(report.starts_with("sccam-report 1\n"));
    for key in ["train.seed = 5", "data.scenario = balanced", "model.hidden = 32", "train.stage1_epochs = 8"] {
        assert!(report.contains(key), "{key} missing from report");
    }
    let o = sccam(&["train", "--config", "fast.toml", "--scenario", "long-tail", "--out", "run3"], cwd);
    assert_eq!(o.status.code(), Some(2));

    let o = sccam(&["evaluate", "--checkpoint", "run1/model.ckpt", "--out", "eval"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "accuracy"), value(&text, "accuracy"));
    assert!(cwd.join("eval/report.txt").is_file());

    let o = sccam(&["explain", "--checkpoint", "run1/model.ckpt", "--scope", "global", "--class", "1", "--out", "x"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    let verdict = stdout(&o);
    assert!(verdict.starts_with("root_cause=steam rank=[steam,"), "{verdict}");
    let csv = fs::read_to_string(cwd.join(value(&verdict, "csv"))).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(3).unwrap().starts_with("steam,"));
    let pgm = fs::read(cwd.join(value(&verdict, "pgm"))).unwrap();
    assert!(pgm.starts_with(b"P5\n# min="));

    let o = sccam(&["explain", "--checkpoint", "run1/model.ckpt", "--scope", "local", "--class", "1", "--sample-index", "3", "--out", "x"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "label"), "1");

    let o = sccam(&["explain", "--checkpoint", "run1/model.ckpt", "--scope", "local", "--class", "1", "--sample-index", "60", "--out", "x"], cwd);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("out of range"), "{}", stderr(&o));
    let o = sccam(&["explain", "--checkpoint", "run1/model.ckpt", "--class", "7", "--out", "x"], cwd);
    assert_eq!(o.status.code(), Some(3));

    let mut ckpt = fs::read(cwd.join("run1/model.ckpt")).unwrap();
    ckpt.truncate(ckpt.len() / 2);
    fs::write(cwd.join("broken.ckpt"), ckpt).unwrap();
    let o = sccam(&["evaluate", "--checkpoint", "broken.ckpt", "--data", "run1/dataset.bin"], cwd);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn parallel_seeds_write_separate_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let quick = FAST.replace("stage1_epochs = 8", "stage1_epochs = 1").replace("stage2_epochs = 10", "stage2_epochs = 1");
    fs::write(cwd.join("q.toml"), quick).unwrap();
    assert!(sccam(&["generate", "--config", "q.toml"], cwd).status.success());
    let o = sccam(&["train", "--config", "q.toml", "--parallel-seeds", "2", "--out", "sweep"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in [5, 6] {
        let report = fs::read_to_string(cwd.join(format!("sweep/seed-{seed}/report.txt"))).unwrap();
        assert!(report.contains(&format!("train.seed = {seed}\n")));
    }
}

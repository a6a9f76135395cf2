use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deeptake"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DEEPTAKE_CONFIG")
        .env_remove("DEEPTAKE_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Six subjects, one trial each, with features built.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.json"), r#"{"n_subjects": 6, "trials_per_subject": 1}"#).unwrap();
        fs::write(dir.path().join("quick.json"), r#"{"network": {"max_epochs": 20}}"#).unwrap();
        ok(&["generate", "--spec", "spec.json", "--out", "data", "--seed", "3"], dir.path());
        ok(&["features", "--data", "data", "--out", "features.csv"], dir.path());
        Fixture { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn train(&self, task: &str, out: &str) -> Output {
        ok(
            &["train", "--features", "features.csv", "--events", "data/events.csv", "--task", task, "--config", "quick.json", "--seed", "1", "--out", out],
            self.path(),
        )
    }

    fn bundle(&self, out: &str) -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(self.path().join(out).join("model.json")).unwrap()).unwrap()
    }
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_and_rejects_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("spec.json"), r#"{"n_subjects": 2, "trials_per_subject": 1, "seed": 8}"#).unwrap();
    ok(&["generate", "--spec", "spec.json", "--out", "a"], p);
    ok(&["generate", "--spec", "spec.json", "--out", "b"], p);
    let (a, b) = (files_under(&p.join("a")), files_under(&p.join("b")));
    assert!(a.iter().any(|(name, _)| name.ends_with("events.csv")));
    assert_eq!(a, b);

    fs::write(p.join("broken.json"), "{\"n_subjects\": ").unwrap();
    let out = run(&["generate", "--spec", "broken.json", "--out", "c"], p);
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
    assert!(!p.join("c").exists());

    fs::write(p.join("zero.json"), r#"{"n_subjects": 0}"#).unwrap();
    assert_eq!(code(&run(&["generate", "--spec", "zero.json", "--out", "d"], p)), 2);
    assert_eq!(code(&run(&["generate", "--spec", "spec.json"], p)), 2);
}

#[test]
fn full_study_has_765_feature_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate", "--out", "data"], dir.path());
    ok(&["features", "--data", "data", "--out", "f.csv"], dir.path());
    let text = fs::read_to_string(dir.path().join("f.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 17 * 3 * 15);
}

#[test]
fn missing_channel_is_a_warning_and_a_dropped_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("spec.json"), r#"{"n_subjects": 2, "trials_per_subject": 1}"#).unwrap();
    ok(&["generate", "--spec", "spec.json", "--out", "data"], p);
    let mut removed = 0;
    for (name, _) in files_under(&p.join("data")) {
        if name.to_string_lossy().contains("gsr") {
            fs::remove_file(p.join("data").join(name)).unwrap();
            removed += 1;
        }
    }
    assert!(removed > 0);
    let out = ok(&["features", "--data", "data", "--out", "f.csv"], p);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing channel file"), "{stderr}");
    let header = fs::read_to_string(p.join("f.csv")).unwrap().lines().next().unwrap().to_string();
    assert!(!header.contains("gsr_peak_count"));
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("f.meta.json")).unwrap()).unwrap();
    let dropped = sidecar["dropped"].as_array().unwrap();
    assert!(dropped.iter().any(|d| d["name"] == "gsr_peak_count" && !d["reason"].is_null()));
}

#[test]
fn output_width_follows_the_task() {
    let f = Fixture::new();
    f.train("intention", "intention");
    f.train("time5", "time5");
    let dims = |out: &str| f.bundle(out)["layer_dims"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect::<Vec<_>>();
    assert_eq!(dims("intention")[1..], [23, 14, 8, 2]);
    assert_eq!(dims("time5")[1..], [23, 14, 8, 5]);
    for file in ["model.json", "train_report.json", "split.json"] {
        assert!(f.path().join("intention").join(file).exists(), "{file}");
    }
}

#[test]
fn training_twice_gives_identical_bytes() {
    let f = Fixture::new();
    f.train("time3", "a");
    f.train("time3", "b");
    for file in ["model.json", "train_report.json", "split.json"] {
        assert_eq!(fs::read(f.path().join("a").join(file)).unwrap(), fs::read(f.path().join("b").join(file)).unwrap(), "{file}");
    }
}

#[test]
fn too_few_subjects_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("spec.json"), r#"{"n_subjects": 2, "trials_per_subject": 1}"#).unwrap();
    ok(&["generate", "--spec", "spec.json", "--out", "data"], p);
    ok(&["features", "--data", "data", "--out", "f.csv"], p);
    let out = run(&["train", "--features", "f.csv", "--events", "data/events.csv", "--task", "time3", "--out", "m"], p);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!p.join("m").exists());
}

#[test]
fn eval_writes_reports_and_merges_external_rows() {
    let f = Fixture::new();
    f.train("time3", "m");
    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path().join("m/split.json")).unwrap()).unwrap();
    let test_ids: Vec<&str> = split["test"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();

    let predictions = f.path().join("predictions.csv");
    ok(&["predict", "--model", "m/model.json", "--features", "features.csv", "--out", "predictions.csv"], f.path());
    let names = ["low", "medium", "high"];
    let labels: std::collections::BTreeMap<String, usize> = fs::read_to_string(&predictions)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut cells = l.split(',');
            let id = cells.next().unwrap().to_string();
            let name = cells.next().unwrap();
            let class = names.iter().position(|n| *n == name).unwrap();
            (id, class)
        })
        .collect();
    let mut same = String::from("event_id,predicted_class\n");
    for id in &test_ids {
        same.push_str(&format!("{id},{}\n", labels[*id]));
    }
    fs::write(f.path().join("echo.csv"), same).unwrap();

    let out = ok(
        &["eval", "--model", "m/model.json", "--features", "features.csv", "--events", "data/events.csv", "--out", "ev", "--baseline-preds", "echo.csv", "--with-baselines"],
        f.path(),
    );
    for file in ["report.json", "roc.csv", "confusion.csv", "comparison.txt"] {
        assert!(f.path().join("ev").join(file).exists(), "{file}");
    }
    let table = fs::read_to_string(f.path().join("ev/comparison.txt")).unwrap();
    assert_eq!(table, String::from_utf8_lossy(&out.stdout));
    let line = |name: &str| table.lines().find(|l| l.contains(name)).unwrap_or_else(|| panic!("no {name} row")).to_string();
    let (deeptake, echo) = (line("DeepTake"), line("echo"));
    // The echo file repeats the model's predictions, so both rows score alike.
    assert_eq!(deeptake.split('|').nth(2), echo.split('|').nth(2));
    line("Logistic Regression");
    line("RF");
}

#[test]
fn perfect_external_predictions_score_one() {
    let f = Fixture::new();
    f.train("intention", "m");
    let events = fs::read_to_string(f.path().join("data/events.csv")).unwrap();
    let header: Vec<&str> = events.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (id, alarm, incident, takeover) = (col("event_id"), col("t_alarm"), col("t_incident"), col("t_takeover"));
    let mut perfect = String::from("event_id,predicted_class\n");
    for line in events.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let tk = cells[takeover]
            .parse::<f64>()
            .map(|t| cells[alarm].parse::<f64>().unwrap() <= t && t < cells[incident].parse::<f64>().unwrap())
            .unwrap_or(false);
        perfect.push_str(&format!("{},{}\n", cells[id], tk as usize));
    }
    fs::write(f.path().join("perfect.csv"), perfect).unwrap();
    ok(
        &["eval", "--model", "m/model.json", "--features", "features.csv", "--events", "data/events.csv", "--out", "ev", "--baseline-preds", "oracle=perfect.csv"],
        f.path(),
    );
    let table = fs::read_to_string(f.path().join("ev/comparison.txt")).unwrap();
    let oracle = table.lines().find(|l| l.contains("oracle")).unwrap();
    assert_eq!(oracle.split('|').nth(2).unwrap().trim(), "1.00");
}

#[test]
fn kfold_reports_per_fold_and_mean() {
    let f = Fixture::new();
    f.train("intention", "m");
    ok(
        &["eval", "--model", "m/model.json", "--features", "features.csv", "--events", "data/events.csv", "--out", "cv", "--folds", "3"],
        f.path(),
    );
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path().join("cv/kfold_report.json")).unwrap()).unwrap();
    let folds = report["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 3);
    let mean = folds.iter().map(|f| f["report"]["accuracy"].as_f64().unwrap()).sum::<f64>() / 3.0;
    assert!((mean - report["mean_accuracy"].as_f64().unwrap()).abs() < 1e-12);
    let rows: u64 = folds.iter().map(|f| f["test_rows"].as_u64().unwrap()).sum();
    assert_eq!(rows, 90);
}

#[test]
fn predict_realigns_columns_and_rejects_unknown_ones() {
    let f = Fixture::new();
    f.train("time3", "m");
    let text = fs::read_to_string(f.path().join("features.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    fs::write(f.path().join("one.csv"), format!("{}\n{}\n", lines[0], lines[1])).unwrap();
    let single = ok(&["predict", "--model", "m/model.json", "--features", "one.csv"], f.path());
    let single = String::from_utf8(single.stdout).unwrap();
    assert_eq!(single.lines().count(), 2);

    // Swap the last two feature columns everywhere.
    let swapped: String = lines
        .iter()
        .map(|l| {
            let mut cells: Vec<&str> = l.split(',').collect();
            let n = cells.len();
            cells.swap(n - 1, n - 2);
            cells.join(",") + "\n"
        })
        .collect();
    fs::write(f.path().join("swapped.csv"), &swapped).unwrap();
    let a = ok(&["predict", "--model", "m/model.json", "--features", "features.csv"], f.path());
    let b = ok(&["predict", "--model", "m/model.json", "--features", "swapped.csv"], f.path());
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with(single.lines().next().unwrap()));

    let renamed = text.replacen("velocity", "warp_factor", 1);
    fs::write(f.path().join("renamed.csv"), renamed).unwrap();
    let out = run(&["predict", "--model", "m/model.json", "--features", "renamed.csv"], f.path());
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

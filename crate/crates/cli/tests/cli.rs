use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crowdmushra_core::dataset::{Dataset, ScoreRow};
use crowdmushra_core::model::{BlockId, ConditionId, ExperimentId, ItemId, ListenerId, QuestionId, Role};
use tempfile::TempDir;

fn crowdmushra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdmushra"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A sample experiment scaffold in a temp dir with a small population.
fn scaffold(items: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    let o = crowdmushra(&["init", "--out", p(dir.path()), "--items", &items.to_string()]);
    assert!(o.status.success(), "{o:?}");
    let pop = fs::read_to_string(dir.path().join("population.toml")).unwrap();
    let pop = pop.replacen("count = 60", "count = 16", 1).replacen("count = 15", "count = 4", 1);
    fs::write(dir.path().join("population.toml"), pop).unwrap();
    dir
}

fn simulate(dir: &Path, out: &str, seed: u64) -> Output {
    crowdmushra(&[
        "simulate",
        "--config",
        p(&dir.join("experiment.toml")),
        "--manifest",
        p(&dir.join("manifest.csv")),
        "--population",
        p(&dir.join("population.toml")),
        "--seed",
        &seed.to_string(),
        "--out",
        p(&dir.join(out)),
    ])
}

#[test]
fn sample_config_validates() {
    let dir = TempDir::new().unwrap();
    assert!(crowdmushra(&["init", "--out", p(dir.path())]).status.success());
    let o = crowdmushra(&[
        "validate",
        "--config",
        p(&dir.path().join("experiment.toml")),
        "--manifest",
        p(&dir.path().join("manifest.csv")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(stdout(&o).contains("ok: 6 conditions, 40 items, 246 stimuli"), "{}", stdout(&o));
}

#[test]
fn init_refuses_to_overwrite() {
    let dir = TempDir::new().unwrap();
    assert!(crowdmushra(&["init", "--out", p(dir.path())]).status.success());
    let o = crowdmushra(&["init", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(crowdmushra(&["init", "--out", p(dir.path()), "--force"]).status.success());
}

#[test]
fn validate_reports_violations_with_failure_status() {
    let dir = TempDir::new().unwrap();
    assert!(crowdmushra(&["init", "--out", p(dir.path()), "--items", "4"]).status.success());
    let manifest = dir.path().join("manifest.csv");
    let text = fs::read_to_string(&manifest).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.contains("item03")).collect();
    fs::write(&manifest, kept.join("\n") + "\n").unwrap();
    let o = crowdmushra(&["validate", "--config", p(&dir.path().join("experiment.toml")), "--manifest", p(&manifest)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("violation:"), "{}", stdout(&o));
}

#[test]
fn partition_dry_run_prints_blocks() {
    let dir = TempDir::new().unwrap();
    assert!(crowdmushra(&["init", "--out", p(dir.path())]).status.success());
    let config = dir.path().join("experiment.toml");
    let o = crowdmushra(&["partition", "--config", p(&config), "--dry-run"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.contains(": 4 questions, 24 stimuli")).count(), 10, "{text}");
    assert!(text.contains("10 blocks, 40 items"));

    // neither --dry-run nor --out
    assert_eq!(crowdmushra(&["partition", "--config", p(&config)]).status.code(), Some(2));

    let json = dir.path().join("blocks.json");
    assert!(crowdmushra(&["partition", "--config", p(&config), "--out", p(&json)]).status.success());
    let blocks: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(blocks.as_array().unwrap().len(), 10);
}

#[test]
fn simulate_is_byte_identical_per_seed() {
    let dir = scaffold(8);
    assert!(simulate(dir.path(), "a", 7).status.success());
    assert!(simulate(dir.path(), "b", 7).status.success());
    for f in ["raw.csv", "clean.csv", "removals.csv", "objective.csv", "report.json", "events.jsonl"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    assert!(simulate(dir.path(), "c", 8).status.success());
    assert_ne!(
        fs::read(dir.path().join("a/raw.csv")).unwrap(),
        fs::read(dir.path().join("c/raw.csv")).unwrap()
    );
    // an existing event log is never appended to by a second campaign
    assert_eq!(simulate(dir.path(), "a", 7).status.code(), Some(1));
}

#[test]
fn screen_reproduces_simulated_clean_export() {
    let dir = scaffold(8);
    assert!(simulate(dir.path(), "sim", 3).status.success());
    let sim = dir.path().join("sim");
    let o = crowdmushra(&[
        "screen",
        "--raw",
        p(&sim.join("raw.csv")),
        "--config",
        p(&dir.path().join("experiment.toml")),
        "--clean-out",
        p(&dir.path().join("clean.csv")),
        "--report-out",
        p(&dir.path().join("removals.csv")),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(
        fs::read(sim.join("clean.csv")).unwrap(),
        fs::read(dir.path().join("clean.csv")).unwrap()
    );
    assert_eq!(
        fs::read(sim.join("removals.csv")).unwrap(),
        fs::read(dir.path().join("removals.csv")).unwrap()
    );
}

fn row(listener: &str, condition: &str, role: Role, score: u8) -> ScoreRow {
    ScoreRow {
        experiment_id: ExperimentId::new("fixture"),
        listener_id: ListenerId::new(listener),
        block_id: BlockId(1),
        question_id: QuestionId::new(format!("q-{listener}")),
        item_id: ItemId::new("item01"),
        condition_id: ConditionId::new(condition),
        role,
        score,
        discarded: false,
    }
}

#[test]
fn screen_lists_exactly_the_planted_outlier() {
    let dir = TempDir::new().unwrap();
    let mut rows = Vec::new();
    for (i, sys) in [80u8, 82, 81, 79, 5].into_iter().enumerate() {
        let l = format!("l{i}");
        rows.push(row(&l, "ref", Role::Reference, 100));
        rows.push(row(&l, "anchor", Role::Anchor, 10));
        rows.push(row(&l, "sys", Role::SystemUnderTest, sys));
    }
    let raw = dir.path().join("raw.csv");
    Dataset::new(rows).write_csv(fs::File::create(&raw).unwrap()).unwrap();
    let report = dir.path().join("removals.csv");
    let o = crowdmushra(&[
        "screen",
        "--raw",
        p(&raw),
        "--clean-out",
        p(&dir.path().join("clean.csv")),
        "--report-out",
        p(&report),
    ]);
    assert!(o.status.success(), "{o:?}");
    let text = fs::read_to_string(report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines[1].contains("l4") && lines[1].contains(",sys,") && lines[1].contains("iqr-outlier"), "{text}");
    assert!(stdout(&o).contains("15 raw, 14 retained"));
}

#[test]
fn analyze_without_clean_data_is_a_usage_error() {
    let o = crowdmushra(&["analyze"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--clean"));
}

#[test]
fn analyze_and_export_figures_from_simulation() {
    let dir = scaffold(8);
    assert!(simulate(dir.path(), "sim", 5).status.success());
    let sim = dir.path().join("sim");
    let config = dir.path().join("experiment.toml");
    let report = dir.path().join("analysis.json");
    let o = crowdmushra(&[
        "analyze",
        "--clean",
        p(&sim.join("clean.csv")),
        "--config",
        p(&config),
        "--objective",
        p(&sim.join("objective.csv")),
        "--resamples",
        "200",
        "--out",
        p(&report),
    ]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(text.contains("cond-opus16") && text.contains("ranking stability"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["experiments"][0]["summaries"].as_array().unwrap().len(), 6);
    assert_eq!(json["correlations"].as_array().unwrap().len(), 2);
    assert!(json.get("merged").is_none());

    let figs = dir.path().join("figs");
    let o = crowdmushra(&[
        "export-figures",
        "--clean",
        p(&sim.join("clean.csv")),
        "--config",
        p(&config),
        "--objective",
        p(&sim.join("objective.csv")),
        "--metric",
        "synthetic-distortion",
        "--out-dir",
        p(&figs),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("lower-better"));
    let means = fs::read_to_string(figs.join("means.csv")).unwrap();
    assert_eq!(means.lines().count(), 7);
    assert!(means.lines().nth(1).unwrap().starts_with("cond-ref,"));
    let scatter = fs::read_to_string(figs.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 6 * 8);

    let o = crowdmushra(&[
        "export-figures",
        "--clean",
        p(&sim.join("clean.csv")),
        "--objective",
        p(&sim.join("objective.csv")),
        "--metric",
        "nope",
        "--out-dir",
        p(&figs),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_merges_experiments_sharing_reference_and_anchor() {
    let dir = TempDir::new().unwrap();
    assert!(crowdmushra(&["init", "--out", p(dir.path()), "--items", "2"]).status.success());
    let config = dir.path().join("experiment.toml");
    // experiment "a" uses the scale as is; "b" rates the same stimuli with the
    // anchor 20 points higher, so its renormalized scores must line up with "a".
    let make = |exp: &str, anchor: u8, sys: u8| {
        let mut rows = Vec::new();
        for l in 0..3 {
            for item in ["item01", "item02"] {
                let mut push = |c: &str, role, score| {
                    rows.push(ScoreRow {
                        experiment_id: ExperimentId::new(exp),
                        listener_id: ListenerId::new(format!("{exp}{l}")),
                        block_id: BlockId(1),
                        question_id: QuestionId::new(format!("{exp}{l}{item}")),
                        item_id: ItemId::new(item),
                        condition_id: ConditionId::new(c),
                        role,
                        score,
                        discarded: false,
                    })
                };
                push("cond-ref", Role::Reference, 100);
                push("cond-anchor", Role::Anchor, anchor);
                push("cond-evs", Role::SystemUnderTest, sys);
            }
        }
        let path = dir.path().join(format!("{exp}.csv"));
        Dataset::new(rows).write_csv(fs::File::create(&path).unwrap()).unwrap();
        path
    };
    let a = make("a", 20, 60);
    let b = make("b", 40, 70);
    let report = dir.path().join("merged.json");
    let o = crowdmushra(&[
        "analyze",
        "--clean",
        p(&a),
        p(&b),
        "--config",
        p(&config),
        "--resamples",
        "10",
        "--out",
        p(&report),
    ]);
    assert!(o.status.success(), "{o:?}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let merged = &json["merged"];
    // target anchor is the mean of 20 and 40
    assert!((merged["target_anchor"].as_f64().unwrap() - 30.0).abs() < 1e-12);
    // a: 100 + (60-100)(30-100)/(20-100) = 65; b: 100 + (70-100)(30-100)/(40-100) = 65
    let evs = merged["summaries"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["condition_id"] == "cond-evs")
        .unwrap();
    assert!((evs["grand_mean"].as_f64().unwrap() - 65.0).abs() < 1e-9, "{evs}");

    // without configs there is no shared reference/anchor to merge on
    let o = crowdmushra(&["analyze", "--clean", p(&a), p(&b), "--resamples", "10"]);
    assert_eq!(o.status.code(), Some(1));
}

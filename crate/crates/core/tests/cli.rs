mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

use benchlab::io_formats::{to_json_lines, trials_from_jsonl, LabelsFile, PixelSetFile, StrengthsFile, SubsetFile};
use benchlab::label_model::{BoundarySegment, SetTag, Source};
use benchlab::trial_engine::{Choice, ResponseRecord, TrialRecord};

use common::{run, run_ok, write};

fn stderr_json(out: &std::process::Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr should be one line: {text}");
    serde_json::from_str(lines[0]).unwrap()
}

fn pipeline_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "labels.json", &common::labels_json("img-a", 1));
    run_ok(d, &["merge", "--labels", "labels.json", "--out", "master.json"]);
    run_ok(d, &["infer", "--master", "master.json", "--out", "strengths.json"]);
    dir
}

#[test]
fn merge_writes_master_and_orphan_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "labels.json", &common::labels_json("img-a", 1));
    let out = run_ok(d, &["merge", "--labels", "labels.json", "--out", "master.json"]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    let master: Value = serde_json::from_slice(&std::fs::read(d.join("master.json")).unwrap()).unwrap();
    assert_eq!(master["format_version"], 1);
    assert_eq!(summary["master_pixels"].as_u64().unwrap() as usize, master["pixels"].as_array().unwrap().len());
    let orphans = master["pixels"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["responses"].as_array().unwrap().iter().filter(|y| y.as_u64() == Some(1)).count() == 1)
        .count();
    assert_eq!(summary["orphan_pixels"].as_u64().unwrap() as usize, orphans);
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["merge", "--labels", "absent.json", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "input");
    assert!(err["message"].as_str().unwrap().contains("absent.json"));
}

#[test]
fn bad_arguments_exit_2_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["merge", "--labels"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "input");
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "labels.json", &common::labels_json("img-a", 1));
    let out = run(d, &["merge", "--labels", "labels.json", "--out", "no/such/dir/m.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "runtime");
}

#[test]
fn zero_tolerance_counts_distinct_positions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let labels = common::labels_json("img-a", 4);
    write(d, "labels.json", &labels);
    run_ok(d, &["merge", "--labels", "labels.json", "--tolerance", "0", "--out", "master.json"]);
    let file = LabelsFile::parse(labels.as_bytes()).unwrap();
    let total: usize = file.labelers.iter().map(|l| l.pixels.len()).sum();
    let distinct: BTreeSet<_> = file.labelers.iter().flat_map(|l| l.pixels.iter().copied()).collect();
    let duplicates = total - distinct.len();
    let master: Value = serde_json::from_slice(&std::fs::read(d.join("master.json")).unwrap()).unwrap();
    assert_eq!(master["pixels"].as_array().unwrap().len(), total - duplicates);
}

#[test]
fn infer_validates_grid_and_converges() {
    let dir = pipeline_dir();
    let d = dir.path();
    let out = run(d, &["infer", "--master", "master.json", "--grid", "3", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("11"));
    let s = StrengthsFile::parse(&std::fs::read(d.join("strengths.json")).unwrap()).unwrap();
    assert!(s.iterations_run <= 20);
    assert_eq!(s.profiles.len(), 5);

    run_ok(d, &["infer", "--master", "master.json", "--mu-mode", "raw", "--out", "raw.json"]);
    run_ok(d, &["infer", "--master", "master.json", "--out", "again.json"]);
    assert_eq!(std::fs::read(d.join("again.json")).unwrap(), std::fs::read(d.join("strengths.json")).unwrap());
}

#[test]
fn subset_extremes() {
    let dir = pipeline_dir();
    let d = dir.path();
    run_ok(d, &["subset", "--strengths", "strengths.json", "--tau", "0", "--out", "all.json"]);
    run_ok(d, &["subset", "--strengths", "strengths.json", "--tau", "2", "--out", "none.json"]);
    let s = StrengthsFile::parse(&std::fs::read(d.join("strengths.json")).unwrap()).unwrap();
    let all = SubsetFile::parse(&std::fs::read(d.join("all.json")).unwrap()).unwrap();
    let none = SubsetFile::parse(&std::fs::read(d.join("none.json")).unwrap()).unwrap();
    assert_eq!(all.pixel_ids, s.strengths.iter().map(|(i, _)| i).collect::<Vec<_>>());
    assert!(none.pixel_ids.is_empty());
    assert_eq!(none.utility, 0);
}

#[test]
fn curve_defaults_to_four_thresholds() {
    let dir = pipeline_dir();
    let d = dir.path();
    write(d, "algo.json", "[0.1, 0.4, 0.9]");
    run_ok(d, &["curve", "--strengths", "strengths.json", "--algo-strengths", "algo.json", "--out", "c.csv"]);
    let csv = std::fs::read_to_string(d.join("c.csv")).unwrap();
    let taus: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(csv.lines().next(), Some("tau,utility,risk"));
    assert_eq!(taus, ["0.2", "0.5", "0.8", "1"]);

    run_ok(
        d,
        &["curve", "--strengths", "strengths.json", "--taus", "0,2", "--algo-strengths", "strengths.json", "--out", "c2.csv"],
    );
    let csv = std::fs::read_to_string(d.join("c2.csv")).unwrap();
    assert!(csv.lines().nth(2).unwrap().ends_with(",0,"), "{csv}");
}

fn file_digest(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn sets_and_trials_from_one_image() {
    let dir = pipeline_dir();
    let d = dir.path();
    write(d, "soft.json", &common::soft_json(2));
    let before = [file_digest(&d.join("master.json")), file_digest(&d.join("soft.json"))];

    run_ok(d, &["set", "--master", "master.json", "--strengths", "strengths.json", "--name", "s1", "--out", "s1.json"]);
    run_ok(d, &["algo-set", "--master", "master.json", "--soft", "soft.json", "--out", "a.json"]);
    run_ok(d, &["algo-set", "--master", "master.json", "--soft", "soft.json", "--name", "a-minus-s", "--out", "ams.json"]);
    let master: Value = serde_json::from_slice(&std::fs::read(d.join("master.json")).unwrap()).unwrap();
    let a = PixelSetFile::parse(&std::fs::read(d.join("a.json")).unwrap()).unwrap();
    let ams = PixelSetFile::parse(&std::fs::read(d.join("ams.json")).unwrap()).unwrap();
    let s1 = PixelSetFile::parse(&std::fs::read(d.join("s1.json")).unwrap()).unwrap();
    assert_eq!(a.name, SetTag::A);
    assert_eq!(a.images[0].pixels.len(), master["pixels"].as_array().unwrap().len());
    assert!(ams.images[0].pixels.len() < a.images[0].pixels.len());
    assert_eq!(s1.name, SetTag::S1);
    assert!(s1.images[0].pixels.iter().all(|p| p.strength.is_some()));

    run_ok(d, &["trials", "--human-set", "s1.json", "--algo-set", "ams.json", "--n", "1", "--seed", "7", "--out", "t.jsonl"]);
    let trials = trials_from_jsonl(&std::fs::read(d.join("t.jsonl")).unwrap()).unwrap();
    assert_eq!(trials.len(), 1);
    assert_eq!(trials[0].human_set, SetTag::S1);
    assert_eq!(trials[0].human_segment.source, Source::Human);
    assert_eq!(trials[0].algo_segment.source, Source::Algorithm);

    let out = run(d, &["trials", "--human-set", "s1.json", "--algo-set", "ams.json", "--n", "2", "--out", "t2.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("only 1"));

    let out = run(d, &["set", "--master", "master.json", "--name", "s-bar-tau", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(before, [file_digest(&d.join("master.json")), file_digest(&d.join("soft.json"))]);
}

fn seg(image: &str, source: Source) -> BoundarySegment {
    BoundarySegment {
        segment_id: format!("{image}:{source:?}"),
        image_id: image.into(),
        member_pixel_ids: vec![0],
        pixels: vec![(2, 2)],
        window_center: (4, 4),
        window_size: 8,
        source,
        strength: None,
    }
}

fn hand_trials() -> Vec<TrialRecord> {
    (0..4)
        .map(|i| TrialRecord {
            trial_id: format!("t{i}"),
            image_id: format!("im{i}"),
            human_set: SetTag::S1,
            human_segment: seg(&format!("im{i}"), Source::Human),
            algo_segment: seg(&format!("im{i}"), Source::Algorithm),
            left: if i % 2 == 0 { Source::Human } else { Source::Algorithm },
            window: 8,
            seed: 0,
        })
        .collect()
}

fn pick(trial: &TrialRecord, subject: &str, algo: bool) -> ResponseRecord {
    let left_is_algo = trial.left == Source::Algorithm;
    ResponseRecord {
        trial_id: trial.trial_id.clone(),
        subject_id: subject.into(),
        choice: if algo == left_is_algo { Choice::LeftStronger } else { Choice::RightStronger },
        rt_ms: 900,
        ts: 1,
    }
}

fn write_risk_inputs(d: &Path, responses: &[ResponseRecord]) {
    std::fs::write(d.join("trials.jsonl"), to_json_lines(&hand_trials())).unwrap();
    std::fs::write(d.join("responses.jsonl"), to_json_lines(responses)).unwrap();
}

#[test]
fn risk_is_zero_when_humans_always_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let trials = hand_trials();
    let responses: Vec<_> = ["a", "b", "c"]
        .iter()
        .flat_map(|s| trials.iter().map(move |t| pick(t, s, false)))
        .collect();
    write_risk_inputs(d, &responses);
    run_ok(d, &["risk", "--trials", "trials.jsonl", "--responses", "responses.jsonl", "--out", "r.json"]);
    let r: Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["pooled"]["risk"], 0.0);
    assert_eq!(r["per_subject"].as_object().unwrap().len(), 3);
}

#[test]
fn five_subject_splits_follow_the_majority() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let trials = hand_trials();
    // algorithm votes per trial out of five: 3, 2, 3, 2
    let algo_votes = [3, 2, 3, 2];
    let subjects = ["p", "q", "r", "s", "u"];
    let mut responses = Vec::new();
    for (t, &k) in trials.iter().zip(&algo_votes) {
        for (i, s) in subjects.iter().enumerate() {
            responses.push(pick(t, s, i < k));
        }
    }
    write_risk_inputs(d, &responses);
    run_ok(d, &["risk", "--trials", "trials.jsonl", "--responses", "responses.jsonl", "--out", "mode.json"]);
    run_ok(
        d,
        &["risk", "--trials", "trials.jsonl", "--responses", "responses.jsonl", "--pooling", "mean", "--out", "mean.json"],
    );
    let mode: Value = serde_json::from_slice(&std::fs::read(d.join("mode.json")).unwrap()).unwrap();
    let mean: Value = serde_json::from_slice(&std::fs::read(d.join("mean.json")).unwrap()).unwrap();
    assert_eq!(mode["pooled"]["risk"], 0.5);
    assert_eq!(mode["pooled"]["n_trials"], 4);
    assert_eq!(mode["excluded_trials"], 0);
    // p and q always pick the algorithm, r on trials 0 and 2, s and u never
    assert_eq!(mode["per_subject"]["p"]["risk"], 1.0);
    assert_eq!(mode["per_subject"]["r"]["risk"], 0.5);
    assert_eq!(mode["per_subject"]["u"]["risk"], 0.0);
    assert_eq!(mean["pooled"]["risk"], 0.5);
}

#[test]
fn thread_variable_is_validated() {
    let dir = pipeline_dir();
    let d = dir.path();
    let out = Command::new(common::bin())
        .current_dir(d)
        .env("BENCHLAB_THREADS", "lots")
        .args(["infer", "--master", "master.json", "--out", "x.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("BENCHLAB_THREADS"));

    let out = Command::new(common::bin())
        .current_dir(d)
        .env("BENCHLAB_THREADS", "1")
        .args(["infer", "--master", "master.json", "--out", "one.json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(d.join("one.json")).unwrap(), std::fs::read(d.join("strengths.json")).unwrap());
}

#[test]
fn simulate_reports_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(dir.path(), &["simulate", "--n", "300", "--seed", "4"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["spearman"].as_f64().unwrap() > 0.5);
    assert_eq!(r["risk_curve"].as_array().unwrap().len(), 4);
}

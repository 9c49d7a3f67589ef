use std::fs;
use std::path::{Path, PathBuf};

use phm_harness::binding::SlotFamily;
use phm_harness::control::{
    render_markdown, ArtifactAxis, ArtifactSlot, Mode, Phase, PhaseStatus, RunDir, ScientificAxis, TechnicalAxis,
};
use phm_harness::tree::diff_leaves;
use phm_harness::workflow::{prepare, resume, validate_run, PaperSpec, RunOptions, RunOutcome};
use serde_json::{json, Value};

fn fixture() -> Value {
    let p = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/synthetic-rul.paper-spec.json");
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// The desk fixture with a short training schedule.
fn short_fixture() -> Value {
    let mut v = fixture();
    v["hyperparameters"]["max_epochs"] = json!(5);
    v
}

fn write_spec(dir: &Path, spec: &Value) -> PathBuf {
    let p = dir.join("spec.json");
    fs::write(&p, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    p
}

fn run(spec: &Value, mode: Mode) -> (tempfile::TempDir, RunDir, RunOutcome) {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_spec(tmp.path(), spec);
    let dir = RunDir::new(tmp.path().join("run"));
    let out = validate_run(&dir, &path, "t", mode, 0, &RunOptions::default()).unwrap();
    (tmp, dir, out)
}

fn read_json(dir: &RunDir, slot: ArtifactSlot) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.machine_path(slot)).unwrap()).unwrap()
}

#[test]
fn explicit_assumptions_precede_imputed_rows() {
    let spec = PaperSpec::parse(&fixture().to_string()).unwrap();
    let prep = prepare(&spec).unwrap();
    let paths: Vec<&str> = prep.ledger.records().iter().map(|r| r.path.as_str()).collect();
    assert_eq!(&paths[..2], ["sequencer.length", "evaluator.aggregation"]);
    assert!(paths[2..].iter().all(|p| p.starts_with("hyperparameters.")), "{paths:?}");
    assert_eq!(prep.config.get("sequencer.length"), Some(json!(16)));
    assert_eq!(prep.annotations.len(), paths.len() - 2);
}

#[test]
fn blueprint_only_stops_after_the_blueprint() {
    let (_tmp, dir, out) = run(&short_fixture(), Mode::BlueprintOnly);
    assert_eq!(out.exit_code(), 0, "{:?}", out.blocker);
    for slot in ArtifactSlot::ALL {
        assert_eq!(dir.machine_path(slot).exists(), slot <= ArtifactSlot::ImplementationBlueprint, "{slot:?}");
    }
    for p in [Phase::P35Hypothesis, Phase::P4Experiment] {
        assert_eq!(out.state.phase(p).status, PhaseStatus::SkippedByMode);
    }
    assert_eq!(out.state.axes.technical, TechnicalAxis::Runnable);
    assert_eq!(out.state.axes.scientific, ScientificAxis::Unknown);
}

#[test]
fn planted_leakage_names_the_blocker() {
    let mut spec = short_fixture();
    spec["binding"]["base"]["transform"]["component"] = json!("zscore_global_fit");
    let (_tmp, dir, out) = run(&spec, Mode::Full);
    assert_ne!(out.exit_code(), 0);
    let (phase, blocker) = out.blocker.clone().unwrap();
    assert_eq!(phase, Phase::P4Experiment);
    assert!(blocker.contains("leakage"), "{blocker}");
    assert_eq!(out.state.axes.technical, TechnicalAxis::Failed);
    let bp = read_json(&dir, ArtifactSlot::ImplementationBlueprint);
    assert_eq!(bp["static_passed"], json!(false));
    assert!(!dir.machine_path(ArtifactSlot::EvaluationReport).exists());
}

#[test]
fn scientific_doubt_does_not_fail_the_run() {
    let mut spec = short_fixture();
    spec["magnitude_band"] = json!({"metric": "nmae", "grain": "unit", "low": 0.0, "high": 0.001});
    let (_tmp, _dir, out) = run(&spec, Mode::Quick);
    assert_eq!(out.state.axes.artifact, ArtifactAxis::Complete);
    assert_eq!(out.state.axes.technical, TechnicalAxis::Runnable);
    assert_eq!(out.state.axes.scientific, ScientificAxis::Investigate);
    assert_eq!(out.exit_code(), 0);
}

#[test]
fn repair_revises_the_window_length_to_match_the_model() {
    let mut spec = short_fixture();
    spec["binding"]["base"]["model"]["input_length"] = json!(8);
    let (_tmp, dir, out) = run(&spec, Mode::Full);
    assert_eq!(out.exit_code(), 0, "{:?}", out.blocker);
    let log = read_json(&dir, ArtifactSlot::SanityLadderLog);
    let repair = &log["repair"];
    assert_eq!(repair["terminal"], json!("PASS"));
    assert_eq!(repair["final_config"]["sequencer"]["length"], json!(8));
    let iterations = repair["iterations"].as_array().unwrap();
    // 16 fails, 24 fails, 8 fits
    assert_eq!(iterations.len(), 2);
    assert_eq!(log["attempts"].as_array().unwrap().len(), 3);

    let blueprint = read_json(&dir, ArtifactSlot::ImplementationBlueprint)["binding"].clone();
    assert_eq!(diff_leaves(&blueprint, &repair["final_config"]), vec!["sequencer.length".to_string()]);
    let rec = &repair["ledger"][0];
    assert_eq!(rec["path"], json!("sequencer.length"));
    assert_eq!(rec["attempts_used"], json!(2));
}

#[test]
fn unattributable_failure_is_not_repaired() {
    let mut spec = short_fixture();
    spec["binding"]["base"]["model"] = json!({"component": "dead_branch_mlp", "hidden": [16]});
    let (_tmp, dir, out) = run(&spec, Mode::Full);
    assert_ne!(out.exit_code(), 0);
    let (_, blocker) = out.blocker.unwrap();
    assert!(blocker.starts_with("NO_ATTRIBUTABLE_ASSUMPTION") || blocker.starts_with("ESCALATE"), "{blocker}");
    let log = read_json(&dir, ArtifactSlot::SanityLadderLog);
    let iterations = log["repair"]["iterations"].as_array().unwrap();
    for it in iterations {
        let slot = it["hypothesis"]["target_change"]["slot"].as_str().unwrap();
        assert_ne!(slot, SlotFamily::Sequencer.as_str());
    }
}

#[test]
fn every_mirror_matches_its_machine_artifact() {
    let (_tmp, dir, out) = run(&short_fixture(), Mode::Quick);
    assert_eq!(out.exit_code(), 0, "{:?}", out.blocker);
    for slot in ArtifactSlot::ALL {
        let v = read_json(&dir, slot);
        let md = fs::read_to_string(dir.human_path(slot)).unwrap();
        assert_eq!(md, render_markdown(slot, &v), "{slot:?}");
    }
}

#[test]
fn resume_of_a_finished_run_changes_nothing() {
    let (_tmp, dir, _) = run(&short_fixture(), Mode::BlueprintOnly);
    let before = fs::read(dir.state_path()).unwrap();
    let out = resume(&dir, &RunOptions::default()).unwrap();
    assert_eq!(out.exit_code(), 0);
    assert_eq!(fs::read(dir.state_path()).unwrap(), before);
}

#[test]
fn resume_regenerates_a_tampered_artifact() {
    let (_tmp, dir, _) = run(&short_fixture(), Mode::BlueprintOnly);
    let original = fs::read(dir.machine_path(ArtifactSlot::AlgorithmicSpec)).unwrap();
    fs::write(dir.human_path(ArtifactSlot::AlgorithmicSpec), "edited by hand\n").unwrap();
    let out = resume(&dir, &RunOptions::default()).unwrap();
    assert_eq!(out.exit_code(), 0, "{:?}", out.blocker);
    assert_eq!(fs::read(dir.machine_path(ArtifactSlot::AlgorithmicSpec)).unwrap(), original);
    let v = read_json(&dir, ArtifactSlot::AlgorithmicSpec);
    assert_eq!(
        fs::read_to_string(dir.human_path(ArtifactSlot::AlgorithmicSpec)).unwrap(),
        render_markdown(ArtifactSlot::AlgorithmicSpec, &v)
    );
}

#[test]
fn malformed_input_is_blocked_at_the_input_check() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("spec.json");
    fs::write(&path, "not json").unwrap();
    let dir = RunDir::new(tmp.path().join("run"));
    let out = validate_run(&dir, &path, "t", Mode::Full, 0, &RunOptions::default()).unwrap();
    let (phase, blocker) = out.blocker.clone().unwrap();
    assert_eq!(phase, Phase::P0InputCheck);
    assert!(blocker.starts_with("INPUT_INVALID"));
    assert_ne!(out.exit_code(), 0);
}

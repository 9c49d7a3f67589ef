//! The end-to-end run: a paper-spec input drives phases P0 to P4, each
//! emitting its artifacts through the control plane. Every phase recomputes
//! what it needs from the copied input, so a run resumes from artifacts alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assumptions::{
    impute, render_annotated_config, render_ledger_table, EvidenceRef, FrameworkDefaults, HyperparameterContract,
    Ledger, SubstitutionAnnotation,
};
use crate::binding::{
    classify_bindings, compose, typecheck, ComponentRef, ComponentRegistry, DefaultsCatalog, Directive, Provenance,
    ResolvedConfiguration, SlotFamily, TaskContract, TaskKind,
};
use crate::control::{
    get_status, to_pretty_json, write_atomic, ArtifactSlot, ControlError, ControlPolicy, Mode, Phase,
    PhaseStatus, RunDir, RunState, ScientificAxis, StatusSnapshot, TechnicalAxis, INPUT_FILE,
};
use crate::data::Split;
use crate::evaluator::{
    benchmark_swap, bench_row, collect_predictions, constant_baseline_value, evaluate_records, format_bench_row,
    generate_report, parse_leaderboard, predictions_csv, with_constant_prediction, BaselineTable, BenchCell,
    ClaimRecord, EvalError, Grain, HypothesisStatus, MagnitudeBand, Metric, MetricResult, PredictionRecord,
    ReportInputs, ScientificStatus, SwapError, TechnicalStatus,
};
use crate::repair::{repair_loop, MutableSlotWhitelist, RepairOutcome, RepairTerminal, VERIFY_BUDGET};
use crate::runtime::{build_stack, contract_for, load_datasource, FrameworkStack, StackContext};
use crate::trainer::{history_csv, train, TrainRunResult};
use crate::verification::{record_attempt, run_verification, verify_static, LadderLog, VerificationPolicy};

pub const WORKSPACE_ENV: &str = "PHM_HARNESS_WORKSPACE";
pub const CRASH_ENV: &str = "PHM_HARNESS_CRASH_AT";
pub const PREDICTIONS_FILE: &str = "predictions-test.csv";
pub const HISTORY_FILE: &str = "training-history.csv";

/// `<workspace>/validate-paper/<run-name>`.
pub fn run_directory(workspace: &Path, run_name: &str) -> PathBuf {
    workspace.join("validate-paper").join(run_name)
}

// ---------------------------------------------------------------------------
// Paper spec

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionText {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetNote {
    pub name: String,
    #[serde(default)]
    pub matches_paper: bool,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingPlan {
    pub base: Value,
    #[serde(default)]
    pub defaults: Vec<String>,
    #[serde(default)]
    pub overrides: Vec<String>,
    #[serde(default)]
    pub catalog: DefaultsCatalog,
}

/// A binding decision the paper leaves open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionInput {
    pub slot: SlotFamily,
    pub path: String,
    pub value: Value,
    pub justification: String,
    #[serde(default)]
    pub alternatives: Vec<Value>,
    #[serde(default)]
    pub evidence: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    #[serde(default = "default_quick_epochs")]
    pub quick_epochs: usize,
    #[serde(default)]
    pub bench_seeds: Option<Vec<u64>>,
    #[serde(default = "default_budget")]
    pub repair_budget: usize,
}

fn default_quick_epochs() -> usize {
    20
}

fn default_budget() -> usize {
    VERIFY_BUDGET
}

fn default_hypothesis() -> HypothesisStatus {
    HypothesisStatus::PreRegistered
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            quick_epochs: default_quick_epochs(),
            bench_seeds: None,
            repair_budget: default_budget(),
        }
    }
}

/// Machine-readable stand-in for the analysis phases: claims, the
/// hyperparameter table and the binding plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaperSpec {
    pub paper_id: String,
    pub title: String,
    #[serde(default)]
    pub sections: Vec<SectionText>,
    #[serde(default)]
    pub datasets: Vec<DatasetNote>,
    #[serde(default = "default_hypothesis")]
    pub hypothesis_status: HypothesisStatus,
    #[serde(default)]
    pub claims: Vec<ClaimRecord>,
    pub hyperparameters: Value,
    pub binding: BindingPlan,
    #[serde(default)]
    pub assumptions: Vec<AssumptionInput>,
    #[serde(default)]
    pub leaderboard: Option<Value>,
    #[serde(default)]
    pub magnitude_band: Option<MagnitudeBand>,
    #[serde(default)]
    pub protocol: Protocol,
}

impl PaperSpec {
    pub fn parse(text: &str) -> Result<Self, String> {
        let spec: PaperSpec = serde_json::from_str(text).map_err(|e| format!("paper spec: {e}"))?;
        if let Some(c) = spec.claims.iter().find(|c| !(c.tolerance >= 0.0)) {
            return Err(format!("claim {} has a negative tolerance", c.id));
        }
        if let Some(lb) = &spec.leaderboard {
            parse_leaderboard(lb)?;
        }
        Ok(spec)
    }

    /// Every listed dataset is the paper's own.
    pub fn dataset_matches_paper(&self) -> bool {
        !self.datasets.is_empty() && self.datasets.iter().all(|d| d.matches_paper)
    }

    pub fn bench_seeds(&self, run_seed: u64) -> Vec<u64> {
        self.protocol
            .bench_seeds
            .clone()
            .unwrap_or_else(|| vec![run_seed, run_seed + 1, run_seed + 2])
    }
}

/// Everything derived from a spec before any check runs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ResolvedConfiguration,
    pub ledger: Ledger,
    pub annotations: Vec<SubstitutionAnnotation>,
    pub registry: ComponentRegistry,
    pub contract: TaskContract,
}

/// Composes the binding plan, imputes the hyperparameter table, and records
/// the explicit assumptions (first) and imputed rows (after) in the ledger.
pub fn prepare(spec: &PaperSpec) -> Result<Prepared, String> {
    let b = &spec.binding;
    let mut config = compose(&b.base, &b.defaults, &b.overrides, &b.catalog).map_err(|e| e.to_string())?;
    let table = HyperparameterContract::from_value(&spec.hyperparameters).map_err(|e| format!("hyperparameters: {e}"))?;
    let imputation = impute(&table, &FrameworkDefaults::builtin()).map_err(|e| e.to_string())?;
    config = config
        .apply(Directive::Override {
            path: "hyperparameters".into(),
            value: imputation.table.to_value(),
            create: true,
        })
        .map_err(|e| e.to_string())?;
    let mut ledger = Ledger::new();
    for a in &spec.assumptions {
        config = config
            .apply(Directive::Override {
                path: a.path.clone(),
                value: a.value.clone(),
                create: true,
            })
            .map_err(|e| e.to_string())?;
        let evidence = a.evidence.as_deref().map_or_else(EvidenceRef::absent, EvidenceRef::span);
        ledger.record(a.slot, evidence, &a.path, a.value.clone(), &a.justification, a.alternatives.clone());
    }
    for r in imputation.records {
        ledger.push(r);
    }
    let registry = ComponentRegistry::builtin();
    let contract = contract_for(&config, &registry).ok_or("task binding does not resolve to a task contract")?;
    Ok(Prepared {
        config,
        ledger,
        annotations: imputation.annotations,
        registry,
        contract,
    })
}

// ---------------------------------------------------------------------------
// Errors and options

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("{0}")]
    Spec(String),
    #[error(transparent)]
    Swap(#[from] SwapError),
    #[error("{0}")]
    Bench(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub policy: ControlPolicy,
    pub verification: VerificationPolicy,
    /// `<phase>:<point>`; the process aborts when it reaches that point.
    pub crash_at: Option<String>,
}

impl RunOptions {
    pub fn from_env() -> Self {
        RunOptions {
            crash_at: std::env::var(CRASH_ENV).ok().filter(|s| !s.is_empty()),
            ..Self::default()
        }
    }

    fn crash_point(&self, phase: Phase, point: &str) {
        if self.crash_at.as_deref() == Some(format!("{phase}:{point}").as_str()) {
            eprintln!("crash injected at {phase}:{point}");
            std::process::abort();
        }
    }
}

/// Every point a crash can be injected at, in execution order.
pub fn crash_points(mode: Mode) -> Vec<String> {
    let mut out = Vec::new();
    for p in Phase::ALL.into_iter().filter(|p| !mode.skips(*p)) {
        let inner: &[&str] = match p {
            Phase::P1Ingest => &["mid"],
            Phase::P2Analyze => &["mid"],
            Phase::P4Experiment => &["after_ladder", "after_train", "mid_report"],
            _ => &[],
        };
        out.push(format!("{p}:start"));
        out.extend(inner.iter().map(|i| format!("{p}:{i}")));
        out.push(format!("{p}:end"));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: RunState,
    /// Phase and named blocker when the run stopped on a failure.
    pub blocker: Option<(Phase, String)>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        exit_code(&self.state)
    }

    pub fn status(&self) -> StatusSnapshot {
        get_status(&self.state, None)
    }
}

/// 0 iff the artifact axis is complete and the technical axis is not
/// failed. The scientific axis never matters.
pub fn exit_code(state: &RunState) -> i32 {
    use crate::control::ArtifactAxis;
    let artifact_ok = state.axes.artifact == ArtifactAxis::Complete;
    let technical_ok = state.axes.technical != TechnicalAxis::Failed;
    if artifact_ok && technical_ok {
        0
    } else {
        1
    }
}

// ---------------------------------------------------------------------------
// Entry points

/// Starts a new run in `dir` from the spec file and drives it as far as it goes.
pub fn validate_run(
    dir: &RunDir,
    spec_path: &Path,
    run_id: &str,
    mode: Mode,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunOutcome, WorkflowError> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| WorkflowError::Spec(format!("cannot read {}: {e}", spec_path.display())))?;
    let _lock = dir.lock()?;
    let state = dir.init_run(run_id, mode, seed)?;
    // the copy is what P0 checks and what every later phase reads
    if let Ok(v) = serde_json::from_str::<Value>(&text) {
        write_atomic(&dir.root.join(INPUT_FILE), to_pretty_json(&v).as_bytes()).map_err(ControlError::from)?;
    }
    drive(dir, state, opts)
}

/// Reconciles the state with the artifacts on disk, then continues the
/// current phase. A finished, intact run is left untouched.
pub fn resume(dir: &RunDir, opts: &RunOptions) -> Result<RunOutcome, WorkflowError> {
    let _lock = dir.lock()?;
    let state = dir.load_state()?;
    let intact = Phase::ALL
        .into_iter()
        .filter(|p| !state.mode.skips(*p))
        .all(|p| dir.unmet_gate(opts.policy.gate(p)).is_empty());
    if state.is_finished() && intact {
        return Ok(RunOutcome { state, blocker: None });
    }
    let fallback = (state.run_id.clone(), state.mode, state.seed);
    let mut state = match dir.sync_from_artifacts((&fallback.0, fallback.1, fallback.2), &opts.policy) {
        Ok(s) => s,
        // reconciliation already persisted; the corrupt slot is regenerated below
        Err(ControlError::CorruptArtifact { .. }) => dir.load_state()?,
        Err(e) => return Err(e.into()),
    };
    restore_axes(dir, &mut state);
    dir.save_state(&state)?;
    drive(dir, state, opts)
}

fn load_spec(dir: &RunDir) -> Result<PaperSpec, String> {
    let text = fs::read_to_string(dir.root.join(INPUT_FILE)).map_err(|e| format!("{INPUT_FILE}: {e}"))?;
    PaperSpec::parse(&text)
}

fn drive(dir: &RunDir, mut state: RunState, opts: &RunOptions) -> Result<RunOutcome, WorkflowError> {
    while let Some(phase) = state.current_phase() {
        if phase == Phase::P0InputCheck && !dir.root.join(INPUT_FILE).is_file() {
            let blocker = "INPUT_INVALID: paper spec is missing or is not JSON".to_string();
            state.start_phase(phase, &opts.policy)?;
            state.fail_phase(phase, &blocker)?;
            dir.save_state(&state)?;
            return Ok(RunOutcome {
                state,
                blocker: Some((phase, blocker)),
            });
        }
        state.start_phase(phase, &opts.policy)?;
        dir.save_state(&state)?;
        opts.crash_point(phase, "start");
        let result = load_spec(dir)
            .map_err(|e| format!("INPUT_INVALID: {e}"))
            .and_then(|spec| run_phase(dir, &mut state, phase, &spec, opts));
        match result {
            Ok(()) => {
                opts.crash_point(phase, "end");
                state.complete_phase(phase, dir, &opts.policy)?;
                dir.save_state(&state)?;
            }
            Err(blocker) => {
                state.fail_phase(phase, &blocker)?;
                dir.save_state(&state)?;
                return Ok(RunOutcome {
                    state,
                    blocker: Some((phase, blocker)),
                });
            }
        }
    }
    Ok(RunOutcome { state, blocker: None })
}

fn write(dir: &RunDir, slot: ArtifactSlot, payload: Value) -> Result<(), String> {
    dir.write_sidecar(slot, &payload).map(|_| ()).map_err(|e| format!("ARTIFACT_WRITE_FAILED: {e}"))
}

fn run_phase(dir: &RunDir, state: &mut RunState, phase: Phase, spec: &PaperSpec, opts: &RunOptions) -> Result<(), String> {
    match phase {
        Phase::P0InputCheck => Ok(()),
        Phase::P1Ingest => {
            write(dir, ArtifactSlot::PaperHub, paper_hub(dir, spec, state))?;
            opts.crash_point(phase, "mid");
            write(dir, ArtifactSlot::ChunkIndex, chunk_index(spec))
        }
        Phase::P2Analyze => {
            let prep = prepare(spec).map_err(|e| format!("BINDING_INVALID: {e}"))?;
            write(dir, ArtifactSlot::ConceptualAnalysis, conceptual_analysis(spec, &prep))?;
            opts.crash_point(phase, "mid");
            write(dir, ArtifactSlot::AlgorithmicSpec, algorithmic_spec(spec, &prep))
        }
        Phase::P3Blueprint => blueprint(dir, state, spec, opts),
        Phase::P35Hypothesis => write(dir, ArtifactSlot::PaperHypothesis, hypothesis(spec, &opts.policy)),
        Phase::P4Experiment => experiment(dir, state, spec, opts),
    }
}

// ---------------------------------------------------------------------------
// P1 and P2

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn paper_hub(dir: &RunDir, spec: &PaperSpec, state: &RunState) -> Value {
    let input = fs::read(dir.root.join(INPUT_FILE)).unwrap_or_default();
    let sections: Vec<Value> = spec
        .sections
        .iter()
        .map(|s| json!({"id": s.id, "title": s.title, "chars": s.text.chars().count()}))
        .collect();
    let outputs: Vec<Value> = ArtifactSlot::ALL
        .into_iter()
        .filter(|s| !(state.mode == Mode::BlueprintOnly && *s >= ArtifactSlot::PaperHypothesis))
        .map(|s| Value::from(s.stem()))
        .collect();
    json!({
        "paper_id": spec.paper_id,
        "title": spec.title,
        "input_sha256": sha256_hex(&input),
        "mode": state.mode,
        "seed": state.seed,
        "sections": sections,
        "planned_artifacts": outputs,
    })
}

fn chunk_index(spec: &PaperSpec) -> Value {
    let mut chunks = Vec::new();
    for s in &spec.sections {
        let paragraphs = s.text.split("\n\n").map(str::trim).filter(|p| !p.is_empty());
        for (k, p) in paragraphs.enumerate() {
            chunks.push(json!({
                "id": format!("{}#{k}", s.id),
                "section": s.id,
                "chars": p.chars().count(),
                "sha256": sha256_hex(p.as_bytes())[..16].to_string(),
            }));
        }
    }
    json!({ "chunks": chunks })
}

fn conceptual_analysis(spec: &PaperSpec, prep: &Prepared) -> Value {
    json!({
        "claims": spec.claims,
        "datasets": spec.datasets,
        "dataset_matches_paper": spec.dataset_matches_paper(),
        "assumptions": prep.ledger.to_value(),
    })
}

fn algorithmic_spec(spec: &PaperSpec, prep: &Prepared) -> Value {
    let tree = prep.config.to_tree();
    let hp = prep.config.hyperparameters.as_ref().map(|h| h.to_value()).unwrap_or(Value::Null);
    let datasource = prep.config.binding(SlotFamily::Datasource).map(ComponentRef::to_node);
    json!({
        "hyperparameters": hp,
        "substitutions": prep.annotations,
        "annotated_config": render_annotated_config(&tree, &prep.annotations),
        "dataset_mapping": {
            "datasource": datasource,
            "paper_datasets": spec.datasets.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
            "matches_paper": spec.dataset_matches_paper(),
        },
        "ledger_table": render_ledger_table(&prep.ledger),
    })
}

// ---------------------------------------------------------------------------
// P3

fn check_rows(results: &[crate::verification::CheckResult]) -> Vec<Value> {
    results
        .iter()
        .map(|r| {
            json!({
                "check": r.check_id,
                "status": r.status,
                "implicated": r.implicated_slots.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
                "message": r.messages.join("; "),
            })
        })
        .collect()
}

fn failing_summary(results: &[crate::verification::CheckResult]) -> String {
    results
        .iter()
        .filter(|r| r.failed())
        .map(|r| {
            let id = serde_json::to_value(r.check_id).expect("unit variant");
            format!("{} ({})", id.as_str().unwrap_or_default(), r.messages.join("; "))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn blueprint(dir: &RunDir, state: &mut RunState, spec: &PaperSpec, opts: &RunOptions) -> Result<(), String> {
    let prep = prepare(spec).map_err(|e| format!("BINDING_INVALID: {e}"))?;
    let report = typecheck(&prep.config, &prep.registry, &prep.contract);
    if !report.passed {
        state.set_technical(TechnicalAxis::Failed);
        let v: Vec<String> = report.violations.iter().map(|v| format!("[{}] {}", v.rule_id, v.message)).collect();
        return Err(format!("TOOL_INVOCATION_FAILURE: typecheck: {}", v.join("; ")));
    }
    let ctx = StackContext {
        base_dir: Some(dir.root.clone()),
        seed: state.seed,
    };
    let stat = verify_static(&prep.config, &prep.registry, &prep.contract, &ctx, &opts.verification);
    let states = classify_bindings(&prep.config, &prep.registry);
    let new_files: Vec<Value> = prep
        .config
        .bindings
        .values()
        .filter_map(|b| prep.registry.get(b.family, &b.name))
        .filter(|e| e.provenance == Provenance::CreatedThisRun)
        .map(|e| json!({"family": e.descriptor.family, "component": e.descriptor.name}))
        .collect();
    let payload = json!({
        "binding": prep.config.to_tree(),
        "config_digest": prep.config.digest(),
        "composition_trace": prep.config.composition_trace,
        "typecheck": report,
        "binding_states": states,
        "required_new_files": new_files,
        "validation_matrix": check_rows(&stat.results),
        "static_passed": stat.passed,
    });
    write(dir, ArtifactSlot::ImplementationBlueprint, payload)?;
    // static failures are recorded, not fatal: the repair loop may still fix them
    if stat.passed {
        state.set_technical(TechnicalAxis::Runnable);
    } else if state.mode == Mode::BlueprintOnly {
        state.set_technical(TechnicalAxis::Failed);
        eprintln!("static verification failed: {}", failing_summary(&stat.results));
    }
    Ok(())
}

fn hypothesis(spec: &PaperSpec, policy: &ControlPolicy) -> Value {
    json!({
        "status": spec.hypothesis_status,
        "claims": spec.claims,
        "magnitude_band": spec.magnitude_band,
        "dataset_matches_paper": spec.dataset_matches_paper(),
        "suppress_claims_when_benchmark_only": policy.suppress_claims_when_benchmark_only,
    })
}

// ---------------------------------------------------------------------------
// P4

/// Repairs the bound configuration under `budget`, logging every gate call.
pub fn verify_and_repair(
    prep: &Prepared,
    ctx: &StackContext,
    policy: &VerificationPolicy,
    budget: usize,
) -> (RepairOutcome, LadderLog, Ledger) {
    let mut ledger = prep.ledger.clone();
    let mut log = LadderLog::new();
    let outcome = repair_loop(&prep.config, &mut ledger, budget, &MutableSlotWhitelist::run_default(), |cfg| {
        let contract = contract_for(cfg, &prep.registry).unwrap_or_else(|| prep.contract.clone());
        let loaded = load_datasource(cfg, &prep.registry, &contract, ctx);
        let out = run_verification(cfg, &prep.registry, &contract, loaded, ctx.seed, policy);
        let note = if log.entries().is_empty() {
            "initial verification".to_string()
        } else {
            format!("after repair iteration {}", log.entries().len())
        };
        record_attempt(&mut log, cfg, out.clone(), Some(note));
        out
    });
    (outcome, log, ledger)
}

fn epochs_for(mode: Mode, spec: &PaperSpec, configured: usize) -> usize {
    match mode {
        Mode::Quick => configured.min(spec.protocol.quick_epochs),
        _ => configured,
    }
}

/// Builds, trains and predicts on the test split for one seed.
pub fn train_and_predict(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    ctx: &StackContext,
    epochs: impl Fn(usize) -> usize,
) -> Result<(FrameworkStack, TrainRunResult, Vec<PredictionRecord>), String> {
    let contract = contract_for(config, registry).ok_or("task binding does not resolve to a task contract")?;
    let mut stack = build_stack(config, registry, &contract, ctx).map_err(|e| e.to_string())?;
    stack.train_config.max_epochs = epochs(stack.train_config.max_epochs);
    let mut model = stack.model.clone();
    let run = train(&mut model, &stack.windows, &stack.train_config).map_err(|e| e.to_string())?;
    let preds = collect_predictions(&model, &stack, Split::Test).map_err(|e| e.to_string())?;
    stack.model = model;
    Ok((stack, run, preds))
}

/// Scores records at both grains. A collapsed nMAE range is reported as
/// degenerate instead of failing the evaluation.
pub fn score(records: &[PredictionRecord], metrics: &[Metric], stack: &FrameworkStack) -> Result<(Vec<MetricResult>, Vec<Metric>), EvalError> {
    let agg = stack.evaluator.aggregation;
    let mut degenerate = Vec::new();
    let mut usable = metrics.to_vec();
    if usable.contains(&Metric::Nmae) {
        let t: Vec<f64> = records.iter().map(|r| r.target).collect();
        if crate::evaluator::target_range(&t).is_err() {
            usable.retain(|m| *m != Metric::Nmae);
            degenerate.push(Metric::Nmae);
        }
    }
    let mut out = evaluate_records(records, &usable, Grain::Window, agg)?;
    out.extend(evaluate_records(records, &usable, Grain::Unit, agg)?);
    Ok((out, degenerate))
}

fn metric_list(stack: &FrameworkStack) -> Result<Vec<Metric>, EvalError> {
    stack.evaluator.metrics.iter().map(|m| m.parse()).collect()
}

fn constant_baseline(stack: &FrameworkStack, test: &[PredictionRecord], metrics: &[Metric]) -> Result<(f64, BTreeMap<String, f64>), String> {
    let train = collect_predictions(&stack.model, stack, Split::Train).map_err(|e| e.to_string())?;
    let targets: Vec<f64> = train.iter().map(|r| r.target).collect();
    let value = constant_baseline_value(&targets, stack.contract.target_semantics);
    let (scores, _) = score(&with_constant_prediction(test, value), metrics, stack).map_err(|e| e.to_string())?;
    let row = scores
        .iter()
        .map(|m| (crate::evaluator::metric_key(m.metric, m.grain), m.value))
        .collect();
    Ok((value, row))
}

fn experiment(dir: &RunDir, state: &mut RunState, spec: &PaperSpec, opts: &RunOptions) -> Result<(), String> {
    let prep = prepare(spec).map_err(|e| format!("BINDING_INVALID: {e}"))?;
    let ctx = StackContext {
        base_dir: Some(dir.root.clone()),
        seed: state.seed,
    };
    let budget = match state.mode {
        Mode::Full => spec.protocol.repair_budget,
        _ => 0,
    };
    let (outcome, log, ledger) = verify_and_repair(&prep, &ctx, &opts.verification, budget);
    let proceeds = matches!(outcome.terminal, RepairTerminal::Pass | RepairTerminal::WarnContinue);
    let ladder = json!({
        "verdict": outcome.final_report.verdict.as_str(),
        "attempts": serde_json::to_value(log.entries()).expect("entries serialize"),
        "repair": {
            "terminal": outcome.terminal,
            "budget": budget,
            "iterations": outcome.iterations,
            "detail": outcome.detail,
            "final_config_digest": outcome.config.digest(),
            "final_config": outcome.config.to_tree(),
            "ledger": ledger.to_value(),
        },
    });
    write(dir, ArtifactSlot::SanityLadderLog, ladder)?;
    opts.crash_point(Phase::P4Experiment, "after_ladder");
    if !proceeds {
        state.set_technical(TechnicalAxis::Failed);
        let terminal = serde_json::to_value(outcome.terminal).expect("unit variant");
        return Err(format!(
            "{}: {} [{}]{}",
            terminal.as_str().unwrap_or_default(),
            outcome.final_report.verdict.as_str(),
            failing_summary(&outcome.final_report.checks),
            outcome.detail.map(|d| format!("; {d}")).unwrap_or_default()
        ));
    }

    let mode = state.mode;
    let trained = train_and_predict(&outcome.config, &prep.registry, &ctx, |e| epochs_for(mode, spec, e));
    let (stack, run, preds) = match trained {
        Ok(t) => t,
        Err(e) => {
            state.set_technical(TechnicalAxis::Failed);
            return Err(format!("IMPLEMENTATION_BUG: training failed: {e}"));
        }
    };
    write_atomic(&dir.root.join(HISTORY_FILE), history_csv(&run.history).as_bytes()).map_err(|e| e.to_string())?;
    write_atomic(&dir.root.join(PREDICTIONS_FILE), predictions_csv(&preds).as_bytes()).map_err(|e| e.to_string())?;
    opts.crash_point(Phase::P4Experiment, "after_train");
    let training = json!({
        "seeds": [state.seed],
        "runs": [{
            "seed": state.seed,
            "model": stack.model.component,
            "epochs": run.history.len(),
            "final_train_loss": run.final_train_loss,
            "final_lr": run.optimizer.lr,
            "history_file": HISTORY_FILE,
            "predictions_file": PREDICTIONS_FILE,
        }],
        "history": run.history,
    });
    write(dir, ArtifactSlot::TrainingLog, training)?;
    opts.crash_point(Phase::P4Experiment, "mid_report");

    // evaluation failures still yield a complete report
    let evaluated = metric_list(&stack)
        .map_err(|e| e.to_string())
        .and_then(|metrics| {
            let (scores, degenerate) = score(&preds, &metrics, &stack).map_err(|e| e.to_string())?;
            let (value, row) = constant_baseline(&stack, &preds, &metrics)?;
            Ok((scores, degenerate, value, row))
        });
    let mut baselines: BaselineTable = spec
        .leaderboard
        .as_ref()
        .map(|lb| parse_leaderboard(lb).expect("validated at parse"))
        .unwrap_or_default();
    let (metrics, degenerate, technical, detail, constant) = match evaluated {
        Ok((scores, degenerate, value, row)) => {
            baselines.insert("constant_mean".into(), row);
            (scores, degenerate, TechnicalStatus::Pass, None, Some(value))
        }
        Err(e) => (Vec::new(), Vec::new(), TechnicalStatus::EvaluatorError, Some(e), None),
    };
    let report = generate_report(ReportInputs {
        metrics,
        baselines,
        claims: &spec.claims,
        hypothesis_status: spec.hypothesis_status,
        suppress_claims_when_benchmark_only: opts.policy.suppress_claims_when_benchmark_only,
        dataset_matches_paper: spec.dataset_matches_paper(),
        magnitude_band: spec.magnitude_band.as_ref(),
        technical_status: technical,
        technical_detail: detail,
        degenerate,
    });
    let mut payload = serde_json::to_value(&report).expect("report serializes");
    if let Value::Object(m) = &mut payload {
        m.insert("constant_prediction".into(), constant.map_or(Value::Null, Value::from));
        m.insert("predictions_file".into(), PREDICTIONS_FILE.into());
    }
    write(dir, ArtifactSlot::EvaluationReport, payload)?;
    state.set_technical(if technical == TechnicalStatus::Pass {
        TechnicalAxis::Runnable
    } else {
        TechnicalAxis::Failed
    });
    state.set_scientific(scientific_axis(report.scientific_status));
    Ok(())
}

fn scientific_axis(s: ScientificStatus) -> ScientificAxis {
    match s {
        ScientificStatus::Validated => ScientificAxis::Validated,
        ScientificStatus::Plausible => ScientificAxis::Plausible,
        ScientificStatus::Investigate | ScientificStatus::InvestigateClaimsDisputed => ScientificAxis::Investigate,
        ScientificStatus::BenchmarkOnly => ScientificAxis::BenchmarkOnly,
    }
}

/// Axes of phases that reconciliation completed from their artifacts
/// instead of running them; a crash between the last write and the state
/// save would otherwise lose them.
fn restore_axes(dir: &RunDir, state: &mut RunState) {
    let done = |p: Phase| state.phase(p).status == PhaseStatus::Complete;
    let mut technical = None;
    let mut scientific = None;
    if done(Phase::P3Blueprint) {
        match dir.read_sidecar(ArtifactSlot::ImplementationBlueprint).and_then(|v| v["static_passed"].as_bool()) {
            Some(true) => technical = Some(TechnicalAxis::Runnable),
            Some(false) if state.mode == Mode::BlueprintOnly => technical = Some(TechnicalAxis::Failed),
            _ => {}
        }
    }
    if done(Phase::P4Experiment) {
        if let Some(report) = dir.read_sidecar(ArtifactSlot::EvaluationReport) {
            if let Ok(t) = serde_json::from_value::<TechnicalStatus>(report["technical_status"].clone()) {
                technical = Some(if t == TechnicalStatus::Pass {
                    TechnicalAxis::Runnable
                } else {
                    TechnicalAxis::Failed
                });
            }
            if let Ok(s) = serde_json::from_value::<ScientificStatus>(report["scientific_status"].clone()) {
                scientific = Some(scientific_axis(s));
            }
        }
    }
    if let Some(t) = technical.filter(|t| *t != state.axes.technical) {
        state.set_technical(t);
    }
    if let Some(s) = scientific.filter(|s| *s != state.axes.scientific) {
        state.set_scientific(s);
    }
}

// ---------------------------------------------------------------------------
// Benchmark

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub task: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<BenchCell>,
    pub row: String,
    pub impl_config: Value,
    pub baseline_config: Value,
}

/// The run's final (repaired) configuration, read back from 06.
pub fn final_config(dir: &RunDir) -> Result<ResolvedConfiguration, WorkflowError> {
    let ladder = dir
        .read_sidecar(ArtifactSlot::SanityLadderLog)
        .ok_or_else(|| WorkflowError::Bench("run has no valid sanity ladder log".into()))?;
    let tree = ladder
        .pointer("/repair/final_config")
        .ok_or_else(|| WorkflowError::Bench("ladder log lacks the final configuration".into()))?;
    ResolvedConfiguration::from_tree(tree, Vec::new()).map_err(|e| WorkflowError::Bench(e.to_string()))
}

/// Unit-grain nMAE per seed for one configuration.
pub fn seed_scores(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    base_dir: &Path,
    seeds: &[u64],
    epochs: impl Fn(usize) -> usize + Copy,
) -> Result<Vec<f64>, WorkflowError> {
    seeds
        .iter()
        .map(|&seed| {
            let ctx = StackContext {
                base_dir: Some(base_dir.to_path_buf()),
                seed,
            };
            let (stack, _, preds) = train_and_predict(config, registry, &ctx, epochs).map_err(WorkflowError::Bench)?;
            let (scores, _) = score(&preds, &[Metric::Nmae], &stack).map_err(|e| WorkflowError::Bench(e.to_string()))?;
            scores
                .iter()
                .find(|m| m.grain == Grain::Unit)
                .map(|m| m.value)
                .ok_or_else(|| WorkflowError::Bench("nMAE undefined: evaluation targets have zero range".into()))
        })
        .collect()
}

/// Swaps only the model binding, retrains both models over the benchmark
/// seeds and emits one comparison row.
pub fn bench(dir: &RunDir, baseline: &str) -> Result<BenchResult, WorkflowError> {
    let state = dir.load_state()?;
    if dir.read_sidecar(ArtifactSlot::TrainingLog).is_none() {
        return Err(WorkflowError::Bench("run has no trained implementation (07 missing)".into()));
    }
    let spec = load_spec(dir).map_err(WorkflowError::Spec)?;
    let prep = prepare(&spec).map_err(WorkflowError::Spec)?;
    let config = final_config(dir)?;
    let contract = contract_for(&config, &prep.registry).ok_or_else(|| WorkflowError::Bench("no task contract".into()))?;
    let swapped = benchmark_swap(&config, &ComponentRef::new(SlotFamily::Model, baseline), &prep.registry, &contract)?;
    let seeds = spec.bench_seeds(state.seed);
    let mode = state.mode;
    let epochs = |e| epochs_for(mode, &spec, e);
    let impl_scores = seed_scores(&config, &prep.registry, &dir.root, &seeds, epochs)?;
    let base_scores = seed_scores(&swapped, &prep.registry, &dir.root, &seeds, epochs)?;
    let cells = bench_row(vec![("IMPL".into(), impl_scores), (baseline.to_uppercase(), base_scores)]);
    let task = match contract.task_kind {
        TaskKind::Prognostics => "rul",
        TaskKind::Diagnostics => "diagnostics",
    };
    let row = format_bench_row(task, &cells);
    let result = BenchResult {
        task: task.into(),
        metric: "unit.nmae".into(),
        seeds,
        cells,
        row,
        impl_config: config.to_tree(),
        baseline_config: swapped.to_tree(),
    };
    let v = serde_json::to_value(&result).expect("serializes");
    write_atomic(&dir.root.join(format!("bench-{baseline}.json")), to_pretty_json(&v).as_bytes()).map_err(ControlError::from)?;
    Ok(result)
}

/// Minimal machine view of a run for `status`.
pub fn status_value(state: &RunState, dir: &RunDir) -> Value {
    let snap = get_status(state, Some(dir));
    let mut m = Map::new();
    m.insert("status".into(), serde_json::to_value(&snap).expect("serializes"));
    m.insert("artifacts".into(), serde_json::to_value(dir.artifact_index()).expect("serializes"));
    Value::Object(m)
}

//! The run control plane: one `run_state.json` per run directory, ordered
//! phases with declarative artifact gates, three separate status axes, and
//! paired machine/human artifacts written by a single writer.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::assumptions::format_scalar;

pub const STATE_FILE: &str = "run_state.json";
pub const LOCK_FILE: &str = ".run.lock";
pub const STATE_SCHEMA: &str = "phm-harness/run-state/v1";
/// The resolved paper-spec input, written during P0.
pub const INPUT_FILE: &str = "paper-spec.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "P0_input_check")]
    P0InputCheck,
    #[serde(rename = "P1_ingest")]
    P1Ingest,
    #[serde(rename = "P2_analyze")]
    P2Analyze,
    #[serde(rename = "P3_blueprint")]
    P3Blueprint,
    #[serde(rename = "P3_5_hypothesis")]
    P35Hypothesis,
    #[serde(rename = "P4_experiment")]
    P4Experiment,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::P0InputCheck,
        Phase::P1Ingest,
        Phase::P2Analyze,
        Phase::P3Blueprint,
        Phase::P35Hypothesis,
        Phase::P4Experiment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::P0InputCheck => "P0_input_check",
            Phase::P1Ingest => "P1_ingest",
            Phase::P2Analyze => "P2_analyze",
            Phase::P3Blueprint => "P3_blueprint",
            Phase::P35Hypothesis => "P3_5_hypothesis",
            Phase::P4Experiment => "P4_experiment",
        }
    }

    pub fn index(self) -> usize {
        Phase::ALL.iter().position(|p| *p == self).expect("listed")
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown phase `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ArtifactSlot {
    #[serde(rename = "00")]
    PaperHub,
    #[serde(rename = "01")]
    ChunkIndex,
    #[serde(rename = "02")]
    ConceptualAnalysis,
    #[serde(rename = "03")]
    AlgorithmicSpec,
    #[serde(rename = "04")]
    ImplementationBlueprint,
    #[serde(rename = "05")]
    PaperHypothesis,
    #[serde(rename = "06")]
    SanityLadderLog,
    #[serde(rename = "07")]
    TrainingLog,
    #[serde(rename = "08")]
    EvaluationReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JsonKind {
    Object,
    Array,
    String,
    Number,
    Any,
}

impl JsonKind {
    fn matches(self, v: &Value) -> bool {
        match self {
            JsonKind::Object => v.is_object(),
            JsonKind::Array => v.is_array(),
            JsonKind::String => v.is_string(),
            JsonKind::Number => v.is_number(),
            JsonKind::Any => true,
        }
    }
}

impl ArtifactSlot {
    pub const ALL: [ArtifactSlot; 9] = [
        ArtifactSlot::PaperHub,
        ArtifactSlot::ChunkIndex,
        ArtifactSlot::ConceptualAnalysis,
        ArtifactSlot::AlgorithmicSpec,
        ArtifactSlot::ImplementationBlueprint,
        ArtifactSlot::PaperHypothesis,
        ArtifactSlot::SanityLadderLog,
        ArtifactSlot::TrainingLog,
        ArtifactSlot::EvaluationReport,
    ];

    pub fn number(self) -> &'static str {
        ["00", "01", "02", "03", "04", "05", "06", "07", "08"][self as usize]
    }

    pub fn stem(self) -> &'static str {
        match self {
            ArtifactSlot::PaperHub => "00-paper-hub",
            ArtifactSlot::ChunkIndex => "01-chunk-index",
            ArtifactSlot::ConceptualAnalysis => "02-conceptual-analysis",
            ArtifactSlot::AlgorithmicSpec => "03-algorithmic-spec",
            ArtifactSlot::ImplementationBlueprint => "04-implementation-blueprint",
            ArtifactSlot::PaperHypothesis => "05-paper-hypothesis",
            ArtifactSlot::SanityLadderLog => "06-sanity-ladder-log",
            ArtifactSlot::TrainingLog => "07-training-log",
            ArtifactSlot::EvaluationReport => "08-evaluation-report",
        }
    }

    pub fn schema_id(self) -> String {
        format!("phm-harness/{}/v1", &self.stem()[3..])
    }

    /// Required top-level keys and their JSON kinds.
    pub fn required_keys(self) -> &'static [(&'static str, JsonKind)] {
        use JsonKind::*;
        match self {
            ArtifactSlot::PaperHub => &[("paper_id", String), ("title", String), ("sections", Array)],
            ArtifactSlot::ChunkIndex => &[("chunks", Array)],
            ArtifactSlot::ConceptualAnalysis => &[("claims", Array), ("datasets", Array), ("assumptions", Array)],
            ArtifactSlot::AlgorithmicSpec => &[
                ("hyperparameters", Object),
                ("substitutions", Array),
                ("annotated_config", String),
                ("dataset_mapping", Object),
            ],
            ArtifactSlot::ImplementationBlueprint => &[
                ("binding", Object),
                ("composition_trace", Array),
                ("typecheck", Object),
                ("binding_states", Object),
                ("required_new_files", Array),
                ("validation_matrix", Array),
            ],
            ArtifactSlot::PaperHypothesis => &[("status", String), ("claims", Array)],
            ArtifactSlot::SanityLadderLog => &[("attempts", Array), ("repair", Object), ("verdict", String)],
            ArtifactSlot::TrainingLog => &[("seeds", Array), ("runs", Array)],
            ArtifactSlot::EvaluationReport => &[
                ("artifact_status", String),
                ("technical_status", String),
                ("scientific_status", String),
                ("metrics", Array),
                ("claims", Array),
                ("baselines", Object),
            ],
        }
    }

    /// Schema check: an object carrying every required key with its kind.
    pub fn validate(self, payload: &Value) -> Result<(), String> {
        let obj = payload.as_object().ok_or("payload must be a JSON object")?;
        for (key, kind) in self.required_keys() {
            match obj.get(*key) {
                None => return Err(format!("missing required key `{key}`")),
                Some(v) if !kind.matches(v) => return Err(format!("`{key}` must be {kind:?}")),
                _ => {}
            }
        }
        if self == ArtifactSlot::PaperHypothesis {
            let s = obj["status"].as_str().unwrap_or_default();
            if s != "PRE_REGISTERED" && s != "BENCHMARK_ONLY" {
                return Err(format!("status must be PRE_REGISTERED or BENCHMARK_ONLY, got `{s}`"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ArtifactSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.number())
    }
}

impl FromStr for ArtifactSlot {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ArtifactSlot::ALL
            .into_iter()
            .find(|a| a.number() == s || a.stem() == s)
            .ok_or_else(|| format!("unknown artifact slot `{s}`"))
    }
}

// ---------------------------------------------------------------------------
// Policy

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateItem {
    Slot(ArtifactSlot),
    /// A non-artifact file that must exist and parse as JSON.
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPolicy {
    pub retry_budget: usize,
    pub gates: BTreeMap<Phase, Vec<GateItem>>,
    /// With a BENCHMARK_ONLY hypothesis, skip claim matching entirely.
    pub suppress_claims_when_benchmark_only: bool,
}

impl Default for ControlPolicy {
    fn default() -> Self {
        use ArtifactSlot::*;
        let s = GateItem::Slot;
        ControlPolicy {
            retry_budget: 2,
            gates: BTreeMap::from([
                (Phase::P0InputCheck, vec![GateItem::Input(INPUT_FILE.into())]),
                (Phase::P1Ingest, vec![s(PaperHub), s(ChunkIndex)]),
                (Phase::P2Analyze, vec![s(ConceptualAnalysis), s(AlgorithmicSpec)]),
                (Phase::P3Blueprint, vec![s(ImplementationBlueprint)]),
                (Phase::P35Hypothesis, vec![s(PaperHypothesis)]),
                (Phase::P4Experiment, vec![s(SanityLadderLog), s(TrainingLog), s(EvaluationReport)]),
            ]),
            suppress_claims_when_benchmark_only: true,
        }
    }
}

impl ControlPolicy {
    pub fn gate(&self, phase: Phase) -> &[GateItem] {
        self.gates.get(&phase).map(Vec::as_slice).unwrap_or(&[])
    }
}

// ---------------------------------------------------------------------------
// State

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BlueprintOnly,
    Quick,
    Full,
}

impl Mode {
    /// Phases a mode never runs.
    pub fn skips(self, phase: Phase) -> bool {
        self == Mode::BlueprintOnly && phase > Phase::P3Blueprint
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "blueprint-only" | "blueprint_only" => Ok(Mode::BlueprintOnly),
            "quick" => Ok(Mode::Quick),
            "full" => Ok(Mode::Full),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseStatus {
    NotStarted,
    InProgress,
    Complete,
    Failed,
    SkippedByMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub status: PhaseStatus,
    pub retries_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocker: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactAxis {
    Pending,
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TechnicalAxis {
    Unknown,
    Runnable,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScientificAxis {
    Unknown,
    Validated,
    Plausible,
    Investigate,
    BenchmarkOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusAxes {
    pub artifact: ArtifactAxis,
    pub technical: TechnicalAxis,
    pub scientific: ScientificAxis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub schema: String,
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub phases: Vec<PhaseRecord>,
    pub axes: StatusAxes,
    pub last_event_sequence: u64,
    pub events: Vec<Event>,
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("run directory already holds a run state")]
    AlreadyInitialized,
    #[error("{0} is not a run directory (no {STATE_FILE})")]
    NotARun(PathBuf),
    #[error("cannot start {phase}: {blocking} is not complete")]
    OutOfOrder { phase: Phase, blocking: Phase },
    #[error("{0} has used its whole retry budget")]
    RetriesExhausted(Phase),
    #[error("{phase} is {status:?}, not in progress")]
    NotInProgress { phase: Phase, status: PhaseStatus },
    #[error("{0} is skipped in this mode")]
    SkippedByMode(Phase),
    #[error("cannot start {phase} while {running} is in progress")]
    Busy { phase: Phase, running: Phase },
    #[error("cannot complete {phase}: missing {}", .missing.join(", "))]
    MissingArtifact { phase: Phase, missing: Vec<String> },
    #[error("artifact {slot} is corrupt: {reason}")]
    CorruptArtifact { slot: String, reason: String },
    #[error("payload for {slot} violates its schema: {reason}")]
    SchemaViolation { slot: ArtifactSlot, reason: String },
    #[error("run directory is locked by another process")]
    Locked,
    #[error("corrupt run state: {0}")]
    CorruptState(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl RunState {
    fn fresh(run_id: &str, mode: Mode, seed: u64) -> Self {
        RunState {
            schema: STATE_SCHEMA.into(),
            run_id: run_id.into(),
            mode,
            seed,
            phases: Phase::ALL
                .into_iter()
                .map(|phase| PhaseRecord {
                    phase,
                    status: if mode.skips(phase) {
                        PhaseStatus::SkippedByMode
                    } else {
                        PhaseStatus::NotStarted
                    },
                    retries_used: 0,
                    blocker: None,
                })
                .collect(),
            axes: StatusAxes {
                artifact: ArtifactAxis::Pending,
                technical: TechnicalAxis::Unknown,
                scientific: ScientificAxis::Unknown,
            },
            last_event_sequence: 0,
            events: Vec::new(),
        }
    }

    pub fn phase(&self, phase: Phase) -> &PhaseRecord {
        &self.phases[phase.index()]
    }

    fn phase_mut(&mut self, phase: Phase) -> &mut PhaseRecord {
        &mut self.phases[phase.index()]
    }

    fn event(&mut self, kind: &str, phase: Option<Phase>, detail: Option<String>) {
        self.last_event_sequence += 1;
        self.events.push(Event {
            seq: self.last_event_sequence,
            kind: kind.into(),
            phase,
            detail,
        });
    }

    /// First phase that is neither complete nor skipped.
    pub fn current_phase(&self) -> Option<Phase> {
        self.phases
            .iter()
            .find(|r| !matches!(r.status, PhaseStatus::Complete | PhaseStatus::SkippedByMode))
            .map(|r| r.phase)
    }

    pub fn is_finished(&self) -> bool {
        self.current_phase().is_none()
    }

    fn refresh_artifact_axis(&mut self) {
        self.axes.artifact = if self.phases.iter().any(|r| r.status == PhaseStatus::Failed) {
            ArtifactAxis::Incomplete
        } else if self.is_finished() {
            ArtifactAxis::Complete
        } else {
            ArtifactAxis::Pending
        };
    }

    /// Opens a phase. Retrying a failed phase spends one unit of budget.
    pub fn start_phase(&mut self, phase: Phase, policy: &ControlPolicy) -> Result<(), ControlError> {
        if self.mode.skips(phase) {
            return Err(ControlError::SkippedByMode(phase));
        }
        if let Some(running) = self.phases.iter().find(|r| r.status == PhaseStatus::InProgress) {
            return Err(ControlError::Busy {
                phase,
                running: running.phase,
            });
        }
        if let Some(blocking) = self.phases[..phase.index()]
            .iter()
            .find(|r| r.status != PhaseStatus::Complete)
        {
            return Err(ControlError::OutOfOrder {
                phase,
                blocking: blocking.phase,
            });
        }
        let rec = self.phase_mut(phase);
        match rec.status {
            PhaseStatus::NotStarted => {}
            PhaseStatus::Failed if rec.retries_used < policy.retry_budget => rec.retries_used += 1,
            PhaseStatus::Failed => return Err(ControlError::RetriesExhausted(phase)),
            status => return Err(ControlError::NotInProgress { phase, status }),
        }
        rec.status = PhaseStatus::InProgress;
        rec.blocker = None;
        self.event("start_phase", Some(phase), None);
        self.refresh_artifact_axis();
        Ok(())
    }

    /// Closes a phase once its gate holds on disk.
    pub fn complete_phase(&mut self, phase: Phase, dir: &RunDir, policy: &ControlPolicy) -> Result<(), ControlError> {
        let status = self.phase(phase).status;
        if status != PhaseStatus::InProgress {
            return Err(ControlError::NotInProgress { phase, status });
        }
        let missing = dir.unmet_gate(policy.gate(phase));
        if !missing.is_empty() {
            return Err(ControlError::MissingArtifact { phase, missing });
        }
        self.phase_mut(phase).status = PhaseStatus::Complete;
        self.event("complete_phase", Some(phase), None);
        self.refresh_artifact_axis();
        Ok(())
    }

    pub fn fail_phase(&mut self, phase: Phase, blocker: &str) -> Result<(), ControlError> {
        let status = self.phase(phase).status;
        if status != PhaseStatus::InProgress {
            return Err(ControlError::NotInProgress { phase, status });
        }
        let rec = self.phase_mut(phase);
        rec.status = PhaseStatus::Failed;
        rec.blocker = Some(blocker.to_string());
        self.event("fail_phase", Some(phase), Some(blocker.to_string()));
        self.refresh_artifact_axis();
        Ok(())
    }

    pub fn set_technical(&mut self, t: TechnicalAxis) {
        if self.axes.technical != t {
            self.axes.technical = t;
            self.event("technical", None, Some(format!("{t:?}")));
        }
    }

    /// Records the scientific verdict. It never affects which transitions
    /// are legal.
    pub fn set_scientific(&mut self, s: ScientificAxis) {
        if self.axes.scientific != s {
            self.axes.scientific = s;
            self.event("scientific", None, Some(format!("{s:?}")));
        }
    }
}

/// Read-only view of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusSnapshot {
    pub run_id: String,
    pub mode: Mode,
    pub current_phase: Option<Phase>,
    pub phases: Vec<PhaseRecord>,
    pub axes: StatusAxes,
    /// Highest artifact slot present with its predecessors.
    pub complete_through: Option<ArtifactSlot>,
}

pub fn get_status(state: &RunState, dir: Option<&RunDir>) -> StatusSnapshot {
    let complete_through = dir.and_then(|d| {
        ArtifactSlot::ALL
            .into_iter()
            .take_while(|s| matches!(d.slot_state(*s), SlotState::Valid(_)))
            .last()
    });
    StatusSnapshot {
        run_id: state.run_id.clone(),
        mode: state.mode,
        current_phase: state.current_phase(),
        phases: state.phases.clone(),
        axes: state.axes,
        complete_through,
    }
}

impl StatusSnapshot {
    pub fn render(&self) -> String {
        let mut s = format!("run {} ({:?})\n", self.run_id, self.mode);
        s.push_str(&format!(
            "current phase: {}\n",
            self.current_phase.map_or("finished".to_string(), |p| p.to_string())
        ));
        for r in &self.phases {
            s.push_str(&format!("  {:<16} {:?}", r.phase.as_str(), r.status));
            if r.retries_used > 0 {
                s.push_str(&format!(" (retries {})", r.retries_used));
            }
            if let Some(b) = &r.blocker {
                s.push_str(&format!(" blocker: {b}"));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "artifact: {:?}  technical: {:?}  scientific: {:?}\n",
            self.axes.artifact, self.axes.technical, self.axes.scientific
        ));
        if let Some(slot) = self.complete_through {
            s.push_str(&format!("artifacts complete through {slot}\n"));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Run directory

#[derive(Debug, Clone, PartialEq)]
pub enum SlotState {
    Absent,
    Valid(Value),
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactEntry {
    pub slot: ArtifactSlot,
    pub present: bool,
    pub machine_path: String,
    pub human_path: String,
    pub schema_id: String,
}

/// Holds the exclusive advisory lock for as long as it lives.
#[derive(Debug)]
pub struct RunLock {
    _file: File,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

/// Write-then-rename replacement.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = parent.join(format!(".{name}.tmp"));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn to_pretty_json(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values serialize");
    s.push('\n');
    s
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn state_path(&self) -> PathBuf {
        self.root.join(STATE_FILE)
    }

    pub fn machine_path(&self, slot: ArtifactSlot) -> PathBuf {
        self.root.join(format!("{}.json", slot.stem()))
    }

    pub fn human_path(&self, slot: ArtifactSlot) -> PathBuf {
        self.root.join(format!("{}.md", slot.stem()))
    }

    pub fn is_run(&self) -> bool {
        self.state_path().is_file()
    }

    /// Takes the exclusive lock or fails with [`ControlError::Locked`]. The
    /// operating system drops it if the process dies.
    pub fn lock(&self) -> Result<RunLock, ControlError> {
        fs::create_dir_all(&self.root)?;
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.root.join(LOCK_FILE))?;
        match file.try_lock() {
            Ok(()) => Ok(RunLock { _file: file }),
            Err(fs::TryLockError::WouldBlock) => Err(ControlError::Locked),
            Err(fs::TryLockError::Error(e)) => Err(e.into()),
        }
    }

    pub fn save_state(&self, state: &RunState) -> Result<(), ControlError> {
        let v = serde_json::to_value(state).expect("state serializes");
        write_atomic(&self.state_path(), to_pretty_json(&v).as_bytes())?;
        Ok(())
    }

    pub fn load_state(&self) -> Result<RunState, ControlError> {
        if !self.is_run() {
            return Err(ControlError::NotARun(self.root.clone()));
        }
        let text = fs::read_to_string(self.state_path())?;
        let state: RunState = serde_json::from_str(&text).map_err(|e| ControlError::CorruptState(e.to_string()))?;
        if state.schema != STATE_SCHEMA {
            return Err(ControlError::CorruptState(format!("unknown schema `{}`", state.schema)));
        }
        Ok(state)
    }

    /// Creates and persists a fresh state.
    pub fn init_run(&self, run_id: &str, mode: Mode, seed: u64) -> Result<RunState, ControlError> {
        if self.is_run() {
            return Err(ControlError::AlreadyInitialized);
        }
        fs::create_dir_all(&self.root)?;
        let mut state = RunState::fresh(run_id, mode, seed);
        state.event("init", None, Some(format!("mode={mode:?} seed={seed}")));
        self.save_state(&state)?;
        Ok(state)
    }

    /// Validates, renders and writes both forms. Nothing is written when the
    /// payload fails its schema.
    pub fn write_sidecar(&self, slot: ArtifactSlot, payload: &Value) -> Result<(PathBuf, PathBuf), ControlError> {
        slot.validate(payload)
            .map_err(|reason| ControlError::SchemaViolation { slot, reason })?;
        let machine = to_pretty_json(payload);
        let human = render_markdown(slot, payload);
        if slot == ArtifactSlot::SanityLadderLog {
            let lines: String = payload["attempts"]
                .as_array()
                .expect("validated")
                .iter()
                .map(|a| serde_json::to_string(a).expect("serializes") + "\n")
                .collect();
            write_atomic(&self.root.join(format!("{}.jsonl", slot.stem())), lines.as_bytes())?;
        }
        let (mp, hp) = (self.machine_path(slot), self.human_path(slot));
        write_atomic(&mp, machine.as_bytes())?;
        write_atomic(&hp, human.as_bytes())?;
        Ok((mp, hp))
    }

    /// A slot is valid when both files exist, the machine form passes its
    /// schema, and the human form equals its rendering.
    pub fn slot_state(&self, slot: ArtifactSlot) -> SlotState {
        let (mp, hp) = (self.machine_path(slot), self.human_path(slot));
        if !mp.exists() && !hp.exists() {
            return SlotState::Absent;
        }
        let Ok(text) = fs::read_to_string(&mp) else {
            return SlotState::Corrupt("machine artifact missing or unreadable".into());
        };
        let payload: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return SlotState::Corrupt(format!("machine artifact does not parse: {e}")),
        };
        if let Err(e) = slot.validate(&payload) {
            return SlotState::Corrupt(e);
        }
        match fs::read_to_string(&hp) {
            Ok(h) if h == render_markdown(slot, &payload) => SlotState::Valid(payload),
            Ok(_) => SlotState::Corrupt("human mirror diverges from the machine artifact".into()),
            Err(_) => SlotState::Corrupt("human mirror missing".into()),
        }
    }

    pub fn read_sidecar(&self, slot: ArtifactSlot) -> Option<Value> {
        match self.slot_state(slot) {
            SlotState::Valid(v) => Some(v),
            _ => None,
        }
    }

    pub fn artifact_index(&self) -> Vec<ArtifactEntry> {
        ArtifactSlot::ALL
            .into_iter()
            .map(|slot| ArtifactEntry {
                slot,
                present: matches!(self.slot_state(slot), SlotState::Valid(_)),
                machine_path: format!("{}.json", slot.stem()),
                human_path: format!("{}.md", slot.stem()),
                schema_id: slot.schema_id(),
            })
            .collect()
    }

    fn item_problem(&self, item: &GateItem) -> Option<(String, Option<String>)> {
        match item {
            GateItem::Slot(slot) => match self.slot_state(*slot) {
                SlotState::Valid(_) => None,
                SlotState::Absent => Some((slot.to_string(), None)),
                SlotState::Corrupt(reason) => Some((slot.to_string(), Some(reason))),
            },
            GateItem::Input(name) => match fs::read_to_string(self.root.join(name)) {
                Err(_) => Some((name.clone(), None)),
                Ok(t) => match serde_json::from_str::<Value>(&t) {
                    Ok(_) => None,
                    Err(e) => Some((name.clone(), Some(e.to_string()))),
                },
            },
        }
    }

    /// Gate items that are absent or invalid.
    pub fn unmet_gate(&self, gate: &[GateItem]) -> Vec<String> {
        gate.iter().filter_map(|i| self.item_problem(i)).map(|(n, _)| n).collect()
    }

    /// Rebuilds phase statuses from the artifacts on disk and persists the
    /// result. A phase is complete iff its gate holds and every earlier phase
    /// is complete. Corrupt artifacts are reported after the state is saved.
    pub fn sync_from_artifacts(&self, fallback: (&str, Mode, u64), policy: &ControlPolicy) -> Result<RunState, ControlError> {
        let mut state = match self.load_state() {
            Ok(s) => s,
            Err(ControlError::NotARun(_)) | Err(ControlError::CorruptState(_)) => {
                RunState::fresh(fallback.0, fallback.1, fallback.2)
            }
            Err(e) => return Err(e),
        };
        let mut corrupt = None;
        let mut prefix_ok = true;
        for phase in Phase::ALL {
            let mode = state.mode;
            let rec = state.phase_mut(phase);
            if mode.skips(phase) {
                rec.status = PhaseStatus::SkippedByMode;
                continue;
            }
            let problems: Vec<(String, Option<String>)> =
                policy.gate(phase).iter().filter_map(|i| self.item_problem(i)).collect();
            if corrupt.is_none() {
                corrupt = problems
                    .iter()
                    .find_map(|(n, r)| r.as_ref().map(|r| (n.clone(), r.clone())));
            }
            if prefix_ok && problems.is_empty() {
                rec.status = PhaseStatus::Complete;
                rec.blocker = None;
            } else {
                prefix_ok = false;
                // keep a recorded failure (and its retry count) visible
                if rec.status != PhaseStatus::Failed {
                    rec.status = PhaseStatus::NotStarted;
                }
            }
        }
        state.event("sync_from_artifacts", state.current_phase(), None);
        state.refresh_artifact_axis();
        self.save_state(&state)?;
        match corrupt {
            Some((slot, reason)) => Err(ControlError::CorruptArtifact { slot, reason }),
            None => Ok(state),
        }
    }
}

// ---------------------------------------------------------------------------
// Markdown rendering

fn title(stem: &str) -> String {
    stem[3..]
        .split('-')
        .map(|w| {
            let mut c = w.chars();
            c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        other => format_scalar(other).replace('|', "\\|").replace('\n', " "),
    }
}

fn is_scalar(v: &Value) -> bool {
    !v.is_object() && !v.is_array()
}

/// Columns when `rows` are flat objects; `None` otherwise.
fn table_columns(rows: &[Value]) -> Option<Vec<String>> {
    let mut cols: Vec<String> = Vec::new();
    for r in rows {
        let o = r.as_object()?;
        for (k, v) in o {
            if !is_scalar(v) && !(v.is_array() && v.as_array()?.iter().all(is_scalar)) {
                return None;
            }
            if !cols.contains(k) {
                cols.push(k.clone());
            }
        }
    }
    (!cols.is_empty()).then_some(cols)
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None => String::new(),
        Some(Value::Array(a)) => a.iter().map(scalar).collect::<Vec<_>>().join(", "),
        Some(v) => scalar(v),
    }
}

fn render_block(out: &mut String, v: &Value, indent: usize) {
    let pad = "  ".repeat(indent);
    match v {
        Value::Object(o) if o.is_empty() => out.push_str(&format!("{pad}- (none)\n")),
        Value::Object(o) => {
            for (k, v) in o {
                match v {
                    Value::String(s) if s.contains('\n') => {
                        out.push_str(&format!("{pad}- **{k}**:\n\n{pad}  ```\n"));
                        for line in s.lines() {
                            out.push_str(&format!("{pad}  {line}\n"));
                        }
                        out.push_str(&format!("{pad}  ```\n\n"));
                    }
                    v if is_scalar(v) => out.push_str(&format!("{pad}- **{k}**: {}\n", scalar(v))),
                    Value::Array(a) if a.iter().all(is_scalar) => {
                        let items: Vec<String> = a.iter().map(scalar).collect();
                        out.push_str(&format!("{pad}- **{k}**: [{}]\n", items.join(", ")));
                    }
                    nested => {
                        out.push_str(&format!("{pad}- **{k}**:\n"));
                        render_block(out, nested, indent + 1);
                    }
                }
            }
        }
        Value::Array(a) if a.is_empty() => out.push_str(&format!("{pad}- (none)\n")),
        Value::Array(a) => {
            for (i, item) in a.iter().enumerate() {
                if is_scalar(item) {
                    out.push_str(&format!("{pad}- {}\n", scalar(item)));
                } else {
                    out.push_str(&format!("{pad}- [{i}]\n"));
                    render_block(out, item, indent + 1);
                }
            }
        }
        s => out.push_str(&format!("{pad}{}\n", scalar(s))),
    }
}

fn render_section(out: &mut String, key: &str, v: &Value) {
    out.push_str(&format!("## {key}\n\n"));
    match v {
        Value::String(s) if s.contains('\n') => {
            out.push_str("```\n");
            out.push_str(s);
            if !s.ends_with('\n') {
                out.push('\n');
            }
            out.push_str("```\n");
        }
        v if is_scalar(v) => out.push_str(&format!("{}\n", scalar(v))),
        Value::Array(rows) if !rows.is_empty() && table_columns(rows).is_some() => {
            let cols = table_columns(rows).expect("checked");
            out.push_str(&format!("| {} |\n", cols.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(cols.len())));
            for r in rows {
                let cells: Vec<String> = cols.iter().map(|c| cell(r.get(c))).collect();
                out.push_str(&format!("| {} |\n", cells.join(" | ")));
            }
        }
        other => render_block(out, other, 0),
    }
    out.push('\n');
}

/// Human mirror of a machine payload; a pure function of its inputs.
pub fn render_markdown(slot: ArtifactSlot, payload: &Value) -> String {
    let mut out = format!("# {} {}\n\n", slot.number(), title(slot.stem()));
    out.push_str(&format!(
        "<!-- generated from {}.json ({}); do not edit -->\n\n",
        slot.stem(),
        slot.schema_id()
    ));
    if let Some(o) = payload.as_object() {
        for (k, v) in o {
            render_section(&mut out, k, v);
        }
    }
    out
}

//! Static verification and the pre-training sanity ladder.
//!
//! The ladder builds the framework stack once, then runs the init-loss,
//! gradient-flow and micro-batch overfit checks in that order. Categorical
//! failures stop the ladder; suspicious but executable outcomes are warnings.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::binding::{typecheck, ComponentRegistry, ResolvedConfiguration, SlotFamily, TargetSemantics, TaskContract};
use crate::data::{leakage_audit, Split, SplitDatasetContainer, Window};
use crate::runtime::{build_stack_from, load_datasource, FrameworkStack, StackContext, StackError, StackStage};
use crate::trainer::{
    batch_fit_estimate, fit_batch, Batch, ForwardError, LossKind, ModelInstance, OptimizerState, Scheduler, TRAIN_BATCH,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckId {
    ConfigPreflight,
    Typecheck,
    DryRun,
    Leakage,
    InitLoss,
    GradientFlow,
    OverfitMicrobatch,
    BatchFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: CheckId,
    pub status: CheckStatus,
    pub diagnostics: BTreeMap<String, f64>,
    pub implicated_slots: BTreeSet<SlotFamily>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<String>,
}

impl CheckResult {
    pub fn pass(check_id: CheckId) -> Self {
        CheckResult {
            check_id,
            status: CheckStatus::Pass,
            diagnostics: BTreeMap::new(),
            implicated_slots: BTreeSet::new(),
            messages: Vec::new(),
        }
    }

    /// A failure must name at least one slot.
    pub fn fail(check_id: CheckId, slots: impl IntoIterator<Item = SlotFamily>, message: impl Into<String>) -> Self {
        let implicated_slots: BTreeSet<SlotFamily> = slots.into_iter().collect();
        assert!(!implicated_slots.is_empty(), "a failing check must implicate a slot");
        CheckResult {
            check_id,
            status: CheckStatus::Fail,
            diagnostics: BTreeMap::new(),
            implicated_slots,
            messages: vec![message.into()],
        }
    }

    fn warn(mut self, message: impl Into<String>) -> Self {
        if self.status == CheckStatus::Pass {
            self.status = CheckStatus::Warn;
        }
        self.messages.push(message.into());
        self
    }

    fn diag(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn failed(&self) -> bool {
        self.status == CheckStatus::Fail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SanityVerdict {
    Pass,
    WarnContinue,
    Block,
    PrecheckTimeout,
    DatasetUnavailable,
    DatasetExecutionFailed,
    ToolInvocationFailure,
}

impl SanityVerdict {
    pub fn proceeds(self) -> bool {
        matches!(self, SanityVerdict::Pass | SanityVerdict::WarnContinue)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SanityVerdict::Pass => "PASS",
            SanityVerdict::WarnContinue => "WARN_CONTINUE",
            SanityVerdict::Block => "BLOCK",
            SanityVerdict::PrecheckTimeout => "PRECHECK_TIMEOUT",
            SanityVerdict::DatasetUnavailable => "DATASET_UNAVAILABLE",
            SanityVerdict::DatasetExecutionFailed => "DATASET_EXECUTION_FAILED",
            SanityVerdict::ToolInvocationFailure => "TOOL_INVOCATION_FAILURE",
        }
    }
}

/// Thresholds, all configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationPolicy {
    pub dead_gradient: f64,
    pub vanishing_ratio: f64,
    pub exploding_ratio: f64,
    pub batch_probe: f64,
    pub overfit_ratio: f64,
    pub overfit_class_loss: f64,
    pub init_loss_band: f64,
    pub microbatch: usize,
    pub overfit_steps: usize,
    /// Learning rate for the memorization run; `None` uses the configured one.
    pub overfit_lr: Option<f64>,
    pub check_timeout: Duration,
    pub memory_budget_bytes: u64,
}

impl Default for VerificationPolicy {
    fn default() -> Self {
        VerificationPolicy {
            dead_gradient: 1e-12,
            vanishing_ratio: 1e-8,
            exploding_ratio: 1e3,
            batch_probe: 1e-12,
            overfit_ratio: 1e-3,
            overfit_class_loss: 0.05,
            init_loss_band: 0.2,
            microbatch: 4,
            overfit_steps: 400,
            overfit_lr: Some(1e-2),
            check_timeout: Duration::from_secs(60),
            memory_budget_bytes: 2 << 30,
        }
    }
}

/// Slots a forward-pass error points at.
pub fn forward_error_slots(e: &ForwardError) -> Vec<SlotFamily> {
    match e {
        ForwardError::MissingKey(_) => vec![SlotFamily::Sequencer, SlotFamily::Model],
        ForwardError::ShapeMismatch { key, .. } => match key.as_str() {
            "x" => vec![SlotFamily::Sequencer, SlotFamily::Model],
            "y" => vec![SlotFamily::Task, SlotFamily::Sequencer],
            _ => vec![SlotFamily::Model],
        },
    }
}

fn stack_failure(id: CheckId, e: &StackError) -> CheckResult {
    let slots = if e.implicated.is_empty() {
        vec![SlotFamily::Datasource]
    } else {
        e.implicated.iter().copied().collect()
    };
    CheckResult::fail(id, slots, e.to_string())
}

fn dataset_verdict(e: &StackError) -> Option<SanityVerdict> {
    match e.stage {
        StackStage::DatasetUnavailable => Some(SanityVerdict::DatasetUnavailable),
        StackStage::DatasetExecution => Some(SanityVerdict::DatasetExecutionFailed),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Static layer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticReport {
    pub results: Vec<CheckResult>,
    pub passed: bool,
}

fn typecheck_result(config: &ResolvedConfiguration, registry: &ComponentRegistry, contract: &TaskContract) -> CheckResult {
    let report = typecheck(config, registry, contract);
    if report.passed {
        return CheckResult::pass(CheckId::Typecheck);
    }
    let mut slots = report.implicated_slots();
    if slots.is_empty() {
        // configuration-level problems (unknown keys, hyperparameter table)
        slots.insert(SlotFamily::Model);
    }
    let msg = report
        .violations
        .iter()
        .map(|v| format!("[{}] {}", v.rule_id, v.message))
        .collect::<Vec<_>>()
        .join("; ");
    let mut r = CheckResult::fail(CheckId::Typecheck, slots, msg);
    r.diagnostics.insert("violations".into(), report.violations.len() as f64);
    r
}

/// Container loads, every split is non-empty and no unit crosses splits.
pub fn datasource_preflight(container: &SplitDatasetContainer) -> CheckResult {
    let mut problems = Vec::new();
    for s in Split::ALL {
        if container.split(s).is_empty() {
            problems.push(format!("{} split is empty", s.as_str()));
        }
    }
    let overlap = container.overlapping_units();
    if !overlap.is_empty() {
        problems.push(format!("units in more than one split: {}", overlap.join(", ")));
    }
    if problems.is_empty() {
        CheckResult::pass(CheckId::ConfigPreflight).diag("units", container.units().count() as f64)
    } else {
        CheckResult::fail(CheckId::ConfigPreflight, [SlotFamily::Datasource], problems.join("; "))
    }
}

/// One forward pass on two samples, checking shapes and batch keys.
pub fn dry_run(stack: &FrameworkStack) -> CheckResult {
    let train = stack.windows.split(Split::Train);
    let two: Vec<&Window> = train.iter().take(2).collect();
    let batch = Batch::from_windows(&two, stack.windows.spec.length, stack.windows.n_features);
    match stack.model.forward(&batch) {
        Err(e) => CheckResult::fail(CheckId::DryRun, forward_error_slots(&e), e.to_string()),
        Ok(fp) => {
            let outputs = fp.outputs();
            if !outputs.contains_key("predictions") || !outputs.contains_key("targets") {
                return CheckResult::fail(CheckId::DryRun, [SlotFamily::Model], "model outputs lack predictions/targets");
            }
            CheckResult::pass(CheckId::DryRun).diag("batch", two.len() as f64)
        }
    }
}

pub fn leakage_check(stack: &FrameworkStack) -> CheckResult {
    let report = leakage_audit(&stack.fitted, &stack.raw);
    if report.clean {
        return CheckResult::pass(CheckId::Leakage);
    }
    let slots: Vec<SlotFamily> = report.violations.iter().map(|v| v.slot).collect();
    let msg = report.violations.iter().map(|v| v.message.clone()).collect::<Vec<_>>().join("; ");
    CheckResult::fail(CheckId::Leakage, slots, msg).diag("violations", report.violations.len() as f64)
}

pub fn batch_fit_check(stack: &FrameworkStack, budget_bytes: u64) -> CheckResult {
    match batch_fit_estimate(&stack.model, stack.train_config.optimizer, budget_bytes) {
        Err(e) => CheckResult::fail(CheckId::BatchFit, forward_error_slots(&e), e.to_string()),
        Ok(est) => {
            let r = CheckResult::pass(CheckId::BatchFit)
                .diag("estimated_bytes", est.estimated_bytes as f64)
                .diag("budget_bytes", est.budget_bytes as f64);
            if est.fits {
                r
            } else {
                let mut f = CheckResult::fail(CheckId::BatchFit, [SlotFamily::Model], "fixed batch sizes exceed the memory budget");
                f.diagnostics = r.diagnostics;
                f
            }
        }
    }
}

/// Typecheck, datasource preflight, dry run, leakage and batch fit.
pub fn verify_static(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    contract: &TaskContract,
    ctx: &StackContext,
    policy: &VerificationPolicy,
) -> StaticReport {
    let mut results = vec![typecheck_result(config, registry, contract)];
    match load_datasource(config, registry, contract, ctx) {
        Err(e) => results.push(stack_failure(CheckId::ConfigPreflight, &e)),
        Ok(raw) => {
            let pre = datasource_preflight(&raw);
            let ok = !pre.failed();
            results.push(pre);
            if ok {
                match build_stack_from(config, registry, contract, raw, ctx.seed) {
                    Err(e) => results.push(stack_failure(CheckId::DryRun, &e)),
                    Ok(stack) => {
                        results.push(dry_run(&stack));
                        results.push(leakage_check(&stack));
                        results.push(batch_fit_check(&stack, policy.memory_budget_bytes));
                    }
                }
            }
        }
    }
    let passed = results.iter().all(|r| !r.failed());
    StaticReport { results, passed }
}

// ---------------------------------------------------------------------------
// Sanity ladder

/// Up to `n` train windows spread evenly over the split.
pub fn probe_batch(stack: &FrameworkStack, n: usize) -> Batch {
    let train = stack.windows.split(Split::Train);
    let step = train.len().div_ceil(n.max(1)).max(1);
    let picked: Vec<&Window> = train.iter().step_by(step).collect();
    Batch::from_windows(&picked, stack.windows.spec.length, stack.windows.n_features)
}

/// Mean of the transformed per-time labels over the training units.
fn train_target_mean(stack: &FrameworkStack) -> Option<f64> {
    let labels = stack.transformed.train.iter().flat_map(|u| u.labels.iter().copied());
    let (sum, n) = labels.filter(|l| l.is_finite()).fold((0.0, 0usize), |(s, n), l| (s + l, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// The loss an uninformed model should start near: `ln C` for classification,
/// mean squared distance of the targets from `center` for regression.
/// `center` is the training target mean; `None` falls back to the batch mean.
pub fn init_loss_prior(loss: LossKind, targets: &[f64], classes: usize, center: Option<f64>) -> f64 {
    match loss {
        LossKind::CrossEntropy => (classes as f64).ln(),
        LossKind::Mse => {
            let n = targets.len().max(1) as f64;
            let mean = center.unwrap_or_else(|| targets.iter().sum::<f64>() / n);
            targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n
        }
    }
}

/// Passes iff the initial loss is finite; warns when it strays from the
/// prior by more than the band.
pub fn check_init_loss(
    model: &ModelInstance,
    batch: &Batch,
    target_center: Option<f64>,
    policy: &VerificationPolicy,
) -> CheckResult {
    let fp = match model.forward(batch) {
        Ok(fp) => fp,
        Err(e) => return CheckResult::fail(CheckId::InitLoss, forward_error_slots(&e), e.to_string()),
    };
    let loss = fp.loss_value();
    if !loss.is_finite() {
        return CheckResult::fail(CheckId::InitLoss, [SlotFamily::Model], format!("initial loss is {loss}"));
    }
    let prior = init_loss_prior(model.loss_kind, fp.targets.data(), model.outputs, target_center);
    let deviation = if prior > 0.0 {
        (loss - prior).abs() / prior
    } else if loss == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let r = CheckResult::pass(CheckId::InitLoss)
        .diag("loss", loss)
        .diag("prior", prior)
        .diag("relative_deviation", deviation);
    if deviation > policy.init_loss_band {
        r.warn(format!("initial loss {loss:.6} is {:.1}% away from the prior {prior:.6}", 100.0 * deviation))
    } else {
        r
    }
}

/// Per-parameter gradient health plus a batch-independence probe.
pub fn check_gradient_flow(model: &ModelInstance, batch: &Batch, policy: &VerificationPolicy) -> CheckResult {
    let fp = match model.forward(batch) {
        Ok(fp) => fp,
        Err(e) => return CheckResult::fail(CheckId::GradientFlow, forward_error_slots(&e), e.to_string()),
    };
    let grads = fp.backward();
    let mut r = CheckResult::pass(CheckId::GradientFlow);
    let mut dead = Vec::new();
    let mut exploding = Vec::new();
    let mut vanishing = Vec::new();
    for (g, (_, p)) in grads.iter().zip(&model.params) {
        let gnorm = g.grad.norm();
        let pnorm = p.norm();
        r.diagnostics.insert(format!("grad_norm.{}", g.name), gnorm);
        if !g.reached || !g.grad.is_finite() || g.grad.max_abs() < policy.dead_gradient {
            dead.push(g.name.clone());
            continue;
        }
        if pnorm > 0.0 {
            let ratio = gnorm / pnorm;
            r.diagnostics.insert(format!("ratio.{}", g.name), ratio);
            if ratio > policy.exploding_ratio {
                exploding.push(g.name.clone());
            } else if ratio < policy.vanishing_ratio {
                vanishing.push(g.name.clone());
            }
        }
    }
    let mut failures = Vec::new();
    if !dead.is_empty() {
        failures.push(format!("dead gradients: {}", dead.join(", ")));
    }
    if !exploding.is_empty() {
        failures.push(format!("exploding gradients: {}", exploding.join(", ")));
    }

    if batch.size() >= 2 {
        let base = fp.predictions().clone();
        let mut perturbed = batch.clone();
        let x = perturbed.tensors.get_mut("x").expect("forward succeeded, so x exists");
        let per_sample = x.numel() / batch.size();
        for v in &mut x.data_mut()[..per_sample] {
            *v += 1.0;
        }
        match model.forward(&perturbed) {
            Ok(fp2) => {
                let k = model.outputs;
                let shift = base.data()[k..]
                    .iter()
                    .zip(&fp2.predictions().data()[k..])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                r.diagnostics.insert("batch_probe_shift".into(), shift);
                if !(shift <= policy.batch_probe) {
                    failures.push(format!("perturbing sample 0 moved other samples by {shift:e}"));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }

    if !failures.is_empty() {
        let mut f = CheckResult::fail(CheckId::GradientFlow, [SlotFamily::Model], failures.join("; "));
        f.diagnostics = r.diagnostics;
        f.diagnostics.insert("dead".into(), dead.len() as f64);
        return f;
    }
    if !vanishing.is_empty() {
        return r.warn(format!("vanishing gradients: {}", vanishing.join(", ")));
    }
    r
}

/// Four examples at the 0, 1/3, 2/3 and 1 quantiles of the train targets.
pub fn overfit_microbatch(stack: &FrameworkStack, n: usize) -> Batch {
    let mut train: Vec<&Window> = stack.windows.split(Split::Train).iter().collect();
    train.sort_by(|a, b| a.target.total_cmp(&b.target));
    let picked: Vec<&Window> = (0..n)
        .map(|i| {
            let q = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            train[(q * (train.len() - 1) as f64).round() as usize]
        })
        .collect();
    Batch::from_windows(&picked, stack.windows.spec.length, stack.windows.n_features)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
        .0
}

/// Trains a copy of the model on a tiny batch with the configured optimizer.
pub fn check_overfit_microbatch(
    stack: &FrameworkStack,
    batch: &Batch,
    policy: &VerificationPolicy,
    deadline: Option<Instant>,
) -> CheckResult {
    let slots = [SlotFamily::Model, SlotFamily::Transform];
    let cfg = &stack.train_config;
    let mut opt = match OptimizerState::new(cfg.optimizer, policy.overfit_lr.unwrap_or(cfg.lr), cfg.weight_decay, Scheduler::None) {
        Ok(o) => o,
        Err(e) => return CheckResult::fail(CheckId::OverfitMicrobatch, slots, e.to_string()),
    };
    let mut model = stack.model.clone();
    let labels: Vec<usize> = batch.tensors["y"].data().iter().map(|v| v.round() as usize).collect();
    let classify = stack.contract.target_semantics == TargetSemantics::ClassLabel;
    let mut initial = None;
    let mut timed_out = false;
    let solved = |m: &ModelInstance, loss: f64, initial: f64| -> bool {
        if classify {
            if !(loss < policy.overfit_class_loss) {
                return false;
            }
            let Ok(fp) = m.forward(batch) else { return false };
            fp.predictions()
                .data()
                .chunks(m.outputs)
                .zip(&labels)
                .all(|(row, l)| argmax(row) == *l)
        } else {
            loss <= 0.0 || loss < policy.overfit_ratio * initial
        }
    };
    let losses = fit_batch(&mut model, batch, &mut opt, policy.overfit_steps, |m, loss| {
        let init = *initial.get_or_insert(loss);
        if deadline.is_some_and(|d| Instant::now() > d) {
            timed_out = true;
            return true;
        }
        solved(m, loss, init)
    });
    let losses = match losses {
        Ok(l) => l,
        Err(e) => return CheckResult::fail(CheckId::OverfitMicrobatch, slots, e.to_string()),
    };
    let first = losses[0];
    let last = *losses.last().expect("at least one loss");
    let steps = losses.len() - 1;
    let mut r = CheckResult::pass(CheckId::OverfitMicrobatch)
        .diag("initial_loss", first)
        .diag("final_loss", last)
        .diag("steps", steps as f64);
    if timed_out {
        r.diagnostics.insert("timed_out".into(), 1.0);
    }
    if solved(&model, last, first) {
        return r;
    }
    let mut f = CheckResult::fail(
        CheckId::OverfitMicrobatch,
        slots,
        format!("loss {first:.3e} -> {last:.3e} after {steps} steps did not reach the memorization target"),
    );
    f.diagnostics = r.diagnostics;
    f
}

/// One ladder attempt as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderLogEntry {
    pub attempt: usize,
    pub checks: Vec<CheckResult>,
    pub verdict: SanityVerdict,
    /// Logical clock: the attempt's position in the log.
    pub timestamp: u64,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LadderLogError {
    #[error("attempt {got} does not follow {last}")]
    NonMonotonic { last: usize, got: usize },
    #[error("bad ladder log line {0}: {1}")]
    Parse(usize, String),
}

/// Append-only attempt log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LadderLog {
    entries: Vec<LadderLogEntry>,
}

impl LadderLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LadderLogEntry] {
        &self.entries
    }

    pub fn next_attempt(&self) -> usize {
        self.entries.last().map_or(0, |e| e.attempt + 1)
    }

    pub fn append(&mut self, entry: LadderLogEntry) -> Result<(), LadderLogError> {
        if let Some(last) = self.entries.last() {
            if entry.attempt <= last.attempt {
                return Err(LadderLogError::NonMonotonic {
                    last: last.attempt,
                    got: entry.attempt,
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entries serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LadderLogError> {
        let mut log = LadderLog::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: LadderLogEntry = serde_json::from_str(line).map_err(|e| LadderLogError::Parse(i + 1, e.to_string()))?;
            log.append(e)?;
        }
        Ok(log)
    }
}

/// Verdict from a finished check list.
pub fn verdict_of(results: &[CheckResult]) -> SanityVerdict {
    if results.iter().any(|r| r.diagnostics.get("timed_out") == Some(&1.0)) {
        SanityVerdict::PrecheckTimeout
    } else if results.iter().any(CheckResult::failed) {
        SanityVerdict::Block
    } else if results.iter().any(|r| r.status == CheckStatus::Warn) {
        SanityVerdict::WarnContinue
    } else {
        SanityVerdict::Pass
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderOutcome {
    pub verdict: SanityVerdict,
    pub checks: Vec<CheckResult>,
}

fn timed(result: CheckResult, started: Instant, timeout: Duration) -> CheckResult {
    if started.elapsed() > timeout {
        let mut r = result;
        r.diagnostics.insert("timed_out".into(), 1.0);
        r
    } else {
        result
    }
}

/// Runs the three ladder checks, cheapest first, on an already built stack.
pub fn run_checks(stack: &FrameworkStack, policy: &VerificationPolicy) -> LadderOutcome {
    let probe = probe_batch(stack, TRAIN_BATCH);
    let mut checks = Vec::new();

    let t = Instant::now();
    let init = timed(check_init_loss(&stack.model, &probe, train_target_mean(stack), policy), t, policy.check_timeout);
    let stop = init.failed() || init.diagnostics.contains_key("timed_out");
    checks.push(init);
    if !stop {
        let t = Instant::now();
        let grad = timed(check_gradient_flow(&stack.model, &probe, policy), t, policy.check_timeout);
        let stop = grad.failed() || grad.diagnostics.contains_key("timed_out");
        checks.push(grad);
        if !stop {
            let t = Instant::now();
            let micro = overfit_microbatch(stack, policy.microbatch);
            let r = check_overfit_microbatch(stack, &micro, policy, Some(t + policy.check_timeout));
            checks.push(timed(r, t, policy.check_timeout));
        }
    }
    LadderOutcome {
        verdict: verdict_of(&checks),
        checks,
    }
}

/// Preflight (typecheck, then stack build), then the ladder checks.
pub fn run_ladder_on(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    contract: &TaskContract,
    loaded: Result<SplitDatasetContainer, StackError>,
    seed: u64,
    policy: &VerificationPolicy,
) -> LadderOutcome {
    let tc = typecheck_result(config, registry, contract);
    if tc.failed() {
        let mut pre = tc;
        pre.check_id = CheckId::ConfigPreflight;
        return LadderOutcome {
            verdict: SanityVerdict::ToolInvocationFailure,
            checks: vec![pre],
        };
    }
    let raw = match loaded {
        Ok(raw) => raw,
        Err(e) => {
            return LadderOutcome {
                verdict: dataset_verdict(&e).unwrap_or(SanityVerdict::ToolInvocationFailure),
                checks: vec![stack_failure(CheckId::ConfigPreflight, &e)],
            }
        }
    };
    match build_stack_from(config, registry, contract, raw, seed) {
        Err(e) => LadderOutcome {
            verdict: dataset_verdict(&e).unwrap_or(SanityVerdict::ToolInvocationFailure),
            checks: vec![stack_failure(CheckId::ConfigPreflight, &e)],
        },
        Ok(stack) => run_checks(&stack, policy),
    }
}

/// Static layer and ladder as a single gate: typecheck, loading, preflight,
/// dry run, leakage and batch fit on one stack, then the three ladder checks.
pub fn run_verification(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    contract: &TaskContract,
    loaded: Result<SplitDatasetContainer, StackError>,
    seed: u64,
    policy: &VerificationPolicy,
) -> LadderOutcome {
    let tc = typecheck_result(config, registry, contract);
    if tc.failed() {
        return LadderOutcome {
            verdict: SanityVerdict::ToolInvocationFailure,
            checks: vec![tc],
        };
    }
    let stop = |verdict, checks| LadderOutcome { verdict, checks };
    let raw = match loaded {
        Ok(raw) => raw,
        Err(e) => {
            let v = dataset_verdict(&e).unwrap_or(SanityVerdict::ToolInvocationFailure);
            return stop(v, vec![tc, stack_failure(CheckId::ConfigPreflight, &e)]);
        }
    };
    let pre = datasource_preflight(&raw);
    if pre.failed() {
        return stop(SanityVerdict::DatasetExecutionFailed, vec![tc, pre]);
    }
    let stack = match build_stack_from(config, registry, contract, raw, seed) {
        Ok(s) => s,
        Err(e) => {
            let v = dataset_verdict(&e).unwrap_or(SanityVerdict::ToolInvocationFailure);
            return stop(v, vec![tc, pre, stack_failure(CheckId::DryRun, &e)]);
        }
    };
    let mut checks = vec![tc, pre, dry_run(&stack), leakage_check(&stack), batch_fit_check(&stack, policy.memory_budget_bytes)];
    if checks.iter().any(CheckResult::failed) {
        return stop(SanityVerdict::Block, checks);
    }
    checks.extend(run_checks(&stack, policy).checks);
    LadderOutcome {
        verdict: verdict_of(&checks),
        checks,
    }
}

/// Full ladder invocation with the attempt appended to `log`.
pub fn run_ladder(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    contract: &TaskContract,
    ctx: &StackContext,
    policy: &VerificationPolicy,
    log: &mut LadderLog,
) -> (SanityVerdict, LadderLogEntry) {
    let loaded = load_datasource(config, registry, contract, ctx);
    let outcome = run_ladder_on(config, registry, contract, loaded, ctx.seed, policy);
    record_attempt(log, config, outcome, None)
}

pub fn record_attempt(
    log: &mut LadderLog,
    config: &ResolvedConfiguration,
    outcome: LadderOutcome,
    note: Option<String>,
) -> (SanityVerdict, LadderLogEntry) {
    let attempt = log.next_attempt();
    let entry = LadderLogEntry {
        attempt,
        checks: outcome.checks,
        verdict: outcome.verdict,
        timestamp: attempt as u64,
        config_digest: config.digest(),
        note,
    };
    log.append(entry.clone()).expect("next_attempt is monotonic");
    (outcome.verdict, entry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{architecture_for, Tensor};
    use serde_json::{json, Value};

    pub(crate) fn tree(model: &str) -> Value {
        json!({
            "task": {"component": "rul_prognostics", "rul_clip": 60.0},
            "datasource": {"component": "synthetic_degradation", "n_train": 6, "n_val": 2, "n_test": 2},
            "transform": {"component": "zscore", "fit_on": "train", "assign_to": ["*", "target"]},
            "sequencer": {"component": "sliding_window", "length": 8, "stride": 2},
            "model": {"component": model},
            "evaluator": {"component": "rul_metrics"}
        })
    }

    fn ladder(t: &Value) -> LadderOutcome {
        let cfg = ResolvedConfiguration::from_tree(t, vec![]).unwrap();
        let reg = ComponentRegistry::builtin();
        let contract = crate::runtime::contract_for(&cfg, &reg).unwrap();
        let ctx = StackContext::default();
        let loaded = load_datasource(&cfg, &reg, &contract, &ctx);
        run_ladder_on(&cfg, &reg, &contract, loaded, 0, &VerificationPolicy::default())
    }

    #[test]
    fn uniform_logits_match_ln_c() {
        let arch = architecture_for("linear", None).unwrap();
        let mut m = ModelInstance::new("z", arch, 2, 3, 10, LossKind::CrossEntropy, 1);
        for (_, p) in &mut m.params {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut b = Batch::default();
        b.tensors.insert("x".into(), Tensor::new(vec![3, 2, 3], vec![0.5; 18]).unwrap());
        b.tensors.insert("y".into(), Tensor::new(vec![3], vec![0.0, 4.0, 9.0]).unwrap());
        let r = check_init_loss(&m, &b, None, &VerificationPolicy::default());
        assert_eq!(r.status, CheckStatus::Pass);
        assert!((r.diagnostics["loss"] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn healthy_models_pass() {
        for m in ["linear", "mlp"] {
            let out = ladder(&tree(m));
            assert_eq!(out.verdict, SanityVerdict::Pass, "{m}: {:#?}", out.checks);
            assert_eq!(out.checks.len(), 3);
        }
    }

    #[test]
    fn planted_bugs_block() {
        for (m, failing) in [
            ("dead_branch_mlp", CheckId::GradientFlow),
            ("batch_mixing_mlp", CheckId::GradientFlow),
            ("constant_head", CheckId::OverfitMicrobatch),
            ("nan_head", CheckId::InitLoss),
            ("flat_head", CheckId::InitLoss),
        ] {
            let out = ladder(&tree(m));
            assert_eq!(out.verdict, SanityVerdict::Block, "{m}");
            let last = out.checks.last().unwrap();
            assert_eq!(last.check_id, failing, "{m}");
            assert!(last.failed() && !last.implicated_slots.is_empty());
        }
    }

    #[test]
    fn malformed_config_runs_no_checks() {
        let mut t = tree("mlp");
        t["model"] = json!({"component": "no_such_model"});
        let out = ladder(&t);
        assert_eq!(out.verdict, SanityVerdict::ToolInvocationFailure);
        assert_eq!(out.checks.len(), 1);
        assert_eq!(out.checks[0].check_id, CheckId::ConfigPreflight);
    }

    #[test]
    fn unscaled_target_warns_but_continues() {
        let mut t = tree("linear");
        t["transform"]["assign_to"] = json!(["*"]);
        let out = ladder(&t);
        assert_eq!(out.checks[0].status, CheckStatus::Warn);
        assert!(out.checks.len() >= 2);
    }

    #[test]
    fn regression_prior_is_taken_about_the_given_center() {
        let t = [1.0, 3.0];
        assert_eq!(init_loss_prior(LossKind::Mse, &t, 1, None), 1.0);
        // offset 2 from the center adds 4
        assert_eq!(init_loss_prior(LossKind::Mse, &t, 1, Some(0.0)), 5.0);
        assert_eq!(init_loss_prior(LossKind::CrossEntropy, &t, 4, Some(9.0)), 4f64.ln());
    }

    #[test]
    fn zero_timeout_yields_precheck_timeout() {
        let cfg = ResolvedConfiguration::from_tree(&tree("mlp"), vec![]).unwrap();
        let reg = ComponentRegistry::builtin();
        let contract = crate::runtime::contract_for(&cfg, &reg).unwrap();
        let policy = VerificationPolicy {
            check_timeout: Duration::ZERO,
            ..Default::default()
        };
        let loaded = load_datasource(&cfg, &reg, &contract, &StackContext::default());
        let out = run_ladder_on(&cfg, &reg, &contract, loaded, 0, &policy);
        assert_eq!(out.verdict, SanityVerdict::PrecheckTimeout);
    }

    #[test]
    fn static_layer_examples() {
        let reg = ComponentRegistry::builtin();
        let policy = VerificationPolicy::default();
        let run = |t: &Value| {
            let cfg = ResolvedConfiguration::from_tree(t, vec![]).unwrap();
            let contract = crate::runtime::contract_for(&cfg, &reg).unwrap();
            verify_static(&cfg, &reg, &contract, &StackContext::default(), &policy)
        };
        let ok = run(&tree("mlp"));
        assert!(ok.passed, "{:#?}", ok.results);

        let mut empty = tree("mlp");
        empty["datasource"]["n_train"] = json!(0);
        let r = run(&empty);
        let pre = r.results.iter().find(|c| c.check_id == CheckId::ConfigPreflight).unwrap();
        assert!(pre.failed());
        assert_eq!(pre.implicated_slots, BTreeSet::from([SlotFamily::Datasource]));

        let r = run(&tree("flat_head"));
        let dry = r.results.iter().find(|c| c.check_id == CheckId::DryRun).unwrap();
        assert!(dry.failed());
        assert_eq!(dry.implicated_slots, BTreeSet::from([SlotFamily::Model]));
    }

    #[test]
    fn log_is_append_only() {
        let mut log = LadderLog::new();
        let cfg = ResolvedConfiguration::from_tree(&tree("mlp"), vec![]).unwrap();
        for _ in 0..3 {
            record_attempt(
                &mut log,
                &cfg,
                LadderOutcome {
                    verdict: SanityVerdict::Pass,
                    checks: vec![],
                },
                None,
            );
        }
        let mut stale = log.entries()[0].clone();
        assert!(log.append(stale.clone()).is_err());
        stale.attempt = 3;
        log.append(stale).unwrap();
        assert_eq!(LadderLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    }
}

//! Bounded assumption repair.
//!
//! On a failed gate, the first attributable assumption (in ledger insertion
//! order) with an untried alternative is revised, exactly one configuration
//! leaf is patched, and the gate runs again. The selector is a fixed rule
//! table; nothing here is learned.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::assumptions::{attributable, Exhausted, Ledger};
use crate::binding::{ComposeError, Directive, ResolvedConfiguration, SlotFamily};
use crate::verification::{CheckId, CheckResult, CheckStatus, LadderOutcome, SanityVerdict};

pub const VERIFY_BUDGET: usize = 10;
pub const DISPUTE_BUDGET: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureClass {
    ImplBug,
    HpMismatch,
    LossComposition,
    DataPipeline,
}

/// Rule table over failing checks.
pub fn classify_failure(results: &[CheckResult]) -> Vec<(CheckId, FailureClass)> {
    let gradients_ok = results
        .iter()
        .any(|r| r.check_id == CheckId::GradientFlow && !r.failed());
    results
        .iter()
        .filter(|r| r.failed())
        .map(|r| {
            let class = match r.check_id {
                CheckId::DryRun | CheckId::GradientFlow => FailureClass::ImplBug,
                CheckId::OverfitMicrobatch if gradients_ok => FailureClass::HpMismatch,
                CheckId::OverfitMicrobatch => FailureClass::ImplBug,
                CheckId::InitLoss if r.messages.iter().any(|m| m.starts_with("initial loss")) => {
                    FailureClass::LossComposition
                }
                CheckId::InitLoss => FailureClass::ImplBug,
                CheckId::ConfigPreflight | CheckId::Leakage => FailureClass::DataPipeline,
                CheckId::Typecheck
                    if r.implicated_slots.contains(&SlotFamily::Datasource)
                        || r.implicated_slots.contains(&SlotFamily::Transform) =>
                {
                    FailureClass::DataPipeline
                }
                CheckId::Typecheck => FailureClass::ImplBug,
                CheckId::BatchFit => FailureClass::HpMismatch,
            };
            (r.check_id, class)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetChange {
    pub assumption: usize,
    pub slot: SlotFamily,
    pub path: String,
    pub new_value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub global_hypothesis: String,
    pub target_change: TargetChange,
    pub predicted_effect: BTreeMap<CheckId, CheckStatus>,
    pub falsification_criterion: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Hypothesis(Hypothesis),
    NoAttributableAssumption { implicated: BTreeSet<SlotFamily> },
}

/// One hypothesis covering every failing check jointly.
pub fn propose(ledger: &Ledger, results: &[CheckResult]) -> Proposal {
    let failing: Vec<&CheckResult> = results.iter().filter(|r| r.failed()).collect();
    let implicated: BTreeSet<SlotFamily> = failing.iter().flat_map(|r| r.implicated_slots.iter().copied()).collect();
    let Some(record) = ledger
        .records()
        .iter()
        .find(|r| attributable(r, &implicated) && !r.is_exhausted())
    else {
        return Proposal::NoAttributableAssumption { implicated };
    };
    let new_value = record.peek_alternative().expect("not exhausted").clone();
    let checks: Vec<String> = failing
        .iter()
        .map(|r| serde_json::to_value(r.check_id).expect("enum").as_str().unwrap_or_default().to_string())
        .collect();
    Proposal::Hypothesis(Hypothesis {
        global_hypothesis: format!(
            "assumption {} ({} = {}) explains failing checks [{}]",
            record.id,
            record.path,
            record.value,
            checks.join(", ")
        ),
        target_change: TargetChange {
            assumption: record.id,
            slot: record.slot,
            path: record.path.clone(),
            new_value: new_value.clone(),
        },
        predicted_effect: failing.iter().map(|r| (r.check_id, CheckStatus::Pass)).collect(),
        falsification_criterion: format!(
            "any of [{}] still fails with {} = {}",
            checks.join(", "),
            record.path,
            new_value
        ),
    })
}

/// Configuration paths the loop may write, as `(slot, path prefix)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutableSlotWhitelist {
    pub entries: BTreeSet<(SlotFamily, String)>,
}

impl MutableSlotWhitelist {
    pub fn new(entries: impl IntoIterator<Item = (SlotFamily, String)>) -> Self {
        MutableSlotWhitelist {
            entries: entries.into_iter().collect(),
        }
    }

    /// Transform, sequencer and model parameters plus the hyperparameter
    /// table. Task, datasource and evaluator stay frozen.
    pub fn run_default() -> Self {
        Self::new([
            (SlotFamily::Transform, "transform".to_string()),
            (SlotFamily::Sequencer, "sequencer".to_string()),
            (SlotFamily::Model, "model".to_string()),
            (SlotFamily::Model, "hyperparameters".to_string()),
        ])
    }

    pub fn allows(&self, path: &str) -> bool {
        self.entries.iter().any(|(_, prefix)| {
            path == prefix || (path.starts_with(prefix.as_str()) && path[prefix.len()..].starts_with('.'))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PatchError {
    #[error("path `{0}` is outside the writable whitelist")]
    WhitelistViolation(String),
    #[error(transparent)]
    Exhausted(#[from] Exhausted),
    #[error("ledger alternative {got} does not match the hypothesis {expected}")]
    StaleHypothesis { expected: Value, got: Value },
    #[error("assumption {0} is not in the ledger")]
    UnknownAssumption(usize),
    #[error(transparent)]
    Compose(#[from] ComposeError),
}

/// Applies the hypothesis' single change and consumes the alternative.
pub fn apply_patch(
    config: &ResolvedConfiguration,
    hypothesis: &Hypothesis,
    whitelist: &MutableSlotWhitelist,
    ledger: &mut Ledger,
) -> Result<ResolvedConfiguration, PatchError> {
    let tc = &hypothesis.target_change;
    if !whitelist.allows(&tc.path) {
        return Err(PatchError::WhitelistViolation(tc.path.clone()));
    }
    let record = ledger.get(tc.assumption).ok_or(PatchError::UnknownAssumption(tc.assumption))?;
    match record.peek_alternative() {
        Some(v) if *v == tc.new_value => {}
        Some(v) => {
            return Err(PatchError::StaleHypothesis {
                expected: tc.new_value.clone(),
                got: v.clone(),
            })
        }
        None => return Err(Exhausted(tc.assumption).into()),
    }
    let patched = config.apply(Directive::Repair {
        path: tc.path.clone(),
        value: tc.new_value.clone(),
        assumption: tc.assumption,
    })?;
    ledger.select_alternative(tc.assumption)?;
    Ok(patched)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RepairTerminal {
    Pass,
    WarnContinue,
    Escalate,
    FrameworkChangeRequired,
    DatasetRecoveryRequired,
    /// No recorded assumption touches the failing slots; the original
    /// failure stands.
    NoAttributableAssumption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub failure_classes: Vec<(CheckId, FailureClass)>,
    pub hypothesis: Hypothesis,
    pub pre_verdict: SanityVerdict,
    pub pre: Vec<CheckResult>,
    pub post_verdict: SanityVerdict,
    pub post: Vec<CheckResult>,
    pub falsified: bool,
    /// A check that passed before the patch fails after it.
    pub regressed: bool,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairOutcome {
    pub terminal: RepairTerminal,
    pub final_report: LadderOutcome,
    pub config: ResolvedConfiguration,
    pub iterations: Vec<IterationRecord>,
    pub detail: Option<String>,
}

fn status_of(results: &[CheckResult], id: CheckId) -> Option<CheckStatus> {
    results.iter().find(|r| r.check_id == id).map(|r| r.status)
}

fn is_falsified(h: &Hypothesis, post: &[CheckResult]) -> bool {
    h.predicted_effect
        .keys()
        .any(|id| !matches!(status_of(post, *id), Some(CheckStatus::Pass | CheckStatus::Warn)))
}

fn is_regression(pre: &[CheckResult], post: &[CheckResult]) -> bool {
    pre.iter()
        .filter(|r| !r.failed())
        .any(|r| status_of(post, r.check_id) == Some(CheckStatus::Fail))
}

/// Verify, revise, re-verify, at most `budget` times.
pub fn repair_loop(
    config: &ResolvedConfiguration,
    ledger: &mut Ledger,
    budget: usize,
    whitelist: &MutableSlotWhitelist,
    mut gate: impl FnMut(&ResolvedConfiguration) -> LadderOutcome,
) -> RepairOutcome {
    let mut config = config.clone();
    let mut current = gate(&config);
    let mut iterations = Vec::new();
    let finish = |terminal, report, config, iterations, detail: Option<String>| RepairOutcome {
        terminal,
        final_report: report,
        config,
        iterations,
        detail,
    };
    loop {
        match current.verdict {
            SanityVerdict::Pass => return finish(RepairTerminal::Pass, current, config, iterations, None),
            SanityVerdict::WarnContinue => return finish(RepairTerminal::WarnContinue, current, config, iterations, None),
            SanityVerdict::DatasetUnavailable | SanityVerdict::DatasetExecutionFailed => {
                return finish(RepairTerminal::DatasetRecoveryRequired, current, config, iterations, None)
            }
            _ => {}
        }
        if iterations.len() >= budget {
            let detail = Some(format!("budget of {budget} iterations exhausted"));
            return finish(RepairTerminal::Escalate, current, config, iterations, detail);
        }
        let hypothesis = match propose(ledger, &current.checks) {
            Proposal::NoAttributableAssumption { implicated } => {
                let slots: Vec<&str> = implicated.iter().map(|s| s.as_str()).collect();
                let detail = Some(format!("no assumption attributable to slots [{}]", slots.join(", ")));
                return finish(RepairTerminal::NoAttributableAssumption, current, config, iterations, detail);
            }
            Proposal::Hypothesis(h) => h,
        };
        let patched = match apply_patch(&config, &hypothesis, whitelist, ledger) {
            Ok(c) => c,
            Err(PatchError::WhitelistViolation(path)) => {
                let detail = Some(format!("hypothesis targets `{path}`, which the loop may not write"));
                return finish(RepairTerminal::FrameworkChangeRequired, current, config, iterations, detail);
            }
            Err(e) => return finish(RepairTerminal::Escalate, current, config, iterations, Some(e.to_string())),
        };
        let post = gate(&patched);
        let regressed = is_regression(&current.checks, &post.checks);
        iterations.push(IterationRecord {
            iteration: iterations.len() + 1,
            failure_classes: classify_failure(&current.checks),
            falsified: is_falsified(&hypothesis, &post.checks),
            hypothesis,
            pre_verdict: current.verdict,
            pre: current.checks,
            post_verdict: post.verdict,
            post: post.checks.clone(),
            regressed,
            config_digest: patched.digest(),
        });
        config = patched;
        current = post;
        if regressed && !current.verdict.proceeds() {
            let detail = Some("patch introduced a new categorical failure".to_string());
            return finish(RepairTerminal::Escalate, current, config, iterations, detail);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assumptions::EvidenceRef;
    use crate::tree::diff_leaves;
    use proptest::prelude::*;
    use serde_json::json;

    fn fail(id: CheckId, slots: &[SlotFamily]) -> CheckResult {
        CheckResult::fail(id, slots.iter().copied(), "x")
    }

    fn config() -> ResolvedConfiguration {
        ResolvedConfiguration::from_tree(
            &json!({
                "task": {"component": "rul_prognostics"},
                "datasource": {"component": "synthetic_degradation"},
                "transform": {"component": "zscore", "fit_on": "train"},
                "sequencer": {"component": "sliding_window", "length": 32},
                "model": {"component": "mlp"},
                "evaluator": {"component": "rul_metrics", "aggregation": "last_window"}
            }),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn classification_table() {
        let grad_ok = CheckResult::pass(CheckId::GradientFlow);
        assert_eq!(
            classify_failure(&[fail(CheckId::GradientFlow, &[SlotFamily::Model])]),
            vec![(CheckId::GradientFlow, FailureClass::ImplBug)]
        );
        assert_eq!(
            classify_failure(&[fail(CheckId::Leakage, &[SlotFamily::Transform])]),
            vec![(CheckId::Leakage, FailureClass::DataPipeline)]
        );
        assert_eq!(
            classify_failure(&[grad_ok, fail(CheckId::OverfitMicrobatch, &[SlotFamily::Model])]),
            vec![(CheckId::OverfitMicrobatch, FailureClass::HpMismatch)]
        );
    }

    #[test]
    fn first_attributable_in_insertion_order() {
        let failing = [fail(CheckId::OverfitMicrobatch, &[SlotFamily::Model, SlotFamily::Transform])];
        let build = |first: SlotFamily, second: SlotFamily| {
            let mut l = Ledger::new();
            l.record(SlotFamily::Evaluator, EvidenceRef::absent(), "evaluator.aggregation", json!("last_window"), "j", vec![json!("mean")]);
            l.record(first, EvidenceRef::absent(), format!("{first}.a"), json!(1), "j", vec![json!(2)]);
            l.record(second, EvidenceRef::absent(), format!("{second}.b"), json!(1), "j", vec![json!(3)]);
            l
        };
        for (a, b) in [(SlotFamily::Model, SlotFamily::Transform), (SlotFamily::Transform, SlotFamily::Model)] {
            let Proposal::Hypothesis(h) = propose(&build(a, b), &failing) else { panic!() };
            assert_eq!(h.target_change.assumption, 1);
            assert_eq!(h.target_change.slot, a);
        }
        let mut only_model = Ledger::new();
        only_model.record(SlotFamily::Transform, EvidenceRef::absent(), "transform.fit_on", json!("train"), "j", vec![json!("all")]);
        assert!(matches!(
            propose(&only_model, &[fail(CheckId::GradientFlow, &[SlotFamily::Model])]),
            Proposal::NoAttributableAssumption { .. }
        ));
    }

    #[test]
    fn patch_changes_one_leaf_and_respects_whitelist() {
        let cfg = config();
        let mut l = Ledger::new();
        l.record(SlotFamily::Sequencer, EvidenceRef::absent(), "sequencer.length", json!(32), "j", vec![json!(64)]);
        l.record(SlotFamily::Evaluator, EvidenceRef::absent(), "evaluator.aggregation", json!("last_window"), "j", vec![json!("mean")]);
        let wl = MutableSlotWhitelist::run_default();
        let Proposal::Hypothesis(h) = propose(&l, &[fail(CheckId::InitLoss, &[SlotFamily::Sequencer])]) else { panic!() };
        let patched = apply_patch(&cfg, &h, &wl, &mut l).unwrap();
        assert_eq!(diff_leaves(&cfg.to_tree(), &patched.to_tree()), vec!["sequencer.length".to_string()]);
        assert_eq!(patched.get("sequencer.length"), Some(json!(64)));
        assert!(matches!(patched.composition_trace.last(), Some(Directive::Repair { .. })));
        assert_eq!(l.get(0).unwrap().attempts_used, 1);

        let Proposal::Hypothesis(h) = propose(&l, &[fail(CheckId::InitLoss, &[SlotFamily::Evaluator])]) else { panic!() };
        assert_eq!(
            apply_patch(&patched, &h, &wl, &mut l).unwrap_err(),
            PatchError::WhitelistViolation("evaluator.aggregation".into())
        );
        assert_eq!(l.get(1).unwrap().attempts_used, 0);
    }

    fn outcome(verdict: SanityVerdict, checks: Vec<CheckResult>) -> LadderOutcome {
        LadderOutcome { verdict, checks }
    }

    #[test]
    fn pass_on_first_verify_needs_no_iterations() {
        let mut l = Ledger::new();
        let out = repair_loop(&config(), &mut l, 10, &MutableSlotWhitelist::run_default(), |_| {
            outcome(SanityVerdict::Pass, vec![])
        });
        assert_eq!(out.terminal, RepairTerminal::Pass);
        assert!(out.iterations.is_empty());
    }

    #[test]
    fn unattributable_failure_stops_immediately() {
        let mut l = Ledger::new();
        l.record(SlotFamily::Transform, EvidenceRef::absent(), "transform.fit_on", json!("train"), "j", vec![json!("all")]);
        let mut calls = 0;
        let out = repair_loop(&config(), &mut l, 10, &MutableSlotWhitelist::run_default(), |_| {
            calls += 1;
            outcome(SanityVerdict::Block, vec![fail(CheckId::GradientFlow, &[SlotFamily::Model])])
        });
        assert_eq!(out.terminal, RepairTerminal::NoAttributableAssumption);
        assert_eq!(calls, 1);
        assert_eq!(out.final_report.checks[0].check_id, CheckId::GradientFlow);
    }

    #[test]
    fn zero_budget_is_a_single_verify() {
        let mut l = Ledger::new();
        l.record(SlotFamily::Sequencer, EvidenceRef::absent(), "sequencer.length", json!(32), "j", vec![json!(64)]);
        let mut calls = 0;
        let out = repair_loop(&config(), &mut l, 0, &MutableSlotWhitelist::run_default(), |_| {
            calls += 1;
            outcome(SanityVerdict::Block, vec![fail(CheckId::InitLoss, &[SlotFamily::Sequencer])])
        });
        assert_eq!((out.terminal, calls), (RepairTerminal::Escalate, 1));
    }

    #[test]
    fn non_whitelisted_target_requires_framework_change() {
        let mut l = Ledger::new();
        l.record(SlotFamily::Evaluator, EvidenceRef::absent(), "evaluator.aggregation", json!("last_window"), "j", vec![json!("mean")]);
        let out = repair_loop(&config(), &mut l, 10, &MutableSlotWhitelist::run_default(), |_| {
            outcome(SanityVerdict::Block, vec![fail(CheckId::InitLoss, &[SlotFamily::Evaluator])])
        });
        assert_eq!(out.terminal, RepairTerminal::FrameworkChangeRequired);
    }

    #[test]
    fn converges_on_the_working_alternative() {
        let mut l = Ledger::new();
        l.record(SlotFamily::Sequencer, EvidenceRef::absent(), "sequencer.length", json!(32), "j", vec![json!(16), json!(24), json!(8)]);
        let gate = |c: &ResolvedConfiguration| {
            if c.get("sequencer.length") == Some(json!(8)) {
                outcome(SanityVerdict::Pass, vec![CheckResult::pass(CheckId::InitLoss)])
            } else {
                outcome(SanityVerdict::Block, vec![fail(CheckId::InitLoss, &[SlotFamily::Sequencer])])
            }
        };
        let out = repair_loop(&config(), &mut l, 10, &MutableSlotWhitelist::run_default(), gate);
        assert_eq!(out.terminal, RepairTerminal::Pass);
        assert_eq!(out.iterations.len(), 3);
        assert!(out.iterations[0].falsified && out.iterations[1].falsified && !out.iterations[2].falsified);
    }

    proptest! {
        #[test]
        fn whitelist_never_leaks(segs in proptest::collection::vec("[a-z]{1,8}", 1..4), slot in 0usize..6) {
            let path = segs.join(".");
            let family = SlotFamily::ALL[slot];
            let mut l = Ledger::new();
            l.record(family, EvidenceRef::absent(), path.clone(), json!(0), "j", vec![json!(1)]);
            let wl = MutableSlotWhitelist::run_default();
            let cfg = config();
            if let Proposal::Hypothesis(h) = propose(&l, &[fail(CheckId::InitLoss, &[family])]) {
                match apply_patch(&cfg, &h, &wl, &mut l) {
                    Ok(patched) => {
                        prop_assert!(wl.allows(&path));
                        prop_assert!(diff_leaves(&cfg.to_tree(), &patched.to_tree()).iter().all(|p| wl.allows(p)));
                    }
                    Err(PatchError::WhitelistViolation(_)) => prop_assert!(!wl.allows(&path)),
                    Err(_) => {}
                }
            }
        }

        #[test]
        fn iterations_bounded(budget in 0usize..12, n_alt in 0usize..15) {
            let mut l = Ledger::new();
            l.record(SlotFamily::Sequencer, EvidenceRef::absent(), "sequencer.length", json!(32),
                "j", (0..n_alt).map(|i| json!(100 + i)).collect());
            let out = repair_loop(&config(), &mut l, budget, &MutableSlotWhitelist::run_default(), |_| {
                outcome(SanityVerdict::Block, vec![fail(CheckId::InitLoss, &[SlotFamily::Sequencer])])
            });
            prop_assert!(out.iterations.len() <= budget.min(n_alt));
        }
    }
}

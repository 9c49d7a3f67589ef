//! Shared-protocol evaluation: metrics at window and unit grain, claim
//! matching, baselines, benchmark swaps and the evaluation report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::binding::{
    typecheck, ComponentRef, ComponentRegistry, Directive, ResolvedConfiguration, SlotFamily, TargetSemantics,
    TaskContract,
};
use crate::data::{Column, Split, Window};
use crate::runtime::FrameworkStack;
use crate::trainer::{predict, ForwardError, ModelInstance};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("{0} predictions for {1} targets")]
    LengthMismatch(usize, usize),
    #[error("ground-truth range is zero")]
    DegenerateRange,
    #[error("normalizer must be positive")]
    InvalidNormalizer,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mae,
    Rmse,
    Nmae,
    Accuracy,
}

impl Metric {
    pub fn lower_is_better(self) -> bool {
        self != Metric::Accuracy
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Rmse => "rmse",
            Metric::Nmae => "nmae",
            Metric::Accuracy => "accuracy",
        }
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "mae" => Ok(Metric::Mae),
            "rmse" => Ok(Metric::Rmse),
            "nmae" => Ok(Metric::Nmae),
            "accuracy" => Ok(Metric::Accuracy),
            other => Err(EvalError::UnknownMetric(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grain {
    Window,
    Unit,
}

/// How a unit's windows collapse into one unit-level score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Score only the unit's final window (the end-of-life estimate).
    LastWindow,
    /// Score every window and average within the unit.
    Mean,
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "last_window" => Ok(Aggregation::LastWindow),
            "mean" => Ok(Aggregation::Mean),
            other => Err(format!("unknown aggregation `{other}` (expected last_window or mean)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: Metric,
    pub grain: Grain,
    pub value: f64,
    /// Standard deviation across seeds when aggregated over several runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dispersion: Option<f64>,
}

fn check(p: &[f64], t: &[f64]) -> Result<(), EvalError> {
    if p.len() != t.len() {
        return Err(EvalError::LengthMismatch(p.len(), t.len()));
    }
    if p.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    Ok(())
}

pub fn mae(p: &[f64], t: &[f64]) -> Result<f64, EvalError> {
    check(p, t)?;
    Ok(p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

pub fn rmse(p: &[f64], t: &[f64]) -> Result<f64, EvalError> {
    check(p, t)?;
    Ok((p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64).sqrt())
}

/// Fraction of exact label matches; predictions are class indices.
pub fn accuracy(p: &[f64], t: &[f64]) -> Result<f64, EvalError> {
    check(p, t)?;
    Ok(p.iter().zip(t).filter(|(a, b)| a == b).count() as f64 / p.len() as f64)
}

/// `max - min` of the ground truth.
pub fn target_range(t: &[f64]) -> Result<f64, EvalError> {
    if t.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        Ok(hi - lo)
    } else {
        Err(EvalError::DegenerateRange)
    }
}

/// `100 · mae / normalizer`.
pub fn nmae(p: &[f64], t: &[f64], normalizer: f64) -> Result<f64, EvalError> {
    if !(normalizer > 0.0) {
        return Err(EvalError::InvalidNormalizer);
    }
    Ok(100.0 * mae(p, t)? / normalizer)
}

/// One row of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub unit_id: String,
    pub window_start: usize,
    pub prediction: f64,
    pub target: f64,
    pub inverse_transformed: bool,
}

pub fn predictions_csv(records: &[PredictionRecord]) -> String {
    let mut s = String::from("unit_id,window_start,prediction,target,inverse_transformed\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:e},{:e},{}\n",
            r.unit_id, r.window_start, r.prediction, r.target, r.inverse_transformed
        ));
    }
    s
}

pub fn parse_predictions_csv(text: &str) -> Result<Vec<PredictionRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || format!("line {}: malformed prediction row", i + 1);
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(PredictionRecord {
            unit_id: f[0].to_string(),
            window_start: f[1].parse().map_err(|_| bad())?,
            prediction: f[2].parse().map_err(|_| bad())?,
            target: f[3].parse().map_err(|_| bad())?,
            inverse_transformed: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Model outputs for one split on the original target scale. Class tasks
/// report the arg-max class index.
pub fn collect_predictions(
    model: &ModelInstance,
    stack: &FrameworkStack,
    split: Split,
) -> Result<Vec<PredictionRecord>, ForwardError> {
    let windows: Vec<&Window> = stack.windows.split(split).iter().collect();
    let raw = predict(model, &windows)?;
    let target_tf = stack.fitted.iter().find(|f| f.scales_target());
    let classify = stack.contract.target_semantics == TargetSemantics::ClassLabel;
    Ok(windows
        .iter()
        .zip(raw)
        .map(|(w, out)| {
            let (prediction, target) = if classify {
                let arg = out
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
                    .0;
                (arg as f64, w.target)
            } else {
                match target_tf {
                    Some(f) => (f.inverse_value(Column::Target, out[0]), f.inverse_value(Column::Target, w.target)),
                    None => (out[0], w.target),
                }
            };
            PredictionRecord {
                unit_id: w.unit_id.clone(),
                window_start: w.start,
                prediction,
                target,
                inverse_transformed: !classify && target_tf.is_some(),
            }
        })
        .collect())
}

fn metric_value(metric: Metric, p: &[f64], t: &[f64], normalizer: f64) -> Result<f64, EvalError> {
    match metric {
        Metric::Mae => mae(p, t),
        Metric::Rmse => rmse(p, t),
        Metric::Accuracy => accuracy(p, t),
        Metric::Nmae => nmae(p, t, normalizer),
    }
}

/// Scores records at one grain. Unit grain computes the metric per unit
/// (after aggregation) and averages across units. The nMAE normalizer is the
/// ground-truth range over every record.
pub fn evaluate_records(
    records: &[PredictionRecord],
    metrics: &[Metric],
    grain: Grain,
    aggregation: Aggregation,
) -> Result<Vec<MetricResult>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let all_t: Vec<f64> = records.iter().map(|r| r.target).collect();
    let needs_range = metrics.contains(&Metric::Nmae);
    let normalizer = if needs_range { target_range(&all_t)? } else { 1.0 };
    let mut out = Vec::with_capacity(metrics.len());
    for &metric in metrics {
        let value = match grain {
            Grain::Window => {
                let p: Vec<f64> = records.iter().map(|r| r.prediction).collect();
                metric_value(metric, &p, &all_t, normalizer)?
            }
            Grain::Unit => {
                let mut units: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
                for r in records {
                    units.entry(&r.unit_id).or_default().push(r);
                }
                let mut total = 0.0;
                for rs in units.values() {
                    let chosen: Vec<&PredictionRecord> = match aggregation {
                        Aggregation::LastWindow => {
                            vec![*rs.iter().max_by_key(|r| r.window_start).expect("non-empty unit")]
                        }
                        Aggregation::Mean => rs.clone(),
                    };
                    let p: Vec<f64> = chosen.iter().map(|r| r.prediction).collect();
                    let t: Vec<f64> = chosen.iter().map(|r| r.target).collect();
                    total += metric_value(metric, &p, &t, normalizer)?;
                }
                total / units.len() as f64
            }
        };
        out.push(MetricResult {
            metric,
            grain,
            value,
            dispersion: None,
        });
    }
    Ok(out)
}

/// Constant predictor: train-target mean for regression, majority class for
/// classification.
pub fn constant_baseline_value(train_targets: &[f64], semantics: TargetSemantics) -> f64 {
    match semantics {
        TargetSemantics::ContinuousTarget => train_targets.iter().sum::<f64>() / train_targets.len().max(1) as f64,
        TargetSemantics::ClassLabel => {
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for t in train_targets {
                *counts.entry(t.round() as i64).or_default() += 1;
            }
            // ties resolve to the smallest label
            counts
                .iter()
                .fold((0i64, 0usize), |best, (k, c)| if *c > best.1 { (*k, *c) } else { best })
                .0 as f64
        }
    }
}

pub fn with_constant_prediction(records: &[PredictionRecord], value: f64) -> Vec<PredictionRecord> {
    records
        .iter()
        .map(|r| PredictionRecord {
            prediction: value,
            ..r.clone()
        })
        .collect()
}

/// Baseline name → metric key (`unit.mae`) → value.
pub type BaselineTable = BTreeMap<String, BTreeMap<String, f64>>;

pub fn metric_key(metric: Metric, grain: Grain) -> String {
    format!("{}.{}", if grain == Grain::Unit { "unit" } else { "window" }, metric.as_str())
}

/// Reads a frozen leaderboard: `{"baselines": {name: {"unit.mae": v, ...}}}`.
pub fn parse_leaderboard(v: &Value) -> Result<BaselineTable, String> {
    let obj = v
        .get("baselines")
        .and_then(Value::as_object)
        .ok_or("leaderboard needs a `baselines` object")?;
    let mut out = BaselineTable::new();
    for (name, metrics) in obj {
        let m = metrics.as_object().ok_or_else(|| format!("baseline `{name}` must be an object"))?;
        let mut row = BTreeMap::new();
        for (k, val) in m {
            row.insert(k.clone(), val.as_f64().ok_or_else(|| format!("{name}.{k} must be a number"))?);
        }
        out.insert(name.clone(), row);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Claims

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Leq,
    Geq,
    BeatsBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub id: String,
    pub metric: Metric,
    #[serde(default = "default_grain")]
    pub grain: Grain,
    pub comparator: Comparator,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub baseline: Option<String>,
    pub tolerance: f64,
}

fn default_grain() -> Grain {
    Grain::Unit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClaimVerdict {
    Confirmed,
    Contradicted,
    DatasetDependent,
    Unassessable,
    UnassessableMetricScale,
    UnassessableNoOverlappingBaseline,
}

/// What the run produced for a claim's metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Achieved {
    Value(f64),
    Missing,
    DegenerateScale,
}

pub fn match_claim(claim: &ClaimRecord, achieved: Achieved, baseline: Option<f64>, dataset_matches_paper: bool) -> ClaimVerdict {
    if !dataset_matches_paper {
        return ClaimVerdict::DatasetDependent;
    }
    let a = match achieved {
        Achieved::Missing => return ClaimVerdict::Unassessable,
        Achieved::DegenerateScale => return ClaimVerdict::UnassessableMetricScale,
        Achieved::Value(v) => v,
    };
    let tau = claim.tolerance.max(0.0);
    let ok = match claim.comparator {
        Comparator::Leq => match claim.value {
            Some(c) => a <= c * (1.0 + tau),
            None => return ClaimVerdict::Unassessable,
        },
        Comparator::Geq => match claim.value {
            Some(c) => a >= c * (1.0 - tau),
            None => return ClaimVerdict::Unassessable,
        },
        Comparator::BeatsBaseline => match baseline {
            None => return ClaimVerdict::UnassessableNoOverlappingBaseline,
            Some(b) if claim.metric.lower_is_better() => a <= b * (1.0 + tau),
            Some(b) => a >= b * (1.0 - tau),
        },
    };
    if ok {
        ClaimVerdict::Confirmed
    } else {
        ClaimVerdict::Contradicted
    }
}

// ---------------------------------------------------------------------------
// Statuses and the report

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TechnicalStatus {
    Pass,
    ImplementationBug,
    EvaluatorError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScientificStatus {
    Validated,
    Plausible,
    Investigate,
    InvestigateClaimsDisputed,
    BenchmarkOnly,
}

impl fmt::Display for ScientificStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("unit variant");
        f.write_str(v.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HypothesisStatus {
    PreRegistered,
    BenchmarkOnly,
}

/// Plausible magnitude range for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeBand {
    pub metric: Metric,
    #[serde(default = "default_grain")]
    pub grain: Grain,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimOutcome {
    pub claim: ClaimRecord,
    pub achieved: Option<f64>,
    pub baseline_value: Option<f64>,
    pub verdict: ClaimVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metrics: Vec<MetricResult>,
    pub baselines: BaselineTable,
    pub claims: Vec<ClaimOutcome>,
    /// `None` when no band is configured for the metric.
    pub magnitude_in_band: Option<bool>,
    pub claims_suppressed: bool,
    pub artifact_status: String,
    pub technical_status: TechnicalStatus,
    pub scientific_status: ScientificStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub technical_detail: Option<String>,
}

pub struct ReportInputs<'a> {
    pub metrics: Vec<MetricResult>,
    pub baselines: BaselineTable,
    pub claims: &'a [ClaimRecord],
    pub hypothesis_status: HypothesisStatus,
    /// Skip claim matching entirely for BENCHMARK_ONLY runs.
    pub suppress_claims_when_benchmark_only: bool,
    pub dataset_matches_paper: bool,
    pub magnitude_band: Option<&'a MagnitudeBand>,
    pub technical_status: TechnicalStatus,
    pub technical_detail: Option<String>,
    /// Metrics whose normalizer collapsed.
    pub degenerate: Vec<Metric>,
}

pub fn scientific_status(
    verdicts: &[ClaimVerdict],
    hypothesis: HypothesisStatus,
    magnitude_in_band: Option<bool>,
) -> ScientificStatus {
    if hypothesis == HypothesisStatus::BenchmarkOnly {
        return ScientificStatus::BenchmarkOnly;
    }
    if verdicts.contains(&ClaimVerdict::Contradicted) {
        return ScientificStatus::InvestigateClaimsDisputed;
    }
    if !verdicts.is_empty() && verdicts.iter().all(|v| *v == ClaimVerdict::Confirmed) {
        return ScientificStatus::Validated;
    }
    match magnitude_in_band {
        Some(false) => ScientificStatus::Investigate,
        _ => ScientificStatus::Plausible,
    }
}

pub fn generate_report(inp: ReportInputs<'_>) -> EvaluationReport {
    let find = |m: Metric, g: Grain| inp.metrics.iter().find(|r| r.metric == m && r.grain == g).map(|r| r.value);
    let magnitude_in_band = inp
        .magnitude_band
        .and_then(|b| find(b.metric, b.grain).map(|v| v >= b.low && v <= b.high));
    let suppressed = inp.hypothesis_status == HypothesisStatus::BenchmarkOnly && inp.suppress_claims_when_benchmark_only;
    let claims: Vec<ClaimOutcome> = if suppressed || inp.technical_status != TechnicalStatus::Pass {
        Vec::new()
    } else {
        inp.claims
            .iter()
            .map(|c| {
                let achieved_v = find(c.metric, c.grain);
                let achieved = if inp.degenerate.contains(&c.metric) {
                    Achieved::DegenerateScale
                } else {
                    achieved_v.map_or(Achieved::Missing, Achieved::Value)
                };
                let baseline_value = c
                    .baseline
                    .as_ref()
                    .and_then(|b| inp.baselines.get(b))
                    .and_then(|row| row.get(&metric_key(c.metric, c.grain)))
                    .copied();
                ClaimOutcome {
                    claim: c.clone(),
                    achieved: achieved_v,
                    baseline_value,
                    verdict: match_claim(c, achieved, baseline_value, inp.dataset_matches_paper),
                }
            })
            .collect()
    };
    let verdicts: Vec<ClaimVerdict> = claims.iter().map(|c| c.verdict).collect();
    EvaluationReport {
        scientific_status: scientific_status(&verdicts, inp.hypothesis_status, magnitude_in_band),
        metrics: inp.metrics,
        baselines: inp.baselines,
        claims,
        magnitude_in_band,
        claims_suppressed: suppressed,
        artifact_status: "complete".into(),
        technical_status: inp.technical_status,
        technical_detail: inp.technical_detail,
    }
}

// ---------------------------------------------------------------------------
// Benchmark swap

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SwapError {
    #[error("baseline `{name}` is incompatible with the task: {reason}")]
    IncompatibleBaseline { name: String, reason: String },
}

/// Replaces only the model binding. The baseline must typecheck cleanly in
/// the model slot.
pub fn benchmark_swap(
    config: &ResolvedConfiguration,
    baseline: &ComponentRef,
    registry: &ComponentRegistry,
    contract: &TaskContract,
) -> Result<ResolvedConfiguration, SwapError> {
    let incompatible = |reason: String| SwapError::IncompatibleBaseline {
        name: baseline.name.clone(),
        reason,
    };
    if baseline.family != SlotFamily::Model {
        return Err(incompatible("baseline must be a model component".into()));
    }
    let swapped = config
        .apply(Directive::Rebind {
            family: SlotFamily::Model,
            node: baseline.to_node(),
        })
        .map_err(|e| incompatible(e.to_string()))?;
    let report = typecheck(&swapped, registry, contract);
    let model_violations: Vec<String> = report
        .violations
        .iter()
        .filter(|v| v.family == Some(SlotFamily::Model))
        .map(|v| v.message.clone())
        .collect();
    if !model_violations.is_empty() {
        return Err(incompatible(model_violations.join("; ")));
    }
    Ok(swapped)
}

/// `mean ± std` cell of a benchmark row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub model: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub rank: usize,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Builds cells ranked by mean (1 = best, lower is better).
pub fn bench_row(entries: Vec<(String, Vec<f64>)>) -> Vec<BenchCell> {
    let mut cells: Vec<BenchCell> = entries
        .into_iter()
        .map(|(model, per_seed)| {
            let (mean, std) = mean_std(&per_seed);
            BenchCell {
                model,
                per_seed,
                mean,
                std,
                rank: 0,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|a, b| cells[*a].mean.total_cmp(&cells[*b].mean));
    for (r, i) in order.into_iter().enumerate() {
        cells[i].rank = r + 1;
    }
    cells
}

/// Table row text: `task | model mean ± std (rank) | ...`.
pub fn format_bench_row(task: &str, cells: &[BenchCell]) -> String {
    let mut s = String::from(task);
    for c in cells {
        s.push_str(&format!(" | {} {:.2} ± {:.2} (rank {})", c.model, c.mean, c.std, c.rank));
    }
    s
}

//! Shared data protocol: split unit-series containers, fit-on-train
//! transforms, target construction, windowing and leakage auditing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binding::{SlotFamily, TargetSemantics, TaskContract, TaskKind};

/// Empirical leakage tolerance on refitted statistics.
pub const LEAKAGE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("unsupported fit_on `{0}` (expected `train` or `all`)")]
    UnsupportedFitOn(String),
    #[error("invalid unit {unit}: {reason}")]
    InvalidUnit { unit: String, reason: String },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("container format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// One asset's multichannel time series with per-time labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSeries {
    pub unit_id: String,
    pub channel_names: Vec<String>,
    /// Row-major `time × features`.
    pub values: Vec<f64>,
    pub labels: Vec<f64>,
}

impl UnitSeries {
    pub fn new(
        unit_id: impl Into<String>,
        channel_names: Vec<String>,
        values: Vec<f64>,
        labels: Vec<f64>,
    ) -> Result<Self, DataError> {
        let unit = UnitSeries {
            unit_id: unit_id.into(),
            channel_names,
            values,
            labels,
        };
        unit.check()?;
        Ok(unit)
    }

    fn check(&self) -> Result<(), DataError> {
        let bad = |reason: &str| DataError::InvalidUnit {
            unit: self.unit_id.clone(),
            reason: reason.to_string(),
        };
        let f = self.channel_names.len();
        if f == 0 {
            return Err(bad("no channels"));
        }
        if self.labels.is_empty() {
            return Err(bad("time length must be at least 1"));
        }
        if self.values.len() != self.labels.len() * f {
            return Err(bad("value count does not match time × channels"));
        }
        if self.values.iter().chain(&self.labels).any(|v| !v.is_finite()) {
            return Err(bad("missing or non-finite values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.channel_names.len()
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.n_features() + c]
    }
}

/// Units partitioned into train/val/test.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitDatasetContainer {
    pub train: Vec<UnitSeries>,
    pub val: Vec<UnitSeries>,
    pub test: Vec<UnitSeries>,
}

impl SplitDatasetContainer {
    pub fn split(&self, s: Split) -> &[UnitSeries] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, s: Split) -> &mut Vec<UnitSeries> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn units(&self) -> impl Iterator<Item = (Split, &UnitSeries)> {
        Split::ALL
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |u| (s, u)))
    }

    pub fn channel_names(&self) -> Option<&[String]> {
        self.units().next().map(|(_, u)| u.channel_names.as_slice())
    }

    /// Unit ids that appear in more than one split (or twice in one).
    pub fn overlapping_units(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut dup = BTreeSet::new();
        for (_, u) in self.units() {
            if !seen.insert(u.unit_id.clone()) {
                dup.insert(u.unit_id.clone());
            }
        }
        dup.into_iter().collect()
    }

    /// SHA-256 over one split's ids, values and labels.
    pub fn split_digest(&self, s: Split) -> String {
        let mut h = Sha256::new();
        for u in self.split(s) {
            h.update(u.unit_id.as_bytes());
            for v in u.values.iter().chain(&u.labels) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

// ---------------------------------------------------------------------------
// Synthetic degradation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationShape {
    Linear,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDegradationSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub n_features: usize,
    pub shape: DegradationShape,
    pub noise: f64,
    pub task_kind: TaskKind,
    pub rul_clip: f64,
    pub n_regimes: usize,
    pub seed: u64,
}

impl Default for SyntheticDegradationSpec {
    fn default() -> Self {
        SyntheticDegradationSpec {
            n_train: 12,
            n_val: 3,
            n_test: 4,
            min_length: 40,
            max_length: 80,
            n_features: 4,
            shape: DegradationShape::Linear,
            noise: 0.05,
            task_kind: TaskKind::Prognostics,
            rul_clip: 60.0,
            n_regimes: 3,
            seed: 7,
        }
    }
}

impl SyntheticDegradationSpec {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.min_length == 0 || self.min_length > self.max_length {
            return bad("length range must satisfy 1 <= min <= max");
        }
        if self.n_features == 0 {
            return bad("need at least one feature");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if self.rul_clip < 0.0 {
            return bad("rul_clip must be non-negative");
        }
        if self.n_regimes < 2 {
            return bad("need at least two regimes");
        }
        Ok(())
    }
}

/// Latent health in `[0, 1]`: 1 at the first step, exactly 0 at the last.
pub fn latent_health(shape: DegradationShape, t: usize, len: usize) -> f64 {
    if len <= 1 {
        return 0.0;
    }
    let s = t as f64 / (len - 1) as f64;
    match shape {
        DegradationShape::Linear => 1.0 - s,
        DegradationShape::Exponential => {
            const RATE: f64 = 3.0;
            1.0 - ((RATE * s).exp() - 1.0) / (RATE.exp() - 1.0)
        }
    }
}

/// Regime id for a health value: 0 is healthy, `n_regimes - 1` is end of life.
pub fn regime_of(health: f64, n_regimes: usize) -> usize {
    (((1.0 - health) * n_regimes as f64).floor() as usize).min(n_regimes - 1)
}

/// Piecewise-linear RUL: `min(clip, T - 1 - t)`.
pub fn construct_rul_targets(len: usize, clip: f64) -> Vec<f64> {
    (0..len).map(|t| clip.min((len - 1 - t) as f64)).collect()
}

/// Generates units with monotone latent degradation plus Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticDegradationSpec) -> Result<SplitDatasetContainer, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gains: Vec<f64> = (0..spec.n_features)
        .map(|_| {
            let g: f64 = rng.gen_range(0.5..2.0);
            if rng.gen_bool(0.5) {
                g
            } else {
                -g
            }
        })
        .collect();
    let channel_names: Vec<String> = (0..spec.n_features).map(|j| format!("s{j}")).collect();
    let mut out = SplitDatasetContainer::default();
    let mut next_id = 0usize;
    for (split, n) in [(Split::Train, spec.n_train), (Split::Val, spec.n_val), (Split::Test, spec.n_test)] {
        for _ in 0..n {
            let len = rng.gen_range(spec.min_length..=spec.max_length);
            let offsets: Vec<f64> = (0..spec.n_features).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut values = Vec::with_capacity(len * spec.n_features);
            let mut health = Vec::with_capacity(len);
            for t in 0..len {
                let h = latent_health(spec.shape, t, len);
                health.push(h);
                for j in 0..spec.n_features {
                    let noise = if spec.noise > 0.0 {
                        spec.noise * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    values.push(offsets[j] + gains[j] * (1.0 - h) + noise);
                }
            }
            let labels = match spec.task_kind {
                TaskKind::Prognostics => construct_rul_targets(len, spec.rul_clip),
                TaskKind::Diagnostics => health.iter().map(|h| regime_of(*h, spec.n_regimes) as f64).collect(),
            };
            let unit = UnitSeries::new(format!("unit-{next_id:04}"), channel_names.clone(), values, labels)?;
            next_id += 1;
            out.split_mut(split).push(unit);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Transforms

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    ZScore,
    MinMax,
    Identity,
    /// Planted leak: declares train-only fitting but pools every split.
    ZScoreGlobalFit,
}

impl TransformKind {
    pub fn from_implementation(name: &str) -> Option<Self> {
        match name {
            "zscore" => Some(TransformKind::ZScore),
            "minmax" => Some(TransformKind::MinMax),
            "identity" => Some(TransformKind::Identity),
            "zscore_global_fit" => Some(TransformKind::ZScoreGlobalFit),
            _ => None,
        }
    }

    /// The honest statistic this transform claims to compute.
    fn declared(self) -> TransformKind {
        match self {
            TransformKind::ZScoreGlobalFit => TransformKind::ZScore,
            k => k,
        }
    }
}

/// Routing of one transform: where it is fitted, which splits it touches and
/// which channels it rewrites. `*` in `assign_to` selects every feature
/// channel; `target` selects the label vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub name: String,
    pub kind: TransformKind,
    pub fit_on: String,
    pub apply_to: Vec<Split>,
    pub assign_to: Vec<String>,
}

impl TransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        TransformSpec {
            name: format!("{kind:?}").to_lowercase(),
            kind,
            fit_on: "train".into(),
            apply_to: Split::ALL.to_vec(),
            assign_to: vec!["*".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Column {
    Feature(usize),
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTransform {
    pub spec: TransformSpec,
    pub columns: Vec<Column>,
    /// Per-column statistics: `mean`/`std` or `min`/`max`.
    pub statistics: BTreeMap<String, Vec<f64>>,
    pub fit_fingerprint: String,
}

fn resolve_columns(spec: &TransformSpec, channel_names: &[String]) -> Result<Vec<Column>, DataError> {
    let mut cols = Vec::new();
    for sel in &spec.assign_to {
        match sel.as_str() {
            "*" => cols.extend((0..channel_names.len()).map(Column::Feature)),
            "target" => cols.push(Column::Target),
            name => {
                let idx = channel_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| DataError::UnknownChannel(name.to_string()))?;
                cols.push(Column::Feature(idx));
            }
        }
    }
    let mut seen = BTreeSet::new();
    cols.retain(|c| seen.insert(format!("{c:?}")));
    Ok(cols)
}

fn column_values<'a>(units: impl Iterator<Item = &'a UnitSeries>, col: Column) -> Vec<f64> {
    let mut out = Vec::new();
    for u in units {
        match col {
            Column::Target => out.extend_from_slice(&u.labels),
            Column::Feature(c) => out.extend((0..u.len()).map(|t| u.at(t, c))),
        }
    }
    out
}

fn statistics_for(kind: TransformKind, columns: &[Column], units: &[&UnitSeries]) -> BTreeMap<String, Vec<f64>> {
    let mut stats = BTreeMap::new();
    let (a, b) = match kind.declared() {
        TransformKind::ZScore => ("mean", "std"),
        TransformKind::MinMax => ("min", "max"),
        _ => return stats,
    };
    let mut first = Vec::with_capacity(columns.len());
    let mut second = Vec::with_capacity(columns.len());
    for col in columns {
        let v = column_values(units.iter().copied(), *col);
        let n = v.len() as f64;
        match kind.declared() {
            TransformKind::ZScore => {
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                first.push(mean);
                second.push(var.sqrt());
            }
            _ => {
                first.push(v.iter().copied().fold(f64::INFINITY, f64::min));
                second.push(v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    stats.insert(a.to_string(), first);
    stats.insert(b.to_string(), second);
    stats
}

fn fingerprint(kind: TransformKind, train: &[UnitSeries], stats: &BTreeMap<String, Vec<f64>>) -> String {
    let mut h = Sha256::new();
    h.update(format!("{:?}", kind.declared()).as_bytes());
    for u in train {
        h.update(u.unit_id.as_bytes());
        h.update([0u8]);
    }
    for (k, vs) in stats {
        h.update(k.as_bytes());
        for v in vs {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Fits transform statistics on the declared `fit_on` scope: `train`, or
/// `all` (a declared leak the audit reports).
pub fn fit_transform(spec: &TransformSpec, container: &SplitDatasetContainer) -> Result<FittedTransform, DataError> {
    if spec.fit_on != "train" && spec.fit_on != "all" {
        return Err(DataError::UnsupportedFitOn(spec.fit_on.clone()));
    }
    if container.train.is_empty() {
        return Err(DataError::EmptyTrainSplit);
    }
    let names = container.channel_names().unwrap_or(&[]);
    let columns = resolve_columns(spec, names)?;
    let pooled = spec.kind == TransformKind::ZScoreGlobalFit || spec.fit_on == "all";
    let fit_units: Vec<&UnitSeries> = if pooled {
        container.units().map(|(_, u)| u).collect()
    } else {
        container.train.iter().collect()
    };
    let statistics = statistics_for(spec.kind, &columns, &fit_units);
    let fit_fingerprint = fingerprint(spec.kind, &container.train, &statistics);
    Ok(FittedTransform {
        spec: spec.clone(),
        columns,
        statistics,
        fit_fingerprint,
    })
}

impl FittedTransform {
    /// `(shift, scale)` such that forward is `(x - shift) / scale`.
    fn affine(&self, col_idx: usize) -> (f64, f64) {
        let guard = |s: f64| if s > 0.0 { s } else { 1.0 };
        match self.spec.kind.declared() {
            TransformKind::ZScore => (
                self.statistics["mean"][col_idx],
                guard(self.statistics["std"][col_idx]),
            ),
            TransformKind::MinMax => {
                let lo = self.statistics["min"][col_idx];
                (lo, guard(self.statistics["max"][col_idx] - lo))
            }
            _ => (0.0, 1.0),
        }
    }

    fn column_index(&self, col: Column) -> Option<usize> {
        self.columns.iter().position(|c| *c == col)
    }

    pub fn forward_value(&self, col: Column, v: f64) -> f64 {
        match self.column_index(col) {
            Some(i) => {
                let (shift, scale) = self.affine(i);
                (v - shift) / scale
            }
            None => v,
        }
    }

    pub fn inverse_value(&self, col: Column, v: f64) -> f64 {
        match self.column_index(col) {
            Some(i) => {
                let (shift, scale) = self.affine(i);
                v * scale + shift
            }
            None => v,
        }
    }

    pub fn scales_target(&self) -> bool {
        self.columns.contains(&Column::Target)
    }
}

/// Applies a fitted transform to its `apply_to` splits and `assign_to` columns.
pub fn apply_transform(
    fitted: &FittedTransform,
    container: &SplitDatasetContainer,
) -> Result<SplitDatasetContainer, DataError> {
    let names = container.channel_names().unwrap_or(&[]);
    for col in &fitted.columns {
        if let Column::Feature(c) = col {
            if *c >= names.len() {
                return Err(DataError::UnknownChannel(format!("#{c}")));
            }
        }
    }
    let mut out = container.clone();
    for split in &fitted.spec.apply_to {
        for u in out.split_mut(*split) {
            let f = u.n_features();
            for (i, col) in fitted.columns.iter().enumerate() {
                let (shift, scale) = fitted.affine(i);
                match col {
                    Column::Target => u.labels.iter_mut().for_each(|v| *v = (*v - shift) / scale),
                    Column::Feature(c) => {
                        for t in 0..u.labels.len() {
                            let v = &mut u.values[t * f + c];
                            *v = (*v - shift) / scale;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Maps transformed values of one column back to the original scale.
pub fn inverse_transform(fitted: &FittedTransform, col: Column, values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| fitted.inverse_value(col, *v)).collect()
}

// ---------------------------------------------------------------------------
// Windowing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    RightEdgeLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub length: usize,
    pub stride: usize,
    pub alignment: Alignment,
}

impl WindowSpec {
    pub fn new(length: usize, stride: usize) -> Result<Self, DataError> {
        if length == 0 || stride == 0 {
            return Err(DataError::InvalidSpec("window length and stride must be >= 1".into()));
        }
        Ok(WindowSpec {
            length,
            stride,
            alignment: Alignment::RightEdgeLabel,
        })
    }

    /// `max(0, floor((T - length) / stride) + 1)`.
    pub fn count(&self, len: usize) -> usize {
        if len < self.length {
            0
        } else {
            (len - self.length) / self.stride + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub unit_id: String,
    pub start: usize,
    /// Row-major `length × features`.
    pub values: Vec<f64>,
    /// Label at the window's last time step.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub spec: WindowSpec,
    pub n_features: usize,
    pub target_semantics: TargetSemantics,
    pub splits: BTreeMap<Split, Vec<Window>>,
}

impl WindowedDataset {
    pub fn split(&self, s: Split) -> &[Window] {
        self.splits.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Slides windows over every unit. Output order is canonical: units sorted by
/// id, then window start.
pub fn window(container: &SplitDatasetContainer, spec: WindowSpec, contract: &TaskContract) -> WindowedDataset {
    let n_features = container.channel_names().map(|c| c.len()).unwrap_or(0);
    let mut splits = BTreeMap::new();
    for s in Split::ALL {
        let mut units: Vec<&UnitSeries> = container.split(s).iter().collect();
        units.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
        let mut out = Vec::new();
        for u in units {
            let f = u.n_features();
            for k in 0..spec.count(u.len()) {
                let start = k * spec.stride;
                let end = start + spec.length;
                out.push(Window {
                    unit_id: u.unit_id.clone(),
                    start,
                    values: u.values[start * f..end * f].to_vec(),
                    target: u.labels[end - 1],
                });
            }
        }
        splits.insert(s, out);
    }
    WindowedDataset {
        spec,
        n_features,
        target_semantics: contract.target_semantics,
        splits,
    }
}

// ---------------------------------------------------------------------------
// Leakage audit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageKind {
    Declaration,
    Empirical,
    SplitIntegrity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageViolation {
    pub kind: LeakageKind,
    pub slot: SlotFamily,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub clean: bool,
    pub violations: Vec<LeakageViolation>,
}

/// Audits fitted transforms against the untransformed container they were
/// fitted from: declarations, an independent train-only refit, and unit-level
/// split integrity.
pub fn leakage_audit(fitted: &[FittedTransform], container: &SplitDatasetContainer) -> LeakageReport {
    let mut violations = Vec::new();
    for ov in container.overlapping_units() {
        violations.push(LeakageViolation {
            kind: LeakageKind::SplitIntegrity,
            slot: SlotFamily::Datasource,
            message: format!("unit {ov} appears in more than one split"),
        });
    }
    let train: Vec<&UnitSeries> = container.train.iter().collect();
    for ft in fitted {
        if ft.spec.fit_on != "train" {
            violations.push(LeakageViolation {
                kind: LeakageKind::Declaration,
                slot: SlotFamily::Transform,
                message: format!("{} declares fit_on={}", ft.spec.name, ft.spec.fit_on),
            });
        }
        let refit = statistics_for(ft.spec.kind.declared(), &ft.columns, &train);
        let mut mismatch = None;
        if refit.keys().ne(ft.statistics.keys()) {
            mismatch = Some("statistic names differ".to_string());
        } else {
            'outer: for (k, expected) in &refit {
                let got = &ft.statistics[k];
                if got.len() != expected.len() {
                    mismatch = Some(format!("{k}: column count differs"));
                    break;
                }
                for (i, (e, g)) in expected.iter().zip(got).enumerate() {
                    if !((e - g).abs() <= LEAKAGE_TOLERANCE) {
                        mismatch = Some(format!("{k}[{i}]: fitted {g} vs train-only {e}"));
                        break 'outer;
                    }
                }
            }
        }
        if mismatch.is_none() && fingerprint(ft.spec.kind, &container.train, &refit) != ft.fit_fingerprint {
            mismatch = Some("fit fingerprint does not match the train split".into());
        }
        if let Some(m) = mismatch {
            violations.push(LeakageViolation {
                kind: LeakageKind::Empirical,
                slot: SlotFamily::Transform,
                message: format!("{}: {m}", ft.spec.name),
            });
        }
    }
    LeakageReport {
        clean: violations.is_empty(),
        violations,
    }
}

// ---------------------------------------------------------------------------
// On-disk container and datasources

#[derive(Debug, Serialize, Deserialize)]
struct UnitHeader {
    unit_id: String,
    channel_names: Vec<String>,
    dtype: String,
    order: String,
    rows: usize,
    cols: usize,
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_to_f64s(b: &[u8]) -> Result<Vec<f64>, DataError> {
    if b.len() % 8 != 0 {
        return Err(DataError::Format("blob length is not a multiple of 8".into()));
    }
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes one directory per split; each unit is a JSON header, a float64
/// row-major value blob and a label blob.
pub fn write_container(container: &SplitDatasetContainer, dir: &Path) -> Result<(), DataError> {
    for s in Split::ALL {
        let sd = dir.join(s.as_str());
        fs::create_dir_all(&sd)?;
        for u in container.split(s) {
            let header = UnitHeader {
                unit_id: u.unit_id.clone(),
                channel_names: u.channel_names.clone(),
                dtype: "float64".into(),
                order: "row-major".into(),
                rows: u.len(),
                cols: u.n_features(),
            };
            let header = serde_json::to_string_pretty(&header).map_err(|e| DataError::Format(e.to_string()))?;
            fs::write(sd.join(format!("{}.json", u.unit_id)), header)?;
            fs::write(sd.join(format!("{}.bin", u.unit_id)), f64s_to_bytes(&u.values))?;
            fs::write(sd.join(format!("{}.labels.bin", u.unit_id)), f64s_to_bytes(&u.labels))?;
        }
    }
    Ok(())
}

pub fn read_container(dir: &Path) -> Result<SplitDatasetContainer, DataError> {
    let mut out = SplitDatasetContainer::default();
    for s in Split::ALL {
        let sd = dir.join(s.as_str());
        if !sd.is_dir() {
            continue;
        }
        let mut headers: Vec<_> = fs::read_dir(&sd)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        headers.sort();
        for hp in headers {
            let h: UnitHeader = serde_json::from_slice(&fs::read(&hp)?)
                .map_err(|e| DataError::Format(format!("{}: {e}", hp.display())))?;
            if h.dtype != "float64" || h.order != "row-major" {
                return Err(DataError::Format(format!("{}: unsupported layout", h.unit_id)));
            }
            let values = bytes_to_f64s(&fs::read(sd.join(format!("{}.bin", h.unit_id)))?)?;
            let labels = bytes_to_f64s(&fs::read(sd.join(format!("{}.labels.bin", h.unit_id)))?)?;
            if values.len() != h.rows * h.cols || labels.len() != h.rows {
                return Err(DataError::Format(format!("{}: blob size mismatch", h.unit_id)));
            }
            out.split_mut(s).push(UnitSeries::new(h.unit_id, h.channel_names, values, labels)?);
        }
    }
    Ok(out)
}

/// Anything that can produce a split container. Real dataset adapters
/// implement this.
pub trait Datasource {
    fn load(&self) -> Result<SplitDatasetContainer, DataError>;
}

impl Datasource for SyntheticDegradationSpec {
    fn load(&self) -> Result<SplitDatasetContainer, DataError> {
        generate_synthetic(self)
    }
}

/// Reads a container previously written with [`write_container`].
#[derive(Debug, Clone)]
pub struct DirectorySource {
    pub root: std::path::PathBuf,
}

impl Datasource for DirectorySource {
    fn load(&self) -> Result<SplitDatasetContainer, DataError> {
        read_container(&self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(id: &str, vals: &[f64]) -> UnitSeries {
        UnitSeries::new(id, vec!["a".into()], vals.to_vec(), vec![0.0; vals.len()]).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic_and_partitioned() {
        let spec = SyntheticDegradationSpec {
            n_train: 2,
            n_val: 1,
            n_test: 1,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let ids: BTreeSet<_> = a.units().map(|(_, u)| u.unit_id.clone()).collect();
        assert_eq!(ids.len(), 4);
        assert!(a.overlapping_units().is_empty());
    }

    #[test]
    fn linear_noiseless_latent_reaches_zero() {
        for len in [1, 2, 17, 80] {
            assert_eq!(latent_health(DegradationShape::Linear, len - 1, len), 0.0);
            assert!(latent_health(DegradationShape::Exponential, len - 1, len).abs() < 1e-15);
        }
        let spec = SyntheticDegradationSpec {
            noise: 0.0,
            n_features: 1,
            ..Default::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        for u in &c.train {
            // feature = offset + gain * (1 - h); h hits 0 at the end and 1 at the start
            let first = u.at(0, 0);
            let last = u.at(u.len() - 1, 0);
            let mid = u.at((u.len() - 1) / 2, 0);
            let expected_mid = first + (last - first) * (1.0 - latent_health(spec.shape, (u.len() - 1) / 2, u.len()));
            assert!((mid - expected_mid).abs() < 1e-12);
        }
    }

    #[test]
    fn rul_target_examples() {
        assert_eq!(construct_rul_targets(10, 5.0), vec![5., 5., 5., 5., 5., 4., 3., 2., 1., 0.]);
        assert!(construct_rul_targets(6, 0.0).iter().all(|v| *v == 0.0));
        assert_eq!(construct_rul_targets(4, 10.0), vec![3., 2., 1., 0.]);
    }

    #[test]
    fn zscore_fit_apply_inverse() {
        let c = SplitDatasetContainer {
            train: vec![unit("u0", &[0.0, 2.0])],
            val: vec![],
            test: vec![unit("u1", &[3.0])],
        };
        let ft = fit_transform(&TransformSpec::new(TransformKind::ZScore), &c).unwrap();
        assert_eq!(ft.statistics["mean"], vec![1.0]);
        assert_eq!(ft.statistics["std"], vec![1.0]);
        let out = apply_transform(&ft, &c).unwrap();
        assert_eq!(out.test[0].values, vec![2.0]);
        assert_eq!(inverse_transform(&ft, Column::Feature(0), &[2.0]), vec![3.0]);
    }

    #[test]
    fn fingerprint_tracks_train_units() {
        let mut c = SplitDatasetContainer {
            train: vec![unit("u0", &[0.0, 2.0])],
            ..Default::default()
        };
        let spec = TransformSpec::new(TransformKind::ZScore);
        let a = fit_transform(&spec, &c).unwrap().fit_fingerprint;
        c.train.push(unit("u9", &[1.0]));
        let b = fit_transform(&spec, &c).unwrap().fit_fingerprint;
        assert_ne!(a, b);
    }

    #[test]
    fn transform_errors() {
        let c = SplitDatasetContainer::default();
        assert!(matches!(
            fit_transform(&TransformSpec::new(TransformKind::ZScore), &c),
            Err(DataError::EmptyTrainSplit)
        ));
        let c = SplitDatasetContainer {
            train: vec![unit("u0", &[1.0])],
            ..Default::default()
        };
        let mut spec = TransformSpec::new(TransformKind::ZScore);
        spec.assign_to = vec!["nope".into()];
        assert!(matches!(fit_transform(&spec, &c), Err(DataError::UnknownChannel(_))));
        let mut spec = TransformSpec::new(TransformKind::ZScore);
        spec.fit_on = "val".into();
        assert!(matches!(fit_transform(&spec, &c), Err(DataError::UnsupportedFitOn(_))));
    }

    #[test]
    fn apply_to_train_leaves_test_untouched() {
        let c = generate_synthetic(&SyntheticDegradationSpec::default()).unwrap();
        let mut spec = TransformSpec::new(TransformKind::MinMax);
        spec.apply_to = vec![Split::Train];
        let ft = fit_transform(&spec, &c).unwrap();
        let out = apply_transform(&ft, &c).unwrap();
        assert_eq!(out.split_digest(Split::Test), c.split_digest(Split::Test));
        assert_ne!(out.split_digest(Split::Train), c.split_digest(Split::Train));
    }

    #[test]
    fn window_examples() {
        let spec = WindowSpec::new(4, 2).unwrap();
        let u = UnitSeries::new("u", vec!["a".into()], (0..10).map(f64::from).collect(), construct_rul_targets(10, 100.0)).unwrap();
        let c = SplitDatasetContainer {
            train: vec![u.clone()],
            test: vec![UnitSeries::new("short", vec!["a".into()], vec![0.0; 3], vec![0.0; 3]).unwrap()],
            ..Default::default()
        };
        let w = window(&c, spec, &TaskContract::prognostics());
        let starts: Vec<usize> = w.split(Split::Train).iter().map(|w| w.start).collect();
        assert_eq!(starts, vec![0, 2, 4, 6]);
        assert_eq!(w.split(Split::Test).len(), 0);
        let last = &w.split(Split::Train)[3];
        assert_eq!(last.target, u.labels[9]);
        assert_eq!(last.values, vec![6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn audit_cases() {
        let c = generate_synthetic(&SyntheticDegradationSpec::default()).unwrap();
        let good = fit_transform(&TransformSpec::new(TransformKind::ZScore), &c).unwrap();
        assert!(leakage_audit(std::slice::from_ref(&good), &c).clean);

        let leaky = fit_transform(&TransformSpec::new(TransformKind::ZScoreGlobalFit), &c).unwrap();
        let r = leakage_audit(&[leaky], &c);
        assert!(!r.clean);
        assert_eq!(r.violations[0].kind, LeakageKind::Empirical);
        assert_eq!(r.violations[0].slot, SlotFamily::Transform);

        let mut overlap = c.clone();
        overlap.test.push(c.train[0].clone());
        let r = leakage_audit(&[], &overlap);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].kind, LeakageKind::SplitIntegrity);
        assert_eq!(r.violations[0].slot, SlotFamily::Datasource);
    }

    #[test]
    fn container_disk_round_trip() {
        let c = generate_synthetic(&SyntheticDegradationSpec {
            n_train: 2,
            n_val: 1,
            n_test: 1,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_container(&c, dir.path()).unwrap();
        let back = DirectorySource {
            root: dir.path().to_path_buf(),
        }
        .load()
        .unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn pipeline_is_pure() {
        let c = generate_synthetic(&SyntheticDegradationSpec::default()).unwrap();
        let run = || {
            let ft = fit_transform(&TransformSpec::new(TransformKind::ZScore), &c).unwrap();
            window(&apply_transform(&ft, &c).unwrap(), WindowSpec::new(8, 3).unwrap(), &TaskContract::prognostics())
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(len in 1usize..60, length in 1usize..20, stride in 1usize..10) {
            let spec = WindowSpec::new(length, stride).unwrap();
            let brute = (0..len).filter(|s| s % stride == 0 && s + length <= len).count();
            prop_assert_eq!(spec.count(len), brute);
        }

        #[test]
        fn rul_targets_monotone(len in 1usize..200, clip in 0.0f64..300.0) {
            let t = construct_rul_targets(len, clip);
            prop_assert!(t.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(*t.last().unwrap(), 0.0);
        }

        #[test]
        fn inverse_after_apply_is_identity(seed in 0u64..1000, minmax in any::<bool>()) {
            let c = generate_synthetic(&SyntheticDegradationSpec { seed, n_train: 3, n_val: 1, n_test: 1, ..Default::default() }).unwrap();
            let kind = if minmax { TransformKind::MinMax } else { TransformKind::ZScore };
            let mut spec = TransformSpec::new(kind);
            spec.assign_to = vec!["*".into(), "target".into()];
            let ft = fit_transform(&spec, &c).unwrap();
            let out = apply_transform(&ft, &c).unwrap();
            for (u, o) in c.test.iter().zip(&out.test) {
                let back = inverse_transform(&ft, Column::Target, &o.labels);
                for (a, b) in u.labels.iter().zip(back) { prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0)); }
                for t in 0..u.len() {
                    for ch in 0..u.n_features() {
                        let b = ft.inverse_value(Column::Feature(ch), o.at(t, ch));
                        prop_assert!((u.at(t, ch) - b).abs() <= 1e-12 * u.at(t, ch).abs().max(1.0));
                    }
                }
            }
        }
    }
}

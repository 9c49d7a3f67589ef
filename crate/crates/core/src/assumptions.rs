//! Assumption ledger and the nine-row hyperparameter contract.
//!
//! Every decision the source paper leaves open becomes an [`AssumptionRecord`]
//! bound to one slot family. Records carry their own ordered list of
//! alternative framework defaults so the repair loop can revise them
//! deterministically.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::binding::SlotFamily;

/// The literal marker for a row the paper leaves open.
pub const NOT_SPECIFIED: &str = "NOT_SPECIFIED";

/// Row names of the hyperparameter contract, in canonical order.
pub const HP_ROWS: [&str; 9] = [
    "optimizer",
    "learning_rate",
    "lr_schedule",
    "weight_decay",
    "grad_clip",
    "warmup",
    "max_epochs",
    "batch_size",
    "training_protocol_notes",
];

/// Rows whose framework default is "unset" when the defaults document is silent.
const NULL_DEFAULT_ROWS: [&str; 2] = ["grad_clip", "warmup"];

const PLACEHOLDERS: [&str; 14] = [
    "", "tbd", "tba", "todo", "?", "??", "???", "...", "n/a", "na", "unknown", "placeholder",
    "xxx", "not specified",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    Span,
    Absent,
}

/// Where in the source an assumption's evidence lives, or that there is none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEvidence")]
pub struct EvidenceRef {
    pub kind: EvidenceKind,
    pub locator: String,
}

#[derive(Deserialize)]
struct RawEvidence {
    kind: EvidenceKind,
    #[serde(default)]
    locator: String,
}

impl TryFrom<RawEvidence> for EvidenceRef {
    type Error = String;

    fn try_from(raw: RawEvidence) -> Result<Self, String> {
        match raw.kind {
            EvidenceKind::Absent if !raw.locator.is_empty() => {
                Err("absent evidence must not carry a locator".into())
            }
            EvidenceKind::Span if raw.locator.is_empty() => Err("span evidence needs a locator".into()),
            kind => Ok(EvidenceRef {
                kind,
                locator: raw.locator,
            }),
        }
    }
}

impl EvidenceRef {
    pub fn span(locator: impl Into<String>) -> Self {
        EvidenceRef {
            kind: EvidenceKind::Span,
            locator: locator.into(),
        }
    }

    pub fn absent() -> Self {
        EvidenceRef {
            kind: EvidenceKind::Absent,
            locator: String::new(),
        }
    }
}

/// One recorded under-specified decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionRecord {
    pub id: usize,
    pub slot: SlotFamily,
    pub evidence: EvidenceRef,
    /// Configuration leaf the assumption controls, e.g. `sequencer.length`.
    pub path: String,
    pub value: Value,
    pub justification: String,
    #[serde(default)]
    pub alternatives: Vec<Value>,
    #[serde(default)]
    pub attempts_used: usize,
}

/// Every alternative of a record has been tried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("assumption {0} has no untried alternatives")]
pub struct Exhausted(pub usize);

impl AssumptionRecord {
    pub fn is_exhausted(&self) -> bool {
        self.attempts_used >= self.alternatives.len()
    }

    /// The alternative the next call to [`select_alternative`](Self::select_alternative)
    /// would return.
    pub fn peek_alternative(&self) -> Option<&Value> {
        self.alternatives.get(self.attempts_used)
    }

    /// Takes the next alternative in declared order and makes it the record's value.
    pub fn select_alternative(&mut self) -> Result<Value, Exhausted> {
        let next = self
            .alternatives
            .get(self.attempts_used)
            .cloned()
            .ok_or(Exhausted(self.id))?;
        self.attempts_used += 1;
        self.value = next.clone();
        Ok(next)
    }
}

/// True iff the record's slot is among the slots a failing check implicates.
pub fn attributable(record: &AssumptionRecord, implicated: &BTreeSet<SlotFamily>) -> bool {
    implicated.contains(&record.slot)
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("ledger line {line}: expected id {expected}, found {found}")]
    OutOfOrder { line: usize, expected: usize, found: usize },
    #[error("ledger record {0}: attempts_used exceeds alternatives")]
    AttemptsOverflow(usize),
}

/// Append-only list of assumption records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    records: Vec<AssumptionRecord>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record and returns its id.
    pub fn record(
        &mut self,
        slot: SlotFamily,
        evidence: EvidenceRef,
        path: impl Into<String>,
        value: Value,
        justification: impl Into<String>,
        alternatives: Vec<Value>,
    ) -> usize {
        let id = self.records.len();
        self.records.push(AssumptionRecord {
            id,
            slot,
            evidence,
            path: path.into(),
            value,
            justification: justification.into(),
            alternatives,
            attempts_used: 0,
        });
        id
    }

    /// Appends an already-built record, renumbering it to the next id.
    pub fn push(&mut self, mut record: AssumptionRecord) -> usize {
        record.id = self.records.len();
        record.attempts_used = record.attempts_used.min(record.alternatives.len());
        let id = record.id;
        self.records.push(record);
        id
    }

    pub fn records(&self) -> &[AssumptionRecord] {
        &self.records
    }

    pub fn get(&self, id: usize) -> Option<&AssumptionRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn select_alternative(&mut self, id: usize) -> Result<Value, Exhausted> {
        self.records.get_mut(id).ok_or(Exhausted(id))?.select_alternative()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LedgerError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: AssumptionRecord =
                serde_json::from_str(line).map_err(|source| LedgerError::Line { line: i + 1, source })?;
            if r.id != records.len() {
                return Err(LedgerError::OutOfOrder {
                    line: i + 1,
                    expected: records.len(),
                    found: r.id,
                });
            }
            if r.attempts_used > r.alternatives.len() {
                return Err(LedgerError::AttemptsOverflow(r.id));
            }
            records.push(r);
        }
        Ok(Ledger { records })
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(&self.records).expect("records serialize")
    }

    pub fn from_value(v: &Value) -> Result<Self, serde_json::Error> {
        let records: Vec<AssumptionRecord> = serde_json::from_value(v.clone())?;
        Ok(Ledger { records })
    }
}

// ---------------------------------------------------------------------------
// Hyperparameter contract

#[derive(Debug, Clone, PartialEq)]
pub enum HpValue {
    NotSpecified,
    Concrete(Value),
}

impl HpValue {
    fn to_value(&self) -> Value {
        match self {
            HpValue::NotSpecified => Value::String(NOT_SPECIFIED.into()),
            HpValue::Concrete(v) => v.clone(),
        }
    }

    fn from_value(v: &Value) -> Self {
        match v {
            Value::String(s) if s == NOT_SPECIFIED => HpValue::NotSpecified,
            other => HpValue::Concrete(other.clone()),
        }
    }

    pub fn concrete(&self) -> Option<&Value> {
        match self {
            HpValue::Concrete(v) => Some(v),
            HpValue::NotSpecified => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HpSource {
    Paper,
    Imputed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperparameterRow {
    pub value: HpValue,
    pub source: HpSource,
}

impl HyperparameterRow {
    pub fn paper(value: Value) -> Self {
        HyperparameterRow {
            value: HpValue::from_value(&value),
            source: HpSource::Paper,
        }
    }

    pub fn not_specified() -> Self {
        HyperparameterRow {
            value: HpValue::NotSpecified,
            source: HpSource::Paper,
        }
    }
}

/// The nine-row training hyperparameter table (rows may be missing until validated).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HyperparameterContract {
    rows: BTreeMap<String, HyperparameterRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractViolation {
    #[error("missing_row: {0}")]
    MissingRow(String),
    #[error("placeholder_value: {0}")]
    PlaceholderValue(String),
    #[error("unknown_row: {0}")]
    UnknownRow(String),
    #[error("malformed_row: {0}")]
    MalformedRow(String),
}

impl ContractViolation {
    pub fn row(&self) -> &str {
        match self {
            ContractViolation::MissingRow(r)
            | ContractViolation::PlaceholderValue(r)
            | ContractViolation::UnknownRow(r)
            | ContractViolation::MalformedRow(r) => r,
        }
    }
}

impl HyperparameterContract {
    pub fn new() -> Self {
        Self::default()
    }

    /// A table where every row is `NOT_SPECIFIED`.
    pub fn all_unspecified() -> Self {
        let mut t = Self::new();
        for r in HP_ROWS {
            t.set(r, HyperparameterRow::not_specified());
        }
        t
    }

    pub fn set(&mut self, row: &str, value: HyperparameterRow) {
        self.rows.insert(row.to_string(), value);
    }

    pub fn remove(&mut self, row: &str) -> Option<HyperparameterRow> {
        self.rows.remove(row)
    }

    pub fn row(&self, name: &str) -> Option<&HyperparameterRow> {
        self.rows.get(name)
    }

    pub fn concrete(&self, name: &str) -> Option<&Value> {
        self.rows.get(name).and_then(|r| r.value.concrete())
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &HyperparameterRow)> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn not_specified_count(&self) -> usize {
        self.rows
            .values()
            .filter(|r| r.value == HpValue::NotSpecified)
            .count()
    }

    /// Canonical tree form: rows in contract order, then unknown rows.
    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        let known = HP_ROWS.iter().filter_map(|r| self.rows.get_key_value(*r));
        let unknown = self
            .rows
            .iter()
            .filter(|(k, _)| !HP_ROWS.contains(&k.as_str()));
        for (name, row) in known.chain(unknown) {
            let mut r = Map::new();
            r.insert("value".into(), row.value.to_value());
            r.insert(
                "source".into(),
                serde_json::to_value(row.source).expect("enum serializes"),
            );
            map.insert(name.clone(), Value::Object(r));
        }
        Value::Object(map)
    }

    /// Reads the tree form. A row may be `{value, source}` or a bare value
    /// (taken as paper-stated).
    pub fn from_value(v: &Value) -> Result<Self, ContractViolation> {
        let obj = v
            .as_object()
            .ok_or_else(|| ContractViolation::MalformedRow("<table>".into()))?;
        let mut t = Self::new();
        for (name, row) in obj {
            let parsed = match row {
                Value::Object(r) if r.contains_key("value") => {
                    let source = match r.get("source") {
                        None => HpSource::Paper,
                        Some(s) => serde_json::from_value(s.clone())
                            .map_err(|_| ContractViolation::MalformedRow(name.clone()))?,
                    };
                    if r.keys().any(|k| k != "value" && k != "source") {
                        return Err(ContractViolation::MalformedRow(name.clone()));
                    }
                    HyperparameterRow {
                        value: HpValue::from_value(&r["value"]),
                        source,
                    }
                }
                other => HyperparameterRow::paper(other.clone()),
            };
            t.rows.insert(name.clone(), parsed);
        }
        Ok(t)
    }
}

fn is_placeholder(v: &Value) -> bool {
    match v {
        Value::String(s) => {
            let t = s.trim().to_ascii_lowercase();
            PLACEHOLDERS.contains(&t.as_str())
                || (t.starts_with('<') && t.ends_with('>'))
                || (t == NOT_SPECIFIED.to_ascii_lowercase() && s != NOT_SPECIFIED)
        }
        Value::Array(a) => a.is_empty(),
        Value::Object(o) => o.is_empty(),
        _ => false,
    }
}

/// Empty iff all nine rows are present with a concrete value or the literal
/// `NOT_SPECIFIED`.
pub fn validate_contract(table: &HyperparameterContract) -> Vec<ContractViolation> {
    let mut out = Vec::new();
    for row in HP_ROWS {
        match table.rows.get(row) {
            None => out.push(ContractViolation::MissingRow(row.into())),
            Some(r) => {
                if let HpValue::Concrete(v) = &r.value {
                    if is_placeholder(v) {
                        out.push(ContractViolation::PlaceholderValue(row.into()));
                    }
                }
            }
        }
    }
    for name in table.rows.keys() {
        if !HP_ROWS.contains(&name.as_str()) {
            out.push(ContractViolation::UnknownRow(name.clone()));
        }
    }
    out
}

/// A framework defaults document: one value per row plus alternative catalogs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameworkDefaults {
    /// Identifier of the default document, e.g. `configs`.
    pub source: String,
    pub values: BTreeMap<String, Value>,
    /// Per-row override of `source` (e.g. `configs/trainer/default.yaml`).
    #[serde(default)]
    pub sources: BTreeMap<String, String>,
    #[serde(default)]
    pub alternatives: BTreeMap<String, Vec<Value>>,
}

impl FrameworkDefaults {
    /// The shipped trainer defaults.
    pub fn builtin() -> Self {
        let values = [
            ("optimizer", Value::from("adamw")),
            ("learning_rate", Value::from(1.0e-3)),
            ("lr_schedule", Value::from("reduce_on_plateau")),
            ("weight_decay", Value::from(0.0)),
            ("max_epochs", Value::from(300)),
            ("batch_size", Value::from(512)),
            (
                "training_protocol_notes",
                Value::from("provenance only; framework protocol applies"),
            ),
        ];
        let alternatives = [
            (
                "learning_rate",
                vec![Value::from(3.0e-3), Value::from(1.0e-2), Value::from(3.0e-4)],
            ),
            ("optimizer", vec![Value::from("adam"), Value::from("sgd")]),
            ("weight_decay", vec![Value::from(1.0e-4)]),
            ("max_epochs", vec![Value::from(100), Value::from(500)]),
            ("grad_clip", vec![Value::from(1.0)]),
        ];
        FrameworkDefaults {
            source: "configs".into(),
            values: values.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            sources: [("max_epochs".to_string(), "configs/trainer/default.yaml".to_string())]
                .into_iter()
                .collect(),
            alternatives: alternatives
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }

    pub fn source_for(&self, row: &str) -> &str {
        self.sources.get(row).map(String::as_str).unwrap_or(&self.source)
    }
}

/// Provenance of one imputed row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionAnnotation {
    pub row_name: String,
    pub imputed_value: Value,
    pub default_source: String,
}

impl SubstitutionAnnotation {
    /// The inline comment form, e.g.
    /// `# SUBSTITUTION: learning_rate=NOT_SPECIFIED -> 1.0e-3 from configs`.
    pub fn render(&self) -> String {
        if self.imputed_value.is_null() {
            format!(
                "# SUBSTITUTION: {}=NOT_SPECIFIED -> null because {} does not set {}",
                self.row_name, self.default_source, self.row_name
            )
        } else {
            format!(
                "# SUBSTITUTION: {}=NOT_SPECIFIED -> {} from {}",
                self.row_name,
                format_scalar(&self.imputed_value),
                self.default_source
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImputeError {
    #[error("hyperparameter table fails its contract: {0:?}")]
    InvalidContract(Vec<ContractViolation>),
    #[error("no framework default for `{0}`")]
    MissingDefault(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub table: HyperparameterContract,
    pub annotations: Vec<SubstitutionAnnotation>,
    pub records: Vec<AssumptionRecord>,
}

/// Slot family a hyperparameter row is attributed to.
pub fn row_slot(row: &str) -> SlotFamily {
    match row {
        "training_protocol_notes" => SlotFamily::Task,
        _ => SlotFamily::Model,
    }
}

/// Config path of a hyperparameter row's value.
pub fn row_path(row: &str) -> String {
    format!("hyperparameters.{row}.value")
}

/// Replaces every `NOT_SPECIFIED` row with the framework default.
///
/// Returned records have `id` 0..n; [`Ledger::push`] renumbers them.
pub fn impute(
    table: &HyperparameterContract,
    defaults: &FrameworkDefaults,
) -> Result<Imputation, ImputeError> {
    let violations = validate_contract(table);
    if !violations.is_empty() {
        return Err(ImputeError::InvalidContract(violations));
    }
    let mut out = table.clone();
    let mut annotations = Vec::new();
    let mut records = Vec::new();
    for row in HP_ROWS {
        if table.rows[row].value != HpValue::NotSpecified {
            continue;
        }
        let value = match defaults.values.get(row) {
            Some(v) => v.clone(),
            None if NULL_DEFAULT_ROWS.contains(&row) => Value::Null,
            None => return Err(ImputeError::MissingDefault(row.into())),
        };
        let source = defaults.source_for(row).to_string();
        out.set(
            row,
            HyperparameterRow {
                value: HpValue::Concrete(value.clone()),
                source: HpSource::Imputed,
            },
        );
        let alternatives = defaults
            .alternatives
            .get(row)
            .map(|alts| alts.iter().filter(|a| **a != value).cloned().collect())
            .unwrap_or_default();
        records.push(AssumptionRecord {
            id: records.len(),
            slot: row_slot(row),
            evidence: EvidenceRef::absent(),
            path: row_path(row),
            value: value.clone(),
            justification: format!("{row} not stated; framework default from {source}"),
            alternatives,
            attempts_used: 0,
        });
        annotations.push(SubstitutionAnnotation {
            row_name: row.into(),
            imputed_value: value,
            default_source: source,
        });
    }
    Ok(Imputation {
        table: out,
        annotations,
        records,
    })
}

/// Human rendering of a scalar: small floats in `1.0e-3` form, integral
/// floats keep a trailing `.0`.
pub fn format_scalar(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => {
            let f = n.as_f64().expect("f64 number");
            if f != 0.0 && (f.abs() < 1e-2 || f.abs() >= 1e6) {
                let s = format!("{f:e}");
                match s.split_once('e') {
                    Some((m, e)) if !m.contains('.') => format!("{m}.0e{e}"),
                    _ => s,
                }
            } else if f.fract() == 0.0 {
                format!("{f:.1}")
            } else {
                format!("{f}")
            }
        }
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Renders a configuration tree as indented `key: value` text, attaching each
/// substitution annotation to its hyperparameter row and listing them all in a
/// header block.
pub fn render_annotated_config(tree: &Value, annotations: &[SubstitutionAnnotation]) -> String {
    let by_row: BTreeMap<&str, &SubstitutionAnnotation> =
        annotations.iter().map(|a| (a.row_name.as_str(), a)).collect();
    let mut out = String::new();
    for a in annotations {
        out.push_str(&a.render());
        out.push('\n');
    }
    if !annotations.is_empty() {
        out.push('\n');
    }
    if let Value::Object(m) = tree {
        for (k, v) in m {
            if k == "hyperparameters" {
                out.push_str("hyperparameters:\n");
                if let Value::Object(rows) = v {
                    for (row, body) in rows {
                        let value = body.get("value").unwrap_or(body);
                        out.push_str(&format!("  {row}: {}", format_scalar(value)));
                        if let Some(a) = by_row.get(row.as_str()) {
                            out.push_str("  ");
                            out.push_str(&a.render());
                        }
                        out.push('\n');
                    }
                }
            } else {
                render_node(&mut out, k, v, 0);
            }
        }
    }
    out
}

fn render_node(out: &mut String, key: &str, v: &Value, depth: usize) {
    let pad = "  ".repeat(depth);
    match v {
        Value::Object(m) if !m.is_empty() => {
            out.push_str(&format!("{pad}{key}:\n"));
            for (k, child) in m {
                render_node(out, k, child, depth + 1);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(format_scalar).collect();
            out.push_str(&format!("{pad}{key}: [{}]\n", parts.join(", ")));
        }
        other => out.push_str(&format!("{pad}{key}: {}\n", format_scalar(other))),
    }
}

impl fmt::Display for AssumptionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#{} {}:{}={}",
            self.id,
            self.slot,
            self.path,
            format_scalar(&self.value)
        )
    }
}

/// Markdown table mirror of a ledger.
pub fn render_ledger_table(ledger: &Ledger) -> String {
    let mut out = String::from(
        "| id | slot | evidence | path | value | justification | alternatives | attempts |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for r in ledger.records() {
        let evidence = match r.evidence.kind {
            EvidenceKind::Absent => "absent".to_string(),
            EvidenceKind::Span => format!("span: {}", r.evidence.locator),
        };
        let alts: Vec<String> = r.alternatives.iter().map(format_scalar).collect();
        out.push_str(&format!(
            "| {} | {} | {} | `{}` | {} | {} | {} | {}/{} |\n",
            r.id,
            r.slot,
            evidence,
            r.path,
            format_scalar(&r.value),
            r.justification.replace('|', "\\|"),
            alts.join(", "),
            r.attempts_used,
            r.alternatives.len()
        ));
    }
    out
}

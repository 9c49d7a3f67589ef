//! Slot bindings: composition, typechecking against task contracts, and
//! binding-state classification.
//!
//! A configuration tree binds one component to each of six slot families.
//! A slot node is an object whose `component` key names a registry entry and
//! whose remaining keys are that component's parameters. The optional
//! top-level `hyperparameters` key holds the nine-row training contract.
//!
//! Canonical key order of a serialized configuration: `task`, `datasource`,
//! `transform`, `sequencer`, `model`, `evaluator`, `hyperparameters` (rows in
//! contract order), then any unrecognized keys in the order they were
//! written. Inside a slot node `component` comes first, then parameters in
//! authoring order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::assumptions::{validate_contract, ContractViolation, HyperparameterContract};
use crate::tree::{self, PathError};

/// Reserved key naming the bound component inside a slot node.
pub const COMPONENT_KEY: &str = "component";
pub const HYPERPARAMETERS_KEY: &str = "hyperparameters";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotFamily {
    Task,
    Datasource,
    Transform,
    Sequencer,
    Model,
    Evaluator,
}

impl SlotFamily {
    pub const ALL: [SlotFamily; 6] = [
        SlotFamily::Task,
        SlotFamily::Datasource,
        SlotFamily::Transform,
        SlotFamily::Sequencer,
        SlotFamily::Model,
        SlotFamily::Evaluator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SlotFamily::Task => "task",
            SlotFamily::Datasource => "datasource",
            SlotFamily::Transform => "transform",
            SlotFamily::Sequencer => "sequencer",
            SlotFamily::Model => "model",
            SlotFamily::Evaluator => "evaluator",
        }
    }
}

impl fmt::Display for SlotFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SlotFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SlotFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown slot family `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Prognostics,
    Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSemantics {
    ContinuousTarget,
    ClassLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationUnit {
    Window,
    Unit,
}

/// One symbolic dimension of a prediction shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeDim {
    #[serde(rename = "B")]
    Batch,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "K")]
    Outputs,
}

/// The (batch, 1, outputs) layout every task contract requires.
pub const CONTRACT_SHAPE: [ShapeDim; 3] = [ShapeDim::Batch, ShapeDim::One, ShapeDim::Outputs];

/// Typed agreement between a task family and the components bound to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawContract")]
pub struct TaskContract {
    pub task_kind: TaskKind,
    pub target_semantics: TargetSemantics,
    pub evaluation_unit: EvaluationUnit,
    pub required_batch_keys: BTreeSet<String>,
    /// K: number of regression targets or classes.
    pub outputs: usize,
}

#[derive(Deserialize)]
struct RawContract {
    task_kind: TaskKind,
    target_semantics: TargetSemantics,
    evaluation_unit: EvaluationUnit,
    #[serde(default = "default_batch_keys")]
    required_batch_keys: BTreeSet<String>,
    outputs: usize,
}

fn default_batch_keys() -> BTreeSet<String> {
    ["x", "y"].into_iter().map(String::from).collect()
}

impl TryFrom<RawContract> for TaskContract {
    type Error = String;

    fn try_from(r: RawContract) -> Result<Self, String> {
        TaskContract::new(r.task_kind, r.target_semantics, r.evaluation_unit, r.outputs)
            .map(|c| c.with_batch_keys(r.required_batch_keys))
    }
}

impl TaskContract {
    pub fn new(
        task_kind: TaskKind,
        target_semantics: TargetSemantics,
        evaluation_unit: EvaluationUnit,
        outputs: usize,
    ) -> Result<Self, String> {
        match (task_kind, target_semantics) {
            (TaskKind::Prognostics, TargetSemantics::ContinuousTarget)
            | (TaskKind::Diagnostics, TargetSemantics::ClassLabel) => {}
            _ => return Err(format!("{task_kind:?} cannot carry {target_semantics:?} targets")),
        }
        if outputs == 0 {
            return Err("contract needs at least one output".into());
        }
        if task_kind == TaskKind::Diagnostics && outputs < 2 {
            return Err("diagnostics needs at least two classes".into());
        }
        Ok(TaskContract {
            task_kind,
            target_semantics,
            evaluation_unit,
            required_batch_keys: default_batch_keys(),
            outputs,
        })
    }

    pub fn prognostics() -> Self {
        Self::new(
            TaskKind::Prognostics,
            TargetSemantics::ContinuousTarget,
            EvaluationUnit::Unit,
            1,
        )
        .expect("valid contract")
    }

    pub fn diagnostics(classes: usize) -> Self {
        Self::new(
            TaskKind::Diagnostics,
            TargetSemantics::ClassLabel,
            EvaluationUnit::Window,
            classes,
        )
        .expect("valid contract")
    }

    pub fn with_batch_keys(mut self, keys: BTreeSet<String>) -> Self {
        self.required_batch_keys = keys;
        self
    }

    pub fn with_evaluation_unit(mut self, unit: EvaluationUnit) -> Self {
        self.evaluation_unit = unit;
        self
    }

    pub fn prediction_shape(&self) -> [ShapeDim; 3] {
        CONTRACT_SHAPE
    }
}

/// A bound component: family, registry name and parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentRef {
    pub family: SlotFamily,
    pub name: String,
    pub parameters: Map<String, Value>,
}

impl ComponentRef {
    pub fn new(family: SlotFamily, name: impl Into<String>) -> Self {
        ComponentRef {
            family,
            name: name.into(),
            parameters: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.parameters.insert(key.to_string(), value);
        self
    }

    pub fn param(&self, key: &str) -> Option<&Value> {
        self.parameters.get(key)
    }

    fn from_node(family: SlotFamily, node: &Value) -> Result<Self, ComposeError> {
        let malformed = |reason: &str| ComposeError::MalformedBinding {
            family,
            reason: reason.to_string(),
        };
        match node {
            Value::String(name) if !name.is_empty() => Ok(ComponentRef::new(family, name.clone())),
            Value::Object(m) => {
                let name = m
                    .get(COMPONENT_KEY)
                    .and_then(Value::as_str)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| malformed("missing nonempty `component`"))?;
                let parameters = m
                    .iter()
                    .filter(|(k, _)| k.as_str() != COMPONENT_KEY)
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                Ok(ComponentRef {
                    family,
                    name: name.to_string(),
                    parameters,
                })
            }
            _ => Err(malformed("slot node must be an object or a component name")),
        }
    }

    pub fn to_node(&self) -> Value {
        let mut m = Map::new();
        m.insert(COMPONENT_KEY.into(), Value::String(self.name.clone()));
        for (k, v) in &self.parameters {
            m.insert(k.clone(), v.clone());
        }
        Value::Object(m)
    }
}

// ---------------------------------------------------------------------------
// Registry

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Integer,
    Number,
    String,
    Boolean,
    List,
    Object,
    Any,
}

impl ParamKind {
    fn accepts(self, v: &Value) -> bool {
        match self {
            ParamKind::Integer => v.is_i64() || v.is_u64(),
            ParamKind::Number => v.is_number(),
            ParamKind::String => v.is_string(),
            ParamKind::Boolean => v.is_boolean(),
            ParamKind::List => v.is_array(),
            ParamKind::Object => v.is_object(),
            ParamKind::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub kind: ParamKind,
    #[serde(default)]
    pub required: bool,
}

impl ParamSpec {
    pub fn optional(kind: ParamKind) -> Self {
        ParamSpec { kind, required: false }
    }

    pub fn required(kind: ParamKind) -> Self {
        ParamSpec { kind, required: true }
    }
}

/// Contract-relevant capabilities a component declares as data.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_kind: Option<TaskKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_semantics: Option<TargetSemantics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_shape: Option<Vec<ShapeDim>>,
    /// Splits a transform can be fitted on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_on: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation_units: Option<Vec<EvaluationUnit>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_keys: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentDescriptor {
    pub family: SlotFamily,
    pub name: String,
    /// Built-in implementation backing this component; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implementation: Option<String>,
    #[serde(default)]
    pub capabilities: Capabilities,
    #[serde(default)]
    pub parameters: BTreeMap<String, ParamSpec>,
}

impl ComponentDescriptor {
    pub fn implementation(&self) -> &str {
        self.implementation.as_deref().unwrap_or(&self.name)
    }

    /// Capability keys a descriptor of this family must declare.
    fn missing_capabilities(&self) -> Vec<&'static str> {
        let c = &self.capabilities;
        let mut missing = Vec::new();
        match self.family {
            SlotFamily::Task => {
                if c.task_kind.is_none() {
                    missing.push("task_kind");
                }
                if c.target_semantics.is_none() {
                    missing.push("target_semantics");
                }
            }
            SlotFamily::Datasource => {}
            SlotFamily::Transform => {
                if c.fit_on.is_none() {
                    missing.push("fit_on");
                }
            }
            SlotFamily::Sequencer => {
                if c.batch_keys.is_none() {
                    missing.push("batch_keys");
                }
            }
            SlotFamily::Model => {
                if c.prediction_shape.is_none() {
                    missing.push("prediction_shape");
                }
                if c.target_semantics.is_none() {
                    missing.push("target_semantics");
                }
            }
            SlotFamily::Evaluator => {
                if c.evaluation_units.is_none() {
                    missing.push("evaluation_units");
                }
            }
        }
        missing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PreRun,
    CreatedThisRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    #[serde(flatten)]
    pub descriptor: ComponentDescriptor,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("component {family}/{name} is already registered")]
    DuplicateComponent { family: SlotFamily, name: String },
    #[error("descriptor {family}/{name} rejected: {reason}")]
    RejectedDescriptor {
        family: SlotFamily,
        name: String,
        reason: String,
    },
    #[error("invalid registry manifest: {0}")]
    Manifest(String),
}

/// The framework component inventory plus this run's extensions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComponentRegistry {
    entries: BTreeMap<(SlotFamily, String), RegistryEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    components: Vec<RegistryEntry>,
}

impl ComponentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, family: SlotFamily, name: &str) -> Option<&RegistryEntry> {
        self.entries.get(&(family, name.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn validate_descriptor(d: &ComponentDescriptor) -> Result<(), RegistryError> {
        let reject = |reason: String| RegistryError::RejectedDescriptor {
            family: d.family,
            name: d.name.clone(),
            reason,
        };
        if d.name.is_empty() {
            return Err(reject("empty name".into()));
        }
        if d.parameters.contains_key(COMPONENT_KEY) {
            return Err(reject(format!("parameter schema uses reserved key `{COMPONENT_KEY}`")));
        }
        let missing = d.missing_capabilities();
        if !missing.is_empty() {
            return Err(reject(format!("missing capability declarations: {}", missing.join(", "))));
        }
        if let Some(shape) = &d.capabilities.prediction_shape {
            if shape.len() < 2 {
                return Err(reject("prediction_shape needs at least two dimensions".into()));
            }
        }
        Ok(())
    }

    /// Adds a framework (pre-run) component.
    pub fn with_framework(mut self, d: ComponentDescriptor) -> Result<Self, RegistryError> {
        self.insert(d, Provenance::PreRun)?;
        Ok(self)
    }

    fn insert(&mut self, d: ComponentDescriptor, provenance: Provenance) -> Result<(), RegistryError> {
        Self::validate_descriptor(&d)?;
        let key = (d.family, d.name.clone());
        if self.entries.contains_key(&key) {
            return Err(RegistryError::DuplicateComponent {
                family: d.family,
                name: d.name,
            });
        }
        self.entries.insert(
            key,
            RegistryEntry {
                descriptor: d,
                provenance,
            },
        );
        Ok(())
    }

    /// Returns a new registry that also holds `descriptor`, flagged as created
    /// during this run.
    pub fn register_extension(&self, descriptor: ComponentDescriptor) -> Result<Self, RegistryError> {
        let mut next = self.clone();
        next.insert(descriptor, Provenance::CreatedThisRun)?;
        Ok(next)
    }

    pub fn to_manifest(&self) -> Value {
        serde_json::to_value(Manifest {
            components: self.entries.values().cloned().collect(),
        })
        .expect("manifest serializes")
    }

    pub fn from_manifest(v: &Value) -> Result<Self, RegistryError> {
        let m: Manifest =
            serde_json::from_value(v.clone()).map_err(|e| RegistryError::Manifest(e.to_string()))?;
        let mut reg = Self::new();
        for e in m.components {
            reg.insert(e.descriptor, e.provenance)?;
        }
        Ok(reg)
    }

    /// The framework's shipped components.
    pub fn builtin() -> Self {
        crate::components::builtin_descriptors()
            .into_iter()
            .try_fold(Self::new(), |reg, d| reg.with_framework(d))
            .expect("builtin descriptors are valid")
    }
}

// ---------------------------------------------------------------------------
// Composition

/// One step of composition, recorded in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Directive {
    /// Merge a named default document.
    Default { name: String, document: Value },
    /// `path=value` (or `+path=value` with `create`).
    Override { path: String, value: Value, create: bool },
    /// A single-leaf patch applied by the repair loop for an assumption record.
    Repair {
        path: String,
        value: Value,
        assumption: usize,
    },
    /// Replace a whole slot binding (benchmark swap).
    Rebind { family: SlotFamily, node: Value },
}

impl Directive {
    /// Parses `path=value` / `+path=value`.
    pub fn parse_override(text: &str) -> Result<Self, ComposeError> {
        let (lhs, rhs) = text
            .split_once('=')
            .ok_or_else(|| ComposeError::InvalidOverride(text.to_string()))?;
        let (create, path) = match lhs.strip_prefix('+') {
            Some(p) => (true, p),
            None => (false, lhs),
        };
        if path.is_empty() {
            return Err(ComposeError::InvalidOverride(text.to_string()));
        }
        Ok(Directive::Override {
            path: path.to_string(),
            value: tree::parse_scalar(rhs),
            create,
        })
    }

    fn apply(&self, tree: &mut Value) -> Result<(), ComposeError> {
        match self {
            Directive::Default { document, .. } => {
                tree::merge(tree, document);
                Ok(())
            }
            Directive::Override { path, value, create } => tree::set_path(tree, path, value.clone(), *create)
                .map_err(|source| ComposeError::InvalidOverridePath {
                    path: path.clone(),
                    source,
                }),
            Directive::Repair { path, value, .. } => tree::set_path(tree, path, value.clone(), false)
                .map_err(|source| ComposeError::InvalidOverridePath {
                    path: path.clone(),
                    source,
                }),
            Directive::Rebind { family, node } => {
                tree::set_path(tree, family.as_str(), node.clone(), true).map_err(|source| {
                    ComposeError::InvalidOverridePath {
                        path: family.to_string(),
                        source,
                    }
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComposeError {
    #[error("unresolved default document `{0}`")]
    UnresolvedDefault(String),
    #[error("invalid override path `{path}`: {source}")]
    InvalidOverridePath {
        path: String,
        #[source]
        source: PathError,
    },
    #[error("invalid override directive `{0}` (expected path=value)")]
    InvalidOverride(String),
    #[error("malformed {family} binding: {reason}")]
    MalformedBinding { family: SlotFamily, reason: String },
    #[error("malformed hyperparameter table: {0}")]
    MalformedHyperparameters(ContractViolation),
    #[error("configuration root must be an object")]
    NotAnObject,
}

/// Named default documents available to composition.
pub type DefaultsCatalog = BTreeMap<String, Value>;

/// The binding `c`: one component per slot family, the hyperparameter
/// contract, and the directives that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfiguration {
    pub bindings: BTreeMap<SlotFamily, ComponentRef>,
    pub hyperparameters: Option<HyperparameterContract>,
    /// Top-level keys that are neither slots nor hyperparameters.
    pub extra: Map<String, Value>,
    pub composition_trace: Vec<Directive>,
}

impl ResolvedConfiguration {
    pub fn from_tree(tree: &Value, trace: Vec<Directive>) -> Result<Self, ComposeError> {
        let obj = tree.as_object().ok_or(ComposeError::NotAnObject)?;
        let mut bindings = BTreeMap::new();
        let mut extra = Map::new();
        let mut hyperparameters = None;
        for (k, v) in obj {
            if let Ok(family) = k.parse::<SlotFamily>() {
                bindings.insert(family, ComponentRef::from_node(family, v)?);
            } else if k == HYPERPARAMETERS_KEY {
                hyperparameters = Some(
                    HyperparameterContract::from_value(v).map_err(ComposeError::MalformedHyperparameters)?,
                );
            } else {
                extra.insert(k.clone(), v.clone());
            }
        }
        Ok(ResolvedConfiguration {
            bindings,
            hyperparameters,
            extra,
            composition_trace: trace,
        })
    }

    /// Canonical tree form (see module docs for key order).
    pub fn to_tree(&self) -> Value {
        let mut m = Map::new();
        for family in SlotFamily::ALL {
            if let Some(b) = self.bindings.get(&family) {
                m.insert(family.to_string(), b.to_node());
            }
        }
        if let Some(hp) = &self.hyperparameters {
            m.insert(HYPERPARAMETERS_KEY.into(), hp.to_value());
        }
        for (k, v) in &self.extra {
            m.insert(k.clone(), v.clone());
        }
        Value::Object(m)
    }

    pub fn binding(&self, family: SlotFamily) -> Option<&ComponentRef> {
        self.bindings.get(&family)
    }

    pub fn get(&self, path: &str) -> Option<Value> {
        tree::get_path(&self.to_tree(), path).cloned()
    }

    /// Applies one more directive, returning the new configuration with the
    /// directive appended to its trace.
    pub fn apply(&self, directive: Directive) -> Result<Self, ComposeError> {
        let mut t = self.to_tree();
        directive.apply(&mut t)?;
        let mut trace = self.composition_trace.clone();
        trace.push(directive);
        Self::from_tree(&t, trace)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(&self.to_tree()).expect("tree serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Rebuilds a configuration by applying `trace` to `base`.
pub fn replay(base: &Value, trace: &[Directive]) -> Result<ResolvedConfiguration, ComposeError> {
    let mut t = base.clone();
    if !t.is_object() {
        return Err(ComposeError::NotAnObject);
    }
    for d in trace {
        d.apply(&mut t)?;
    }
    ResolvedConfiguration::from_tree(&t, trace.to_vec())
}

/// Left-to-right layered merge: `base`, then each named default, then the
/// override directives. Later writers win.
pub fn compose(
    base: &Value,
    defaults: &[String],
    overrides: &[String],
    catalog: &DefaultsCatalog,
) -> Result<ResolvedConfiguration, ComposeError> {
    let mut trace = Vec::with_capacity(defaults.len() + overrides.len());
    for name in defaults {
        let document = catalog
            .get(name)
            .ok_or_else(|| ComposeError::UnresolvedDefault(name.clone()))?;
        trace.push(Directive::Default {
            name: name.clone(),
            document: document.clone(),
        });
    }
    for o in overrides {
        trace.push(Directive::parse_override(o)?);
    }
    replay(base, &trace)
}

// ---------------------------------------------------------------------------
// Typecheck

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// `None` for configuration-level problems (unknown keys, hyperparameters).
    pub family: Option<SlotFamily>,
    pub rule_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypecheckReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl TypecheckReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        TypecheckReport {
            passed: violations.is_empty(),
            violations,
        }
    }

    pub fn has_rule(&self, family: Option<SlotFamily>, rule: &str) -> bool {
        self.violations
            .iter()
            .any(|v| v.family == family && v.rule_id == rule)
    }

    pub fn implicated_slots(&self) -> BTreeSet<SlotFamily> {
        self.violations.iter().filter_map(|v| v.family).collect()
    }
}

pub mod rules {
    pub const UNBOUND: &str = "unbound";
    pub const UNKNOWN_COMPONENT: &str = "unknown_component";
    pub const UNKNOWN_PARAMETER: &str = "unknown_parameter";
    pub const PARAMETER_TYPE: &str = "parameter_type";
    pub const MISSING_PARAMETER: &str = "missing_parameter";
    pub const CONTRACT_MISMATCH: &str = "contract_mismatch";
    pub const PREDICTION_SHAPE: &str = "prediction_shape";
    pub const EVALUATION_UNIT: &str = "evaluation_unit";
    pub const LEAKAGE_DECL_MISSING: &str = "leakage_decl_missing";
    pub const LEAKAGE_FIT_ON: &str = "leakage_fit_on";
    pub const BATCH_KEYS: &str = "batch_keys";
    pub const UNKNOWN_KEY: &str = "unknown_key";
    pub const HYPERPARAMETER_CONTRACT: &str = "hyperparameter_contract";
}

/// Audits a configuration against the registry and task contract. Never
/// fails; every problem becomes a report entry.
pub fn typecheck(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    contract: &TaskContract,
) -> TypecheckReport {
    let mut out = Vec::new();
    let mut push = |family: Option<SlotFamily>, rule: &str, message: String| {
        out.push(Violation {
            family,
            rule_id: rule.to_string(),
            message,
        })
    };

    for family in SlotFamily::ALL {
        let Some(binding) = config.bindings.get(&family) else {
            push(Some(family), rules::UNBOUND, format!("no component bound to {family}"));
            continue;
        };
        let Some(entry) = registry.get(family, &binding.name) else {
            push(
                Some(family),
                rules::UNKNOWN_COMPONENT,
                format!("`{}` is not a registered {family} component", binding.name),
            );
            continue;
        };
        let d = &entry.descriptor;
        for (k, v) in &binding.parameters {
            match d.parameters.get(k) {
                None => push(
                    Some(family),
                    rules::UNKNOWN_PARAMETER,
                    format!("`{k}` is not a parameter of {}", d.name),
                ),
                Some(spec) if !spec.kind.accepts(v) => push(
                    Some(family),
                    rules::PARAMETER_TYPE,
                    format!("`{k}` of {} expects {:?}, got {v}", d.name, spec.kind),
                ),
                Some(_) => {}
            }
        }
        for (k, spec) in &d.parameters {
            if spec.required && !binding.parameters.contains_key(k) {
                push(
                    Some(family),
                    rules::MISSING_PARAMETER,
                    format!("{} requires `{k}`", d.name),
                );
            }
        }

        let caps = &d.capabilities;
        if let Some(sem) = caps.target_semantics {
            if sem != contract.target_semantics {
                push(
                    Some(family),
                    rules::CONTRACT_MISMATCH,
                    format!(
                        "{} produces {sem:?} but the task expects {:?}",
                        d.name, contract.target_semantics
                    ),
                );
            }
        }
        match family {
            SlotFamily::Task => {
                if let Some(kind) = caps.task_kind {
                    if kind != contract.task_kind {
                        push(
                            Some(family),
                            rules::CONTRACT_MISMATCH,
                            format!("{} is a {kind:?} task, contract is {:?}", d.name, contract.task_kind),
                        );
                    }
                }
            }
            SlotFamily::Model => {
                if let Some(shape) = &caps.prediction_shape {
                    if shape.as_slice() != contract.prediction_shape() {
                        push(
                            Some(family),
                            rules::PREDICTION_SHAPE,
                            format!("{} emits {shape:?}, contract requires (B, 1, K)", d.name),
                        );
                    }
                }
            }
            SlotFamily::Evaluator => {
                let units = caps.evaluation_units.as_deref().unwrap_or(&[]);
                if !units.contains(&contract.evaluation_unit) {
                    push(
                        Some(family),
                        rules::EVALUATION_UNIT,
                        format!(
                            "{} cannot evaluate at {:?} grain",
                            d.name, contract.evaluation_unit
                        ),
                    );
                }
            }
            SlotFamily::Transform => match binding.param("fit_on") {
                None => push(
                    Some(family),
                    rules::LEAKAGE_DECL_MISSING,
                    format!("{} does not declare fit_on", d.name),
                ),
                Some(v) if v.as_str() != Some("train") => push(
                    Some(family),
                    rules::LEAKAGE_FIT_ON,
                    format!("{} is fitted on {v}; only `train` is allowed", d.name),
                ),
                Some(_) => {
                    if let Some(targets) = binding.param("assign_to").and_then(Value::as_array) {
                        let scales_target = targets.iter().any(|t| t.as_str() == Some("target"));
                        if scales_target && contract.target_semantics == TargetSemantics::ClassLabel {
                            push(
                                Some(family),
                                rules::CONTRACT_MISMATCH,
                                "class-label targets cannot be rescaled".to_string(),
                            );
                        }
                    }
                }
            },
            SlotFamily::Sequencer => {
                let keys: BTreeSet<&str> = caps
                    .batch_keys
                    .iter()
                    .flatten()
                    .map(String::as_str)
                    .collect();
                let missing: Vec<&str> = contract
                    .required_batch_keys
                    .iter()
                    .map(String::as_str)
                    .filter(|k| !keys.contains(k))
                    .collect();
                if !missing.is_empty() {
                    push(
                        Some(family),
                        rules::BATCH_KEYS,
                        format!("{} does not produce batch keys {missing:?}", d.name),
                    );
                }
            }
            SlotFamily::Datasource => {}
        }
    }

    if let Some(hp) = &config.hyperparameters {
        for v in validate_contract(hp) {
            push(None, rules::HYPERPARAMETER_CONTRACT, v.to_string());
        }
    }
    for k in config.extra.keys() {
        push(None, rules::UNKNOWN_KEY, format!("unrecognized configuration key `{k}`"));
    }
    TypecheckReport::from_violations(out)
}

// ---------------------------------------------------------------------------
// Binding states

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BindingState {
    Created,
    Existing,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingDiagnostics {
    pub per_family_state: BTreeMap<SlotFamily, BindingState>,
    pub complete: bool,
}

pub fn classify_bindings(config: &ResolvedConfiguration, registry: &ComponentRegistry) -> BindingDiagnostics {
    let per_family_state: BTreeMap<SlotFamily, BindingState> = SlotFamily::ALL
        .into_iter()
        .map(|family| {
            let state = match config
                .bindings
                .get(&family)
                .and_then(|b| registry.get(family, &b.name))
            {
                Some(e) if e.provenance == Provenance::CreatedThisRun => BindingState::Created,
                Some(_) => BindingState::Existing,
                None => BindingState::Missing,
            };
            (family, state)
        })
        .collect();
    let complete = per_family_state.values().all(|s| *s != BindingState::Missing);
    BindingDiagnostics {
        per_family_state,
        complete,
    }
}

//! Builds the executable framework stack (data, transforms, windows, model,
//! trainer settings) from a resolved configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde_json::Value;

use crate::assumptions::{FrameworkDefaults, HpValue};
use crate::binding::{ComponentRef, ComponentRegistry, ResolvedConfiguration, SlotFamily, TaskContract, TaskKind, TargetSemantics};
use crate::data::{
    apply_transform, construct_rul_targets, fit_transform, window, DataError, Datasource, DegradationShape,
    DirectorySource, FittedTransform, Split, SplitDatasetContainer, SyntheticDegradationSpec, TransformKind,
    TransformSpec, WindowSpec, WindowedDataset,
};
use crate::evaluator::Aggregation;
use crate::trainer::{architecture_for, LossKind, ModelInstance, OptimizerKind, Scheduler, TrainConfig, TRAIN_BATCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackStage {
    /// The dataset could not be located or read.
    DatasetUnavailable,
    /// The dataset loaded but could not be processed.
    DatasetExecution,
    Binding,
    Transform,
    Sequencer,
    Model,
    Hyperparameters,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackError {
    pub stage: StackStage,
    pub message: String,
    pub implicated: BTreeSet<SlotFamily>,
}

impl fmt::Display for StackError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.stage, self.message)
    }
}

impl std::error::Error for StackError {}

fn err(stage: StackStage, slots: &[SlotFamily], message: impl Into<String>) -> StackError {
    StackError {
        stage,
        message: message.into(),
        implicated: slots.iter().copied().collect(),
    }
}

fn binding<'a>(config: &'a ResolvedConfiguration, family: SlotFamily) -> Result<&'a ComponentRef, StackError> {
    config
        .binding(family)
        .ok_or_else(|| err(StackStage::Binding, &[family], format!("{family} is unbound")))
}

fn implementation(registry: &ComponentRegistry, b: &ComponentRef) -> Result<String, StackError> {
    registry
        .get(b.family, &b.name)
        .map(|e| e.descriptor.implementation().to_string())
        .ok_or_else(|| err(StackStage::Binding, &[b.family], format!("`{}` is not registered", b.name)))
}

fn usize_param(b: &ComponentRef, key: &str, default: usize, stage: StackStage) -> Result<usize, StackError> {
    match b.param(key) {
        None | Some(Value::Null) => Ok(default),
        Some(v) => v
            .as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| err(stage, &[b.family], format!("{}.{key} must be a non-negative integer", b.family))),
    }
}

fn f64_param(b: &ComponentRef, key: &str, default: f64, stage: StackStage) -> Result<f64, StackError> {
    match b.param(key) {
        None | Some(Value::Null) => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| err(stage, &[b.family], format!("{}.{key} must be a number", b.family))),
    }
}

fn str_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?.iter().map(|x| x.as_str().map(str::to_string)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorSettings {
    pub aggregation: Aggregation,
    pub metrics: Vec<String>,
}

/// Everything a run needs, built once per invocation.
#[derive(Debug, Clone)]
pub struct FrameworkStack {
    pub contract: TaskContract,
    /// Container after target construction, before any transform.
    pub raw: SplitDatasetContainer,
    pub fitted: Vec<FittedTransform>,
    pub transformed: SplitDatasetContainer,
    pub windows: WindowedDataset,
    pub model: ModelInstance,
    pub train_config: TrainConfig,
    pub evaluator: EvaluatorSettings,
}

/// Where relative datasource paths resolve.
#[derive(Debug, Clone, Default)]
pub struct StackContext {
    pub base_dir: Option<PathBuf>,
    pub seed: u64,
}

pub fn load_datasource(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    contract: &TaskContract,
    ctx: &StackContext,
) -> Result<SplitDatasetContainer, StackError> {
    let ds = binding(config, SlotFamily::Datasource)?;
    let task = binding(config, SlotFamily::Task)?;
    let stage = StackStage::DatasetExecution;
    let rul_clip = f64_param(task, "rul_clip", f64::INFINITY, StackStage::Binding)?;
    let mut container = match implementation(registry, ds)?.as_str() {
        "synthetic_degradation" => {
            let d = SyntheticDegradationSpec::default();
            let shape = match ds.param("shape").and_then(Value::as_str) {
                None => d.shape,
                Some("linear") => DegradationShape::Linear,
                Some("exponential") => DegradationShape::Exponential,
                Some(other) => {
                    return Err(err(stage, &[SlotFamily::Datasource], format!("unknown degradation shape `{other}`")))
                }
            };
            let n_regimes = match contract.task_kind {
                TaskKind::Diagnostics => contract.outputs,
                TaskKind::Prognostics => d.n_regimes,
            };
            let spec = SyntheticDegradationSpec {
                n_train: usize_param(ds, "n_train", d.n_train, stage)?,
                n_val: usize_param(ds, "n_val", d.n_val, stage)?,
                n_test: usize_param(ds, "n_test", d.n_test, stage)?,
                min_length: usize_param(ds, "min_length", d.min_length, stage)?,
                max_length: usize_param(ds, "max_length", d.max_length, stage)?,
                n_features: usize_param(ds, "n_features", d.n_features, stage)?,
                shape,
                noise: f64_param(ds, "noise", d.noise, stage)?,
                task_kind: contract.task_kind,
                rul_clip: d.rul_clip,
                n_regimes: usize_param(ds, "n_regimes", n_regimes, stage)?,
                seed: usize_param(ds, "seed", d.seed as usize, stage)? as u64,
            };
            spec.load()
        }
        "container_dir" => {
            let path = ds
                .param("path")
                .and_then(Value::as_str)
                .ok_or_else(|| err(stage, &[SlotFamily::Datasource], "container_dir needs `path`"))?;
            let mut root = PathBuf::from(path);
            if root.is_relative() {
                if let Some(base) = &ctx.base_dir {
                    root = base.join(root);
                }
            }
            if !root.is_dir() {
                return Err(err(
                    StackStage::DatasetUnavailable,
                    &[SlotFamily::Datasource],
                    format!("dataset directory {} not found", root.display()),
                ));
            }
            DirectorySource { root }.load()
        }
        other => {
            return Err(err(
                StackStage::Binding,
                &[SlotFamily::Datasource],
                format!("no loader for datasource implementation `{other}`"),
            ))
        }
    }
    .map_err(|e| match e {
        DataError::Io(io) => err(StackStage::DatasetUnavailable, &[SlotFamily::Datasource], io.to_string()),
        other => err(stage, &[SlotFamily::Datasource], other.to_string()),
    })?;
    if contract.task_kind == TaskKind::Prognostics {
        for s in Split::ALL {
            for u in container.split_mut(s) {
                u.labels = construct_rul_targets(u.len(), rul_clip);
            }
        }
    }
    Ok(container)
}

pub fn transform_spec(config: &ResolvedConfiguration, registry: &ComponentRegistry) -> Result<TransformSpec, StackError> {
    let b = binding(config, SlotFamily::Transform)?;
    let slot = [SlotFamily::Transform];
    let imp = implementation(registry, b)?;
    let kind = TransformKind::from_implementation(&imp)
        .ok_or_else(|| err(StackStage::Transform, &slot, format!("no transform implementation `{imp}`")))?;
    let fit_on = match b.param("fit_on") {
        None => "train".to_string(),
        Some(v) => v
            .as_str()
            .ok_or_else(|| err(StackStage::Transform, &slot, "fit_on must be a string"))?
            .to_string(),
    };
    let apply_to = match b.param("apply_to") {
        None => Split::ALL.to_vec(),
        Some(v) => str_list(v)
            .and_then(|l| l.iter().map(|s| s.parse::<Split>().ok()).collect())
            .ok_or_else(|| err(StackStage::Transform, &slot, "apply_to must list splits"))?,
    };
    let assign_to = match b.param("assign_to") {
        None => vec!["*".to_string()],
        Some(v) => str_list(v).ok_or_else(|| err(StackStage::Transform, &slot, "assign_to must list channels"))?,
    };
    Ok(TransformSpec {
        name: b.name.clone(),
        kind,
        fit_on,
        apply_to,
        assign_to,
    })
}

fn hp<'a>(config: &'a ResolvedConfiguration, defaults: &'a FrameworkDefaults, row: &str) -> Option<&'a Value> {
    let from_table = config
        .hyperparameters
        .as_ref()
        .and_then(|t| t.row(row))
        .and_then(|r| match &r.value {
            HpValue::Concrete(v) => Some(v),
            HpValue::NotSpecified => None,
        });
    from_table.or_else(|| defaults.values.get(row))
}

/// Trainer settings from the hyperparameter table. The batch size is fixed
/// by protocol; any table value is provenance only.
pub fn train_config(config: &ResolvedConfiguration, seed: u64) -> Result<TrainConfig, StackError> {
    let defaults = FrameworkDefaults::builtin();
    let bad = |row: &str, v: &Value| {
        err(
            StackStage::Hyperparameters,
            &[SlotFamily::Model],
            format!("hyperparameter {row} has unusable value {v}"),
        )
    };
    let mut cfg = TrainConfig {
        seed,
        batch_size: TRAIN_BATCH,
        ..TrainConfig::default()
    };
    if let Some(v) = hp(config, &defaults, "optimizer") {
        cfg.optimizer = v.as_str().and_then(OptimizerKind::parse).ok_or_else(|| bad("optimizer", v))?;
    }
    if let Some(v) = hp(config, &defaults, "learning_rate") {
        cfg.lr = v.as_f64().filter(|x| *x > 0.0).ok_or_else(|| bad("learning_rate", v))?;
    }
    if let Some(v) = hp(config, &defaults, "lr_schedule") {
        cfg.scheduler = match v.as_str() {
            Some("reduce_on_plateau") => Scheduler::PLATEAU_DEFAULT,
            Some("none") | Some("constant") => Scheduler::None,
            _ if v.is_null() => Scheduler::None,
            _ => return Err(bad("lr_schedule", v)),
        };
    }
    if let Some(v) = hp(config, &defaults, "weight_decay") {
        cfg.weight_decay = v.as_f64().filter(|x| *x >= 0.0).ok_or_else(|| bad("weight_decay", v))?;
    }
    if let Some(v) = hp(config, &defaults, "grad_clip") {
        cfg.grad_clip = if v.is_null() {
            None
        } else {
            Some(v.as_f64().filter(|x| *x > 0.0).ok_or_else(|| bad("grad_clip", v))?)
        };
    }
    if let Some(v) = hp(config, &defaults, "warmup") {
        cfg.warmup = if v.is_null() {
            None
        } else {
            Some(v.as_u64().ok_or_else(|| bad("warmup", v))? as usize)
        };
    }
    if let Some(v) = hp(config, &defaults, "max_epochs") {
        cfg.max_epochs = v.as_u64().ok_or_else(|| bad("max_epochs", v))? as usize;
    }
    Ok(cfg)
}

pub fn evaluator_settings(config: &ResolvedConfiguration) -> Result<EvaluatorSettings, StackError> {
    let b = binding(config, SlotFamily::Evaluator)?;
    let slot = [SlotFamily::Evaluator];
    let aggregation = match b.param("aggregation").and_then(Value::as_str) {
        None => Aggregation::LastWindow,
        Some(s) => s
            .parse()
            .map_err(|e: String| err(StackStage::Binding, &slot, e))?,
    };
    let metrics = match b.param("metrics") {
        None => match config.binding(SlotFamily::Task).map(|t| t.name.as_str()) {
            Some("regime_diagnostics") => vec!["accuracy".into()],
            _ => vec!["mae".into(), "rmse".into(), "nmae".into()],
        },
        Some(v) => str_list(v).ok_or_else(|| err(StackStage::Binding, &slot, "metrics must be a list of names"))?,
    };
    Ok(EvaluatorSettings { aggregation, metrics })
}

/// Instantiates the bound model for windows of `length × n_features`.
pub fn build_model(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    contract: &TaskContract,
    window_length: usize,
    n_features: usize,
    seed: u64,
) -> Result<ModelInstance, StackError> {
    let b = binding(config, SlotFamily::Model)?;
    let slot = [SlotFamily::Model];
    let imp = implementation(registry, b)?;
    let hidden = match b.param("hidden") {
        None => None,
        Some(v) => Some(
            v.as_array()
                .and_then(|a| a.iter().map(|x| x.as_u64().map(|n| n as usize)).collect::<Option<Vec<_>>>())
                .ok_or_else(|| err(StackStage::Model, &slot, "hidden must list layer widths"))?,
        ),
    };
    let arch = architecture_for(&imp, hidden).map_err(|e| err(StackStage::Model, &slot, e.to_string()))?;
    let input_length = usize_param(b, "input_length", window_length, StackStage::Model)?;
    let loss = match contract.target_semantics {
        TargetSemantics::ContinuousTarget => LossKind::Mse,
        TargetSemantics::ClassLabel => LossKind::CrossEntropy,
    };
    let mut model = ModelInstance::new(b.name.clone(), arch, input_length, n_features, contract.outputs, loss, seed);
    model.required_keys = contract.required_batch_keys.iter().cloned().collect();
    Ok(model)
}

pub fn build_stack(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    contract: &TaskContract,
    ctx: &StackContext,
) -> Result<FrameworkStack, StackError> {
    let raw = load_datasource(config, registry, contract, ctx)?;
    build_stack_from(config, registry, contract, raw, ctx.seed)
}

/// Like [`build_stack`] with an already loaded container.
pub fn build_stack_from(
    config: &ResolvedConfiguration,
    registry: &ComponentRegistry,
    contract: &TaskContract,
    raw: SplitDatasetContainer,
    seed: u64,
) -> Result<FrameworkStack, StackError> {
    let spec = transform_spec(config, registry)?;
    let fitted = fit_transform(&spec, &raw).map_err(|e| match e {
        DataError::EmptyTrainSplit => err(StackStage::DatasetExecution, &[SlotFamily::Datasource], e.to_string()),
        other => err(StackStage::Transform, &[SlotFamily::Transform], other.to_string()),
    })?;
    let transformed =
        apply_transform(&fitted, &raw).map_err(|e| err(StackStage::Transform, &[SlotFamily::Transform], e.to_string()))?;

    let seq = binding(config, SlotFamily::Sequencer)?;
    let length = usize_param(seq, "length", 8, StackStage::Sequencer)?;
    let stride = usize_param(seq, "stride", 1, StackStage::Sequencer)?;
    let wspec = WindowSpec::new(length, stride).map_err(|e| err(StackStage::Sequencer, &[SlotFamily::Sequencer], e.to_string()))?;
    let windows = window(&transformed, wspec, contract);
    if windows.split(Split::Train).is_empty() {
        return Err(err(
            StackStage::Sequencer,
            &[SlotFamily::Sequencer, SlotFamily::Datasource],
            format!("window length {length} produces no train windows"),
        ));
    }
    let model = build_model(config, registry, contract, length, windows.n_features, seed)?;
    let train_config = train_config(config, seed)?;
    let evaluator = evaluator_settings(config)?;
    Ok(FrameworkStack {
        contract: contract.clone(),
        raw,
        fitted: vec![fitted],
        transformed,
        windows,
        model,
        train_config,
        evaluator,
    })
}

/// Resolves the task contract a configuration's task binding implies.
pub fn contract_for(config: &ResolvedConfiguration, registry: &ComponentRegistry) -> Option<TaskContract> {
    let task = config.binding(SlotFamily::Task)?;
    let entry = registry.get(SlotFamily::Task, &task.name)?;
    match entry.descriptor.capabilities.task_kind? {
        TaskKind::Prognostics => Some(TaskContract::prognostics()),
        TaskKind::Diagnostics => {
            let classes = task
                .param("classes")
                .and_then(Value::as_u64)
                .map(|c| c as usize)
                .or_else(|| {
                    config
                        .binding(SlotFamily::Datasource)
                        .and_then(|d| d.param("n_regimes"))
                        .and_then(Value::as_u64)
                        .map(|c| c as usize)
                })
                .unwrap_or(3);
            Some(TaskContract::diagnostics(classes))
        }
    }
}

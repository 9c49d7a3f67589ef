//! Descriptors for the framework's shipped components.

use std::collections::BTreeMap;

use crate::binding::{
    Capabilities, ComponentDescriptor, EvaluationUnit, ParamKind, ParamSpec, SlotFamily, TargetSemantics,
    TaskKind, CONTRACT_SHAPE,
};

/// Model implementations with deliberately planted bugs, used to prove the
/// sanity ladder catches them.
pub const PLANTED_MODELS: [&str; 5] = [
    "dead_branch_mlp",
    "batch_mixing_mlp",
    "constant_head",
    "nan_head",
    "flat_head",
];

fn params(list: &[(&str, ParamSpec)]) -> BTreeMap<String, ParamSpec> {
    list.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn opt(kind: ParamKind) -> ParamSpec {
    ParamSpec::optional(kind)
}

fn descriptor(
    family: SlotFamily,
    name: &str,
    capabilities: Capabilities,
    parameters: BTreeMap<String, ParamSpec>,
) -> ComponentDescriptor {
    ComponentDescriptor {
        family,
        name: name.to_string(),
        implementation: None,
        capabilities,
        parameters,
    }
}

fn model(name: &str, semantics: TargetSemantics, extra: &[(&str, ParamSpec)]) -> ComponentDescriptor {
    let mut p = params(&[("input_length", opt(ParamKind::Integer))]);
    p.extend(params(extra));
    descriptor(
        SlotFamily::Model,
        name,
        Capabilities {
            target_semantics: Some(semantics),
            prediction_shape: Some(CONTRACT_SHAPE.to_vec()),
            ..Default::default()
        },
        p,
    )
}

pub fn builtin_descriptors() -> Vec<ComponentDescriptor> {
    use ParamKind::*;
    let mut out = vec![
        descriptor(
            SlotFamily::Task,
            "rul_prognostics",
            Capabilities {
                task_kind: Some(TaskKind::Prognostics),
                target_semantics: Some(TargetSemantics::ContinuousTarget),
                ..Default::default()
            },
            params(&[("rul_clip", opt(Number))]),
        ),
        descriptor(
            SlotFamily::Task,
            "regime_diagnostics",
            Capabilities {
                task_kind: Some(TaskKind::Diagnostics),
                target_semantics: Some(TargetSemantics::ClassLabel),
                ..Default::default()
            },
            params(&[("classes", opt(Integer))]),
        ),
        descriptor(
            SlotFamily::Datasource,
            "synthetic_degradation",
            Capabilities::default(),
            params(&[
                ("n_train", opt(Integer)),
                ("n_val", opt(Integer)),
                ("n_test", opt(Integer)),
                ("min_length", opt(Integer)),
                ("max_length", opt(Integer)),
                ("n_features", opt(Integer)),
                ("shape", opt(String)),
                ("noise", opt(Number)),
                ("n_regimes", opt(Integer)),
                ("seed", opt(Integer)),
            ]),
        ),
        descriptor(
            SlotFamily::Datasource,
            "container_dir",
            Capabilities::default(),
            params(&[("path", ParamSpec::required(String))]),
        ),
        descriptor(
            SlotFamily::Sequencer,
            "sliding_window",
            Capabilities {
                batch_keys: Some(vec!["x".into(), "y".into()]),
                ..Default::default()
            },
            params(&[("length", opt(Integer)), ("stride", opt(Integer))]),
        ),
        descriptor(
            SlotFamily::Evaluator,
            "rul_metrics",
            Capabilities {
                target_semantics: Some(TargetSemantics::ContinuousTarget),
                evaluation_units: Some(vec![EvaluationUnit::Window, EvaluationUnit::Unit]),
                ..Default::default()
            },
            params(&[("aggregation", opt(String)), ("metrics", opt(List))]),
        ),
        descriptor(
            SlotFamily::Evaluator,
            "classification_metrics",
            Capabilities {
                target_semantics: Some(TargetSemantics::ClassLabel),
                evaluation_units: Some(vec![EvaluationUnit::Window, EvaluationUnit::Unit]),
                ..Default::default()
            },
            params(&[("aggregation", opt(String)), ("metrics", opt(List))]),
        ),
        model("linear", TargetSemantics::ContinuousTarget, &[]),
        model("mlp", TargetSemantics::ContinuousTarget, &[("hidden", opt(List))]),
        model("logistic", TargetSemantics::ClassLabel, &[]),
        model("mlp_classifier", TargetSemantics::ClassLabel, &[("hidden", opt(List))]),
    ];
    for name in ["zscore", "minmax", "identity", "zscore_global_fit"] {
        out.push(descriptor(
            SlotFamily::Transform,
            name,
            Capabilities {
                fit_on: Some(vec!["train".into()]),
                ..Default::default()
            },
            params(&[
                ("fit_on", opt(String)),
                ("apply_to", opt(List)),
                ("assign_to", opt(List)),
            ]),
        ));
    }
    for name in PLANTED_MODELS {
        out.push(model(name, TargetSemantics::ContinuousTarget, &[("hidden", opt(List))]));
    }
    out
}

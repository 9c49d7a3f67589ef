//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use phm_harness::assumptions::{EvidenceRef, Ledger};
use phm_harness::binding::{
    classify_bindings, typecheck, BindingState, ComponentRef, ComponentRegistry, ResolvedConfiguration, SlotFamily,
};
use phm_harness::control::{render_markdown, ArtifactSlot, Mode, RunDir};
use phm_harness::data::{fit_transform, generate_synthetic, leakage_audit, SyntheticDegradationSpec, TransformKind, TransformSpec};
use phm_harness::evaluator::benchmark_swap;
use phm_harness::repair::{repair_loop, MutableSlotWhitelist, RepairTerminal};
use phm_harness::runtime::{build_stack, contract_for, load_datasource, StackContext};
use phm_harness::trainer::{architecture_for, finite_difference_gradient, Batch, LossKind, ModelInstance, Tensor};
use phm_harness::tree::diff_leaves;
use phm_harness::verification::{
    check_init_loss, leakage_check, run_ladder_on, run_verification, CheckId, CheckStatus, LadderOutcome,
    SanityVerdict, VerificationPolicy,
};
use phm_harness::workflow::{crash_points, CRASH_ENV};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic-rul.paper-spec.json")
}

fn cli(workspace: &Path, args: &[&str], crash_at: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_phm-harness"));
    cmd.arg("--workspace").arg(workspace).args(args).env_remove(CRASH_ENV);
    if let Some(point) = crash_at {
        cmd.env(CRASH_ENV, point);
    }
    cmd.output().expect("harness binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn prognostic_tree(model: Value, seed: u64, length: usize) -> Value {
    json!({
        "task": {"component": "rul_prognostics", "rul_clip": 60.0},
        "datasource": {"component": "synthetic_degradation", "n_train": 6, "n_val": 2, "n_test": 2, "seed": seed},
        "transform": {"component": "zscore", "fit_on": "train", "assign_to": ["*", "target"]},
        "sequencer": {"component": "sliding_window", "length": length, "stride": 2},
        "model": model,
        "evaluator": {"component": "rul_metrics"}
    })
}

fn diagnostic_tree(model: Value, seed: u64, length: usize) -> Value {
    json!({
        "task": {"component": "regime_diagnostics", "classes": 3},
        "datasource": {"component": "synthetic_degradation", "n_train": 6, "n_val": 2, "n_test": 2, "n_regimes": 3, "seed": seed},
        "transform": {"component": "zscore", "fit_on": "train", "assign_to": ["*"]},
        "sequencer": {"component": "sliding_window", "length": length, "stride": 2},
        "model": model,
        "evaluator": {"component": "classification_metrics"}
    })
}

fn config(tree: &Value) -> ResolvedConfiguration {
    ResolvedConfiguration::from_tree(tree, vec![]).expect("well-formed tree")
}

fn ladder(tree: &Value, seed: u64) -> LadderOutcome {
    let cfg = config(tree);
    let reg = ComponentRegistry::builtin();
    let contract = contract_for(&cfg, &reg).expect("task resolves");
    let loaded = load_datasource(&cfg, &reg, &contract, &StackContext { base_dir: None, seed });
    run_ladder_on(&cfg, &reg, &contract, loaded, seed, &VerificationPolicy::default())
}

fn verification_gate(cfg: &ResolvedConfiguration) -> LadderOutcome {
    let reg = ComponentRegistry::builtin();
    let contract = contract_for(cfg, &reg).expect("task resolves");
    let ctx = StackContext::default();
    let loaded = load_datasource(cfg, &reg, &contract, &ctx);
    run_verification(cfg, &reg, &contract, loaded, ctx.seed, &VerificationPolicy::default())
}

// ---------------------------------------------------------------------------

fn ladder_zoo() -> Verdict {
    let start = Instant::now();
    let variants: [(u64, Value, usize); 3] = [(0, json!([16]), 8), (1, json!([8]), 12), (2, json!([32, 8]), 6)];
    let planted = [
        ("dead_branch_mlp", CheckId::GradientFlow),
        ("batch_mixing_mlp", CheckId::GradientFlow),
        ("constant_head", CheckId::OverfitMicrobatch),
        ("nan_head", CheckId::InitLoss),
        ("flat_head", CheckId::InitLoss),
    ];
    let mut caught = 0;
    for (name, expected) in planted {
        for (seed, hidden, length) in &variants {
            let out = ladder(&prognostic_tree(json!({"component": name, "hidden": hidden}), *seed, *length), *seed);
            ensure!(out.verdict == SanityVerdict::Block, "{name} seed {seed}: verdict {:?}", out.verdict);
            let failing: Vec<CheckId> = out.checks.iter().filter(|c| c.failed()).map(|c| c.check_id).collect();
            ensure!(failing == [expected], "{name} seed {seed}: failing checks {failing:?}, expected {expected:?}");
            caught += 1;
        }
    }
    // reference models at their default sizes, varied over data seed and window length
    let mut healthy = 0;
    for (name, diag) in [("linear", false), ("mlp", false), ("logistic", true), ("mlp_classifier", true)] {
        for (seed, _, length) in &variants {
            let node = json!({"component": name});
            let tree = if diag {
                diagnostic_tree(node, *seed, *length)
            } else {
                prognostic_tree(node, *seed, *length)
            };
            let out = ladder(&tree, *seed);
            ensure!(out.verdict == SanityVerdict::Pass, "healthy {name} seed {seed}: {:?} {:?}", out.verdict, out.checks);
            healthy += 1;
        }
    }
    // not gating: how often the fixed 400-step memorization budget rejects
    // healthy networks of other widths
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut swept, mut rejected) = (0, 0);
    for _ in 0..12 {
        let depth = rng.gen_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| *[4usize, 8, 16, 32, 64].choose(&mut rng).unwrap()).collect();
        let (seed, length) = (rng.gen_range(10..1000u64), rng.gen_range(4..=20usize));
        for (name, diag) in [("mlp", false), ("mlp_classifier", true)] {
            let node = json!({"component": name, "hidden": hidden});
            let tree = if diag { diagnostic_tree(node, seed, length) } else { prognostic_tree(node, seed, length) };
            swept += 1;
            if ladder(&tree, seed).verdict != SanityVerdict::Pass {
                rejected += 1;
            }
        }
    }
    // a zero-weight classifier emits uniform logits, so its loss is exactly ln C
    let mut worst: f64 = 0.0;
    for classes in [2usize, 3, 4, 5, 7, 10, 16] {
        let arch = architecture_for("logistic", None).map_err(|e| e.to_string())?;
        let mut m = ModelInstance::new("uniform", arch, 3, 2, classes, LossKind::CrossEntropy, 5);
        for (_, p) in &mut m.params {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let n = 2 * classes;
        let mut b = Batch::default();
        b.tensors.insert("x".into(), Tensor::new(vec![n, 3, 2], (0..n * 6).map(|i| (i as f64).sin()).collect()).unwrap());
        b.tensors.insert("y".into(), Tensor::new(vec![n], (0..n).map(|i| (i % classes) as f64).collect()).unwrap());
        let r = check_init_loss(&m, &b, None, &VerificationPolicy::default());
        ensure!(r.status == CheckStatus::Pass, "uniform classifier C={classes} init loss check {:?}", r.status);
        let err = (r.diagnostics["loss"] - (classes as f64).ln()).abs();
        ensure!(err <= 1e-9, "C={classes}: |loss - ln C| = {err:e}");
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "zoo took {secs:.1}s");
    Ok(format!(
        "{caught} planted instances over 5 bug classes blocked at the expected check, {healthy} reference runs passed, max |ln C error| {worst:.1e}, {secs:.1}s; width sweep rejected {rejected}/{swept} healthy networks"
    ))
}

fn gradients_match_finite_differences() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let names = ["linear", "mlp", "logistic", "mlp_classifier", "dead_branch_mlp", "batch_mixing_mlp"];
    let mut worst: f64 = 0.0;
    let mut coords = 0usize;
    for i in 0..100 {
        let name = names[i % names.len()];
        let classify = matches!(name, "logistic" | "mlp_classifier");
        let depth = rng.gen_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=6)).collect();
        let (len, feats, batch) = (rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=5));
        let outputs = if classify { rng.gen_range(2..=4) } else { 1 };
        let loss = if classify { LossKind::CrossEntropy } else { LossKind::Mse };
        let arch = architecture_for(name, Some(hidden)).map_err(|e| e.to_string())?;
        let mut m = ModelInstance::new(name, arch, len, feats, outputs, loss, i as u64);
        // move away from the near-zero init so the nonlinearities matter
        for (_, p) in &mut m.params {
            for v in p.data_mut() {
                *v = 0.7 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let x: Vec<f64> = (0..batch * len * feats).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..batch)
            .map(|_| if classify { rng.gen_range(0..outputs) as f64 } else { rng.sample::<f64, _>(StandardNormal) })
            .collect();
        let mut b = Batch::default();
        b.tensors.insert("x".into(), Tensor::new(vec![batch, len, feats], x).unwrap());
        b.tensors.insert("y".into(), Tensor::new(vec![batch], y).unwrap());

        let analytic = m.forward(&b).map_err(|e| e.to_string())?.backward();
        let numeric = finite_difference_gradient(&m, &b, 1e-5).map_err(|e| e.to_string())?;
        ensure!(analytic.len() == m.params.len(), "model {i}: {} gradients for {} parameters", analytic.len(), m.params.len());
        for ((pname, _), (a, n)) in m.params.iter().zip(analytic.iter().zip(&numeric)) {
            ensure!(&a.name == pname, "model {i}: gradient order {} vs {pname}", a.name);
            for (k, (ga, gn)) in a.grad.data().iter().zip(n.data()).enumerate() {
                let diff = (ga - gn).abs();
                let tol = (1e-6 * ga.abs().max(gn.abs())).max(1e-8);
                ensure!(diff <= tol, "model {i} ({name}) {pname}[{k}]: analytic {ga:e} vs numeric {gn:e}");
                worst = worst.max(diff / tol);
                coords += 1;
            }
        }
    }
    Ok(format!("100 random models, {coords} coordinates, worst error {:.0}% of tolerance", 100.0 * worst))
}

fn leakage_fuzz() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut planted, mut detected, mut false_pos) = (0, 0, 0);
    let kinds = [TransformKind::ZScore, TransformKind::MinMax, TransformKind::Identity];
    for i in 0..240u64 {
        let spec = SyntheticDegradationSpec {
            n_train: rng.gen_range(2..=6),
            n_val: rng.gen_range(1..=3),
            n_test: rng.gen_range(1..=3),
            min_length: 20,
            max_length: 40,
            n_features: rng.gen_range(1..=5),
            noise: rng.gen_range(0.0..0.2),
            seed: i,
            ..Default::default()
        };
        let mut container = generate_synthetic(&spec).map_err(|e| e.to_string())?;
        let mut t = TransformSpec::new(*kinds.choose(&mut rng).unwrap());
        if rng.gen_bool(0.5) {
            t.assign_to.push("target".into());
        }
        let plant = i % 2 == 1;
        if plant {
            planted += 1;
            let overlap = |c: &mut phm_harness::data::SplitDatasetContainer, rng: &mut ChaCha8Rng| {
                let k = rng.gen_range(0..c.train.len());
                let unit = c.train[k].clone();
                if rng.gen_bool(0.5) {
                    c.test.push(unit);
                } else {
                    c.val.push(unit);
                }
            };
            match rng.gen_range(0..4) {
                0 => t.kind = TransformKind::ZScoreGlobalFit,
                1 => t.fit_on = "all".into(),
                2 => overlap(&mut container, &mut rng),
                _ => {
                    t.kind = TransformKind::ZScoreGlobalFit;
                    overlap(&mut container, &mut rng);
                }
            }
        }
        let fitted = fit_transform(&t, &container).map_err(|e| format!("pipeline {i}: {e}"))?;
        let report = leakage_audit(&[fitted], &container);
        match (plant, report.clean) {
            (true, false) => detected += 1,
            (false, false) => false_pos += 1,
            _ => {}
        }
    }
    ensure!(detected == planted, "detected {detected} of {planted} planted leaks");
    ensure!(false_pos == 0, "{false_pos} false positives");
    Ok(format!("240 pipelines, {planted} planted, {detected} detected, 0 false positives"))
}

fn repair_convergence() -> Verdict {
    const WRONG: [i64; 12] = [4, 5, 6, 7, 9, 10, 11, 12, 13, 14, 15, 16];
    let whitelist = MutableSlotWhitelist::run_default();
    let start_tree = |model: Value| prognostic_tree(model, 3, 20);
    let mut summary = Vec::new();
    for f in 0..10usize {
        let mut alternatives: Vec<Value> = WRONG[..f].iter().map(|v| json!(v)).collect();
        alternatives.push(json!(8));
        alternatives.extend(WRONG[f..f + f % 3].iter().map(|v| json!(v)));
        let mut ledger = Ledger::new();
        ledger.record(SlotFamily::Sequencer, EvidenceRef::absent(), "sequencer.length", json!(20), "window length not stated", alternatives.clone());
        let mut seen: Vec<Value> = Vec::new();
        let cfg = config(&start_tree(json!({"component": "mlp", "input_length": 8})));
        let out = repair_loop(&cfg, &mut ledger, 10, &whitelist, |c| {
            seen.push(c.to_tree());
            verification_gate(c)
        });
        ensure!(out.terminal == RepairTerminal::Pass, "fixture {f}: terminal {:?} {:?}", out.terminal, out.detail);
        ensure!(out.iterations.len() == f + 1, "fixture {f}: {} iterations, expected {}", out.iterations.len(), f + 1);
        ensure!(out.iterations.len() <= alternatives.len(), "fixture {f}: more iterations than alternatives");
        for pair in seen.windows(2) {
            let changed = diff_leaves(&pair[0], &pair[1]);
            ensure!(changed == ["sequencer.length"], "fixture {f}: one iteration changed {changed:?}");
        }
        ensure!(out.config.get("sequencer.length") == Some(json!(8)), "fixture {f}: wrong final length");
        summary.push(out.iterations.len());
    }

    // every alternative wrong: the budget of 10 is the hard stop
    let mut ledger = Ledger::new();
    let all_wrong: Vec<Value> = WRONG.iter().map(|v| json!(v)).collect();
    ledger.record(SlotFamily::Sequencer, EvidenceRef::absent(), "sequencer.length", json!(20), "j", all_wrong);
    let mut calls = 0;
    let cfg = config(&start_tree(json!({"component": "mlp", "input_length": 8})));
    let out = repair_loop(&cfg, &mut ledger, 10, &whitelist, |c| {
        calls += 1;
        verification_gate(c)
    });
    ensure!(out.terminal == RepairTerminal::Escalate, "exhausted budget gave {:?}", out.terminal);
    ensure!(out.iterations.len() == 10 && calls == 11, "budget run: {} iterations, {calls} gate calls", out.iterations.len());

    // a model bug no assumption explains
    let mut ledger = Ledger::new();
    ledger.record(SlotFamily::Sequencer, EvidenceRef::absent(), "sequencer.length", json!(20), "j", vec![json!(8)]);
    let cfg = config(&start_tree(json!({"component": "dead_branch_mlp"})));
    let original = verification_gate(&cfg);
    let mut calls = 0;
    let out = repair_loop(&cfg, &mut ledger, 10, &whitelist, |c| {
        calls += 1;
        verification_gate(c)
    });
    ensure!(out.terminal == RepairTerminal::NoAttributableAssumption, "dead branch gave {:?}", out.terminal);
    ensure!(calls == 1 && out.iterations.is_empty(), "dead branch: {calls} gate calls");
    ensure!(out.final_report == original, "dead branch: final report differs from the original failure");
    ensure!(out.config == cfg, "dead branch: configuration was modified");
    Ok(format!(
        "10 fixtures converged in {summary:?} iterations, one leaf per iteration; budget stop at 10; unattributable failure stopped after 1 verify"
    ))
}

fn tree_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(root).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        if e.file_type().unwrap().is_file() && name != "run_state.json" && name != ".run.lock" {
            out.insert(name, fs::read(e.path()).unwrap());
        }
    }
    out
}

fn crash_resume() -> Verdict {
    let ws = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = fixture_path();
    let spec = spec.to_str().unwrap();
    let reference = cli(ws.path(), &["validate-run", "ref", "--mode", "full", "--paper-spec", spec], None);
    ensure!(reference.status.success(), "reference run failed: {}", String::from_utf8_lossy(&reference.stderr));
    let ref_dir = ws.path().join("validate-paper/ref");
    let expected = tree_files(&ref_dir);
    let ref_state = read_json(&ref_dir.join("run_state.json"));

    let points = crash_points(Mode::Full);
    ensure!(points.len() >= 5, "only {} crash points", points.len());
    for (i, point) in points.iter().enumerate() {
        let name = format!("crash{i}");
        let crashed = cli(ws.path(), &["validate-run", &name, "--mode", "full", "--paper-spec", spec], Some(point));
        ensure!(!crashed.status.success() && crashed.status.code() != Some(1), "{point}: run did not crash ({:?})", crashed.status);
        let dir = ws.path().join("validate-paper").join(&name);
        let mid = read_json(&dir.join("run_state.json"));
        ensure!(mid["phases"] != ref_state["phases"], "{point}: state already finished before resume");
        let resumed = cli(ws.path(), &["resume", &name], None);
        ensure!(resumed.status.success(), "{point}: resume exited {:?}: {}", resumed.status, String::from_utf8_lossy(&resumed.stderr));
        let got = tree_files(&dir);
        ensure!(got.keys().eq(expected.keys()), "{point}: files {:?} vs {:?}", got.keys().collect::<Vec<_>>(), expected.keys().collect::<Vec<_>>());
        for (file, bytes) in &expected {
            ensure!(&got[file] == bytes, "{point}: {file} differs from the uninterrupted run");
        }
        let state = read_json(&dir.join("run_state.json"));
        for key in ["phases", "axes"] {
            let strip = |v: &Value| {
                let mut v = v[key].clone();
                if let Some(a) = v.as_array_mut() {
                    for p in a {
                        p.as_object_mut().map(|o| o.remove("retries_used"));
                    }
                }
                v
            };
            ensure!(strip(&state) == strip(&ref_state), "{point}: {key} differ after resume");
        }
    }
    Ok(format!("{} injected crashes, all resumed to output identical with the uninterrupted run", points.len()))
}

fn fuzz_tree(rng: &mut ChaCha8Rng) -> Value {
    let models = [
        json!({"component": "mlp", "hidden": [rng.gen_range(2..=32)]}),
        json!({"component": "linear"}),
        json!({"component": "mlp", "hidden": [rng.gen_range(2..=16), rng.gen_range(2..=16)], "input_length": 12}),
        json!({"component": "dead_branch_mlp"}),
    ];
    let transforms = ["zscore", "minmax", "identity"];
    let aggs = ["last_window", "mean"];
    json!({
        "task": {"component": "rul_prognostics", "rul_clip": rng.gen_range(30..=120) as f64},
        "datasource": {
            "component": "synthetic_degradation",
            "n_train": rng.gen_range(2..=10),
            "n_val": rng.gen_range(1..=3),
            "n_test": rng.gen_range(1..=4),
            "noise": rng.gen_range(0.0..0.3),
            "seed": rng.gen_range(0..1000)
        },
        "transform": {"component": *transforms.choose(rng).unwrap(), "fit_on": "train", "assign_to": ["*", "target"]},
        "sequencer": {"component": "sliding_window", "length": rng.gen_range(4..=24), "stride": rng.gen_range(1..=4)},
        "model": models.choose(rng).unwrap().clone(),
        "evaluator": {"component": "rul_metrics", "aggregation": *aggs.choose(rng).unwrap()},
        "notes": {"run_tag": format!("fuzz-{}", rng.gen::<u32>())}
    })
}

fn swap_isolation_and_nmae() -> Verdict {
    let reg = ComponentRegistry::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let baselines = [
        ComponentRef::new(SlotFamily::Model, "linear"),
        ComponentRef::new(SlotFamily::Model, "mlp").with("hidden", json!([8, 4])),
    ];
    for i in 0..20 {
        let tree = fuzz_tree(&mut rng);
        let cfg = config(&tree);
        let contract = contract_for(&cfg, &reg).ok_or("no contract")?;
        for b in &baselines {
            let swapped = benchmark_swap(&cfg, b, &reg, &contract).map_err(|e| format!("config {i}: {e}"))?;
            let after = swapped.to_tree();
            for leaf in diff_leaves(&tree, &after) {
                ensure!(leaf == "model" || leaf.starts_with("model."), "config {i} / {}: `{leaf}` changed", b.name);
            }
            for (k, v) in tree.as_object().unwrap() {
                if k != "model" {
                    ensure!(after[k] == *v, "config {i} / {}: subtree {k} changed", b.name);
                }
            }
            ensure!(after["model"] == b.to_node(), "config {i}: model not rebound to {}", b.name);
        }
        let wrong_task = ComponentRef::new(SlotFamily::Model, "logistic");
        ensure!(benchmark_swap(&cfg, &wrong_task, &reg, &contract).is_err(), "config {i}: classifier accepted as a baseline");
    }

    let ws = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = fixture_path();
    let run = cli(ws.path(), &["validate-run", "desk", "--mode", "full", "--paper-spec", spec.to_str().unwrap()], None);
    ensure!(run.status.success(), "desk run failed: {}", String::from_utf8_lossy(&run.stderr));
    let dir = ws.path().join("validate-paper/desk");

    // recompute nMAE from the prediction dump by hand
    let csv = fs::read_to_string(dir.join("predictions-test.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<(String, usize, f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    let lo = rows.iter().map(|r| r.3).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.3).fold(f64::NEG_INFINITY, f64::max);
    let window_nmae = 100.0 * (rows.iter().map(|r| (r.2 - r.3).abs()).sum::<f64>() / rows.len() as f64) / (hi - lo);
    let mut last: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for (u, s, p, t) in &rows {
        let e = last.entry(u.as_str()).or_insert((*s, *p, *t));
        if *s >= e.0 {
            *e = (*s, *p, *t);
        }
    }
    let unit_nmae = last.values().map(|(_, p, t)| 100.0 * (p - t).abs() / (hi - lo)).sum::<f64>() / last.len() as f64;
    let report = read_json(&dir.join("08-evaluation-report.json"));
    let reported = |grain: &str| {
        report["metrics"]
            .as_array()
            .unwrap()
            .iter()
            .find(|m| m["metric"] == "nmae" && m["grain"] == grain)
            .and_then(|m| m["value"].as_f64())
    };
    for (grain, mine) in [("window", window_nmae), ("unit", unit_nmae)] {
        let got = reported(grain).ok_or(format!("no {grain} nmae in the report"))?;
        ensure!((got - mine).abs() <= 1e-12, "{grain} nMAE {got} vs recomputed {mine}");
    }

    let bench = cli(ws.path(), &["bench", "desk", "--baseline", "linear"], None);
    ensure!(bench.status.success(), "bench failed: {}", String::from_utf8_lossy(&bench.stderr));
    let row = String::from_utf8_lossy(&bench.stdout).trim().to_string();
    let result = read_json(&dir.join("bench-linear.json"));
    let final_config = read_json(&dir.join("06-sanity-ladder-log.json"))["repair"]["final_config"].clone();
    ensure!(result["impl_config"] == final_config, "bench trained something other than the run's final configuration");
    for leaf in diff_leaves(&result["impl_config"], &result["baseline_config"]) {
        ensure!(leaf == "model" || leaf.starts_with("model."), "bench swap changed `{leaf}`");
    }
    let mut expected_row = String::from("rul");
    for cell in result["cells"].as_array().unwrap() {
        let xs: Vec<f64> = cell["per_seed"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        ensure!(xs.len() == 3, "{} has {} seeds", cell["model"], xs.len());
        let mean = xs.iter().sum::<f64>() / 3.0;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        ensure!((cell["mean"].as_f64().unwrap() - mean).abs() <= 1e-12, "mean mismatch for {}", cell["model"]);
        ensure!((cell["std"].as_f64().unwrap() - std).abs() <= 1e-12, "std mismatch for {}", cell["model"]);
        expected_row.push_str(&format!(" | {} {mean:.2} ± {std:.2} (rank {})", cell["model"].as_str().unwrap(), cell["rank"]));
    }
    ensure!(row == expected_row, "row `{row}` vs `{expected_row}`");
    Ok(format!("40 swaps touched only the model slot; nMAE recomputed to 1e-12; bench row: {row}"))
}

fn binding_enumeration() -> Verdict {
    let valid = [
        (SlotFamily::Task, json!({"component": "rul_prognostics"})),
        (SlotFamily::Datasource, json!({"component": "synthetic_degradation", "n_train": 3, "n_val": 1, "n_test": 1})),
        (SlotFamily::Transform, json!({"component": "zscore", "fit_on": "train"})),
        (SlotFamily::Sequencer, json!({"component": "sliding_window", "length": 8})),
        (SlotFamily::Model, json!({"component": "mlp"})),
        (SlotFamily::Evaluator, json!({"component": "rul_metrics"})),
    ];
    let builtin = ComponentRegistry::builtin();
    // the same components registered again as this run's extensions
    let mut extended = builtin.clone();
    for (family, node) in &valid {
        let name = node["component"].as_str().unwrap();
        let mut d = builtin.get(*family, name).unwrap().descriptor.clone();
        d.name = format!("{name}_ext");
        d.implementation = Some(name.to_string());
        extended = extended.register_extension(d).map_err(|e| e.to_string())?;
    }
    let contract = phm_harness::binding::TaskContract::prognostics();
    let mut checked = 0;
    let mut complete_seen = 0;
    for use_ext in [false, true] {
        let reg = if use_ext { &extended } else { &builtin };
        for code in 0..3usize.pow(6) {
            let mut tree = serde_json::Map::new();
            let mut expect = BTreeMap::new();
            let mut c = code;
            for (i, (family, node)) in valid.iter().enumerate() {
                let choice = c % 3;
                c /= 3;
                let created = use_ext && i % 2 == 0;
                let state = match choice {
                    0 => {
                        let mut n = node.clone();
                        if created {
                            n["component"] = json!(format!("{}_ext", node["component"].as_str().unwrap()));
                        }
                        tree.insert(family.to_string(), n);
                        if created {
                            BindingState::Created
                        } else {
                            BindingState::Existing
                        }
                    }
                    1 => {
                        tree.insert(family.to_string(), json!({"component": "not_registered"}));
                        BindingState::Missing
                    }
                    _ => BindingState::Missing,
                };
                expect.insert(*family, state);
            }
            let cfg = config(&Value::Object(tree));
            let diag = classify_bindings(&cfg, reg);
            ensure!(diag.per_family_state == expect, "code {code} ext {use_ext}: {:?} vs {expect:?}", diag.per_family_state);
            let all_bound = expect.values().all(|s| *s != BindingState::Missing);
            ensure!(diag.complete == all_bound, "code {code} ext {use_ext}: complete={}", diag.complete);
            let tc = typecheck(&cfg, reg, &contract);
            ensure!(tc.passed == all_bound, "code {code} ext {use_ext}: typecheck passed={} {:?}", tc.passed, tc.violations);
            for (family, state) in &expect {
                if *state == BindingState::Missing {
                    ensure!(
                        tc.violations.iter().any(|v| v.family == Some(*family)),
                        "code {code}: no violation names missing {family}"
                    );
                }
            }
            if all_bound {
                // completion also requires the leakage invariant
                let stack = build_stack(&cfg, reg, &contract, &StackContext::default()).map_err(|e| e.to_string())?;
                ensure!(!leakage_check(&stack).failed(), "complete configuration leaks");
                complete_seen += 1;
            }
            checked += 1;
        }
    }
    ensure!(complete_seen == 2, "{complete_seen} complete configurations");
    Ok(format!("{checked} configurations (3^6 per registry, with and without created components) classified as expected"))
}

fn desk_protocol() -> Verdict {
    let ws = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = fixture_path();
    let run = cli(ws.path(), &["validate-run", "desk", "--mode", "full", "--paper-spec", spec.to_str().unwrap()], None);
    ensure!(run.status.success(), "exit {:?}: {}", run.status, String::from_utf8_lossy(&run.stderr));
    let status = cli(ws.path(), &["status", "desk", "--json"], None);
    let status: Value = serde_json::from_slice(&status.stdout).map_err(|e| e.to_string())?;
    ensure!(status["status"]["axes"]["technical"] == "runnable", "technical axis {}", status["status"]["axes"]["technical"]);
    let dir = RunDir::new(ws.path().join("validate-paper/desk"));
    let report = read_json(&dir.machine_path(ArtifactSlot::EvaluationReport));
    ensure!(report["technical_status"] == "PASS", "technical status {}", report["technical_status"]);
    let unit_mae = report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["metric"] == "mae" && m["grain"] == "unit")
        .and_then(|m| m["value"].as_f64())
        .ok_or("no unit mae")?;
    let constant = report["baselines"]["constant_mean"]["unit.mae"].as_f64().ok_or("no constant baseline")?;
    ensure!(unit_mae < constant, "unit MAE {unit_mae:.3} does not beat the constant predictor {constant:.3}");
    for slot in ArtifactSlot::ALL {
        let v = read_json(&dir.machine_path(slot));
        let md = fs::read_to_string(dir.human_path(slot)).map_err(|e| e.to_string())?;
        ensure!(md == render_markdown(slot, &v), "{} mirror differs from its machine artifact", slot.stem());
    }
    Ok(format!(
        "technical PASS, scientific {}, unit MAE {unit_mae:.2} vs constant {constant:.2}, 9 mirrors consistent",
        report["scientific_status"].as_str().unwrap_or("?")
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("sanity ladder zoo", ladder_zoo),
        ("gradient check", gradients_match_finite_differences),
        ("leakage detection", leakage_fuzz),
        ("repair convergence", repair_convergence),
        ("crash and resume", crash_resume),
        ("benchmark swap and nMAE", swap_isolation_and_nmae),
        ("binding coverage", binding_enumeration),
        ("desk protocol", desk_protocol),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {}. {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}. {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::models::{Batch, ForwardError, ModelInstance};
use super::optim::{OptimError, OptimizerKind, OptimizerState, Scheduler};
use super::tensor::Tensor;
use crate::binding::SlotFamily;
use crate::data::{Split, Window, WindowedDataset};

/// Fixed protocol batch sizes; paper-stated values are kept only as provenance.
pub const TRAIN_BATCH: usize = 512;
pub const EVAL_BATCH: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler: Scheduler,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    /// Linear warmup length in epochs.
    pub warmup: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.0,
            scheduler: Scheduler::PLATEAU_DEFAULT,
            max_epochs: 300,
            batch_size: TRAIN_BATCH,
            grad_clip: None,
            warmup: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train split has no windows")]
    EmptyTrainSplit,
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
}

impl TrainError {
    pub fn implicated_slots(&self) -> Vec<SlotFamily> {
        match self {
            TrainError::EmptyTrainSplit => vec![SlotFamily::Datasource, SlotFamily::Sequencer],
            _ => vec![SlotFamily::Model, SlotFamily::Transform],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunResult {
    pub history: Vec<EpochRecord>,
    pub final_train_loss: f64,
    pub optimizer: OptimizerState,
}

fn global_clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Mean loss over windows, evaluated in protocol-sized chunks.
pub fn evaluate_loss(model: &ModelInstance, windows: &[&Window]) -> Result<f64, ForwardError> {
    let mut total = 0.0;
    for chunk in windows.chunks(EVAL_BATCH) {
        let b = Batch::from_windows(chunk, model.input_length, model.n_features);
        total += model.forward(&b)?.loss_value() * chunk.len() as f64;
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Raw model outputs, `K` values per window.
pub fn predict(model: &ModelInstance, windows: &[&Window]) -> Result<Vec<Vec<f64>>, ForwardError> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_BATCH) {
        let b = Batch::from_windows(chunk, model.input_length, model.n_features);
        let fp = model.forward(&b)?;
        out.extend(fp.predictions().data().chunks(model.outputs).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Runs `steps` optimizer updates on one fixed batch. Returns the loss
/// before every step plus the final loss.
pub fn fit_batch(
    model: &mut ModelInstance,
    batch: &Batch,
    opt: &mut OptimizerState,
    steps: usize,
    mut stop: impl FnMut(&ModelInstance, f64) -> bool,
) -> Result<Vec<f64>, TrainError> {
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let fp = model.forward(batch)?;
        let l = fp.loss_value();
        losses.push(l);
        if !l.is_finite() {
            return Err(TrainError::NonFiniteLoss(0));
        }
        if stop(model, l) {
            return Ok(losses);
        }
        let grads: Vec<Tensor> = fp.backward().into_iter().map(|g| g.grad).collect();
        model.params = opt.step(&model.params, &grads)?;
    }
    losses.push(model.forward(batch)?.loss_value());
    Ok(losses)
}

/// Mini-batch training with per-epoch validation and scheduling. Bit-exact
/// for a given seed.
pub fn train(model: &mut ModelInstance, data: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainRunResult, TrainError> {
    let train_w: Vec<&Window> = data.split(Split::Train).iter().collect();
    if train_w.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let val_w: Vec<&Window> = data.split(Split::Val).iter().collect();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.scheduler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let base_lr = cfg.lr;
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.max_epochs {
        if let Some(w) = cfg.warmup.filter(|w| epoch < *w) {
            opt.lr = base_lr * (epoch + 1) as f64 / (w + 1) as f64;
        } else if cfg.warmup.is_some_and(|w| epoch == w) {
            opt.lr = base_lr;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let ws: Vec<&Window> = idx.iter().map(|i| train_w[*i]).collect();
            let batch = Batch::from_windows(&ws, model.input_length, model.n_features);
            let fp = model.forward(&batch)?;
            let l = fp.loss_value();
            if !l.is_finite() {
                return Err(TrainError::NonFiniteLoss(epoch));
            }
            total += l * ws.len() as f64;
            let mut grads: Vec<Tensor> = fp.backward().into_iter().map(|g| g.grad).collect();
            if let Some(c) = cfg.grad_clip {
                global_clip(&mut grads, c);
            }
            model.params = opt.step(&model.params, &grads)?;
        }
        final_loss = total / train_w.len() as f64;
        let val_metric = if val_w.is_empty() {
            final_loss
        } else {
            evaluate_loss(model, &val_w)?
        };
        history.push(EpochRecord {
            epoch,
            train_loss: final_loss,
            val_metric,
            lr: opt.lr,
        });
        if cfg.warmup.map_or(true, |w| epoch >= w) {
            opt.end_epoch(val_metric);
        }
    }
    Ok(TrainRunResult {
        history,
        final_train_loss: final_loss,
        optimizer: opt,
    })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_metric,lr\n");
    for r in history {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.epoch, r.train_loss, r.val_metric, r.lr));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFitEstimate {
    pub fits: bool,
    pub estimated_bytes: u64,
    pub train_bytes: u64,
    pub eval_bytes: u64,
    pub budget_bytes: u64,
}

/// Bytes for one batch size: inputs, one buffer per recorded primitive,
/// parameters, gradients and optimizer moments, all float64.
pub fn batch_bytes(model: &ModelInstance, optimizer: OptimizerKind, b: usize) -> Result<u64, ForwardError> {
    let batch = Batch {
        tensors: [
            ("x".to_string(), Tensor::zeros(vec![b, model.input_length, model.n_features])),
            ("y".to_string(), Tensor::zeros(vec![b])),
        ]
        .into(),
    };
    let fp = model.forward(&batch)?;
    let inputs = batch.tensors.values().map(Tensor::numel).sum::<usize>();
    let n = model.n_parameters();
    let activations: usize = fp.tape.nodes().iter().map(|node| node.value.numel()).sum::<usize>() - n;
    let values = inputs + activations + n * (2 + optimizer.moment_buffers());
    Ok(values as u64 * 8)
}

pub fn batch_fit_estimate(model: &ModelInstance, optimizer: OptimizerKind, budget_bytes: u64) -> Result<BatchFitEstimate, ForwardError> {
    let train_bytes = batch_bytes(model, optimizer, TRAIN_BATCH)?;
    let eval_bytes = batch_bytes(model, optimizer, EVAL_BATCH)?;
    let estimated_bytes = train_bytes + eval_bytes;
    Ok(BatchFitEstimate {
        fits: estimated_bytes <= budget_bytes,
        estimated_bytes,
        train_bytes,
        eval_bytes,
        budget_bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub component: String,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step_count: u64,
}

/// `checkpoint.json` header plus `checkpoint.bin` little-endian float64 blob.
pub fn save_checkpoint(dir: &Path, model: &ModelInstance, opt: &OptimizerState) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let header = CheckpointHeader {
        component: model.component.clone(),
        names: model.params.iter().map(|(n, _)| n.clone()).collect(),
        shapes: model.params.iter().map(|(_, t)| t.shape().to_vec()).collect(),
        optimizer: opt.kind,
        lr: opt.lr,
        weight_decay: opt.weight_decay,
        step_count: opt.step_count,
    };
    let blob: Vec<u8> = model
        .params
        .iter()
        .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&header)? + "\n")?;
    fs::write(dir.join("checkpoint.bin"), blob)
}

pub fn load_checkpoint(dir: &Path) -> io::Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let header: CheckpointHeader = serde_json::from_slice(&fs::read(dir.join("checkpoint.json"))?)?;
    let blob = fs::read(dir.join("checkpoint.bin"))?;
    let mut vals = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = Vec::new();
    for (name, shape) in header.names.iter().zip(&header.shapes) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = vals.by_ref().take(n).collect();
        let t = Tensor::new(shape.clone(), data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        params.push((name.clone(), t));
    }
    if vals.next().is_some() {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "trailing checkpoint data"));
    }
    Ok((header, params))
}

//! Reference architectures, the planted-bug zoo, and model instances.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::tape::{ParamGrad, Tape, Var};
use super::tensor::{ShapeError, Tensor};
use crate::data::Window;

/// Output layers start at this fraction of the fan-in bound so that initial
/// predictions sit near zero and the init-loss prior is meaningful.
pub const HEAD_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ForwardError {
    #[error("batch is missing required key `{0}`")]
    MissingKey(String),
    #[error("shape mismatch on `{key}`: {detail}")]
    ShapeMismatch { key: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("no architecture named `{0}`")]
    UnknownArchitecture(String),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
}

pub trait Architecture: fmt::Debug + Send + Sync {
    fn init(&self, input_dim: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)>;

    /// `x` is `[B, input_dim]`. Well-behaved models return `[B, 1, K]`.
    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, outputs: usize) -> Result<Var, ShapeError>;
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("sized above")
}

fn dense_init(rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) -> [(String, Tensor); 2] {
    let bound = gain / (fan_in as f64).sqrt();
    [
        (format!("{prefix}.w"), uniform(rng, vec![fan_in, fan_out], bound)),
        (format!("{prefix}.b"), uniform(rng, vec![fan_out], bound)),
    ]
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

fn to_prediction(tape: &mut Tape, out: Var, outputs: usize) -> Result<Var, ShapeError> {
    let b = tape.value(out).shape()[0];
    tape.reshape(out, vec![b, 1, outputs])
}

fn mlp_init(hidden: &[usize], input_dim: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let mut fan_in = input_dim;
    for (i, h) in hidden.iter().enumerate() {
        out.extend(dense_init(rng, &format!("layer{i}"), fan_in, *h, 1.0));
        fan_in = *h;
    }
    out.extend(dense_init(rng, "head", fan_in, outputs, HEAD_GAIN));
    out
}

/// Hidden tanh layers; returns the last hidden activation and the index of
/// the head weights in `params`.
fn mlp_body(tape: &mut Tape, params: &[Var], x: Var, n_hidden: usize) -> Result<(Var, usize), ShapeError> {
    let mut h = x;
    for i in 0..n_hidden {
        let z = dense(tape, h, params[2 * i], params[2 * i + 1])?;
        h = tape.tanh(z);
    }
    Ok((h, 2 * n_hidden))
}

#[derive(Debug, Clone)]
pub struct Linear;

impl Architecture for Linear {
    fn init(&self, input_dim: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
        dense_init(rng, "head", input_dim, outputs, HEAD_GAIN).to_vec()
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, outputs: usize) -> Result<Var, ShapeError> {
        let z = dense(tape, x, p[0], p[1])?;
        to_prediction(tape, z, outputs)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Vec<usize>,
}

impl Architecture for Mlp {
    fn init(&self, input_dim: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
        mlp_init(&self.hidden, input_dim, outputs, rng)
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, outputs: usize) -> Result<Var, ShapeError> {
        let (h, k) = mlp_body(tape, p, x, self.hidden.len())?;
        let z = dense(tape, h, p[k], p[k + 1])?;
        to_prediction(tape, z, outputs)
    }
}

/// Planted bug: an auxiliary branch whose parameters never reach the loss.
#[derive(Debug, Clone)]
pub struct DeadBranchMlp {
    pub hidden: Vec<usize>,
}

impl Architecture for DeadBranchMlp {
    fn init(&self, input_dim: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
        let mut p = mlp_init(&self.hidden, input_dim, outputs, rng);
        p.extend(dense_init(rng, "aux", input_dim, 2, 1.0));
        p
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, outputs: usize) -> Result<Var, ShapeError> {
        Mlp {
            hidden: self.hidden.clone(),
        }
        .forward(tape, p, x, outputs)
    }
}

/// Planted bug: hidden features are mixed with their batch mean, so one
/// sample's prediction depends on the others.
#[derive(Debug, Clone)]
pub struct BatchMixingMlp {
    pub hidden: Vec<usize>,
}

impl Architecture for BatchMixingMlp {
    fn init(&self, input_dim: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
        mlp_init(&self.hidden, input_dim, outputs, rng)
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, outputs: usize) -> Result<Var, ShapeError> {
        let (h, k) = mlp_body(tape, p, x, self.hidden.len())?;
        let m = tape.batch_mean_broadcast(h)?;
        let h = tape.add(h, m)?;
        let z = dense(tape, h, p[k], p[k + 1])?;
        to_prediction(tape, z, outputs)
    }
}

/// Planted bug: the head ignores its input and emits a learned constant.
#[derive(Debug, Clone)]
pub struct ConstantHead;

impl Architecture for ConstantHead {
    fn init(&self, _input_dim: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
        vec![("head.b".into(), uniform(rng, vec![1, outputs], HEAD_GAIN))]
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, outputs: usize) -> Result<Var, ShapeError> {
        let b = tape.value(x).shape()[0];
        let z = tape.row_broadcast(p[0], b)?;
        to_prediction(tape, z, outputs)
    }
}

/// Planted bug: takes the log of a non-positive quantity.
#[derive(Debug, Clone)]
pub struct NanHead;

impl Architecture for NanHead {
    fn init(&self, input_dim: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
        dense_init(rng, "head", input_dim, outputs, HEAD_GAIN).to_vec()
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, outputs: usize) -> Result<Var, ShapeError> {
        let z = dense(tape, x, p[0], p[1])?;
        let sq = tape.square(z);
        let neg = tape.scale(sq, -1.0);
        let z = tape.log(neg);
        to_prediction(tape, z, outputs)
    }
}

/// Planted bug: emits `(B, K)` instead of `(B, 1, K)`.
#[derive(Debug, Clone)]
pub struct FlatHead;

impl Architecture for FlatHead {
    fn init(&self, input_dim: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
        dense_init(rng, "head", input_dim, outputs, HEAD_GAIN).to_vec()
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, _outputs: usize) -> Result<Var, ShapeError> {
        dense(tape, x, p[0], p[1])
    }
}

pub const DEFAULT_HIDDEN: [usize; 1] = [16];

/// Resolves a registry implementation name to an architecture.
pub fn architecture_for(implementation: &str, hidden: Option<Vec<usize>>) -> Result<Arc<dyn Architecture>, ModelError> {
    let hidden = hidden.unwrap_or_else(|| DEFAULT_HIDDEN.to_vec());
    if hidden.iter().any(|h| *h == 0) {
        return Err(ModelError::InvalidParameter("hidden widths must be positive".into()));
    }
    Ok(match implementation {
        "linear" | "logistic" => Arc::new(Linear),
        "mlp" | "mlp_classifier" => Arc::new(Mlp { hidden }),
        "dead_branch_mlp" => Arc::new(DeadBranchMlp { hidden }),
        "batch_mixing_mlp" => Arc::new(BatchMixingMlp { hidden }),
        "constant_head" => Arc::new(ConstantHead),
        "nan_head" => Arc::new(NanHead),
        "flat_head" => Arc::new(FlatHead),
        other => return Err(ModelError::UnknownArchitecture(other.to_string())),
    })
}

/// Named tensors keyed by batch role: `x` is `[B, L, F]`, `y` is `[B]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Batch {
    pub fn from_windows(windows: &[&Window], length: usize, n_features: usize) -> Batch {
        let b = windows.len();
        let mut x = Vec::with_capacity(b * length * n_features);
        let mut y = Vec::with_capacity(b);
        for w in windows {
            x.extend_from_slice(&w.values);
            y.push(w.target);
        }
        let mut tensors = BTreeMap::new();
        tensors.insert("x".into(), Tensor::new(vec![b, length, n_features], x).expect("window sizes agree"));
        tensors.insert("y".into(), Tensor::new(vec![b], y).expect("one target per window"));
        Batch { tensors }
    }

    pub fn size(&self) -> usize {
        self.tensors.values().next().map(|t| t.shape()[0]).unwrap_or(0)
    }

    /// Rows `[start, end)` of every tensor.
    pub fn slice(&self, start: usize, end: usize) -> Batch {
        Batch {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.rows(start, end))).collect(),
        }
    }
}

pub struct ForwardPass {
    pub tape: Tape,
    pub param_vars: Vec<Var>,
    pub predictions: Var,
    pub loss: Var,
    pub targets: Tensor,
}

impl ForwardPass {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).item()
    }

    pub fn predictions(&self) -> &Tensor {
        self.tape.value(self.predictions)
    }

    /// The `predictions` and `targets` output map.
    pub fn outputs(&self) -> BTreeMap<&'static str, Tensor> {
        BTreeMap::from([("predictions", self.predictions().clone()), ("targets", self.targets.clone())])
    }

    pub fn backward(&self) -> Vec<ParamGrad> {
        self.tape.backward(self.loss)
    }
}

#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub component: String,
    arch: Arc<dyn Architecture>,
    pub params: Vec<(String, Tensor)>,
    pub input_length: usize,
    pub n_features: usize,
    pub outputs: usize,
    pub loss_kind: LossKind,
    pub required_keys: Vec<String>,
}

impl ModelInstance {
    pub fn new(
        component: impl Into<String>,
        arch: Arc<dyn Architecture>,
        input_length: usize,
        n_features: usize,
        outputs: usize,
        loss_kind: LossKind,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch.init(input_length * n_features, outputs, &mut rng);
        ModelInstance {
            component: component.into(),
            arch,
            params,
            input_length,
            n_features,
            outputs,
            loss_kind,
            required_keys: vec!["x".into(), "y".into()],
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardPass, ForwardError> {
        self.forward_with(&self.params, batch)
    }

    pub fn forward_with(&self, params: &[(String, Tensor)], batch: &Batch) -> Result<ForwardPass, ForwardError> {
        for k in &self.required_keys {
            if !batch.tensors.contains_key(k) {
                return Err(ForwardError::MissingKey(k.clone()));
            }
        }
        let mismatch = |key: &str, detail: String| ForwardError::ShapeMismatch {
            key: key.to_string(),
            detail,
        };
        let x = &batch.tensors["x"];
        let y = &batch.tensors["y"];
        let b = x.shape().first().copied().unwrap_or(0);
        if x.shape() != [b, self.input_length, self.n_features] {
            return Err(mismatch(
                "x",
                format!("expected [B, {}, {}], got {:?}", self.input_length, self.n_features, x.shape()),
            ));
        }
        if y.shape() != [b] {
            return Err(mismatch("y", format!("expected [{b}], got {:?}", y.shape())));
        }
        if b == 0 {
            return Err(mismatch("x", "empty batch".into()));
        }
        let mut tape = Tape::new();
        let param_vars: Vec<Var> = params.iter().map(|(n, t)| tape.parameter(n.clone(), t.clone())).collect();
        let xin = tape.constant(x.reshape(vec![b, self.input_length * self.n_features]).expect("same count"));
        let pred = self
            .arch
            .forward(&mut tape, &param_vars, xin, self.outputs)
            .map_err(|e| mismatch("predictions", e.0))?;
        let expected = [b, 1, self.outputs];
        if tape.value(pred).shape() != expected {
            return Err(mismatch(
                "predictions",
                format!("expected {expected:?}, got {:?}", tape.value(pred).shape()),
            ));
        }
        let flat = tape.reshape(pred, vec![b, self.outputs]).expect("same count");
        let loss = match self.loss_kind {
            LossKind::Mse => {
                let t = tape.constant(y.reshape(vec![b, 1]).expect("same count"));
                let d = tape.sub(flat, t).map_err(|e| mismatch("y", e.0))?;
                let sq = tape.square(d);
                tape.mean(sq)
            }
            LossKind::CrossEntropy => {
                let labels: Vec<usize> = y.data().iter().map(|v| v.round().max(0.0) as usize).collect();
                tape.softmax_cross_entropy(flat, labels).map_err(|e| mismatch("y", e.0))?
            }
        };
        Ok(ForwardPass {
            tape,
            param_vars,
            predictions: pred,
            loss,
            targets: y.clone(),
        })
    }

    /// Loss-only evaluation at substituted parameters.
    pub fn loss_at(&self, params: &[(String, Tensor)], batch: &Batch) -> Result<f64, ForwardError> {
        Ok(self.forward_with(params, batch)?.loss_value())
    }
}

/// Central-difference gradient of the model loss, one coordinate at a time.
pub fn finite_difference_gradient(model: &ModelInstance, batch: &Batch, step: f64) -> Result<Vec<Tensor>, ForwardError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut params = model.params.clone();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].1.shape().to_vec());
        for i in 0..g.numel() {
            let orig = params[p].1.data()[i];
            params[p].1.data_mut()[i] = orig + step;
            let up = model.loss_at(&params, batch)?;
            params[p].1.data_mut()[i] = orig - step;
            let down = model.loss_at(&params, batch)?;
            params[p].1.data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(x: Vec<f64>, y: Vec<f64>, l: usize, f: usize) -> Batch {
        let b = y.len();
        Batch {
            tensors: BTreeMap::from([
                ("x".to_string(), Tensor::new(vec![b, l, f], x).unwrap()),
                ("y".to_string(), Tensor::new(vec![b], y).unwrap()),
            ]),
        }
    }

    #[test]
    fn linear_prediction_is_arithmetic() {
        let mut m = ModelInstance::new("linear", Arc::new(Linear), 1, 1, 1, LossKind::Mse, 0);
        m.params = vec![
            ("head.w".into(), Tensor::new(vec![1, 1], vec![2.0]).unwrap()),
            ("head.b".into(), Tensor::new(vec![1], vec![0.0]).unwrap()),
        ];
        let fp = m.forward(&batch(vec![3.0], vec![0.0], 1, 1)).unwrap();
        assert_eq!(fp.predictions().data(), &[6.0]);
        assert_eq!(fp.predictions().shape(), &[1, 1, 1]);
        assert_eq!(fp.outputs().len(), 2);
    }

    #[test]
    fn missing_key_and_flat_head() {
        let m = ModelInstance::new("linear", Arc::new(Linear), 2, 1, 1, LossKind::Mse, 0);
        let mut b = batch(vec![1.0, 2.0], vec![0.0], 2, 1);
        b.tensors.remove("y");
        assert_eq!(m.forward(&b).err(), Some(ForwardError::MissingKey("y".into())));
        let flat = ModelInstance::new("flat_head", Arc::new(FlatHead), 2, 1, 1, LossKind::Mse, 0);
        let err = flat.forward(&batch(vec![1.0, 2.0], vec![0.0], 2, 1)).err().unwrap();
        assert!(matches!(err, ForwardError::ShapeMismatch { ref key, .. } if key == "predictions"));
    }

    #[test]
    fn identical_rows_identical_predictions() {
        let m = ModelInstance::new("mlp", Arc::new(Mlp { hidden: vec![5] }), 3, 2, 1, LossKind::Mse, 4);
        let row = vec![0.1, -0.2, 0.3, 0.5, 0.0, 1.0];
        let x: Vec<f64> = row.iter().chain(&row).copied().collect();
        let fp = m.forward(&batch(x, vec![0.0, 0.0], 3, 2)).unwrap();
        let p = fp.predictions().data();
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelInstance::new("mlp", Arc::new(Mlp { hidden: vec![4] }), 4, 1, 1, LossKind::Mse, 9);
        let b = ModelInstance::new("mlp", Arc::new(Mlp { hidden: vec![4] }), 4, 1, 1, LossKind::Mse, 9);
        assert_eq!(a.params, b.params);
        assert!(a.params[0].1.max_abs() <= 0.5);
    }

    #[test]
    fn finite_differences_match_backward_on_mlp() {
        let m = ModelInstance::new("mlp", Arc::new(Mlp { hidden: vec![3, 2] }), 2, 2, 1, LossKind::Mse, 1);
        let b = batch(vec![0.3, -1.0, 0.2, 0.7, 1.1, 0.4, -0.5, 0.9], vec![1.0, -2.0], 2, 2);
        let analytic = m.forward(&b).unwrap().backward();
        let numeric = finite_difference_gradient(&m, &b, 1e-6).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            for (x, y) in a.grad.data().iter().zip(n.data()) {
                assert!((x - y).abs() <= (1e-6 * x.abs().max(y.abs())).max(1e-8), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_parameter_model_has_empty_gradient() {
        #[derive(Debug)]
        struct Fixed;
        impl Architecture for Fixed {
            fn init(&self, _: usize, _: usize, _: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
                vec![]
            }
            fn forward(&self, tape: &mut Tape, _: &[Var], x: Var, k: usize) -> Result<Var, ShapeError> {
                let b = tape.value(x).shape()[0];
                let z = tape.constant(Tensor::zeros(vec![b, k]));
                to_prediction(tape, z, k)
            }
        }
        let m = ModelInstance::new("fixed", Arc::new(Fixed), 1, 1, 1, LossKind::Mse, 0);
        assert!(finite_difference_gradient(&m, &batch(vec![1.0], vec![1.0], 1, 1), 1e-6).unwrap().is_empty());
    }
}

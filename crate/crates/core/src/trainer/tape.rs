//! Reverse-mode differentiation over a flat list of primitive records.

use super::tensor::{matmul, matmul_nt, matmul_tn, ShapeError, Tensor};

pub type Var = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Constant,
    Parameter(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Square(Var),
    Log(Var),
    Mean(Var),
    /// Every row replaced by the column mean over the leading axis.
    BatchMeanBroadcast(Var),
    /// `[1,n]` repeated `rows` times.
    RowBroadcast(Var, usize),
    Reshape(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
}

/// Records are appended in evaluation order, so the list is already
/// topologically sorted.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub name: String,
    pub grad: Tensor,
    /// False when no path leads from the parameter to the loss.
    pub reached: bool,
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize), ShapeError> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(ShapeError(format!("{what} expects a matrix, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    pub fn parameter(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        self.push(Op::Parameter(name.into()), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (m, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, n) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(ShapeError(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?))
    }

    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (m, n) = dims2(self.value(a), "add_bias")?;
        if self.value(b).shape() != [n] {
            return Err(ShapeError(format!("bias {:?} for [{m},{n}]", self.value(b).shape())));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(x, b)| *x += b);
        }
        Ok(self.push(Op::AddBias(a, b), Tensor::new(vec![m, n], out)?))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, ShapeError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(ShapeError(format!("elementwise {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(op, Tensor::new(shape, out)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    pub fn batch_mean_broadcast(&mut self, a: Var) -> Result<Var, ShapeError> {
        let (m, n) = dims2(self.value(a), "batch_mean_broadcast")?;
        let data = self.value(a).data();
        let mut col = vec![0.0; n];
        for row in data.chunks(n) {
            col.iter_mut().zip(row).for_each(|(c, x)| *c += x);
        }
        col.iter_mut().for_each(|c| *c /= m as f64);
        let out = col.iter().cycle().take(m * n).copied().collect();
        Ok(self.push(Op::BatchMeanBroadcast(a), Tensor::new(vec![m, n], out)?))
    }

    pub fn row_broadcast(&mut self, a: Var, rows: usize) -> Result<Var, ShapeError> {
        let (one, n) = dims2(self.value(a), "row_broadcast")?;
        if one != 1 {
            return Err(ShapeError(format!("row_broadcast needs [1,n], got [{one},{n}]")));
        }
        let out = self.value(a).data().iter().cycle().take(rows * n).copied().collect();
        Ok(self.push(Op::RowBroadcast(a, rows), Tensor::new(vec![rows, n], out)?))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, ShapeError> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Mean cross-entropy of `logits [m,C]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var, ShapeError> {
        let (m, c) = dims2(self.value(logits), "softmax_cross_entropy")?;
        if labels.len() != m || labels.iter().any(|l| *l >= c) {
            return Err(ShapeError(format!("labels must be {m} indices below {c}")));
        }
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (row, &l) in data.chunks(c).zip(&labels) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        Ok(self.push(Op::SoftmaxCrossEntropy(logits, labels), Tensor::scalar(total / m as f64)))
    }

    /// Exact gradients of scalar `loss` for every parameter record.
    pub fn backward(&self, loss: Var) -> Vec<ParamGrad> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for i in (0..=loss).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, d: Vec<f64>| match &mut grads[v] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot => *slot = Some(d),
            };
            match &node.op {
                Op::Constant => {}
                Op::Parameter(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    acc(*a, matmul_nt(&g, tb.data(), m, k, n));
                    acc(*b, matmul_tn(ta.data(), &g, m, k, n));
                }
                Op::AddBias(a, b) => {
                    let n = self.value(*b).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|x| -x).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                    acc(*b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
                Op::Tanh(a) => acc(*a, g.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect()),
                Op::Square(a) => acc(*a, g.iter().zip(self.value(*a).data()).map(|(g, x)| 2.0 * g * x).collect()),
                Op::Log(a) => acc(*a, g.iter().zip(self.value(*a).data()).map(|(g, x)| g / x).collect()),
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    acc(*a, vec![g[0] / n as f64; n]);
                }
                Op::BatchMeanBroadcast(a) => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut col = vec![0.0; n];
                    for row in g.chunks(n) {
                        col.iter_mut().zip(row).for_each(|(c, x)| *c += x / m as f64);
                    }
                    acc(*a, col.iter().cycle().take(m * n).copied().collect());
                }
                Op::RowBroadcast(a, _) => {
                    let n = self.value(*a).numel();
                    let mut col = vec![0.0; n];
                    for row in g.chunks(n) {
                        col.iter_mut().zip(row).for_each(|(c, x)| *c += x);
                    }
                    acc(*a, col);
                }
                Op::Reshape(a) => acc(*a, g),
                Op::SoftmaxCrossEntropy(a, labels) => {
                    let t = self.value(*a);
                    let (m, c) = (t.shape()[0], t.shape()[1]);
                    let mut d = Vec::with_capacity(m * c);
                    for (row, &l) in t.data().chunks(c).zip(labels) {
                        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                        for (j, x) in row.iter().enumerate() {
                            let p = (x - mx).exp() / z;
                            let y = if j == l { 1.0 } else { 0.0 };
                            d.push(g[0] * (p - y) / m as f64);
                        }
                    }
                    acc(*a, d);
                }
            }
        }
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match &node.op {
                Op::Parameter(name) => {
                    let shape = node.value.shape().to_vec();
                    let (grad, reached) = match grads[i].take() {
                        Some(g) => (Tensor::new(shape, g).expect("gradient matches parameter"), true),
                        None => (Tensor::zeros(shape), false),
                    };
                    Some(ParamGrad {
                        name: name.clone(),
                        grad,
                        reached,
                    })
                }
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_product_gradient() {
        // L = (w·x)² with w=2, x=3 → dL/dw = 2·w·x·x = 36
        let mut t = Tape::new();
        let w = t.parameter("w", Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let x = t.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let y = t.matmul(x, w).unwrap();
        let sq = t.square(y);
        let l = t.mean(sq);
        let g = t.backward(l);
        assert_eq!(g[0].grad.data(), &[36.0]);
        assert!(g[0].reached);
    }

    #[test]
    fn unused_parameter_is_unreached() {
        let mut t = Tape::new();
        let w = t.parameter("w", Tensor::scalar(1.0));
        t.parameter("aux", Tensor::scalar(5.0));
        let l = t.square(w);
        let g = t.backward(l);
        assert!(g[0].reached);
        assert!(!g[1].reached);
        assert_eq!(g[1].grad.data(), &[0.0]);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(vec![3, 10]));
        let l = t.softmax_cross_entropy(z, vec![0, 4, 9]).unwrap();
        assert!((t.value(l).item() - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        assert!(t.matmul(a, b).is_err());
        let bias = t.constant(Tensor::zeros(vec![2]));
        assert!(t.add_bias(a, bias).is_err());
    }
}

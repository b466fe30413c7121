//! Dense 64-bit tensors with a recorded computation tape and reverse-mode
//! gradient accumulation.
//!
//! The tape is define-by-run: every op appends a node holding its forward
//! value, and `backward` walks the nodes in reverse, summing adjoints in
//! tape order so results are bitwise reproducible. Overflow to non-finite
//! values is an error, never a silent `Inf`.

use crate::{Error, Result};

/// Floor applied before `ln` in losses and the log op.
pub const LOG_CLAMP: f64 = 1e-300;

/// Dense row-major array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Row/column count for 2-D tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub(crate) fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

#[derive(Debug, Clone)]
enum OpKind {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Elementwise; one operand may be a single element (broadcast).
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    RowSelect(NodeId, usize),
    Slice(NodeId, usize, usize),
    ScalarMul(NodeId, f64),
    Sum(NodeId),
    Log(NodeId),
    NllGather(NodeId, usize),
}

#[derive(Debug)]
struct Node {
    op: OpKind,
    value: Tensor,
}

/// Recorded forward computation. Inputs of every node precede it, so
/// reverse iteration is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id; nodes unreachable from the loss read as zero.
#[derive(Debug)]
pub struct GradTable {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl GradTable {
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => Tensor { shape: self.shapes[id.0].clone(), values: g.clone() },
            None => Tensor::zeros(&self.shapes[id.0]),
        }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: OpKind, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite result from {op:?} (overflow is an error)"
            )));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Insert an input tensor as a leaf node.
    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(OpKind::Leaf, t)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 {
            return Err(Error::Shape(format!("matmul lhs must be 2-D, got {:?}", ta.shape)));
        }
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let out = match tb.shape.len() {
            1 => {
                if tb.shape[0] != k {
                    return Err(Error::Shape(format!(
                        "matmul inner dims disagree: {:?} vs {:?}",
                        ta.shape, tb.shape
                    )));
                }
                let mut v = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += ta.values[i * k + j] * tb.values[j];
                    }
                    v[i] = acc;
                }
                Tensor { shape: vec![m], values: v }
            }
            2 => {
                if tb.shape[0] != k {
                    return Err(Error::Shape(format!(
                        "matmul inner dims disagree: {:?} vs {:?}",
                        ta.shape, tb.shape
                    )));
                }
                let n = tb.shape[1];
                let mut v = vec![0.0; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let x = ta.values[i * k + l];
                        for j in 0..n {
                            v[i * n + j] += x * tb.values[l * n + j];
                        }
                    }
                }
                Tensor { shape: vec![m, n], values: v }
            }
            _ => {
                return Err(Error::Shape(format!("matmul rhs must be 1-D or 2-D, got {:?}", tb.shape)))
            }
        };
        self.push(OpKind::MatMul(a, b), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!("add shapes disagree: {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let values = ta.values.iter().zip(&tb.values).map(|(x, y)| x + y).collect();
        let out = Tensor { shape: ta.shape.clone(), values };
        self.push(OpKind::Add(a, b), out)
    }

    /// Elementwise product. A single-element operand broadcasts over the other.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape == tb.shape {
            let values = ta.values.iter().zip(&tb.values).map(|(x, y)| x * y).collect();
            Tensor { shape: ta.shape.clone(), values }
        } else if ta.len() == 1 {
            let s = ta.values[0];
            Tensor { shape: tb.shape.clone(), values: tb.values.iter().map(|y| s * y).collect() }
        } else if tb.len() == 1 {
            let s = tb.values[0];
            Tensor { shape: ta.shape.clone(), values: ta.values.iter().map(|x| x * s).collect() }
        } else {
            return Err(Error::Shape(format!("mul shapes disagree: {:?} vs {:?}", ta.shape, tb.shape)));
        };
        self.push(OpKind::Mul(a, b), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|x| x.tanh()).collect(),
        };
        self.push(OpKind::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        };
        self.push(OpKind::Sigmoid(a), out)
    }

    /// Softmax over the last (only) axis of a 1-D tensor, max-subtracted.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape.len() != 1 || t.is_empty() {
            return Err(Error::Shape(format!("softmax wants a non-empty vector, got {:?}", t.shape)));
        }
        let out = Tensor { shape: t.shape.clone(), values: softmax_values(&t.values) };
        self.push(OpKind::Softmax(a), out)
    }

    /// Concatenate 1-D tensors along their only axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let mut values = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape.len() != 1 {
                return Err(Error::Shape(format!("concat wants vectors, got {:?}", t.shape)));
            }
            values.extend_from_slice(&t.values);
        }
        let out = Tensor { shape: vec![values.len()], values };
        self.push(OpKind::Concat(parts.to_vec()), out)
    }

    /// Select one row of a 2-D tensor (embedding lookup).
    pub fn row_select(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape.len() != 2 {
            return Err(Error::Shape(format!("row_select wants a matrix, got {:?}", t.shape)));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        if row >= r {
            return Err(Error::Shape(format!("row {row} out of range for {r} rows")));
        }
        let values = t.values[row * c..(row + 1) * c].to_vec();
        let out = Tensor { shape: vec![c], values };
        self.push(OpKind::RowSelect(a, row), out)
    }

    /// Contiguous range `[lo, hi)` of a 1-D tensor.
    pub fn slice(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape.len() != 1 || lo >= hi || hi > t.len() {
            return Err(Error::Shape(format!(
                "slice [{lo},{hi}) invalid for shape {:?}",
                t.shape
            )));
        }
        let out = Tensor { shape: vec![hi - lo], values: t.values[lo..hi].to_vec() };
        self.push(OpKind::Slice(a, lo, hi), out)
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|x| c * x).collect(),
        };
        self.push(OpKind::ScalarMul(a, c), out)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).values.iter().sum();
        self.push(OpKind::Sum(a), Tensor::scalar(s))
    }

    /// Elementwise natural log, input clamped at [`LOG_CLAMP`].
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|x| x.max(LOG_CLAMP).ln()).collect(),
        };
        self.push(OpKind::Log(a), out)
    }

    /// `-log(p[target])` of a probability vector, clamped at [`LOG_CLAMP`].
    pub fn nll_gather(&mut self, probs: NodeId, target: usize) -> Result<NodeId> {
        let t = self.value(probs);
        if t.shape.len() != 1 || target >= t.len() {
            return Err(Error::Shape(format!(
                "nll_gather target {target} invalid for shape {:?}",
                t.shape
            )));
        }
        let v = -t.values[target].max(LOG_CLAMP).ln();
        self.push(OpKind::NllGather(probs, target), Tensor::scalar(v))
    }

    /// Reverse-mode sweep from a scalar loss node. Adjoints are accumulated
    /// by summation in reverse tape order.
    pub fn backward(&self, loss: NodeId) -> Result<GradTable> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            let mut bump = |id: NodeId, f: &mut dyn FnMut(&mut Vec<f64>)| {
                let slot = &mut grads[id.0];
                if slot.is_none() {
                    *slot = Some(vec![0.0; self.nodes[id.0].value.len()]);
                }
                f(slot.as_mut().unwrap());
            };
            match &node.op {
                OpKind::Leaf => {}
                OpKind::MatMul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k) = (ta.shape[0], ta.shape[1]);
                    if tb.shape.len() == 1 {
                        // y = A x: dA = g x^T, dx = A^T g
                        bump(*a, &mut |ga| {
                            for i in 0..m {
                                for j in 0..k {
                                    ga[i * k + j] += g[i] * tb.values[j];
                                }
                            }
                        });
                        bump(*b, &mut |gb| {
                            for i in 0..m {
                                for j in 0..k {
                                    gb[j] += ta.values[i * k + j] * g[i];
                                }
                            }
                        });
                    } else {
                        let nn = tb.shape[1];
                        // Y = A B: dA = G B^T, dB = A^T G
                        bump(*a, &mut |ga| {
                            for i in 0..m {
                                for l in 0..k {
                                    let mut acc = 0.0;
                                    for j in 0..nn {
                                        acc += g[i * nn + j] * tb.values[l * nn + j];
                                    }
                                    ga[i * k + l] += acc;
                                }
                            }
                        });
                        bump(*b, &mut |gb| {
                            for l in 0..k {
                                for j in 0..nn {
                                    let mut acc = 0.0;
                                    for i in 0..m {
                                        acc += ta.values[i * k + l] * g[i * nn + j];
                                    }
                                    gb[l * nn + j] += acc;
                                }
                            }
                        });
                    }
                }
                OpKind::Add(a, b) => {
                    bump(*a, &mut |ga| {
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += y;
                        }
                    });
                    bump(*b, &mut |gb| {
                        for (x, y) in gb.iter_mut().zip(&g) {
                            *x += y;
                        }
                    });
                }
                OpKind::Mul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    if ta.len() == tb.len() {
                        bump(*a, &mut |ga| {
                            for i in 0..g.len() {
                                ga[i] += g[i] * tb.values[i];
                            }
                        });
                        bump(*b, &mut |gb| {
                            for i in 0..g.len() {
                                gb[i] += g[i] * ta.values[i];
                            }
                        });
                    } else if ta.len() == 1 {
                        bump(*a, &mut |ga| {
                            ga[0] += g.iter().zip(&tb.values).map(|(x, y)| x * y).sum::<f64>();
                        });
                        bump(*b, &mut |gb| {
                            for i in 0..g.len() {
                                gb[i] += g[i] * ta.values[0];
                            }
                        });
                    } else {
                        bump(*a, &mut |ga| {
                            for i in 0..g.len() {
                                ga[i] += g[i] * tb.values[0];
                            }
                        });
                        bump(*b, &mut |gb| {
                            gb[0] += g.iter().zip(&ta.values).map(|(x, y)| x * y).sum::<f64>();
                        });
                    }
                }
                OpKind::Tanh(a) => {
                    let y = &node.value.values;
                    bump(*a, &mut |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                OpKind::Sigmoid(a) => {
                    let y = &node.value.values;
                    bump(*a, &mut |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                OpKind::Softmax(a) => {
                    let y = &node.value.values;
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    bump(*a, &mut |ga| {
                        for i in 0..g.len() {
                            ga[i] += y[i] * (g[i] - dot);
                        }
                    });
                }
                OpKind::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        let seg = &g[off..off + len];
                        bump(p, &mut |gp| {
                            for i in 0..len {
                                gp[i] += seg[i];
                            }
                        });
                        off += len;
                    }
                }
                OpKind::RowSelect(a, row) => {
                    let c = node.value.len();
                    bump(*a, &mut |ga| {
                        for i in 0..c {
                            ga[row * c + i] += g[i];
                        }
                    });
                }
                OpKind::Slice(a, lo, _hi) => {
                    bump(*a, &mut |ga| {
                        for i in 0..g.len() {
                            ga[lo + i] += g[i];
                        }
                    });
                }
                OpKind::ScalarMul(a, c) => {
                    bump(*a, &mut |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * c;
                        }
                    });
                }
                OpKind::Sum(a) => {
                    bump(*a, &mut |ga| {
                        for x in ga.iter_mut() {
                            *x += g[0];
                        }
                    });
                }
                OpKind::Log(a) => {
                    let ta = &self.nodes[a.0].value;
                    bump(*a, &mut |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] / ta.values[i].max(LOG_CLAMP);
                        }
                    });
                }
                OpKind::NllGather(a, target) => {
                    let p = self.nodes[a.0].value.values[*target].max(LOG_CLAMP);
                    bump(*a, &mut |ga| {
                        ga[*target] -= g[0] / p;
                    });
                }
            }
            // The adjoint was taken out to appease the borrow checker; nodes
            // keep their gradients so callers can read any of them.
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(GradTable { grads, shapes })
    }
}

/// Plain softmax with max-subtraction, shared by tape and non-tape callers.
pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Max relative error between analytic gradients and central finite
/// differences, over every coordinate of every input tensor.
///
/// `build` must record a scalar loss from the given leaves; it is re-run per
/// perturbed coordinate, so it has to be deterministic.
pub fn grad_check<F>(build: F, point: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |tensors: &[Tensor]| -> Result<(f64, Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        let v = tape.value(loss).values[0];
        Ok((v, tape, ids, loss))
    };

    let (_, tape, ids, loss) = eval(point)?;
    let table = tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| table.get(id)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        for ci in 0..t.len() {
            let orig = t.values[ci];
            work[ti].values[ci] = orig + eps;
            let (up, ..) = eval(&work)?;
            work[ti].values[ci] = orig - eps;
            let (down, ..) = eval(&work)?;
            work[ti].values[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti].values[ci];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check hit a non-finite value at input {ti} coordinate {ci}"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

//! Operation tape and the differentiable op catalog.
//!
//! Every forward op appends one node. `backward` walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because an op
//! can only reference nodes that already exist.

use std::str::FromStr;

use crate::error::{AutogradError, Result};
use crate::rng::RngStream;
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Negative slope used by every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Op catalog. Axis numbering follows the numpy convention on rank-2 views:
/// `axis = 0` reduces over rows, `axis = 1` over columns.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sigmoid,
    Tanh,
    LeakyRelu { slope: f64 },
    Abs,
    Powf(f64),
    Transpose,
    Reshape { rows: usize, cols: usize },
    Concat { axis: usize },
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    GatherRows(Vec<usize>),
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Softmax { axis: usize, temperature: f64 },
    LayerNorm { eps: f64 },
    SquaredError,
    CrossEntropyLogits(Vec<usize>),
    GaussianKl,
    StraightThrough,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Abs => "abs",
            OpKind::Powf(_) => "powf",
            OpKind::Transpose => "transpose",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::MeanAxis(_) => "mean_axis",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::SquaredError => "squared_error",
            OpKind::CrossEntropyLogits(_) => "cross_entropy",
            OpKind::GaussianKl => "gaussian_kl",
            OpKind::StraightThrough => "straight_through",
        }
    }
}

/// Parses parameter-free kinds (parameterized kinds take their defaults).
impl FromStr for OpKind {
    type Err = AutogradError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "neg" => OpKind::Neg,
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "sigmoid" => OpKind::Sigmoid,
            "tanh" => OpKind::Tanh,
            "leaky_relu" => OpKind::LeakyRelu { slope: LEAKY_SLOPE },
            "abs" => OpKind::Abs,
            "transpose" => OpKind::Transpose,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            "softmax" => OpKind::Softmax {
                axis: 1,
                temperature: 1.0,
            },
            "layer_norm" => OpKind::LayerNorm { eps: 1e-5 },
            "squared_error" => OpKind::SquaredError,
            "gaussian_kl" => OpKind::GaussianKl,
            "straight_through" => OpKind::StraightThrough,
            other => return Err(AutogradError::UnknownOp(other.to_string())),
        })
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Option<(OpKind, Vec<Var>)>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let r = if ar == br || br == 1 {
        ar
    } else if ar == 1 {
        br
    } else {
        return Err(mismatch(op, a, b));
    };
    let c = if ac == bc || bc == 1 {
        ac
    } else if ac == 1 {
        bc
    } else {
        return Err(mismatch(op, a, b));
    };
    Ok((r, c))
}

fn broadcast_binary(a: &Tensor, b: &Tensor, r: usize, c: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() && a.dims2().unwrap() == (r, c) {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::matrix(r, c, data).unwrap();
    }
    let (ar, ac) = a.dims2().unwrap();
    let (br, bc) = b.dims2().unwrap();
    Tensor::from_fn(r, c, |i, j| {
        let x = a.data()[(if ar == 1 { 0 } else { i }) * ac + if ac == 1 { 0 } else { j }];
        let y = b.data()[(if br == 1 { 0 } else { i }) * bc + if bc == 1 { 0 } else { j }];
        f(x, y)
    })
}

/// Sums an `r x c` gradient down to the (broadcast) shape of `target`.
fn reduce_to(grad: &Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        return grad.clone();
    }
    let (r, c) = grad.dims2().unwrap();
    let (tr, tc) = target.dims2().unwrap();
    if (r, c) == (tr, tc) {
        return Tensor::new(target.shape().to_vec(), grad.data().to_vec()).unwrap();
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let tj = if tc == 1 { 0 } else { j };
            out[ti * tc + tj] += grad.data()[i * c + j];
        }
    }
    Tensor::new(target.shape().to_vec(), out).unwrap()
}

fn softmax_forward(x: &Tensor, axis: usize, temperature: f64) -> Tensor {
    let (r, c) = x.dims2().unwrap();
    let mut out = vec![0.0; r * c];
    let (outer, inner, stride_o, stride_i) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
    for o in 0..outer {
        let idx = |k: usize| o * stride_o + k * stride_i;
        let mut mx = f64::NEG_INFINITY;
        for k in 0..inner {
            mx = mx.max(x.data()[idx(k)] / temperature);
        }
        let mut s = 0.0;
        for k in 0..inner {
            let e = (x.data()[idx(k)] / temperature - mx).exp();
            out[idx(k)] = e;
            s += e;
        }
        for k in 0..inner {
            out[idx(k)] /= s;
        }
    }
    Tensor::matrix(r, c, out).unwrap()
}

fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<(OpKind, Vec<Var>)>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameter or input under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, true)
    }

    /// Non-differentiable input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let value = self.forward(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Some((kind, inputs.to_vec())), requires_grad))
    }

    fn arity(kind: &OpKind, inputs: &[Var], expected: usize) -> Result<()> {
        if inputs.len() != expected {
            return Err(AutogradError::Arity {
                op: kind.name(),
                expected,
                got: inputs.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<Tensor> {
        use OpKind::*;
        let name = kind.name();
        match kind {
            Concat { .. } => {
                if inputs.is_empty() {
                    return Err(AutogradError::Arity {
                        op: name,
                        expected: 1,
                        got: 0,
                    });
                }
            }
            MatMul | Add | Sub | Mul | SquaredError | GaussianKl => Self::arity(kind, inputs, 2)?,
            _ => Self::arity(kind, inputs, 1)?,
        }
        let x = self.value(inputs[0]);
        let unary = |f: &dyn Fn(f64) -> f64| Ok(x.map(f));
        match kind {
            MatMul => {
                let b = self.value(inputs[1]);
                x.matmul(b).map_err(|_| mismatch(name, x, b))
            }
            Add | Sub | Mul => {
                let b = self.value(inputs[1]);
                let (r, c) = broadcast_dims(name, x, b)?;
                Ok(match kind {
                    Add => broadcast_binary(x, b, r, c, |p, q| p + q),
                    Sub => broadcast_binary(x, b, r, c, |p, q| p - q),
                    _ => broadcast_binary(x, b, r, c, |p, q| p * q),
                })
            }
            Neg => unary(&|v| -v),
            Scale(s) => unary(&|v| v * s),
            AddScalar(s) => unary(&|v| v + s),
            Exp => unary(&f64::exp),
            Log => unary(&f64::ln),
            Sigmoid => unary(&sigmoid),
            Tanh => unary(&f64::tanh),
            LeakyRelu { slope } => unary(&|v| if v > 0.0 { v } else { slope * v }),
            Abs => unary(&f64::abs),
            Powf(p) => unary(&|v| v.powf(*p)),
            Transpose => {
                x.dims2()?;
                Ok(x.transpose())
            }
            Reshape { rows, cols } => {
                if rows * cols != x.numel() || *rows == 0 || *cols == 0 {
                    return Err(AutogradError::InvalidShape {
                        op: name,
                        shape: x.shape().to_vec(),
                        reason: format!("cannot reshape to [{rows}, {cols}]"),
                    });
                }
                Tensor::matrix(*rows, *cols, x.data().to_vec())
            }
            Concat { axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let (r0, c0) = parts[0].dims2()?;
                match axis {
                    0 => {
                        let mut data = Vec::new();
                        let mut rows = 0;
                        for p in &parts {
                            let (r, c) = p.dims2()?;
                            if c != c0 {
                                return Err(mismatch(name, parts[0], p));
                            }
                            rows += r;
                            data.extend_from_slice(p.data());
                        }
                        Tensor::matrix(rows, c0, data)
                    }
                    1 => {
                        let mut cols = 0;
                        for p in &parts {
                            let (r, c) = p.dims2()?;
                            if r != r0 {
                                return Err(mismatch(name, parts[0], p));
                            }
                            cols += c;
                        }
                        let mut data = Vec::with_capacity(r0 * cols);
                        for i in 0..r0 {
                            for p in &parts {
                                data.extend_from_slice(p.row_slice(i));
                            }
                        }
                        Tensor::matrix(r0, cols, data)
                    }
                    _ => Err(bad_axis(name, *axis)),
                }
            }
            SliceRows { start, end } => {
                let (r, c) = x.dims2()?;
                if start >= end || *end > r {
                    return Err(AutogradError::InvalidArgument {
                        op: name,
                        reason: format!("range {start}..{end} outside 0..{r}"),
                    });
                }
                Tensor::matrix(end - start, c, x.data()[start * c..end * c].to_vec())
            }
            SliceCols { start, end } => {
                let (r, c) = x.dims2()?;
                if start >= end || *end > c {
                    return Err(AutogradError::InvalidArgument {
                        op: name,
                        reason: format!("range {start}..{end} outside 0..{c}"),
                    });
                }
                Ok(Tensor::from_fn(r, end - start, |i, j| x.get(i, start + j)))
            }
            GatherRows(idx) => {
                let (r, c) = x.dims2()?;
                if idx.is_empty() || idx.iter().any(|&i| i >= r) {
                    return Err(AutogradError::InvalidArgument {
                        op: name,
                        reason: format!("row indices {idx:?} invalid for {r} rows"),
                    });
                }
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(x.row_slice(i));
                }
                Tensor::matrix(idx.len(), c, data)
            }
            Sum => Ok(Tensor::scalar(x.sum())),
            Mean => Ok(Tensor::scalar(x.mean())),
            SumAxis(axis) | MeanAxis(axis) => {
                let (r, c) = x.dims2()?;
                let mean = matches!(kind, MeanAxis(_));
                match axis {
                    0 => {
                        let mut out = vec![0.0; c];
                        for i in 0..r {
                            for (o, v) in out.iter_mut().zip(x.row_slice(i)) {
                                *o += v;
                            }
                        }
                        if mean {
                            out.iter_mut().for_each(|o| *o /= r as f64);
                        }
                        Tensor::matrix(1, c, out)
                    }
                    1 => {
                        let out = (0..r)
                            .map(|i| {
                                let s: f64 = x.row_slice(i).iter().sum();
                                if mean {
                                    s / c as f64
                                } else {
                                    s
                                }
                            })
                            .collect();
                        Tensor::matrix(r, 1, out)
                    }
                    _ => Err(bad_axis(name, *axis)),
                }
            }
            Softmax { axis, temperature } => {
                x.dims2()?;
                if *axis > 1 {
                    return Err(bad_axis(name, *axis));
                }
                if !(*temperature > 0.0) {
                    return Err(AutogradError::InvalidArgument {
                        op: name,
                        reason: format!("temperature must be > 0, got {temperature}"),
                    });
                }
                Ok(softmax_forward(x, *axis, *temperature))
            }
            LayerNorm { eps } => {
                let (r, c) = x.dims2()?;
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = x.row_slice(i);
                    let (m, s) = layer_norm_stats(row, *eps);
                    out.extend(row.iter().map(|v| (v - m) / s));
                }
                Tensor::matrix(r, c, out)
            }
            SquaredError => {
                let b = self.value(inputs[1]);
                if x.shape() != b.shape() {
                    return Err(mismatch(name, x, b));
                }
                Ok(Tensor::scalar(
                    x.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum(),
                ))
            }
            CrossEntropyLogits(labels) => {
                let (r, c) = x.dims2()?;
                if labels.len() != r || labels.iter().any(|&l| l >= c) {
                    return Err(AutogradError::InvalidArgument {
                        op: name,
                        reason: format!("{} labels for {r}x{c} logits", labels.len()),
                    });
                }
                let total: f64 = (0..r)
                    .map(|i| {
                        let row = x.row_slice(i);
                        log_sum_exp(row) - row[labels[i]]
                    })
                    .sum();
                Ok(Tensor::scalar(total / r as f64))
            }
            GaussianKl => {
                let lv = self.value(inputs[1]);
                if x.shape() != lv.shape() {
                    return Err(mismatch(name, x, lv));
                }
                let (r, _) = x.dims2()?;
                let total: f64 = x
                    .data()
                    .iter()
                    .zip(lv.data())
                    .map(|(&m, &l)| 0.5 * (m * m + l.exp() - 1.0 - l))
                    .sum();
                Ok(Tensor::scalar(total / r as f64))
            }
            StraightThrough => {
                let (r, c) = x.dims2()?;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + argmax(x.row_slice(i))] = 1.0;
                }
                Tensor::matrix(r, c, out)
            }
        }
    }

    /// Reverse pass from a scalar `loss`. Replaces any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(AutogradError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).unwrap());
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some((kind, inputs)) = &node.op {
                if node.requires_grad {
                    let contributions = self.local_grads(kind, inputs, &node.value, &g);
                    for (input, dg) in inputs.iter().zip(contributions) {
                        let Some(dg) = dg else { continue };
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        match &mut grads[input.0] {
                            Some(acc) => {
                                for (a, d) in acc.data_mut().iter_mut().zip(dg.data()) {
                                    *a += d;
                                }
                            }
                            slot @ None => *slot = Some(dg),
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass; `None` if `v` was unreachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with unreachable nodes mapped to zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => {
                let val = self.value(v);
                Tensor::new(val.shape().to_vec(), vec![0.0; val.numel()]).unwrap()
            }
        }
    }

    fn local_grads(&self, kind: &OpKind, inputs: &[Var], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        use OpKind::*;
        let x = self.value(inputs[0]);
        let elementwise = |f: &dyn Fn(f64, f64, f64) -> f64| {
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
        };
        match kind {
            MatMul => {
                let b = self.value(inputs[1]);
                let (m, k) = x.dims2().unwrap();
                let (_, n) = b.dims2().unwrap();
                // dA = G B^T, dB = A^T G
                let mut da = vec![0.0; m * k];
                let bt = b.transpose();
                matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                let at = x.transpose();
                matmul_into(at.data(), g.data(), &mut db, k, m, n);
                vec![
                    Some(Tensor::new(x.shape().to_vec(), da).unwrap()),
                    Some(Tensor::new(b.shape().to_vec(), db).unwrap()),
                ]
            }
            Add => {
                let b = self.value(inputs[1]);
                vec![Some(reduce_to(g, x)), Some(reduce_to(g, b))]
            }
            Sub => {
                let b = self.value(inputs[1]);
                vec![Some(reduce_to(g, x)), Some(reduce_to(&g.map(|v| -v), b))]
            }
            Mul => {
                let b = self.value(inputs[1]);
                let (r, c) = g.dims2().unwrap();
                let gb = broadcast_binary(g, b, r, c, |p, q| p * q);
                let ga = broadcast_binary(g, x, r, c, |p, q| p * q);
                vec![Some(reduce_to(&gb, x)), Some(reduce_to(&ga, b))]
            }
            Neg => elementwise(&|_, _, gv| -gv),
            Scale(s) => elementwise(&|_, _, gv| gv * s),
            AddScalar(_) => elementwise(&|_, _, gv| gv),
            Exp => elementwise(&|_, y, gv| gv * y),
            Log => elementwise(&|xv, _, gv| gv / xv),
            Sigmoid => elementwise(&|_, y, gv| gv * y * (1.0 - y)),
            Tanh => elementwise(&|_, y, gv| gv * (1.0 - y * y)),
            LeakyRelu { slope } => elementwise(&|xv, _, gv| if xv > 0.0 { gv } else { gv * slope }),
            Abs => elementwise(&|xv, _, gv| gv * sign(xv)),
            Powf(p) => elementwise(&|xv, _, gv| gv * p * xv.powf(p - 1.0)),
            Transpose => vec![Some(Tensor::new(x.shape().to_vec(), g.transpose().into_data()).unwrap())],
            Reshape { .. } => vec![Some(Tensor::new(x.shape().to_vec(), g.data().to_vec()).unwrap())],
            Concat { axis } => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|&v| {
                        let part = self.value(v);
                        let (r, c) = part.dims2().unwrap();
                        let piece = if *axis == 0 {
                            let cols = g.cols();
                            g.data()[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                d.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                            }
                            d
                        };
                        offset += if *axis == 0 { r } else { c };
                        Some(Tensor::new(part.shape().to_vec(), piece).unwrap())
                    })
                    .collect()
            }
            SliceRows { start, .. } => {
                let mut d = vec![0.0; x.numel()];
                let c = x.cols();
                d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
            }
            SliceCols { start, end } => {
                let (r, c) = x.dims2().unwrap();
                let w = end - start;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
            }
            GatherRows(idx) => {
                let c = x.cols();
                let mut d = vec![0.0; x.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data()[k * c + j];
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
            }
            Sum => {
                let gv = g.item();
                vec![Some(x.map(|_| gv))]
            }
            Mean => {
                let gv = g.item() / x.numel() as f64;
                vec![Some(x.map(|_| gv))]
            }
            SumAxis(axis) | MeanAxis(axis) => {
                let (r, c) = x.dims2().unwrap();
                let denom = match (kind, axis) {
                    (MeanAxis(_), 0) => r as f64,
                    (MeanAxis(_), _) => c as f64,
                    _ => 1.0,
                };
                let d = Tensor::from_fn(r, c, |i, j| {
                    if *axis == 0 {
                        g.data()[j] / denom
                    } else {
                        g.data()[i] / denom
                    }
                });
                vec![Some(Tensor::new(x.shape().to_vec(), d.into_data()).unwrap())]
            }
            Softmax { axis, temperature } => {
                let (r, c) = out.dims2().unwrap();
                let mut d = vec![0.0; r * c];
                let (outer, inner, so, si) = if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                for o in 0..outer {
                    let idx = |k: usize| o * so + k * si;
                    let dot: f64 = (0..inner).map(|k| g.data()[idx(k)] * out.data()[idx(k)]).sum();
                    for k in 0..inner {
                        d[idx(k)] = out.data()[idx(k)] * (g.data()[idx(k)] - dot) / temperature;
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
            }
            LayerNorm { eps } => {
                let (r, c) = x.dims2().unwrap();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (_, s) = layer_norm_stats(x.row_slice(i), *eps);
                    let y = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    d.extend(gr.iter().zip(y).map(|(gv, yv)| (gv - mg - yv * mgy) / s));
                }
                vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
            }
            SquaredError => {
                let b = self.value(inputs[1]);
                let gv = g.item();
                let da: Vec<f64> = x.data().iter().zip(b.data()).map(|(p, q)| 2.0 * (p - q) * gv).collect();
                let db = da.iter().map(|v| -v).collect();
                vec![
                    Some(Tensor::new(x.shape().to_vec(), da).unwrap()),
                    Some(Tensor::new(b.shape().to_vec(), db).unwrap()),
                ]
            }
            CrossEntropyLogits(labels) => {
                let (r, c) = x.dims2().unwrap();
                let gv = g.item() / r as f64;
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = x.row_slice(i);
                    let lse = log_sum_exp(row);
                    for (j, v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        d.push(gv * (p - if j == labels[i] { 1.0 } else { 0.0 }));
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
            }
            GaussianKl => {
                let lv = self.value(inputs[1]);
                let r = x.rows() as f64;
                let gv = g.item() / r;
                vec![
                    Some(x.map(|m| m * gv)),
                    Some(lv.map(|l| 0.5 * (l.exp() - 1.0) * gv)),
                ]
            }
            StraightThrough => vec![Some(g.clone())],
        }
    }

    // Convenience wrappers. These never fail on well-typed model code, so the
    // shape-checked `apply` result is surfaced as `Result` only where shapes
    // come from the caller.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.apply(OpKind::Neg, &[a]).unwrap()
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.apply(OpKind::Scale(s), &[a]).unwrap()
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.apply(OpKind::AddScalar(s), &[a]).unwrap()
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.apply(OpKind::Exp, &[a]).unwrap()
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.apply(OpKind::Log, &[a]).unwrap()
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.apply(OpKind::Sigmoid, &[a]).unwrap()
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.apply(OpKind::Tanh, &[a]).unwrap()
    }
    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.apply(OpKind::LeakyRelu { slope: LEAKY_SLOPE }, &[a]).unwrap()
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.apply(OpKind::Abs, &[a]).unwrap()
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.apply(OpKind::Powf(p), &[a]).unwrap()
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.apply(OpKind::Reshape { rows, cols }, &[a])
    }
    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        self.reshape(a, 1, n).unwrap()
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceRows { start, end }, &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceCols { start, end }, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.apply(OpKind::GatherRows(idx.to_vec()), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Var {
        self.apply(OpKind::Sum, &[a]).unwrap()
    }
    pub fn mean(&mut self, a: Var) -> Var {
        self.apply(OpKind::Mean, &[a]).unwrap()
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::SumAxis(axis), &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::MeanAxis(axis), &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        self.apply(OpKind::Softmax { axis, temperature }, &[a])
    }
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::LayerNorm { eps: 1e-5 }, &[a])
    }
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::SquaredError, &[a, b])
    }
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(OpKind::CrossEntropyLogits(labels.to_vec()), &[logits])
    }
    /// `0.5 * sum(mu^2 + exp(lv) - 1 - lv)` over columns, averaged over rows.
    pub fn gaussian_kl(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        self.apply(OpKind::GaussianKl, &[mu, log_var])
    }
    pub fn straight_through(&mut self, soft: Var) -> Result<Var> {
        self.apply(OpKind::StraightThrough, &[soft])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    /// Inverted dropout: identity when `!training` or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut RngStream, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutogradError::InvalidArgument {
                op: "dropout",
                reason: format!("p must be in [0, 1), got {p}"),
            });
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let shape = self.shape(a).to_vec();
        let numel: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..numel).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect();
        let m = self.constant(Tensor::new(shape, mask).unwrap());
        self.mul(a, m)
    }
}

fn bad_axis(op: &'static str, axis: usize) -> AutogradError {
    AutogradError::InvalidArgument {
        op,
        reason: format!("axis must be 0 or 1, got {axis}"),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(3));
        let x = t.leaf(m(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(1, 3));
        let y = t.softmax(x, 1, 1.0).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn leaky_relu_slope() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(-1.0));
        let y = t.leaky_relu(x);
        assert!((t.value(y).item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_reports_extents() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(2, 3));
        match t.matmul(a, b) {
            Err(AutogradError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(t.add(a, b).is_ok());
        let c = t.leaf(Tensor::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(AutogradError::ShapeMismatch { .. })));
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("conv3d".parse::<OpKind>(), Err(AutogradError::UnknownOp(_))));
        assert_eq!("tanh".parse::<OpKind>().unwrap(), OpKind::Tanh);
    }

    #[test]
    fn sum_gives_ones_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 2, &[1., -2., 3., 0.5]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(AutogradError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones(1, 2));
        let unused = t.leaf(Tensor::ones(2, 2));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.grad(unused).is_none());
        assert_eq!(t.grad_or_zeros(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn straight_through_is_one_hot_with_identity_grad() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 3, &[0.2, 0.5, 0.3, 0.4, 0.4, 0.2]));
        let h = t.straight_through(x).unwrap();
        assert_eq!(t.value(h).data(), &[0., 1., 0., 1., 0., 0.]);
        let w = t.constant(m(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let p = t.mul(h, w).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut t = Tape::new();
        let mut rng = RngStream::new(1, "d");
        let x = t.leaf(Tensor::ones(4, 4));
        let y = t.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(x, y);
        let z = t.dropout(x, 0.5, &mut rng, true).unwrap();
        assert!(t.value(z).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}

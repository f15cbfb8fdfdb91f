//! Append-only computation graph with eager forward evaluation and a
//! reverse-mode gradient pass.
//!
//! Nodes are identified by insertion index, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.
//! Every operation validates shapes, checks its output for non-finite values
//! and re-running the same construction yields bit-identical results.

use std::cell::Cell;

use super::{
    layer_norm_stats_row, matmul_acc, softmax_row, stabilizer_sign, Result, Tensor, TensorError,
    STABILIZER_BAND,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax { x: NodeId, axis: usize },
    SumAxis { x: NodeId, axis: Option<usize> },
    Mean(NodeId),
    BroadcastRows { x: NodeId },
    BroadcastCols { x: NodeId },
    BroadcastScalar { x: NodeId },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Scale { x: NodeId, factor: f64 },
    RecipEps { x: NodeId },
    Sign(NodeId),
    Sqrt(NodeId),
    Maximum(NodeId, NodeId),
    LayerNormStats { x: NodeId, epsilon: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation selector for the generic [`Graph::op_forward`] entry point.
/// The named builder methods are the ergonomic API; this enum exists so the
/// full op set is enumerable (property tests iterate over it).
#[derive(Debug, Clone)]
pub enum OpSpec {
    Add,
    Mul,
    Matmul,
    Transpose,
    Exp,
    Log,
    Softmax { axis: usize },
    SumAxis { axis: Option<usize> },
    Mean,
    BroadcastRows { rows: usize },
    BroadcastCols { cols: usize },
    BroadcastScalar { shape: Vec<usize> },
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    Scale { factor: f64 },
    RecipEps { epsilon: f64 },
    Sign,
    Sqrt,
    Maximum,
    LayerNormStats { epsilon: f64 },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    live_bytes: usize,
    peak_bytes: Cell<usize>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Peak bytes held in node values plus (transiently) gradient adjoints.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes.get()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Insert an input tensor. Leaves have no parents; whether a leaf is
    /// differentiated is decided by the `wrt` list passed to [`Graph::gradient`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf)
    }

    /// Alias for [`Graph::leaf`], for inputs that are morally constants.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> NodeId {
        self.live_bytes += value.byte_size();
        if self.live_bytes > self.peak_bytes.get() {
            self.peak_bytes.set(self.live_bytes);
        }
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite { op: op_name, index });
        }
        Ok(self.push_unchecked(value, op))
    }

    fn check_node(&self, op: &'static str, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::BadNode {
                op,
                node: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.check_node(op_name, a)?;
        self.check_node(op_name, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op_name, value, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(
            "maximum",
            a,
            b,
            |x, y| if x >= y { x } else { y },
            Op::Maximum(a, b),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_node("matmul", a)?;
        self.check_node("matmul", b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node("transpose", x)?;
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: t.shape().to_vec(),
                reason: "expected rank 2",
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node("exp", x)?;
        let t = &self.nodes[x.0].value;
        let data: Vec<f64> = t.data().iter().map(|v| v.exp()).collect();
        self.push("exp", Tensor::new(t.shape().to_vec(), data)?, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node("log", x)?;
        let t = &self.nodes[x.0].value;
        for (i, &v) in t.data().iter().enumerate() {
            if v < STABILIZER_BAND {
                return Err(TensorError::Domain {
                    op: "log",
                    index: i,
                    value: v,
                });
            }
        }
        let data: Vec<f64> = t.data().iter().map(|v| v.ln()).collect();
        self.push("log", Tensor::new(t.shape().to_vec(), data)?, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node("sqrt", x)?;
        let t = &self.nodes[x.0].value;
        for (i, &v) in t.data().iter().enumerate() {
            if v < 0.0 {
                return Err(TensorError::Domain {
                    op: "sqrt",
                    index: i,
                    value: v,
                });
            }
        }
        let data: Vec<f64> = t.data().iter().map(|v| v.sqrt()).collect();
        self.push("sqrt", Tensor::new(t.shape().to_vec(), data)?, Op::Sqrt(x))
    }

    pub fn sign(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node("sign", x)?;
        let t = &self.nodes[x.0].value;
        let data: Vec<f64> = t.data().iter().map(|&v| stabilizer_sign(v)).collect();
        self.push("sign", Tensor::new(t.shape().to_vec(), data)?, Op::Sign(x))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.check_node("scale", x)?;
        if !factor.is_finite() {
            return Err(TensorError::Contract {
                op: "scale",
                reason: format!("factor {factor} is not finite"),
            });
        }
        let t = &self.nodes[x.0].value;
        let data: Vec<f64> = t.data().iter().map(|v| v * factor).collect();
        self.push(
            "scale",
            Tensor::new(t.shape().to_vec(), data)?,
            Op::Scale { x, factor },
        )
    }

    /// 1 / (x + epsilon * sign(x)), with sign(0) = +1. With epsilon = 0 any
    /// element inside the stabilizer dead band is a hard error that names the
    /// offending unit.
    pub fn recip_eps(&mut self, x: NodeId, epsilon: f64) -> Result<NodeId> {
        self.check_node("recip_eps", x)?;
        if !(epsilon >= 0.0) {
            return Err(TensorError::Contract {
                op: "recip_eps",
                reason: format!("epsilon {epsilon} must be >= 0"),
            });
        }
        let t = &self.nodes[x.0].value;
        if epsilon == 0.0 {
            for (i, &v) in t.data().iter().enumerate() {
                if v.abs() < STABILIZER_BAND {
                    return Err(TensorError::Singular {
                        op: "recip_eps",
                        index: i,
                        value: v,
                        band: STABILIZER_BAND,
                    });
                }
            }
        }
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| 1.0 / (v + epsilon * stabilizer_sign(v)))
            .collect();
        self.push(
            "recip_eps",
            Tensor::new(t.shape().to_vec(), data)?,
            Op::RecipEps { x },
        )
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows for rank 2;
    /// rank-1 tensors use axis 0).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_node("softmax", x)?;
        let t = &self.nodes[x.0].value;
        let value = match (t.shape().len(), axis) {
            (1, 0) => {
                let mut out = vec![0.0; t.len()];
                softmax_row(t.data(), &mut out);
                Tensor::new(t.shape().to_vec(), out)?
            }
            (2, 1) => {
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    softmax_row(&t.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
                }
                Tensor::new(vec![m, n], out)?
            }
            (2, 0) => {
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let mut out = vec![0.0; m * n];
                let mut col = vec![0.0; m];
                let mut sm = vec![0.0; m];
                for j in 0..n {
                    for i in 0..m {
                        col[i] = t.data()[i * n + j];
                    }
                    softmax_row(&col, &mut sm);
                    for i in 0..m {
                        out[i * n + j] = sm[i];
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "softmax",
                    shape: t.shape().to_vec(),
                    reason: "axis out of range for tensor rank",
                })
            }
        };
        self.push("softmax", value, Op::Softmax { x, axis })
    }

    /// Sum over an axis (removing it); `None` sums everything to a scalar.
    pub fn sum_axis(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.check_node("sum_axis", x)?;
        let t = &self.nodes[x.0].value;
        let value = match axis {
            None => Tensor::scalar(t.data().iter().sum()),
            Some(ax) => match (t.shape().len(), ax) {
                (1, 0) => Tensor::scalar(t.data().iter().sum()),
                (2, 0) => {
                    let (m, n) = (t.shape()[0], t.shape()[1]);
                    let mut out = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            out[j] += t.data()[i * n + j];
                        }
                    }
                    Tensor::vector(out)
                }
                (2, 1) => {
                    let (m, n) = (t.shape()[0], t.shape()[1]);
                    let mut out = vec![0.0; m];
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += t.data()[i * n + j];
                        }
                        out[i] = s;
                    }
                    Tensor::vector(out)
                }
                _ => {
                    return Err(TensorError::InvalidShape {
                        op: "sum_axis",
                        shape: t.shape().to_vec(),
                        reason: "axis out of range for tensor rank",
                    })
                }
            },
        };
        self.push("sum_axis", value, Op::SumAxis { x, axis })
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_node("mean", x)?;
        let t = &self.nodes[x.0].value;
        let n = t.len() as f64;
        let value = Tensor::scalar(t.data().iter().sum::<f64>() * (1.0 / n));
        self.push("mean", value, Op::Mean(x))
    }

    /// Tile a length-n vector into `rows` identical rows: [n] -> [rows, n].
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        self.check_node("broadcast_rows", x)?;
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 1 || rows == 0 {
            return Err(TensorError::InvalidShape {
                op: "broadcast_rows",
                shape: t.shape().to_vec(),
                reason: "expected rank-1 input and rows > 0",
            });
        }
        let n = t.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(t.data());
        }
        self.push(
            "broadcast_rows",
            Tensor::new(vec![rows, n], out)?,
            Op::BroadcastRows { x },
        )
    }

    /// Tile a length-m vector into `cols` identical columns: [m] -> [m, cols].
    pub fn broadcast_cols(&mut self, x: NodeId, cols: usize) -> Result<NodeId> {
        self.check_node("broadcast_cols", x)?;
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 1 || cols == 0 {
            return Err(TensorError::InvalidShape {
                op: "broadcast_cols",
                shape: t.shape().to_vec(),
                reason: "expected rank-1 input and cols > 0",
            });
        }
        let m = t.len();
        let mut out = Vec::with_capacity(m * cols);
        for i in 0..m {
            let v = t.data()[i];
            for _ in 0..cols {
                out.push(v);
            }
        }
        self.push(
            "broadcast_cols",
            Tensor::new(vec![m, cols], out)?,
            Op::BroadcastCols { x },
        )
    }

    /// Fill an arbitrary shape with a scalar node's value.
    pub fn broadcast_scalar(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check_node("broadcast_scalar", x)?;
        let t = &self.nodes[x.0].value;
        if !t.is_scalar() {
            return Err(TensorError::InvalidShape {
                op: "broadcast_scalar",
                shape: t.shape().to_vec(),
                reason: "expected scalar input",
            });
        }
        let count: usize = shape.iter().product();
        if shape.is_empty() || count == 0 {
            return Err(TensorError::InvalidShape {
                op: "broadcast_scalar",
                shape,
                reason: "target shape must be non-empty",
            });
        }
        let value = Tensor::new(shape, vec![t.scalar_value(); count])?;
        self.push("broadcast_scalar", value, Op::BroadcastScalar { x })
    }

    /// Contiguous range along one axis.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check_node("slice", x)?;
        let t = &self.nodes[x.0].value;
        let rank = t.shape().len();
        if axis >= rank || len == 0 || start + len > t.shape()[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: t.shape().to_vec(),
                reason: "slice range out of bounds",
            });
        }
        let value = match (rank, axis) {
            (1, 0) => Tensor::vector(t.data()[start..start + len].to_vec()),
            (2, 0) => {
                let n = t.shape()[1];
                Tensor::new(vec![len, n], t.data()[start * n..(start + len) * n].to_vec())?
            }
            (2, 1) => {
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let mut out = Vec::with_capacity(m * len);
                for i in 0..m {
                    out.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
                }
                Tensor::new(vec![m, len], out)?
            }
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "slice",
                    shape: t.shape().to_vec(),
                    reason: "only rank 1 and 2 supported",
                })
            }
        };
        self.push("slice", value, Op::Slice { x, axis, start, len })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat",
                reason: "no parts".into(),
            });
        }
        for &p in parts {
            self.check_node("concat", p)?;
        }
        let rank = self.nodes[parts[0].0].value.shape().len();
        let value = match (rank, axis) {
            (1, 0) => {
                let mut out = Vec::new();
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    if t.shape().len() != 1 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            left: self.nodes[parts[0].0].value.shape().to_vec(),
                            right: t.shape().to_vec(),
                        });
                    }
                    out.extend_from_slice(t.data());
                }
                Tensor::vector(out)
            }
            (2, 0) => {
                let n = self.nodes[parts[0].0].value.shape()[1];
                let mut out = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    if t.shape().len() != 2 || t.shape()[1] != n {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            left: vec![rows, n],
                            right: t.shape().to_vec(),
                        });
                    }
                    rows += t.shape()[0];
                    out.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, n], out)?
            }
            (2, 1) => {
                let m = self.nodes[parts[0].0].value.shape()[0];
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| {
                        let t = &self.nodes[p.0].value;
                        t.shape()[1]
                    })
                    .collect();
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    if t.shape().len() != 2 || t.shape()[0] != m {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            left: self.nodes[parts[0].0].value.shape().to_vec(),
                            right: t.shape().to_vec(),
                        });
                    }
                }
                let total: usize = widths.iter().sum();
                let mut out = vec![0.0; m * total];
                for i in 0..m {
                    let mut off = 0;
                    for (pi, &p) in parts.iter().enumerate() {
                        let t = &self.nodes[p.0].value;
                        let w = widths[pi];
                        out[i * total + off..i * total + off + w]
                            .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
                        off += w;
                    }
                }
                Tensor::new(vec![m, total], out)?
            }
            _ => {
                return Err(TensorError::Contract {
                    op: "concat",
                    reason: format!("axis {axis} invalid for rank {rank}"),
                })
            }
        };
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Per-row mean and inverse standard deviation: [m, n] -> [m, 2]
    /// (column 0 = mean, column 1 = 1/sqrt(var + epsilon)).
    pub fn layer_norm_stats(&mut self, x: NodeId, epsilon: f64) -> Result<NodeId> {
        self.check_node("layer_norm_stats", x)?;
        if !(epsilon >= 0.0) {
            return Err(TensorError::Contract {
                op: "layer_norm_stats",
                reason: format!("epsilon {epsilon} must be >= 0"),
            });
        }
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm_stats",
                shape: t.shape().to_vec(),
                reason: "expected rank 2",
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m * 2];
        for i in 0..m {
            let (mu, rstd) = layer_norm_stats_row(&t.data()[i * n..(i + 1) * n], epsilon);
            out[i * 2] = mu;
            out[i * 2 + 1] = rstd;
        }
        self.push(
            "layer_norm_stats",
            Tensor::new(vec![m, 2], out)?,
            Op::LayerNormStats { x, epsilon },
        )
    }

    /// Generic dispatcher over the full operation set.
    pub fn op_forward(&mut self, spec: OpSpec, inputs: &[NodeId]) -> Result<NodeId> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(TensorError::Contract {
                    op: "op_forward",
                    reason: format!("expected {n} inputs, got {}", inputs.len()),
                });
            }
            Ok(())
        };
        match spec {
            OpSpec::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpSpec::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpSpec::Matmul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpSpec::Transpose => {
                need(1)?;
                self.transpose(inputs[0])
            }
            OpSpec::Exp => {
                need(1)?;
                self.exp(inputs[0])
            }
            OpSpec::Log => {
                need(1)?;
                self.log(inputs[0])
            }
            OpSpec::Softmax { axis } => {
                need(1)?;
                self.softmax(inputs[0], axis)
            }
            OpSpec::SumAxis { axis } => {
                need(1)?;
                self.sum_axis(inputs[0], axis)
            }
            OpSpec::Mean => {
                need(1)?;
                self.mean(inputs[0])
            }
            OpSpec::BroadcastRows { rows } => {
                need(1)?;
                self.broadcast_rows(inputs[0], rows)
            }
            OpSpec::BroadcastCols { cols } => {
                need(1)?;
                self.broadcast_cols(inputs[0], cols)
            }
            OpSpec::BroadcastScalar { shape } => {
                need(1)?;
                self.broadcast_scalar(inputs[0], shape)
            }
            OpSpec::Slice { axis, start, len } => {
                need(1)?;
                self.slice(inputs[0], axis, start, len)
            }
            OpSpec::Concat { axis } => self.concat(inputs, axis),
            OpSpec::Scale { factor } => {
                need(1)?;
                self.scale(inputs[0], factor)
            }
            OpSpec::RecipEps { epsilon } => {
                need(1)?;
                self.recip_eps(inputs[0], epsilon)
            }
            OpSpec::Sign => {
                need(1)?;
                self.sign(inputs[0])
            }
            OpSpec::Sqrt => {
                need(1)?;
                self.sqrt(inputs[0])
            }
            OpSpec::Maximum => {
                need(2)?;
                self.maximum(inputs[0], inputs[1])
            }
            OpSpec::LayerNormStats { epsilon } => {
                need(1)?;
                self.layer_norm_stats(inputs[0], epsilon)
            }
        }
    }

    fn parents(&self, id: usize, out: &mut Vec<usize>) {
        out.clear();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Maximum(a, b) => {
                out.push(a.0);
                out.push(b.0);
            }
            Op::Transpose(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sign(x)
            | Op::Sqrt(x)
            | Op::Mean(x) => out.push(x.0),
            Op::Softmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::BroadcastRows { x }
            | Op::BroadcastCols { x }
            | Op::BroadcastScalar { x }
            | Op::Slice { x, .. }
            | Op::Scale { x, .. }
            | Op::RecipEps { x, .. }
            | Op::LayerNormStats { x, .. } => out.push(x.0),
            Op::Concat { parts, .. } => out.extend(parts.iter().map(|p| p.0)),
        }
    }

    /// Reverse-mode gradients of a scalar `output` with respect to each node
    /// in `wrt`. Nodes outside the ancestry of `output` get zero gradients.
    pub fn gradient(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        self.check_node("gradient", output)?;
        for &w in wrt {
            self.check_node("gradient", w)?;
        }
        let out_t = &self.nodes[output.0].value;
        if !out_t.is_scalar() {
            return Err(TensorError::NonScalarOutput {
                shape: out_t.shape().to_vec(),
            });
        }

        // Mark ancestors of `output` so the sweep skips unrelated nodes.
        let n = self.nodes.len();
        let mut ancestor = vec![false; n];
        ancestor[output.0] = true;
        let mut scratch = Vec::new();
        for id in (0..=output.0).rev() {
            if !ancestor[id] {
                continue;
            }
            self.parents(id, &mut scratch);
            for &p in &scratch {
                ancestor[p] = true;
            }
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adjoint[output.0] = Some(vec![1.0]);
        let mut adj_bytes = 8usize;
        let bump_peak = |adj_bytes: usize| {
            let total = self.live_bytes + adj_bytes;
            if total > self.peak_bytes.get() {
                self.peak_bytes.set(total);
            }
        };
        bump_peak(adj_bytes);

        macro_rules! acc {
            ($target:expr, $len:expr, $adjref:ident, $body:expr) => {{
                let t: usize = $target;
                if adjoint[t].is_none() {
                    adjoint[t] = Some(vec![0.0; $len]);
                    adj_bytes += $len * 8;
                    bump_peak(adj_bytes);
                }
                let mut taken = adjoint[t].take().unwrap();
                {
                    let $adjref: &mut Vec<f64> = &mut taken;
                    $body
                }
                adjoint[t] = Some(taken);
            }};
        }

        for id in (0..=output.0).rev() {
            if !ancestor[id] || adjoint[id].is_none() {
                continue;
            }
            let g = adjoint[id].clone().unwrap();
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc!(a.0, g.len(), adj, {
                        for (o, &gv) in adj.iter_mut().zip(g.iter()) {
                            *o += gv;
                        }
                    });
                    acc!(b.0, g.len(), adj, {
                        for (o, &gv) in adj.iter_mut().zip(g.iter()) {
                            *o += gv;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    acc!(a.0, g.len(), adj, {
                        for i in 0..g.len() {
                            adj[i] += g[i] * bv[i];
                        }
                    });
                    acc!(b.0, g.len(), adj, {
                        for i in 0..g.len() {
                            adj[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Maximum(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    acc!(a.0, g.len(), adj, {
                        for i in 0..g.len() {
                            if av[i] >= bv[i] {
                                adj[i] += g[i];
                            }
                        }
                    });
                    acc!(b.0, g.len(), adj, {
                        for i in 0..g.len() {
                            if av[i] < bv[i] {
                                adj[i] += g[i];
                            }
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k, nn) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    // dA = g . B^T
                    acc!(a.0, m * k, adj, {
                        for i in 0..m {
                            for kk in 0..k {
                                let mut s = 0.0;
                                let brow = &tb.data()[kk * nn..(kk + 1) * nn];
                                let grow = &g[i * nn..(i + 1) * nn];
                                for j in 0..nn {
                                    s += grow[j] * brow[j];
                                }
                                adj[i * k + kk] += s;
                            }
                        }
                    });
                    // dB = A^T . g
                    acc!(b.0, k * nn, adj, {
                        for kk in 0..k {
                            for i in 0..m {
                                let av = ta.data()[i * k + kk];
                                let grow = &g[i * nn..(i + 1) * nn];
                                let orow = &mut adj[kk * nn..(kk + 1) * nn];
                                for j in 0..nn {
                                    orow[j] += av * grow[j];
                                }
                            }
                        }
                    });
                }
                Op::Transpose(x) => {
                    let t = &self.nodes[x.0].value;
                    let (m, nn) = (t.shape()[0], t.shape()[1]);
                    acc!(x.0, m * nn, adj, {
                        for i in 0..m {
                            for j in 0..nn {
                                adj[i * nn + j] += g[j * m + i];
                            }
                        }
                    });
                }
                Op::Exp(x) => {
                    let out = node.value.data();
                    acc!(x.0, g.len(), adj, {
                        for i in 0..g.len() {
                            adj[i] += g[i] * out[i];
                        }
                    });
                }
                Op::Log(x) => {
                    let xin = self.nodes[x.0].value.data();
                    acc!(x.0, g.len(), adj, {
                        for i in 0..g.len() {
                            adj[i] += g[i] / xin[i];
                        }
                    });
                }
                Op::Sqrt(x) => {
                    let out = node.value.data();
                    acc!(x.0, g.len(), adj, {
                        for i in 0..g.len() {
                            adj[i] += g[i] * 0.5 / out[i];
                        }
                    });
                }
                Op::Sign(x) => {
                    // Piecewise constant.
                    acc!(x.0, g.len(), adj, {
                        let _ = &adj;
                    });
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    acc!(x.0, g.len(), adj, {
                        for i in 0..g.len() {
                            adj[i] += g[i] * f;
                        }
                    });
                }
                Op::RecipEps { x, .. } => {
                    let out = node.value.data();
                    acc!(x.0, g.len(), adj, {
                        for i in 0..g.len() {
                            adj[i] -= g[i] * out[i] * out[i];
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let a = node.value.data();
                    let t = &self.nodes[x.0].value;
                    match (t.shape().len(), *axis) {
                        (1, 0) => {
                            let nn = t.len();
                            acc!(x.0, nn, adj, {
                                let mut dot = 0.0;
                                for i in 0..nn {
                                    dot += g[i] * a[i];
                                }
                                for i in 0..nn {
                                    adj[i] += a[i] * (g[i] - dot);
                                }
                            });
                        }
                        (2, 1) => {
                            let (m, nn) = (t.shape()[0], t.shape()[1]);
                            acc!(x.0, m * nn, adj, {
                                for i in 0..m {
                                    let ar = &a[i * nn..(i + 1) * nn];
                                    let gr = &g[i * nn..(i + 1) * nn];
                                    let mut dot = 0.0;
                                    for j in 0..nn {
                                        dot += gr[j] * ar[j];
                                    }
                                    let or = &mut adj[i * nn..(i + 1) * nn];
                                    for j in 0..nn {
                                        or[j] += ar[j] * (gr[j] - dot);
                                    }
                                }
                            });
                        }
                        (2, 0) => {
                            let (m, nn) = (t.shape()[0], t.shape()[1]);
                            acc!(x.0, m * nn, adj, {
                                for j in 0..nn {
                                    let mut dot = 0.0;
                                    for i in 0..m {
                                        dot += g[i * nn + j] * a[i * nn + j];
                                    }
                                    for i in 0..m {
                                        adj[i * nn + j] += a[i * nn + j] * (g[i * nn + j] - dot);
                                    }
                                }
                            });
                        }
                        _ => unreachable!("validated at construction"),
                    }
                }
                Op::SumAxis { x, axis } => {
                    let t = &self.nodes[x.0].value;
                    match axis {
                        None => {
                            let gv = g[0];
                            acc!(x.0, t.len(), adj, {
                                for o in adj.iter_mut() {
                                    *o += gv;
                                }
                            });
                        }
                        Some(ax) => match (t.shape().len(), *ax) {
                            (1, 0) => {
                                let gv = g[0];
                                acc!(x.0, t.len(), adj, {
                                    for o in adj.iter_mut() {
                                        *o += gv;
                                    }
                                });
                            }
                            (2, 0) => {
                                let (m, nn) = (t.shape()[0], t.shape()[1]);
                                acc!(x.0, m * nn, adj, {
                                    for i in 0..m {
                                        for j in 0..nn {
                                            adj[i * nn + j] += g[j];
                                        }
                                    }
                                });
                            }
                            (2, 1) => {
                                let (m, nn) = (t.shape()[0], t.shape()[1]);
                                acc!(x.0, m * nn, adj, {
                                    for i in 0..m {
                                        for j in 0..nn {
                                            adj[i * nn + j] += g[i];
                                        }
                                    }
                                });
                            }
                            _ => unreachable!("validated at construction"),
                        },
                    }
                }
                Op::Mean(x) => {
                    let t = &self.nodes[x.0].value;
                    let gv = g[0] / t.len() as f64;
                    acc!(x.0, t.len(), adj, {
                        for o in adj.iter_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::BroadcastRows { x } => {
                    let nn = self.nodes[x.0].value.len();
                    let rows = node.value.shape()[0];
                    acc!(x.0, nn, adj, {
                        for i in 0..rows {
                            for j in 0..nn {
                                adj[j] += g[i * nn + j];
                            }
                        }
                    });
                }
                Op::BroadcastCols { x } => {
                    let m = self.nodes[x.0].value.len();
                    let cols = node.value.shape()[1];
                    acc!(x.0, m, adj, {
                        for i in 0..m {
                            for j in 0..cols {
                                adj[i] += g[i * cols + j];
                            }
                        }
                    });
                }
                Op::BroadcastScalar { x } => {
                    acc!(x.0, 1, adj, {
                        let mut s = 0.0;
                        for &gv in &g {
                            s += gv;
                        }
                        adj[0] += s;
                    });
                }
                Op::Slice { x, axis, start, len } => {
                    let t = &self.nodes[x.0].value;
                    match (t.shape().len(), *axis) {
                        (1, 0) => {
                            acc!(x.0, t.len(), adj, {
                                for j in 0..*len {
                                    adj[start + j] += g[j];
                                }
                            });
                        }
                        (2, 0) => {
                            let nn = t.shape()[1];
                            acc!(x.0, t.len(), adj, {
                                for i in 0..*len {
                                    for j in 0..nn {
                                        adj[(start + i) * nn + j] += g[i * nn + j];
                                    }
                                }
                            });
                        }
                        (2, 1) => {
                            let (m, nn) = (t.shape()[0], t.shape()[1]);
                            acc!(x.0, m * nn, adj, {
                                for i in 0..m {
                                    for j in 0..*len {
                                        adj[i * nn + start + j] += g[i * *len + j];
                                    }
                                }
                            });
                        }
                        _ => unreachable!("validated at construction"),
                    }
                }
                Op::Concat { parts, axis } => {
                    let rank = self.nodes[parts[0].0].value.shape().len();
                    match (rank, *axis) {
                        (1, 0) | (2, 0) => {
                            let mut off = 0;
                            for &p in parts {
                                let plen = self.nodes[p.0].value.len();
                                acc!(p.0, plen, adj, {
                                    for j in 0..plen {
                                        adj[j] += g[off + j];
                                    }
                                });
                                off += plen;
                            }
                        }
                        (2, 1) => {
                            let m = self.nodes[parts[0].0].value.shape()[0];
                            let total = node.value.shape()[1];
                            let mut off = 0;
                            for &p in parts {
                                let w = self.nodes[p.0].value.shape()[1];
                                acc!(p.0, m * w, adj, {
                                    for i in 0..m {
                                        for j in 0..w {
                                            adj[i * w + j] += g[i * total + off + j];
                                        }
                                    }
                                });
                                off += w;
                            }
                        }
                        _ => unreachable!("validated at construction"),
                    }
                }
                Op::LayerNormStats { x, epsilon } => {
                    let t = &self.nodes[x.0].value;
                    let (m, nn) = (t.shape()[0], t.shape()[1]);
                    let stats = node.value.data();
                    let eps = *epsilon;
                    acc!(x.0, m * nn, adj, {
                        for i in 0..m {
                            let mu = stats[i * 2];
                            let rstd = stats[i * 2 + 1];
                            let g_mu = g[i * 2];
                            let g_r = g[i * 2 + 1];
                            let _ = eps;
                            let r3 = rstd * rstd * rstd;
                            for j in 0..nn {
                                let xv = t.data()[i * nn + j];
                                adj[i * nn + j] +=
                                    g_mu / nn as f64 - g_r * r3 * (xv - mu) / nn as f64;
                            }
                        }
                    });
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let shape = self.nodes[w.0].value.shape().to_vec();
            let grad = match &adjoint[w.0] {
                Some(v) if ancestor[w.0] => Tensor::new(shape, v.clone())?,
                _ => Tensor::zeros(shape),
            };
            if let Some(index) = grad.first_non_finite() {
                return Err(TensorError::NonFinite {
                    op: "gradient",
                    index,
                });
            }
            out.push(grad);
        }
        Ok(out)
    }
}

//! Reverse-mode automatic differentiation on a flat tape of array ops.
//!
//! A `Graph` owns every intermediate value. Ops append nodes; `backward`
//! walks the tape in reverse and accumulates parameter gradients into the
//! `ParamStore` the leaves were bound from. Nodes are created in forward
//! order, so the tape order is already topological.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::array::{Array, Scalar};
use crate::nn::params::ParamStore;

/// Additive logit value for masked positions; exp(x - max) underflows to
/// exactly zero for any realistic unmasked max.
pub const MASK_FILL_VALUE: Scalar = -1e30;

const LAYER_NORM_EPS: Scalar = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, Scalar),
    Matmul(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    PairConcat(NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
    MaskedFill {
        x: NodeId,
        mask: Vec<bool>,
    },
    RowGather {
        x: NodeId,
        cols: Vec<usize>,
    },
    SumAll(NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound_params: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf: participates in forward only.
    pub fn input(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Trainable leaf bound to a named parameter. Binding the same name
    /// twice returns the original node, so each parameter has exactly one
    /// leaf per graph and gradient accumulation happens on the tape.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound_params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {}", name)))?
            .clone();
        let id = self.push(value, Op::Param(name.to_string()), true);
        self.bound_params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Broadcasts a length-n bias over the rows of an (m, n) matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vx.ndim() != 2 || vb.len() != vx.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = vx.cols();
        let bias = vb.data().to_vec();
        let mut out = vx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[i % n];
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Array::from_vec(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, c: Scalar) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, c), needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), needs))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(out, Op::Tanh(x), needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.ndim() != 2 || vx.cols() == 0 {
            return Err(Error::Shape {
                op: "softmax_rows",
                lhs: vx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = softmax_rows_value(vx);
        let needs = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), needs))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.ndim() != 2 || vx.cols() == 0 {
            return Err(Error::Shape {
                op: "log_softmax_rows",
                lhs: vx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (vx.rows(), vx.cols());
        let mut out = vx.clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<Scalar>().ln() + max;
            for v in row.iter_mut() {
                *v -= log_sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::LogSoftmaxRows(x), needs))
    }

    /// Per-row normalization with learned gain and bias vectors.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        if vx.ndim() != 2 || vg.len() != vx.cols() || vb.len() != vx.cols() {
            return Err(Error::Shape {
                op: "layer_norm_rows",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let (m, n) = (vx.rows(), vx.cols());
        let mut out = Array::zeros(&[m, n]);
        for i in 0..m {
            let row = vx.row(i);
            let (mean, inv_std) = row_norm_stats(row);
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_std;
                out.set(i, j, xhat * vg.data()[j] + vb.data()[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNormRows { x, gain, bias }, needs))
    }

    /// 2-D convolution with 3x3-style same padding (stride 1). Input is
    /// (c_in, h, w) or batched (b, c_in, h, w); weights
    /// (c_out, c_in, kh, kw); bias (c_out).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let channel_axis = match vx.ndim() {
            3 => 0,
            4 => 1,
            _ => {
                return Err(Error::Shape {
                    op: "conv2d",
                    lhs: vx.shape().to_vec(),
                    rhs: vw.shape().to_vec(),
                })
            }
        };
        if vw.ndim() != 4 || vx.shape()[channel_axis] != vw.shape()[1] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        if vb.len() != vw.shape()[0] {
            return Err(Error::Shape {
                op: "conv2d bias",
                lhs: vb.shape().to_vec(),
                rhs: vec![vw.shape()[0]],
            });
        }
        let out = conv2d_forward(vx, vw, vb)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b }, needs))
    }

    /// 2x2 max pooling with stride 2, floor semantics on odd extents.
    /// Accepts (c, h, w) or batched (b, c, h, w) inputs.
    pub fn max_pool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (batch, c, h, w) = match vx.ndim() {
            3 => (1, vx.shape()[0], vx.shape()[1], vx.shape()[2]),
            4 => (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]),
            _ => {
                return Err(Error::Shape {
                    op: "max_pool2d",
                    lhs: vx.shape().to_vec(),
                    rhs: vec![],
                })
            }
        };
        let (oh, ow) = (h / 2, w / 2);
        let out_shape: Vec<usize> = if vx.ndim() == 3 {
            vec![c, oh, ow]
        } else {
            vec![batch, c, oh, ow]
        };
        let mut out = Array::zeros(&out_shape);
        let mut argmax = vec![0usize; batch * c * oh * ow];
        for image in 0..batch * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = Scalar::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = image * h * w + (oy * 2 + dy) * w + (ox * 2 + dx);
                            if vx.data()[idx] > best {
                                best = vx.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = image * oh * ow + oy * ow + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, needs))
    }

    /// Row lookup into an embedding table: (|v|, d) gathered at `ids`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if vt.ndim() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: vt.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (v, d) = (vt.rows(), vt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidInput(format!(
                "embedding id {} out of table size {}",
                bad, v
            )));
        }
        let mut out = Array::zeros(&[ids.len(), d]);
        for (t, &id) in ids.iter().enumerate() {
            out.data_mut()[t * d..(t + 1) * d].copy_from_slice(vt.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenation of 2-D arrays along rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::InvalidInput("concat needs parts and axis 0|1".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[1 - axis] != first[1 - axis] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let out = match axis {
            0 => {
                let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
                let cols = first[1];
                let mut data = Vec::with_capacity(rows * cols);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Array::from_vec(&[rows, cols], data)?
            }
            _ => {
                let rows = first[0];
                let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut out = Array::zeros(&[rows, cols]);
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let pc = vp.cols();
                    for r in 0..rows {
                        for c in 0..pc {
                            out.set(r, offset + c, vp.at(r, c));
                        }
                    }
                    offset += pc;
                }
                out
            }
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// All ordered row pairs of an (n, d) matrix: row i*n+j of the output
    /// is [p_i ; p_j], shape (n*n, 2d).
    pub fn pair_concat(&mut self, p: NodeId) -> Result<NodeId> {
        let vp = self.value(p);
        if vp.ndim() != 2 {
            return Err(Error::Shape {
                op: "pair_concat",
                lhs: vp.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, d) = (vp.rows(), vp.cols());
        let mut out = Array::zeros(&[n * n, 2 * d]);
        for i in 0..n {
            for j in 0..n {
                let r = i * n + j;
                out.data_mut()[r * 2 * d..r * 2 * d + d].copy_from_slice(vp.row(i));
                out.data_mut()[r * 2 * d + d..(r + 1) * 2 * d].copy_from_slice(vp.row(j));
            }
        }
        let needs = self.needs(p);
        Ok(self.push(out, Op::PairConcat(p), needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.ndim() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: vx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = vx.transposed();
        let needs = self.needs(x);
        Ok(self.push(out, Op::Transpose(x), needs))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool], value: Scalar) -> Result<NodeId> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: vx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut out = vx.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *v = value;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    /// Picks x[i, cols[i]] for each row, producing a length-m vector.
    pub fn row_gather(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.ndim() != 2 || cols.len() != vx.rows() {
            return Err(Error::Shape {
                op: "row_gather",
                lhs: vx.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= vx.cols()) {
            return Err(Error::InvalidInput(format!(
                "row_gather column {} out of {}",
                bad,
                vx.cols()
            )));
        }
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| vx.at(i, c))
            .collect();
        let out = Array::from_vec(&[cols.len()], data)?;
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::RowGather {
                x,
                cols: cols.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: Scalar = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Array::scalar(total), Op::SumAll(x), needs)
    }

    /// Rows start..start+count of a 2-D array.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.ndim() != 2 || start + count > vx.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vx.shape().to_vec(),
                rhs: vec![start, count],
            });
        }
        let n = vx.cols();
        let data = vx.data()[start * n..(start + count) * n].to_vec();
        let out = Array::from_vec(&[count, n], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, needs))
    }

    /// Reverse pass from a scalar loss node. Parameter gradients are
    /// accumulated (added) into the store's gradient slots.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        if !loss_value.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !dy.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at node {}", idx)));
            }
            let acc = |id: NodeId, g: Array, grads: &mut Vec<Option<Array>>| {
                if !self.nodes[id.0].needs_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(name) => store.accumulate_grad(name, &dy)?,
                Op::Add(a, b) => {
                    acc(*a, dy.clone(), &mut grads);
                    acc(*b, dy, &mut grads);
                }
                Op::AddBias(x, b) => {
                    let n = self.value(*b).len();
                    let mut db = Array::zeros(self.value(*b).shape());
                    for (i, v) in dy.data().iter().enumerate() {
                        db.data_mut()[i % n] += v;
                    }
                    acc(*x, dy, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Mul(a, b) => {
                    let da = elementwise(&dy, self.value(*b), |g, v| g * v);
                    let db = elementwise(&dy, self.value(*a), |g, v| g * v);
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Scale(x, c) => {
                    acc(*x, dy.map(|g| g * c), &mut grads);
                }
                Op::Matmul(a, b) => {
                    let da = dy.matmul(&self.value(*b).transposed())?;
                    let db = self.value(*a).transposed().matmul(&dy)?;
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[idx].value;
                    let dx = elementwise(&dy, y, |g, t| g * (1.0 - t * t));
                    acc(*x, dx, &mut grads);
                }
                Op::Relu(x) => {
                    let dx = elementwise(&dy, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                    acc(*x, dx, &mut grads);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = Array::zeros(&[m, n]);
                    for i in 0..m {
                        let dot: Scalar = (0..n).map(|j| dy.at(i, j) * y.at(i, j)).sum();
                        for j in 0..n {
                            dx.set(i, j, y.at(i, j) * (dy.at(i, j) - dot));
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = Array::zeros(&[m, n]);
                    for i in 0..m {
                        let row_sum: Scalar = (0..n).map(|j| dy.at(i, j)).sum();
                        for j in 0..n {
                            dx.set(i, j, dy.at(i, j) - y.at(i, j).exp() * row_sum);
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let vx = self.value(*x);
                    let vg = self.value(*gain);
                    let (m, n) = (vx.rows(), vx.cols());
                    let mut dx = Array::zeros(&[m, n]);
                    let mut dg = Array::zeros(self.value(*gain).shape());
                    let mut db = Array::zeros(self.value(*bias).shape());
                    for i in 0..m {
                        let row = vx.row(i);
                        let (mean, inv_std) = row_norm_stats(row);
                        let xhat: Vec<Scalar> =
                            row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let d = dy.at(i, j);
                            dg.data_mut()[j] += d * xhat[j];
                            db.data_mut()[j] += d;
                            let dxh = d * vg.data()[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[j];
                        }
                        mean_dxhat /= n as Scalar;
                        mean_dxhat_xhat /= n as Scalar;
                        for j in 0..n {
                            let dxh = dy.at(i, j) * vg.data()[j];
                            dx.set(
                                i,
                                j,
                                (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv_std,
                            );
                        }
                    }
                    acc(*x, dx, &mut grads);
                    acc(*gain, dg, &mut grads);
                    acc(*bias, db, &mut grads);
                }
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), &dy)?;
                    acc(*x, dx, &mut grads);
                    acc(*w, dw, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::MaxPool2d { x, argmax } => {
                    let mut dx = Array::zeros(self.value(*x).shape());
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src] += dy.data()[o];
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Embedding { table, ids } => {
                    let vt = self.value(*table);
                    let d = vt.cols();
                    let mut dt = Array::zeros(vt.shape());
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt.data_mut()[id * d + j] += dy.at(t, j);
                        }
                    }
                    acc(*table, dt, &mut grads);
                }
                Op::Concat { parts, axis } => match axis {
                    0 => {
                        let mut row = 0;
                        for &p in parts {
                            let vp = self.value(p);
                            let (r, c) = (vp.rows(), vp.cols());
                            let data = dy.data()[row * c..(row + r) * c].to_vec();
                            acc(p, Array::from_vec(&[r, c], data)?, &mut grads);
                            row += r;
                        }
                    }
                    _ => {
                        let mut offset = 0;
                        for &p in parts {
                            let vp = self.value(p);
                            let (r, c) = (vp.rows(), vp.cols());
                            let mut dp = Array::zeros(&[r, c]);
                            for i in 0..r {
                                for j in 0..c {
                                    dp.set(i, j, dy.at(i, offset + j));
                                }
                            }
                            acc(p, dp, &mut grads);
                            offset += c;
                        }
                    }
                },
                Op::PairConcat(p) => {
                    let vp = self.value(*p);
                    let (n, d) = (vp.rows(), vp.cols());
                    let mut dp = Array::zeros(&[n, d]);
                    for i in 0..n {
                        for j in 0..n {
                            let r = i * n + j;
                            for k in 0..d {
                                dp.data_mut()[i * d + k] += dy.at(r, k);
                                dp.data_mut()[j * d + k] += dy.at(r, d + k);
                            }
                        }
                    }
                    acc(*p, dp, &mut grads);
                }
                Op::Reshape(x) => {
                    let dx = dy.reshaped(self.value(*x).shape())?;
                    acc(*x, dx, &mut grads);
                }
                Op::Transpose(x) => {
                    acc(*x, dy.transposed(), &mut grads);
                }
                Op::MaskedFill { x, mask } => {
                    let mut dx = dy.clone();
                    for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
                        if m {
                            *v = 0.0;
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::RowGather { x, cols } => {
                    let vx = self.value(*x);
                    let mut dx = Array::zeros(vx.shape());
                    for (i, &c) in cols.iter().enumerate() {
                        dx.data_mut()[i * vx.cols() + c] += dy.data()[i];
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::SumAll(x) => {
                    let g = dy.item();
                    acc(*x, Array::full(self.value(*x).shape(), g), &mut grads);
                }
                Op::SliceRows { x, start } => {
                    let vx = self.value(*x);
                    let n = vx.cols();
                    let mut dx = Array::zeros(vx.shape());
                    let count = dy.rows();
                    dx.data_mut()[start * n..(start + count) * n].copy_from_slice(dy.data());
                    acc(*x, dx, &mut grads);
                }
            }
        }
        Ok(())
    }
}

fn elementwise(a: &Array, b: &Array, f: impl Fn(Scalar, Scalar) -> Scalar) -> Array {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::from_vec(a.shape(), data).expect("shapes checked")
}

fn row_norm_stats(row: &[Scalar]) -> (Scalar, Scalar) {
    let n = row.len() as Scalar;
    let mean = row.iter().sum::<Scalar>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Scalar>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Numerically stable row softmax of a 2-D array (non-graph helper).
pub fn softmax_rows_value(x: &Array) -> Array {
    let (m, n) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn conv_input_dims(x: &Array) -> (usize, usize, usize, usize) {
    match x.ndim() {
        3 => (1, x.shape()[0], x.shape()[1], x.shape()[2]),
        _ => (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]),
    }
}

/// The overlap of an output row with a kernel tap: output columns
/// [x_lo, x_hi) pair with input columns starting at sx0 on row y+ky-ph.
fn tap_extent(wid: usize, kx: usize, pw: usize) -> (usize, usize, usize) {
    let x_lo = pw.saturating_sub(kx);
    let x_hi = wid.min(wid + pw - kx);
    let sx0 = x_lo + kx - pw;
    (x_lo, x_hi, sx0)
}

/// Direct same-padded convolution: each kernel tap contributes one scaled
/// contiguous row copy, which keeps the inner loops slice-shaped.
fn conv2d_forward(x: &Array, w: &Array, b: &Array) -> Result<Array> {
    let (batch, c_in, h, wid) = conv_input_dims(x);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let out_shape: Vec<usize> = if x.ndim() == 3 {
        vec![c_out, h, wid]
    } else {
        vec![batch, c_out, h, wid]
    };
    let mut out = Array::zeros(&out_shape);
    let plane = h * wid;
    let x_data = x.data();
    let w_data = w.data();
    let out_data = out.data_mut();
    for bi in 0..batch {
        for co in 0..c_out {
            let out_base = (bi * c_out + co) * plane;
            for ci in 0..c_in {
                let x_base = (bi * c_in + ci) * plane;
                for ky in 0..kh {
                    let y_lo = ph.saturating_sub(ky);
                    let y_hi = h.min(h + ph - ky);
                    for kx in 0..kw {
                        let tap = w_data[((co * c_in + ci) * kh + ky) * kw + kx];
                        let (x_lo, x_hi, sx0) = tap_extent(wid, kx, pw);
                        for y in y_lo..y_hi {
                            let sy = y + ky - ph;
                            let dst_at = out_base + y * wid;
                            let src_at = x_base + sy * wid;
                            let dst = &mut out_data[dst_at + x_lo..dst_at + x_hi];
                            let src = &x_data[src_at + sx0..src_at + sx0 + (x_hi - x_lo)];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += tap * s;
                            }
                        }
                    }
                }
            }
            let bias = b.data()[co];
            for v in &mut out_data[out_base..out_base + plane] {
                *v += bias;
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(x: &Array, w: &Array, dy: &Array) -> Result<(Array, Array, Array)> {
    let (batch, c_in, h, wid) = conv_input_dims(x);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = h * wid;
    let mut dx = Array::zeros(x.shape());
    let mut dw = Array::zeros(w.shape());
    let mut db = Array::zeros(&[c_out]);

    let x_data = x.data();
    let w_data = w.data();
    let dy_data = dy.data();
    for co in 0..c_out {
        let mut bias_grad = 0.0;
        for bi in 0..batch {
            let dy_base = (bi * c_out + co) * plane;
            bias_grad += dy_data[dy_base..dy_base + plane].iter().sum::<Scalar>();
        }
        db.data_mut()[co] = bias_grad;
    }

    let dx_data = dx.data_mut();
    let dw_data = dw.data_mut();
    for bi in 0..batch {
        for co in 0..c_out {
            let dy_base = (bi * c_out + co) * plane;
            for ci in 0..c_in {
                let x_base = (bi * c_in + ci) * plane;
                for ky in 0..kh {
                    let y_lo = ph.saturating_sub(ky);
                    let y_hi = h.min(h + ph - ky);
                    for kx in 0..kw {
                        let widx = ((co * c_in + ci) * kh + ky) * kw + kx;
                        let tap = w_data[widx];
                        let (x_lo, x_hi, sx0) = tap_extent(wid, kx, pw);
                        let mut tap_grad = 0.0;
                        for y in y_lo..y_hi {
                            let sy = y + ky - ph;
                            let dy_at = dy_base + y * wid;
                            let src_at = x_base + sy * wid;
                            let len = x_hi - x_lo;
                            let dy_row = &dy_data[dy_at + x_lo..dy_at + x_hi];
                            let x_row = &x_data[src_at + sx0..src_at + sx0 + len];
                            let dx_row = &mut dx_data[src_at + sx0..src_at + sx0 + len];
                            for ((g, s), d) in dy_row.iter().zip(x_row).zip(dx_row) {
                                tap_grad += g * s;
                                *d += tap * g;
                            }
                        }
                        dw_data[widx] += tap_grad;
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
        Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::new();
        let x = g.input(Array::full(&[1, 5], 3.25));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.input(random_array(&mut rng, &[7, 9]));
        let y = g.softmax_rows(x).unwrap();
        for i in 0..7 {
            let s: Scalar = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(g.value(y).row(i).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn tanh_and_layer_norm_trivial_values() {
        let mut g = Graph::new();
        let x = g.input(Array::zeros(&[1, 4]));
        let y = g.tanh(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let constant = g.input(Array::full(&[1, 4], 2.5));
        let gain = g.input(Array::full(&[4], 1.0));
        let bias = g.input(Array::zeros(&[4]));
        let ln = g.layer_norm_rows(constant, gain, bias).unwrap();
        for &v in g.value(ln).data() {
            assert!(v.abs() < 1e-9, "layer norm of constant row must be ~0, got {}", v);
        }
    }

    #[test]
    fn conv2d_identity_kernel_reproduces_input() {
        // 3x3 kernel with a single center 1: same-padded conv is identity.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x_val = random_array(&mut rng, &[1, 8, 8]);
        let mut w_val = Array::zeros(&[1, 1, 3, 3]);
        w_val.data_mut()[4] = 1.0;
        let mut g = Graph::new();
        let x = g.input(x_val.clone());
        let w = g.input(w_val);
        let b = g.input(Array::zeros(&[1]));
        let y = g.conv2d(x, w, b).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x_val.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x_val = random_array(&mut rng, &[2, 6, 5]);
        let w_val = random_array(&mut rng, &[3, 2, 3, 3]);
        let b_val = random_array(&mut rng, &[3]);
        let mut g = Graph::new();
        let x = g.input(x_val.clone());
        let w = g.input(w_val.clone());
        let b = g.input(b_val.clone());
        let y = g.conv2d(x, w, b).unwrap();
        // Direct convolution-sum oracle.
        let (h, wid) = (6usize, 5usize);
        for co in 0..3 {
            for oy in 0..h {
                for ox in 0..wid {
                    let mut acc = b_val.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = oy as isize + ky as isize - 1;
                                let sx = ox as isize + kx as isize - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wid as isize {
                                    acc += x_val.data()
                                        [ci * h * wid + sy as usize * wid + sx as usize]
                                        * w_val.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = g.value(y).data()[co * h * wid + oy * wid + ox];
                    assert!((got - acc).abs() < 1e-10, "at {},{},{}", co, oy, ox);
                }
            }
        }
    }

    #[test]
    fn masked_fill_softmax_starves_masked_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input(random_array(&mut rng, &[4, 4]));
        let mask: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        let filled = g.masked_fill(x, &mask, MASK_FILL_VALUE).unwrap();
        let probs = g.softmax_rows(filled).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                assert!(g.value(probs).data()[i] < 1e-30);
            }
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Array::zeros(&[2, 3]));
        let b = g.input(Array::zeros(&[3, 2]));
        match g.add(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("expected shape error, got {:?}", other),
        }
    }

    #[test]
    fn max_pool_takes_block_maxima() {
        let mut g = Graph::new();
        let x = g.input(
            Array::from_vec(
                &[1, 2, 4],
                vec![1.0, 5.0, 2.0, 0.0, -1.0, 3.0, 9.0, 4.0],
            )
            .unwrap(),
        );
        let y = g.max_pool2d(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2]);
        assert_eq!(g.value(y).data(), &[5.0, 9.0]);
    }

    #[test]
    fn embedding_gathers_rows() {
        let mut g = Graph::new();
        let t = g.input(Array::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let e = g.embedding(t, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn pair_concat_layout() {
        let mut g = Graph::new();
        let p = g.input(Array::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let pairs = g.pair_concat(p).unwrap();
        assert_eq!(g.value(pairs).shape(), &[4, 4]);
        assert_eq!(g.value(pairs).row(0), &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(g.value(pairs).row(1), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(pairs).row(2), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_p() {
        let mut store = ParamStore::new();
        store
            .register("p", Array::from_vec(&[3], vec![1.5, -2.0, 0.25]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss, &mut store).unwrap();
        let grad = store.grad("p").unwrap();
        assert_eq!(grad.data(), &[3.0, -4.0, 0.5]);
    }
}

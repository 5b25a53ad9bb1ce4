//! Reverse-mode differentiation on an append-only tape.
//!
//! Every operation validates shapes, computes its forward value eagerly and
//! records a node. The tape order is a topological order by construction, so
//! the backward pass is a single reverse sweep that visits each node exactly
//! once and accumulates (sums) gradients whenever a node feeds several
//! consumers. Values are immutable once recorded.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// (r,c) + (1,c), broadcast over rows.
    AddBias,
    MatMul,
    Transpose,
    Gelu,
    LayerNorm { eps: f64 },
    SoftmaxRow { temperature: f64 },
    L2NormalizeRows,
    MeanAxis { axis: usize },
    VarAxis { axis: usize },
    MeanAll,
    /// Mean of squared entries; the MSE of a residual.
    MeanSq,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Row gather; with an embedding matrix input this is embedding lookup.
    GatherRows { indices: Vec<usize> },
    /// -mean_i log softmax(row_i)[i] over a square score matrix.
    DiagNll,
    /// -mean_i log softmax(row_i)[t_i].
    CeRows { targets: Vec<usize> },
    /// Mean binary cross-entropy on logits; second input holds the targets.
    BceLogits,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation: ordered primitive ops with input references.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<()> {
    if !t.is_2d() {
        return Err(Error::Shape {
            op,
            detail: format!("expected 2-d tensor, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Tape {
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

    /// Scalar convenience for 1×1 nodes.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or tracked input).
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "sub",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub, vec![a, b], value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v * c);
        self.push(Op::Scale(c), vec![a], value)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        require_2d("add_bias", tx)?;
        if tb.shape() != [1, tx.cols()] {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("bias {:?} does not match columns of {:?}", tb.shape(), tx.shape()),
            });
        }
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % cols];
        }
        let value = Tensor::from_vec(vec![tx.rows(), cols], data)?;
        Ok(self.push(Op::AddBias, vec![x, bias], value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_2d("matmul", ta)?;
        require_2d("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dimensions disagree: {:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_nn(ta.data(), tb.data(), m, k, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    /// x @ w + bias in one call.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, bias)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        require_2d("transpose", ta)?;
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data()[i * c + j];
            }
        }
        let value = Tensor::from_vec(vec![c, r], data)?;
        Ok(self.push(Op::Transpose, vec![a], value))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu_forward);
        self.push(Op::Gelu, vec![a], value)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Parameter {
                name: "eps",
                detail: format!("must be positive, got {eps}"),
            });
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        require_2d("layer_norm", tx)?;
        let c = tx.cols();
        if tg.shape() != [1, c] || tb.shape() != [1, c] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} do not match last dimension of {:?}",
                    tg.shape(),
                    tb.shape(),
                    tx.shape()
                ),
            });
        }
        let r = tx.rows();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::from_vec(vec![r, c], data)?;
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gain, bias], value))
    }

    pub fn softmax_row(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        if temperature <= 0.0 {
            return Err(Error::Parameter {
                name: "temperature",
                detail: format!("must be positive, got {temperature}"),
            });
        }
        let tx = self.value(x);
        require_2d("softmax_row", tx)?;
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            softmax_into(row, temperature, &mut data[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_vec(vec![r, c], data)?;
        Ok(self.push(Op::SoftmaxRow { temperature }, vec![x], value))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        require_2d("l2_normalize_rows", tx)?;
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-30 {
                return Err(Error::Numeric(format!("zero-norm vector at row {i}")));
            }
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        let value = Tensor::from_vec(vec![r, c], data)?;
        Ok(self.push(Op::L2NormalizeRows, vec![x], value))
    }

    /// Mean reduction along `axis` of a 2-d tensor (0 → 1×c, 1 → r×1).
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = self.value(x);
        require_2d("mean_axis", tx)?;
        if axis > 1 {
            return Err(Error::Parameter { name: "axis", detail: format!("got {axis}") });
        }
        let (r, c) = (tx.rows(), tx.cols());
        let value = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += tx.data()[i * c + j];
                }
            }
            out.iter_mut().for_each(|v| *v /= r as f64);
            Tensor::from_vec(vec![1, c], out)?
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = tx.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
            }
            Tensor::from_vec(vec![r, 1], out)?
        };
        Ok(self.push(Op::MeanAxis { axis }, vec![x], value))
    }

    /// Biased variance along `axis` of a 2-d tensor.
    pub fn var_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = self.value(x);
        require_2d("var_axis", tx)?;
        if axis > 1 {
            return Err(Error::Parameter { name: "axis", detail: format!("got {axis}") });
        }
        let (r, c) = (tx.rows(), tx.cols());
        let value = if axis == 0 {
            let mut mean = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    mean[j] += tx.data()[i * c + j];
                }
            }
            mean.iter_mut().for_each(|v| *v /= r as f64);
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    let d = tx.data()[i * c + j] - mean[j];
                    out[j] += d * d;
                }
            }
            out.iter_mut().for_each(|v| *v /= r as f64);
            Tensor::from_vec(vec![1, c], out)?
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                let row = &tx.data()[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                out[i] = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            }
            Tensor::from_vec(vec![r, 1], out)?
        };
        Ok(self.push(Op::VarAxis { axis }, vec![x], value))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let mean = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        self.push(Op::MeanAll, vec![x], Tensor::scalar(mean))
    }

    pub fn mean_sq(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let mean = tx.data().iter().map(|v| v * v).sum::<f64>() / tx.numel() as f64;
        self.push(Op::MeanSq, vec![x], Tensor::scalar(mean))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Input("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Parameter { name: "axis", detail: format!("got {axis}") });
        }
        for &p in parts {
            require_2d("concat", self.value(p))?;
        }
        let first = self.value(parts[0]);
        let (r0, c0) = (first.rows(), first.cols());
        let value = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let t = self.value(p);
                if t.cols() != c0 {
                    return Err(Error::Shape {
                        op: "concat",
                        detail: format!("column mismatch: {:?} vs {:?}", t.shape(), first.shape()),
                    });
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(vec![rows, c0], data)?
        } else {
            let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            for &p in parts {
                if self.value(p).rows() != r0 {
                    return Err(Error::Shape {
                        op: "concat",
                        detail: format!(
                            "row mismatch: {:?} vs {:?}",
                            self.value(p).shape(),
                            first.shape()
                        ),
                    });
                }
            }
            let mut data = vec![0.0; r0 * total_cols];
            let mut col_off = 0;
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                for i in 0..r0 {
                    data[i * total_cols + col_off..i * total_cols + col_off + c]
                        .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
                }
                col_off += c;
            }
            Tensor::from_vec(vec![r0, total_cols], data)?
        };
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), value))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let tx = self.value(x);
        require_2d("slice", tx)?;
        if axis > 1 {
            return Err(Error::Parameter { name: "axis", detail: format!("got {axis}") });
        }
        let extent = tx.shape()[axis];
        if start >= end || end > extent {
            return Err(Error::Input(format!(
                "slice range {start}..{end} out of bounds for extent {extent}"
            )));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let value = if axis == 0 {
            Tensor::from_vec(vec![end - start, c], tx.data()[start * c..end * c].to_vec())?
        } else {
            let w = end - start;
            let mut data = vec![0.0; r * w];
            for i in 0..r {
                data[i * w..(i + 1) * w]
                    .copy_from_slice(&tx.data()[i * c + start..i * c + end]);
            }
            Tensor::from_vec(vec![r, w], data)?
        };
        Ok(self.push(Op::Slice { axis, start, end }, vec![x], value))
    }

    /// Gather rows by index. `gather_rows(embedding, ids)` is embedding lookup.
    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let tx = self.value(x);
        require_2d("gather_rows", tx)?;
        if indices.is_empty() {
            return Err(Error::Input("gather_rows with empty index list".into()));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &idx in &indices {
            if idx >= r {
                return Err(Error::Input(format!("row index {idx} out of bounds for {r} rows")));
            }
            data.extend_from_slice(&tx.data()[idx * c..(idx + 1) * c]);
        }
        let value = Tensor::from_vec(vec![indices.len(), c], data)?;
        Ok(self.push(Op::GatherRows { indices }, vec![x], value))
    }

    /// Repeat a 1×c row n times.
    pub fn broadcast_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        self.gather_rows(x, vec![0; n])
    }

    /// -mean_i log softmax(row_i)[i]; the contrastive cross-entropy with the
    /// diagonal as targets.
    pub fn diag_nll(&mut self, scores: NodeId) -> Result<NodeId> {
        let ts = self.value(scores);
        require_2d("diag_nll", ts)?;
        if ts.rows() != ts.cols() {
            return Err(Error::Shape {
                op: "diag_nll",
                detail: format!("expected square matrix, got {:?}", ts.shape()),
            });
        }
        let n = ts.rows();
        let mut total = 0.0;
        for i in 0..n {
            let row = &ts.data()[i * n..(i + 1) * n];
            total += log_sum_exp(row) - row[i];
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(Op::DiagNll, vec![scores], value))
    }

    /// -mean_i log softmax(row_i)[targets[i]].
    pub fn ce_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let tl = self.value(logits);
        require_2d("ce_rows", tl)?;
        let (r, c) = (tl.rows(), tl.cols());
        if targets.len() != r {
            return Err(Error::Shape {
                op: "ce_rows",
                detail: format!("{} targets for {} rows", targets.len(), r),
            });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Input(format!("target {t} out of bounds for {c} classes")));
            }
            let row = &tl.data()[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / r as f64);
        Ok(self.push(Op::CeRows { targets }, vec![logits], value))
    }

    /// Mean binary cross-entropy with logits against constant targets.
    pub fn bce_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (tl, tt) = (self.value(logits), self.value(targets));
        if tl.shape() != tt.shape() {
            return Err(Error::Shape {
                op: "bce_logits",
                detail: format!("{:?} vs {:?}", tl.shape(), tt.shape()),
            });
        }
        let mut total = 0.0;
        for (&x, &t) in tl.data().iter().zip(tt.data()) {
            total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(total / tl.numel() as f64);
        Ok(self.push(Op::BceLogits, vec![logits, targets], value))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Input(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.propagate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::from_vec(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches node value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                self.accumulate(grads, ins[0], gout);
                self.accumulate(grads, ins[1], gout);
            }
            Op::Sub => {
                self.accumulate(grads, ins[0], gout);
                let neg: Vec<f64> = gout.iter().map(|v| -v).collect();
                self.accumulate(grads, ins[1], &neg);
            }
            Op::Mul => {
                let (a, b) = (self.value(ins[0]), self.value(ins[1]));
                let da: Vec<f64> = gout.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = gout.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, ins[0], &da);
                self.accumulate(grads, ins[1], &db);
            }
            Op::Scale(c) => {
                let da: Vec<f64> = gout.iter().map(|g| g * c).collect();
                self.accumulate(grads, ins[0], &da);
            }
            Op::AddBias => {
                self.accumulate(grads, ins[0], gout);
                let cols = self.value(ins[1]).cols();
                let mut db = vec![0.0; cols];
                for (i, g) in gout.iter().enumerate() {
                    db[i % cols] += g;
                }
                self.accumulate(grads, ins[1], &db);
            }
            Op::MatMul => {
                let (a, b) = (self.value(ins[0]), self.value(ins[1]));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let da = matmul_nt(gout, b.data(), m, n, k);
                let db = matmul_tn(a.data(), gout, m, k, n);
                self.accumulate(grads, ins[0], &da);
                self.accumulate(grads, ins[1], &db);
            }
            Op::Transpose => {
                let out = &node.value;
                let (r, c) = (out.rows(), out.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = gout[i * c + j];
                    }
                }
                self.accumulate(grads, ins[0], &da);
            }
            Op::Gelu => {
                let x = self.value(ins[0]);
                let da: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, g)| g * gelu_derivative(v))
                    .collect();
                self.accumulate(grads, ins[0], &da);
            }
            Op::LayerNorm { eps } => {
                let (x, gain) = (self.value(ins[0]), self.value(ins[1]));
                let (r, c) = (x.rows(), x.cols());
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let row = &x.data()[i * c..(i + 1) * c];
                    let grow = &gout[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let g = grow[j] * gain.data()[j];
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                        mean_g += g;
                        mean_gx += g * xhat;
                    }
                    mean_g /= c as f64;
                    mean_gx /= c as f64;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let g = grow[j] * gain.data()[j];
                        dx[i * c + j] = inv * (g - mean_g - xhat * mean_gx);
                    }
                }
                self.accumulate(grads, ins[0], &dx);
                self.accumulate(grads, ins[1], &dgain);
                self.accumulate(grads, ins[2], &dbias);
            }
            Op::SoftmaxRow { temperature } => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &gout[i * c..(i + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dx[i * c + j] = yrow[j] * (grow[j] - dot) / temperature;
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::L2NormalizeRows => {
                let (x, y) = (self.value(ins[0]), &node.value);
                let (r, c) = (x.rows(), x.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let xrow = &x.data()[i * c..(i + 1) * c];
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &gout[i * c..(i + 1) * c];
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dx[i * c + j] = (grow[j] - yrow[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::MeanAxis { axis } => {
                let x = self.value(ins[0]);
                let (r, c) = (x.rows(), x.cols());
                let mut dx = vec![0.0; r * c];
                if *axis == 0 {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = gout[j] / r as f64;
                        }
                    }
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = gout[i] / c as f64;
                        }
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::VarAxis { axis } => {
                let x = self.value(ins[0]);
                let (r, c) = (x.rows(), x.cols());
                let mut dx = vec![0.0; r * c];
                if *axis == 0 {
                    for j in 0..c {
                        let mut mean = 0.0;
                        for i in 0..r {
                            mean += x.data()[i * c + j];
                        }
                        mean /= r as f64;
                        for i in 0..r {
                            dx[i * c + j] = gout[j] * 2.0 * (x.data()[i * c + j] - mean) / r as f64;
                        }
                    }
                } else {
                    for i in 0..r {
                        let row = &x.data()[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = gout[i] * 2.0 * (row[j] - mean) / c as f64;
                        }
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::MeanAll => {
                let x = self.value(ins[0]);
                let scale = gout[0] / x.numel() as f64;
                let dx = vec![scale; x.numel()];
                self.accumulate(grads, ins[0], &dx);
            }
            Op::MeanSq => {
                let x = self.value(ins[0]);
                let scale = 2.0 * gout[0] / x.numel() as f64;
                let dx: Vec<f64> = x.data().iter().map(|v| v * scale).collect();
                self.accumulate(grads, ins[0], &dx);
            }
            Op::Concat { axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in ins {
                        let t = self.value(p);
                        let len = t.numel();
                        self.accumulate(grads, p, &gout[offset..offset + len]);
                        offset += len;
                    }
                } else {
                    let total_cols = node.value.cols();
                    let rows = node.value.rows();
                    let mut col_off = 0;
                    for &p in ins {
                        let c = self.value(p).cols();
                        let mut dp = vec![0.0; rows * c];
                        for i in 0..rows {
                            dp[i * c..(i + 1) * c].copy_from_slice(
                                &gout[i * total_cols + col_off..i * total_cols + col_off + c],
                            );
                        }
                        self.accumulate(grads, p, &dp);
                        col_off += c;
                    }
                }
            }
            Op::Slice { axis, start, end } => {
                let x = self.value(ins[0]);
                let (r, c) = (x.rows(), x.cols());
                let mut dx = vec![0.0; r * c];
                if *axis == 0 {
                    dx[start * c..end * c].copy_from_slice(gout);
                } else {
                    let w = end - start;
                    for i in 0..r {
                        dx[i * c + start..i * c + end].copy_from_slice(&gout[i * w..(i + 1) * w]);
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::GatherRows { indices } => {
                let x = self.value(ins[0]);
                let c = x.cols();
                let mut dx = vec![0.0; x.numel()];
                for (k, &idx) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx[idx * c + j] += gout[k * c + j];
                    }
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::DiagNll => {
                let s = self.value(ins[0]);
                let n = s.rows();
                let scale = gout[0] / n as f64;
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    let row = &s.data()[i * n..(i + 1) * n];
                    softmax_into(row, 1.0, &mut dx[i * n..(i + 1) * n]);
                    for v in dx[i * n..(i + 1) * n].iter_mut() {
                        *v *= scale;
                    }
                    dx[i * n + i] -= scale;
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::CeRows { targets } => {
                let l = self.value(ins[0]);
                let (r, c) = (l.rows(), l.cols());
                let scale = gout[0] / r as f64;
                let mut dx = vec![0.0; r * c];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &l.data()[i * c..(i + 1) * c];
                    softmax_into(row, 1.0, &mut dx[i * c..(i + 1) * c]);
                    for v in dx[i * c..(i + 1) * c].iter_mut() {
                        *v *= scale;
                    }
                    dx[i * c + t] -= scale;
                }
                self.accumulate(grads, ins[0], &dx);
            }
            Op::BceLogits => {
                let (l, t) = (self.value(ins[0]), self.value(ins[1]));
                let scale = gout[0] / l.numel() as f64;
                let dx: Vec<f64> = l
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&x, &t)| (sigmoid(x) - t) * scale)
                    .collect();
                self.accumulate(grads, ins[0], &dx);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_into(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - max) / temperature).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_forward(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// C = A(m×k) · B(k×n), row-major.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// C = A(m×n) · Bᵀ where B is (k×n) row-major.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C = Aᵀ · B where A is (m×k) and B is (m×n), row-major.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

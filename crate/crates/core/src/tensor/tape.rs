//! The gradient tape: an append-only record of executed operations.
//!
//! Nodes are stored in execution order; `backward` walks them exactly once in
//! reverse, accumulating gradient buffers per node and flushing leaf gradients
//! into the watched tensors' cells. A tape serves one computation: after
//! `backward` it is consumed and further use is a state error.

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

use super::{GradCell, Tensor};

/// Reference a tensor holds into the tape it was produced on.
#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Arc<Mutex<TapeInner>>,
    pub(crate) id: usize,
}

pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
    pub(crate) consumed: bool,
}

pub(crate) struct Node {
    pub(crate) op: Op,
    /// Watched leaves flush their gradient here after backward.
    pub(crate) leaf_cell: Option<GradCell>,
}

/// Recorded operation with the operand values its backward pass needs.
/// Operand slots are `None` when the operand was an untaped constant.
pub(crate) enum Op {
    Leaf,
    /// c[m,n] = a[m,k] . b[k,n]
    Matmul {
        a: Option<usize>,
        b: Option<usize>,
        a_data: Arc<Vec<f64>>,
        b_data: Arc<Vec<f64>>,
        m: usize,
        k: usize,
        n: usize,
    },
    /// y[b,o,l'] = sum_{c,k} x[b,c,l'+k] w[o,c,k]
    Conv1d {
        input: Option<usize>,
        kernel: Option<usize>,
        x: Arc<Vec<f64>>,
        w: Arc<Vec<f64>>,
        batch: usize,
        c_in: usize,
        len: usize,
        c_out: usize,
        k: usize,
    },
    /// y[b,o,i,j] = sum_{c,u,v} x[b,c,i+u,j+v] w[o,c,u,v]
    Conv2d {
        input: Option<usize>,
        kernel: Option<usize>,
        x: Arc<Vec<f64>>,
        w: Arc<Vec<f64>>,
        batch: usize,
        c_in: usize,
        h: usize,
        w_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
    },
    Relu {
        x: Option<usize>,
        x_data: Arc<Vec<f64>>,
    },
    Sigmoid {
        x: Option<usize>,
        y: Vec<f64>,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
    },
    /// y[r,c] = a[r,c] + bias[c]
    AddRowBias {
        a: Option<usize>,
        bias: Option<usize>,
        rows: usize,
        cols: usize,
    },
    /// y[b,c,s] = a[b,c,s] + bias[c] (s = flattened spatial extent)
    AddChanBias {
        a: Option<usize>,
        bias: Option<usize>,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    Scale {
        x: Option<usize>,
        c: f64,
    },
    /// Element-wise product.
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        a_data: Arc<Vec<f64>>,
        b_data: Arc<Vec<f64>>,
    },
    Sum {
        x: Option<usize>,
        n: usize,
    },
    Mean {
        x: Option<usize>,
        n: usize,
    },
    Reshape {
        x: Option<usize>,
    },
    /// Concatenation of 1-D parts; (node id, length) per part.
    Concat {
        parts: Vec<(Option<usize>, usize)>,
    },
    /// loss = -log softmax(logits)[target]; saved softmax for backward.
    SoftmaxCe {
        logits: Option<usize>,
        softmax: Vec<f64>,
        target: usize,
    },
    /// Mean of per-row cross-entropies over a [b,c] logit matrix.
    SoftmaxCeBatch {
        logits: Option<usize>,
        softmax: Vec<f64>,
        targets: Vec<usize>,
        b: usize,
        c: usize,
    },
    /// Mean of weighted per-element binary cross-entropies on logits.
    SigmoidBce {
        logits: Option<usize>,
        sig: Vec<f64>,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
}

/// Per-computation gradient tape.
pub struct GradTape {
    pub(crate) inner: Arc<Mutex<TapeInner>>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape {
            inner: Arc::new(Mutex::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn node_count(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    /// Attach a gradient-requiring tensor to this tape as a leaf.
    ///
    /// The returned tensor shares the original's buffer and gradient cell, so
    /// gradients computed through it are visible on `t` after [`backward`].
    pub fn watch(&self, t: &Tensor) -> Result<Tensor> {
        let cell = t.grad.clone().ok_or_else(|| {
            Error::State("watch requires a tensor with requires_grad".to_string())
        })?;
        let mut inner = self.inner.lock().unwrap();
        if inner.consumed {
            return Err(Error::State("tape already consumed by backward".to_string()));
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            leaf_cell: Some(cell.clone()),
        });
        Ok(Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            requires_grad: true,
            grad: Some(cell),
            node: Some(NodeRef {
                tape: Arc::clone(&self.inner),
                id,
            }),
        })
    }
}

/// Resolve the single tape shared by the taped operands, if any.
///
/// Errors when operands come from two different tapes.
pub(crate) fn common_tape(operands: &[&Tensor]) -> Result<Option<Arc<Mutex<TapeInner>>>> {
    let mut found: Option<Arc<Mutex<TapeInner>>> = None;
    for t in operands {
        if let Some(node) = &t.node {
            match &found {
                None => found = Some(Arc::clone(&node.tape)),
                Some(f) => {
                    if !Arc::ptr_eq(f, &node.tape) {
                        return Err(Error::State(
                            "operands belong to different tapes".to_string(),
                        ));
                    }
                }
            }
        }
    }
    Ok(found)
}

pub(crate) fn node_id(t: &Tensor) -> Option<usize> {
    t.node.as_ref().map(|n| n.id)
}

/// Record `op` on `tape` and wrap the result buffer as a taped tensor.
pub(crate) fn record(
    tape: Arc<Mutex<TapeInner>>,
    op: Op,
    data: Vec<f64>,
    shape: Vec<usize>,
) -> Result<Tensor> {
    let mut inner = tape.lock().unwrap();
    if inner.consumed {
        return Err(Error::State("tape already consumed by backward".to_string()));
    }
    let id = inner.nodes.len();
    inner.nodes.push(Node {
        op,
        leaf_cell: None,
    });
    drop(inner);
    Ok(Tensor {
        shape,
        data: Arc::new(data),
        requires_grad: false,
        grad: None,
        node: Some(NodeRef { tape, id }),
    })
}

/// Run reverse-mode accumulation from a scalar loss produced under a tape.
///
/// Every watched tensor reachable from `loss` has its gradient accumulated
/// into its cell; the tape is cleared and cannot be reused.
pub fn backward(loss: &Tensor) -> Result<()> {
    let node = loss
        .node
        .as_ref()
        .ok_or_else(|| Error::State("loss was not produced under an active tape".to_string()))?;
    if loss.len() != 1 {
        return Err(Error::Shape(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape
        )));
    }
    let mut inner = node.tape.lock().unwrap();
    if inner.consumed {
        return Err(Error::State("tape already consumed by backward".to_string()));
    }
    inner.consumed = true;

    let n_nodes = inner.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = (0..n_nodes).map(|_| None).collect();
    grads[node.id] = Some(vec![1.0]);

    // Reverse execution order; each node is visited exactly once.
    for id in (0..n_nodes).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        let node = &inner.nodes[id];
        match &node.op {
            Op::Leaf => {
                if let Some(cell) = &node.leaf_cell {
                    let mut slot = cell.lock().unwrap();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, gi) in acc.iter_mut().zip(&g) {
                                *a += gi;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
            }
            Op::Matmul {
                a,
                b,
                a_data,
                b_data,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ai) = a {
                    let buf = grads[*ai].get_or_insert_with(|| vec![0.0; m * k]);
                    // dA = G . B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * b_data[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                }
                if let Some(bi) = b {
                    let buf = grads[*bi].get_or_insert_with(|| vec![0.0; k * n]);
                    // dB = A^T . G
                    for p in 0..k {
                        for i in 0..m {
                            let a_ip = a_data[i * k + p];
                            for j in 0..n {
                                buf[p * n + j] += a_ip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Conv1d {
                input,
                kernel,
                x,
                w,
                batch,
                c_in,
                len,
                c_out,
                k,
            } => {
                let (bsz, c_in, l, c_out, kk) = (*batch, *c_in, *len, *c_out, *k);
                let l_out = l - kk + 1;
                if let Some(xi) = input {
                    let buf = grads[*xi].get_or_insert_with(|| vec![0.0; bsz * c_in * l]);
                    for b in 0..bsz {
                        for o in 0..c_out {
                            for i in 0..l_out {
                                let gi = g[(b * c_out + o) * l_out + i];
                                for c in 0..c_in {
                                    for t in 0..kk {
                                        buf[(b * c_in + c) * l + i + t] +=
                                            gi * w[(o * c_in + c) * kk + t];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(wi) = kernel {
                    let buf = grads[*wi].get_or_insert_with(|| vec![0.0; c_out * c_in * kk]);
                    for b in 0..bsz {
                        for o in 0..c_out {
                            for i in 0..l_out {
                                let gi = g[(b * c_out + o) * l_out + i];
                                for c in 0..c_in {
                                    for t in 0..kk {
                                        buf[(o * c_in + c) * kk + t] +=
                                            gi * x[(b * c_in + c) * l + i + t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                x,
                w,
                batch,
                c_in,
                h,
                w_in,
                c_out,
                kh,
                kw,
            } => {
                let (bsz, c_in, h, wd, c_out, kh, kw) =
                    (*batch, *c_in, *h, *w_in, *c_out, *kh, *kw);
                let (ho, wo) = (h - kh + 1, wd - kw + 1);
                if let Some(xi) = input {
                    let buf = grads[*xi].get_or_insert_with(|| vec![0.0; bsz * c_in * h * wd]);
                    for b in 0..bsz {
                        for o in 0..c_out {
                            for i in 0..ho {
                                for j in 0..wo {
                                    let gi = g[((b * c_out + o) * ho + i) * wo + j];
                                    for c in 0..c_in {
                                        for u in 0..kh {
                                            for v in 0..kw {
                                                buf[((b * c_in + c) * h + i + u) * wd + j + v] +=
                                                    gi * w[((o * c_in + c) * kh + u) * kw + v];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(wi) = kernel {
                    let buf =
                        grads[*wi].get_or_insert_with(|| vec![0.0; c_out * c_in * kh * kw]);
                    for b in 0..bsz {
                        for o in 0..c_out {
                            for i in 0..ho {
                                for j in 0..wo {
                                    let gi = g[((b * c_out + o) * ho + i) * wo + j];
                                    for c in 0..c_in {
                                        for u in 0..kh {
                                            for v in 0..kw {
                                                buf[((o * c_in + c) * kh + u) * kw + v] += gi
                                                    * x[((b * c_in + c) * h + i + u) * wd + j + v];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { x, x_data } => {
                if let Some(xi) = x {
                    let n = x_data.len();
                    let buf = grads[*xi].get_or_insert_with(|| vec![0.0; n]);
                    for i in 0..n {
                        if x_data[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { x, y } => {
                if let Some(xi) = x {
                    let n = y.len();
                    let buf = grads[*xi].get_or_insert_with(|| vec![0.0; n]);
                    for i in 0..n {
                        buf[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Add { a, b } => {
                for operand in [a, b].into_iter().flatten() {
                    let buf = grads[*operand].get_or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        buf[i] += g[i];
                    }
                }
            }
            Op::AddRowBias { a, bias, rows, cols } => {
                if let Some(ai) = a {
                    let buf = grads[*ai].get_or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        buf[i] += g[i];
                    }
                }
                if let Some(bi) = bias {
                    let buf = grads[*bi].get_or_insert_with(|| vec![0.0; *cols]);
                    for r in 0..*rows {
                        for c in 0..*cols {
                            buf[c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::AddChanBias {
                a,
                bias,
                batch,
                channels,
                spatial,
            } => {
                if let Some(ai) = a {
                    let buf = grads[*ai].get_or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        buf[i] += g[i];
                    }
                }
                if let Some(bi) = bias {
                    let buf = grads[*bi].get_or_insert_with(|| vec![0.0; *channels]);
                    for b in 0..*batch {
                        for c in 0..*channels {
                            for s in 0..*spatial {
                                buf[c] += g[(b * channels + c) * spatial + s];
                            }
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(xi) = x {
                    let buf = grads[*xi].get_or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        buf[i] += g[i] * c;
                    }
                }
            }
            Op::Mul { a, b, a_data, b_data } => {
                if let Some(ai) = a {
                    let buf = grads[*ai].get_or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        buf[i] += g[i] * b_data[i];
                    }
                }
                if let Some(bi) = b {
                    let buf = grads[*bi].get_or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        buf[i] += g[i] * a_data[i];
                    }
                }
            }
            Op::Sum { x, n } => {
                if let Some(xi) = x {
                    let buf = grads[*xi].get_or_insert_with(|| vec![0.0; *n]);
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Mean { x, n } => {
                if let Some(xi) = x {
                    let buf = grads[*xi].get_or_insert_with(|| vec![0.0; *n]);
                    let s = g[0] / *n as f64;
                    for v in buf.iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(xi) = x {
                    let buf = grads[*xi].get_or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        buf[i] += g[i];
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for (pid, plen) in parts {
                    if let Some(pi) = pid {
                        let buf = grads[*pi].get_or_insert_with(|| vec![0.0; *plen]);
                        for i in 0..*plen {
                            buf[i] += g[offset + i];
                        }
                    }
                    offset += plen;
                }
            }
            Op::SoftmaxCe {
                logits,
                softmax,
                target,
            } => {
                if let Some(li) = logits {
                    let n = softmax.len();
                    let buf = grads[*li].get_or_insert_with(|| vec![0.0; n]);
                    for i in 0..n {
                        let y = if i == *target { 1.0 } else { 0.0 };
                        buf[i] += g[0] * (softmax[i] - y);
                    }
                }
            }
            Op::SoftmaxCeBatch {
                logits,
                softmax,
                targets,
                b,
                c,
            } => {
                if let Some(li) = logits {
                    let buf = grads[*li].get_or_insert_with(|| vec![0.0; b * c]);
                    let scale = g[0] / *b as f64;
                    for r in 0..*b {
                        for j in 0..*c {
                            let y = if j == targets[r] { 1.0 } else { 0.0 };
                            buf[r * c + j] += scale * (softmax[r * c + j] - y);
                        }
                    }
                }
            }
            Op::SigmoidBce {
                logits,
                sig,
                labels,
                weights,
            } => {
                if let Some(li) = logits {
                    let n = sig.len();
                    let buf = grads[*li].get_or_insert_with(|| vec![0.0; n]);
                    let scale = g[0] / n as f64;
                    for i in 0..n {
                        buf[i] += scale * weights[i] * (sig[i] - labels[i]);
                    }
                }
            }
        }
    }

    inner.nodes.clear();
    Ok(())
}

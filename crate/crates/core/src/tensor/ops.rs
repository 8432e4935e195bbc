//! Forward operations. Each op computes eagerly and, when an operand is
//! taped, records itself so `backward` can replay it.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::tape::{common_tape, node_id, record, Op};
use super::{log_sum_exp, softmax_slice, Tensor};

impl Tensor {
    fn finish(&self, others: &[&Tensor], op: Op, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        let mut operands = vec![self];
        operands.extend_from_slice(others);
        match common_tape(&operands)? {
            Some(tape) => record(tape, op, data, shape),
            None => Tensor::new(data, &shape),
        }
    }

    /// Matrix product of 2-D tensors: `[m,k] . [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let a = &self.data;
        let b = &rhs.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a_ip = a[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                let row = &b[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(row) {
                    *d += a_ip * bv;
                }
            }
        }
        self.finish(
            &[rhs],
            Op::Matmul {
                a: node_id(self),
                b: node_id(rhs),
                a_data: Arc::clone(&self.data),
                b_data: Arc::clone(&rhs.data),
                m,
                k,
                n,
            },
            out,
            vec![m, n],
        )
    }

    /// 1-D valid cross-correlation, stride 1.
    ///
    /// Accepted shapes: `[l]` with kernel `[k]`, `[c,l]` or `[b,c,l]` with
    /// kernel `[o,c,k]`. Output rank mirrors the input rank.
    pub fn conv1d(&self, kernel: &Tensor) -> Result<Tensor> {
        let (batch, c_in, l, keep_batch, keep_chan) = match self.rank() {
            1 => (1, 1, self.shape[0], false, false),
            2 => (1, self.shape[0], self.shape[1], false, true),
            3 => (self.shape[0], self.shape[1], self.shape[2], true, true),
            r => {
                return Err(Error::Dimension(format!(
                    "conv1d input must have rank 1..=3, got {r}"
                )))
            }
        };
        let (c_out, kc, k) = match kernel.rank() {
            1 => (1, 1, kernel.shape[0]),
            3 => (kernel.shape[0], kernel.shape[1], kernel.shape[2]),
            r => {
                return Err(Error::Dimension(format!(
                    "conv1d kernel must have rank 1 or 3, got {r}"
                )))
            }
        };
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "conv1d channel mismatch: input has {c_in}, kernel expects {kc}"
            )));
        }
        if k > l || k == 0 {
            return Err(Error::Dimension(format!(
                "conv1d kernel width {k} does not fit input length {l}"
            )));
        }
        let l_out = l - k + 1;
        let x = &self.data;
        let w = &kernel.data;
        let mut out = vec![0.0; batch * c_out * l_out];
        for b in 0..batch {
            for o in 0..c_out {
                for i in 0..l_out {
                    let mut s = 0.0;
                    for c in 0..c_in {
                        for t in 0..k {
                            s += x[(b * c_in + c) * l + i + t] * w[(o * c_in + c) * k + t];
                        }
                    }
                    out[(b * c_out + o) * l_out + i] = s;
                }
            }
        }
        let mut shape = Vec::new();
        if keep_batch {
            shape.push(batch);
        }
        if keep_chan {
            shape.push(c_out);
        }
        shape.push(l_out);
        self.finish(
            &[kernel],
            Op::Conv1d {
                input: node_id(self),
                kernel: node_id(kernel),
                x: Arc::clone(&self.data),
                w: Arc::clone(&kernel.data),
                batch,
                c_in,
                len: l,
                c_out,
                k,
            },
            out,
            shape,
        )
    }

    /// 2-D valid cross-correlation, stride 1.
    ///
    /// Accepted shapes: `[h,w]` with kernel `[kh,kw]`, `[c,h,w]` or
    /// `[b,c,h,w]` with kernel `[o,c,kh,kw]`. Output rank mirrors the input.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        let (batch, c_in, h, w_in, keep_batch, keep_chan) = match self.rank() {
            2 => (1, 1, self.shape[0], self.shape[1], false, false),
            3 => (1, self.shape[0], self.shape[1], self.shape[2], false, true),
            4 => (
                self.shape[0],
                self.shape[1],
                self.shape[2],
                self.shape[3],
                true,
                true,
            ),
            r => {
                return Err(Error::Dimension(format!(
                    "conv2d input must have rank 2..=4, got {r}"
                )))
            }
        };
        let (c_out, kc, kh, kw) = match kernel.rank() {
            2 => (1, 1, kernel.shape[0], kernel.shape[1]),
            4 => (
                kernel.shape[0],
                kernel.shape[1],
                kernel.shape[2],
                kernel.shape[3],
            ),
            r => {
                return Err(Error::Dimension(format!(
                    "conv2d kernel must have rank 2 or 4, got {r}"
                )))
            }
        };
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {c_in}, kernel expects {kc}"
            )));
        }
        if kh > h || kw > w_in || kh == 0 || kw == 0 {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{w_in}"
            )));
        }
        let (ho, wo) = (h - kh + 1, w_in - kw + 1);
        let x = &self.data;
        let w = &kernel.data;
        let mut out = vec![0.0; batch * c_out * ho * wo];
        for b in 0..batch {
            for o in 0..c_out {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = 0.0;
                        for c in 0..c_in {
                            for u in 0..kh {
                                let xrow = (b * c_in + c) * h + i + u;
                                let wrow = (o * c_in + c) * kh + u;
                                for v in 0..kw {
                                    s += x[xrow * w_in + j + v] * w[wrow * kw + v];
                                }
                            }
                        }
                        out[((b * c_out + o) * ho + i) * wo + j] = s;
                    }
                }
            }
        }
        let mut shape = Vec::new();
        if keep_batch {
            shape.push(batch);
        }
        if keep_chan {
            shape.push(c_out);
        }
        shape.push(ho);
        shape.push(wo);
        self.finish(
            &[kernel],
            Op::Conv2d {
                input: node_id(self),
                kernel: node_id(kernel),
                x: Arc::clone(&self.data),
                w: Arc::clone(&kernel.data),
                batch,
                c_in,
                h,
                w_in,
                c_out,
                kh,
                kw,
            },
            out,
            shape,
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data.iter().map(|&v| v.max(0.0)).collect();
        self.finish(
            &[],
            Op::Relu {
                x: node_id(self),
                x_data: Arc::clone(&self.data),
            },
            out,
            self.shape.clone(),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data.iter().map(|&v| stable_sigmoid(v)).collect();
        self.finish(
            &[],
            Op::Sigmoid {
                x: node_id(self),
                y: out.clone(),
            },
            out,
            self.shape.clone(),
        )
    }

    /// Element-wise sum; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let out: Vec<f64> = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        self.finish(
            &[rhs],
            Op::Add {
                a: node_id(self),
                b: node_id(rhs),
            },
            out,
            self.shape.clone(),
        )
    }

    /// Element-wise product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let out: Vec<f64> = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(a, b)| a * b)
            .collect();
        self.finish(
            &[rhs],
            Op::Mul {
                a: node_id(self),
                b: node_id(rhs),
                a_data: Arc::clone(&self.data),
                b_data: Arc::clone(&rhs.data),
            },
            out,
            self.shape.clone(),
        )
    }

    /// Add a `[cols]` bias to every row of a `[rows,cols]` matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || bias.rank() != 1 || self.shape[1] != bias.shape[0] {
            return Err(Error::Shape(format!(
                "add_row_bias expects [r,c] + [c], got {:?} + {:?}",
                self.shape, bias.shape
            )));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = self.data.as_ref().clone();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bias.data[c];
            }
        }
        self.finish(
            &[bias],
            Op::AddRowBias {
                a: node_id(self),
                bias: node_id(bias),
                rows,
                cols,
            },
            out,
            self.shape.clone(),
        )
    }

    /// Add a `[c]` per-channel bias to a `[c,..]` or `[b,c,..]` feature map.
    ///
    /// `batched` says whether the leading axis is a batch axis.
    pub fn add_channel_bias(&self, bias: &Tensor, batched: bool) -> Result<Tensor> {
        if bias.rank() != 1 {
            return Err(Error::Shape("channel bias must be a vector".to_string()));
        }
        let chan_axis = usize::from(batched);
        if self.rank() < chan_axis + 1 || self.shape[chan_axis] != bias.shape[0] {
            return Err(Error::Shape(format!(
                "add_channel_bias: channels of {:?} (axis {chan_axis}) vs bias {:?}",
                self.shape, bias.shape
            )));
        }
        let batch = if batched { self.shape[0] } else { 1 };
        let channels = self.shape[chan_axis];
        let spatial: usize = self.shape[chan_axis + 1..].iter().product();
        let mut out = self.data.as_ref().clone();
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for s in 0..spatial {
                    out[base + s] += bias.data[c];
                }
            }
        }
        self.finish(
            &[bias],
            Op::AddChanBias {
                a: node_id(self),
                bias: node_id(bias),
                batch,
                channels,
                spatial,
            },
            out,
            self.shape.clone(),
        )
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.data.iter().map(|&v| v * c).collect();
        self.finish(
            &[],
            Op::Scale {
                x: node_id(self),
                c,
            },
            out,
            self.shape.clone(),
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        self.finish(
            &[],
            Op::Sum {
                x: node_id(self),
                n: self.len(),
            },
            vec![s],
            vec![1],
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Shape("mean of empty tensor".to_string()));
        }
        let s: f64 = self.data.iter().sum::<f64>() / self.len() as f64;
        self.finish(
            &[],
            Op::Mean {
                x: node_id(self),
                n: self.len(),
            },
            vec![s],
            vec![1],
        )
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        self.finish(
            &[],
            Op::Reshape { x: node_id(self) },
            self.data.as_ref().clone(),
            shape.to_vec(),
        )
    }

    /// Concatenate 1-D tensors into one vector.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".to_string()));
        }
        for p in parts {
            if p.rank() != 1 {
                return Err(Error::Shape(format!(
                    "concat expects vectors, got shape {:?}",
                    p.shape
                )));
            }
        }
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(&p.data);
        }
        let op = Op::Concat {
            parts: parts.iter().map(|p| (node_id(p), p.len())).collect(),
        };
        match common_tape(parts)? {
            Some(tape) => record(tape, op, out, vec![total]),
            None => Tensor::new(out, &[total]),
        }
    }

    /// Cross-entropy of a `[c]` logit vector against a class index.
    ///
    /// `loss = log_sum_exp(logits) - logits[target]`; the gradient w.r.t. the
    /// logits is `softmax(logits) - onehot(target)`.
    pub fn softmax_cross_entropy(&self, target: usize) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy expects a logit vector, got {:?}",
                self.shape
            )));
        }
        if target >= self.len() {
            return Err(Error::Index(format!(
                "target class {target} out of range for {} classes",
                self.len()
            )));
        }
        let loss = log_sum_exp(&self.data) - self.data[target];
        self.finish(
            &[],
            Op::SoftmaxCe {
                logits: node_id(self),
                softmax: softmax_slice(&self.data),
                target,
            },
            vec![loss],
            vec![1],
        )
    }

    /// Mean cross-entropy of a `[b,c]` logit matrix against per-row targets.
    pub fn softmax_cross_entropy_batch(&self, targets: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy_batch expects [b,c] logits, got {:?}",
                self.shape
            )));
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        if targets.len() != b {
            return Err(Error::Shape(format!(
                "{} targets for {} rows",
                targets.len(),
                b
            )));
        }
        let mut softmax = vec![0.0; b * c];
        let mut total = 0.0;
        for r in 0..b {
            let row = &self.data[r * c..(r + 1) * c];
            let t = targets[r];
            if t >= c {
                return Err(Error::Index(format!(
                    "target class {t} out of range for {c} classes"
                )));
            }
            total += log_sum_exp(row) - row[t];
            softmax[r * c..(r + 1) * c].copy_from_slice(&softmax_slice(row));
        }
        self.finish(
            &[],
            Op::SoftmaxCeBatch {
                logits: node_id(self),
                softmax,
                targets: targets.to_vec(),
                b,
                c,
            },
            vec![total / b as f64],
            vec![1],
        )
    }

    /// Mean weighted binary cross-entropy on a `[n]` logit vector.
    ///
    /// Uses the stable formulation `w * (max(z,0) - z*y + ln(1 + e^{-|z|}))`.
    pub fn sigmoid_bce_with_logits(&self, labels: &[f64], weights: &[f64]) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::Shape(format!(
                "sigmoid_bce_with_logits expects a logit vector, got {:?}",
                self.shape
            )));
        }
        let n = self.len();
        if labels.len() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "{} logits vs {} labels / {} weights",
                n,
                labels.len(),
                weights.len()
            )));
        }
        let mut total = 0.0;
        let mut sig = vec![0.0; n];
        for i in 0..n {
            let z = self.data[i];
            let y = labels[i];
            total += weights[i] * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
            sig[i] = stable_sigmoid(z);
        }
        self.finish(
            &[],
            Op::SigmoidBce {
                logits: node_id(self),
                sig,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            vec![total / n as f64],
            vec![1],
        )
    }
}

pub(crate) fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

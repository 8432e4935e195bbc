//! Feed-forward classifiers: definition, training, fine-tuning, persistence.
//!
//! Two reference architectures are shipped, both on 16x16x1 inputs:
//! `mlp_small` (flatten -> 64 -> relu -> C) and `conv_small`
//! (conv 3x3x8 -> relu -> flatten -> 32 -> relu -> C). Arbitrary stacks of
//! the same layer kinds can be built with [`Arch::new`].
//!
//! A trained [`Classifier`] is immutable; fine-tuning continues training on a
//! detached copy and reports whether the result is admissible: better on a
//! held-out target validation split than both the pre-trained model and a
//! same-size scratch model.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{split, Dataset, DatasetRole};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::{backward, GradTape, Sgd, Tensor};

/// One layer of a classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { out_channels: usize, kh: usize, kw: usize },
    Conv1d { out_channels: usize, k: usize },
    Dense { out: usize },
    Relu,
    Flatten,
}

/// Network architecture: input shape, layer stack, class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

/// Names for the shipped reference architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    MlpSmall,
    ConvSmall,
}

impl Arch {
    /// flatten -> dense 64 -> relu -> dense C
    pub fn mlp_small(input_shape: &[usize], num_classes: usize) -> Result<Arch> {
        Arch::new(
            input_shape,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { out: num_classes },
            ],
            num_classes,
        )
    }

    /// conv 3x3x8 -> relu -> flatten -> dense 32 -> relu -> dense C
    pub fn conv_small(input_shape: &[usize], num_classes: usize) -> Result<Arch> {
        Arch::new(
            input_shape,
            vec![
                LayerSpec::Conv2d {
                    out_channels: 8,
                    kh: 3,
                    kw: 3,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 32 },
                LayerSpec::Relu,
                LayerSpec::Dense { out: num_classes },
            ],
            num_classes,
        )
    }

    pub fn by_id(id: ArchId, input_shape: &[usize], num_classes: usize) -> Result<Arch> {
        match id {
            ArchId::MlpSmall => Arch::mlp_small(input_shape, num_classes),
            ArchId::ConvSmall => Arch::conv_small(input_shape, num_classes),
        }
    }

    /// Validate the stack: shapes must thread through every layer and the
    /// final layer must be a dense layer of width `num_classes`.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, num_classes: usize) -> Result<Arch> {
        if num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".to_string()));
        }
        let arch = Arch {
            input_shape: input_shape.to_vec(),
            layers,
            num_classes,
        };
        let out = arch.output_shapes()?;
        match (arch.layers.last(), out.last()) {
            (Some(LayerSpec::Dense { .. }), Some(final_shape)) => {
                if final_shape != &vec![num_classes] {
                    return Err(Error::Config(format!(
                        "final layer produces {final_shape:?}, expected [{num_classes}]"
                    )));
                }
            }
            _ => {
                return Err(Error::Config(
                    "architecture must end with a dense logit layer".to_string(),
                ))
            }
        }
        Ok(arch)
    }

    /// Per-layer output shapes (without the batch axis).
    fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kh,
                    kw,
                } => match shape.as_slice() {
                    [_, h, w] if *kh <= *h && *kw <= *w => {
                        vec![*out_channels, h - kh + 1, w - kw + 1]
                    }
                    s => {
                        return Err(Error::Config(format!(
                            "layer {i}: conv2d {kh}x{kw} cannot consume shape {s:?}"
                        )))
                    }
                },
                LayerSpec::Conv1d { out_channels, k } => match shape.as_slice() {
                    [_, l] if *k <= *l => vec![*out_channels, l - k + 1],
                    s => {
                        return Err(Error::Config(format!(
                            "layer {i}: conv1d width {k} cannot consume shape {s:?}"
                        )))
                    }
                },
                LayerSpec::Dense { out } => match shape.as_slice() {
                    [_] => vec![*out],
                    s => {
                        return Err(Error::Config(format!(
                            "layer {i}: dense layer needs a flat input, got {s:?}"
                        )))
                    }
                },
                LayerSpec::Relu => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Shapes of the parameter tensors, in layer order.
    fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut params = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kh,
                    kw,
                } => {
                    let c_in = shape[0];
                    params.push(vec![*out_channels, c_in, *kh, *kw]);
                    params.push(vec![*out_channels]);
                    shape = vec![*out_channels, shape[1] - kh + 1, shape[2] - kw + 1];
                }
                LayerSpec::Conv1d { out_channels, k } => {
                    let c_in = shape[0];
                    params.push(vec![*out_channels, c_in, *k]);
                    params.push(vec![*out_channels]);
                    shape = vec![*out_channels, shape[1] - k + 1];
                }
                LayerSpec::Dense { out } => {
                    params.push(vec![shape[0], *out]);
                    params.push(vec![*out]);
                    shape = vec![*out];
                }
                LayerSpec::Relu => {}
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
            }
        }
        Ok(params)
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} must be in [0,1)",
                self.momentum
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Outcome of a fine-tuning run, with both admissibility conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub acc_pretrained_on_target: f64,
    pub acc_finetuned_on_target: f64,
    pub acc_scratch_on_target: f64,
    pub n_s: usize,
    /// Fine-tuned beats both the scratch model and the pre-trained model.
    pub admissible: bool,
}

/// Result of a full forward pass on one input.
pub struct ForwardFull {
    pub logits: Tensor,
    pub probs: Tensor,
    pub predicted: usize,
    /// Activations of the deepest hidden layer (input to the logit layer).
    pub trace: Tensor,
}

/// A parameterized feed-forward classifier. Immutable once trained.
#[derive(Clone, Debug)]
pub struct Classifier {
    arch: Arch,
    params: Vec<Tensor>,
}

impl Classifier {
    /// Fresh model with seeded He-uniform weights and zero biases.
    pub fn init(arch: Arch, seed: u64) -> Result<Classifier> {
        let shapes = arch.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
        let mut params = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            if shape.len() == 1 {
                // Bias.
                params.push(Tensor::param(vec![0.0; shape[0]], shape));
            } else {
                let fan_in: usize = match shape.len() {
                    2 => shape[0],
                    _ => shape[1..].iter().product(),
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                params.push(Tensor::param(data, shape));
            }
        }
        Ok(Classifier { arch, params })
    }

    /// Build from explicit parameter tensors (shapes are validated).
    pub fn with_params(arch: Arch, params: Vec<Tensor>) -> Result<Classifier> {
        let shapes = arch.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Config(format!(
                "architecture has {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (t, s)) in params.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {i} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(Classifier { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Deep copy with fresh gradient cells, detached from this model.
    fn detached_params(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::param(p.data().to_vec(), p.shape()))
            .collect()
    }

    /// Forward a `[batch, ..input_shape]` tensor to `(logits, trace)`,
    /// optionally under a tape with substitute parameters.
    pub(crate) fn forward_batch_inner(
        &self,
        x: &Tensor,
        params: &[Tensor],
    ) -> Result<(Tensor, Tensor)> {
        let batch = x.shape()[0];
        let mut cur = x.clone();
        let mut trace = None;
        let mut p = 0;
        let n_layers = self.arch.layers.len();
        for (i, layer) in self.arch.layers.iter().enumerate() {
            if i + 1 == n_layers {
                // Input to the logit layer is the deepest hidden activation.
                trace = Some(cur.clone());
            }
            cur = match layer {
                LayerSpec::Conv2d { .. } => {
                    let y = cur.conv2d(&params[p])?;
                    let y = y.add_channel_bias(&params[p + 1], true)?;
                    p += 2;
                    y
                }
                LayerSpec::Conv1d { .. } => {
                    let y = cur.conv1d(&params[p])?;
                    let y = y.add_channel_bias(&params[p + 1], true)?;
                    p += 2;
                    y
                }
                LayerSpec::Dense { .. } => {
                    let y = cur.matmul(&params[p])?;
                    let y = y.add_row_bias(&params[p + 1])?;
                    p += 2;
                    y
                }
                LayerSpec::Relu => cur.relu()?,
                LayerSpec::Flatten => {
                    let flat: usize = cur.shape()[1..].iter().product();
                    cur.reshape(&[batch, flat])?
                }
            };
        }
        Ok((cur, trace.expect("validated arch has at least one layer")))
    }

    /// Batched forward pass: returns `[b,c]` logits and `[b,h]` traces.
    pub fn forward_batch(&self, inputs: &[&Tensor]) -> Result<(Tensor, Tensor)> {
        let x = stack_batch(inputs, &self.arch.input_shape)?;
        self.forward_batch_inner(&x, &self.params)
    }

    /// Full forward pass on a single input.
    pub fn forward_full(&self, x: &Tensor) -> Result<ForwardFull> {
        if x.shape() != self.arch.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                self.arch.input_shape
            )));
        }
        let (logits_b, trace_b) = self.forward_batch(&[x])?;
        let c = self.arch.num_classes;
        let logits = Tensor::new(logits_b.data().to_vec(), &[c])?;
        let h = trace_b.len();
        let trace = Tensor::new(trace_b.data().to_vec(), &[h])?;
        let probs = logits.softmax()?;
        let predicted = probs.argmax()?;
        Ok(ForwardFull {
            logits,
            probs,
            predicted,
            trace,
        })
    }

    /// Predicted class for every dataset input.
    pub fn predict_dataset(&self, d: &Dataset) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(d.len());
        // Chunked batches keep memory flat.
        let chunk = 64;
        let c = self.arch.num_classes;
        let mut i = 0;
        while i < d.len() {
            let end = (i + chunk).min(d.len());
            let refs: Vec<&Tensor> = (i..end).map(|j| d.input(j)).collect();
            let (logits, _) = self.forward_batch(&refs)?;
            for r in 0..end - i {
                let row = &logits.data()[r * c..(r + 1) * c];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                out.push(best);
            }
            i = end;
        }
        Ok(out)
    }

    /// Fraction of dataset inputs classified correctly.
    pub fn accuracy(&self, d: &Dataset) -> Result<f64> {
        if d.is_empty() {
            return Err(Error::Data("accuracy of empty dataset".to_string()));
        }
        let pred = self.predict_dataset(d)?;
        let correct = pred
            .iter()
            .zip(d.labels())
            .filter(|(p, l)| p == l)
            .count();
        Ok(correct as f64 / d.len() as f64)
    }

    /// Persist in the binary model format (see module docs of [`save`]).
    pub fn save(&self, path: &Path) -> Result<()> {
        save(self, path)
    }
}

/// Stack per-item input tensors into one `[batch, ..shape]` tensor.
fn stack_batch(inputs: &[&Tensor], input_shape: &[usize]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::Data("empty batch".to_string()));
    }
    let mut data = Vec::with_capacity(inputs.len() * inputs[0].len());
    for t in inputs {
        if t.shape() != input_shape {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match model input {input_shape:?}",
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![inputs.len()];
    shape.extend_from_slice(input_shape);
    Tensor::new(data, &shape)
}

/// Train a fresh model of the given architecture.
///
/// Deterministic for a fixed config: weight init, batch shuffling and update
/// order are all driven by `cfg.seed`.
pub fn train(arch: &Arch, data: &Dataset, cfg: &TrainConfig) -> Result<Classifier> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".to_string()));
    }
    if data.num_classes() != arch.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, architecture expects {}",
            data.num_classes(),
            arch.num_classes
        )));
    }
    let mut model = Classifier::init(arch.clone(), cfg.seed)?;
    continue_training(&mut model, data, cfg)?;
    Ok(model)
}

/// Run `cfg.epochs` of minibatch SGD on `model` in place.
fn continue_training(model: &mut Classifier, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epoch", epoch as u64));
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&Tensor> = batch.iter().map(|&i| data.input(i)).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
            let x = stack_batch(&refs, &model.arch.input_shape)?;

            let tape = GradTape::new();
            let taped: Vec<Tensor> = model
                .params
                .iter()
                .map(|p| tape.watch(p))
                .collect::<Result<_>>()?;
            let (logits, _) = model.forward_batch_inner(&x, &taped)?;
            let loss = logits.softmax_cross_entropy_batch(&targets)?;
            backward(&loss)?;
            opt.step(&mut model.params)?;
        }
    }
    Ok(())
}

fn shuffle(xs: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// The seeded 80/20 split backing [`finetune`]: the fine-tuning pool and the
/// held-out validation set used for admissibility (and downstream for ODIN
/// threshold calibration).
pub fn finetune_validation_split(
    target_train: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Dataset, Dataset)> {
    let mut splits = split(
        target_train,
        &[0.8, 0.2],
        derive_seed(cfg.seed, "finetune-val", 0),
    )?;
    let val = splits.pop().expect("two splits").with_role(DatasetRole::Validation);
    let pool = splits.pop().expect("two splits");
    Ok((pool, val))
}

/// Continue training a pre-trained model on an `n_s`-sized seeded sample of
/// the target training set; evaluate admissibility on a held-out 20%
/// validation split disjoint from the sample.
///
/// The pre-trained model is not mutated. The scratch baseline uses the same
/// architecture and config, trained only on the sample.
pub fn finetune(
    m: &Classifier,
    target_train: &Dataset,
    n_s: usize,
    cfg: &TrainConfig,
) -> Result<(Classifier, FinetuneReport)> {
    cfg.validate()?;
    if n_s == 0 {
        return Err(Error::Config("n_s must be >= 1".to_string()));
    }
    if n_s > target_train.len() {
        return Err(Error::Config(format!(
            "n_s {} exceeds target training set size {}",
            n_s,
            target_train.len()
        )));
    }
    let (pool, val) = finetune_validation_split(target_train, cfg)?;
    let pool = &pool;
    if n_s > pool.len() {
        return Err(Error::Config(format!(
            "n_s {} exceeds the {} inputs left after the 20% validation holdout",
            n_s,
            pool.len()
        )));
    }

    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "finetune-sample", 0));
    shuffle(&mut idx, &mut rng);
    idx.truncate(n_s);
    idx.sort_unstable();
    let sample = pool.select(&idx, DatasetRole::TargetTrain)?;

    let mut tuned = Classifier {
        arch: m.arch.clone(),
        params: m.detached_params(),
    };
    continue_training(&mut tuned, &sample, cfg)?;

    let scratch = train(&m.arch, &sample, cfg)?;

    let acc_pre = m.accuracy(&val)?;
    let acc_ft = tuned.accuracy(&val)?;
    let acc_scratch = scratch.accuracy(&val)?;
    let report = FinetuneReport {
        acc_pretrained_on_target: acc_pre,
        acc_finetuned_on_target: acc_ft,
        acc_scratch_on_target: acc_scratch,
        n_s,
        admissible: acc_ft > acc_scratch && acc_ft > acc_pre,
    };
    Ok((tuned, report))
}

const MODEL_MAGIC: &[u8; 4] = b"MSEL";
const MODEL_VERSION: u32 = 1;

const TAG_CONV2D: u8 = 0;
const TAG_CONV1D: u8 = 1;
const TAG_DENSE: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_FLATTEN: u8 = 4;

/// Write the model file: magic "MSEL", u32 LE version 1, num_classes, input
/// shape (rank then dims), u32 layer count, per layer a u8 kind tag with u32
/// dims, then every parameter tensor as little-endian f64 in layer order.
pub fn save(m: &Classifier, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.arch.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(m.arch.input_shape.len() as u32).to_le_bytes());
    for &d in &m.arch.input_shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(m.arch.layers.len() as u32).to_le_bytes());
    for layer in &m.arch.layers {
        let (tag, dims): (u8, Vec<u32>) = match layer {
            LayerSpec::Conv2d {
                out_channels,
                kh,
                kw,
            } => (TAG_CONV2D, vec![*out_channels as u32, *kh as u32, *kw as u32]),
            LayerSpec::Conv1d { out_channels, k } => {
                (TAG_CONV1D, vec![*out_channels as u32, *k as u32])
            }
            LayerSpec::Dense { out } => (TAG_DENSE, vec![*out as u32]),
            LayerSpec::Relu => (TAG_RELU, vec![]),
            LayerSpec::Flatten => (TAG_FLATTEN, vec![]),
        };
        buf.push(tag);
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
    }
    for p in &m.params {
        for &v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read a model file written by [`save`]; forward outputs are reproduced
/// bitwise.
pub fn load(path: &Path) -> Result<Classifier> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };

    let magic = cur.take(4)?;
    if magic != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic, expected MSEL"));
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported model version {version}, expected {MODEL_VERSION}"),
        ));
    }
    let num_classes = cur.u32()? as usize;
    let rank = cur.u32()? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(cur.u32()? as usize);
    }
    let n_layers = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let at = cur.pos as u64;
        let tag = cur.u8()?;
        let n_dims = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(cur.u32()? as usize);
        }
        let layer = match (tag, dims.as_slice()) {
            (TAG_CONV2D, [o, kh, kw]) => LayerSpec::Conv2d {
                out_channels: *o,
                kh: *kh,
                kw: *kw,
            },
            (TAG_CONV1D, [o, k]) => LayerSpec::Conv1d {
                out_channels: *o,
                k: *k,
            },
            (TAG_DENSE, [o]) => LayerSpec::Dense { out: *o },
            (TAG_RELU, []) => LayerSpec::Relu,
            (TAG_FLATTEN, []) => LayerSpec::Flatten,
            _ => {
                return Err(Error::format(
                    at,
                    format!("unknown layer tag {tag} with {n_dims} dims"),
                ))
            }
        };
        layers.push(layer);
    }

    let arch = Arch::new(&input_shape, layers, num_classes)
        .map_err(|e| Error::format(cur.pos as u64, format!("invalid architecture: {e}")))?;
    let shapes = arch.param_shapes()?;
    let mut params = Vec::with_capacity(shapes.len());
    for shape in &shapes {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(cur.f64()?);
        }
        params.push(Tensor::param(data, shape));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    Classifier::with_params(arch, params)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("file truncated: wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests;

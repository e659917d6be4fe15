//! Dense numerics with hand-written reverse-mode gradients.
//!
//! A [`ModelSpec`] is an ordered list of layers applied to a batch. Every
//! model's parameters live in one flat [`ParamVector`], laid out layer by
//! layer, which is also the unit exchanged between federated clients.
//! Specs compose with [`ModelSpec::then`]; the parameters of a composed
//! model are the concatenation of the parts, so an encoder's weights are
//! always a prefix of the encoder+head vector.

mod checkpoint;
mod layers;
mod optim;

use serde::{Deserialize, Serialize};

use crate::contrastive::{ntxent, NtXentVariant};
use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{LayerSpec, Shape};
pub use optim::{adam_step, sgd_step, AdamState, Optimizer};

pub const NUM_CLASSES: usize = 3;

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Select rows by index.
    pub fn gather(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }
}

/// How a model consumes its input rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputKind {
    /// Row = `len` history values followed by `side` static features. The
    /// history enters as a `len x 1` sequence; side features are consumed by
    /// [`LayerSpec::ConcatSide`].
    Series { len: usize, side: usize },
    /// Row = plain feature vector.
    Vector { dim: usize },
}

impl InputKind {
    pub fn width(&self) -> usize {
        match *self {
            InputKind::Series { len, side } => len + side,
            InputKind::Vector { dim } => dim,
        }
    }

    fn side(&self) -> usize {
        match *self {
            InputKind::Series { side, .. } => side,
            InputKind::Vector { .. } => 0,
        }
    }

    fn initial_shape(&self) -> Shape {
        match *self {
            InputKind::Series { len, .. } => Shape { rows: len, cols: 1 },
            InputKind::Vector { dim } => Shape { rows: 1, cols: dim },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputKind,
    pub layers: Vec<LayerSpec>,
}

/// One named parameter tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub layer: usize,
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<ParamBlock>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], layout: self.layout.clone() }
    }

    /// Parameters of `front.then(back)` from the two parts; `front_layers`
    /// is the number of layers of the front model.
    pub fn concat(&self, other: &ParamVector, front_layers: usize) -> ParamVector {
        let mut layout = self.layout.clone();
        layout.extend(other.layout.iter().map(|b| ParamBlock {
            layer: b.layer + front_layers,
            offset: b.offset + self.values.len(),
            ..b.clone()
        }));
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        ParamVector { values, layout }
    }

    /// Inverse of [`ParamVector::concat`].
    pub fn split(&self, front_layers: usize) -> (ParamVector, ParamVector) {
        let n = self.layout.iter().find(|b| b.layer >= front_layers).map_or(self.values.len(), |b| b.offset);
        let head_layout: Vec<_> = self.layout.iter().filter(|b| b.layer < front_layers).cloned().collect();
        let tail_layout = self
            .layout
            .iter()
            .filter(|b| b.layer >= front_layers)
            .map(|b| ParamBlock { layer: b.layer - front_layers, offset: b.offset - n, ..b.clone() })
            .collect();
        (
            ParamVector { values: self.values[..n].to_vec(), layout: head_layout },
            ParamVector { values: self.values[n..].to_vec(), layout: tail_layout },
        )
    }

    pub fn block(&self, layer: usize, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|b| b.layer == layer && b.name == name)
            .map(|b| &self.values[b.offset..b.offset + b.size()])
    }

    pub fn block_mut(&mut self, layer: usize, name: &str) -> Option<&mut [f64]> {
        let b = self.layout.iter().find(|b| b.layer == layer && b.name == name)?.clone();
        Some(&mut self.values[b.offset..b.offset + b.size()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity `u.v / (|u| |v|)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("cosine of vectors of length {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity("zero-norm vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    /// One-hot rows, `B x C`.
    pub labels: Option<Matrix>,
}

impl Batch {
    pub fn unlabeled(inputs: Matrix) -> Self {
        Self { inputs, labels: None }
    }

    pub fn labeled(inputs: Matrix, classes: &[usize]) -> Result<Self> {
        if classes.len() != inputs.rows {
            return Err(Error::invalid("label count differs from batch size"));
        }
        let mut labels = Matrix::zeros(inputs.rows, NUM_CLASSES);
        for (i, &c) in classes.iter().enumerate() {
            if c >= NUM_CLASSES {
                return Err(Error::invalid(format!("class index {c} out of range")));
            }
            labels.data[i * NUM_CLASSES + c] = 1.0;
        }
        Ok(Self { inputs, labels: Some(labels) })
    }
}

/// Training objective evaluated on a model's output rows.
#[derive(Debug, Clone)]
pub enum LossKind<'a> {
    /// Class-ratio weighted cross entropy on logits.
    WeightedCe { ratios: [f64; NUM_CLASSES] },
    /// Contrastive loss on projection outputs; rows `2k, 2k+1` are positives.
    NtXent { tau: f64, variant: NtXentVariant },
    /// `base + (mu / 2) |w - anchor|^2`.
    Proximal { base: Box<LossKind<'a>>, anchor: &'a [f64], mu: f64 },
}

/// Intermediate values of one forward pass, consumed by backward.
pub struct Forward {
    pub output: Matrix,
    acts: Vec<layers::Tensor>,
    caches: Vec<layers::Cache>,
    side: Option<Matrix>,
}

impl ModelSpec {
    pub fn new(input: InputKind, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { input, layers };
        spec.output_shape()?;
        Ok(spec)
    }

    /// Append `other`, whose input must be a vector matching this output.
    pub fn then(&self, other: &ModelSpec) -> Result<ModelSpec> {
        let out = self.output_shape()?;
        match other.input {
            InputKind::Vector { dim } if out.rows == 1 && out.cols == dim => {}
            _ => return Err(Error::config(format!("cannot chain output {out:?} into input {:?}", other.input))),
        }
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        ModelSpec::new(self.input, layers)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        let mut shape = self.input.initial_shape();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(shape, self.input.side())
                .map_err(|e| Error::config(format!("layer {i} ({}): {e}", layer.name())))?;
        }
        Ok(shape)
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape().map(|s| s.rows * s.cols).unwrap_or(0)
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        let mut offset = 0;
        let mut out = Vec::new();
        let mut shape = self.input.initial_shape();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, dims) in layer.param_shapes(shape) {
                let size: usize = dims.iter().product();
                out.push(ParamBlock { layer: i, name: name.to_string(), offset, shape: dims });
                offset += size;
            }
            shape = layer.output_shape(shape, self.input.side()).expect("validated spec");
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(ParamBlock::size).sum()
    }

    /// Stable 64-bit digest of the architecture, used in checkpoints.
    pub fn digest(&self) -> u64 {
        let text = serde_json::to_string(self).expect("spec serializes");
        crate::rng::fnv64(text.as_bytes())
    }

    /// Fan-in scaled uniform initialization.
    pub fn init(&self, seed: u64) -> ParamVector {
        use rand::Rng;
        let layout = self.layout();
        let total = layout.iter().map(ParamBlock::size).sum();
        let mut values = vec![0.0; total];
        let mut rng = crate::rng::stream(seed, "init", 0);
        for b in &layout {
            let slot = &mut values[b.offset..b.offset + b.size()];
            match self.layers[b.layer].init_rule(&b.name, &b.shape) {
                layers::Init::Constant(c) => slot.fill(c),
                layers::Init::Uniform(a) => {
                    for v in slot.iter_mut() {
                        *v = rng.random_range(-a..a);
                    }
                }
            }
        }
        ParamVector { values, layout }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        let need = self.param_count();
        if params.values.len() != need {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, spec needs {need}",
                params.values.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamVector, inputs: &Matrix) -> Result<Forward> {
        self.check_params(params)?;
        if inputs.cols != self.input.width() {
            return Err(Error::invalid(format!(
                "input width {} does not match model input {}",
                inputs.cols,
                self.input.width()
            )));
        }
        if inputs.rows == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let (first, side) = layers::split_input(self.input, inputs);
        let layout = self.layout();
        let mut acts = vec![first];
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let p = layer_params(&layout, &params.values, i);
            let (out, cache) = layer.forward(&p, acts.last().unwrap(), side.as_ref());
            if !out.data.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric { layer: format!("layer {i} ({})", layer.name()) });
            }
            acts.push(out);
            caches.push(cache);
        }
        let last = acts.last().unwrap();
        let output = Matrix { rows: last.b, cols: last.rows * last.cols, data: last.data.clone() };
        Ok(Forward { output, acts, caches, side })
    }

    /// Back-propagate `d_output` (same shape as the forward output). Returns
    /// the parameter gradient and the gradient with respect to the input rows.
    pub fn backward(&self, params: &ParamVector, fwd: &Forward, d_output: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let layout = self.layout();
        let mut grad = vec![0.0; params.values.len()];
        let last = fwd.acts.last().unwrap();
        let mut d = layers::Tensor { b: last.b, rows: last.rows, cols: last.cols, data: d_output.data.clone() };
        let mut d_side = fwd.side.as_ref().map(|s| Matrix::zeros(s.rows, s.cols));
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let p = layer_params(&layout, &params.values, i);
            let mut g = layer_grads(&layout, &mut grad, i);
            d = layer.backward(&p, &mut g, &fwd.acts[i], &fwd.caches[i], &d, d_side.as_mut());
            if !d.data.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric { layer: format!("layer {i} ({}) backward", layer.name()) });
            }
        }
        Ok((grad, layers::join_input(self.input, &d, d_side.as_ref())))
    }

    /// Output rows only.
    pub fn predict(&self, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(params, inputs)?.output)
    }
}

fn layer_params<'p>(layout: &[ParamBlock], values: &'p [f64], layer: usize) -> Vec<&'p [f64]> {
    layout.iter().filter(|b| b.layer == layer).map(|b| &values[b.offset..b.offset + b.size()]).collect()
}

fn layer_grads<'g>(layout: &[ParamBlock], grad: &'g mut [f64], layer: usize) -> Vec<&'g mut [f64]> {
    let mut out = Vec::new();
    let mut rest: &'g mut [f64] = grad;
    let mut consumed = 0;
    for b in layout.iter().filter(|b| b.layer == layer) {
        let (_, tail) = std::mem::take(&mut rest).split_at_mut(b.offset - consumed);
        let (this, tail) = tail.split_at_mut(b.size());
        consumed = b.offset + b.size();
        out.push(this);
        rest = tail;
    }
    out
}

/// Weighted cross entropy `mean_b( -sum_x (1/w_x) p(x) ln q(x) )` on
/// probabilities.
pub fn loss_weighted_ce(probs: &Matrix, labels: &Matrix, ratios: &[f64; NUM_CLASSES]) -> Result<f64> {
    check_ratios(ratios)?;
    if probs.rows != labels.rows || probs.cols != NUM_CLASSES || labels.cols != NUM_CLASSES {
        return Err(Error::invalid("probability and label shapes differ"));
    }
    let mut total = 0.0;
    for i in 0..probs.rows {
        let q = probs.row(i);
        let s: f64 = q.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("probability row {i} sums to {s}")));
        }
        for x in 0..NUM_CLASSES {
            let p = labels.get(i, x);
            if p != 0.0 {
                total -= p / ratios[x] * q[x].ln();
            }
        }
    }
    Ok(total / probs.rows as f64)
}

fn check_ratios(ratios: &[f64; NUM_CLASSES]) -> Result<()> {
    if ratios.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::config(format!("class ratios must be positive, got {ratios:?}")));
    }
    Ok(())
}

/// Loss and output gradient of weighted cross entropy on logits.
fn weighted_ce_on_logits(logits: &Matrix, labels: &Matrix, ratios: &[f64; NUM_CLASSES]) -> Result<(f64, Matrix)> {
    check_ratios(ratios)?;
    let probs = softmax_rows(logits);
    let b = logits.rows as f64;
    let mut loss = 0.0;
    let mut d = Matrix::zeros(logits.rows, NUM_CLASSES);
    for i in 0..logits.rows {
        let q = probs.row(i);
        let p = labels.row(i);
        let mut weight_mass = 0.0;
        for x in 0..NUM_CLASSES {
            let c = p[x] / ratios[x];
            if c != 0.0 {
                loss -= c * q[x].ln();
            }
            weight_mass += c;
        }
        let row = d.row_mut(i);
        for k in 0..NUM_CLASSES {
            row[k] = (q[k] * weight_mass - p[k] / ratios[k]) / b;
        }
    }
    Ok((loss / b, d))
}

/// Loss and output gradient for `loss` evaluated on network outputs.
pub fn output_loss(kind: &LossKind<'_>, outputs: &Matrix, batch: &Batch) -> Result<(f64, Matrix)> {
    match kind {
        LossKind::WeightedCe { ratios } => {
            let labels = batch.labels.as_ref().ok_or_else(|| Error::invalid("weighted CE needs labels"))?;
            if outputs.cols != NUM_CLASSES {
                return Err(Error::invalid(format!("expected {NUM_CLASSES} logits, got {}", outputs.cols)));
            }
            weighted_ce_on_logits(outputs, labels, ratios)
        }
        LossKind::NtXent { tau, variant } => ntxent(outputs, *tau, *variant),
        LossKind::Proximal { base, .. } => output_loss(base, outputs, batch),
    }
}

/// Loss value and parameter gradient of `spec` on `batch`.
pub fn grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch, loss: &LossKind<'_>) -> Result<(f64, ParamVector)> {
    let fwd = spec.forward(params, &batch.inputs)?;
    let (mut value, d_out) = output_loss(loss, &fwd.output, batch)?;
    let (mut g, _) = spec.backward(params, &fwd, &d_out)?;
    add_proximal(loss, &params.values, &mut value, &mut g)?;
    if !value.is_finite() {
        return Err(Error::Numeric { layer: "loss".into() });
    }
    Ok((value, ParamVector { values: g, layout: params.layout.clone() }))
}

/// Adds the proximal penalty (if any) to a loss value and its gradient.
pub(crate) fn add_proximal(loss: &LossKind<'_>, w: &[f64], value: &mut f64, g: &mut [f64]) -> Result<()> {
    if let LossKind::Proximal { base, anchor, mu } = loss {
        if anchor.len() != w.len() {
            return Err(Error::invalid("proximal anchor has a different layout"));
        }
        if *mu != 0.0 {
            let mut sq = 0.0;
            for ((gi, wi), ai) in g.iter_mut().zip(w).zip(anchor.iter()) {
                let d = wi - ai;
                sq += d * d;
                *gi += mu * d;
            }
            *value += 0.5 * mu * sq;
        }
        add_proximal(base, w, value, g)?;
    }
    Ok(())
}

/// Architecture presets.
pub mod presets {
    use super::*;

    pub const SIDE_FEATURES: usize = 24 + 7 + 2;

    /// Encoder widths.
    #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
    pub struct EncoderDims {
        pub history: usize,
        /// Convolution channels = attention width.
        pub channels: usize,
        /// Position-wise feed-forward width (0 disables the block).
        pub ffn: usize,
        pub repr: usize,
    }

    /// Conv1d(k=3) -> positional embedding -> single-head self-attention ->
    /// layer norm -> optional position-wise FFN -> mean pool -> concat
    /// time/cell features -> dense to the representation.
    pub fn conv_attention_encoder(d: EncoderDims) -> Result<ModelSpec> {
        let c = d.channels;
        let mut layers = vec![
            LayerSpec::Conv1d { in_ch: 1, out_ch: c, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::PosEmbed { len: d.history, dim: c },
            LayerSpec::SelfAttention { dim: c, residual: true },
            LayerSpec::LayerNorm { dim: c },
        ];
        if d.ffn > 0 {
            layers.push(LayerSpec::Dense { input: c, output: d.ffn });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Dense { input: d.ffn, output: c });
        }
        layers.extend([
            LayerSpec::MeanPool,
            LayerSpec::ConcatSide,
            LayerSpec::Dense { input: c + SIDE_FEATURES, output: d.repr },
            LayerSpec::Relu,
        ]);
        ModelSpec::new(InputKind::Series { len: d.history, side: SIDE_FEATURES }, layers)
    }

    /// Fallback encoder: flatten history, concat features, two dense layers.
    pub fn mlp_encoder(history: usize, hidden: usize, repr: usize) -> Result<ModelSpec> {
        ModelSpec::new(
            InputKind::Series { len: history, side: SIDE_FEATURES },
            vec![
                LayerSpec::Flatten,
                LayerSpec::ConcatSide,
                LayerSpec::Dense { input: history + SIDE_FEATURES, output: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { input: hidden, output: repr },
                LayerSpec::Relu,
            ],
        )
    }

    /// One-hidden-layer projection head `g`.
    pub fn projection_head(repr: usize, hidden: usize, out: usize) -> Result<ModelSpec> {
        ModelSpec::new(
            InputKind::Vector { dim: repr },
            vec![
                LayerSpec::Dense { input: repr, output: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { input: hidden, output: out },
            ],
        )
    }

    /// Two-layer MLP classifier producing class logits.
    pub fn classifier(repr: usize, hidden: usize) -> Result<ModelSpec> {
        ModelSpec::new(
            InputKind::Vector { dim: repr },
            vec![
                LayerSpec::Dense { input: repr, output: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { input: hidden, output: NUM_CLASSES },
            ],
        )
    }

    /// Encoder, projection head and classifier sized to roughly 0.76M
    /// parameters in total.
    pub fn full_scale() -> Result<(ModelSpec, ModelSpec, ModelSpec)> {
        let dims = EncoderDims { history: 24, channels: 216, ffn: 864, repr: 256 };
        Ok((conv_attention_encoder(dims)?, projection_head(dims.repr, 256, 128)?, classifier(dims.repr, 128)?))
    }
}

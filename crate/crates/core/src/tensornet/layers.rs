use serde::{Deserialize, Serialize};

use super::{InputKind, Matrix};

const LN_EPS: f64 = 1e-5;

/// Per-sample activation shape (`rows x cols`); vectors have one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Affine map over the last axis, applied to every row.
    Dense {
        input: usize,
        output: usize,
    },
    /// Temporal convolution with zero "same" padding; `kernel` must be odd.
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    /// Learned additive position table.
    PosEmbed {
        len: usize,
        dim: usize,
    },
    /// Single-head scaled dot-product self-attention over all positions.
    SelfAttention {
        dim: usize,
        residual: bool,
    },
    LayerNorm {
        dim: usize,
    },
    Relu,
    MeanPool,
    Flatten,
    /// Append the static side features of the input row.
    ConcatSide,
}

pub(crate) enum Init {
    Constant(f64),
    Uniform(f64),
}

/// Batched activation: `b` samples of `rows x cols`.
#[derive(Debug, Clone)]
pub(crate) struct Tensor {
    pub b: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(b: usize, rows: usize, cols: usize) -> Self {
        Self { b, rows, cols, data: vec![0.0; b * rows * cols] }
    }

    fn sample(&self, i: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[i * n..(i + 1) * n]
    }
}

pub(crate) enum Cache {
    None,
    Attention { q: Vec<f64>, k: Vec<f64>, v: Vec<f64>, p: Vec<f64>, o: Vec<f64> },
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
}

pub(crate) fn split_input(kind: InputKind, inputs: &Matrix) -> (Tensor, Option<Matrix>) {
    match kind {
        InputKind::Vector { dim } => (Tensor { b: inputs.rows, rows: 1, cols: dim, data: inputs.data.clone() }, None),
        InputKind::Series { len, side } => {
            let mut hist = Vec::with_capacity(inputs.rows * len);
            let mut feats = Vec::with_capacity(inputs.rows * side);
            for i in 0..inputs.rows {
                let row = inputs.row(i);
                hist.extend_from_slice(&row[..len]);
                feats.extend_from_slice(&row[len..]);
            }
            (
                Tensor { b: inputs.rows, rows: len, cols: 1, data: hist },
                Some(Matrix { rows: inputs.rows, cols: side, data: feats }),
            )
        }
    }
}

pub(crate) fn join_input(kind: InputKind, d: &Tensor, d_side: Option<&Matrix>) -> Matrix {
    match kind {
        InputKind::Vector { dim } => Matrix { rows: d.b, cols: dim, data: d.data.clone() },
        InputKind::Series { len, side } => {
            let mut out = Matrix::zeros(d.b, len + side);
            for i in 0..d.b {
                let row = out.row_mut(i);
                row[..len].copy_from_slice(d.sample(i));
                if let Some(s) = d_side {
                    row[len..].copy_from_slice(s.row(i));
                }
            }
            out
        }
    }
}

// C (m x n) += A (m x k) * B (k x n)
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// C (m x n) += A^T B with A (k x m), B (k x n)
fn mm_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// C (m x n) += A B^T with A (m x k), B (n x k)
fn mm_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += super::dot(arow, brow);
        }
    }
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::PosEmbed { .. } => "pos_embed",
            LayerSpec::SelfAttention { .. } => "self_attention",
            LayerSpec::LayerNorm { .. } => "layer_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::MeanPool => "mean_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ConcatSide => "concat_side",
        }
    }

    pub fn output_shape(&self, s: Shape, side: usize) -> Result<Shape, String> {
        match *self {
            LayerSpec::Dense { input, output } => {
                if s.cols != input {
                    return Err(format!("expects width {input}, got {}", s.cols));
                }
                if input == 0 || output == 0 {
                    return Err("zero width".into());
                }
                Ok(Shape { rows: s.rows, cols: output })
            }
            LayerSpec::Conv1d { in_ch, out_ch, kernel } => {
                if s.cols != in_ch {
                    return Err(format!("expects {in_ch} channels, got {}", s.cols));
                }
                if kernel % 2 == 0 || out_ch == 0 {
                    return Err("kernel must be odd and out_ch positive".into());
                }
                Ok(Shape { rows: s.rows, cols: out_ch })
            }
            LayerSpec::PosEmbed { len, dim } => {
                if s.rows != len || s.cols != dim {
                    return Err(format!("expects {len}x{dim}, got {}x{}", s.rows, s.cols));
                }
                Ok(s)
            }
            LayerSpec::SelfAttention { dim, .. } | LayerSpec::LayerNorm { dim } => {
                if s.cols != dim || dim == 0 {
                    return Err(format!("expects width {dim}, got {}", s.cols));
                }
                Ok(s)
            }
            LayerSpec::Relu => Ok(s),
            LayerSpec::MeanPool => Ok(Shape { rows: 1, cols: s.cols }),
            LayerSpec::Flatten => Ok(Shape { rows: 1, cols: s.rows * s.cols }),
            LayerSpec::ConcatSide => {
                if s.rows != 1 {
                    return Err("needs a pooled vector".into());
                }
                if side == 0 {
                    return Err("model input has no side features".into());
                }
                Ok(Shape { rows: 1, cols: s.cols + side })
            }
        }
    }

    pub fn param_shapes(&self, _s: Shape) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { input, output } => vec![("weight", vec![input, output]), ("bias", vec![output])],
            LayerSpec::Conv1d { in_ch, out_ch, kernel } => {
                vec![("weight", vec![kernel, in_ch, out_ch]), ("bias", vec![out_ch])]
            }
            LayerSpec::PosEmbed { len, dim } => vec![("table", vec![len, dim])],
            LayerSpec::SelfAttention { dim, .. } => {
                vec![("wq", vec![dim, dim]), ("wk", vec![dim, dim]), ("wv", vec![dim, dim]), ("wo", vec![dim, dim])]
            }
            LayerSpec::LayerNorm { dim } => vec![("gamma", vec![dim]), ("beta", vec![dim])],
            _ => Vec::new(),
        }
    }

    pub(crate) fn init_rule(&self, name: &str, shape: &[usize]) -> Init {
        match (self, name) {
            (LayerSpec::LayerNorm { .. }, "gamma") => Init::Constant(1.0),
            (LayerSpec::LayerNorm { .. }, _) => Init::Constant(0.0),
            (LayerSpec::PosEmbed { .. }, _) => Init::Uniform(0.1),
            (LayerSpec::Conv1d { in_ch, kernel, .. }, _) => Init::Uniform(1.0 / ((in_ch * kernel) as f64).sqrt()),
            (LayerSpec::Dense { input, .. }, _) => Init::Uniform(1.0 / (*input as f64).sqrt()),
            _ => Init::Uniform(1.0 / (shape[0] as f64).sqrt()),
        }
    }

    pub(crate) fn forward(&self, p: &[&[f64]], x: &Tensor, side: Option<&Matrix>) -> (Tensor, Cache) {
        match *self {
            LayerSpec::Dense { input, output } => {
                let n = x.b * x.rows;
                let mut out = Tensor::zeros(x.b, x.rows, output);
                for r in 0..n {
                    out.data[r * output..(r + 1) * output].copy_from_slice(p[1]);
                }
                mm_acc(&x.data, p[0], &mut out.data, n, input, output);
                (out, Cache::None)
            }
            LayerSpec::Conv1d { in_ch, out_ch, kernel } => {
                let (w, bias) = (p[0], p[1]);
                let len = x.rows;
                let pad = kernel / 2;
                let mut out = Tensor::zeros(x.b, len, out_ch);
                for s in 0..x.b {
                    let xs = x.sample(s);
                    let os = &mut out.data[s * len * out_ch..(s + 1) * len * out_ch];
                    for t in 0..len {
                        let orow = &mut os[t * out_ch..(t + 1) * out_ch];
                        orow.copy_from_slice(bias);
                        for j in 0..kernel {
                            let src = t + j;
                            if src < pad || src - pad >= len {
                                continue;
                            }
                            let xrow = &xs[(src - pad) * in_ch..(src - pad + 1) * in_ch];
                            for (i, &xv) in xrow.iter().enumerate() {
                                let wrow = &w[(j * in_ch + i) * out_ch..(j * in_ch + i + 1) * out_ch];
                                for (o, wv) in orow.iter_mut().zip(wrow) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
                (out, Cache::None)
            }
            LayerSpec::PosEmbed { .. } => {
                let mut out = x.clone();
                let n = x.rows * x.cols;
                for s in 0..x.b {
                    for (o, t) in out.data[s * n..(s + 1) * n].iter_mut().zip(p[0]) {
                        *o += t;
                    }
                }
                (out, Cache::None)
            }
            LayerSpec::SelfAttention { dim: d, residual } => {
                let (wq, wk, wv, wo) = (p[0], p[1], p[2], p[3]);
                let l = x.rows;
                let scale = 1.0 / (d as f64).sqrt();
                let mut q = vec![0.0; x.data.len()];
                let mut k = vec![0.0; x.data.len()];
                let mut v = vec![0.0; x.data.len()];
                let mut o = vec![0.0; x.data.len()];
                let mut probs = vec![0.0; x.b * l * l];
                let mut out = if residual { x.clone() } else { Tensor::zeros(x.b, l, d) };
                let n = l * d;
                for s in 0..x.b {
                    let xs = x.sample(s);
                    let r = s * n..(s + 1) * n;
                    mm_acc(xs, wq, &mut q[r.clone()], l, d, d);
                    mm_acc(xs, wk, &mut k[r.clone()], l, d, d);
                    mm_acc(xs, wv, &mut v[r.clone()], l, d, d);
                    let ps = &mut probs[s * l * l..(s + 1) * l * l];
                    mm_a_bt_acc(&q[r.clone()], &k[r.clone()], ps, l, d, l);
                    for row in ps.chunks_mut(l) {
                        row.iter_mut().for_each(|z| *z *= scale);
                        super::softmax_in_place(row);
                    }
                    mm_acc(ps, &v[r.clone()], &mut o[r.clone()], l, l, d);
                    mm_acc(&o[r.clone()], wo, &mut out.data[r], l, d, d);
                }
                (out, Cache::Attention { q, k, v, p: probs, o })
            }
            LayerSpec::LayerNorm { dim } => {
                let (gamma, beta) = (p[0], p[1]);
                let n = x.b * x.rows;
                let mut out = Tensor::zeros(x.b, x.rows, dim);
                let mut xhat = vec![0.0; x.data.len()];
                let mut inv_std = vec![0.0; n];
                for r in 0..n {
                    let xr = &x.data[r * dim..(r + 1) * dim];
                    let mean = xr.iter().sum::<f64>() / dim as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
                    let is = 1.0 / (var + LN_EPS).sqrt();
                    inv_std[r] = is;
                    for c in 0..dim {
                        let h = (xr[c] - mean) * is;
                        xhat[r * dim + c] = h;
                        out.data[r * dim + c] = gamma[c] * h + beta[c];
                    }
                }
                (out, Cache::Norm { xhat, inv_std })
            }
            LayerSpec::Relu => {
                let mut out = x.clone();
                out.data.iter_mut().for_each(|v| *v = v.max(0.0));
                (out, Cache::None)
            }
            LayerSpec::MeanPool => {
                let mut out = Tensor::zeros(x.b, 1, x.cols);
                let inv = 1.0 / x.rows as f64;
                for s in 0..x.b {
                    let xs = x.sample(s);
                    let os = &mut out.data[s * x.cols..(s + 1) * x.cols];
                    for row in xs.chunks(x.cols) {
                        for (o, v) in os.iter_mut().zip(row) {
                            *o += v * inv;
                        }
                    }
                }
                (out, Cache::None)
            }
            LayerSpec::Flatten => {
                (Tensor { b: x.b, rows: 1, cols: x.rows * x.cols, data: x.data.clone() }, Cache::None)
            }
            LayerSpec::ConcatSide => {
                let side = side.expect("validated: series input");
                let w = x.cols + side.cols;
                let mut out = Tensor::zeros(x.b, 1, w);
                for s in 0..x.b {
                    out.data[s * w..s * w + x.cols].copy_from_slice(x.sample(s));
                    out.data[s * w + x.cols..(s + 1) * w].copy_from_slice(side.row(s));
                }
                (out, Cache::None)
            }
        }
    }

    pub(crate) fn backward(
        &self,
        p: &[&[f64]],
        g: &mut [&mut [f64]],
        x: &Tensor,
        cache: &Cache,
        d: &Tensor,
        d_side: Option<&mut Matrix>,
    ) -> Tensor {
        match *self {
            LayerSpec::Dense { input, output } => {
                let n = x.b * x.rows;
                let mut dx = Tensor::zeros(x.b, x.rows, input);
                mm_at_b_acc(&x.data, &d.data, &mut *g[0], n, input, output);
                for row in d.data.chunks(output) {
                    for (gb, dv) in g[1].iter_mut().zip(row) {
                        *gb += dv;
                    }
                }
                mm_a_bt_acc(&d.data, p[0], &mut dx.data, n, output, input);
                dx
            }
            LayerSpec::Conv1d { in_ch, out_ch, kernel } => {
                let w = p[0];
                let len = x.rows;
                let pad = kernel / 2;
                let mut dx = Tensor::zeros(x.b, len, in_ch);
                for s in 0..x.b {
                    let xs = x.sample(s);
                    let ds = d.sample(s);
                    for t in 0..len {
                        let drow = &ds[t * out_ch..(t + 1) * out_ch];
                        for (gb, dv) in g[1].iter_mut().zip(drow) {
                            *gb += dv;
                        }
                        for j in 0..kernel {
                            let src = t + j;
                            if src < pad || src - pad >= len {
                                continue;
                            }
                            let pos = src - pad;
                            for i in 0..in_ch {
                                let widx = (j * in_ch + i) * out_ch;
                                let xv = xs[pos * in_ch + i];
                                let gw = &mut g[0][widx..widx + out_ch];
                                let mut acc = 0.0;
                                for ((gwv, dv), wv) in gw.iter_mut().zip(drow).zip(&w[widx..widx + out_ch]) {
                                    *gwv += xv * dv;
                                    acc += wv * dv;
                                }
                                dx.data[s * len * in_ch + pos * in_ch + i] += acc;
                            }
                        }
                    }
                }
                dx
            }
            LayerSpec::PosEmbed { .. } => {
                let n = x.rows * x.cols;
                for s in 0..x.b {
                    for (gt, dv) in g[0].iter_mut().zip(&d.data[s * n..(s + 1) * n]) {
                        *gt += dv;
                    }
                }
                d.clone()
            }
            LayerSpec::SelfAttention { dim: dd, residual } => {
                let Cache::Attention { q, k, v, p: probs, o } = cache else { unreachable!() };
                let (wq, wk, wv, wo) = (p[0], p[1], p[2], p[3]);
                let l = x.rows;
                let n = l * dd;
                let scale = 1.0 / (dd as f64).sqrt();
                let mut dx = if residual { d.clone() } else { Tensor::zeros(x.b, l, dd) };
                let mut d_o = vec![0.0; n];
                let mut dp = vec![0.0; l * l];
                let mut dq = vec![0.0; n];
                let mut dk = vec![0.0; n];
                let mut dv = vec![0.0; n];
                for s in 0..x.b {
                    let r = s * n..(s + 1) * n;
                    let xs = x.sample(s);
                    let dy = d.sample(s);
                    let ps = &probs[s * l * l..(s + 1) * l * l];
                    d_o.fill(0.0);
                    dp.fill(0.0);
                    dq.fill(0.0);
                    dk.fill(0.0);
                    dv.fill(0.0);
                    // Y = O Wo
                    mm_at_b_acc(&o[r.clone()], dy, &mut *g[3], l, dd, dd);
                    mm_a_bt_acc(dy, wo, &mut d_o, l, dd, dd);
                    // O = P V
                    mm_a_bt_acc(&d_o, &v[r.clone()], &mut dp, l, dd, l);
                    mm_at_b_acc(ps, &d_o, &mut dv, l, l, dd);
                    // P = softmax(scale * Q K^T)
                    for i in 0..l {
                        let prow = &ps[i * l..(i + 1) * l];
                        let drow = &mut dp[i * l..(i + 1) * l];
                        let inner: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (dz, pv) in drow.iter_mut().zip(prow) {
                            *dz = pv * (*dz - inner) * scale;
                        }
                    }
                    mm_acc(&dp, &k[r.clone()], &mut dq, l, l, dd);
                    mm_at_b_acc(&dp, &q[r.clone()], &mut dk, l, l, dd);
                    mm_at_b_acc(xs, &dq, &mut *g[0], l, dd, dd);
                    mm_at_b_acc(xs, &dk, &mut *g[1], l, dd, dd);
                    mm_at_b_acc(xs, &dv, &mut *g[2], l, dd, dd);
                    let dxs = &mut dx.data[r];
                    mm_a_bt_acc(&dq, wq, dxs, l, dd, dd);
                    mm_a_bt_acc(&dk, wk, dxs, l, dd, dd);
                    mm_a_bt_acc(&dv, wv, dxs, l, dd, dd);
                }
                dx
            }
            LayerSpec::LayerNorm { dim } => {
                let Cache::Norm { xhat, inv_std } = cache else { unreachable!() };
                let gamma = p[0];
                let n = x.b * x.rows;
                let mut dx = Tensor::zeros(x.b, x.rows, dim);
                let mut dxhat = vec![0.0; dim];
                for r in 0..n {
                    let dr = &d.data[r * dim..(r + 1) * dim];
                    let hr = &xhat[r * dim..(r + 1) * dim];
                    for c in 0..dim {
                        g[0][c] += dr[c] * hr[c];
                        g[1][c] += dr[c];
                        dxhat[c] = dr[c] * gamma[c];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / dim as f64;
                    let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                    for c in 0..dim {
                        dx.data[r * dim + c] = inv_std[r] * (dxhat[c] - m1 - hr[c] * m2);
                    }
                }
                dx
            }
            LayerSpec::Relu => {
                let mut dx = d.clone();
                for (dv, xv) in dx.data.iter_mut().zip(&x.data) {
                    if *xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                dx
            }
            LayerSpec::MeanPool => {
                let mut dx = Tensor::zeros(x.b, x.rows, x.cols);
                let inv = 1.0 / x.rows as f64;
                for s in 0..x.b {
                    let ds = d.sample(s);
                    let n = x.rows * x.cols;
                    for row in dx.data[s * n..(s + 1) * n].chunks_mut(x.cols) {
                        for (o, dv) in row.iter_mut().zip(ds) {
                            *o = dv * inv;
                        }
                    }
                }
                dx
            }
            LayerSpec::Flatten => Tensor { b: x.b, rows: x.rows, cols: x.cols, data: d.data.clone() },
            LayerSpec::ConcatSide => {
                let w = d.cols;
                let mut dx = Tensor::zeros(x.b, 1, x.cols);
                let ds = d_side.expect("validated: series input");
                for s in 0..x.b {
                    dx.data[s * x.cols..(s + 1) * x.cols].copy_from_slice(&d.data[s * w..s * w + x.cols]);
                    for (o, dv) in ds.row_mut(s).iter_mut().zip(&d.data[s * w + x.cols..(s + 1) * w]) {
                        *o += dv;
                    }
                }
                dx
            }
        }
    }
}

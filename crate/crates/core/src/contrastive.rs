//! Self-supervised pretraining: time-series augmentations, positive-pair
//! batches and the NT-Xent loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensornet::{grad, Batch, LossKind, Matrix, ModelSpec, Optimizer, ParamVector};

/// One stochastic transformation of a demand history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugSpec {
    /// Gaussian jitter with std `sigma` times the series std.
    Noise {
        sigma: f64,
    },
    /// Random contiguous window covering a fraction in `[lo, hi]` of the
    /// series, stretched back to full length.
    Crop {
        lo: f64,
        hi: f64,
    },
    /// Zero out `ceil(fraction * L)` random points.
    Mask {
        fraction: f64,
    },
    /// Swap `swaps` random index pairs.
    Flip {
        swaps: usize,
    },
    Reverse,
}

impl AugSpec {
    pub const NOISE: AugSpec = AugSpec::Noise { sigma: 0.3 };
    pub const CROP: AugSpec = AugSpec::Crop { lo: 0.6, hi: 0.9 };
    pub const MASK: AugSpec = AugSpec::Mask { fraction: 0.1 };
    pub const FLIP: AugSpec = AugSpec::Flip { swaps: 2 };

    pub fn label(&self) -> &'static str {
        match self {
            AugSpec::Noise { .. } => "noise",
            AugSpec::Crop { .. } => "crop",
            AugSpec::Mask { .. } => "mask",
            AugSpec::Flip { .. } => "flip",
            AugSpec::Reverse => "reverse",
        }
    }

    /// `name` with default parameters, or `name:p1[:p2]`, e.g. `crop:0.8:1.0`.
    pub fn by_name(text: &str) -> Result<AugSpec> {
        let mut parts = text.split(':');
        let name = parts.next().unwrap_or_default();
        let params = parts
            .map(|p| p.parse::<f64>().map_err(|_| Error::config(format!("bad augmentation parameter in {text:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        let base = Self::named(name)?;
        let spec = match (base, params.as_slice()) {
            (_, []) => base,
            (AugSpec::Noise { .. }, &[sigma]) => AugSpec::Noise { sigma },
            (AugSpec::Crop { .. }, &[lo, hi]) => AugSpec::Crop { lo, hi },
            (AugSpec::Mask { .. }, &[fraction]) => AugSpec::Mask { fraction },
            (AugSpec::Flip { .. }, &[swaps]) if swaps >= 0.0 && swaps.fract() == 0.0 => {
                AugSpec::Flip { swaps: swaps as usize }
            }
            _ => return Err(Error::config(format!("wrong parameters for augmentation {text:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn named(name: &str) -> Result<AugSpec> {
        Ok(match name {
            "noise" => Self::NOISE,
            "crop" | "cropping" => Self::CROP,
            "mask" | "masking" => Self::MASK,
            "flip" | "flipping" => Self::FLIP,
            "reverse" => AugSpec::Reverse,
            other => return Err(Error::config(format!("unknown augmentation {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AugSpec::Noise { sigma } => sigma >= 0.0 && sigma.is_finite(),
            AugSpec::Crop { lo, hi } => lo > 0.0 && lo <= hi && hi <= 1.0,
            AugSpec::Mask { fraction } => fraction > 0.0 && fraction < 1.0,
            AugSpec::Flip { .. } | AugSpec::Reverse => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid augmentation parameters {self:?}")))
        }
    }
}

/// The composition applied to each view when nothing else is configured.
pub fn default_augs() -> Vec<AugSpec> {
    vec![AugSpec::NOISE, AugSpec::CROP]
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Linear resampling of `x[start..start + width]` back to `x.len()` points.
pub fn crop_resample(x: &[f64], start: usize, width: usize) -> Vec<f64> {
    let l = x.len();
    let w = &x[start..start + width];
    if width == 1 {
        return vec![w[0]; l];
    }
    (0..l)
        .map(|t| {
            let pos = t as f64 * (width - 1) as f64 / (l - 1) as f64;
            let i = (pos.floor() as usize).min(width - 2);
            let frac = pos - i as f64;
            w[i] * (1.0 - frac) + w[i + 1] * frac
        })
        .collect()
}

/// Apply one augmentation; the output always has the input's length.
pub fn augment<R: Rng + ?Sized>(history: &[f64], spec: &AugSpec, rng: &mut R) -> Vec<f64> {
    let l = history.len();
    let mut out = history.to_vec();
    if l == 0 {
        return out;
    }
    match *spec {
        AugSpec::Noise { sigma } => {
            let s = sigma * std_dev(history);
            if s > 0.0 {
                for v in &mut out {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += s * z;
                }
            }
        }
        AugSpec::Crop { lo, hi } => {
            let r = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let width = ((r * l as f64).round() as usize).clamp(1, l);
            let start = rng.random_range(0..=l - width);
            out = crop_resample(history, start, width);
        }
        AugSpec::Mask { fraction } => {
            let k = ((fraction * l as f64).ceil() as usize).min(l);
            let mut idx: Vec<usize> = (0..l).collect();
            idx.partial_shuffle(rng, k);
            for &i in &idx[..k] {
                out[i] = 0.0;
            }
        }
        AugSpec::Flip { swaps } => {
            if l >= 2 {
                for _ in 0..swaps {
                    let a = rng.random_range(0..l);
                    let b = rng.random_range(0..l);
                    out.swap(a, b);
                }
            }
        }
        AugSpec::Reverse => out.reverse(),
    }
    out
}

/// Two augmented views per input row. Rows `2k` and `2k+1` of the result
/// derive from row `k`; only the first `history_len` columns are augmented.
pub fn make_pairs<R: Rng + ?Sized>(
    inputs: &Matrix,
    history_len: usize,
    aug_a: &[AugSpec],
    aug_b: &[AugSpec],
    rng: &mut R,
) -> Result<Matrix> {
    if inputs.rows < 2 {
        return Err(Error::invalid("a pair batch needs at least two samples"));
    }
    if history_len > inputs.cols {
        return Err(Error::invalid("history longer than input row"));
    }
    let mut out = Matrix::zeros(inputs.rows * 2, inputs.cols);
    for k in 0..inputs.rows {
        let src = inputs.row(k);
        for (view, augs) in [aug_a, aug_b].into_iter().enumerate() {
            let mut h = src[..history_len].to_vec();
            for a in augs {
                h = augment(&h, a, rng);
            }
            let row = out.row_mut(2 * k + view);
            row[..history_len].copy_from_slice(&h);
            row[history_len..].copy_from_slice(&src[history_len..]);
        }
    }
    Ok(out)
}

/// Index set of the NT-Xent denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NtXentVariant {
    /// Anchor compared against every other row (self-term excluded).
    #[default]
    Standard,
    /// Literal reading: every row except the anchor compared against the
    /// positive, so the positive's self-similarity enters the sum.
    Printed,
}

/// NT-Xent over `2B` projection rows where rows `2k`, `2k+1` are positives.
/// Returns the mean over all `2B` anchors and its gradient w.r.t. `z`.
pub fn ntxent(z: &Matrix, tau: f64, variant: NtXentVariant) -> Result<(f64, Matrix)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let n = z.rows;
    if n < 4 || n % 2 != 0 {
        return Err(Error::invalid(format!("NT-Xent needs an even row count >= 4, got {n}")));
    }
    let d = z.cols;
    let mut u = z.clone();
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let nr = crate::tensornet::norm(z.row(i));
        if nr == 0.0 || !nr.is_finite() {
            return Err(Error::Numeric { layer: format!("ntxent row {i}") });
        }
        norms[i] = nr;
        u.row_mut(i).iter_mut().for_each(|v| *v /= nr);
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for k in i..n {
            let v = crate::tensornet::dot(u.row(i), u.row(k)) / tau;
            s[i * n + k] = v;
            s[k * n + i] = v;
        }
    }
    // Cosines are bounded, so one shift of 1/tau keeps every exp in range
    // unless tau is tiny; then each row is shifted by its own max.
    let shared = 2.0 / tau < 600.0;
    let mut ex = vec![0.0; n * n];
    if shared {
        let shift = 1.0 / tau;
        for i in 0..n {
            for k in i..n {
                let v = (s[i * n + k] - shift).exp();
                ex[i * n + k] = v;
                ex[k * n + i] = v;
            }
        }
    }
    // ds[i][k]: gradient of the total loss w.r.t. s_ik (not symmetrised).
    let mut ds = vec![0.0; n * n];
    let mut total = 0.0;
    let scale = 1.0 / n as f64;
    let mut e = vec![0.0; n];
    for i in 0..n {
        let j = i ^ 1;
        // denominator entries: s[i][k] (standard) or s[k][j] = s[j][k] (printed), k != i
        let r = match variant {
            NtXentVariant::Standard => i,
            NtXentVariant::Printed => j,
        };
        let row = &s[r * n..(r + 1) * n];
        let m = if shared {
            e.copy_from_slice(&ex[r * n..(r + 1) * n]);
            1.0 / tau
        } else {
            let m = row.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            for (ek, &v) in e.iter_mut().zip(row) {
                *ek = (v - m).exp();
            }
            m
        };
        e[i] = 0.0;
        let sum: f64 = e.iter().sum();
        total += m + sum.ln() - s[i * n + j];
        let w = scale / sum;
        match variant {
            NtXentVariant::Standard => {
                for (d, &ek) in ds[i * n..(i + 1) * n].iter_mut().zip(&e) {
                    *d += w * ek;
                }
            }
            NtXentVariant::Printed => {
                for (k, &ek) in e.iter().enumerate() {
                    ds[k * n + j] += w * ek;
                }
            }
        }
        ds[i * n + j] -= scale;
    }
    // s_ab = u_a . u_b / tau, so du = G u with G = (ds + ds^T) / tau
    for a in 0..n {
        for b in a..n {
            let g = (ds[a * n + b] + ds[b * n + a]) / tau;
            ds[a * n + b] = g;
            ds[b * n + a] = g;
        }
    }
    let mut du = Matrix::zeros(n, d);
    for a in 0..n {
        let out = &mut du.data[a * d..(a + 1) * d];
        for (b, &g) in ds[a * n..(a + 1) * n].iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(&u.data[b * d..(b + 1) * d]) {
                *o += g * x;
            }
        }
    }
    // through row normalisation
    let mut dz = Matrix::zeros(n, d);
    for i in 0..n {
        let ui = u.row(i);
        let dui = du.row(i);
        let proj = crate::tensornet::dot(ui, dui);
        for c in 0..d {
            dz.data[i * d + c] = (dui[c] - ui[c] * proj) / norms[i];
        }
    }
    Ok((total * scale, dz))
}

/// Read access to model inputs only. Pretraining takes its data through
/// this trait, so it cannot observe labels.
pub trait FeatureSource {
    fn len(&self) -> usize;
    fn input(&self, i: usize) -> &[f64];
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FeatureSource for Matrix {
    fn len(&self) -> usize {
        self.rows
    }

    fn input(&self, i: usize) -> &[f64] {
        self.row(i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub batch: usize,
    pub variant: NtXentVariant,
    pub aug_a: Vec<AugSpec>,
    pub aug_b: Vec<AugSpec>,
    /// Projection head widths.
    pub head_hidden: usize,
    pub head_out: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            batch: 128,
            variant: NtXentVariant::Standard,
            aug_a: default_augs(),
            aug_b: default_augs(),
            head_hidden: 64,
            head_out: 32,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.batch < 2 {
            return Err(Error::config("contrastive batch must be at least 2"));
        }
        self.aug_a.iter().chain(&self.aug_b).try_for_each(AugSpec::validate)
    }
}

/// One pass over `order` in minibatches of `cfg.batch`, on the NT-Xent
/// objective (optionally proximal). Returns (mean loss, optimizer steps).
/// A trailing batch of one sample is skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn contrastive_epoch<R: Rng + ?Sized>(
    data: &dyn FeatureSource,
    order: &[usize],
    model: &ModelSpec,
    history_len: usize,
    params: &mut ParamVector,
    opt: &mut Optimizer,
    cfg: &ContrastiveConfig,
    prox: Option<(&[f64], f64)>,
    rng: &mut R,
) -> Result<(f64, usize)> {
    let mut loss_sum = 0.0;
    let mut steps = 0;
    let width = model.input.width();
    for chunk in order.chunks(cfg.batch) {
        if chunk.len() < 2 {
            continue;
        }
        let mut inputs = Matrix::zeros(chunk.len(), width);
        for (r, &i) in chunk.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(data.input(i));
        }
        let views = make_pairs(&inputs, history_len, &cfg.aug_a, &cfg.aug_b, rng)?;
        let base = LossKind::NtXent { tau: cfg.tau, variant: cfg.variant };
        let kind = match prox {
            Some((anchor, mu)) => LossKind::Proximal { base: Box::new(base), anchor, mu },
            None => base,
        };
        let (loss, g) = grad(model, params, &Batch::unlabeled(views), &kind)?;
        opt.step(&mut params.values, &g.values);
        loss_sum += loss;
        steps += 1;
    }
    Ok((if steps > 0 { loss_sum / steps as f64 } else { 0.0 }, steps))
}

/// Mean NT-Xent of `params` over `data` in fixed minibatches, using the
/// given rng for the views.
pub fn contrastive_loss<R: Rng + ?Sized>(
    data: &dyn FeatureSource,
    model: &ModelSpec,
    history_len: usize,
    params: &ParamVector,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<f64> {
    let order: Vec<usize> = (0..data.len()).collect();
    let width = model.input.width();
    let (mut sum, mut n) = (0.0, 0);
    for chunk in order.chunks(cfg.batch) {
        if chunk.len() < 2 {
            continue;
        }
        let mut inputs = Matrix::zeros(chunk.len(), width);
        for (r, &i) in chunk.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(data.input(i));
        }
        let views = make_pairs(&inputs, history_len, &cfg.aug_a, &cfg.aug_b, rng)?;
        let out = model.predict(params, &views)?;
        sum += ntxent(&out, cfg.tau, cfg.variant)?.0;
        n += 1;
    }
    Ok(sum / n.max(1) as f64)
}

/// Local contrastive pretraining of `model` (encoder followed by projection
/// head) for `epochs` shuffled passes.
pub fn pretrain_local<R: Rng + ?Sized>(
    data: &dyn FeatureSource,
    model: &ModelSpec,
    history_len: usize,
    init: &ParamVector,
    epochs: usize,
    lr: f64,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<ParamVector> {
    cfg.validate()?;
    if data.len() < cfg.batch {
        return Err(Error::invalid(format!(
            "dataset of {} samples is smaller than the batch size {}",
            data.len(),
            cfg.batch
        )));
    }
    let mut params = init.clone();
    let mut opt = Optimizer::adam(lr, params.len())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        contrastive_epoch(data, &order, model, history_len, &mut params, &mut opt, cfg, None, rng)?;
    }
    Ok(params)
}

//! Synchronous federated simulation: FedAvg-style warmup, update-similarity
//! neighbor selection, gossip within neighbor sets, local classifier
//! fine-tuning, and the baseline protocols.
//!
//! All randomness is drawn from streams keyed by `(seed, purpose, round,
//! client)`, so a client's local training in a given round is the same
//! whichever protocol wraps it. That is what makes the protocol
//! equivalences (FedProx with mu=0 vs FedAvg, full-graph gossip vs FedAvg,
//! one client vs local training) hold exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{contrastive_epoch, ContrastiveConfig};
use crate::error::{Error, Result};
use crate::privacy::{dp_perturb, DpConfig};
use crate::synthdata::ClientDataset;
use crate::tensornet::{cosine, grad, Batch, LossKind, Matrix, ModelSpec, Optimizer, ParamVector, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub t_init: usize,
    /// Rounds after warmup (CC-Net) or in total (baselines).
    pub rounds: usize,
    pub local_epochs: usize,
    /// Neighbor threshold.
    pub m: f64,
    /// Weight of the per-round similarity against the accumulated one.
    pub gamma: f64,
    /// FedProx proximal weight.
    pub mu: f64,
    pub drop_prob: f64,
    pub batch: usize,
    pub lr: f64,
    pub classifier_lr: f64,
    /// Epochs of local classifier training (CC-Net) and of the local
    /// fine-tune in FedProx-FT.
    pub finetune_epochs: usize,
    /// Also gossip the classifier within neighbor sets.
    pub federate_classifier: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            t_init: 10,
            rounds: 30,
            local_epochs: 1,
            m: -0.5,
            gamma: 0.4,
            mu: 0.3,
            drop_prob: 0.0,
            batch: 128,
            lr: 1e-3,
            classifier_lr: 1e-3,
            finetune_epochs: 20,
            federate_classifier: false,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.t_init < 1 {
            return fail("t_init must be at least 1".into());
        }
        if self.local_epochs < 1 {
            return fail("local_epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(-1.0..=1.0).contains(&self.m) {
            return fail(format!("m must lie in [-1, 1], got {}", self.m));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return fail(format!("drop_prob must lie in [0, 1), got {}", self.drop_prob));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return fail(format!("mu must be non-negative, got {}", self.mu));
        }
        if self.batch < 1 {
            return fail("batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.classifier_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        Ok(())
    }
}

/// A client's training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// Add-one smoothed class shares used by the cost-sensitive loss.
    pub ratios: [f64; NUM_CLASSES],
    pub history_len: usize,
}

impl TrainSet {
    pub fn from_dataset(ds: &ClientDataset) -> Self {
        Self { inputs: ds.inputs(), labels: ds.labels(), ratios: ds.class_ratios, history_len: ds.history_len }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// All sets stacked in order; class ratios recomputed with add-one.
    pub fn pooled(sets: &[TrainSet]) -> Result<TrainSet> {
        let first = sets.first().ok_or_else(|| Error::invalid("nothing to pool"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for s in sets {
            if s.inputs.cols != first.inputs.cols {
                return Err(Error::invalid("clients have different input widths"));
            }
            data.extend_from_slice(&s.inputs.data);
            labels.extend_from_slice(&s.labels);
        }
        let ratios = smoothed_ratios(&labels);
        Ok(TrainSet {
            inputs: Matrix { rows: labels.len(), cols: first.inputs.cols, data },
            labels,
            ratios,
            history_len: first.history_len,
        })
    }
}

pub fn smoothed_ratios(labels: &[usize]) -> [f64; NUM_CLASSES] {
    let mut c = [1.0; NUM_CLASSES];
    for &l in labels {
        c[l] += 1.0;
    }
    let t: f64 = c.iter().sum();
    c.map(|v| v / t)
}

/// What a local epoch optimizes.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// NT-Xent on augmented views; labels are not touched.
    Contrastive(&'a ContrastiveConfig),
    /// Cost-sensitive cross entropy weighted by the client's class ratios.
    Supervised,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: TrainSet,
    pub params: ParamVector,
    pub initial: ParamVector,
    pub round_start: ParamVector,
    pub opt: Optimizer,
    pub neighbors: Vec<usize>,
}

impl ClientState {
    pub fn new(id: usize, data: TrainSet, init: &ParamVector, lr: f64) -> Result<Self> {
        Ok(Self {
            id,
            data,
            params: init.clone(),
            initial: init.clone(),
            round_start: init.clone(),
            opt: Optimizer::adam(lr, init.len())?,
            neighbors: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalOutcome {
    pub loss: f64,
    pub steps: usize,
    /// The client had no data and did not train.
    pub skipped: bool,
}

/// Random stream of one client's local work in one round.
pub fn local_rng(seed: u64, round: usize, client: usize) -> rand_chacha::ChaCha8Rng {
    crate::rng::stream(seed, "local", ((round as u64) << 20) | client as u64)
}

/// `epochs` shuffled passes over the client's data. `batch` applies to the
/// supervised objective; the contrastive one uses its own batch size.
pub fn local_train<R: Rng + ?Sized>(
    client: &mut ClientState,
    model: &ModelSpec,
    objective: Objective<'_>,
    epochs: usize,
    batch: usize,
    prox: Option<(&[f64], f64)>,
    rng: &mut R,
) -> Result<LocalOutcome> {
    if client.data.is_empty() {
        return Ok(LocalOutcome { loss: 0.0, steps: 0, skipped: true });
    }
    let mut order: Vec<usize> = (0..client.data.len()).collect();
    let (mut loss_sum, mut steps) = (0.0, 0);
    for _ in 0..epochs {
        order.shuffle(rng);
        match objective {
            Objective::Contrastive(cfg) => {
                let (l, s) = contrastive_epoch(
                    &client.data.inputs,
                    &order,
                    model,
                    client.data.history_len,
                    &mut client.params,
                    &mut client.opt,
                    cfg,
                    prox,
                    rng,
                )?;
                loss_sum += l * s as f64;
                steps += s;
            }
            Objective::Supervised => {
                for chunk in order.chunks(batch) {
                    let inputs = client.data.inputs.gather(chunk);
                    let labels: Vec<usize> = chunk.iter().map(|&i| client.data.labels[i]).collect();
                    let b = Batch::labeled(inputs, &labels)?;
                    let base = LossKind::WeightedCe { ratios: client.data.ratios };
                    let kind = match prox {
                        Some((anchor, mu)) => LossKind::Proximal { base: Box::new(base), anchor, mu },
                        None => base,
                    };
                    let (l, g) = grad(model, &client.params, &b, &kind)?;
                    client.opt.step(&mut client.params.values, &g.values);
                    loss_sum += l;
                    steps += 1;
                }
            }
        }
    }
    Ok(LocalOutcome { loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 }, steps, skipped: false })
}

/// Arithmetic mean of equally long vectors, summed in the given order.
pub fn aggregate(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if vectors.iter().any(|v| v.len() != first.len()) {
        return Err(Error::invalid("aggregated vectors differ in length"));
    }
    let mut out = vec![0.0; first.len()];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let k = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(out)
}

/// One log line: a client's work in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub phase: String,
    pub round: usize,
    pub client: usize,
    pub loss: f64,
    pub steps: usize,
    /// Models aggregated besides the client's own.
    pub n: usize,
    pub messages_sent: usize,
    pub messages_received: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
}

pub fn write_jsonl<W: std::io::Write>(mut w: W, records: &[RoundRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-round update vectors of every client.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub round: usize,
    /// Trained params minus the round's starting params.
    pub g: Vec<Vec<f64>>,
    /// Trained params minus the initial params.
    pub h: Vec<Vec<f64>>,
}

/// FedAvg rounds: every client starts from the shared model, trains
/// `epochs`, and the coordinator averages all models (optionally clipped
/// and noised). Rounds are numbered from `first_round`.
#[allow(clippy::too_many_arguments)]
pub fn fedavg_rounds(
    clients: &mut [ClientState],
    model: &ModelSpec,
    objective: Objective<'_>,
    cfg: &RoundConfig,
    rounds: usize,
    first_round: usize,
    prox_mu: Option<f64>,
    dp: Option<&DpConfig>,
    seed: u64,
    phase: &str,
    log: &mut Vec<RoundRecord>,
) -> Result<Vec<UpdateRecord>> {
    let n = clients.len();
    if n == 0 {
        return Err(Error::invalid("no clients"));
    }
    let mut global = clients[0].params.clone();
    let mut records = Vec::with_capacity(rounds);
    for t in first_round..first_round + rounds {
        let mut rec = UpdateRecord { round: t, g: Vec::with_capacity(n), h: Vec::with_capacity(n) };
        for c in clients.iter_mut() {
            c.params = global.clone();
            c.round_start = global.clone();
            let anchor = global.values.clone();
            let prox = prox_mu.map(|mu| (anchor.as_slice(), mu));
            let out =
                local_train(c, model, objective, cfg.local_epochs, cfg.batch, prox, &mut local_rng(seed, t, c.id))?;
            rec.g.push(c.params.values.iter().zip(&c.round_start.values).map(|(a, b)| a - b).collect());
            rec.h.push(c.params.values.iter().zip(&c.initial.values).map(|(a, b)| a - b).collect());
            log.push(RoundRecord {
                phase: phase.into(),
                round: t,
                client: c.id,
                loss: out.loss,
                steps: out.steps,
                n: n - 1,
                messages_sent: 1,
                messages_received: 1,
                skipped: out.skipped,
            });
        }
        global.values = match dp {
            None => aggregate(&clients.iter().map(|c| c.params.values.as_slice()).collect::<Vec<_>>())?,
            Some(dp) => {
                let mut rng = crate::rng::stream(seed, "dp", t as u64);
                dp_perturb(&global.values, dp, &rec.g, &mut rng)?
            }
        };
        if !global.is_finite() {
            return Err(Error::Numeric { layer: format!("aggregate of round {t}") });
        }
        records.push(rec);
    }
    for c in clients.iter_mut() {
        c.params = global.clone();
    }
    Ok(records)
}

/// Blended update similarity, averaged over the recorded rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    /// Pair-round entries skipped because an update vector was zero.
    pub excluded: usize,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        Self { n, values: rows.concat(), excluded: 0 }
    }
}

/// `gamma * cos(g_i, g_j) + (1 - gamma) * cos(h_i, h_j)` per round, then the
/// mean over rounds. Rounds where either vector of a pair is zero are left
/// out of that pair's mean; a pair with no usable round gets 0.
pub fn similarity(records: &[UpdateRecord], gamma: f64) -> Result<SimilarityMatrix> {
    if records.is_empty() {
        return Err(Error::invalid("no update records"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let n = records[0].g.len();
    let mut sum = vec![0.0; n * n];
    let mut cnt = vec![0usize; n * n];
    let mut excluded = 0;
    for rec in records {
        for i in 0..n {
            for j in i + 1..n {
                match (cosine(&rec.g[i], &rec.g[j]), cosine(&rec.h[i], &rec.h[j])) {
                    (Ok(g), Ok(h)) => {
                        let s = gamma * g + (1.0 - gamma) * h;
                        sum[i * n + j] += s;
                        cnt[i * n + j] += 1;
                    }
                    (Err(Error::UndefinedSimilarity(_)), _) | (_, Err(Error::UndefinedSimilarity(_))) => excluded += 1,
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                }
            }
        }
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = if cnt[i * n + j] > 0 { sum[i * n + j] / cnt[i * n + j] as f64 } else { 0.0 };
            let v = v.clamp(-1.0, 1.0);
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(SimilarityMatrix { n, values, excluded })
}

/// `neighbors(i) = { j != i : R[i][j] > m }`.
pub fn select_neighbors(r: &SimilarityMatrix, m: f64) -> Vec<Vec<usize>> {
    (0..r.n).map(|i| (0..r.n).filter(|&j| j != i && r.get(i, j) > m).collect()).collect()
}

/// One gossip round: every client sends its model to each neighbor, each
/// delivery is dropped with `drop_prob`, receivers average what arrived
/// with their own model (ascending client id) and then train.
#[allow(clippy::too_many_arguments)]
pub fn gossip_round(
    clients: &mut [ClientState],
    model: &ModelSpec,
    objective: Objective<'_>,
    epochs: usize,
    batch: usize,
    drop_prob: f64,
    round: usize,
    seed: u64,
    phase: &str,
    log: &mut Vec<RoundRecord>,
) -> Result<()> {
    let n = clients.len();
    let snapshot: Vec<Vec<f64>> = clients.iter().map(|c| c.params.values.clone()).collect();
    let mut inbox: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut sent = vec![0usize; n];
    let mut drops = crate::rng::stream(seed, "drop", round as u64);
    for (j, c) in clients.iter().enumerate() {
        for &i in &c.neighbors {
            let dropped = drop_prob > 0.0 && drops.random::<f64>() < drop_prob;
            if !dropped {
                inbox[i].push(j);
                sent[j] += 1;
            }
        }
    }
    for (i, c) in clients.iter_mut().enumerate() {
        let mut from = inbox[i].clone();
        from.push(i);
        from.sort_unstable();
        let vecs: Vec<&[f64]> = from.iter().map(|&k| snapshot[k].as_slice()).collect();
        c.params.values = aggregate(&vecs)?;
        c.round_start = c.params.clone();
        let out = local_train(c, model, objective, epochs, batch, None, &mut local_rng(seed, round, c.id))?;
        log.push(RoundRecord {
            phase: phase.into(),
            round,
            client: c.id,
            loss: out.loss,
            steps: out.steps,
            n: inbox[i].len(),
            messages_sent: sent[i],
            messages_received: inbox[i].len(),
            skipped: out.skipped,
        });
    }
    Ok(())
}

/// Encoder, projection head and classifier architectures.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub encoder: ModelSpec,
    pub head: ModelSpec,
    pub classifier: ModelSpec,
}

impl Models {
    pub fn contrastive(&self) -> Result<ModelSpec> {
        self.encoder.then(&self.head)
    }

    pub fn supervised(&self) -> Result<ModelSpec> {
        self.encoder.then(&self.classifier)
    }

    pub fn repr_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Shared initial weights for every client.
    pub fn init(&self, seed: u64) -> (ParamVector, ParamVector, ParamVector) {
        (
            self.encoder.init(crate::rng::derive_seed(seed, "init-encoder", 0)),
            self.head.init(crate::rng::derive_seed(seed, "init-head", 0)),
            self.classifier.init(crate::rng::derive_seed(seed, "init-classifier", 0)),
        )
    }
}

/// A trained per-client predictor: `spec` applied with `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ParamVector,
}

#[derive(Debug, Clone)]
pub struct CcnetOutcome {
    pub models: Vec<TrainedModel>,
    pub encoders: Vec<ParamVector>,
    pub similarity: SimilarityMatrix,
    pub neighbors: Vec<Vec<usize>>,
    pub log: Vec<RoundRecord>,
}

/// Phase 1 only: contrastive warmup, similarity and neighbor selection.
pub fn ccnet_select(
    data: &[TrainSet],
    models: &Models,
    ccfg: &ContrastiveConfig,
    cfg: &RoundConfig,
    seed: u64,
) -> Result<(Vec<ClientState>, SimilarityMatrix, Vec<Vec<usize>>, Vec<RoundRecord>)> {
    cfg.validate()?;
    ccfg.validate()?;
    let cmodel = models.contrastive()?;
    let (enc0, head0, _) = models.init(seed);
    let init = enc0.concat(&head0, models.encoder.layers.len());
    let mut clients = data
        .iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i, d.clone(), &init, cfg.lr))
        .collect::<Result<Vec<_>>>()?;
    let mut log = Vec::new();
    let records = fedavg_rounds(
        &mut clients,
        &cmodel,
        Objective::Contrastive(ccfg),
        cfg,
        cfg.t_init,
        0,
        None,
        None,
        seed,
        "warmup",
        &mut log,
    )?;
    let sim = similarity(&records, cfg.gamma)?;
    let neighbors = select_neighbors(&sim, cfg.m);
    for (c, nb) in clients.iter_mut().zip(&neighbors) {
        c.neighbors = nb.clone();
    }
    Ok((clients, sim, neighbors, log))
}

/// Phases 1 and 2: selection, then gossip among neighbors on the
/// contrastive objective. Client params hold encoder and head.
pub fn ccnet_pretrain(
    data: &[TrainSet],
    models: &Models,
    ccfg: &ContrastiveConfig,
    cfg: &RoundConfig,
    seed: u64,
) -> Result<(Vec<ClientState>, SimilarityMatrix, Vec<Vec<usize>>, Vec<RoundRecord>)> {
    let (mut clients, sim, neighbors, mut log) = ccnet_select(data, models, ccfg, cfg, seed)?;
    let cmodel = models.contrastive()?;
    for t in cfg.t_init..cfg.t_init + cfg.rounds {
        gossip_round(
            &mut clients,
            &cmodel,
            Objective::Contrastive(ccfg),
            cfg.local_epochs,
            cfg.batch,
            cfg.drop_prob,
            t,
            seed,
            "gossip",
            &mut log,
        )?;
    }
    Ok((clients, sim, neighbors, log))
}

/// Train a classifier on fixed representations for `epochs`, one stream
/// per epoch.
fn train_classifier(
    state: &mut ClientState,
    spec: &ModelSpec,
    epochs: usize,
    batch: usize,
    seed: u64,
    first_round: usize,
) -> Result<LocalOutcome> {
    let mut last = LocalOutcome { loss: 0.0, steps: 0, skipped: state.data.is_empty() };
    for e in 0..epochs {
        let mut rng = local_rng(seed, first_round + e, state.id);
        let out = local_train(state, spec, Objective::Supervised, 1, batch, None, &mut rng)?;
        last = LocalOutcome { loss: out.loss, steps: last.steps + out.steps, skipped: out.skipped };
    }
    Ok(last)
}

/// The full schedule: contrastive warmup and neighbor selection, gossip
/// among neighbors on the contrastive objective, then a client-tailored
/// classifier on the frozen encoder.
pub fn run_ccnet(
    data: &[TrainSet],
    models: &Models,
    ccfg: &ContrastiveConfig,
    cfg: &RoundConfig,
    seed: u64,
) -> Result<CcnetOutcome> {
    let (clients, sim, neighbors, mut log) = ccnet_pretrain(data, models, ccfg, cfg, seed)?;
    let enc_layers = models.encoder.layers.len();
    let encoders: Vec<ParamVector> = clients.iter().map(|c| c.params.split(enc_layers).0).collect();
    let (_, _, cls0) = models.init(seed);
    let first = cfg.t_init + cfg.rounds;
    let mut heads = Vec::with_capacity(clients.len());
    for (c, enc) in clients.iter().zip(&encoders) {
        let reps = if c.data.is_empty() {
            Matrix::zeros(0, models.repr_dim())
        } else {
            models.encoder.predict(enc, &c.data.inputs)?
        };
        let set = TrainSet { inputs: reps, labels: c.data.labels.clone(), ratios: c.data.ratios, history_len: 0 };
        let mut st = ClientState::new(c.id, set, &cls0, cfg.classifier_lr)?;
        st.neighbors = c.neighbors.clone();
        heads.push(st);
    }
    if cfg.federate_classifier {
        for e in 0..cfg.finetune_epochs {
            gossip_round(
                &mut heads,
                &models.classifier,
                Objective::Supervised,
                1,
                cfg.batch,
                cfg.drop_prob,
                first + e,
                seed,
                "classifier",
                &mut log,
            )?;
        }
    } else {
        for st in heads.iter_mut() {
            let out = train_classifier(st, &models.classifier, cfg.finetune_epochs, cfg.batch, seed, first)?;
            log.push(RoundRecord {
                phase: "classifier".into(),
                round: first,
                client: st.id,
                loss: out.loss,
                steps: out.steps,
                n: 0,
                messages_sent: 0,
                messages_received: 0,
                skipped: out.skipped,
            });
        }
    }
    let models_out = encoders
        .iter()
        .zip(&heads)
        .map(|(enc, h)| TrainedModel { params: enc.concat(&h.params, enc_layers) })
        .collect();
    Ok(CcnetOutcome { models: models_out, encoders, similarity: sim, neighbors, log })
}

/// Supervised FedAvg, FedProx (`prox_mu` set, even to zero) or DP-FedAvg
/// (`dp`).
/// Every client ends with the final global model.
pub fn run_fedavg(
    data: &[TrainSet],
    models: &Models,
    cfg: &RoundConfig,
    prox_mu: Option<f64>,
    dp: Option<&DpConfig>,
    seed: u64,
    log: &mut Vec<RoundRecord>,
) -> Result<Vec<TrainedModel>> {
    cfg.validate()?;
    let spec = models.supervised()?;
    let (enc0, _, cls0) = models.init(seed);
    let init = enc0.concat(&cls0, models.encoder.layers.len());
    let mut clients = data
        .iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i, d.clone(), &init, cfg.lr))
        .collect::<Result<Vec<_>>>()?;
    let phase = if dp.is_some() {
        "dp_fedavg"
    } else if prox_mu.is_some() {
        "fedprox"
    } else {
        "fedavg"
    };
    fedavg_rounds(&mut clients, &spec, Objective::Supervised, cfg, cfg.rounds, 0, prox_mu, dp, seed, phase, log)?;
    Ok(clients.into_iter().map(|c| TrainedModel { params: c.params }).collect())
}

/// FedProx followed by local fine-tuning of the whole model.
pub fn run_fedprox_ft(
    data: &[TrainSet],
    models: &Models,
    cfg: &RoundConfig,
    seed: u64,
    log: &mut Vec<RoundRecord>,
) -> Result<Vec<TrainedModel>> {
    let global = run_fedavg(data, models, cfg, Some(cfg.mu), None, seed, log)?;
    let spec = models.supervised()?;
    let mut out = Vec::with_capacity(data.len());
    for (i, (d, g)) in data.iter().zip(global).enumerate() {
        let mut st = ClientState::new(i, d.clone(), &g.params, cfg.lr)?;
        for e in 0..cfg.finetune_epochs {
            let mut rng = local_rng(seed, cfg.rounds + e, i);
            let o = local_train(&mut st, &spec, Objective::Supervised, 1, cfg.batch, None, &mut rng)?;
            log.push(RoundRecord {
                phase: "fedprox_ft".into(),
                round: cfg.rounds + e,
                client: i,
                loss: o.loss,
                steps: o.steps,
                n: 0,
                messages_sent: 0,
                messages_received: 0,
                skipped: o.skipped,
            });
        }
        out.push(TrainedModel { params: st.params });
    }
    Ok(out)
}

/// Each client trains alone for `rounds * local_epochs` epochs, with the
/// same per-round random streams a federated run would use.
pub fn run_local(
    data: &[TrainSet],
    models: &Models,
    cfg: &RoundConfig,
    seed: u64,
    log: &mut Vec<RoundRecord>,
) -> Result<Vec<TrainedModel>> {
    cfg.validate()?;
    let spec = models.supervised()?;
    let (enc0, _, cls0) = models.init(seed);
    let init = enc0.concat(&cls0, models.encoder.layers.len());
    let mut out = Vec::with_capacity(data.len());
    for (i, d) in data.iter().enumerate() {
        let mut st = ClientState::new(i, d.clone(), &init, cfg.lr)?;
        for t in 0..cfg.rounds {
            let o = local_train(
                &mut st,
                &spec,
                Objective::Supervised,
                cfg.local_epochs,
                cfg.batch,
                None,
                &mut local_rng(seed, t, i),
            )?;
            log.push(RoundRecord {
                phase: "local".into(),
                round: t,
                client: i,
                loss: o.loss,
                steps: o.steps,
                n: 0,
                messages_sent: 0,
                messages_received: 0,
                skipped: o.skipped,
            });
        }
        out.push(TrainedModel { params: st.params });
    }
    Ok(out)
}

/// One model trained on all clients' data pooled; every client gets it.
pub fn run_central(
    data: &[TrainSet],
    models: &Models,
    cfg: &RoundConfig,
    seed: u64,
    log: &mut Vec<RoundRecord>,
) -> Result<Vec<TrainedModel>> {
    let pooled = TrainSet::pooled(data)?;
    let model = run_local(std::slice::from_ref(&pooled), models, cfg, seed, log)?.remove(0);
    Ok(vec![model; data.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensornet::presets;

    fn toy_models() -> Models {
        Models {
            encoder: presets::mlp_encoder(6, 8, 6).unwrap(),
            head: presets::projection_head(6, 8, 4).unwrap(),
            classifier: presets::classifier(6, 5).unwrap(),
        }
    }

    fn toy_set(n: usize, seed: u64, phase: f64) -> TrainSet {
        let mut rng = stream(seed, "toy", 0);
        let w = 6 + presets::SIDE_FEATURES;
        let mut inputs = Matrix::zeros(n, w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let row = inputs.row_mut(i);
            let level = rng.random_range(0.0..2.0);
            for t in 0..6 {
                row[t] = (level * (1.0 + (phase + t as f64).sin())).max(0.0);
            }
            row[6 + i % 24] = 1.0;
            row[6 + 24 + i % 7] = 1.0;
            labels.push(if level < 0.8 {
                0
            } else if level < 1.5 {
                1
            } else {
                2
            });
        }
        let ratios = smoothed_ratios(&labels);
        TrainSet { inputs, labels, ratios, history_len: 6 }
    }

    fn cfg() -> RoundConfig {
        RoundConfig { t_init: 2, rounds: 3, batch: 8, finetune_epochs: 2, lr: 5e-3, ..Default::default() }
    }

    #[test]
    fn aggregate_is_the_mean() {
        assert_eq!(aggregate(&[&[0.0, 0.0], &[3.0, 3.0]]).unwrap(), vec![1.5, 1.5]);
        let p = [0.3, -1.2, 7.0];
        assert_eq!(aggregate(&[&p, &p, &p]).unwrap(), p.to_vec());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn similarity_cases() {
        let rec = |g: Vec<Vec<f64>>, h: Vec<Vec<f64>>| UpdateRecord { round: 0, g, h };
        let same = rec(vec![vec![1.0, 2.0], vec![1.0, 2.0]], vec![vec![0.5, 0.1], vec![0.5, 0.1]]);
        for gamma in [0.0, 0.4, 1.0] {
            assert!((similarity(std::slice::from_ref(&same), gamma).unwrap().get(0, 1) - 1.0).abs() < 1e-12);
        }
        let mixed = rec(vec![vec![1.0, 0.0], vec![2.0, 0.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((similarity(&[mixed], 0.4).unwrap().get(0, 1) - 0.4).abs() < 1e-12);
        let opposite = rec(vec![vec![1.0, -1.0], vec![-1.0, 1.0]], vec![vec![2.0, 1.0], vec![-2.0, -1.0]]);
        assert!((similarity(&[opposite], 0.4).unwrap().get(0, 1) + 1.0).abs() < 1e-12);
        let zero = rec(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let s = similarity(&[zero, same.clone()], 0.4).unwrap();
        assert_eq!(s.excluded, 1);
        assert!((s.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn neighbor_threshold_rule() {
        let r = SimilarityMatrix::from_rows(&[vec![1.0, 0.9, -0.8], vec![0.9, 1.0, 0.1], vec![-0.8, 0.1, 1.0]]);
        assert_eq!(select_neighbors(&r, -0.5), vec![vec![1], vec![0, 2], vec![1]]);
        assert_eq!(select_neighbors(&r, -1.0), vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
        assert_eq!(select_neighbors(&r, 0.95), vec![Vec::<usize>::new(); 3]);
    }

    #[test]
    fn one_epoch_counts_batches() {
        let models = toy_models();
        let spec = models.supervised().unwrap();
        let (e, _, c) = models.init(1);
        let init = e.concat(&c, models.encoder.layers.len());
        let mut st = ClientState::new(0, toy_set(32, 1, 0.0), &init, 1e-3).unwrap();
        let out = local_train(&mut st, &spec, Objective::Supervised, 1, 8, None, &mut stream(0, "x", 0)).unwrap();
        assert_eq!(out.steps, 4);
        assert_eq!(st.opt.steps_taken(), 4);
        let mut empty = ClientState::new(1, TrainSet::pooled(&[toy_set(0, 1, 0.0)]).unwrap(), &init, 1e-3).unwrap();
        assert!(
            local_train(&mut empty, &spec, Objective::Supervised, 1, 8, None, &mut stream(0, "x", 0)).unwrap().skipped
        );
    }

    #[test]
    fn zero_mu_matches_plain_training() {
        let models = toy_models();
        let spec = models.supervised().unwrap();
        let (e, _, c) = models.init(1);
        let init = e.concat(&c, models.encoder.layers.len());
        let mut a = ClientState::new(0, toy_set(24, 2, 0.0), &init, 1e-3).unwrap();
        let mut b = a.clone();
        local_train(&mut a, &spec, Objective::Supervised, 2, 8, None, &mut stream(0, "x", 0)).unwrap();
        let anchor = init.values.clone();
        local_train(&mut b, &spec, Objective::Supervised, 2, 8, Some((&anchor, 0.0)), &mut stream(0, "x", 0)).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn warmup_contract() {
        let models = toy_models();
        let data = vec![toy_set(24, 1, 0.0), toy_set(24, 2, 0.0), toy_set(24, 3, 2.0)];
        let cmodel = models.contrastive().unwrap();
        let (e, h, _) = models.init(3);
        let init = e.concat(&h, models.encoder.layers.len());
        let mut clients: Vec<ClientState> =
            data.iter().enumerate().map(|(i, d)| ClientState::new(i, d.clone(), &init, 1e-3).unwrap()).collect();
        let ccfg = ContrastiveConfig { batch: 8, ..Default::default() };
        let mut log = Vec::new();
        let recs = fedavg_rounds(
            &mut clients,
            &cmodel,
            Objective::Contrastive(&ccfg),
            &cfg(),
            3,
            0,
            None,
            None,
            3,
            "warmup",
            &mut log,
        )
        .unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(log.len(), 9);
        // every client ends on the same average, and h accumulates g
        assert!(clients.windows(2).all(|w| w[0].params == w[1].params));
        for i in 0..3 {
            for k in 0..init.len() {
                let sum_rounds: f64 = recs[2].g[i][k] + (recs[2].h[i][k] - recs[2].g[i][k]);
                assert!((sum_rounds - recs[2].h[i][k]).abs() < 1e-12);
            }
            // the last round started from the average of round 1
            let start: Vec<f64> =
                init.values.iter().zip(&recs[2].h[i]).zip(&recs[2].g[i]).map(|((w0, h), g)| w0 + h - g).collect();
            let start0: Vec<f64> =
                init.values.iter().zip(&recs[2].h[0]).zip(&recs[2].g[0]).map(|((w0, h), g)| w0 + h - g).collect();
            assert!(start.iter().zip(&start0).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn identical_clients_give_identical_updates() {
        let models = toy_models();
        let cmodel = models.contrastive().unwrap();
        let (e, h, _) = models.init(3);
        let init = e.concat(&h, models.encoder.layers.len());
        let set = toy_set(16, 1, 0.0);
        let mut clients: Vec<ClientState> =
            (0..3).map(|_| ClientState::new(0, set.clone(), &init, 1e-3).unwrap()).collect();
        let ccfg = ContrastiveConfig { batch: 8, ..Default::default() };
        let recs = fedavg_rounds(
            &mut clients,
            &cmodel,
            Objective::Contrastive(&ccfg),
            &cfg(),
            1,
            0,
            None,
            None,
            3,
            "w",
            &mut Vec::new(),
        )
        .unwrap();
        assert!(recs[0].g.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn gossip_message_accounting_and_drops() {
        let models = toy_models();
        let cmodel = models.contrastive().unwrap();
        let (e, h, _) = models.init(3);
        let init = e.concat(&h, models.encoder.layers.len());
        let ccfg = ContrastiveConfig { batch: 8, ..Default::default() };
        let mk = || -> Vec<ClientState> {
            (0..4)
                .map(|i| {
                    let mut c = ClientState::new(i, toy_set(16, i as u64, 0.0), &init, 1e-3).unwrap();
                    c.neighbors = (0..4).filter(|&j| j != i && (j + i) % 2 == 1).collect();
                    c
                })
                .collect()
        };
        let edges: usize = mk().iter().map(|c| c.neighbors.len()).sum();
        let mut clients = mk();
        let mut log = Vec::new();
        gossip_round(&mut clients, &cmodel, Objective::Contrastive(&ccfg), 1, 8, 0.0, 0, 1, "g", &mut log).unwrap();
        assert_eq!(log.iter().map(|r| r.messages_received).sum::<usize>(), edges);
        for r in &log {
            assert!(r.n <= clients[r.client].neighbors.len());
        }
        // drop everything but the first delivery: aggregation is the identity
        let mut lonely = mk();
        let mut log2 = Vec::new();
        gossip_round(&mut lonely, &cmodel, Objective::Contrastive(&ccfg), 1, 8, 0.999_999_999, 0, 1, "g", &mut log2)
            .unwrap();
        let mut solo = mk();
        for c in solo.iter_mut() {
            local_train(c, &cmodel, Objective::Contrastive(&ccfg), 1, 8, None, &mut local_rng(1, 0, c.id)).unwrap();
        }
        for (a, b) in lonely.iter().zip(&solo) {
            assert_eq!(a.params, b.params);
        }
        assert!(log2.iter().all(|r| r.n == 0));
    }

    #[test]
    fn ccnet_degenerates_with_one_client() {
        let models = toy_models();
        let data = vec![toy_set(32, 1, 0.0)];
        let ccfg = ContrastiveConfig { batch: 8, ..Default::default() };
        let out = run_ccnet(&data, &models, &ccfg, &cfg(), 5).unwrap();
        assert_eq!(out.neighbors, vec![Vec::<usize>::new()]);
        assert_eq!(out.models.len(), 1);
        assert!(out.log.iter().all(|r| r.n == 0 || r.phase == "warmup"));
    }

    #[test]
    fn classifier_phase_leaves_encoder_untouched() {
        let models = toy_models();
        let data = vec![toy_set(32, 1, 0.0), toy_set(32, 2, 1.0)];
        let ccfg = ContrastiveConfig { batch: 8, ..Default::default() };
        let out = run_ccnet(&data, &models, &ccfg, &cfg(), 5).unwrap();
        let n = models.encoder.param_count();
        for (m, e) in out.models.iter().zip(&out.encoders) {
            assert_eq!(&m.params.values[..n], &e.values[..]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(RoundConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(RoundConfig { t_init: 0, ..Default::default() }.validate().is_err());
        assert!(RoundConfig { drop_prob: 1.0, ..Default::default() }.validate().is_err());
        assert!(RoundConfig::default().validate().is_ok());
    }
}

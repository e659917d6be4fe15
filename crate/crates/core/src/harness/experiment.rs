//! Data preparation, pipeline dispatch and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{evaluate, shuffled_success, AttackReport, AttackSet, ModelOracle};
use crate::error::{Error, Result};
use crate::fedsim::{
    local_train, run_ccnet, run_central, run_fedavg, run_fedprox_ft, run_local, ClientState, Models, Objective,
    RoundRecord, TrainSet, TrainedModel,
};
use crate::hexgrid::{classify, DemandTable};
use crate::privacy::{cnoise, geomask, sensitivity, PrivacyBudget};
use crate::rng::stream;
use crate::synthdata::{build_samples, demand_table, generate_clients, ClientDataset, RegionProfile, TripEvent};

use super::config::{ExperimentConfig, Pipeline};
use super::metrics::{argmax_rows, confusion, metrics, Metrics};

pub const REPORT_SCHEMA: u32 = 1;

/// One client's data after gridding and the time split.
#[derive(Debug, Clone)]
pub struct ClientSplit {
    pub profile: RegionProfile,
    pub events: Vec<TripEvent>,
    pub train: ClientDataset,
    pub test: ClientDataset,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Vec<ClientSplit>> {
    cfg.validate()?;
    let profiles = cfg.data.profiles();
    let data = generate_clients(&profiles, cfg.data.days, cfg.seed, false)?;
    profiles
        .into_iter()
        .zip(data)
        .map(|(profile, d)| {
            let table =
                demand_table(&d.events, &profile.grid(cfg.grid.edge_km)?, cfg.grid.interval_hours, cfg.data.days)?;
            let ds =
                build_samples(profile.client_id, &table, cfg.data.history_len, cfg.data.thresholds, cfg.data.ring)?;
            let (train, test) = ds.split_by_time(cfg.data.test_fraction);
            if train.is_empty() || test.is_empty() {
                return Err(Error::config(format!(
                    "client {} has too few slots for a train/test split",
                    profile.client_id
                )));
            }
            Ok(ClientSplit { profile, events: d.events, train, test })
        })
        .collect()
}

/// Same samples with histories and labels read from another table.
pub fn relabel(ds: &ClientDataset, table: &DemandTable, cfg: &ExperimentConfig) -> Result<ClientDataset> {
    let l = ds.history_len as u64;
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let mut t = s.clone();
            t.history = (s.slot.index - l..s.slot.index).map(|k| table.count(s.cell, k)).collect();
            t.label = classify(table.count(s.cell, s.slot.index), cfg.data.thresholds)?;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClientDataset::from_samples(ds.client_id, ds.history_len, samples))
}

/// Training sets built from privacy-transformed events on the clean cells
/// and slots.
fn protected_train_sets(cfg: &ExperimentConfig, clients: &[ClientSplit]) -> Result<Vec<TrainSet>> {
    let end = cfg.data.days as f64 * 86_400.0 - 1e-3;
    clients
        .iter()
        .map(|c| {
            let origin = c.profile.origin;
            let mut rng = stream(cfg.seed, "protect", c.profile.client_id as u64);
            let mut ev = match cfg.pipeline {
                Pipeline::Geomask => {
                    geomask(&c.events, origin, cfg.privacy.sigma_space_km, cfg.privacy.sigma_time_s, &mut rng)?
                }
                _ => {
                    let s = match cfg.privacy.sensitivity_km {
                        Some(s) => s,
                        None => sensitivity(&c.events, origin)?,
                    };
                    cnoise(&c.events, origin, &PrivacyBudget::new(cfg.privacy.epsilon, s)?, &mut rng)?
                }
            };
            ev.iter_mut().for_each(|e| e.time = e.time.clamp(0.0, end));
            let table = demand_table(&ev, &c.profile.grid(cfg.grid.edge_km)?, cfg.grid.interval_hours, cfg.data.days)?;
            Ok(TrainSet::from_dataset(&relabel(&c.train, &table, cfg)?))
        })
        .collect()
}

/// Row indices of the training rows used as attack members (and as the
/// whole training set of the overfit reference).
fn member_rows(cfg: &ExperimentConfig, client: u32, n_train: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_train).collect();
    let k = cfg.attack.samples.min(n_train);
    idx.partial_shuffle(&mut stream(cfg.seed, "members", client as u64), k);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn overfit(
    cfg: &ExperimentConfig,
    models: &Models,
    clients: &[ClientSplit],
    sets: &[TrainSet],
    log: &mut Vec<RoundRecord>,
) -> Result<Vec<TrainedModel>> {
    let spec = models.supervised()?;
    let (e, _, c) = models.init(cfg.seed);
    let init = e.concat(&c, models.encoder.layers.len());
    let mut out = Vec::new();
    for (i, (client, s)) in clients.iter().zip(sets).enumerate() {
        let rows = member_rows(cfg, client.profile.client_id, s.len());
        let small = TrainSet {
            inputs: s.inputs.gather(&rows),
            labels: rows.iter().map(|&r| s.labels[r]).collect(),
            ratios: crate::fedsim::smoothed_ratios(&rows.iter().map(|&r| s.labels[r]).collect::<Vec<_>>()),
            history_len: s.history_len,
        };
        let mut st = ClientState::new(i, small, &init, cfg.federation.lr)?;
        let mut rng = stream(cfg.seed, "overfit", i as u64);
        let o = local_train(
            &mut st,
            &spec,
            Objective::Supervised,
            cfg.attack.overfit_epochs,
            cfg.federation.batch,
            None,
            &mut rng,
        )?;
        log.push(RoundRecord {
            phase: "overfit".into(),
            round: 0,
            client: i,
            loss: o.loss,
            steps: o.steps,
            n: 0,
            messages_sent: 0,
            messages_received: 0,
            skipped: o.skipped,
        });
        out.push(TrainedModel { params: st.params });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: u32,
    pub regime_id: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: Metrics,
    pub attack: Option<AttackReport>,
    pub shuffled_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub pipeline: String,
    pub seed: u64,
    /// How per-client numbers are combined.
    pub client_weighting: String,
    /// How attack success is scored.
    pub attack_metric: String,
    pub clients: Vec<ClientReport>,
    pub mean_balanced_accuracy: f64,
    pub std_balanced_accuracy: f64,
    pub mean_attack_success: Option<f64>,
    pub mean_shuffled_success: Option<f64>,
    pub neighbors: Option<Vec<Vec<usize>>>,
    pub similarity: Option<Vec<Vec<f64>>>,
}

impl Report {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match v.get("schema_version").and_then(|x| x.as_u64()) {
            Some(s) if s == REPORT_SCHEMA as u64 => Ok(serde_json::from_value(v)?),
            other => Err(Error::Format(format!("unsupported report schema {other:?}"))),
        }
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub log: Vec<RoundRecord>,
    pub models: Vec<TrainedModel>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Train every client's model with the configured pipeline.
pub fn train(
    cfg: &ExperimentConfig,
    clients: &[ClientSplit],
) -> Result<(Vec<TrainedModel>, Vec<RoundRecord>, Option<(Vec<Vec<usize>>, Vec<Vec<f64>>)>)> {
    let models = cfg.models()?;
    let sets: Vec<TrainSet> = clients.iter().map(|c| TrainSet::from_dataset(&c.train)).collect();
    let f = &cfg.federation;
    let mut log = Vec::new();
    let mut graph = None;
    let trained = match cfg.pipeline {
        Pipeline::Ccnet => {
            let out = run_ccnet(&sets, &models, &cfg.contrastive.build()?, f, cfg.seed)?;
            log = out.log;
            let n = out.similarity.n;
            graph = Some((out.neighbors, (0..n).map(|i| out.similarity.values[i * n..(i + 1) * n].to_vec()).collect()));
            out.models
        }
        Pipeline::Fedavg => run_fedavg(&sets, &models, f, None, None, cfg.seed, &mut log)?,
        Pipeline::Fedprox => run_fedavg(&sets, &models, f, Some(f.mu), None, cfg.seed, &mut log)?,
        Pipeline::FedproxFt => run_fedprox_ft(&sets, &models, f, cfg.seed, &mut log)?,
        Pipeline::Local => run_local(&sets, &models, f, cfg.seed, &mut log)?,
        Pipeline::Central => run_central(&sets, &models, f, cfg.seed, &mut log)?,
        Pipeline::DpFedavg => run_fedavg(&sets, &models, f, None, Some(&cfg.privacy.dp), cfg.seed, &mut log)?,
        Pipeline::Geomask | Pipeline::Cnoise => {
            let protected = protected_train_sets(cfg, clients)?;
            run_central(&protected, &models, f, cfg.seed, &mut log)?
        }
        Pipeline::Overfit => overfit(cfg, &models, clients, &sets, &mut log)?,
    };
    Ok((trained, log, graph))
}

/// Balanced accuracy on the held-out split and, when enabled, the
/// membership attack.
pub fn evaluate_models(
    cfg: &ExperimentConfig,
    clients: &[ClientSplit],
    trained: &[TrainedModel],
) -> Result<Vec<ClientReport>> {
    let spec = cfg.models()?.supervised()?;
    clients
        .iter()
        .zip(trained)
        .map(|(c, m)| {
            let test_x = c.test.inputs();
            let pred = argmax_rows(&spec.predict(&m.params, &test_x)?);
            let met = metrics(&confusion(&c.test.labels(), &pred)?)?;
            let (attack, shuffled) = if cfg.attack.enabled {
                let id = c.profile.client_id;
                let train_x = c.train.inputs();
                let members = train_x.gather(&member_rows(cfg, id, train_x.rows));
                let set = AttackSet::sample(
                    &members,
                    &test_x,
                    cfg.attack.samples,
                    &mut stream(cfg.seed, "attack-set", id as u64),
                )?;
                let oracle = ModelOracle::new(spec.clone(), m.params.clone())?;
                let rep = evaluate(&oracle, &set, &format!("{}:{}", cfg.pipeline.name(), id), cfg.seed)?;
                let sh = shuffled_success(
                    &oracle,
                    &set,
                    cfg.attack.shuffle_repeats,
                    &mut stream(cfg.seed, "attack-shuffle", id as u64),
                )?;
                (Some(rep), Some(sh))
            } else {
                (None, None)
            };
            Ok(ClientReport {
                client_id: c.profile.client_id,
                regime_id: c.profile.regime_id,
                n_train: c.train.len(),
                n_test: c.test.len(),
                metrics: met,
                attack,
                shuffled_success: shuffled,
            })
        })
        .collect()
}

pub fn summarize(
    cfg: &ExperimentConfig,
    clients: Vec<ClientReport>,
    graph: Option<(Vec<Vec<usize>>, Vec<Vec<f64>>)>,
) -> Report {
    let bas: Vec<f64> = clients.iter().map(|c| c.metrics.balanced_accuracy).collect();
    let (mean, std) = mean_std(&bas);
    let att: Vec<f64> = clients.iter().filter_map(|c| c.attack.as_ref().map(|a| a.success_rate)).collect();
    let sh: Vec<f64> = clients.iter().filter_map(|c| c.shuffled_success).collect();
    let (neighbors, similarity) = match graph {
        Some((n, s)) => (Some(n), Some(s)),
        None => (None, None),
    };
    Report {
        schema_version: REPORT_SCHEMA,
        pipeline: cfg.pipeline.name().into(),
        seed: cfg.seed,
        client_weighting: "unweighted_mean".into(),
        attack_metric: "balanced_accuracy_of_membership_decisions".into(),
        clients,
        mean_balanced_accuracy: mean,
        std_balanced_accuracy: std,
        mean_attack_success: (!att.is_empty()).then(|| mean_std(&att).0),
        mean_shuffled_success: (!sh.is_empty()).then(|| mean_std(&sh).0),
        neighbors,
        similarity,
    }
}

/// Generate data, train, evaluate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let clients = prepare(cfg)?;
    run_on(cfg, &clients)
}

/// Train and evaluate on already prepared data.
pub fn run_on(cfg: &ExperimentConfig, clients: &[ClientSplit]) -> Result<Outcome> {
    let (models, log, graph) = train(cfg, clients)?;
    let reports = evaluate_models(cfg, clients, &models)?;
    Ok(Outcome { report: summarize(cfg, reports, graph), log, models })
}

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ccnet::fedsim::{ccnet_pretrain, write_jsonl, TrainSet};
use ccnet::harness::config::{ExperimentConfig, Pipeline};
use ccnet::harness::experiment::{prepare, run_experiment, Report};
use ccnet::harness::report::{
    across_seeds, bar_chart_svg, clients_csv, compare, comparison_csv, method_configs, sweep, sweep_csv, sweep_svg,
    SweepParam,
};
use ccnet::hexgrid::{aggregate, GeoPoint, GridSpec};
use ccnet::privacy::{cnoise, geomask, sensitivity, PrivacyBudget};
use ccnet::rng::stream;
use ccnet::synthdata::{
    build_samples, extract_events, generate_clients, ingest_csv, write_csv, write_samples, StopMarker, TrajectoryData,
};
use ccnet::tensornet::write_checkpoint;
use ccnet::{Error, Result};

#[derive(Parser)]
#[command(name = "ccnet", version, about = "Collaborative taxi-demand prediction on synthetic fleets")]
struct Cli {
    /// TOML experiment config; defaults to the benchmark preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protect {
    Geomask,
    Cnoise,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize per-client trajectories and demand samples.
    Gen {
        #[arg(long)]
        days: Option<u32>,
        /// Write only pickup/dropoff rows instead of 5-second points.
        #[arg(long)]
        events_only: bool,
    },
    /// Grid a trajectory CSV into a demand table and samples.
    Grid {
        #[arg(long)]
        input: PathBuf,
        /// Perturb the points first and also write them as CSV.
        #[arg(long, value_enum)]
        protect: Option<Protect>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        sensitivity_km: Option<f64>,
        #[arg(long)]
        sigma_space_km: Option<f64>,
        #[arg(long)]
        sigma_time_s: Option<f64>,
    },
    /// Contrastive warmup, neighbor selection and gossip; writes encoders.
    Pretrain,
    /// Train and evaluate one pipeline.
    Train {
        #[arg(long)]
        pipeline: Option<String>,
    },
    /// Train one pipeline and run the membership attack on every client.
    Attack {
        #[arg(long)]
        pipeline: Option<String>,
    },
    /// Run several pipelines on the same data.
    Compare {
        /// Extra configs compared with `--config`; without any, every
        /// pipeline runs on the base config.
        #[arg(long = "with")]
        with: Vec<PathBuf>,
        #[arg(long)]
        attack: bool,
    },
    /// Sweep m, gamma, epsilon or augmentation pairs.
    Sweep {
        #[arg(long)]
        param: String,
        /// Seeds base, base+1, ...; per-seed files plus a mean table.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn load(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::benchmark(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn pipeline(cfg: &mut ExperimentConfig, name: Option<&str>) -> Result<()> {
    if let Some(n) = name {
        cfg.pipeline = Pipeline::by_name(n)?;
    }
    Ok(())
}

fn events_as_trajectories(events: &[ccnet::synthdata::TripEvent]) -> TrajectoryData {
    let mut t = TrajectoryData::default();
    for e in events {
        t.points.entry(e.vehicle_id).or_default().push(ccnet::synthdata::TrajectoryPoint {
            vehicle_id: e.vehicle_id,
            time: e.time,
            point: e.point,
        });
        t.markers.push(StopMarker { vehicle_id: e.vehicle_id, time: e.time, kind: e.kind });
    }
    for pts in t.points.values_mut() {
        pts.sort_by(|a, b| a.time.total_cmp(&b.time));
        pts.dedup_by(|b, a| a.time == b.time);
    }
    t
}

fn gen(cfg: &mut ExperimentConfig, out: &Path, days: Option<u32>, events_only: bool) -> Result<()> {
    if let Some(d) = days {
        cfg.data.days = d;
        cfg.validate()?;
    }
    let profiles = cfg.data.profiles();
    let data = generate_clients(&profiles, cfg.data.days, cfg.seed, !events_only)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut manifest = Vec::new();
    for (p, d) in profiles.iter().zip(&data) {
        let dir = out.join(format!("client_{}", p.client_id));
        fs::create_dir_all(&dir)?;
        let traj = match &d.trajectories {
            Some(t) => t.clone(),
            None => events_as_trajectories(&d.events),
        };
        write_csv(create(&dir.join("trajectories.csv"))?, &traj)?;
        let table = ccnet::synthdata::demand_table(
            &d.events,
            &p.grid(cfg.grid.edge_km)?,
            cfg.grid.interval_hours,
            cfg.data.days,
        )?;
        let ds = build_samples(p.client_id, &table, cfg.data.history_len, cfg.data.thresholds, cfg.data.ring)?;
        write_samples(create(&dir.join("samples.bin"))?, &ds)?;
        manifest.push(serde_json::json!({
            "client_id": p.client_id,
            "regime_id": p.regime_id,
            "events": d.events.len(),
            "points": traj.point_count(),
            "samples": ds.len(),
        }));
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {} clients to {}", data.len(), out.display());
    Ok(())
}

fn bbox_center(data: &TrajectoryData) -> Result<GeoPoint> {
    let mut n = 0usize;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in data.all_points() {
        n += 1;
        lo = [lo[0].min(p.point.lat), lo[1].min(p.point.lon)];
        hi = [hi[0].max(p.point.lat), hi[1].max(p.point.lon)];
    }
    if n == 0 {
        return Err(Error::InvalidInput("trajectory file has no points".into()));
    }
    Ok(GeoPoint::new((lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0))
}

struct ProtectArgs {
    mode: Protect,
    epsilon: Option<f64>,
    sensitivity_km: Option<f64>,
    sigma_space_km: Option<f64>,
    sigma_time_s: Option<f64>,
}

fn protect_points(
    cfg: &ExperimentConfig,
    data: &TrajectoryData,
    origin: GeoPoint,
    a: &ProtectArgs,
) -> Result<TrajectoryData> {
    let pts: Vec<_> = data.all_points().copied().collect();
    let mut rng = stream(cfg.seed, "protect-cli", 0);
    let noisy = match a.mode {
        Protect::Geomask => geomask(
            &pts,
            origin,
            a.sigma_space_km.unwrap_or(cfg.privacy.sigma_space_km),
            a.sigma_time_s.unwrap_or(cfg.privacy.sigma_time_s),
            &mut rng,
        )?,
        Protect::Cnoise => {
            let s = match a.sensitivity_km.or(cfg.privacy.sensitivity_km) {
                Some(s) => s,
                None => sensitivity(&pts, origin)?,
            };
            let budget = PrivacyBudget::new(a.epsilon.unwrap_or(cfg.privacy.epsilon), s)
                .map_err(|e| Error::Config(e.to_string()))?;
            cnoise(&pts, origin, &budget, &mut rng)?
        }
    };
    let mut out = TrajectoryData { points: Default::default(), markers: data.markers.clone() };
    for mut p in noisy {
        p.time = p.time.max(0.0);
        let stream = out.points.entry(p.vehicle_id).or_default();
        if stream.last().is_none_or(|q| q.time < p.time) {
            stream.push(p);
        }
    }
    Ok(out)
}

fn grid(cfg: &ExperimentConfig, out: &Path, input: &Path, protect: Option<ProtectArgs>) -> Result<()> {
    let mut data = ingest_csv(input)?;
    let origin = bbox_center(&data)?;
    fs::create_dir_all(out)?;
    if let Some(a) = protect {
        data = protect_points(cfg, &data, origin, &a)?;
        write_csv(create(&out.join("protected.csv"))?, &data)?;
    }
    let events = extract_events(&data)?;
    let spec = GridSpec::new(origin, cfg.grid.edge_km)?;
    let located: Vec<(GeoPoint, f64)> = events.iter().map(|e| (e.point, e.time)).collect();
    let table = aggregate(&located, &spec, cfg.grid.interval_hours)?;
    let mut w = csv::Writer::from_writer(create(&out.join("demand.csv"))?);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["q", "r", "slot", "count"]).map_err(csv_err)?;
    let mut rows: Vec<_> = table.entries().collect();
    rows.sort();
    for ((c, slot), n) in rows {
        w.write_record([c.q.to_string(), c.r.to_string(), slot.to_string(), n.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    let ds = build_samples(0, &table, cfg.data.history_len, cfg.data.thresholds, cfg.data.ring)?;
    write_samples(create(&out.join("samples.bin"))?, &ds)?;
    println!("{} events in {} cells, {} samples", events.len(), table.active_cells().len(), ds.len());
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let clients = prepare(cfg)?;
    let models = cfg.models()?;
    let sets: Vec<TrainSet> = clients.iter().map(|c| TrainSet::from_dataset(&c.train)).collect();
    let (states, sim, neighbors, log) =
        ccnet_pretrain(&sets, &models, &cfg.contrastive.build()?, &cfg.federation, cfg.seed)?;
    fs::create_dir_all(out)?;
    let spec = models.contrastive()?;
    for (c, st) in clients.iter().zip(&states) {
        write_checkpoint(create(&out.join(format!("pretrained_{}.ckpt", c.profile.client_id)))?, &spec, &st.params)?;
    }
    write_jsonl(create(&out.join("rounds.jsonl"))?, &log)?;
    let rows: Vec<Vec<f64>> = (0..sim.n).map(|i| (0..sim.n).map(|j| sim.get(i, j)).collect()).collect();
    write_json(&out.join("neighbors.json"), &serde_json::json!({ "similarity": rows, "neighbors": neighbors }))?;
    for (i, nb) in neighbors.iter().enumerate() {
        println!("client {i}: neighbors {nb:?}");
    }
    Ok(())
}

fn write_report(out: &Path, r: &Report) -> Result<()> {
    write_json(&out.join("report.json"), r)?;
    fs::write(out.join("clients.csv"), clients_csv(r))?;
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    let o = run_experiment(cfg)?;
    fs::create_dir_all(out)?;
    write_report(out, &o.report)?;
    write_jsonl(create(&out.join("rounds.jsonl"))?, &o.log)?;
    let spec = cfg.models()?.supervised()?;
    for (c, m) in o.report.clients.iter().zip(&o.models) {
        write_checkpoint(create(&out.join(format!("model_{}.ckpt", c.client_id)))?, &spec, &m.params)?;
    }
    println!(
        "{}: mean balanced accuracy {:.4} (std {:.4})",
        o.report.pipeline, o.report.mean_balanced_accuracy, o.report.std_balanced_accuracy
    );
    Ok(o.report)
}

fn attack(cfg: &mut ExperimentConfig, out: &Path) -> Result<()> {
    cfg.attack.enabled = true;
    let r = train(cfg, out)?;
    for c in &r.clients {
        if let Some(a) = &c.attack {
            write_json(&out.join(format!("attack_{}.json", c.client_id)), a)?;
            println!(
                "client {}: attack success {:.4} (shuffled {:.4})",
                c.client_id,
                a.success_rate,
                c.shuffled_success.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn run_compare(
    cfg: &ExperimentConfig,
    out: &Path,
    with: &[PathBuf],
    seed: Option<u64>,
    with_attack: bool,
) -> Result<()> {
    let configs = if with.is_empty() {
        method_configs(cfg, with_attack)
    } else {
        let mut v = vec![cfg.clone()];
        for p in with {
            v.push(load(Some(p), seed)?);
        }
        v.iter_mut().for_each(|c| c.attack.enabled |= with_attack);
        v
    };
    let reports = compare(&configs)?;
    fs::create_dir_all(out.join("reports"))?;
    for (i, r) in reports.iter().enumerate() {
        write_json(&out.join("reports").join(format!("{i:02}_{}.json", r.pipeline)), r)?;
    }
    fs::write(out.join("comparison.csv"), comparison_csv(&reports))?;
    let labels: Vec<String> = reports.iter().map(|r| r.pipeline.clone()).collect();
    let acc: Vec<f64> = reports.iter().map(|r| r.mean_balanced_accuracy).collect();
    fs::write(out.join("comparison.svg"), bar_chart_svg("mean balanced accuracy", &labels, &acc))?;
    if reports.iter().any(|r| r.mean_attack_success.is_some()) {
        let mia: Vec<f64> = reports.iter().map(|r| r.mean_attack_success.unwrap_or(0.0)).collect();
        fs::write(out.join("attack.svg"), bar_chart_svg("membership attack success", &labels, &mia))?;
    }
    print!("{}", comparison_csv(&reports));
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, out: &Path, param: &str, seeds: u64) -> Result<()> {
    let param = SweepParam::by_name(param)?;
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    fs::create_dir_all(out)?;
    let mut per_seed = Vec::new();
    for k in 0..seeds {
        let mut c = cfg.clone();
        c.seed = cfg.seed + k;
        let points = sweep(&c, param)?;
        let stem = format!("sweep_{}_seed{}", param.name(), c.seed);
        fs::write(out.join(format!("{stem}.csv")), sweep_csv(param, &points))?;
        per_seed.push(points);
    }
    let mut mean = String::from("param,value,mean_bal_acc,seed_std\n");
    let mut means = Vec::new();
    for (i, p) in per_seed[0].iter().enumerate() {
        let reports: Vec<Report> = per_seed.iter().map(|s| s[i].report.clone()).collect();
        let (m, s) = across_seeds(&reports);
        mean.push_str(&format!("{},{},{m:.6},{s:.6}\n", param.name(), p.value));
        means.push((p.value.clone(), m));
    }
    fs::write(out.join(format!("sweep_{}.csv", param.name())), &mean)?;
    let mut shown = per_seed[0].clone();
    for (p, (_, m)) in shown.iter_mut().zip(&means) {
        p.report.mean_balanced_accuracy = *m;
    }
    fs::write(out.join(format!("sweep_{}.svg", param.name())), sweep_svg(param, &shown))?;
    print!("{mean}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_path();
    match cli.cmd {
        Cmd::Gen { days, events_only } => gen(&mut cfg, out, days, events_only),
        Cmd::Grid { input, protect, epsilon, sensitivity_km, sigma_space_km, sigma_time_s } => {
            let p = protect.map(|mode| ProtectArgs { mode, epsilon, sensitivity_km, sigma_space_km, sigma_time_s });
            grid(&cfg, out, &input, p)
        }
        Cmd::Pretrain => pretrain(&cfg, out),
        Cmd::Train { pipeline: p } => {
            pipeline(&mut cfg, p.as_deref())?;
            train(&cfg, out).map(|_| ())
        }
        Cmd::Attack { pipeline: p } => {
            pipeline(&mut cfg, p.as_deref())?;
            attack(&mut cfg, out)
        }
        Cmd::Compare { with, attack } => run_compare(&cfg, out, &with, cli.seed, attack),
        Cmd::Sweep { param, seeds } => run_sweep(&cfg, out, &param, seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! CSV tables, SVG charts, method comparisons and parameter sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::{ExperimentConfig, Pipeline};
use super::experiment::{mean_std, prepare, run_on, Report};

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per client.
pub fn clients_csv(r: &Report) -> String {
    let mut s = String::from(
        "client_id,regime_id,n_train,n_test,balanced_accuracy,recall_low,recall_mid,recall_high,mia_success\n",
    );
    for c in &r.clients {
        let rc = c.metrics.recall;
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{},{},{},{}",
            c.client_id,
            c.regime_id,
            c.n_train,
            c.n_test,
            c.metrics.balanced_accuracy,
            opt(rc[0]),
            opt(rc[1]),
            opt(rc[2]),
            opt(c.attack.as_ref().map(|a| a.success_rate))
        );
    }
    s
}

/// `method,mean_bal_acc,std,mia_success`.
pub fn comparison_csv(reports: &[Report]) -> String {
    let mut s = String::from("method,mean_bal_acc,std,mia_success\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{}",
            r.pipeline,
            r.mean_balanced_accuracy,
            r.std_balanced_accuracy,
            opt(r.mean_attack_success)
        );
    }
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical bars on a 0..1 axis.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let (w, h, pad) = (80 * labels.len().max(1) + 80, 320, 50);
    let plot_h = (h - 2 * pad) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2,
        esc(title)
    );
    for k in 0..=4 {
        let y = pad as f64 + plot_h * (1.0 - k as f64 / 4.0);
        let _ = writeln!(s, "<line x1=\"{pad}\" x2=\"{}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>", w - 20);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.2}</text>",
            pad - 4,
            y + 4.0,
            k as f64 / 4.0
        );
    }
    for (i, (l, v)) in labels.iter().zip(values).enumerate() {
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let x = pad + 10 + i * 80;
        let bh = plot_h * v;
        let y = pad as f64 + plot_h - bh;
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{y:.1}\" width=\"56\" height=\"{bh:.1}\" fill=\"#4a7ab5\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>", x + 28, y - 4.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x + 28, h - pad + 16, esc(l));
    }
    s.push_str("</svg>\n");
    s
}

/// Polyline over numeric x values on a 0..1 y axis.
pub fn line_chart_svg(title: &str, xs: &[f64], ys: &[f64]) -> String {
    let (w, h, pad) = (480, 320, 50);
    let (pw, ph) = ((w - 2 * pad) as f64, (h - 2 * pad) as f64);
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |x: f64| pad as f64 + pw * (x - lo) / span;
    let py = |y: f64| pad as f64 + ph * (1.0 - y.clamp(0.0, 1.0));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2,
        esc(title)
    );
    let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"#4a7ab5\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
    for (&x, &y) in xs.iter().zip(ys) {
        let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#4a7ab5\"/>", px(x), py(y));
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{x}</text>", px(x), h - pad + 16);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{y:.3}</text>", px(x), py(y) - 6.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Run every config on the same data. All configs must share a seed.
pub fn compare(configs: &[ExperimentConfig]) -> Result<Vec<Report>> {
    let first = configs.first().ok_or_else(|| Error::config("nothing to compare"))?;
    if configs.iter().any(|c| c.seed != first.seed || c.data != first.data || c.grid != first.grid) {
        return Err(Error::config("compared configs must share seed and data settings"));
    }
    let clients = prepare(first)?;
    configs.iter().map(|c| Ok(run_on(c, &clients)?.report)).collect()
}

/// The default comparison: every pipeline on one base config.
pub fn method_configs(base: &ExperimentConfig, with_attack: bool) -> Vec<ExperimentConfig> {
    Pipeline::ALL
        .into_iter()
        .map(|p| {
            let mut c = base.clone();
            c.pipeline = p;
            c.attack.enabled = with_attack;
            c
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    M,
    Gamma,
    Epsilon,
    Augmentation,
}

impl SweepParam {
    pub fn by_name(s: &str) -> Result<Self> {
        Ok(match s {
            "m" => Self::M,
            "gamma" => Self::Gamma,
            "epsilon" => Self::Epsilon,
            "aug" | "augmentation" => Self::Augmentation,
            other => return Err(Error::config(format!("unknown sweep parameter {other:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::M => "m",
            Self::Gamma => "gamma",
            Self::Epsilon => "epsilon",
            Self::Augmentation => "augmentation",
        }
    }
}

pub const M_VALUES: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 0.8];
pub const GAMMA_VALUES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
pub const EPSILON_VALUES: [f64; 3] = [0.1, 1.0, 10.0];
pub const AUGMENTATIONS: [&str; 5] = ["noise", "crop", "mask", "flip", "reverse"];

/// Unordered pairs of distinct augmentations, plus each one alone.
pub fn augmentation_pairs(names: &[&str]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for i in 0..names.len() {
        for j in i..names.len() {
            if i == j {
                out.push(vec![names[i].to_string()]);
            } else {
                out.push(vec![names[i].to_string(), names[j].to_string()]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub report: Report,
}

/// Sweep points as configs; every point keeps the base seed so all points
/// see the same data and random streams.
pub fn sweep_configs(base: &ExperimentConfig, param: SweepParam) -> Vec<(String, ExperimentConfig)> {
    match param {
        SweepParam::M => M_VALUES
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.pipeline = Pipeline::Ccnet;
                c.federation.m = m;
                (format!("{m}"), c)
            })
            .collect(),
        SweepParam::Gamma => GAMMA_VALUES
            .iter()
            .map(|&g| {
                let mut c = base.clone();
                c.pipeline = Pipeline::Ccnet;
                c.federation.gamma = g;
                (format!("{g}"), c)
            })
            .collect(),
        SweepParam::Epsilon => EPSILON_VALUES
            .iter()
            .map(|&e| {
                let mut c = base.clone();
                c.pipeline = Pipeline::Cnoise;
                c.privacy.epsilon = e;
                (format!("{e}"), c)
            })
            .collect(),
        SweepParam::Augmentation => augmentation_pairs(&AUGMENTATIONS)
            .into_iter()
            .map(|augs| {
                let mut c = base.clone();
                c.pipeline = Pipeline::Ccnet;
                let label = augs.join("+");
                c.contrastive.augmentations = augs;
                (label, c)
            })
            .collect(),
    }
}

pub fn sweep(base: &ExperimentConfig, param: SweepParam) -> Result<Vec<SweepPoint>> {
    let clients = prepare(base)?;
    sweep_configs(base, param)
        .into_iter()
        .map(|(value, c)| Ok(SweepPoint { value, report: run_on(&c, &clients)?.report }))
        .collect()
}

pub fn sweep_csv(param: SweepParam, points: &[SweepPoint]) -> String {
    let mut s = String::from("param,value,mean_bal_acc,std,mia_success\n");
    for p in points {
        let r = &p.report;
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{}",
            param.name(),
            p.value,
            r.mean_balanced_accuracy,
            r.std_balanced_accuracy,
            opt(r.mean_attack_success)
        );
    }
    s
}

pub fn sweep_svg(param: SweepParam, points: &[SweepPoint]) -> String {
    let ys: Vec<f64> = points.iter().map(|p| p.report.mean_balanced_accuracy).collect();
    let title = format!("balanced accuracy over {}", param.name());
    let xs: Option<Vec<f64>> = points.iter().map(|p| p.value.parse().ok()).collect();
    match xs {
        Some(xs) if param != SweepParam::Augmentation => line_chart_svg(&title, &xs, &ys),
        _ => bar_chart_svg(&title, &points.iter().map(|p| p.value.clone()).collect::<Vec<_>>(), &ys),
    }
}

/// Mean and spread of the per-seed means.
pub fn across_seeds(reports: &[Report]) -> (f64, f64) {
    mean_std(&reports.iter().map(|r| r.mean_balanced_accuracy).collect::<Vec<_>>())
}

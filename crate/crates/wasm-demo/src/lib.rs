//! Browser bindings: every export takes a JSON string and returns a JSON
//! string, or throws a JS error carrying the message.

use ccnet::contrastive::{augment, AugSpec};
use ccnet::fedsim::{select_neighbors, SimilarityMatrix};
use ccnet::hexgrid::{classify, Thresholds};
use ccnet::synthdata::{default_profiles, demand_table, generate_clients};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn parse(input: &str) -> Result<Value, String> {
    serde_json::from_str(input).map_err(|e| format!("bad JSON: {e}"))
}

fn get_u64(v: &Value, key: &str, default: u64) -> Result<u64, String> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(x) => x.as_u64().ok_or_else(|| format!("{key} must be a non-negative integer")),
    }
}

fn get_f64(v: &Value, key: &str, default: f64) -> Result<f64, String> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(x) => x.as_f64().ok_or_else(|| format!("{key} must be a number")),
    }
}

fn f64_list(v: &Value, key: &str) -> Result<Vec<f64>, String> {
    v.get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| format!("{key} must be an array"))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| format!("{key} must hold numbers")))
        .collect()
}

/// Simulate one built-in client and bin its trip events into hexagons.
/// Input: `{client, days, seed, edge_km, hour}`; `hour` (0-23) restricts
/// the counts to that hour of day, otherwise all hours are summed.
pub fn demand_map_json(input: &str) -> Result<String, String> {
    let v = parse(input)?;
    let client = get_u64(&v, "client", 0)? as usize;
    let days = get_u64(&v, "days", 2)? as u32;
    let seed = get_u64(&v, "seed", 0)?;
    let edge_km = get_f64(&v, "edge_km", 1.0)?;
    let hour = match v.get("hour") {
        None | Some(Value::Null) => None,
        Some(h) => Some(h.as_u64().filter(|h| *h < 24).ok_or("hour must be 0-23")? as usize),
    };
    if !(1..=14).contains(&days) {
        return Err("days must lie in 1..=14".into());
    }
    let profiles = default_profiles();
    let profile = profiles.get(client).ok_or_else(|| format!("client must be below {}", profiles.len()))?.clone();
    let data = generate_clients(std::slice::from_ref(&profile), days, seed, false).map_err(|e| e.to_string())?;
    let spec = profile.grid(edge_km).map_err(|e| e.to_string())?;
    let table = demand_table(&data[0].events, &spec, 1.0, days).map_err(|e| e.to_string())?;

    let mut cells = std::collections::BTreeMap::new();
    for ((cell, slot), n) in table.entries() {
        if hour.is_some_and(|h| table.slot(slot).hour_of_day() != h) {
            continue;
        }
        *cells.entry(cell).or_insert(0u64) += n as u64;
    }
    let per_slot = (days as u64 * if hour.is_some() { 1 } else { 24 }).max(1) as f64;
    let out: Vec<Value> = cells
        .into_iter()
        .map(|(c, n)| {
            let (x, y) = spec.cell_center_km(c);
            let mean = n as f64 / per_slot;
            let class = classify(mean.round() as u32, Thresholds::default()).map(|d| d.index()).unwrap_or(0);
            json!({ "q": c.q, "r": c.r, "x": x, "y": y, "count": n, "mean": mean, "class": class })
        })
        .collect();
    Ok(json!({
        "client": client,
        "regime": profile.regime_id,
        "events": data[0].events.len(),
        "edge_km": edge_km,
        "cells": out,
    })
    .to_string())
}

/// Apply an augmentation chain twice to one series.
/// Input: `{series, augs: ["noise:0.3", "crop"], seed}`.
pub fn augment_series_json(input: &str) -> Result<String, String> {
    let v = parse(input)?;
    let series = f64_list(&v, "series")?;
    if series.len() < 2 {
        return Err("series needs at least two points".into());
    }
    let seed = get_u64(&v, "seed", 0)?;
    let augs = v
        .get("augs")
        .and_then(Value::as_array)
        .ok_or("augs must be an array")?
        .iter()
        .map(|a| {
            a.as_str()
                .ok_or_else(|| "augs must hold strings".to_string())
                .and_then(|s| AugSpec::by_name(s).map_err(|e| e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let views: Vec<Vec<f64>> = (0..2)
        .map(|k| {
            let mut rng = ccnet::rng::stream(seed, "demo-augment", k);
            augs.iter().fold(series.clone(), |x, a| augment(&x, a, &mut rng))
        })
        .collect();
    Ok(json!({ "original": series, "views": views }).to_string())
}

/// Threshold a similarity matrix into neighbor sets.
/// Input: `{similarity: [[...], ...], m}`.
pub fn neighbor_graph_json(input: &str) -> Result<String, String> {
    let v = parse(input)?;
    let rows = v.get("similarity").and_then(Value::as_array).ok_or("similarity must be an array of rows")?;
    let rows = rows
        .iter()
        .map(|r| {
            r.as_array()
                .ok_or("similarity rows must be arrays")?
                .iter()
                .map(|x| x.as_f64().ok_or("similarity entries must be numbers"))
                .collect::<Result<Vec<f64>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err("similarity must be a non-empty square matrix".into());
    }
    let m = get_f64(&v, "m", -0.5)?;
    if !(-1.0..=1.0).contains(&m) {
        return Err("m must lie in [-1, 1]".into());
    }
    let nb = select_neighbors(&SimilarityMatrix::from_rows(&rows), m);
    let edges: usize = nb.iter().map(Vec::len).sum::<usize>() / 2;
    Ok(json!({ "neighbors": nb, "edges": edges }).to_string())
}

#[wasm_bindgen]
pub fn demand_map(input: &str) -> Result<String, JsError> {
    demand_map_json(input).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn augment_series(input: &str) -> Result<String, JsError> {
    augment_series_json(input).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn neighbor_graph(input: &str) -> Result<String, JsError> {
    neighbor_graph_json(input).map_err(|e| JsError::new(&e))
}

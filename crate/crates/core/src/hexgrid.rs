//! Hexagonal virtual gridding.
//!
//! Points are projected onto a local equirectangular plane (km) around the
//! grid origin, converted to fractional axial coordinates and cube-rounded
//! to the nearest cell. Trip events are then counted per `(cell, slot)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;
const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_finite(&self) -> bool {
        self.lat.is_finite() && self.lon.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::invalid(format!("non-finite coordinate {self:?}")));
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(format!("coordinate out of range {self:?}")));
        }
        Ok(())
    }
}

/// Local planar coordinates in km, x east and y north of the origin.
pub fn project(p: GeoPoint, origin: GeoPoint) -> (f64, f64) {
    let k = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
    let x = (p.lon - origin.lon) * k * origin.lat.to_radians().cos();
    let y = (p.lat - origin.lat) * k;
    (x, y)
}

pub fn unproject(x: f64, y: f64, origin: GeoPoint) -> GeoPoint {
    let k = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
    GeoPoint { lat: origin.lat + y / k, lon: origin.lon + x / (k * origin.lat.to_radians().cos()) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: GeoPoint,
    /// Hexagon edge length (equal to the circumradius).
    pub edge_km: f64,
    pub pointy_top: bool,
}

impl GridSpec {
    pub fn new(origin: GeoPoint, edge_km: f64) -> Result<Self> {
        let spec = Self { origin, edge_km, pointy_top: true };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.edge_km > 0.0 && self.edge_km.is_finite()) {
            return Err(Error::config(format!("edge_km must be positive, got {}", self.edge_km)));
        }
        if !self.origin.is_finite() {
            return Err(Error::config("grid origin must be finite"));
        }
        Ok(())
    }

    /// Fractional axial coordinates of a planar point.
    pub fn fractional_axial(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.edge_km;
        if self.pointy_top {
            ((SQRT3 / 3.0 * x - y / 3.0) / s, (2.0 / 3.0 * y) / s)
        } else {
            ((2.0 / 3.0 * x) / s, (-x / 3.0 + SQRT3 / 3.0 * y) / s)
        }
    }

    /// Planar center of a cell.
    pub fn cell_center_km(&self, c: HexCellId) -> (f64, f64) {
        let s = self.edge_km;
        let (q, r) = (c.q as f64, c.r as f64);
        if self.pointy_top {
            (s * (SQRT3 * q + SQRT3 / 2.0 * r), s * 1.5 * r)
        } else {
            (s * 1.5 * q, s * (SQRT3 / 2.0 * q + SQRT3 * r))
        }
    }

    pub fn locate_km(&self, x: f64, y: f64) -> HexCellId {
        let (q, r) = self.fractional_axial(x, y);
        cube_round(q, r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HexCellId {
    pub q: i32,
    pub r: i32,
}

impl HexCellId {
    pub const fn new(q: i32, r: i32) -> Self {
        Self { q, r }
    }

    pub fn s(&self) -> i32 {
        -self.q - self.r
    }

    /// Hex distance in cells.
    pub fn distance(&self, other: HexCellId) -> i32 {
        let dq = (self.q - other.q).abs();
        let dr = (self.r - other.r).abs();
        let ds = (self.s() - other.s()).abs();
        dq.max(dr).max(ds)
    }
}

impl fmt::Display for HexCellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.q, self.r)
    }
}

const AXIAL_DIRECTIONS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

/// Round fractional axial coordinates to the containing hexagon.
pub fn cube_round(q: f64, r: f64) -> HexCellId {
    let s = -q - r;
    let (mut rq, mut rr, rs) = (q.round(), r.round(), s.round());
    let dq = (rq - q).abs();
    let dr = (rr - r).abs();
    let ds = (rs - s).abs();
    if dq > dr && dq > ds {
        rq = -rr - rs;
    } else if dr > ds {
        rr = -rq - rs;
    }
    HexCellId::new(rq as i32, rr as i32)
}

pub fn locate(p: GeoPoint, spec: &GridSpec) -> Result<HexCellId> {
    if !p.is_finite() {
        return Err(Error::invalid(format!("non-finite coordinate {p:?}")));
    }
    let (x, y) = project(p, spec.origin);
    Ok(spec.locate_km(x, y))
}

pub fn center(c: HexCellId, spec: &GridSpec) -> GeoPoint {
    let (x, y) = spec.cell_center_km(c);
    unproject(x, y, spec.origin)
}

pub fn neighbors(c: HexCellId) -> [HexCellId; 6] {
    AXIAL_DIRECTIONS.map(|(dq, dr)| HexCellId::new(c.q + dq, c.r + dr))
}

/// All cells within `radius` steps of `c`, including `c`.
pub fn disk(c: HexCellId, radius: i32) -> Vec<HexCellId> {
    let mut out = Vec::new();
    for dq in -radius..=radius {
        let lo = (-radius).max(-dq - radius);
        let hi = radius.min(-dq + radius);
        for dr in lo..=hi {
            out.push(HexCellId::new(c.q + dq, c.r + dr));
        }
    }
    out
}

/// Seconds-based slot clock. The dataset epoch (time 0) is a Monday 00:00.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSlot {
    pub index: u64,
    pub interval_hours: f64,
}

impl TimeSlot {
    pub fn start_hours(&self) -> f64 {
        self.index as f64 * self.interval_hours
    }

    pub fn hour_of_day(&self) -> usize {
        (self.start_hours().rem_euclid(24.0)).floor() as usize % 24
    }

    pub fn day_of_week(&self) -> usize {
        ((self.start_hours() / 24.0).floor() as u64 % 7) as usize
    }
}

pub fn slot_of(time_s: f64, interval_hours: f64) -> Result<u64> {
    if !time_s.is_finite() || time_s < 0.0 {
        return Err(Error::invalid(format!("timestamp {time_s} precedes dataset epoch")));
    }
    Ok((time_s / (interval_hours * 3600.0)).floor() as u64)
}

fn check_interval(interval_hours: f64) -> Result<()> {
    if interval_hours > 0.0 && interval_hours.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("interval_hours must be positive, got {interval_hours}")))
    }
}

/// Per-cell, per-slot demand counts. Absent keys count as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandTable {
    pub spec: GridSpec,
    pub interval_hours: f64,
    /// Number of slots covered, starting at slot 0.
    pub slot_count: u64,
    entries: BTreeMap<(HexCellId, u64), u32>,
}

impl DemandTable {
    pub fn new(spec: GridSpec, interval_hours: f64, slot_count: u64) -> Self {
        Self { spec, interval_hours, slot_count, entries: BTreeMap::new() }
    }

    pub fn count(&self, cell: HexCellId, slot: u64) -> u32 {
        self.entries.get(&(cell, slot)).copied().unwrap_or(0)
    }

    pub fn add(&mut self, cell: HexCellId, slot: u64, n: u32) {
        if n == 0 {
            return;
        }
        *self.entries.entry((cell, slot)).or_insert(0) += n;
        self.slot_count = self.slot_count.max(slot + 1);
    }

    pub fn entries(&self) -> impl Iterator<Item = ((HexCellId, u64), u32)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.values().map(|&v| v as u64).sum()
    }

    /// Cells with at least one event.
    pub fn active_cells(&self) -> BTreeSet<HexCellId> {
        self.entries.keys().map(|(c, _)| *c).collect()
    }

    pub fn with_slot_count(mut self, slot_count: u64) -> Self {
        self.slot_count = self.slot_count.max(slot_count);
        self
    }

    pub fn slot(&self, index: u64) -> TimeSlot {
        TimeSlot { index, interval_hours: self.interval_hours }
    }
}

/// Count events per `(cell, slot)`; slots are half-open `[start, start + interval)`.
pub fn aggregate(events: &[(GeoPoint, f64)], spec: &GridSpec, interval_hours: f64) -> Result<DemandTable> {
    spec.validate()?;
    check_interval(interval_hours)?;
    let mut table = DemandTable::new(*spec, interval_hours, 0);
    for &(p, t) in events {
        let cell = locate(p, spec)?;
        let slot = slot_of(t, interval_hours)?;
        table.add(cell, slot, 1);
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DemandClass {
    Low = 0,
    Mid = 1,
    High = 2,
}

impl DemandClass {
    pub const ALL: [DemandClass; 3] = [DemandClass::Low, DemandClass::Mid, DemandClass::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Cut points: `count < mid` is Low, `mid <= count < high` is Mid, else High.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mid: u32,
    pub high: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { mid: 1, high: 5 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if self.mid == 0 || self.mid > self.high {
            return Err(Error::config(format!(
                "thresholds must satisfy 0 < mid <= high, got ({}, {})",
                self.mid, self.high
            )));
        }
        Ok(())
    }
}

pub fn classify(count: u32, thresholds: Thresholds) -> Result<DemandClass> {
    thresholds.validate()?;
    Ok(classify_unchecked(count, thresholds))
}

pub(crate) fn classify_unchecked(count: u32, t: Thresholds) -> DemandClass {
    if count < t.mid {
        DemandClass::Low
    } else if count < t.high {
        DemandClass::Mid
    } else {
        DemandClass::High
    }
}

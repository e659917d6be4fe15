//! Synthetic per-client taxi data, trajectory CSV ingestion, stop-event
//! extraction and supervised sample construction.
//!
//! Each client is a [`RegionProfile`]: hotspots with Gaussian spatial
//! kernels, hourly and weekday rhythms and a base rate. Trips start at a
//! hotspot and end at a hotspot chosen by weight, so pickups and dropoffs
//! both follow the hotspot layout. Profiles with the same `regime_id`
//! share rhythms and hotspot offsets and differ only in where the region
//! sits on the map.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexgrid::{
    self, classify, disk, DemandClass, DemandTable, GeoPoint, GridSpec, HexCellId, Thresholds, TimeSlot,
};
use crate::tensornet::{Matrix, NUM_CLASSES};

/// Seconds a vehicle waits at a stop on either side of the marker.
const DWELL_S: f64 = 60.0;
/// Half-width of the centroid window around a stop marker.
pub const STOP_WINDOW_S: f64 = 45.0;
const SAMPLE_SPACING_S: f64 = 5.0;
const SPEED_KMH: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    /// Offset from the region origin, km east and km north.
    pub offset_km: (f64, f64),
    pub weight: f64,
    pub spread_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProfile {
    pub client_id: u32,
    /// Region anchor; also the client's grid origin.
    pub origin: GeoPoint,
    pub bbox_km: (f64, f64),
    pub hotspots: Vec<Hotspot>,
    pub daily_rhythm: Vec<f64>,
    pub weekly_rhythm: Vec<f64>,
    /// Expected demand events per hour over the whole region at unit rhythm.
    pub base_rate: f64,
    pub regime_id: u32,
}

impl RegionProfile {
    pub fn validate(&self) -> Result<()> {
        self.origin.validate()?;
        let bad = |m: &str| Err(Error::config(format!("client {}: {m}", self.client_id)));
        if self.daily_rhythm.len() != 24 || self.weekly_rhythm.len() != 7 {
            return bad("rhythms must have 24 hourly and 7 daily entries");
        }
        if self.daily_rhythm.iter().chain(&self.weekly_rhythm).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("rhythm multipliers must be non-negative");
        }
        if !(self.base_rate >= 0.0 && self.base_rate.is_finite()) {
            return bad("base rate must be non-negative");
        }
        if !(self.bbox_km.0 > 0.0 && self.bbox_km.1 > 0.0) {
            return bad("bounding box must be positive");
        }
        if self.hotspots.iter().any(|h| !(h.weight >= 0.0) || !(h.spread_km > 0.0)) {
            return bad("hotspot weights must be >= 0 and spreads > 0");
        }
        if self.hotspots.iter().map(|h| h.weight).sum::<f64>() <= 0.0 {
            return bad("hotspot weights must sum to a positive value");
        }
        Ok(())
    }

    pub fn grid(&self, edge_km: f64) -> Result<GridSpec> {
        GridSpec::new(self.origin, edge_km)
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x / mean).collect()
}

fn business_daily() -> Vec<f64> {
    normalized(&[
        0.3, 0.25, 0.2, 0.2, 0.25, 0.4, 0.8, 1.6, 2.0, 1.7, 1.2, 1.1, 1.3, 1.2, 1.1, 1.2, 1.5, 1.9, 2.0, 1.5, 1.0, 0.7,
        0.5, 0.4,
    ])
}

fn nightlife_daily() -> Vec<f64> {
    normalized(&[
        2.0, 1.8, 1.4, 0.9, 0.5, 0.3, 0.2, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.6, 0.6, 0.6, 0.7, 0.9, 1.2, 1.5, 1.8, 2.0,
        2.2, 2.2,
    ])
}

/// Default five-client setup: clients 0-2 follow a commuter rhythm over a
/// wide busy area, clients 3-4 a night-time rhythm around two quieter
/// hotspots.
pub fn default_profiles() -> Vec<RegionProfile> {
    let origins = [
        GeoPoint::new(35.68, 139.76),
        GeoPoint::new(34.69, 135.50),
        GeoPoint::new(43.06, 141.35),
        GeoPoint::new(33.59, 130.40),
        GeoPoint::new(35.18, 136.91),
    ];
    origins
        .iter()
        .enumerate()
        .map(|(i, &origin)| {
            let business = i < 3;
            if business {
                RegionProfile {
                    client_id: i as u32,
                    origin,
                    bbox_km: (6.0, 6.0),
                    hotspots: vec![
                        Hotspot { offset_km: (0.0, 0.0), weight: 0.35, spread_km: 1.4 },
                        Hotspot { offset_km: (1.8, 1.2), weight: 0.25, spread_km: 1.1 },
                        Hotspot { offset_km: (-1.8, 1.2), weight: 0.2, spread_km: 1.1 },
                        Hotspot { offset_km: (0.0, -1.8), weight: 0.2, spread_km: 1.1 },
                    ],
                    daily_rhythm: business_daily(),
                    weekly_rhythm: normalized(&[1.15, 1.15, 1.15, 1.15, 1.2, 0.65, 0.55]),
                    base_rate: 90.0,
                    regime_id: 0,
                }
            } else {
                RegionProfile {
                    client_id: i as u32,
                    origin,
                    bbox_km: (6.0, 6.0),
                    hotspots: vec![
                        Hotspot { offset_km: (0.4, -0.4), weight: 0.6, spread_km: 0.8 },
                        Hotspot { offset_km: (-1.5, -1.0), weight: 0.4, spread_km: 0.9 },
                    ],
                    daily_rhythm: nightlife_daily(),
                    weekly_rhythm: normalized(&[0.7, 0.7, 0.8, 0.9, 1.4, 1.7, 1.0]),
                    base_rate: 12.0,
                    regime_id: 1,
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Pickup,
    Dropoff,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Pickup => "pickup",
            EventKind::Dropoff => "dropoff",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripEvent {
    pub vehicle_id: u64,
    pub time: f64,
    pub point: GeoPoint,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub vehicle_id: u64,
    pub time: f64,
    pub point: GeoPoint,
}

/// A pickup or dropoff flag at a time; the location comes from nearby points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopMarker {
    pub vehicle_id: u64,
    pub time: f64,
    pub kind: EventKind,
}

/// Per-vehicle point streams plus stop markers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryData {
    pub points: BTreeMap<u64, Vec<TrajectoryPoint>>,
    pub markers: Vec<StopMarker>,
}

impl TrajectoryData {
    pub fn point_count(&self) -> usize {
        self.points.values().map(Vec::len).sum()
    }

    pub fn all_points(&self) -> impl Iterator<Item = &TrajectoryPoint> {
        self.points.values().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: u32,
    pub regime_id: u32,
    pub events: Vec<TripEvent>,
    pub trajectories: Option<TrajectoryData>,
}

#[derive(Debug, Clone, Copy)]
struct Trip {
    pickup: (f64, GeoPoint),
    dropoff: (f64, GeoPoint),
}

fn sample_hotspot_point<R: Rng + ?Sized>(p: &RegionProfile, h: &Hotspot, rng: &mut R) -> GeoPoint {
    // Gaussian around the hotspot, truncated to the region box by rejection
    let n = Normal::new(0.0, h.spread_km).expect("positive spread");
    let (hw, hh) = (p.bbox_km.0 / 2.0, p.bbox_km.1 / 2.0);
    for _ in 0..64 {
        let x = h.offset_km.0 + n.sample(rng);
        let y = h.offset_km.1 + n.sample(rng);
        if x.abs() <= hw && y.abs() <= hh {
            return hexgrid::unproject(x, y, p.origin);
        }
    }
    hexgrid::unproject(h.offset_km.0.clamp(-hw, hw), h.offset_km.1.clamp(-hh, hh), p.origin)
}

fn pick_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn round_up_to_spacing(s: f64) -> f64 {
    (s / SAMPLE_SPACING_S).ceil() * SAMPLE_SPACING_S
}

fn generate_trips<R: Rng + ?Sized>(p: &RegionProfile, days: u32, rng: &mut R) -> Vec<Trip> {
    let end = days as f64 * 86_400.0;
    let weights: Vec<f64> = p.hotspots.iter().map(|h| h.weight).collect();
    let wsum: f64 = weights.iter().sum();
    let mut trips = Vec::new();
    for hour in 0..days as usize * 24 {
        let rhythm = p.daily_rhythm[hour % 24] * p.weekly_rhythm[(hour / 24) % 7];
        for h in &p.hotspots {
            // each trip yields two demand events
            let lambda = p.base_rate * rhythm * h.weight / wsum / 2.0;
            if lambda <= 0.0 {
                continue;
            }
            let n = Poisson::new(lambda).expect("positive rate").sample(rng) as usize;
            for _ in 0..n {
                let t_pick = hour as f64 * 3600.0 + rng.random_range(0..720u32) as f64 * SAMPLE_SPACING_S;
                let from = sample_hotspot_point(p, h, rng);
                let to = sample_hotspot_point(p, &p.hotspots[pick_weighted(&weights, rng)], rng);
                let (x0, y0) = hexgrid::project(from, p.origin);
                let (x1, y1) = hexgrid::project(to, p.origin);
                let km = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
                let dur = round_up_to_spacing(2.0 * STOP_WINDOW_S + km / SPEED_KMH * 3600.0);
                let t_drop = t_pick + dur;
                if t_pick >= DWELL_S && t_drop + DWELL_S < end {
                    trips.push(Trip { pickup: (t_pick, from), dropoff: (t_drop, to) });
                }
            }
        }
    }
    trips.sort_by(|a, b| a.pickup.0.total_cmp(&b.pickup.0));
    trips
}

fn lerp(a: GeoPoint, b: GeoPoint, f: f64) -> GeoPoint {
    GeoPoint::new(a.lat + (b.lat - a.lat) * f, a.lon + (b.lon - a.lon) * f)
}

/// Assign trips to vehicles and emit 5-second point streams: stationary
/// around each stop, straight-line motion in between.
fn build_fleet(trips: &[Trip], with_points: bool) -> (Vec<TripEvent>, Option<TrajectoryData>) {
    let mut free: BinaryHeap<Reverse<(u64, u64)>> = BinaryHeap::new();
    let mut next_vehicle = 0u64;
    let mut events = Vec::with_capacity(trips.len() * 2);
    let mut traj = TrajectoryData::default();
    for trip in trips {
        let start = trip.pickup.0 - DWELL_S;
        let vehicle = match free.peek() {
            Some(Reverse((t, v))) if (*t as f64) < start => {
                let v = *v;
                free.pop();
                v
            }
            _ => {
                next_vehicle += 1;
                next_vehicle - 1
            }
        };
        let stop = trip.dropoff.0 + DWELL_S;
        free.push(Reverse((stop as u64, vehicle)));
        events.push(TripEvent {
            vehicle_id: vehicle,
            time: trip.pickup.0,
            point: trip.pickup.1,
            kind: EventKind::Pickup,
        });
        events.push(TripEvent {
            vehicle_id: vehicle,
            time: trip.dropoff.0,
            point: trip.dropoff.1,
            kind: EventKind::Dropoff,
        });
        if with_points {
            traj.markers.push(StopMarker { vehicle_id: vehicle, time: trip.pickup.0, kind: EventKind::Pickup });
            traj.markers.push(StopMarker { vehicle_id: vehicle, time: trip.dropoff.0, kind: EventKind::Dropoff });
            let stream = traj.points.entry(vehicle).or_default();
            let depart = trip.pickup.0 + STOP_WINDOW_S;
            let arrive = trip.dropoff.0 - STOP_WINDOW_S;
            let mut t = start;
            while t <= stop {
                let point = if t <= depart {
                    trip.pickup.1
                } else if t >= arrive {
                    trip.dropoff.1
                } else {
                    lerp(trip.pickup.1, trip.dropoff.1, (t - depart) / (arrive - depart))
                };
                stream.push(TrajectoryPoint { vehicle_id: vehicle, time: t, point });
                t += SAMPLE_SPACING_S;
            }
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.vehicle_id.cmp(&b.vehicle_id)));
    traj.markers.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id).then(a.time.total_cmp(&b.time)));
    (events, with_points.then_some(traj))
}

/// Generate every client's trip events (and optionally 5-second trajectories).
/// Each client draws from its own stream derived from `(seed, client_id)`.
pub fn generate_clients(
    profiles: &[RegionProfile],
    days: u32,
    seed: u64,
    with_trajectories: bool,
) -> Result<Vec<ClientData>> {
    if profiles.is_empty() {
        return Err(Error::config("no client profiles"));
    }
    if days == 0 {
        return Err(Error::config("days must be at least 1"));
    }
    let mut ids = BTreeSet::new();
    for p in profiles {
        p.validate()?;
        if !ids.insert(p.client_id) {
            return Err(Error::config(format!("duplicate client id {}", p.client_id)));
        }
    }
    Ok(profiles
        .iter()
        .map(|p| {
            let mut rng = crate::rng::stream(seed, "generate", p.client_id as u64);
            let trips = generate_trips(p, days, &mut rng);
            let (events, trajectories) = build_fleet(&trips, with_trajectories);
            ClientData { client_id: p.client_id, regime_id: p.regime_id, events, trajectories }
        })
        .collect())
}

/// Demand table over `days` whole days from located events.
pub fn demand_table(events: &[TripEvent], spec: &GridSpec, interval_hours: f64, days: u32) -> Result<DemandTable> {
    let pts: Vec<(GeoPoint, f64)> = events.iter().map(|e| (e.point, e.time)).collect();
    let slots = (days as f64 * 24.0 / interval_hours).ceil() as u64;
    Ok(hexgrid::aggregate(&pts, spec, interval_hours)?.with_slot_count(slots))
}

/// Recover located trip events from stop markers: each event is placed at
/// the centroid of its vehicle's points within +-45 s of the marker, and
/// dropped when no such point exists.
pub fn extract_events(data: &TrajectoryData) -> Result<Vec<TripEvent>> {
    for (v, pts) in &data.points {
        if pts.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::invalid(format!("points of vehicle {v} are not time-sorted")));
        }
    }
    let mut out = Vec::new();
    for m in &data.markers {
        let Some(pts) = data.points.get(&m.vehicle_id) else { continue };
        let lo = pts.partition_point(|p| p.time < m.time - STOP_WINDOW_S);
        let hi = pts.partition_point(|p| p.time <= m.time + STOP_WINDOW_S);
        if hi <= lo {
            continue;
        }
        let n = (hi - lo) as f64;
        let lat = pts[lo..hi].iter().map(|p| p.point.lat).sum::<f64>() / n;
        let lon = pts[lo..hi].iter().map(|p| p.point.lon).sum::<f64>() / n;
        out.push(TripEvent { vehicle_id: m.vehicle_id, time: m.time, point: GeoPoint::new(lat, lon), kind: m.kind });
    }
    Ok(out)
}

const CSV_HEADER: [&str; 5] = ["vehicle_id", "timestamp_s", "lat", "lon", "event"];

#[derive(Debug, Deserialize)]
struct CsvRow {
    vehicle_id: String,
    timestamp_s: String,
    lat: String,
    lon: String,
    event: String,
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse { line, msg: format!("bad {what} {s:?}") })
}

/// Parse a trajectory CSV. Marker rows carry `pickup`/`dropoff` in the
/// `event` column; rows with coordinates are also trajectory points, rows
/// with empty coordinates are markers only.
pub fn ingest_reader<R: Read>(reader: R) -> Result<TrajectoryData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    if header.iter().map(str::trim).ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse { line: 1, msg: format!("expected header {}", CSV_HEADER.join(",")) });
    }
    let mut data = TrajectoryData::default();
    let mut last_time: BTreeMap<u64, f64> = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let vehicle_id: u64 = parse_field(&row.vehicle_id, "vehicle_id", line)?;
        let time: f64 = parse_field(&row.timestamp_s, "timestamp_s", line)?;
        if !time.is_finite() || time < 0.0 {
            return Err(Error::Parse { line, msg: format!("timestamp {time} out of range") });
        }
        if let Some(&prev) = last_time.get(&vehicle_id) {
            if time < prev {
                return Err(Error::invalid(format!("line {line}: vehicle {vehicle_id} goes back in time")));
            }
        }
        last_time.insert(vehicle_id, time);
        let kind = match row.event.trim() {
            "" => None,
            "pickup" => Some(EventKind::Pickup),
            "dropoff" => Some(EventKind::Dropoff),
            other => return Err(Error::Parse { line, msg: format!("unknown event {other:?}") }),
        };
        let (lat, lon) = (row.lat.trim(), row.lon.trim());
        if lat.is_empty() != lon.is_empty() {
            return Err(Error::Parse { line, msg: "lat and lon must both be present or both empty".into() });
        }
        if !lat.is_empty() {
            let point = GeoPoint::new(parse_field(lat, "lat", line)?, parse_field(lon, "lon", line)?);
            point.validate().map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            let stream = data.points.entry(vehicle_id).or_default();
            if stream.last().is_some_and(|p| p.time >= time) {
                return Err(Error::invalid(format!("line {line}: duplicate timestamp for vehicle {vehicle_id}")));
            }
            stream.push(TrajectoryPoint { vehicle_id, time, point });
        } else if kind.is_none() {
            return Err(Error::Parse { line, msg: "row has neither coordinates nor an event".into() });
        }
        if let Some(kind) = kind {
            data.markers.push(StopMarker { vehicle_id, time, kind });
        }
    }
    data.markers.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id).then(a.time.total_cmp(&b.time)));
    Ok(data)
}

pub fn ingest_csv(path: &Path) -> Result<TrajectoryData> {
    ingest_reader(BufReader::new(File::open(path)?))
}

/// Write in the ingest schema. Marker rows are merged into the point row
/// at the same time, or written with empty coordinates when absent.
pub fn write_csv<W: Write>(writer: W, data: &TrajectoryData) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    let mut vehicles: BTreeSet<u64> = data.points.keys().copied().collect();
    vehicles.extend(data.markers.iter().map(|m| m.vehicle_id));
    for v in vehicles {
        let empty = Vec::new();
        let pts = data.points.get(&v).unwrap_or(&empty);
        let mut marks: Vec<&StopMarker> = data.markers.iter().filter(|m| m.vehicle_id == v).collect();
        marks.sort_by(|a, b| a.time.total_cmp(&b.time));
        let (mut i, mut j) = (0, 0);
        while i < pts.len() || j < marks.len() {
            let take_point = j >= marks.len() || (i < pts.len() && pts[i].time < marks[j].time);
            let (time, coords, event) = if take_point {
                i += 1;
                (pts[i - 1].time, Some(pts[i - 1].point), "")
            } else if i < pts.len() && pts[i].time == marks[j].time {
                i += 1;
                j += 1;
                (pts[i - 1].time, Some(pts[i - 1].point), marks[j - 1].kind.as_str())
            } else {
                j += 1;
                (marks[j - 1].time, None, marks[j - 1].kind.as_str())
            };
            let (lat, lon) = coords.map_or((String::new(), String::new()), |p| (p.lat.to_string(), p.lon.to_string()));
            w.write_record([v.to_string(), time.to_string(), lat, lon, event.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One supervised example: the demand class of `cell` at `slot` given the
/// previous `history.len()` slot counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSample {
    pub cell: HexCellId,
    pub slot: TimeSlot,
    /// Cell coordinates scaled to [-1, 1] over the client's included cells.
    pub cell_features: [f64; 2],
    /// Counts at slots `slot - L .. slot - 1`, oldest first.
    pub history: Vec<u32>,
    pub label: DemandClass,
}

/// Width of one model input row for history length `l`.
pub fn input_width(l: usize) -> usize {
    l + crate::tensornet::presets::SIDE_FEATURES
}

impl DemandSample {
    /// `ln(1 + count)` history, hour one-hot (24), weekday one-hot (7), cell (2).
    pub fn write_input(&self, row: &mut [f64]) {
        let l = self.history.len();
        row.fill(0.0);
        for (o, &c) in row.iter_mut().zip(&self.history) {
            *o = (c as f64).ln_1p();
        }
        row[l + self.slot.hour_of_day()] = 1.0;
        row[l + 24 + self.slot.day_of_week()] = 1.0;
        row[l + 31] = self.cell_features[0];
        row[l + 32] = self.cell_features[1];
    }

    pub fn time_features(&self) -> [f64; 31] {
        let mut f = [0.0; 31];
        f[self.slot.hour_of_day()] = 1.0;
        f[24 + self.slot.day_of_week()] = 1.0;
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: u32,
    pub history_len: usize,
    pub samples: Vec<DemandSample>,
    pub class_ratios: [f64; NUM_CLASSES],
}

/// Add-one smoothed class shares.
pub fn class_ratios(samples: &[DemandSample]) -> [f64; NUM_CLASSES] {
    let mut counts = [1.0; NUM_CLASSES];
    for s in samples {
        counts[s.label.index()] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.map(|c| c / total)
}

/// Unsmoothed class histogram, as shares.
pub fn label_distribution(samples: &[DemandSample]) -> [f64; NUM_CLASSES] {
    let mut counts = [0.0; NUM_CLASSES];
    for s in samples {
        counts[s.label.index()] += 1.0;
    }
    let total: f64 = counts.iter().sum::<f64>().max(1.0);
    counts.map(|c| c / total)
}

/// Jensen-Shannon divergence in bits (bounded by 1).
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).log2()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

impl ClientDataset {
    pub fn from_samples(client_id: u32, history_len: usize, samples: Vec<DemandSample>) -> Self {
        let class_ratios = class_ratios(&samples);
        Self { client_id, history_len, samples, class_ratios }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Matrix {
        let w = input_width(self.history_len);
        let mut m = Matrix::zeros(self.samples.len(), w);
        for (i, s) in self.samples.iter().enumerate() {
            s.write_input(m.row_mut(i));
        }
        m
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.index()).collect()
    }

    /// Time-ordered split: samples whose slot falls in the last
    /// `test_fraction` of the covered slot range form the test set.
    pub fn split_by_time(&self, test_fraction: f64) -> (ClientDataset, ClientDataset) {
        let (Some(lo), Some(hi)) =
            (self.samples.iter().map(|s| s.slot.index).min(), self.samples.iter().map(|s| s.slot.index).max())
        else {
            return (self.clone(), ClientDataset::from_samples(self.client_id, self.history_len, Vec::new()));
        };
        let span = (hi - lo + 1) as f64;
        let cutoff = lo + (span * (1.0 - test_fraction)).round() as u64;
        let (train, test): (Vec<_>, Vec<_>) = self.samples.iter().cloned().partition(|s| s.slot.index < cutoff);
        (
            ClientDataset::from_samples(self.client_id, self.history_len, train),
            ClientDataset::from_samples(self.client_id, self.history_len, test),
        )
    }
}

/// One sample per included cell and slot `>= L`. Included cells are every
/// cell that is ever non-zero plus all cells within `ring` steps of one.
pub fn build_samples(
    client_id: u32,
    table: &DemandTable,
    history_len: usize,
    thresholds: Thresholds,
    ring: u32,
) -> Result<ClientDataset> {
    thresholds.validate()?;
    if history_len == 0 {
        return Err(Error::config("history length must be positive"));
    }
    if table.slot_count < history_len as u64 + 1 {
        return Err(Error::invalid(format!(
            "table spans {} slots, need at least {}",
            table.slot_count,
            history_len + 1
        )));
    }
    let mut cells = BTreeSet::new();
    for c in table.active_cells() {
        cells.extend(disk(c, ring as i32));
    }
    let (qmin, qmax) = cells.iter().fold((i32::MAX, i32::MIN), |(a, b), c| (a.min(c.q), b.max(c.q)));
    let (rmin, rmax) = cells.iter().fold((i32::MAX, i32::MIN), |(a, b), c| (a.min(c.r), b.max(c.r)));
    let scale = |v: i32, lo: i32, hi: i32| if hi > lo { 2.0 * (v - lo) as f64 / (hi - lo) as f64 - 1.0 } else { 0.0 };
    let mut samples = Vec::with_capacity(cells.len() * (table.slot_count as usize - history_len));
    for &cell in &cells {
        let counts: Vec<u32> = (0..table.slot_count).map(|s| table.count(cell, s)).collect();
        let feats = [scale(cell.q, qmin, qmax), scale(cell.r, rmin, rmax)];
        for slot in history_len..counts.len() {
            samples.push(DemandSample {
                cell,
                slot: table.slot(slot as u64),
                cell_features: feats,
                history: counts[slot - history_len..slot].to_vec(),
                label: classify(counts[slot], thresholds)?,
            });
        }
    }
    Ok(ClientDataset::from_samples(client_id, history_len, samples))
}

const SAMPLES_MAGIC: &[u8; 8] = b"CCNETSMP";
const SAMPLES_VERSION: u32 = 1;

/// `samples.bin` layout (little endian): magic `CCNETSMP`, u32 version,
/// u32 client id, u32 history length, f64 interval hours, u64 sample count,
/// then per sample: i32 q, i32 r, u64 slot, f64 x2 cell features, u8 label,
/// history length x u32 counts.
pub fn write_samples<W: Write>(w: W, ds: &ClientDataset) -> Result<()> {
    let mut w = BufWriter::new(w);
    let interval = ds.samples.first().map_or(1.0, |s| s.slot.interval_hours);
    w.write_all(SAMPLES_MAGIC)?;
    w.write_all(&SAMPLES_VERSION.to_le_bytes())?;
    w.write_all(&ds.client_id.to_le_bytes())?;
    w.write_all(&(ds.history_len as u32).to_le_bytes())?;
    w.write_all(&interval.to_le_bytes())?;
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    for s in &ds.samples {
        if s.history.len() != ds.history_len {
            return Err(Error::invalid("sample history length differs from dataset"));
        }
        w.write_all(&s.cell.q.to_le_bytes())?;
        w.write_all(&s.cell.r.to_le_bytes())?;
        w.write_all(&s.slot.index.to_le_bytes())?;
        w.write_all(&s.cell_features[0].to_le_bytes())?;
        w.write_all(&s.cell_features[1].to_le_bytes())?;
        w.write_all(&[s.label.index() as u8])?;
        for c in &s.history {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_samples<R: Read>(r: R) -> Result<ClientDataset> {
    let mut r = BufReader::new(r);
    if &take::<8, _>(&mut r)? != SAMPLES_MAGIC {
        return Err(Error::Format("not a samples file".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != SAMPLES_VERSION {
        return Err(Error::Format(format!("unsupported samples version {version}")));
    }
    let client_id = u32::from_le_bytes(take(&mut r)?);
    let l = u32::from_le_bytes(take(&mut r)?) as usize;
    let interval_hours = f64::from_le_bytes(take(&mut r)?);
    let n = u64::from_le_bytes(take(&mut r)?) as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let q = i32::from_le_bytes(take(&mut r)?);
        let rr = i32::from_le_bytes(take(&mut r)?);
        let index = u64::from_le_bytes(take(&mut r)?);
        let f0 = f64::from_le_bytes(take(&mut r)?);
        let f1 = f64::from_le_bytes(take(&mut r)?);
        let label = DemandClass::from_index(take::<1, _>(&mut r)?[0] as usize)
            .ok_or_else(|| Error::Format("bad label byte".into()))?;
        let history = (0..l).map(|_| take(&mut r).map(u32::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        samples.push(DemandSample {
            cell: HexCellId::new(q, rr),
            slot: TimeSlot { index, interval_hours },
            cell_features: [f0, f1],
            history,
            label,
        });
    }
    Ok(ClientDataset::from_samples(client_id, l, samples))
}

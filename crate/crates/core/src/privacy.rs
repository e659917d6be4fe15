//! Privacy baselines: spatio-temporal Gaussian masking and Laplace location
//! noise on records, and clipped, noised aggregation of model updates.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexgrid::{project, unproject, GeoPoint};
use crate::synthdata::{TrajectoryPoint, TripEvent};
use crate::tensornet::norm;

/// A timestamped location owned by a vehicle.
pub trait Located {
    fn vehicle(&self) -> u64;
    fn time(&self) -> f64;
    fn location(&self) -> GeoPoint;
    fn set(&mut self, time: f64, location: GeoPoint);
}

macro_rules! impl_located {
    ($t:ty) => {
        impl Located for $t {
            fn vehicle(&self) -> u64 {
                self.vehicle_id
            }
            fn time(&self) -> f64 {
                self.time
            }
            fn location(&self) -> GeoPoint {
                self.point
            }
            fn set(&mut self, time: f64, location: GeoPoint) {
                self.time = time;
                self.point = location;
            }
        }
    };
}

impl_located!(TrajectoryPoint);
impl_located!(TripEvent);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    /// Sensitivity in km.
    pub sensitivity: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, sensitivity: f64) -> Result<Self> {
        let b = Self { epsilon, sensitivity };
        b.scale()?;
        Ok(b)
    }

    /// Laplace scale `2 * sqrt(2) * S / epsilon`, in km.
    pub fn scale(&self) -> Result<f64> {
        if !(self.epsilon > 0.0 && self.sensitivity > 0.0) {
            return Err(Error::config(format!(
                "privacy budget needs epsilon > 0 and sensitivity > 0, got {} and {}",
                self.epsilon, self.sensitivity
            )));
        }
        let b = 2.0 * std::f64::consts::SQRT_2 * self.sensitivity / self.epsilon;
        if !b.is_finite() || b <= 0.0 {
            return Err(Error::config(format!("Laplace scale {b} is not usable")));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub clip_norm: f64,
    /// Noise multiplier; the per-coordinate std is `noise_std * clip_norm / N`.
    pub noise_std: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { clip_norm: 1.0, noise_std: 1.0 }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }
}

fn sort_per_vehicle<P: Located>(points: &mut [P]) {
    points.sort_by(|a, b| a.vehicle().cmp(&b.vehicle()).then(a.time().total_cmp(&b.time())));
}

/// Independent Gaussian noise on both planar coordinates (km) and on the
/// timestamp (s); records are then re-sorted by vehicle and time.
pub fn geomask<P: Located + Clone, R: Rng + ?Sized>(
    points: &[P],
    origin: GeoPoint,
    sigma_space_km: f64,
    sigma_time_s: f64,
    rng: &mut R,
) -> Result<Vec<P>> {
    if !(sigma_space_km >= 0.0 && sigma_time_s >= 0.0) {
        return Err(Error::config(format!("geomask sigmas must be >= 0, got {sigma_space_km} and {sigma_time_s}")));
    }
    let space = Normal::new(0.0, sigma_space_km).map_err(|e| Error::config(e.to_string()))?;
    let time = Normal::new(0.0, sigma_time_s).map_err(|e| Error::config(e.to_string()))?;
    let mut out = points.to_vec();
    for p in out.iter_mut() {
        let (x, y) = project(p.location(), origin);
        let (dx, dy, dt) = (space.sample(rng), space.sample(rng), time.sample(rng));
        let loc = if sigma_space_km == 0.0 { p.location() } else { unproject(x + dx, y + dy, origin) };
        p.set(p.time() + dt, loc);
    }
    if sigma_time_s > 0.0 {
        sort_per_vehicle(&mut out);
    }
    Ok(out)
}

/// Planar diagonal of the records' bounding box, in km.
pub fn sensitivity<P: Located>(points: &[P], origin: GeoPoint) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("sensitivity needs at least two points"));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        let (x, y) = project(p.location(), origin);
        lo = [lo[0].min(x), lo[1].min(y)];
        hi = [hi[0].max(x), hi[1].max(y)];
    }
    Ok((hi[0] - lo[0]).hypot(hi[1] - lo[1]))
}

/// One Laplace(0, b) draw by inverting the CDF.
pub fn laplace<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

/// Laplace noise with the budget's scale on both planar coordinates.
/// Timestamps and order are untouched.
pub fn cnoise<P: Located + Clone, R: Rng + ?Sized>(
    points: &[P],
    origin: GeoPoint,
    budget: &PrivacyBudget,
    rng: &mut R,
) -> Result<Vec<P>> {
    let b = budget.scale()?;
    let mut out = points.to_vec();
    for p in out.iter_mut() {
        let (x, y) = project(p.location(), origin);
        let (dx, dy) = (laplace(b, rng), laplace(b, rng));
        p.set(p.time(), unproject(x + dx, y + dy, origin));
    }
    Ok(out)
}

/// Scale `v` down to norm `c` if it is longer.
pub fn clip(v: &[f64], c: f64) -> Vec<f64> {
    let n = norm(v);
    if n > c {
        let k = c / n;
        v.iter().map(|x| x * k).collect()
    } else {
        v.to_vec()
    }
}

/// `global + mean(clip(update_i)) + N(0, (sigma * C / N)^2)` per coordinate.
pub fn dp_perturb<R: Rng + ?Sized>(
    global: &[f64],
    cfg: &DpConfig,
    updates: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if updates.is_empty() {
        return Err(Error::invalid("no client updates"));
    }
    if updates.iter().any(|u| u.len() != global.len()) {
        return Err(Error::invalid("update length differs from the model"));
    }
    let n = updates.len() as f64;
    let mut out = global.to_vec();
    for u in updates {
        for (o, x) in out.iter_mut().zip(clip(u, cfg.clip_norm)) {
            *o += x / n;
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std * cfg.clip_norm / n).map_err(|e| Error::config(e.to_string()))?;
        for o in out.iter_mut() {
            *o += noise.sample(rng);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    const ORIGIN: GeoPoint = GeoPoint { lat: 35.68, lon: 139.76 };

    fn grid_points(n: usize) -> Vec<TrajectoryPoint> {
        (0..n)
            .map(|i| TrajectoryPoint {
                vehicle_id: (i % 7) as u64,
                time: (i / 7) as f64 * 5.0,
                point: unproject((i % 13) as f64 * 0.3 - 1.5, (i % 11) as f64 * 0.2 - 1.0, ORIGIN),
            })
            .collect()
    }

    #[test]
    fn laplace_scale_formula() {
        let b = PrivacyBudget::new(1.0, 1.0).unwrap().scale().unwrap();
        assert!((b - 2.8284).abs() < 1e-4);
        assert!(PrivacyBudget::new(0.0, 1.0).is_err());
        assert!(PrivacyBudget::new(1.0, -1.0).is_err());
    }

    #[test]
    fn laplace_mean_absolute_deviation() {
        let b = 1.7;
        let mut rng = stream(3, "lap", 0);
        let n = 100_000;
        let mad: f64 = (0..n).map(|_| laplace(b, &mut rng).abs()).sum::<f64>() / n as f64;
        assert!((mad / b - 1.0).abs() < 0.03, "{mad}");
    }

    #[test]
    fn cnoise_displacement_matches_scale() {
        let pts = grid_points(50_000);
        let budget = PrivacyBudget::new(2.0, 0.5).unwrap();
        let out = cnoise(&pts, ORIGIN, &budget, &mut stream(1, "cn", 0)).unwrap();
        let mut s = 0.0;
        for (a, b) in pts.iter().zip(&out) {
            let (x0, y0) = project(a.point, ORIGIN);
            let (x1, y1) = project(b.point, ORIGIN);
            s += (x1 - x0).abs() + (y1 - y0).abs();
        }
        let mad = s / (2.0 * pts.len() as f64);
        assert!((mad / budget.scale().unwrap() - 1.0).abs() < 0.03);
    }

    #[test]
    fn cnoise_vanishes_for_huge_budget() {
        let pts = grid_points(200);
        let out = cnoise(&pts, ORIGIN, &PrivacyBudget::new(1e9, 1.0).unwrap(), &mut stream(1, "cn", 0)).unwrap();
        for (a, b) in pts.iter().zip(&out) {
            let (x0, y0) = project(a.point, ORIGIN);
            let (x1, y1) = project(b.point, ORIGIN);
            assert!((x1 - x0).hypot(y1 - y0) < 1e-4);
            assert_eq!(a.time, b.time);
        }
    }

    #[test]
    fn geomask_identity_at_zero() {
        let pts = grid_points(100);
        let out = geomask(&pts, ORIGIN, 0.0, 0.0, &mut stream(0, "g", 0)).unwrap();
        assert_eq!(out, pts);
    }

    #[test]
    fn geomask_displacement_std() {
        let pts = grid_points(100_000);
        let out = geomask(&pts, ORIGIN, 0.2, 0.0, &mut stream(9, "g", 0)).unwrap();
        let mut sq = 0.0;
        for (a, b) in pts.iter().zip(&out) {
            let (x0, y0) = project(a.point, ORIGIN);
            let (x1, y1) = project(b.point, ORIGIN);
            sq += (x1 - x0).powi(2) + (y1 - y0).powi(2);
        }
        let std = (sq / (2.0 * pts.len() as f64)).sqrt();
        assert!((std / 0.2 - 1.0).abs() < 0.02, "{std}");
    }

    #[test]
    fn geomask_keeps_time_order_and_count() {
        let pts = grid_points(2_000);
        let out = geomask(&pts, ORIGIN, 0.2, 60.0, &mut stream(2, "g", 0)).unwrap();
        assert_eq!(out.len(), pts.len());
        for w in out.windows(2) {
            if w[0].vehicle_id == w[1].vehicle_id {
                assert!(w[0].time <= w[1].time);
            }
        }
        assert!(geomask(&pts, ORIGIN, -1.0, 0.0, &mut stream(2, "g", 0)).is_err());
    }

    #[test]
    fn sensitivity_cases() {
        let a = TrajectoryPoint { vehicle_id: 0, time: 0.0, point: unproject(0.0, 0.0, ORIGIN) };
        let b = TrajectoryPoint { vehicle_id: 0, time: 1.0, point: unproject(3.0, 0.0, ORIGIN) };
        assert!((sensitivity(&[a, b], ORIGIN).unwrap() - 3.0).abs() < 1e-6);
        assert!((sensitivity(&[a, b, a, b], ORIGIN).unwrap() - 3.0).abs() < 1e-6);
        let inner = TrajectoryPoint { point: unproject(1.0, 0.0, ORIGIN), ..a };
        assert!(sensitivity(&[a, b, inner], ORIGIN).unwrap() <= 3.0 + 1e-9);
        assert!(sensitivity(&[a], ORIGIN).is_err());
    }

    #[test]
    fn dp_clip_and_average() {
        let cfg = DpConfig { clip_norm: 1.0, noise_std: 0.0 };
        let g = vec![1.0, 1.0];
        let ups = vec![vec![0.2, 0.0], vec![0.0, 0.4]];
        let out = dp_perturb(&g, &cfg, &ups, &mut stream(0, "d", 0)).unwrap();
        assert_eq!(out, vec![1.1, 1.2]);
        let c = clip(&[6.0, 8.0], 5.0);
        assert!((norm(&c) - 5.0).abs() < 1e-12);
        assert_eq!(clip(&[0.3, 0.4], 0.5), vec![0.3, 0.4]);
        let u = vec![0.3, -0.1, 0.2];
        let out = dp_perturb(&[0.0; 3], &cfg, &[u.clone(), u.clone(), u.clone()], &mut stream(0, "d", 0)).unwrap();
        assert!(out.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(dp_perturb(&g, &DpConfig { clip_norm: 0.0, noise_std: 0.0 }, &ups, &mut stream(0, "d", 0)).is_err());
    }

    #[test]
    fn dp_noise_std() {
        let cfg = DpConfig { clip_norm: 2.0, noise_std: 1.5 };
        let out = dp_perturb(&vec![0.0; 40_000], &cfg, &vec![vec![0.0; 40_000]; 4], &mut stream(4, "d", 0)).unwrap();
        let std = (out.iter().map(|x| x * x).sum::<f64>() / out.len() as f64).sqrt();
        assert!((std / 0.75 - 1.0).abs() < 0.02);
    }
}

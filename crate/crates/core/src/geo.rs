//! Great-circle distances and tower spacing statistics.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::ingest::{CellId, GeoPoint, TowerSet};

/// Mean Earth radius (IUGG), in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Default nearest-neighbour band edges, km.
pub const DEFAULT_BANDS_KM: [f64; 4] = [0.25, 0.5, 5.0, 10.0];

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("need at least 2 towers, got {0}")]
    TooFewTowers(usize),
    #[error("band edges must be positive and strictly increasing")]
    BadBands,
    #[error("isolation radius must be positive and finite, got {0}")]
    BadRadius(f64),
}

/// Haversine distance in km on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn great_circle_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat().to_radians(), b.lat().to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon() - a.lon()).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Point reached by travelling `distance_km` from `origin` along the initial
/// bearing `bearing_deg` (clockwise from north).
pub fn destination_point(origin: GeoPoint, bearing_deg: f64, distance_km: f64) -> GeoPoint {
    let delta = distance_km / EARTH_RADIUS_KM;
    let theta = bearing_deg.to_radians();
    let lat1 = origin.lat().to_radians();
    let lon1 = origin.lon().to_radians();
    let lat2 = (lat1.sin() * delta.cos() + lat1.cos() * delta.sin() * theta.cos()).asin();
    let lon2 =
        lon1 + (theta.sin() * delta.sin() * lat1.cos()).atan2(delta.cos() - lat1.sin() * lat2.sin());
    let lon2 = (lon2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    GeoPoint::new(lat2.to_degrees().clamp(-90.0, 90.0), lon2).expect("normalised coordinates")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IsolationRadius(f64);

impl IsolationRadius {
    pub fn new(radius_km: f64) -> Result<Self, GeoError> {
        if radius_km.is_finite() && radius_km > 0.0 {
            Ok(IsolationRadius(radius_km))
        } else {
            Err(GeoError::BadRadius(radius_km))
        }
    }

    pub fn km(self) -> f64 {
        self.0
    }
}

impl Default for IsolationRadius {
    fn default() -> Self {
        IsolationRadius(15.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandFraction {
    /// Upper band edge in km; `inf` for the closing band.
    pub upper_km: f64,
    pub cum_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerNNStats {
    /// Distance to the nearest other tower, indexed by [`CellId`].
    pub nn_km: Vec<f64>,
    /// Fraction of towers whose nearest neighbour is at or below each edge.
    /// A closing `inf` band is always appended, so the last fraction is 1.
    pub band_cdf: Vec<BandFraction>,
}

impl TowerNNStats {
    pub fn nn_csv(&self, towers: &TowerSet) -> String {
        let mut out = String::from("cell_id,nn_km\n");
        for (id, tower) in towers.iter() {
            out.push_str(&format!("{},{}\n", tower.cell_id, self.nn_km[id.index()]));
        }
        out
    }

    pub fn cdf_csv(&self) -> String {
        let mut out = String::from("band_km,cum_fraction\n");
        for band in &self.band_cdf {
            out.push_str(&format!("{},{}\n", band.upper_km, band.cum_fraction));
        }
        out
    }
}

/// Exact nearest-neighbour distance for every tower.
///
/// Towers are swept in latitude order; the meridian arc `R * |dlat|` never
/// exceeds the great-circle distance, so the scan in each direction stops once
/// it passes the best distance found so far.
pub fn nearest_neighbor_distances(towers: &TowerSet) -> Result<Vec<f64>, GeoError> {
    let n = towers.len();
    if n < 2 {
        return Err(GeoError::TooFewTowers(n));
    }
    let points: Vec<GeoPoint> = towers.ids().map(|id| towers.location(id)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].lat().total_cmp(&points[b].lat()).then(a.cmp(&b)));
    let lat_rad: Vec<f64> = order.iter().map(|&i| points[i].lat().to_radians()).collect();

    let mut nn = vec![f64::INFINITY; n];
    for pos in 0..n {
        let here = points[order[pos]];
        let mut best = f64::INFINITY;
        let beyond = |lat: f64, best: f64| {
            EARTH_RADIUS_KM * (lat - lat_rad[pos]).abs() > best * (1.0 + 1e-12) + 1e-12
        };
        for other in pos + 1..n {
            if beyond(lat_rad[other], best) {
                break;
            }
            best = best.min(great_circle_distance(here, points[order[other]]));
        }
        for other in (0..pos).rev() {
            if beyond(lat_rad[other], best) {
                break;
            }
            best = best.min(great_circle_distance(here, points[order[other]]));
        }
        nn[order[pos]] = best;
    }
    Ok(nn)
}

pub fn nearest_neighbor_stats(towers: &TowerSet, bands_km: &[f64]) -> Result<TowerNNStats, GeoError> {
    let valid = bands_km.iter().all(|b| b.is_finite() && *b > 0.0)
        && bands_km.windows(2).all(|w| w[0] < w[1]);
    if !valid {
        return Err(GeoError::BadBands);
    }
    let nn_km = nearest_neighbor_distances(towers)?;
    let mut sorted = nn_km.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut band_cdf: Vec<BandFraction> = bands_km
        .iter()
        .map(|&edge| BandFraction {
            upper_km: edge,
            cum_fraction: sorted.partition_point(|d| *d <= edge) as f64 / n as f64,
        })
        .collect();
    band_cdf.push(BandFraction {
        upper_km: f64::INFINITY,
        cum_fraction: 1.0,
    });
    Ok(TowerNNStats { nn_km, band_cdf })
}

/// Towers with no other tower within `radius` (nearest neighbour strictly
/// farther than the radius).
pub fn isolated_towers(towers: &TowerSet, radius: IsolationRadius) -> Result<BTreeSet<CellId>, GeoError> {
    let nn = nearest_neighbor_distances(towers)?;
    Ok(isolated_from_nn(&nn, radius))
}

pub fn isolated_from_nn(nn_km: &[f64], radius: IsolationRadius) -> BTreeSet<CellId> {
    nn_km
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > radius.km())
        .map(|(i, _)| CellId(i as u32))
        .collect()
}

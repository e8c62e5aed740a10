//! Seeded synthetic cohorts with full ground truth.
//!
//! Towers sit on a jittered grid, with satellite towers planted at chosen
//! nearest-neighbour distances and a few isolated outliers far from the
//! grid. Every agent has a home and a work tower at a distance drawn from
//! the configured group mixture. While at an anchor an agent emits one
//! record every `emission_interval_s` seconds on a per-day phase grid; in
//! transit it is silent unless transit emission is enabled.

use std::fmt::Write as _;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::commute::{summarize_user, CommuteObservation, CommuteWindows, Direction, UserCommuteSummary};
use crate::geo::{destination_point, great_circle_distance, EARTH_RADIUS_KM};
use crate::ingest::{
    days_since_epoch, parse_towers, CellId, GeoPoint, IngestError, Timestamp, TowerSet, TrafficRecord, UserId,
    SECONDS_PER_DAY,
};
use crate::stats::{compute_cohort_stats, CohortStats, DistanceGroup, StatsError, StatsOptions};
use crate::trajectory::TimeWindow;

pub const SYNTH_MANIFEST_FILE: &str = "synth_manifest.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("group {0} is unrealizable on this layout: no tower pair at the required distance")]
    Unrealizable(&'static str),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

fn bad(msg: impl Into<String>) -> SynthError {
    SynthError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_agents: usize,
    pub n_days: usize,
    pub weekday_only: bool,
    pub start_date: NaiveDate,
    pub emission_interval_s: u32,
    pub transit_emission: bool,
    /// Extra agents, beyond `n_agents`, whose home is an isolated tower.
    pub isolated_anchor_agents: usize,
    /// Shares of the five distance groups, shortest first.
    pub group_mixture: [f64; 5],
    pub layout: LayoutConfig,
    pub schedule: ScheduleModel,
    pub duration: PerDirectionModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_agents: 200,
            n_days: 5,
            weekday_only: true,
            start_date: NaiveDate::from_ymd_opt(2012, 3, 5).expect("valid date"),
            emission_interval_s: 60,
            transit_emission: false,
            isolated_anchor_agents: 0,
            group_mixture: [0.565, 0.235, 0.14, 0.03, 0.03],
            layout: LayoutConfig::default(),
            schedule: ScheduleModel::default(),
            duration: PerDirectionModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub spacing_km: f64,
    pub jitter_km: f64,
    /// Upper end of the open-ended longest distance group.
    pub max_commute_km: f64,
    pub isolated_towers: usize,
    /// Gap between the grid edge and the ring of isolated towers.
    pub isolated_offset_km: f64,
    /// Planted nearest-neighbour bands: `fraction` of all towers end up with
    /// their nearest neighbour inside `(previous upper_km, upper_km]`.
    pub close_bands: Vec<CloseBand>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            origin_lat: 30.0,
            origin_lon: 120.0,
            grid_cols: 30,
            grid_rows: 30,
            spacing_km: 2.0,
            jitter_km: 0.2,
            max_commute_km: 40.0,
            isolated_towers: 4,
            isolated_offset_km: 30.0,
            close_bands: vec![
                CloseBand {
                    upper_km: 0.25,
                    fraction: 0.30,
                },
                CloseBand {
                    upper_km: 0.5,
                    fraction: 0.20,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloseBand {
    pub upper_km: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleModel {
    /// Mean departure clock times, `HH:MM`.
    pub morning_depart: String,
    pub night_depart: String,
    pub depart_sd_min: f64,
    pub windows: CommuteWindows,
}

impl Default for ScheduleModel {
    fn default() -> Self {
        ScheduleModel {
            morning_depart: "07:30".into(),
            night_depart: "18:00".into(),
            depart_sd_min: 20.0,
            windows: CommuteWindows::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerDirectionModel {
    pub morning: DurationModel,
    pub night: DurationModel,
}

impl Default for PerDirectionModel {
    fn default() -> Self {
        let piecewise = |constant_h| DurationModel::Piecewise {
            slope_h_per_km: 0.05,
            intercept_h: Some(0.0),
            target_mean_h: None,
            threshold_km: 18.0,
            constant_h,
            sigma_h: 0.05,
        };
        PerDirectionModel {
            morning: piecewise(0.80),
            night: piecewise(0.84),
        }
    }
}

impl PerDirectionModel {
    fn get(&self, d: Direction) -> &DurationModel {
        match d {
            Direction::Morning => &self.morning,
            Direction::Night => &self.night,
        }
    }
}

/// Door-to-door duration plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DurationModel {
    /// `intercept + slope * d` below the threshold, `constant_h` at or above
    /// it, plus per-day Gaussian noise. Instead of an intercept a target
    /// cohort mean may be given; the intercept is then solved for.
    Piecewise {
        slope_h_per_km: f64,
        #[serde(default)]
        intercept_h: Option<f64>,
        #[serde(default)]
        target_mean_h: Option<f64>,
        #[serde(default = "default_threshold")]
        threshold_km: f64,
        constant_h: f64,
        #[serde(default)]
        sigma_h: f64,
    },
    /// Per distance group, agents are split across duration bands by weight
    /// and draw their typical duration uniformly inside their band.
    Banded {
        groups: Vec<Vec<DurationBand>>,
        #[serde(default)]
        sigma_h: f64,
    },
}

fn default_threshold() -> f64 {
    18.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationBand {
    pub lo_h: f64,
    pub hi_h: f64,
    pub weight: f64,
}

fn parse_clock(s: &str) -> Option<u32> {
    let (h, m) = s.split_once(':')?;
    let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
    (h < 24 && m < 60 && s.len() == 5).then_some(h * 3600 + m * 60)
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth config serialises")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.emission_interval_s == 0 || self.emission_interval_s as i64 >= SECONDS_PER_DAY {
            return Err(bad("emission_interval_s must be positive and below one day"));
        }
        if self.n_days == 0 {
            return Err(bad("n_days must be positive"));
        }
        let sum: f64 = self.group_mixture.iter().sum();
        if self.group_mixture.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(bad("group_mixture must be non-negative and sum to 1"));
        }
        let l = &self.layout;
        if l.grid_cols < 2 || l.grid_rows < 2 {
            return Err(bad("grid needs at least 2x2 towers"));
        }
        if !(l.spacing_km > 0.0 && l.jitter_km >= 0.0 && l.isolated_offset_km > 0.0) {
            return Err(bad("spacing, jitter and isolated offset must be positive"));
        }
        let mut prev = 0.0;
        for b in &l.close_bands {
            if !(b.upper_km > prev && b.fraction > 0.0) {
                return Err(bad("close bands must have increasing upper_km and positive fractions"));
            }
            prev = b.upper_km;
        }
        let total_fraction: f64 = l.close_bands.iter().map(|b| b.fraction).sum();
        if total_fraction >= 1.0 {
            return Err(bad("close band fractions must sum below 1"));
        }
        if l.spacing_km - 2.0 * l.jitter_km <= 3.0 * prev {
            return Err(bad("spacing - 2 * jitter must exceed three times the widest close band"));
        }
        if l.isolated_towers > 0 && l.isolated_offset_km <= 15.0 {
            return Err(bad("isolated_offset_km must exceed the 15 km isolation radius"));
        }
        if self.isolated_anchor_agents > 0 && l.isolated_towers == 0 {
            return Err(bad("isolated_anchor_agents needs isolated_towers > 0"));
        }
        if parse_clock(&self.schedule.morning_depart).is_none() || parse_clock(&self.schedule.night_depart).is_none() {
            return Err(bad("departure clocks must be HH:MM"));
        }
        if !(self.schedule.depart_sd_min >= 0.0) {
            return Err(bad("depart_sd_min must be non-negative"));
        }
        self.schedule.windows.validate().map_err(|e| bad(e.to_string()))?;
        for d in Direction::BOTH {
            let w = self.schedule.windows.get(d);
            if w.wraps_midnight() || w.duration_s() <= 4 * self.emission_interval_s + 60 {
                return Err(bad(format!("{d} window too short for the emission interval")));
            }
            match self.duration.get(d) {
                DurationModel::Piecewise {
                    slope_h_per_km,
                    intercept_h,
                    target_mean_h,
                    threshold_km,
                    constant_h,
                    sigma_h,
                } => {
                    if intercept_h.is_some() == target_mean_h.is_some() {
                        return Err(bad("give exactly one of intercept_h and target_mean_h"));
                    }
                    let finite = [*slope_h_per_km, *threshold_km, *constant_h, *sigma_h]
                        .into_iter()
                        .chain(*intercept_h)
                        .chain(*target_mean_h)
                        .all(f64::is_finite);
                    if !finite || *sigma_h < 0.0 || *constant_h <= 0.0 {
                        return Err(bad("piecewise model needs finite values, sigma >= 0, constant > 0"));
                    }
                }
                DurationModel::Banded { groups, sigma_h } => {
                    if groups.len() != DistanceGroup::ALL.len() || !(*sigma_h >= 0.0) {
                        return Err(bad("banded model needs one band list per distance group"));
                    }
                    for bands in groups {
                        let ok = !bands.is_empty()
                            && bands.iter().all(|b| b.lo_h > 0.0 && b.hi_h >= b.lo_h && b.weight > 0.0);
                        if !ok {
                            return Err(bad("duration bands need 0 < lo_h <= hi_h and positive weights"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Dates carrying records.
    pub fn dates(&self) -> Vec<NaiveDate> {
        self.start_date
            .iter_days()
            .filter(|d| !self.weekday_only || !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
            .take(self.n_days)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Trip {
    pub depart_s: u32,
    pub arrive_s: u32,
}

impl Trip {
    pub fn duration_s(&self) -> u32 {
        self.arrive_s - self.depart_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DayTruth {
    pub date: NaiveDate,
    /// Offset of the emission grid from midnight.
    pub phase_s: u32,
    pub morning: Trip,
    pub night: Trip,
}

impl DayTruth {
    pub fn trip(&self, d: Direction) -> Trip {
        match d {
            Direction::Morning => self.morning,
            Direction::Night => self.night,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentTruth {
    pub user_id: String,
    pub home: CellId,
    pub work: CellId,
    pub distance_km: f64,
    pub group: DistanceGroup,
    pub isolated_anchor: bool,
    pub days: Vec<DayTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub emission_interval_s: u32,
    pub agents: Vec<AgentTruth>,
}

impl GroundTruth {
    /// True trips as observations, with `UserId` equal to the agent index.
    pub fn observations(&self, agent: usize) -> Vec<CommuteObservation> {
        let a = &self.agents[agent];
        a.days
            .iter()
            .flat_map(|day| {
                Direction::BOTH.map(|d| {
                    let t = day.trip(d);
                    CommuteObservation {
                        user: UserId(agent as u32),
                        date: day.date,
                        direction: d,
                        depart: Timestamp::from_date_seconds(day.date, t.depart_s),
                        arrive: Timestamp::from_date_seconds(day.date, t.arrive_s),
                        distance_km: a.distance_km,
                    }
                })
            })
            .collect()
    }

    /// One row per agent, day and direction.
    pub fn to_csv(&self, towers: &TowerSet) -> String {
        let mut out = String::from(
            "user_id,home_cell,work_cell,distance_km,group,isolated_anchor,date,direction,depart,arrive,duration_s\n",
        );
        for a in &self.agents {
            for day in &a.days {
                for d in Direction::BOTH {
                    let t = day.trip(d);
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{d},{},{},{}",
                        a.user_id,
                        towers.name(a.home),
                        towers.name(a.work),
                        a.distance_km,
                        a.group.label(),
                        a.isolated_anchor,
                        day.date,
                        Timestamp::from_date_seconds(day.date, t.depart_s),
                        Timestamp::from_date_seconds(day.date, t.arrive_s),
                        t.duration_s()
                    );
                }
            }
        }
        out
    }
}

/// Reference statistics computed straight from the planted trips of the
/// regular (non-isolated) agents.
pub fn true_metrics(gt: &GroundTruth, opts: &StatsOptions) -> Result<CohortStats, StatsError> {
    let mut summaries: Vec<UserCommuteSummary> = Vec::new();
    let mut observations = Vec::new();
    for (i, a) in gt.agents.iter().enumerate().filter(|(_, a)| !a.isolated_anchor) {
        let obs = gt.observations(i);
        summaries.push(summarize_user(&obs, a.distance_km));
        observations.extend(obs);
    }
    compute_cohort_stats(&summaries, &observations, opts)
}

/// A generated cohort held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub config: SynthConfig,
    pub towers: TowerSet,
    pub truth: GroundTruth,
    tower_csv: String,
    /// Tower indices (into `towers`) used while emitting transit records.
    transit_index: Vec<(GeoPoint, CellId)>,
}

fn round7(x: f64) -> f64 {
    (x * 1e7).round() / 1e7
}

fn offset_point(origin: GeoPoint, east_km: f64, north_km: f64) -> GeoPoint {
    let lat = origin.lat() + (north_km / EARTH_RADIUS_KM).to_degrees();
    let lon = origin.lon() + (east_km / (EARTH_RADIUS_KM * lat.to_radians().cos())).to_degrees();
    GeoPoint::new(lat, lon).expect("layout stays within coordinate range")
}

fn layout_towers(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<GeoPoint>, usize), SynthError> {
    let l = &cfg.layout;
    let origin = GeoPoint::new(l.origin_lat, l.origin_lon).map_err(|e| bad(e.to_string()))?;
    let half_w = (l.grid_cols - 1) as f64 * l.spacing_km / 2.0;
    let half_h = (l.grid_rows - 1) as f64 * l.spacing_km / 2.0;
    let mut points = Vec::new();
    for r in 0..l.grid_rows {
        for c in 0..l.grid_cols {
            let (dx, dy) = if l.jitter_km > 0.0 {
                // Uniform in a disc of radius jitter.
                let rho = l.jitter_km * rng.random::<f64>().sqrt();
                let phi = rng.random::<f64>() * std::f64::consts::TAU;
                (rho * phi.cos(), rho * phi.sin())
            } else {
                (0.0, 0.0)
            };
            let x = c as f64 * l.spacing_km - half_w + dx;
            let y = r as f64 * l.spacing_km - half_h + dy;
            points.push(offset_point(origin, x, y));
        }
    }
    let grid = points.len();

    let ring = half_w.hypot(half_h) + l.isolated_offset_km;
    let mut isolated = Vec::with_capacity(l.isolated_towers);
    for k in 0..l.isolated_towers {
        let bearing = 360.0 * k as f64 / l.isolated_towers as f64;
        isolated.push(destination_point(origin, bearing, ring));
    }
    if l.isolated_towers > 1 {
        let chord = 2.0 * ring * (std::f64::consts::PI / l.isolated_towers as f64).sin();
        if chord <= l.isolated_offset_km {
            return Err(bad("too many isolated towers for the ring; increase isolated_offset_km"));
        }
    }

    // Each satellite gives itself and its host a nearest neighbour at the
    // band midpoint, so S satellites put 2S towers into their bands.
    let fraction: f64 = l.close_bands.iter().map(|b| b.fraction).sum();
    let base = (grid + isolated.len()) as f64;
    let total = (2.0 * base / (2.0 - fraction)).round();
    let counts: Vec<usize> = l.close_bands.iter().map(|b| (b.fraction * total / 2.0).round() as usize).collect();
    let n_sat: usize = counts.iter().sum();
    if n_sat > grid {
        return Err(bad("close band fractions need more host towers than the grid has"));
    }
    let mut hosts: Vec<usize> = (0..grid).collect();
    hosts.shuffle(rng);
    let mut next = hosts.into_iter();
    let mut lower = 0.0;
    for (band, &count) in l.close_bands.iter().zip(&counts) {
        let mid = (lower + band.upper_km) / 2.0;
        for _ in 0..count {
            let host = next.next().expect("enough hosts");
            let bearing = rng.random::<f64>() * 360.0;
            points.push(destination_point(points[host], bearing, mid));
        }
        lower = band.upper_km;
    }
    let regular = points.len();
    points.extend(isolated);
    let points = points
        .into_iter()
        .map(|p| GeoPoint::new(round7(p.lat()), round7(p.lon())).expect("rounded coordinates stay valid"))
        .collect();
    Ok((points, regular))
}

fn tower_name(i: usize) -> String {
    format!("T{:05}", i + 1)
}

fn user_name(i: usize) -> String {
    format!("u{:06}", i + 1)
}

fn group_range(group: DistanceGroup, max_km: f64) -> (f64, f64) {
    let (lo, hi) = group.bounds_km();
    (lo, hi.min(max_km))
}

/// Stratified assignment of `n` items to weighted classes: item `i` takes
/// the class whose cumulative weight interval holds `(i + 0.5) / n`.
fn stratified(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cum.push(acc);
    }
    (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            cum.iter().position(|&c| u < c).unwrap_or(weights.len() - 1)
        })
        .collect()
}

fn sample_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(mean, sd).expect("valid normal").sample(rng)
    } else {
        mean
    }
}

struct AgentPlan {
    home: usize,
    work: usize,
    distance_km: f64,
    group: DistanceGroup,
    isolated: bool,
    /// Band index per direction, banded model only.
    band: [usize; 2],
}

impl SyntheticCohort {
    pub fn generate(config: &SynthConfig) -> Result<Self, SynthError> {
        config.validate()?;
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let (points, regular) = layout_towers(config, &mut master)?;
        let mut tower_csv = String::from("cell_id,lat,lon\n");
        for (i, p) in points.iter().enumerate() {
            let _ = writeln!(tower_csv, "{},{:.7},{:.7}", tower_name(i), p.lat(), p.lon());
        }
        let towers = parse_towers(tower_csv.as_bytes())?;
        // Names are zero-padded in generation order, so index i is CellId(i).
        let points: Vec<GeoPoint> = (0..points.len()).map(|i| towers.location(CellId(i as u32))).collect();

        let max_km = config.layout.max_commute_km;
        let points = &points;
        let candidates = move |home: usize, g: DistanceGroup| {
            let (lo, hi) = group_range(g, max_km);
            (0..regular).filter(move |&j| {
                let d = great_circle_distance(points[home], points[j]);
                j != home && d > lo + 1e-6 && d < hi - 1e-6
            })
        };
        let eligible: Vec<Vec<usize>> = DistanceGroup::ALL
            .iter()
            .map(|&g| (0..regular).filter(|&h| candidates(h, g).next().is_some()).collect())
            .collect();

        let groups = stratified(config.n_agents, &config.group_mixture);
        let mut groups: Vec<DistanceGroup> = groups.into_iter().map(|g| DistanceGroup::ALL[g]).collect();
        groups.shuffle(&mut master);
        for &g in &groups {
            if eligible[g.index()].is_empty() {
                return Err(SynthError::Unrealizable(g.label()));
            }
        }

        let n_total = config.n_agents + config.isolated_anchor_agents;
        let mut plans: Vec<AgentPlan> = (0..n_total)
            .into_par_iter()
            .map(|i| {
                let mut rng = agent_rng(config.seed, i);
                if i < config.n_agents {
                    let g = groups[i];
                    let homes = &eligible[g.index()];
                    let home = homes[rng.random_range(0..homes.len())];
                    let cands: Vec<usize> = candidates(home, g).collect();
                    let work = cands[rng.random_range(0..cands.len())];
                    let distance_km = great_circle_distance(points[home], points[work]);
                    AgentPlan {
                        home,
                        work,
                        distance_km,
                        group: g,
                        isolated: false,
                        band: [0, 0],
                    }
                } else {
                    let home = regular + (i - config.n_agents) % (points.len() - regular);
                    let work = rng.random_range(0..regular);
                    let distance_km = great_circle_distance(points[home], points[work]);
                    let group = crate::stats::classify_distance_group(distance_km).expect("finite distance");
                    AgentPlan {
                        home,
                        work,
                        distance_km,
                        group,
                        isolated: true,
                        band: [0, 0],
                    }
                }
            })
            .collect();

        // Banded plants: stratify band membership within each group.
        for (slot, d) in Direction::BOTH.into_iter().enumerate() {
            if let DurationModel::Banded { groups: bands, .. } = config.duration.get(d) {
                for g in DistanceGroup::ALL {
                    let members: Vec<usize> =
                        (0..plans.len()).filter(|&i| plans[i].group == g && !plans[i].isolated).collect();
                    let weights: Vec<f64> = bands[g.index()].iter().map(|b| b.weight).collect();
                    for (k, band) in stratified(members.len(), &weights).into_iter().enumerate() {
                        plans[members[k]].band[slot] = band;
                    }
                }
            }
        }

        let base = PerDirectionBase::new(config, &plans)?;
        let dates = config.dates();
        let agents: Vec<AgentTruth> = plans
            .par_iter()
            .enumerate()
            .map(|(i, plan)| {
                let mut rng = agent_rng(config.seed, i);
                // Skip the draws used for anchor selection.
                rng.set_word_pos(1 << 20);
                let typical = Direction::BOTH.map(|d| base.typical_h(config, d, plan, &mut rng));
                let days = dates
                    .iter()
                    .map(|&date| {
                        let phase_s = rng.random_range(0..config.emission_interval_s);
                        let [morning, night] =
                            [0, 1].map(|k| plan_trip(config, Direction::BOTH[k], typical[k], &base, &mut rng));
                        DayTruth {
                            date,
                            phase_s,
                            morning,
                            night,
                        }
                    })
                    .collect();
                AgentTruth {
                    user_id: user_name(i),
                    home: CellId(plan.home as u32),
                    work: CellId(plan.work as u32),
                    distance_km: plan.distance_km,
                    group: plan.group,
                    isolated_anchor: plan.isolated,
                    days,
                }
            })
            .collect();

        let transit_index = points[..regular].iter().enumerate().map(|(i, p)| (*p, CellId(i as u32))).collect();
        Ok(SyntheticCohort {
            config: config.clone(),
            towers,
            truth: GroundTruth {
                emission_interval_s: config.emission_interval_s,
                agents,
            },
            tower_csv,
            transit_index,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.truth.agents.len()
    }

    /// Records of one agent, sorted by time, with `UserId` equal to the
    /// agent index.
    pub fn agent_records(&self, agent: usize) -> Vec<TrafficRecord> {
        let a = &self.truth.agents[agent];
        let step = self.config.emission_interval_s;
        let user = UserId(agent as u32);
        let mut out = Vec::with_capacity(a.days.len() * (SECONDS_PER_DAY as usize / step as usize + 1));
        for day in &a.days {
            let midnight = days_since_epoch(day.date) as i64 * SECONDS_PER_DAY;
            let mut t = day.phase_s;
            while (t as i64) < SECONDS_PER_DAY {
                let cell = self.cell_at(a, day, t);
                if let Some(cell) = cell {
                    let start = midnight + t as i64;
                    out.push(TrafficRecord {
                        user,
                        cell,
                        start: Timestamp::from_epoch_seconds(start),
                        end: Some(Timestamp::from_epoch_seconds(start + (step / 2) as i64)),
                    });
                }
                t += step;
            }
        }
        out
    }

    fn cell_at(&self, a: &AgentTruth, day: &DayTruth, t: u32) -> Option<CellId> {
        let (m, n) = (day.morning, day.night);
        if t <= m.depart_s || t >= n.arrive_s {
            return Some(a.home);
        }
        if t >= m.arrive_s && t <= n.depart_s {
            return Some(a.work);
        }
        if !self.config.transit_emission {
            return None;
        }
        let (from, to, trip) = if t < m.arrive_s { (a.home, a.work, m) } else { (a.work, a.home, n) };
        let f = (t - trip.depart_s) as f64 / trip.duration_s() as f64;
        let (p, q) = (self.towers.location(from), self.towers.location(to));
        let here = GeoPoint::new(p.lat() + f * (q.lat() - p.lat()), p.lon() + f * (q.lon() - p.lon())).ok()?;
        self.transit_index
            .iter()
            .min_by(|x, y| great_circle_distance(here, x.0).total_cmp(&great_circle_distance(here, y.0)))
            .map(|x| x.1)
    }

    pub fn towers_csv(&self) -> &str {
        &self.tower_csv
    }

    /// The full record file, ordered by agent then time.
    pub fn records_csv(&self) -> Vec<u8> {
        let chunks: Vec<Vec<u8>> = (0..self.n_agents())
            .into_par_iter()
            .map(|i| {
                let mut buf = Vec::new();
                let name = self.truth.agents[i].user_id.as_bytes();
                let mut date_cache: Option<(i64, [u8; 11])> = None;
                for r in self.agent_records(i) {
                    buf.extend_from_slice(name);
                    buf.push(b',');
                    buf.extend_from_slice(self.towers.name(r.cell).as_bytes());
                    buf.push(b',');
                    push_timestamp(&mut buf, r.start, &mut date_cache);
                    buf.push(b',');
                    if let Some(end) = r.end {
                        push_timestamp(&mut buf, end, &mut date_cache);
                    }
                    buf.push(b'\n');
                }
                buf
            })
            .collect();
        let mut out = b"user_id,cell_id,start_time,end_time\n".to_vec();
        out.reserve(chunks.iter().map(Vec::len).sum());
        for c in chunks {
            out.extend_from_slice(&c);
        }
        out
    }

    pub fn ground_truth_csv(&self) -> String {
        self.truth.to_csv(&self.towers)
    }

    /// `synth_manifest.json` contents for the three given files.
    pub fn manifest(&self, files: &[(&str, &[u8])]) -> Vec<u8> {
        let digests: serde_json::Map<String, serde_json::Value> = files
            .iter()
            .map(|(name, bytes)| (name.to_string(), hex::encode(Sha256::digest(bytes)).into()))
            .collect();
        let value = serde_json::json!({
            "seed": self.config.seed,
            "config": self.config,
            "towers": self.towers.len(),
            "agents": self.n_agents(),
            "sha256": digests,
        });
        let mut out = serde_json::to_vec_pretty(&value).expect("manifest serialises");
        out.push(b'\n');
        out
    }
}

fn push_timestamp(buf: &mut Vec<u8>, ts: Timestamp, cache: &mut Option<(i64, [u8; 11])>) {
    let day = ts.epoch_seconds().div_euclid(SECONDS_PER_DAY);
    let prefix = match cache {
        Some((d, p)) if *d == day => *p,
        _ => {
            let mut p = [0u8; 11];
            p.copy_from_slice(format!("{}T", ts.date()).as_bytes());
            *cache = Some((day, p));
            p
        }
    };
    buf.extend_from_slice(&prefix);
    let s = ts.second_of_day();
    let two = |v: u32| [b'0' + (v / 10) as u8, b'0' + (v % 10) as u8];
    buf.extend_from_slice(&two(s / 3600));
    buf.push(b':');
    buf.extend_from_slice(&two(s / 60 % 60));
    buf.push(b':');
    buf.extend_from_slice(&two(s % 60));
}

fn agent_rng(seed: u64, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent as u64 + 1);
    rng
}

/// Resolved intercepts of the piecewise plants.
struct PerDirectionBase {
    intercept_h: [f64; 2],
}

impl PerDirectionBase {
    fn new(config: &SynthConfig, plans: &[AgentPlan]) -> Result<Self, SynthError> {
        let mut intercept_h = [0.0; 2];
        for (k, d) in Direction::BOTH.into_iter().enumerate() {
            if let DurationModel::Piecewise {
                slope_h_per_km,
                intercept_h: fixed,
                target_mean_h,
                threshold_km,
                constant_h,
                ..
            } = config.duration.get(d)
            {
                intercept_h[k] = match (fixed, target_mean_h) {
                    (Some(b), _) => *b,
                    (None, Some(target)) => {
                        let regular: Vec<&AgentPlan> = plans.iter().filter(|p| !p.isolated).collect();
                        let below: Vec<f64> = regular
                            .iter()
                            .map(|p| p.distance_km)
                            .filter(|d| d < threshold_km)
                            .collect();
                        if below.is_empty() {
                            return Err(bad("target_mean_h needs agents below the threshold"));
                        }
                        let above = (regular.len() - below.len()) as f64;
                        let slope_sum: f64 = below.iter().map(|d| slope_h_per_km * d).sum();
                        (target * regular.len() as f64 - above * constant_h - slope_sum) / below.len() as f64
                    }
                    (None, None) => unreachable!("validated"),
                };
            }
        }
        Ok(PerDirectionBase { intercept_h })
    }

    /// Typical door-to-door duration of an agent, in hours.
    fn typical_h(&self, config: &SynthConfig, d: Direction, plan: &AgentPlan, rng: &mut ChaCha8Rng) -> f64 {
        let k = match d {
            Direction::Morning => 0,
            Direction::Night => 1,
        };
        match config.duration.get(d) {
            DurationModel::Piecewise {
                slope_h_per_km,
                threshold_km,
                constant_h,
                ..
            } => {
                if plan.distance_km < *threshold_km {
                    self.intercept_h[k] + slope_h_per_km * plan.distance_km
                } else {
                    *constant_h
                }
            }
            DurationModel::Banded { groups, .. } => {
                let band = groups[plan.group.index()][plan.band[k]];
                band.lo_h + (band.hi_h - band.lo_h) * rng.random::<f64>()
            }
        }
    }
}

fn sigma_h(model: &DurationModel) -> f64 {
    match model {
        DurationModel::Piecewise { sigma_h, .. } | DurationModel::Banded { sigma_h, .. } => *sigma_h,
    }
}

fn plan_trip(config: &SynthConfig, d: Direction, typical_h: f64, _base: &PerDirectionBase, rng: &mut ChaCha8Rng) -> Trip {
    let window: TimeWindow = config.schedule.windows.get(d);
    let margin = 2 * config.emission_interval_s;
    let span = window.duration_s() - 2 * margin;
    let hours = sample_normal(rng, typical_h, sigma_h(config.duration.get(d)));
    let duration = ((hours * 3600.0).round().max(60.0) as u32).min(span);
    let mean_clock = match d {
        Direction::Morning => &config.schedule.morning_depart,
        Direction::Night => &config.schedule.night_depart,
    };
    let mean = parse_clock(mean_clock).expect("validated") as f64;
    let depart = sample_normal(rng, mean, config.schedule.depart_sd_min * 60.0).round();
    let lo = window.start() + margin;
    let hi = window.start() + margin + span - duration;
    let depart_s = (depart.max(lo as f64) as u32).clamp(lo, hi);
    Trip {
        depart_s,
        arrive_s: depart_s + duration,
    }
}

/// Generates a cohort and renders the tower file, the record file and the
/// ground truth.
pub fn generate_cohort(config: &SynthConfig) -> Result<(Vec<u8>, Vec<u8>, GroundTruth), SynthError> {
    let cohort = SyntheticCohort::generate(config)?;
    let records = cohort.records_csv();
    Ok((cohort.tower_csv.into_bytes(), records, cohort.truth))
}

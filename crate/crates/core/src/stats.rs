//! Cohort statistics: distance groups, time-by-distance curves, commute time
//! CDFs, per-group histograms, departure schedules and travel budgets.
//!
//! Every sum goes through [`FixedSum`], an integer accumulator, so results are
//! bit-identical under any user ordering or sharding.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commute::{CommuteObservation, Direction, UserCommuteSummary};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("distance must be a non-negative number, got {0}")]
    NegativeDistance(f64),
    #[error("no users to aggregate")]
    Empty,
    #[error("invalid statistics option: {0}")]
    BadOption(String),
}

/// Exact sum of `f64` values in 2^-64 fixed point.
///
/// Each value is truncated to 2^-64 once on entry; after that, addition is
/// integer addition and therefore associative. The range covers sums up to
/// about 2^62, far beyond hours or seconds-of-day over any cohort.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FixedSum(i128);

const FIXED_SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

impl FixedSum {
    pub fn add(&mut self, value: f64) {
        debug_assert!(value.is_finite());
        self.0 += (value * FIXED_SCALE) as i128;
    }

    pub fn merge(&mut self, other: FixedSum) {
        self.0 += other.0;
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / FIXED_SCALE
    }

    pub fn mean(self, count: u64) -> Option<f64> {
        (count > 0).then(|| self.value() / count as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DistanceGroup {
    #[serde(rename = "0-2km")]
    G0To2,
    #[serde(rename = "2-6km")]
    G2To6,
    #[serde(rename = "6-15km")]
    G6To15,
    #[serde(rename = "15-25km")]
    G15To25,
    #[serde(rename = ">=25km")]
    G25Plus,
}

impl DistanceGroup {
    pub const ALL: [DistanceGroup; 5] = [
        DistanceGroup::G0To2,
        DistanceGroup::G2To6,
        DistanceGroup::G6To15,
        DistanceGroup::G15To25,
        DistanceGroup::G25Plus,
    ];

    /// `[lower, upper)` in km.
    pub fn bounds_km(self) -> (f64, f64) {
        match self {
            DistanceGroup::G0To2 => (0.0, 2.0),
            DistanceGroup::G2To6 => (2.0, 6.0),
            DistanceGroup::G6To15 => (6.0, 15.0),
            DistanceGroup::G15To25 => (15.0, 25.0),
            DistanceGroup::G25Plus => (25.0, f64::INFINITY),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DistanceGroup::G0To2 => "0-2km",
            DistanceGroup::G2To6 => "2-6km",
            DistanceGroup::G6To15 => "6-15km",
            DistanceGroup::G15To25 => "15-25km",
            DistanceGroup::G25Plus => ">=25km",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DistanceGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn classify_distance_group(distance_km: f64) -> Result<DistanceGroup, StatsError> {
    if !(distance_km >= 0.0) {
        return Err(StatsError::NegativeDistance(distance_km));
    }
    Ok(DistanceGroup::ALL
        .into_iter()
        .find(|g| distance_km < g.bounds_km().1)
        .unwrap_or(DistanceGroup::G25Plus))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsOptions {
    /// Width of the distance bins for the mean-time curve.
    pub bin_km: f64,
    /// Finite upper edges of the histogram duration bands; a last band up to
    /// infinity is implied.
    pub band_edges_h: Vec<f64>,
    /// Finite upper edges of the schedule table's commute-time ranges.
    pub schedule_edges_h: Vec<f64>,
    pub threshold_km: f64,
    pub cdf_step_h: f64,
    pub cdf_max_h: f64,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            bin_km: 3.0,
            band_edges_h: vec![0.25, 0.5, 1.0],
            schedule_edges_h: vec![0.5, 1.0, 1.5],
            threshold_km: 18.0,
            cdf_step_h: 0.05,
            cdf_max_h: 4.0,
        }
    }
}

fn increasing_positive(edges: &[f64]) -> bool {
    edges.iter().all(|e| e.is_finite() && *e > 0.0) && edges.windows(2).all(|w| w[0] < w[1])
}

impl StatsOptions {
    pub fn validate(&self) -> Result<(), StatsError> {
        let bad = |what: &str| Err(StatsError::BadOption(what.to_string()));
        if !(self.bin_km > 0.0) {
            return bad("bin_km must be positive");
        }
        if !increasing_positive(&self.band_edges_h) {
            return bad("band_edges_h must be positive and strictly increasing");
        }
        if !increasing_positive(&self.schedule_edges_h) {
            return bad("schedule_edges_h must be positive and strictly increasing");
        }
        if !(self.threshold_km >= 0.0 && self.threshold_km.is_finite()) {
            return bad("threshold_km must be a non-negative number");
        }
        if !(self.cdf_step_h > 0.0 && self.cdf_max_h >= self.cdf_step_h && self.cdf_max_h.is_finite()) {
            return bad("cdf grid needs 0 < cdf_step_h <= cdf_max_h");
        }
        Ok(())
    }

    pub fn cdf_grid(&self) -> Vec<f64> {
        let n = (self.cdf_max_h / self.cdf_step_h + 1e-9).floor() as u32;
        (1..=n).map(|k| k as f64 * self.cdf_step_h).collect()
    }
}

/// A value for each commute direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerDirection<T> {
    pub morning: T,
    pub night: T,
}

impl<T> PerDirection<T> {
    pub fn from_fn(mut f: impl FnMut(Direction) -> T) -> Self {
        PerDirection {
            morning: f(Direction::Morning),
            night: f(Direction::Night),
        }
    }

    pub fn get(&self, direction: Direction) -> &T {
        match direction {
            Direction::Morning => &self.morning,
            Direction::Night => &self.night,
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Direction) -> Result<T, E>) -> Result<Self, E> {
        Ok(PerDirection {
            morning: f(Direction::Morning)?,
            night: f(Direction::Night)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupShare {
    pub group: DistanceGroup,
    pub users: u64,
    pub proportion: f64,
}

/// Share of users in each distance group; all five groups are listed.
pub fn group_proportions(summaries: &[UserCommuteSummary]) -> Result<Vec<GroupShare>, StatsError> {
    if summaries.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut counts = [0u64; 5];
    for s in summaries {
        counts[classify_distance_group(s.distance_km)?.index()] += 1;
    }
    let total = summaries.len() as f64;
    Ok(DistanceGroup::ALL
        .iter()
        .map(|&group| GroupShare {
            group,
            users: counts[group.index()],
            proportion: counts[group.index()] as f64 / total,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceBin {
    pub lower_km: f64,
    /// `inf` when the bin width is infinite.
    pub upper_km: f64,
    pub mean_h: f64,
    pub users: u64,
}

impl DistanceBin {
    pub fn center_km(&self) -> f64 {
        (self.lower_km + self.upper_km) / 2.0
    }
}

/// Mean of per-user mean durations in `[k * bin_km, (k + 1) * bin_km)`
/// distance bins. Empty bins are omitted.
pub fn mean_time_by_bin(
    summaries: &[UserCommuteSummary],
    direction: Direction,
    bin_km: f64,
) -> Result<Vec<DistanceBin>, StatsError> {
    if !(bin_km > 0.0) {
        return Err(StatsError::BadOption(format!("bin_km must be positive, got {bin_km}")));
    }
    let mut bins: BTreeMap<u64, (FixedSum, u64)> = BTreeMap::new();
    for s in summaries {
        let Some(mean) = s.mean(direction) else { continue };
        let k = (s.distance_km / bin_km).floor() as u64;
        let slot = bins.entry(k).or_default();
        slot.0.add(mean);
        slot.1 += 1;
    }
    Ok(bins
        .into_iter()
        .map(|(k, (sum, n))| {
            let lower_km = if bin_km.is_infinite() { 0.0 } else { k as f64 * bin_km };
            DistanceBin {
                lower_km,
                upper_km: lower_km + bin_km,
                mean_h: sum.mean(n).expect("non-empty bin"),
                users: n,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfPoint {
    pub hours: f64,
    pub cum_fraction: f64,
}

/// Fraction of users whose mean duration is at most each grid value.
pub fn time_cdf(
    summaries: &[UserCommuteSummary],
    direction: Direction,
    grid_h: &[f64],
) -> Result<Vec<CdfPoint>, StatsError> {
    if grid_h.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(StatsError::BadOption("cdf grid must be strictly increasing".into()));
    }
    let mut means: Vec<f64> = summaries.iter().filter_map(|s| s.mean(direction)).collect();
    means.sort_by(f64::total_cmp);
    let n = means.len();
    Ok(grid_h
        .iter()
        .map(|&hours| CdfPoint {
            hours,
            cum_fraction: if n == 0 {
                0.0
            } else {
                means.partition_point(|m| *m <= hours) as f64 / n as f64
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandMass {
    pub lower_h: f64,
    pub upper_h: f64,
    pub users: u64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupHistogram {
    pub group: DistanceGroup,
    pub users: u64,
    pub bands: Vec<BandMass>,
}

fn band_index(edges: &[f64], value: f64) -> usize {
    edges.partition_point(|e| *e <= value)
}

fn band_bounds(edges: &[f64]) -> Vec<(f64, f64)> {
    let mut lowers = vec![0.0];
    lowers.extend_from_slice(edges);
    let mut uppers = edges.to_vec();
    uppers.push(f64::INFINITY);
    lowers.into_iter().zip(uppers).collect()
}

/// Within each distance group, the share of users whose mean duration falls
/// in each band `[0, e1), [e1, e2), ..., [ek, inf)`. Groups without users
/// are omitted.
pub fn group_histograms(
    summaries: &[UserCommuteSummary],
    direction: Direction,
    edges_h: &[f64],
) -> Result<Vec<GroupHistogram>, StatsError> {
    if !increasing_positive(edges_h) {
        return Err(StatsError::BadOption("band edges must be positive and increasing".into()));
    }
    let bounds = band_bounds(edges_h);
    let mut counts = vec![vec![0u64; bounds.len()]; DistanceGroup::ALL.len()];
    for s in summaries {
        let Some(mean) = s.mean(direction) else { continue };
        let g = classify_distance_group(s.distance_km)?;
        counts[g.index()][band_index(edges_h, mean)] += 1;
    }
    Ok(DistanceGroup::ALL
        .iter()
        .filter_map(|&group| {
            let row = &counts[group.index()];
            let users: u64 = row.iter().sum();
            (users > 0).then(|| GroupHistogram {
                group,
                users,
                bands: bounds
                    .iter()
                    .zip(row)
                    .map(|(&(lower_h, upper_h), &n)| BandMass {
                        lower_h,
                        upper_h,
                        users: n,
                        mass: n as f64 / users as f64,
                    })
                    .collect(),
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleRow {
    pub lower_h: f64,
    pub upper_h: f64,
    pub observations: u64,
    /// Mean departure clock time, seconds after midnight.
    pub mean_depart_s: f64,
    pub mean_arrive_s: f64,
}

/// Mean departure and arrival clock times of raw daily observations, grouped
/// by the observed duration. Empty ranges are omitted.
pub fn schedule_table(
    observations: &[CommuteObservation],
    direction: Direction,
    edges_h: &[f64],
) -> Result<Vec<ScheduleRow>, StatsError> {
    if !increasing_positive(edges_h) {
        return Err(StatsError::BadOption("schedule edges must be positive and increasing".into()));
    }
    let bounds = band_bounds(edges_h);
    let mut acc = vec![(0u64, 0u64, 0u64); bounds.len()];
    for o in observations.iter().filter(|o| o.direction == direction) {
        let slot = &mut acc[band_index(edges_h, o.duration_h())];
        slot.0 += 1;
        slot.1 += o.depart.second_of_day() as u64;
        slot.2 += o.arrive.second_of_day() as u64;
    }
    Ok(bounds
        .into_iter()
        .zip(acc)
        .filter(|(_, (n, _, _))| *n > 0)
        .map(|((lower_h, upper_h), (n, dep, arr))| ScheduleRow {
            lower_h,
            upper_h,
            observations: n,
            mean_depart_s: dep as f64 / n as f64,
            mean_arrive_s: arr as f64 / n as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarchettiSummary {
    pub threshold_km: f64,
    /// Mean morning duration of users farther than the threshold.
    pub morning_constant_h: Option<f64>,
    pub night_constant_h: Option<f64>,
    pub users_above_threshold: u64,
    /// Mean over users with both directions of their morning plus night mean.
    pub daily_budget_h: Option<f64>,
    pub budget_users: u64,
    pub mean_morning_h: Option<f64>,
    pub mean_night_h: Option<f64>,
}

/// Mergeable partial state behind [`marchetti_summary`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MarchettiAccumulator {
    above: PerDirectionSums,
    all: PerDirectionSums,
    users_above: u64,
    budget: FixedSum,
    budget_users: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct PerDirectionSums {
    morning: (FixedSum, u64),
    night: (FixedSum, u64),
}

impl PerDirectionSums {
    fn add(&mut self, s: &UserCommuteSummary) {
        if let Some(m) = s.mean_morning_h {
            self.morning.0.add(m);
            self.morning.1 += 1;
        }
        if let Some(n) = s.mean_night_h {
            self.night.0.add(n);
            self.night.1 += 1;
        }
    }

    fn merge(&mut self, o: &PerDirectionSums) {
        self.morning.0.merge(o.morning.0);
        self.morning.1 += o.morning.1;
        self.night.0.merge(o.night.0);
        self.night.1 += o.night.1;
    }
}

impl MarchettiAccumulator {
    pub fn add(&mut self, s: &UserCommuteSummary, threshold_km: f64) {
        self.all.add(s);
        if s.distance_km > threshold_km {
            self.users_above += 1;
            self.above.add(s);
        }
        if let (Some(m), Some(n)) = (s.mean_morning_h, s.mean_night_h) {
            self.budget.add(m + n);
            self.budget_users += 1;
        }
    }

    pub fn merge(&mut self, other: &MarchettiAccumulator) {
        self.above.merge(&other.above);
        self.all.merge(&other.all);
        self.users_above += other.users_above;
        self.budget.merge(other.budget);
        self.budget_users += other.budget_users;
    }

    pub fn finish(&self, threshold_km: f64) -> MarchettiSummary {
        MarchettiSummary {
            threshold_km,
            morning_constant_h: self.above.morning.0.mean(self.above.morning.1),
            night_constant_h: self.above.night.0.mean(self.above.night.1),
            users_above_threshold: self.users_above,
            daily_budget_h: self.budget.mean(self.budget_users),
            budget_users: self.budget_users,
            mean_morning_h: self.all.morning.0.mean(self.all.morning.1),
            mean_night_h: self.all.night.0.mean(self.all.night.1),
        }
    }
}

pub fn marchetti_summary(summaries: &[UserCommuteSummary], threshold_km: f64) -> Result<MarchettiSummary, StatsError> {
    if summaries.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut acc = MarchettiAccumulator::default();
    for s in summaries {
        acc.add(s, threshold_km);
    }
    Ok(acc.finish(threshold_km))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortStats {
    pub users: u64,
    pub group_proportions: Vec<GroupShare>,
    pub mean_time_by_bin: PerDirection<Vec<DistanceBin>>,
    pub time_cdf: PerDirection<Vec<CdfPoint>>,
    pub group_histograms: PerDirection<Vec<GroupHistogram>>,
    pub schedule_table: PerDirection<Vec<ScheduleRow>>,
    pub marchetti: MarchettiSummary,
}

pub fn compute_cohort_stats(
    summaries: &[UserCommuteSummary],
    observations: &[CommuteObservation],
    opts: &StatsOptions,
) -> Result<CohortStats, StatsError> {
    opts.validate()?;
    let grid = opts.cdf_grid();
    Ok(CohortStats {
        users: summaries.len() as u64,
        group_proportions: group_proportions(summaries)?,
        mean_time_by_bin: PerDirection::try_from_fn(|d| mean_time_by_bin(summaries, d, opts.bin_km))?,
        time_cdf: PerDirection::try_from_fn(|d| time_cdf(summaries, d, &grid))?,
        group_histograms: PerDirection::try_from_fn(|d| group_histograms(summaries, d, &opts.band_edges_h))?,
        schedule_table: PerDirection::try_from_fn(|d| schedule_table(observations, d, &opts.schedule_edges_h))?,
        marchetti: marchetti_summary(summaries, opts.threshold_km)?,
    })
}

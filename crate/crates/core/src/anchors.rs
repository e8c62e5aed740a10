//! User filtering and home/work anchor inference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CellId, UserId};
use crate::trajectory::{dwell_by_cell, DayTrajectory, TimeWindow};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("min_daily_records must be at least 1")]
    MinRecords,
    #[error("isolation_radius_km must be positive, got {0}")]
    Radius(f64),
    #[error("include_days must name at least one weekday")]
    EmptyMask,
    #[error("unknown weekday `{0}`")]
    Weekday(String),
    #[error("dominance_fraction must lie in (0, 1], got {0}")]
    Fraction(f64),
}

const WEEKDAYS: [Weekday; 7] = [
    Weekday::Mon,
    Weekday::Tue,
    Weekday::Wed,
    Weekday::Thu,
    Weekday::Fri,
    Weekday::Sat,
    Weekday::Sun,
];

/// Set of weekdays, serialised as a list of three-letter names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct WeekdayMask(u8);

impl WeekdayMask {
    pub const WORKDAYS: WeekdayMask = WeekdayMask(0b001_1111);
    pub const ALL: WeekdayMask = WeekdayMask(0b111_1111);

    pub fn from_days(days: &[Weekday]) -> Self {
        WeekdayMask(days.iter().fold(0, |m, d| m | 1 << d.num_days_from_monday()))
    }

    pub fn contains(self, day: Weekday) -> bool {
        self.0 & (1 << day.num_days_from_monday()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn days(self) -> impl Iterator<Item = Weekday> {
        WEEKDAYS.into_iter().filter(move |d| self.contains(*d))
    }
}

impl Default for WeekdayMask {
    fn default() -> Self {
        WeekdayMask::WORKDAYS
    }
}

impl TryFrom<Vec<String>> for WeekdayMask {
    type Error = ConfigError;
    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        let days = names
            .iter()
            .map(|n| n.parse::<Weekday>().map_err(|_| ConfigError::Weekday(n.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(WeekdayMask::from_days(&days))
    }
}

impl From<WeekdayMask> for Vec<String> {
    fn from(mask: WeekdayMask) -> Self {
        mask.days().map(|d| d.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_daily_records: u32,
    pub isolation_radius_km: f64,
    pub include_days: WeekdayMask,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_daily_records: 1500,
            isolation_radius_km: 15.0,
            include_days: WeekdayMask::WORKDAYS,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.min_daily_records < 1 {
            return Err(ConfigError::MinRecords);
        }
        if !(self.isolation_radius_km.is_finite() && self.isolation_radius_km > 0.0) {
            return Err(ConfigError::Radius(self.isolation_radius_km));
        }
        if self.include_days.is_empty() {
            return Err(ConfigError::EmptyMask);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorWindows {
    pub home_window: TimeWindow,
    pub work_window: TimeWindow,
    pub dominance_fraction: f64,
}

impl Default for AnchorWindows {
    fn default() -> Self {
        AnchorWindows {
            home_window: TimeWindow::from_hours(19, 7),
            work_window: TimeWindow::from_hours(9, 18),
            dominance_fraction: 0.5,
        }
    }
}

impl AnchorWindows {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = self.dominance_fraction;
        if f.is_finite() && f > 0.0 && f <= 1.0 {
            Ok(())
        } else {
            Err(ConfigError::Fraction(f))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    pub user: UserId,
    pub home: CellId,
    pub work: CellId,
    pub qualifying_dates: Vec<NaiveDate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRejection {
    NoDominantHome,
    NoDominantWork,
    IsolatedAnchor,
}

impl AnchorRejection {
    pub fn as_str(self) -> &'static str {
        match self {
            AnchorRejection::NoDominantHome => "no dominant home",
            AnchorRejection::NoDominantWork => "no dominant work",
            AnchorRejection::IsolatedAnchor => "isolated anchor",
        }
    }
}

impl fmt::Display for AnchorRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dates on which each user is active enough to analyse: at least
/// `min_daily_records` records and a weekday in the mask. Users left with no
/// date are dropped from the result.
pub fn filter_active_days<I>(counts: I, cfg: &FilterConfig) -> BTreeMap<UserId, BTreeSet<NaiveDate>>
where
    I: IntoIterator<Item = ((UserId, NaiveDate), u32)>,
{
    let mut out: BTreeMap<UserId, BTreeSet<NaiveDate>> = BTreeMap::new();
    for ((user, date), n) in counts {
        if n >= cfg.min_daily_records && cfg.include_days.contains(date.weekday()) {
            out.entry(user).or_default().insert(date);
        }
    }
    out
}

/// Cell with the largest dwell, provided it covers at least `fraction` of the
/// window. Equal dwell goes to the smaller cell id.
pub fn dominant_location(dwell: &BTreeMap<CellId, u32>, window: TimeWindow, fraction: f64) -> Option<CellId> {
    let mut best: Option<(CellId, u32)> = None;
    for (&cell, &secs) in dwell {
        if best.is_none_or(|(_, b)| secs > b) {
            best = Some((cell, secs));
        }
    }
    let (cell, secs) = best?;
    (secs as f64 >= fraction * window.duration_s() as f64).then_some(cell)
}

fn mode(candidates: &BTreeMap<CellId, usize>) -> Option<CellId> {
    let mut best: Option<(CellId, usize)> = None;
    for (&cell, &n) in candidates {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((cell, n));
        }
    }
    best.map(|(c, _)| c)
}

/// Home and work anchors over the user's qualifying dates.
///
/// `trajectories` holds every day the user has records for, qualifying or
/// not, so that a wrapping home window can borrow the previous evening. A
/// missing previous day contributes no dwell. The anchor is the most frequent
/// daily dominant cell.
pub fn infer_anchors(
    user: UserId,
    trajectories: &BTreeMap<NaiveDate, DayTrajectory>,
    qualifying: &BTreeSet<NaiveDate>,
    windows: &AnchorWindows,
    isolated: &BTreeSet<CellId>,
) -> Result<AnchorSet, AnchorRejection> {
    let mut homes: BTreeMap<CellId, usize> = BTreeMap::new();
    let mut works: BTreeMap<CellId, usize> = BTreeMap::new();
    for date in qualifying {
        let empty = DayTrajectory::empty(user, *date);
        let today = trajectories.get(date).unwrap_or(&empty);
        let yesterday = date.pred_opt().and_then(|d| trajectories.get(&d));
        let missing_prev = DayTrajectory::empty(user, *date);
        let prev = yesterday.unwrap_or(&missing_prev);

        for (window, tally) in [(windows.home_window, &mut homes), (windows.work_window, &mut works)] {
            let dwell = dwell_by_cell(today, window, Some(prev)).expect("previous day supplied");
            if let Some(cell) = dominant_location(&dwell, window, windows.dominance_fraction) {
                *tally.entry(cell).or_default() += 1;
            }
        }
    }
    let home = mode(&homes).ok_or(AnchorRejection::NoDominantHome)?;
    let work = mode(&works).ok_or(AnchorRejection::NoDominantWork)?;
    if isolated.contains(&home) || isolated.contains(&work) {
        return Err(AnchorRejection::IsolatedAnchor);
    }
    Ok(AnchorSet {
        user,
        home,
        work,
        qualifying_dates: qualifying.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::StaySegment;

    const H: CellId = CellId(3);
    const W: CellId = CellId(7);

    fn date(d: u32) -> NaiveDate {
        // 2012-03-05 is a Monday.
        NaiveDate::from_ymd_opt(2012, 3, d).unwrap()
    }

    fn hours(h: f64) -> u32 {
        (h * 3600.0) as u32
    }

    #[test]
    fn record_threshold_is_inclusive() {
        let cfg = FilterConfig::default();
        let tue = date(6);
        let active = filter_active_days([((UserId(0), tue), 1500), ((UserId(1), tue), 1499)], &cfg);
        assert_eq!(active.len(), 1);
        assert!(active[&UserId(0)].contains(&tue));
    }

    #[test]
    fn weekday_mask_semantics() {
        let sat = date(10);
        let counts = [((UserId(0), sat), 2000)];
        assert!(filter_active_days(counts, &FilterConfig::default()).is_empty());
        let all_week = FilterConfig {
            include_days: WeekdayMask::ALL,
            ..FilterConfig::default()
        };
        assert_eq!(filter_active_days(counts, &all_week).len(), 1);
    }

    #[test]
    fn weekday_mask_round_trips_names() {
        let names: Vec<String> = WeekdayMask::WORKDAYS.into();
        assert_eq!(names, ["Mon", "Tue", "Wed", "Thu", "Fri"]);
        assert_eq!(WeekdayMask::try_from(names).unwrap(), WeekdayMask::WORKDAYS);
        assert!(WeekdayMask::try_from(vec!["Funday".to_string()]).is_err());
    }

    #[test]
    fn defaults_match_half_window_rule() {
        let w = AnchorWindows::default();
        assert_eq!(w.dominance_fraction * w.home_window.duration_s() as f64, 6.0 * 3600.0);
        assert_eq!(w.dominance_fraction * w.work_window.duration_s() as f64, 4.5 * 3600.0);
    }

    #[test]
    fn dominant_location_rules() {
        let window = TimeWindow::from_hours(9, 18);
        let a = CellId(0);
        let b = CellId(1);
        let c = CellId(2);
        let dwell = BTreeMap::from([(a, hours(6.0)), (b, hours(3.0))]);
        assert_eq!(dominant_location(&dwell, window, 0.5), Some(a));

        let dwell = BTreeMap::from([(a, hours(4.0)), (b, hours(4.0)), (c, hours(1.0))]);
        assert_eq!(dominant_location(&dwell, window, 0.5), None);

        // Exact tie at exactly the threshold.
        let dwell = BTreeMap::from([(b, hours(4.5)), (a, hours(4.5))]);
        assert_eq!(dwell[&a] as f64, 0.5 * window.duration_s() as f64);
        assert_eq!(dominant_location(&dwell, window, 0.5), Some(a));
        assert_eq!(dominant_location(&BTreeMap::new(), window, 0.5), None);
    }

    fn canonical_day(d: NaiveDate) -> DayTrajectory {
        DayTrajectory {
            segments: vec![
                StaySegment { cell: H, begin: 0, end: hours(7.5) },
                StaySegment { cell: W, begin: hours(8.5), end: hours(18.0) },
                StaySegment { cell: H, begin: hours(18.75), end: 86_400 },
            ],
            ..DayTrajectory::empty(UserId(0), d)
        }
    }

    #[test]
    fn canonical_week_recovers_anchors() {
        let mut trajs = BTreeMap::new();
        for d in 5..=9 {
            let mut day = canonical_day(date(d));
            // Stay hypothesis: transit time is spent in the origin cell.
            day.segments[0].end = hours(8.5);
            day.segments[1].end = hours(18.75);
            trajs.insert(date(d), day);
        }
        let qualifying: BTreeSet<_> = trajs.keys().copied().collect();
        let anchors = infer_anchors(UserId(0), &trajs, &qualifying, &AnchorWindows::default(), &BTreeSet::new())
            .unwrap();
        assert_eq!((anchors.home, anchors.work), (H, W));
        assert_eq!(anchors.qualifying_dates.len(), 5);

        let isolated = BTreeSet::from([W]);
        assert_eq!(
            infer_anchors(UserId(0), &trajs, &qualifying, &AnchorWindows::default(), &isolated),
            Err(AnchorRejection::IsolatedAnchor)
        );
    }

    #[test]
    fn no_overnight_home() {
        let mut trajs = BTreeMap::new();
        for d in 5..=9 {
            let day = DayTrajectory {
                segments: vec![
                    StaySegment { cell: CellId(1), begin: 0, end: hours(3.0) },
                    StaySegment { cell: CellId(2), begin: hours(3.0), end: hours(6.0) },
                    StaySegment { cell: W, begin: hours(6.0), end: hours(20.0) },
                    StaySegment { cell: CellId(4), begin: hours(20.0), end: 86_400 },
                ],
                ..DayTrajectory::empty(UserId(0), date(d))
            };
            trajs.insert(date(d), day);
        }
        let qualifying: BTreeSet<_> = trajs.keys().copied().collect();
        assert_eq!(
            infer_anchors(UserId(0), &trajs, &qualifying, &AnchorWindows::default(), &BTreeSet::new()),
            Err(AnchorRejection::NoDominantHome)
        );
    }
}

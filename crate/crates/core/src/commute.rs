//! Commute time estimation from anchor records inside commuting windows.
//!
//! The estimate spans the last record at the origin anchor and the first
//! later record at the destination anchor. Because the user may linger
//! silently before leaving and after arriving, the estimate can only
//! overstate the door-to-door time.

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorSet;
use crate::geo::great_circle_distance;
use crate::ingest::{CellId, Timestamp, TowerSet, UserId};
use crate::trajectory::{DayTrajectory, TimeWindow};

#[derive(Debug, Error, PartialEq)]
pub enum CommuteError {
    #[error("anchor cell {0:?} is not in the tower set")]
    UnknownAnchor(CellId),
    #[error("commute windows must not wrap midnight and morning must end before night starts")]
    BadWindows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Morning,
    Night,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Morning, Direction::Night];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Morning => "morning",
            Direction::Night => "night",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommuteWindows {
    pub morning: TimeWindow,
    pub night: TimeWindow,
}

impl Default for CommuteWindows {
    fn default() -> Self {
        CommuteWindows {
            morning: TimeWindow::from_hours(6, 10),
            night: TimeWindow::from_hours(17, 21),
        }
    }
}

impl CommuteWindows {
    pub fn validate(&self) -> Result<(), CommuteError> {
        let ok = !self.morning.wraps_midnight()
            && !self.night.wraps_midnight()
            && self.morning.end() <= self.night.start();
        if ok {
            Ok(())
        } else {
            Err(CommuteError::BadWindows)
        }
    }

    pub fn get(&self, direction: Direction) -> TimeWindow {
        match direction {
            Direction::Morning => self.morning,
            Direction::Night => self.night,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommuteObservation {
    pub user: UserId,
    pub date: NaiveDate,
    pub direction: Direction,
    pub depart: Timestamp,
    pub arrive: Timestamp,
    pub distance_km: f64,
}

impl CommuteObservation {
    pub fn duration_s(&self) -> i64 {
        self.arrive.epoch_seconds() - self.depart.epoch_seconds()
    }

    pub fn duration_h(&self) -> f64 {
        self.duration_s() as f64 / 3600.0
    }
}

/// Why a user-day produced no observation for a direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommuteMiss {
    /// No record at the origin anchor inside the window.
    NoOrigin,
    /// No record at the destination anchor after the last origin record.
    NoDestination,
    /// The destination record shares the origin record's second.
    ZeroDuration,
}

impl CommuteMiss {
    pub fn as_str(self) -> &'static str {
        match self {
            CommuteMiss::NoOrigin => "no origin record",
            CommuteMiss::NoDestination => "no destination record",
            CommuteMiss::ZeroDuration => "zero duration",
        }
    }
}

/// Last origin record, then the first destination record after it, both
/// inside `window`. A user oscillating between anchors is timed from the
/// final origin record.
pub fn estimate_commute(
    trajectory: &DayTrajectory,
    origin: CellId,
    destination: CellId,
    window: TimeWindow,
) -> Result<(u32, u32), CommuteMiss> {
    let events = &trajectory.events;
    let in_window = |i: &usize| window.contains(events[*i].second);
    let last_origin = (0..events.len())
        .rev()
        .filter(in_window)
        .find(|&i| events[i].cell == origin)
        .ok_or(CommuteMiss::NoOrigin)?;
    let first_dest = (last_origin + 1..events.len())
        .filter(in_window)
        .find(|&i| events[i].cell == destination)
        .ok_or(CommuteMiss::NoDestination)?;
    let (depart, arrive) = (events[last_origin].second, events[first_dest].second);
    if arrive == depart {
        return Err(CommuteMiss::ZeroDuration);
    }
    Ok((depart, arrive))
}

fn observe(
    trajectory: &DayTrajectory,
    origin: CellId,
    destination: CellId,
    direction: Direction,
    window: TimeWindow,
    distance_km: f64,
) -> Result<CommuteObservation, CommuteMiss> {
    let (depart, arrive) = estimate_commute(trajectory, origin, destination, window)?;
    Ok(CommuteObservation {
        user: trajectory.user,
        date: trajectory.date,
        direction,
        depart: Timestamp::from_date_seconds(trajectory.date, depart),
        arrive: Timestamp::from_date_seconds(trajectory.date, arrive),
        distance_km,
    })
}

/// Home to work inside the morning window.
pub fn morning_commute(
    trajectory: &DayTrajectory,
    anchors: &AnchorSet,
    windows: &CommuteWindows,
    distance_km: f64,
) -> Result<CommuteObservation, CommuteMiss> {
    observe(trajectory, anchors.home, anchors.work, Direction::Morning, windows.morning, distance_km)
}

/// Work to home inside the night window.
pub fn night_commute(
    trajectory: &DayTrajectory,
    anchors: &AnchorSet,
    windows: &CommuteWindows,
    distance_km: f64,
) -> Result<CommuteObservation, CommuteMiss> {
    observe(trajectory, anchors.work, anchors.home, Direction::Night, windows.night, distance_km)
}

pub fn commute_distance(anchors: &AnchorSet, towers: &TowerSet) -> Result<f64, CommuteError> {
    let home = towers.get(anchors.home).ok_or(CommuteError::UnknownAnchor(anchors.home))?;
    let work = towers.get(anchors.work).ok_or(CommuteError::UnknownAnchor(anchors.work))?;
    Ok(great_circle_distance(home.location, work.location))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserCommuteSummary {
    pub distance_km: f64,
    pub mean_morning_h: Option<f64>,
    pub mean_night_h: Option<f64>,
    pub n_morning: u32,
    pub n_night: u32,
}

impl UserCommuteSummary {
    pub fn mean(&self, direction: Direction) -> Option<f64> {
        match direction {
            Direction::Morning => self.mean_morning_h,
            Direction::Night => self.mean_night_h,
        }
    }
}

/// Per-direction mean over a user's daily observations. Sums are kept in
/// whole seconds so the mean does not depend on observation order.
pub fn summarize_user(observations: &[CommuteObservation], distance_km: f64) -> UserCommuteSummary {
    let mean = |direction: Direction| {
        let (sum, n) = observations
            .iter()
            .filter(|o| o.direction == direction)
            .fold((0i64, 0u32), |(s, n), o| (s + o.duration_s(), n + 1));
        (n > 0).then(|| sum as f64 / n as f64 / 3600.0).map(|m| (m, n))
    };
    let morning = mean(Direction::Morning);
    let night = mean(Direction::Night);
    UserCommuteSummary {
        distance_km,
        mean_morning_h: morning.map(|(m, _)| m),
        mean_night_h: night.map(|(m, _)| m),
        n_morning: morning.map_or(0, |(_, n)| n),
        n_night: night.map_or(0, |(_, n)| n),
    }
}

//! Day trajectories under the stay hypothesis: a user remains in the cell of
//! their latest record until a record shows up in a different cell.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CellId, TrafficRecord, UserId};

pub const DAY_SECONDS: u32 = 86_400;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("records are not sorted by start time (index {0})")]
    Unsorted(usize),
    #[error("record {index} falls on {found}, expected {expected}")]
    DateMismatch {
        index: usize,
        found: NaiveDate,
        expected: NaiveDate,
    },
    #[error("window {0} wraps midnight and needs the previous day's trajectory")]
    MissingPreviousDay(TimeWindow),
    #[error("invalid time window: {0}")]
    BadWindow(String),
}

/// A clock-of-day interval `[start, end)`. When `start > end` the window
/// wraps past midnight. `end` may be 24:00.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TimeWindow {
    start: u32,
    end: u32,
}

impl TimeWindow {
    pub fn new(start_s: u32, end_s: u32) -> Result<Self, TrajectoryError> {
        if start_s >= DAY_SECONDS || end_s > DAY_SECONDS || start_s == end_s {
            return Err(TrajectoryError::BadWindow(format!("{start_s}..{end_s}")));
        }
        if start_s > end_s && end_s == DAY_SECONDS {
            return Err(TrajectoryError::BadWindow(format!("{start_s}..{end_s}")));
        }
        Ok(TimeWindow {
            start: start_s,
            end: end_s,
        })
    }

    pub fn from_hours(start_h: u32, end_h: u32) -> Self {
        TimeWindow::new(start_h * 3600, end_h * 3600).expect("valid hour window")
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn end(&self) -> u32 {
        self.end
    }

    pub fn wraps_midnight(&self) -> bool {
        self.start > self.end
    }

    pub fn duration_s(&self) -> u32 {
        if self.wraps_midnight() {
            DAY_SECONDS - self.start + self.end
        } else {
            self.end - self.start
        }
    }

    pub fn contains(&self, second_of_day: u32) -> bool {
        if self.wraps_midnight() {
            second_of_day >= self.start || second_of_day < self.end
        } else {
            (self.start..self.end).contains(&second_of_day)
        }
    }
}

fn parse_hhmm(s: &str) -> Option<u32> {
    let (h, m) = s.trim().split_once(':')?;
    let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
    if m >= 60 || h > 24 || (h == 24 && m != 0) {
        return None;
    }
    Some(h * 3600 + m * 60)
}

impl FromStr for TimeWindow {
    type Err = TrajectoryError;

    /// Parses `HH:MM-HH:MM`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TrajectoryError::BadWindow(s.to_string());
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        let start = parse_hhmm(a).ok_or_else(bad)?;
        let end = parse_hhmm(b).ok_or_else(bad)?;
        TimeWindow::new(start, end).map_err(|_| bad())
    }
}

impl TryFrom<String> for TimeWindow {
    type Error = TrajectoryError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TimeWindow> for String {
    fn from(w: TimeWindow) -> String {
        w.to_string()
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hm = |s: u32| format!("{:02}:{:02}", s / 3600, (s / 60) % 60);
        write!(f, "{}-{}", hm(self.start), hm(self.end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StaySegment {
    pub cell: CellId,
    /// Seconds since local midnight; `begin < end <= 86400`.
    pub begin: u32,
    pub end: u32,
}

impl StaySegment {
    pub fn duration_s(&self) -> u32 {
        self.end - self.begin
    }

    fn overlap(&self, from: u32, to: u32) -> u32 {
        self.end.min(to).saturating_sub(self.begin.max(from))
    }
}

/// A distinct record observation within the day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayEvent {
    pub second: u32,
    pub cell: CellId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DayTrajectory {
    pub user: UserId,
    pub date: NaiveDate,
    pub segments: Vec<StaySegment>,
    /// Records of the day in time order, exact duplicates removed.
    pub events: Vec<DayEvent>,
    /// Records that shared a second with a record in another cell.
    pub same_second_ties: u32,
}

impl DayTrajectory {
    pub fn empty(user: UserId, date: NaiveDate) -> Self {
        DayTrajectory {
            user,
            date,
            segments: Vec::new(),
            events: Vec::new(),
            same_second_ties: 0,
        }
    }

    pub fn first_second(&self) -> Option<u32> {
        self.segments.first().map(|s| s.begin)
    }
}

/// Turns one user-day of time-sorted records into maximal stay segments.
///
/// A segment starts at the first record seen in a new cell and runs until the
/// next change of cell; the last segment runs to 24:00. Records sharing a
/// second but naming different cells resolve to the later one in input order.
pub fn build_day_trajectory(
    user: UserId,
    date: NaiveDate,
    records: &[TrafficRecord],
) -> Result<DayTrajectory, TrajectoryError> {
    let mut traj = DayTrajectory::empty(user, date);
    let mut prev_start = None;
    for (index, rec) in records.iter().enumerate() {
        if prev_start.is_some_and(|p| rec.start < p) {
            return Err(TrajectoryError::Unsorted(index));
        }
        prev_start = Some(rec.start);
        let found = rec.start.date();
        if found != date {
            return Err(TrajectoryError::DateMismatch {
                index,
                found,
                expected: date,
            });
        }
        push_event(&mut traj, rec.start.second_of_day(), rec.cell);
    }
    Ok(traj)
}

fn push_event(traj: &mut DayTrajectory, second: u32, cell: CellId) {
    let event = DayEvent { second, cell };
    if traj.events.last() == Some(&event) {
        return;
    }
    traj.events.push(event);

    let segments = &mut traj.segments;
    match segments.last_mut() {
        None => segments.push(StaySegment {
            cell,
            begin: second,
            end: DAY_SECONDS,
        }),
        Some(last) if last.cell == cell => {}
        Some(last) if last.begin == second => {
            traj.same_second_ties += 1;
            last.cell = cell;
            let n = segments.len();
            if n >= 2 && segments[n - 2].cell == cell {
                segments.pop();
                segments.last_mut().expect("n >= 2").end = DAY_SECONDS;
            }
        }
        Some(last) => {
            last.end = second;
            segments.push(StaySegment {
                cell,
                begin: second,
                end: DAY_SECONDS,
            });
        }
    }
}

/// Seconds spent in each cell inside `window`. A wrapping window takes its
/// evening part from `prev_day` and its morning part from `trajectory`.
pub fn dwell_by_cell(
    trajectory: &DayTrajectory,
    window: TimeWindow,
    prev_day: Option<&DayTrajectory>,
) -> Result<BTreeMap<CellId, u32>, TrajectoryError> {
    let mut dwell = BTreeMap::new();
    let mut add = |traj: &DayTrajectory, from: u32, to: u32| {
        for seg in &traj.segments {
            let overlap = seg.overlap(from, to);
            if overlap > 0 {
                *dwell.entry(seg.cell).or_insert(0) += overlap;
            }
        }
    };
    if window.wraps_midnight() {
        let prev = prev_day.ok_or(TrajectoryError::MissingPreviousDay(window))?;
        add(prev, window.start(), DAY_SECONDS);
        add(trajectory, 0, window.end());
    } else {
        add(trajectory, window.start(), window.end());
    }
    Ok(dwell)
}

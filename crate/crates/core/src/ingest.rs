//! Tower and traffic-record ingestion.
//!
//! Both inputs are plain CSV. Tower rows are strict: any malformed row aborts
//! the parse. Record rows are lenient: bad rows are skipped and tallied in a
//! [`RejectionReport`] so user counts downstream stay auditable.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;

use chrono::{Datelike, NaiveDate};
use serde::Serialize;
use thiserror::Error;

/// Days between 0001-01-01 (CE day 1) and 1970-01-01.
const EPOCH_DAYS_FROM_CE: i32 = 719_163;
pub const SECONDS_PER_DAY: i64 = 86_400;

pub const TOWER_HEADER: [&str; 3] = ["cell_id", "lat", "lon"];
pub const RECORD_HEADER: [&str; 4] = ["user_id", "cell_id", "start_time", "end_time"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("csv read failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header {
        found: Vec<String>,
        expected: Vec<&'static str>,
    },
    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("line {line}: duplicate cell_id `{cell_id}`")]
    DuplicateCell { line: u64, cell_id: String },
    #[error("tower file contains no towers")]
    NoTowers,
    #[error("invalid coordinate: {0}")]
    Coordinate(String),
}

/// Local civil time, in seconds since 1970-01-01T00:00:00 of the same
/// (DST-free) zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_epoch_seconds(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub fn from_date_seconds(date: NaiveDate, second_of_day: u32) -> Self {
        Timestamp(days_since_epoch(date) as i64 * SECONDS_PER_DAY + second_of_day as i64)
    }

    pub const fn epoch_seconds(self) -> i64 {
        self.0
    }

    pub fn date(self) -> NaiveDate {
        let days = self.0.div_euclid(SECONDS_PER_DAY) as i32;
        NaiveDate::from_num_days_from_ce_opt(days + EPOCH_DAYS_FROM_CE)
            .expect("timestamp within chrono's date range")
    }

    pub fn second_of_day(self) -> u32 {
        self.0.rem_euclid(SECONDS_PER_DAY) as u32
    }

    /// Parses the strict `YYYY-MM-DDTHH:MM:SS` form.
    pub fn parse(s: &str) -> Option<Timestamp> {
        let b = s.as_bytes();
        if b.len() != 19 || b[10] != b'T' {
            return None;
        }
        let days = parse_date_days(&b[..10])?;
        let secs = parse_clock(&b[11..])?;
        Some(Timestamp(days as i64 * SECONDS_PER_DAY + secs as i64))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}T{}", self.date().format("%Y-%m-%d"), ClockTime(self.second_of_day()))
    }
}

/// Seconds since local midnight, printed as `HH:MM:SS`. Values of a full day
/// or more print as `24:00:00` and beyond, which only arises for end-of-day
/// boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockTime(pub u32);

impl fmt::Display for ClockTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.0;
        write!(f, "{:02}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
    }
}

pub fn days_since_epoch(date: NaiveDate) -> i32 {
    date.num_days_from_ce() - EPOCH_DAYS_FROM_CE
}

fn digits(b: &[u8]) -> Option<u32> {
    let mut v = 0u32;
    for &c in b {
        if !c.is_ascii_digit() {
            return None;
        }
        v = v * 10 + (c - b'0') as u32;
    }
    Some(v)
}

fn parse_date_days(b: &[u8]) -> Option<i32> {
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return None;
    }
    let y = digits(&b[..4])? as i32;
    let m = digits(&b[5..7])?;
    let d = digits(&b[8..10])?;
    NaiveDate::from_ymd_opt(y, m, d).map(days_since_epoch)
}

fn parse_clock(b: &[u8]) -> Option<u32> {
    if b.len() != 8 || b[2] != b':' || b[5] != b':' {
        return None;
    }
    let h = digits(&b[..2])?;
    let m = digits(&b[3..5])?;
    let s = digits(&b[6..8])?;
    (h < 24 && m < 60 && s < 60).then_some(h * 3600 + m * 60 + s)
}

/// Parses timestamps while caching the most recent date prefix; record files
/// are dominated by long runs of the same day.
#[derive(Default)]
struct TimestampParser {
    last_date: [u8; 10],
    last_days: Option<i32>,
}

impl TimestampParser {
    fn parse(&mut self, b: &[u8]) -> Option<Timestamp> {
        if b.len() != 19 || b[10] != b'T' {
            return None;
        }
        let days = match self.last_days {
            Some(days) if b[..10] == self.last_date => days,
            _ => {
                let days = parse_date_days(&b[..10])?;
                self.last_date.copy_from_slice(&b[..10]);
                self.last_days = Some(days);
                days
            }
        };
        let secs = parse_clock(&b[11..])?;
        Some(Timestamp(days as i64 * SECONDS_PER_DAY + secs as i64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, IngestError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(IngestError::Coordinate(format!("latitude {lat} outside [-90, 90]")));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(IngestError::Coordinate(format!("longitude {lon} outside [-180, 180]")));
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Dense index of a tower inside its [`TowerSet`]. Indices follow the
/// lexicographic order of the cell ids, so comparing two `CellId`s compares
/// the underlying id strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CellId(pub u32);

impl CellId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellTower {
    pub cell_id: String,
    pub location: GeoPoint,
}

#[derive(Debug, Clone)]
pub struct TowerSet {
    towers: Vec<CellTower>,
    by_id: HashMap<String, CellId>,
}

impl TowerSet {
    /// Builds a set from towers in any order. Fails on empty input, empty ids
    /// or duplicate ids.
    pub fn new(mut towers: Vec<CellTower>) -> Result<Self, IngestError> {
        if towers.is_empty() {
            return Err(IngestError::NoTowers);
        }
        towers.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
        let mut by_id = HashMap::with_capacity(towers.len());
        for (i, t) in towers.iter().enumerate() {
            if t.cell_id.is_empty() {
                return Err(IngestError::Row {
                    line: 0,
                    reason: "empty cell_id".into(),
                });
            }
            if by_id.insert(t.cell_id.clone(), CellId(i as u32)).is_some() {
                return Err(IngestError::DuplicateCell {
                    line: 0,
                    cell_id: t.cell_id.clone(),
                });
            }
        }
        Ok(TowerSet { towers, by_id })
    }

    pub fn len(&self) -> usize {
        self.towers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.towers.is_empty()
    }

    pub fn lookup(&self, cell_id: &str) -> Option<CellId> {
        self.by_id.get(cell_id).copied()
    }

    pub fn get(&self, id: CellId) -> Option<&CellTower> {
        self.towers.get(id.index())
    }

    pub fn tower(&self, id: CellId) -> &CellTower {
        &self.towers[id.index()]
    }

    pub fn location(&self, id: CellId) -> GeoPoint {
        self.towers[id.index()].location
    }

    pub fn name(&self, id: CellId) -> &str {
        &self.towers[id.index()].cell_id
    }

    pub fn ids(&self) -> impl Iterator<Item = CellId> + '_ {
        (0..self.towers.len() as u32).map(CellId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (CellId, &CellTower)> {
        self.towers.iter().enumerate().map(|(i, t)| (CellId(i as u32), t))
    }
}

/// Reads the tower CSV (`cell_id,lat,lon`).
pub fn parse_towers<R: Read>(input: R) -> Result<TowerSet, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    check_header(reader.byte_headers()?, &TOWER_HEADER)?;

    let mut towers = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut row = csv::ByteRecord::new();
    while reader.read_byte_record(&mut row)? {
        let line = row.position().map_or(0, |p| p.line());
        let fail = |reason: String| IngestError::Row { line, reason };
        if row.len() != TOWER_HEADER.len() {
            return Err(fail(format!("expected 3 columns, found {}", row.len())));
        }
        let cell_id = std::str::from_utf8(&row[0])
            .map_err(|_| fail("cell_id is not valid UTF-8".into()))?
            .trim();
        if cell_id.is_empty() {
            return Err(fail("empty cell_id".into()));
        }
        let lat = parse_coordinate(&row[1]).ok_or_else(|| fail("unparsable latitude".into()))?;
        let lon = parse_coordinate(&row[2]).ok_or_else(|| fail("unparsable longitude".into()))?;
        let location = GeoPoint::new(lat, lon).map_err(|e| fail(e.to_string()))?;
        if seen.insert(cell_id.to_string(), line).is_some() {
            return Err(IngestError::DuplicateCell {
                line,
                cell_id: cell_id.to_string(),
            });
        }
        towers.push(CellTower {
            cell_id: cell_id.to_string(),
            location,
        });
    }
    TowerSet::new(towers)
}

fn parse_coordinate(field: &[u8]) -> Option<f64> {
    std::str::from_utf8(field).ok()?.trim().parse().ok()
}

fn check_header(found: &csv::ByteRecord, expected: &[&'static str]) -> Result<(), IngestError> {
    let matches = found.len() == expected.len()
        && found.iter().zip(expected).all(|(f, e)| f == e.as_bytes());
    if matches {
        Ok(())
    } else {
        Err(IngestError::Header {
            found: found.iter().map(|f| String::from_utf8_lossy(f).into_owned()).collect(),
            expected: expected.to_vec(),
        })
    }
}

/// Dense index of a user inside a [`RecordSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub u32);

impl UserId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficRecord {
    pub user: UserId,
    pub cell: CellId,
    pub start: Timestamp,
    pub end: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    WrongColumnCount,
    EmptyUserId,
    BadStartTime,
    BadEndTime,
    InvertedInterval,
    UnknownCell,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::WrongColumnCount => "wrong column count",
            RejectReason::EmptyUserId => "empty user id",
            RejectReason::BadStartTime => "bad start time",
            RejectReason::BadEndTime => "bad end time",
            RejectReason::InvertedInterval => "inverted interval",
            RejectReason::UnknownCell => "unknown cell",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RejectionReport {
    counts: BTreeMap<RejectReason, u64>,
}

impl RejectionReport {
    pub fn add(&mut self, reason: RejectReason) {
        *self.counts.entry(reason).or_default() += 1;
    }

    pub fn count(&self, reason: RejectReason) -> u64 {
        self.counts.get(&reason).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (RejectReason, u64)> + '_ {
        self.counts.iter().map(|(r, c)| (*r, *c))
    }

    /// `reason,count` CSV, one row per reason that occurred.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("reason,count\n");
        for (reason, count) in self.iter() {
            out.push_str(&format!("{reason},{count}\n"));
        }
        out
    }
}

/// Parsed traffic records with interned user ids.
#[derive(Debug, Clone, Default)]
pub struct RecordSet {
    users: Vec<String>,
    pub records: Vec<TrafficRecord>,
    pub rejections: RejectionReport,
    pub rows_read: u64,
}

impl RecordSet {
    pub fn user_name(&self, user: UserId) -> &str {
        &self.users[user.index()]
    }

    pub fn user_names(&self) -> &[String] {
        &self.users
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }
}

/// Reads the record CSV (`user_id,cell_id,start_time,end_time`). Rows that
/// fail validation are skipped and counted; only stream-level failures are
/// errors.
pub fn parse_records<R: Read>(input: R, towers: &TowerSet) -> Result<RecordSet, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    check_header(reader.byte_headers()?, &RECORD_HEADER)?;

    let mut set = RecordSet::default();
    let mut user_ids: HashMap<Vec<u8>, UserId> = HashMap::new();
    let mut ts = TimestampParser::default();
    let mut row = csv::ByteRecord::new();
    while reader.read_byte_record(&mut row)? {
        set.rows_read += 1;
        match parse_record_row(&row, towers, &mut ts) {
            Ok((user, cell, start, end)) => {
                let next = UserId(set.users.len() as u32);
                let user = match user_ids.get(user) {
                    Some(id) => *id,
                    None => {
                        user_ids.insert(user.to_vec(), next);
                        set.users.push(String::from_utf8_lossy(user).into_owned());
                        next
                    }
                };
                set.records.push(TrafficRecord {
                    user,
                    cell,
                    start,
                    end,
                });
            }
            Err(reason) => set.rejections.add(reason),
        }
    }
    Ok(set)
}

type ParsedRow<'r> = (&'r [u8], CellId, Timestamp, Option<Timestamp>);

fn parse_record_row<'r>(
    row: &'r csv::ByteRecord,
    towers: &TowerSet,
    ts: &mut TimestampParser,
) -> Result<ParsedRow<'r>, RejectReason> {
    if row.len() != RECORD_HEADER.len() {
        return Err(RejectReason::WrongColumnCount);
    }
    let user = row[0].trim_ascii();
    if user.is_empty() || std::str::from_utf8(user).is_err() {
        return Err(RejectReason::EmptyUserId);
    }
    let start = ts.parse(row[2].trim_ascii()).ok_or(RejectReason::BadStartTime)?;
    let end_field = row[3].trim_ascii();
    let end = if end_field.is_empty() {
        None
    } else {
        Some(ts.parse(end_field).ok_or(RejectReason::BadEndTime)?)
    };
    if matches!(end, Some(end) if end < start) {
        return Err(RejectReason::InvertedInterval);
    }
    let cell = std::str::from_utf8(row[1].trim_ascii())
        .ok()
        .and_then(|c| towers.lookup(c))
        .ok_or(RejectReason::UnknownCell)?;
    Ok((user, cell, start, end))
}

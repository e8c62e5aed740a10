//! Report bundle rendering and bundle-to-bundle comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::commute::Direction;
use crate::ingest::{ClockTime, RecordSet, TowerSet};
use crate::pipeline::{AnalysisConfig, CohortAnalysis, SCHEMA_VERSION};
use crate::stats::CohortStats;

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{0} is not valid JSON: {1}")]
    Json(String, serde_json::Error),
    #[error("schema version mismatch: {0} vs {1}")]
    SchemaMismatch(String, String),
    #[error("bad tolerance file: {0}")]
    Tolerance(String),
}

/// Files of one report, held in memory until written together.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportBundle {
    files: Vec<(String, Vec<u8>)>,
}

#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    config: &'a AnalysisConfig,
    ingest: IngestSummary,
    funnel: Vec<crate::pipeline::FunnelStage>,
    rejections: BTreeMap<&'static str, u64>,
    commute_misses: BTreeMap<String, u64>,
    same_second_ties: u64,
    stats: Option<&'a CohortStats>,
}

#[derive(Serialize)]
struct IngestSummary {
    rows_read: u64,
    accepted: u64,
    rejections: BTreeMap<&'static str, u64>,
}

impl ReportBundle {
    pub fn build(
        config: &AnalysisConfig,
        records: &RecordSet,
        towers: &TowerSet,
        analysis: &CohortAnalysis,
        stats: Option<&CohortStats>,
        dump_observations: bool,
    ) -> Result<Self, ReportError> {
        let mut bundle = ReportBundle::default();
        bundle.add("rejections.csv", records.rejections.to_csv());
        bundle.add("filter_funnel.csv", funnel_csv(analysis));
        if let Some(stats) = stats {
            bundle.add("table1_proportions.csv", table1_csv(stats));
            bundle.add("fig2_mean_time.csv", fig2_csv(stats));
            bundle.add("fig3_cdf.csv", fig3_csv(stats));
            bundle.add("fig4_histograms.csv", fig4_csv(stats));
            bundle.add("fig5_schedule.csv", fig5_csv(stats));
            bundle.add("table3_marchetti.csv", table3_csv(stats));
        }
        if dump_observations {
            bundle.add("observations.csv", observations_csv(records, analysis));
        }
        let _ = towers;
        let summary = Summary {
            schema_version: SCHEMA_VERSION,
            config,
            ingest: IngestSummary {
                rows_read: records.rows_read,
                accepted: records.records.len() as u64,
                rejections: records.rejections.iter().map(|(r, c)| (r.as_str(), c)).collect(),
            },
            funnel: analysis.funnel.stages(),
            rejections: analysis.funnel.rejections(),
            commute_misses: analysis
                .misses
                .iter()
                .map(|((d, m), c)| (format!("{d}: {}", m.as_str()), *c))
                .collect(),
            same_second_ties: analysis.same_second_ties,
            stats,
        };
        let mut json = serde_json::to_vec_pretty(&summary).expect("summary serialises");
        json.push(b'\n');
        bundle.files.push((SUMMARY_FILE.to_string(), json));
        Ok(bundle)
    }

    fn add(&mut self, name: &str, body: String) {
        self.push(name, body.into_bytes());
    }

    pub fn push(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn file_names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }
}

/// Writes every bundle file, then the trailing file. On failure the files
/// already written are removed again.
pub fn write_files(dir: &Path, bundle: &ReportBundle, last: (&str, &[u8])) -> Result<(), ReportError> {
    let io_err = |path: &Path, source| ReportError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    let files = bundle.files.iter().map(|(n, b)| (n.as_str(), b.as_slice())).chain([last]);
    for (name, body) in files {
        let path = dir.join(name);
        if let Err(e) = fs::write(&path, body) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(io_err(&path, e));
        }
        written.push(path);
    }
    Ok(())
}

fn funnel_csv(analysis: &CohortAnalysis) -> String {
    let mut out = String::from("stage,users_remaining\n");
    for s in analysis.funnel.stages() {
        let _ = writeln!(out, "{},{}", s.stage, s.users_remaining);
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn table1_csv(stats: &CohortStats) -> String {
    let mut out = String::from("group,users,proportion\n");
    for g in &stats.group_proportions {
        let _ = writeln!(out, "{},{},{}", g.group, g.users, g.proportion);
    }
    out
}

pub fn fig2_csv(stats: &CohortStats) -> String {
    let mut out = String::from("direction,bin_lower_km,bin_upper_km,bin_center_km,mean_h,users\n");
    for d in Direction::BOTH {
        for b in stats.mean_time_by_bin.get(d) {
            let _ = writeln!(out, "{d},{},{},{},{},{}", b.lower_km, b.upper_km, b.center_km(), b.mean_h, b.users);
        }
    }
    out
}

pub fn fig3_csv(stats: &CohortStats) -> String {
    let mut out = String::from("direction,hours,cum_fraction\n");
    for d in Direction::BOTH {
        for p in stats.time_cdf.get(d) {
            let _ = writeln!(out, "{d},{},{}", p.hours, p.cum_fraction);
        }
    }
    out
}

pub fn fig4_csv(stats: &CohortStats) -> String {
    let mut out = String::from("direction,group,band_lower_h,band_upper_h,users,mass\n");
    for d in Direction::BOTH {
        for h in stats.group_histograms.get(d) {
            for b in &h.bands {
                let _ = writeln!(out, "{d},{},{},{},{},{}", h.group, b.lower_h, b.upper_h, b.users, b.mass);
            }
        }
    }
    out
}

pub fn fig5_csv(stats: &CohortStats) -> String {
    let mut out =
        String::from("direction,range_lower_h,range_upper_h,observations,mean_depart_s,mean_arrive_s,mean_depart,mean_arrive\n");
    for d in Direction::BOTH {
        for r in stats.schedule_table.get(d) {
            let _ = writeln!(
                out,
                "{d},{},{},{},{},{},{},{}",
                r.lower_h,
                r.upper_h,
                r.observations,
                r.mean_depart_s,
                r.mean_arrive_s,
                ClockTime(r.mean_depart_s.round() as u32),
                ClockTime(r.mean_arrive_s.round() as u32)
            );
        }
    }
    out
}

pub fn table3_csv(stats: &CohortStats) -> String {
    let m = &stats.marchetti;
    let mut out = String::from("statistic,value\n");
    let _ = writeln!(out, "threshold_km,{}", m.threshold_km);
    let _ = writeln!(out, "morning_constant_h,{}", opt(m.morning_constant_h));
    let _ = writeln!(out, "night_constant_h,{}", opt(m.night_constant_h));
    let _ = writeln!(out, "users_above_threshold,{}", m.users_above_threshold);
    let _ = writeln!(out, "daily_budget_h,{}", opt(m.daily_budget_h));
    let _ = writeln!(out, "budget_users,{}", m.budget_users);
    let _ = writeln!(out, "mean_morning_h,{}", opt(m.mean_morning_h));
    let _ = writeln!(out, "mean_night_h,{}", opt(m.mean_night_h));
    out
}

fn observations_csv(records: &RecordSet, analysis: &CohortAnalysis) -> String {
    let mut out = String::from("user_id,date,direction,depart,arrive,duration_h,distance_km\n");
    for o in analysis.outcomes.iter().flat_map(|o| &o.observations) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            records.user_name(o.user),
            o.date,
            o.direction,
            o.depart,
            o.arrive,
            o.duration_h(),
            o.distance_km
        );
    }
    out
}

/// Absolute tolerances keyed by dotted path prefixes inside `stats`
/// (for example `marchetti` or `time_cdf.morning`). The longest matching
/// prefix wins; `default` covers everything else. An infinite tolerance
/// also accepts structural differences.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub default: f64,
    pub statistics: BTreeMap<String, f64>,
}

impl Tolerances {
    pub fn from_toml(text: &str) -> Result<Self, ReportError> {
        let tol: Tolerances = toml::from_str(text).map_err(|e| ReportError::Tolerance(e.to_string()))?;
        if tol.statistics.values().chain([&tol.default]).any(|t| t.is_nan() || *t < 0.0) {
            return Err(ReportError::Tolerance("tolerances must be non-negative".into()));
        }
        Ok(tol)
    }

    pub fn for_path(&self, path: &str) -> f64 {
        self.statistics
            .iter()
            .filter(|(prefix, _)| {
                path == prefix.as_str()
                    || path
                        .strip_prefix(prefix.as_str())
                        .is_some_and(|rest| rest.starts_with('.') || rest.starts_with('['))
            })
            .max_by_key(|(prefix, _)| prefix.len())
            .map_or(self.default, |(_, t)| *t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatisticDiff {
    pub statistic: String,
    pub leaves: usize,
    pub max_abs_diff: f64,
    pub worst_path: String,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub statistics: Vec<StatisticDiff>,
    pub pass: bool,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("statistic,leaves,max_abs_diff,failures,worst_path,status\n");
        for s in &self.statistics {
            let status = if s.failures == 0 { "pass" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{status}",
                s.statistic, s.leaves, s.max_abs_diff, s.failures, s.worst_path
            );
        }
        out
    }
}

fn flatten(value: &Value, path: String, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                flatten(v, p, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(v, format!("{path}[{i}]"), out);
            }
        }
        leaf => {
            out.insert(path, leaf.clone());
        }
    }
}

fn statistic_of(path: &str) -> String {
    let head = path.split(['.', '[']).next().unwrap_or(path);
    let rest = &path[head.len()..];
    match rest.strip_prefix('.').and_then(|r| r.split(['.', '[']).next()) {
        Some(d @ ("morning" | "night")) => format!("{head}.{d}"),
        _ => head.to_string(),
    }
}

/// Compares the `stats` sections of two `summary.json` documents leaf by leaf.
pub fn compare_reports(a: &Value, b: &Value, tol: &Tolerances) -> Result<ComparisonReport, ReportError> {
    let version = |v: &Value| v.get("schema_version").cloned().unwrap_or(Value::Null);
    let (va, vb) = (version(a), version(b));
    if va.is_null() || va != vb {
        return Err(ReportError::SchemaMismatch(va.to_string(), vb.to_string()));
    }
    let mut left = BTreeMap::new();
    let mut right = BTreeMap::new();
    flatten(a.get("stats").unwrap_or(&Value::Null), String::new(), &mut left);
    flatten(b.get("stats").unwrap_or(&Value::Null), String::new(), &mut right);

    let mut groups: BTreeMap<String, StatisticDiff> = BTreeMap::new();
    let paths: std::collections::BTreeSet<&String> = left.keys().chain(right.keys()).collect();
    for path in paths {
        let tolerance = tol.for_path(path);
        let (diff, ok) = match (left.get(path), right.get(path)) {
            (Some(x), Some(y)) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => {
                    let d = (x - y).abs();
                    (d, d <= tolerance)
                }
                _ => {
                    let same = x == y;
                    (if same { 0.0 } else { f64::INFINITY }, same || tolerance.is_infinite())
                }
            },
            _ => (f64::INFINITY, tolerance.is_infinite()),
        };
        let key = statistic_of(path);
        let entry = groups.entry(key.clone()).or_insert_with(|| StatisticDiff {
            statistic: key,
            leaves: 0,
            max_abs_diff: 0.0,
            worst_path: String::new(),
            failures: 0,
        });
        entry.leaves += 1;
        if !ok {
            entry.failures += 1;
        }
        if diff > entry.max_abs_diff || entry.worst_path.is_empty() {
            entry.max_abs_diff = entry.max_abs_diff.max(diff);
            entry.worst_path = path.clone();
        }
    }
    let statistics: Vec<StatisticDiff> = groups.into_values().collect();
    let pass = statistics.iter().all(|s| s.failures == 0);
    Ok(ComparisonReport { statistics, pass })
}

/// Loads a `summary.json`, given either the file or its report directory.
pub fn load_summary(path: &Path) -> Result<Value, ReportError> {
    let file = if path.is_dir() { path.join(SUMMARY_FILE) } else { path.to_path_buf() };
    let text = fs::read(&file).map_err(|source| ReportError::Io {
        path: file.display().to_string(),
        source,
    })?;
    serde_json::from_slice(&text).map_err(|e| ReportError::Json(file.display().to_string(), e))
}

/// JSON form of a stats block wrapped like a `summary.json`, for comparing
/// in-memory results.
pub fn summary_value(stats: &CohortStats) -> Value {
    serde_json::json!({ "schema_version": SCHEMA_VERSION, "stats": stats })
}

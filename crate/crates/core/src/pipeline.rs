//! End-to-end orchestration: ingest, tower statistics, per-user anchor and
//! commute inference, cohort statistics and the report bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anchors::{filter_active_days, infer_anchors, AnchorRejection, AnchorWindows, FilterConfig};
use crate::commute::{
    commute_distance, morning_commute, night_commute, summarize_user, CommuteMiss, CommuteObservation,
    CommuteWindows, Direction, UserCommuteSummary,
};
use crate::geo::{isolated_from_nn, nearest_neighbor_distances, IsolationRadius};
use crate::ingest::{parse_records, parse_towers, CellId, RecordSet, TowerSet, TrafficRecord, UserId};
use crate::report::{self, ReportBundle};
use crate::stats::{compute_cohort_stats, CohortStats, StatsOptions};
use crate::trajectory::{build_day_trajectory, DayTrajectory, TrajectoryError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Ingest,
    Geo,
    Trajectory,
    Stats,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Geo => "geo",
            Stage::Trajectory => "trajectory",
            Stage::Stats => "stats",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, err: impl fmt::Display) -> Self {
        PipelineError {
            stage,
            message: err.to_string(),
        }
    }
}

/// Every tunable of the analysis proper. Paths and worker counts live in
/// [`PipelineConfig`] and are kept out of report bundles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub filter: FilterConfig,
    pub anchors: AnchorWindows,
    pub commute: CommuteWindows,
    pub stats: StatsOptions,
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: &dyn fmt::Display| PipelineError::new(Stage::Config, e);
        self.filter.validate().map_err(|e| cfg(&e))?;
        self.anchors.validate().map_err(|e| cfg(&e))?;
        self.commute.validate().map_err(|e| cfg(&e))?;
        self.stats.validate().map_err(|e| cfg(&e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub records: PathBuf,
    pub towers: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub threads: usize,
    pub dump_observations: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            threads: 1,
            dump_observations: false,
        }
    }
}

/// The `analyze` config file: `[paths]`, `[run]` and the analysis sections
/// `[filter]`, `[anchors]`, `[commute]`, `[stats]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub run: RunOptions,
    #[serde(flatten)]
    pub analysis: AnalysisConfig,
}

impl PipelineConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Config, format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.records, &mut cfg.paths.towers, &mut cfg.paths.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::new(Stage::Config, e))?;
        cfg.analysis.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Terminal state of one user in the filtering cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UserFate {
    Inactive,
    Rejected(AnchorRejection),
    NoObservations,
    Effective,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserOutcome {
    pub user: UserId,
    pub fate: UserFate,
    pub anchors: Option<(CellId, CellId)>,
    pub summary: Option<UserCommuteSummary>,
    pub observations: Vec<CommuteObservation>,
    pub misses: BTreeMap<(Direction, CommuteMiss), u64>,
    pub same_second_ties: u64,
}

impl UserOutcome {
    fn ended(user: UserId, fate: UserFate, ties: u64) -> Self {
        UserOutcome {
            user,
            fate,
            anchors: None,
            summary: None,
            observations: Vec::new(),
            misses: BTreeMap::new(),
            same_second_ties: ties,
        }
    }
}

/// Shared read-only state for per-user analysis.
pub struct AnalysisContext<'a> {
    pub towers: &'a TowerSet,
    pub isolated: BTreeSet<CellId>,
    pub config: &'a AnalysisConfig,
}

impl<'a> AnalysisContext<'a> {
    pub fn new(towers: &'a TowerSet, config: &'a AnalysisConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let radius = IsolationRadius::new(config.filter.isolation_radius_km).map_err(|e| PipelineError::new(Stage::Config, e))?;
        let isolated = if towers.len() < 2 {
            // A lone tower has no neighbour at all.
            towers.ids().collect()
        } else {
            let nn = nearest_neighbor_distances(towers).map_err(|e| PipelineError::new(Stage::Geo, e))?;
            isolated_from_nn(&nn, radius)
        };
        Ok(AnalysisContext { towers, isolated, config })
    }

    /// Runs the filtering cascade and commute estimation for one user.
    /// `records` must all belong to `user` and be sorted by start time.
    pub fn analyze_user(&self, user: UserId, records: &[TrafficRecord]) -> Result<UserOutcome, TrajectoryError> {
        let days = split_days(records);
        let counts = days.iter().map(|(date, recs)| ((user, *date), recs.len() as u32));
        let active = filter_active_days(counts, &self.config.filter);
        let Some(qualifying) = active.get(&user) else {
            return Ok(UserOutcome::ended(user, UserFate::Inactive, 0));
        };

        let mut trajectories: BTreeMap<NaiveDate, DayTrajectory> = BTreeMap::new();
        let wanted: BTreeSet<NaiveDate> = qualifying
            .iter()
            .flat_map(|d| [Some(*d), d.pred_opt()])
            .flatten()
            .collect();
        let mut ties = 0u64;
        for (date, recs) in &days {
            if wanted.contains(date) {
                let traj = build_day_trajectory(user, *date, recs)?;
                ties += traj.same_second_ties as u64;
                trajectories.insert(*date, traj);
            }
        }

        let anchors = match infer_anchors(user, &trajectories, qualifying, &self.config.anchors, &self.isolated) {
            Ok(a) => a,
            Err(reason) => return Ok(UserOutcome::ended(user, UserFate::Rejected(reason), ties)),
        };
        let distance_km = commute_distance(&anchors, self.towers).expect("anchors come from this tower set");
        let mut outcome = UserOutcome {
            anchors: Some((anchors.home, anchors.work)),
            ..UserOutcome::ended(user, UserFate::Effective, ties)
        };
        if anchors.home == anchors.work {
            // Same tower: kept at distance 0 without commute times.
            outcome.summary = Some(summarize_user(&[], distance_km));
            return Ok(outcome);
        }
        let windows = &self.config.commute;
        for date in qualifying {
            let traj = &trajectories[date];
            for (direction, result) in [
                (Direction::Morning, morning_commute(traj, &anchors, windows, distance_km)),
                (Direction::Night, night_commute(traj, &anchors, windows, distance_km)),
            ] {
                match result {
                    Ok(obs) => outcome.observations.push(obs),
                    Err(miss) => *outcome.misses.entry((direction, miss)).or_default() += 1,
                }
            }
        }
        if outcome.observations.is_empty() {
            outcome.fate = UserFate::NoObservations;
        } else {
            outcome.summary = Some(summarize_user(&outcome.observations, distance_km));
        }
        Ok(outcome)
    }
}

fn split_days(records: &[TrafficRecord]) -> Vec<(NaiveDate, &[TrafficRecord])> {
    let mut days = Vec::new();
    let mut start = 0;
    while start < records.len() {
        let day_start = records[start].start.epoch_seconds().div_euclid(86_400);
        let len = records[start..]
            .iter()
            .position(|r| r.start.epoch_seconds().div_euclid(86_400) != day_start)
            .unwrap_or(records.len() - start);
        days.push((records[start].start.date(), &records[start..start + len]));
        start += len;
    }
    days
}

/// Users remaining after each stage of the cascade.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Funnel {
    pub total_users: u64,
    pub inactive: u64,
    pub no_dominant_home: u64,
    pub no_dominant_work: u64,
    pub isolated_anchor: u64,
    pub no_observations: u64,
    pub effective: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FunnelStage {
    pub stage: &'static str,
    pub users_remaining: u64,
}

impl Funnel {
    pub fn record(&mut self, fate: UserFate) {
        self.total_users += 1;
        match fate {
            UserFate::Inactive => self.inactive += 1,
            UserFate::Rejected(AnchorRejection::NoDominantHome) => self.no_dominant_home += 1,
            UserFate::Rejected(AnchorRejection::NoDominantWork) => self.no_dominant_work += 1,
            UserFate::Rejected(AnchorRejection::IsolatedAnchor) => self.isolated_anchor += 1,
            UserFate::NoObservations => self.no_observations += 1,
            UserFate::Effective => self.effective += 1,
        }
    }

    pub fn stages(&self) -> Vec<FunnelStage> {
        let mut left = self.total_users;
        let mut out = vec![FunnelStage {
            stage: "users in records",
            users_remaining: left,
        }];
        for (stage, dropped) in [
            ("active days", self.inactive),
            ("dominant home", self.no_dominant_home),
            ("dominant work", self.no_dominant_work),
            ("non-isolated anchors", self.isolated_anchor),
            ("commute observed", self.no_observations),
        ] {
            left -= dropped;
            out.push(FunnelStage {
                stage,
                users_remaining: left,
            });
        }
        out
    }

    pub fn rejections(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("inactive", self.inactive),
            ("no dominant home", self.no_dominant_home),
            ("no dominant work", self.no_dominant_work),
            ("isolated anchor", self.isolated_anchor),
            ("no commute observations", self.no_observations),
        ])
    }
}

/// Everything learned about a cohort, in user order.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortAnalysis {
    pub outcomes: Vec<UserOutcome>,
    pub funnel: Funnel,
    pub misses: BTreeMap<(Direction, CommuteMiss), u64>,
    pub same_second_ties: u64,
}

impl CohortAnalysis {
    pub fn summaries(&self) -> Vec<UserCommuteSummary> {
        self.outcomes.iter().filter_map(|o| o.summary.clone()).collect()
    }

    pub fn observations(&self) -> Vec<CommuteObservation> {
        self.outcomes.iter().flat_map(|o| o.observations.iter().cloned()).collect()
    }

    pub fn outcome(&self, user: UserId) -> Option<&UserOutcome> {
        self.outcomes.get(user.index()).filter(|o| o.user == user)
    }

    pub fn stats(&self, opts: &StatsOptions) -> Result<Option<CohortStats>, PipelineError> {
        if self.funnel.effective == 0 {
            return Ok(None);
        }
        compute_cohort_stats(&self.summaries(), &self.observations(), opts)
            .map(Some)
            .map_err(|e| PipelineError::new(Stage::Stats, e))
    }
}

/// Analyses users `0..n_users` in parallel on the current rayon pool.
/// `records_of` supplies each user's time-sorted records; it may build them
/// on the fly.
pub fn analyze_cohort<F, R>(ctx: &AnalysisContext<'_>, n_users: usize, records_of: F) -> Result<CohortAnalysis, PipelineError>
where
    F: Fn(UserId) -> R + Sync,
    R: AsRef<[TrafficRecord]>,
{
    let outcomes = (0..n_users as u32)
        .into_par_iter()
        .map(|u| ctx.analyze_user(UserId(u), records_of(UserId(u)).as_ref()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::new(Stage::Trajectory, e))?;

    let mut funnel = Funnel::default();
    let mut misses = BTreeMap::new();
    let mut same_second_ties = 0;
    for o in &outcomes {
        funnel.record(o.fate);
        same_second_ties += o.same_second_ties;
        for (k, v) in &o.misses {
            *misses.entry(*k).or_default() += v;
        }
    }
    Ok(CohortAnalysis {
        outcomes,
        funnel,
        misses,
        same_second_ties,
    })
}

/// Sorts records by user then start time (stable, so file order breaks ties)
/// and returns each user's slice bounds.
pub fn group_by_user(set: &mut RecordSet) -> Vec<std::ops::Range<usize>> {
    set.records.sort_by_key(|r| (r.user, r.start));
    let mut ranges = vec![0..0; set.n_users()];
    let mut start = 0;
    while start < set.records.len() {
        let user = set.records[start].user;
        let len = set.records[start..].partition_point(|r| r.user == user);
        ranges[user.index()] = start..start + len;
        start += len;
    }
    ranges
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    NoEffectiveUsers,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputDigests {
    pub records_sha256: String,
    pub towers_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowCounts {
    pub read: u64,
    pub accepted: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub status: RunStatus,
    pub config: PipelineConfig,
    pub input_digests: InputDigests,
    pub rows: RowCounts,
    pub funnel: Funnel,
    pub wall_time_s: f64,
    pub records_per_second: f64,
    pub artifacts: Vec<String>,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs the whole pipeline and writes the report bundle plus
/// `run_manifest.json` into `cfg.paths.out`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let started = Instant::now();
    cfg.analysis.validate()?;
    let threads = cfg.run.threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::new(Stage::Config, e))?;

    let read = |p: &Path| fs::read(p).map_err(|e| PipelineError::new(Stage::Ingest, format!("{}: {e}", p.display())));
    let tower_bytes = read(&cfg.paths.towers)?;
    let record_bytes = read(&cfg.paths.records)?;
    let input_digests = InputDigests {
        records_sha256: sha256_hex(&record_bytes),
        towers_sha256: sha256_hex(&tower_bytes),
    };
    let towers = parse_towers(tower_bytes.as_slice()).map_err(|e| PipelineError::new(Stage::Ingest, e))?;
    let mut records =
        parse_records(record_bytes.as_slice(), &towers).map_err(|e| PipelineError::new(Stage::Ingest, e))?;
    drop(record_bytes);
    let rows = RowCounts {
        read: records.rows_read,
        accepted: records.records.len() as u64,
        rejected: records.rejections.total(),
    };

    let ctx = AnalysisContext::new(&towers, &cfg.analysis)?;
    let (analysis, stats) = pool.install(|| {
        let ranges = group_by_user(&mut records);
        let analysis = analyze_cohort(&ctx, records.n_users(), |u| &records.records[ranges[u.index()].clone()])?;
        let stats = analysis.stats(&cfg.analysis.stats)?;
        Ok::<_, PipelineError>((analysis, stats))
    })?;

    let bundle = ReportBundle::build(&cfg.analysis, &records, &towers, &analysis, stats.as_ref(), cfg.run.dump_observations)
        .map_err(|e| PipelineError::new(Stage::Report, e))?;
    let status = if stats.is_some() {
        RunStatus::Completed
    } else {
        RunStatus::NoEffectiveUsers
    };
    let wall_time_s = started.elapsed().as_secs_f64();
    let mut manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        status,
        config: cfg.clone(),
        input_digests,
        rows: rows.clone(),
        funnel: analysis.funnel.clone(),
        wall_time_s,
        records_per_second: rows.read as f64 / wall_time_s.max(1e-9),
        artifacts: bundle.file_names(),
    };
    manifest.artifacts.push(MANIFEST_FILE.to_string());
    let manifest_json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    report::write_files(&cfg.paths.out, &bundle, (MANIFEST_FILE, &manifest_json))
        .map_err(|e| PipelineError::new(Stage::Report, e))?;
    Ok(manifest)
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use commute_core::geo::{nearest_neighbor_stats, DEFAULT_BANDS_KM};
use commute_core::ingest::parse_towers;
use commute_core::pipeline::{run_pipeline, PipelineConfig, RunStatus};
use commute_core::report::{compare_reports, load_summary, write_files, ReportBundle, Tolerances};
use commute_core::synth::{SynthConfig, SyntheticCohort, SYNTH_MANIFEST_FILE};

const EXIT_EMPTY: u8 = 2;

#[derive(Parser)]
#[command(name = "commute", version, about = "Commute time and distance statistics from cell-tower traffic records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline described by a config file.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; overrides the config file.
        #[arg(long)]
        threads: Option<usize>,
        /// Also write every daily commute observation.
        #[arg(long)]
        dump_observations: bool,
    },
    /// Generate a synthetic cohort with ground truth.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest-neighbour distances and their band distribution.
    TowersStats {
        #[arg(long)]
        towers: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Band edges in km, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BANDS_KM)]
        bands: Vec<f64>,
    },
    /// Compare the statistics of two report bundles.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Tolerance file (TOML); exact comparison when omitted.
        #[arg(long)]
        tol: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Analyze {
            config,
            threads,
            dump_observations,
        } => analyze(&config, threads, dump_observations),
        Command::Synth { config, out } => synth(&config, &out).map(|_| 0),
        Command::TowersStats { towers, out, bands } => towers_stats(&towers, &out, &bands).map(|_| 0),
        Command::Compare { a, b, tol } => compare(&a, &b, tol.as_deref()),
    }
}

fn analyze(config: &Path, threads: Option<usize>, dump_observations: bool) -> Result<u8> {
    let mut cfg = PipelineConfig::load(config)?;
    if let Some(t) = threads {
        cfg.run.threads = t;
    }
    cfg.run.dump_observations |= dump_observations;
    let manifest = run_pipeline(&cfg)?;
    let f = &manifest.funnel;
    eprintln!(
        "{} rows, {} users, {} effective, {:.0} records/s",
        manifest.rows.read, f.total_users, f.effective, manifest.records_per_second
    );
    if manifest.status == RunStatus::NoEffectiveUsers {
        eprintln!("no effective users; see filter_funnel.csv in {}", cfg.paths.out.display());
        return Ok(EXIT_EMPTY);
    }
    Ok(0)
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = SynthConfig::from_toml(&text)?;
    let cohort = SyntheticCohort::generate(&cfg)?;
    let towers = cohort.towers_csv().as_bytes().to_vec();
    let records = cohort.records_csv();
    let truth = cohort.ground_truth_csv().into_bytes();
    let files = [("towers.csv", &towers[..]), ("records.csv", &records[..]), ("ground_truth.csv", &truth[..])];
    let manifest = cohort.manifest(&files);
    let mut bundle = ReportBundle::default();
    for (name, bytes) in files {
        bundle.push(name, bytes.to_vec());
    }
    write_files(out, &bundle, (SYNTH_MANIFEST_FILE, &manifest))?;
    eprintln!("{} agents, {} towers written to {}", cohort.n_agents(), cohort.towers.len(), out.display());
    Ok(())
}

fn towers_stats(towers: &Path, out: &Path, bands: &[f64]) -> Result<()> {
    let bytes = fs::read(towers).with_context(|| format!("reading {}", towers.display()))?;
    let set = parse_towers(bytes.as_slice())?;
    let stats = nearest_neighbor_stats(&set, bands)?;
    let mut bundle = ReportBundle::default();
    bundle.push("tower_nn.csv", stats.nn_csv(&set).into_bytes());
    write_files(out, &bundle, ("tower_nn_cdf.csv", stats.cdf_csv().as_bytes()))?;
    Ok(())
}

fn compare(a: &Path, b: &Path, tol: Option<&Path>) -> Result<u8> {
    let tolerances = match tol {
        Some(p) => Tolerances::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Tolerances::default(),
    };
    let report = compare_reports(&load_summary(a)?, &load_summary(b)?, &tolerances)?;
    print!("{}", report.to_csv());
    if report.statistics.is_empty() {
        bail!("neither report carries statistics");
    }
    if report.pass {
        println!("verdict: PASS");
        Ok(0)
    } else {
        println!("verdict: FAIL");
        Ok(1)
    }
}

//! Command-line entry point: `serve`, `simulate` and `report`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use coursebot_core::analytics::{export_report, write_report, ReportDocument};
use coursebot_core::course::ingest_course_data;
use coursebot_core::gateway::{parse_scenario, Harness};
use coursebot_core::rate_limit::LimiterConfig;
use coursebot_core::sim::{
    epoch, generate_course, simulate_to_dir, validate_params, BehaviorModel, SimParams, TRANSCRIPT_FILE,
};
use coursebot_core::store::DataStore;

use crate::config::{ApiConfig, Overrides, DATA_DIR_ENV};
use crate::http::{router, AppState};
use crate::service::{system_clock, Service, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "coursebot", version, about = "Course-interaction chat bot engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the guild event loop and the instructor HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Simulate a semester into a data directory.
    Simulate {
        #[arg(long)]
        weeks: u32,
        #[arg(long)]
        students: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "sim-data")]
        out: PathBuf,
        /// Play this scenario file against the generated course instead of
        /// the synthetic semester.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Compute the analytics report for a data directory.
    Report {
        #[arg(long, env = DATA_DIR_ENV)]
        data_dir: PathBuf,
        /// Defaults to `<data-dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Serve { config, port, data_dir } => serve(&config, Overrides::from_env(port, data_dir)),
        Command::Simulate {
            weeks,
            students,
            seed,
            out,
            scenario,
        } => match scenario {
            Some(path) => play(SimParams { weeks, students, seed }, &path, &out),
            None => simulate(SimParams { weeks, students, seed }, &out),
        },
        Command::Report { data_dir, out } => {
            let out = out.unwrap_or_else(|| data_dir.join("report"));
            report(&data_dir, &out).map(|doc| print!("{}", summary(&doc, &out)))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn simulate(params: SimParams, out: &Path) -> anyhow::Result<()> {
    let model = BehaviorModel::default();
    print!("{}", model.header(&params));
    let outcome = simulate_to_dir(&params, &model, out)?;
    let c = &outcome.counts;
    println!("data directory: {}", out.display());
    println!("triggers fired:       {}", c.triggers_fired);
    println!("surveys launched:     {}", c.surveys_launched);
    println!("survey answers:       {}", c.survey_answers);
    println!("surveys completed:    {}", c.surveys_completed);
    println!("attendance recorded:  {}", c.attendance_recorded);
    println!("transcript entries:   {}", outcome.transcript.len());
    Ok(())
}

/// Play a scenario file from the sim epoch and write records, course data and
/// the transcript under `out`.
fn play(params: SimParams, scenario: &Path, out: &Path) -> anyhow::Result<()> {
    validate_params(&params)?;
    let text = fs::read_to_string(scenario).with_context(|| format!("reading scenario {}", scenario.display()))?;
    let steps = parse_scenario(&text).with_context(|| format!("parsing scenario {}", scenario.display()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let course = generate_course(&params);
    let store = DataStore::new(out);
    fs::write(store.course_path(), course.to_json() + "\n").with_context(|| format!("writing {}", store.course_path().display()))?;
    let mut harness = Harness::new(course, Arc::new(store), LimiterConfig::default(), epoch())?;
    harness.run_script(&steps)?;
    harness.settle()?;
    let transcript = out.join(TRANSCRIPT_FILE);
    fs::write(&transcript, harness.transcript().to_jsonl()).with_context(|| format!("writing {}", transcript.display()))?;
    println!("data directory: {}", out.display());
    println!("scenario steps:       {}", steps.len());
    println!("transcript entries:   {}", harness.transcript().len());
    Ok(())
}

/// Export the report for `data_dir` and write it under `out`.
pub fn report(data_dir: &Path, out: &Path) -> anyhow::Result<ReportDocument> {
    fs::read_dir(data_dir).with_context(|| format!("cannot read data directory {}", data_dir.display()))?;
    let store = DataStore::new(data_dir);
    let course_path = store.course_path();
    let course = if course_path.is_file() {
        let text = fs::read_to_string(&course_path).with_context(|| format!("reading {}", course_path.display()))?;
        Some(ingest_course_data(&text).with_context(|| format!("validating {}", course_path.display()))?)
    } else {
        None
    };
    let doc = export_report(&store, course.as_ref())?;
    write_report(&doc, out)?;
    Ok(doc)
}

fn summary(doc: &ReportDocument, out: &Path) -> String {
    let mut s = format!(
        "report written to {}\ndistributions: {}\npaired comparisons: {}\ncorrelations: {}\nattendance activities: {}\n",
        out.display(),
        doc.distributions.len(),
        doc.paired_comparisons.len(),
        doc.correlations.len(),
        doc.attendance.len()
    );
    for c in &doc.correlations {
        match (&c.result, &c.error) {
            (Some(r), _) => s.push_str(&format!("  {}: rho={:.4} n={}\n", c.id, r.rho, r.n)),
            (None, Some(e)) => s.push_str(&format!("  {}: {}\n", c.id, e)),
            (None, None) => {}
        }
    }
    s
}

fn serve(config_path: &Path, overrides: Overrides) -> anyhow::Result<()> {
    let config = ApiConfig::load(config_path, &overrides)?;
    let text = fs::read_to_string(&config.course_data)
        .with_context(|| format!("reading course data {}", config.course_data.display()))?;
    let course = ingest_course_data(&text)?;
    let data_dir = config.data_dir().to_path_buf();
    fs::create_dir_all(&data_dir).with_context(|| format!("creating {}", data_dir.display()))?;

    let service = Service::start(
        ServiceConfig {
            course,
            data_dir,
            limiter: config.limiter.clone(),
            catch_up: config.catch_up,
            tick: Duration::from_millis(config.tick_ms),
        },
        system_clock(),
    )?;
    let app = router(AppState {
        service: service.clone(),
        token: Arc::from(config.token()),
    });

    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    let served = runtime.block_on(async {
        let listener = match tokio::net::TcpListener::bind(("0.0.0.0", config.port)).await {
            Ok(l) => l,
            Err(e) => bail!("BIND_FAILURE: port {}: {e}", config.port),
        };
        tracing::info!(port = config.port, "listening");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
                tracing::info!("shutting down");
            })
            .await
            .context("serving HTTP")
    });
    service.shutdown();
    served
}

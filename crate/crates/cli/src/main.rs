//! `mcran` command-line front end.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use mcran::positioning::percentile_f64;
use mcran::scenario::{self, FixRecord, RunError, Scenario, ScenarioError};

#[derive(Parser)]
#[command(
    name = "mcran",
    version,
    about = "Mission-critical RAN scenario simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenarios and write one JSON report per (scenario, seed).
    Run {
        /// Scenario file; repeat to run several.
        #[arg(long, required = true)]
        scenario: Vec<PathBuf>,
        /// Seed; defaults to the scenario's own.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seeds, run in parallel.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, env = "MCRAN_OUT_DIR", default_value = "out")]
        out: PathBuf,
        /// Also write the per-event CSV trace.
        #[arg(long)]
        trace: bool,
    },
    /// Check a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Positioning Monte Carlo: per-draw errors and a CDF table as CSV.
    PositionDemo {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 200)]
        draws: u32,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "MCRAN_OUT_DIR", default_value = "out")]
        out: PathBuf,
    },
    /// Re-derive the report from a CSV trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Where to write the report; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Validation(String),
    Contract,
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let src = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Other)?;
    Scenario::load_str(&src).map_err(|e| match e {
        ScenarioError::Parse(m) => {
            Failure::Validation(format!("{}: parse error: {m}", path.display()))
        }
        ScenarioError::Invalid(r) => {
            Failure::Validation(format!("{}: invalid scenario:\n{r}", path.display()))
        }
    })
}

fn run_cmd(
    paths: &[PathBuf],
    seed: Option<u64>,
    seeds: &[u64],
    out: &Path,
    trace: bool,
) -> Result<(), Failure> {
    let scenarios = paths
        .iter()
        .map(|p| load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut jobs: Vec<(String, u64, &Scenario)> = Vec::new();
    for s in &scenarios {
        let list: Vec<u64> = match (seed, seeds.is_empty()) {
            (Some(x), _) => vec![x],
            (None, false) => seeds.to_vec(),
            (None, true) => vec![s.seed],
        };
        jobs.extend(list.into_iter().map(|k| (s.name.clone(), k, s)));
    }
    jobs.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    jobs.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let results: Vec<_> = jobs
        .par_iter()
        .map(|(name, seed, scn)| (name, *seed, scenario::run(scn, *seed)))
        .collect();
    let mut first_failure = None;
    for (name, seed, res) in results {
        match res {
            Ok(output) => {
                let stem = format!("{name}-seed{seed}");
                let report_path = out.join(format!("{stem}.json"));
                fs::write(&report_path, output.report.to_json())
                    .with_context(|| format!("writing {}", report_path.display()))?;
                if trace {
                    let trace_path = out.join(format!("{stem}.trace.csv"));
                    let f = fs::File::create(&trace_path)
                        .with_context(|| format!("creating {}", trace_path.display()))?;
                    scenario::write_trace(&output.events, io::BufWriter::new(f))
                        .with_context(|| format!("writing {}", trace_path.display()))?;
                }
                println!("{}", output.report.summary());
            }
            Err(RunError::Invalid(r)) => {
                first_failure.get_or_insert(Failure::Validation(format!(
                    "{name}: invalid scenario:\n{r}"
                )));
            }
            Err(e @ RunError::Contract { .. }) => {
                eprintln!("{name} seed={seed}: {e}");
                first_failure.get_or_insert(Failure::Contract);
            }
        }
    }
    first_failure.map_or(Ok(()), Err)
}

const CDF_POINTS: [f64; 11] = [
    10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 67.0, 70.0, 80.0, 90.0, 95.0,
];

fn cdf_rows(fixes: &[FixRecord]) -> Vec<(String, f64, f64, f64)> {
    let mut names: Vec<&str> = fixes.iter().map(|f| f.geometry.as_str()).collect();
    names.dedup();
    let mut rows = Vec::new();
    for name in names {
        let ok: Vec<&FixRecord> = fixes
            .iter()
            .filter(|f| f.geometry == name && f.ok)
            .collect();
        let h: Vec<f64> = ok.iter().map(|f| f.horizontal_error_m).collect();
        let v: Vec<f64> = ok.iter().map(|f| f.vertical_error_m).collect();
        for p in CDF_POINTS {
            rows.push((
                name.to_owned(),
                p,
                percentile_f64(&h, p),
                percentile_f64(&v, p),
            ));
        }
    }
    rows
}

fn position_demo_cmd(
    path: &Path,
    draws: u32,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), Failure> {
    let scn = load(path)?;
    if scn.positioning.geometries.is_empty() {
        return Err(Failure::Validation(format!(
            "{}: no positioning geometries",
            path.display()
        )));
    }
    let fixes = scenario::positioning_demo(&scn, draws, seed.unwrap_or(scn.seed));
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let draws_path = out.join(format!("{}-fixes.csv", scn.name));
    let mut w = csv_writer(&draws_path)?;
    writeln!(
        w,
        "geometry,draw,target,ok,horizontal_error_m,vertical_error_m,x,y,z"
    )
    .context("writing fixes")?;
    for (i, f) in fixes.iter().enumerate() {
        let [x, y, z] = f.estimate.map_or([f64::NAN; 3], |e| e);
        writeln!(
            w,
            "{},{i},{},{},{},{},{x},{y},{z}",
            f.geometry, f.target, f.ok, f.horizontal_error_m, f.vertical_error_m
        )
        .context("writing fixes")?;
    }
    w.flush().context("writing fixes")?;

    let cdf_path = out.join(format!("{}-cdf.csv", scn.name));
    let mut w = csv_writer(&cdf_path)?;
    let stdout = io::stdout();
    let mut so = stdout.lock();
    let header = "geometry,percentile,horizontal_m,vertical_m";
    writeln!(w, "{header}").context("writing cdf")?;
    writeln!(so, "{header}").context("writing stdout")?;
    for (g, p, h, v) in cdf_rows(&fixes) {
        let line = format!("{g},{p},{h:.4},{v:.4}");
        writeln!(w, "{line}").context("writing cdf")?;
        writeln!(so, "{line}").context("writing stdout")?;
    }
    w.flush().context("writing cdf")?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<io::BufWriter<fs::File>, Failure> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(io::BufWriter::new(f))
}

fn replay_cmd(trace: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let f = fs::File::open(trace)
        .with_context(|| format!("opening {}", trace.display()))
        .map_err(Failure::Other)?;
    let events = scenario::read_trace(io::BufReader::new(f))
        .map_err(|e| Failure::Validation(format!("{}: {e}", trace.display())))?;
    let report = scenario::replay(&events);
    match out {
        Some(p) => {
            fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
            println!("{}", report.summary());
        }
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run {
            scenario,
            seed,
            seeds,
            out,
            trace,
        } => run_cmd(scenario, *seed, seeds, out, *trace),
        Command::Validate { scenario } => load(scenario).map(|s| {
            println!(
                "{}: ok ({} cells, {} UEs)",
                s.name,
                s.cells.len(),
                s.ue_count()
            );
        }),
        Command::PositionDemo {
            scenario,
            draws,
            seed,
            out,
        } => position_demo_cmd(scenario, *draws, *seed, out),
        Command::Replay { trace, out } => replay_cmd(trace, out.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Contract) => ExitCode::from(2),
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

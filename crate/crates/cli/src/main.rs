use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cardiolts::benchmarks::{bench_cable, bench_spiral, CableReport, PropagationRun, SpiralOptions, SpiralReport};
use cardiolts::lat::DEFAULT_LAT_THRESHOLD;
use cardiolts::run::{append_json_line, compare, RunOptions};
use cardiolts::vtk::lat_from_manifest;
use cardiolts::{Error, RunConfig};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cardiolts", version, about = "Adaptive DG monodomain solver with local time stepping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Override a configuration key, e.g. `--set amr.tau_refine=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Zero all wall-clock fields so repeated runs give identical files.
    #[arg(long)]
    no_timing: bool,
}

impl Overrides {
    fn options(&self) -> RunOptions {
        RunOptions { timing: !self.no_timing }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration and write snapshots, stats and a summary.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Paired benchmark runs against the uniform oracle.
    Bench {
        #[command(subcommand)]
        which: Bench,
    },
    /// Run two configurations and compare their final potentials.
    Compare {
        config_a: PathBuf,
        config_b: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Local activation times from a snapshot manifest, as CSV.
    Lat {
        manifest: PathBuf,
        /// Activation threshold (mV).
        #[arg(long, default_value_t = DEFAULT_LAT_THRESHOLD, allow_negative_numbers = true)]
        threshold: f64,
        /// Point field holding the potential.
        #[arg(long, default_value = "phi")]
        field: String,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Bench {
    /// Conduction velocity on the cable (or any propagation preset).
    Cable {
        /// Configuration file; the `cable` preset when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Spiral tip tracking and isoline comparison.
    Spiral {
        /// Configuration file; the `spiral` preset when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

enum Failure {
    Config(Error),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(path: Option<&Path>, preset: &str, o: &Overrides) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::read(p, &o.set),
        None => RunConfig::parse(&format!("preset = {preset}\noutput.dir = bench_{preset}\n"), &o.set),
    }
}

fn print(value: &serde_json::Value) {
    println!("{value}");
}

fn run_summary(run: &PropagationRun, timing: bool) -> serde_json::Value {
    json!({
        "solver": run.solver,
        "level": run.level,
        "dt": run.dt,
        "cv": run.cv,
        "element_updates": run.element_updates,
        "wall_s": if timing { run.wall_s } else { 0.0 },
        "final_elements": run.final_elements,
        "phi_min": run.phi_min,
        "phi_max": run.phi_max,
    })
}

fn cable_report(cfg: &RunConfig, r: &CableReport, timing: bool) -> serde_json::Value {
    json!({
        "bench": "cable",
        "config_hash": cfg.hash(),
        "slts": run_summary(&r.slts, timing),
        "oracle_h": run_summary(&r.coarse, timing),
        "oracle_h2": run_summary(&r.fine, timing),
        "self_convergence": r.self_convergence,
        "slts_error": r.slts_error,
        "update_ratio": r.update_ratio,
        "speedup": if timing { Some(r.speedup) } else { None },
        "invariant_violations": r.slts.monitor.violations.len(),
        "passed": r.passed(),
    })
}

fn spiral_report(cfg: &RunConfig, r: &SpiralReport, timing: bool) -> serde_json::Value {
    let side = |s: &cardiolts::benchmarks::SpiralRun| {
        json!({
            "turning_angle": s.turning_angle,
            "axis_lock_fraction": s.axis_lock_fraction,
            "tip_samples": s.tips.tips.len(),
            "element_updates": s.element_updates,
            "wall_s": if timing { s.wall_s } else { 0.0 },
            "final_elements": s.final_elements,
            "phi_min": s.phi_min,
            "phi_max": s.phi_max,
        })
    };
    json!({
        "bench": "spiral",
        "config_hash": cfg.hash(),
        "slts": side(&r.slts),
        "oracle": side(&r.oracle),
        "hausdorff": r.hausdorff,
        "tolerance": r.tolerance,
        "rotating": r.rotating(),
        "axis_locked": r.axis_locked(),
        "invariant_violations": r.slts.monitor.violations.len(),
        "passed": r.passed(),
    })
}

fn write_spiral_csv(dir: &Path, r: &SpiralReport) -> std::io::Result<()> {
    let mut tips = String::from("solver,t,x,y\n");
    let mut iso = String::from("solver,x,y\n");
    for (name, run) in [("slts", &r.slts), ("oracle", &r.oracle)] {
        for (t, p) in run.tips.times.iter().zip(&run.tips.tips) {
            let _ = writeln!(tips, "{name},{t},{},{}", p[0], p[1]);
        }
        for p in &run.final_isoline {
            let _ = writeln!(iso, "{name},{},{}", p[0], p[1]);
        }
    }
    fs::write(dir.join("spiral_tips.csv"), tips)?;
    fs::write(dir.join("spiral_isolines.csv"), iso)
}

fn verdict(passed: bool, what: &str) -> Result<(), Failure> {
    if passed {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{what} benchmark failed its acceptance checks")))
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = RunConfig::read(&config, &overrides.set)?;
            log::info!("running {} ({})", config.display(), cfg.hash());
            let summary = cardiolts::run(&cfg, overrides.options())?;
            print(&serde_json::to_value(&summary).map_err(|e| Failure::Runtime(e.to_string()))?);
        }
        Command::Bench { which } => match which {
            Bench::Cable { config, overrides } => {
                let cfg = load(config.as_deref(), "cable", &overrides)?;
                let r = bench_cable(&cfg.setup)?;
                let report = cable_report(&cfg, &r, !overrides.no_timing);
                fs::create_dir_all(&cfg.output_dir)?;
                append_json_line(&cfg.output_dir.join("bench_cable.jsonl"), &report, false)?;
                print(&report);
                verdict(r.passed(), "cable")?;
            }
            Bench::Spiral { config, overrides } => {
                let cfg = load(config.as_deref(), "spiral", &overrides)?;
                let r = bench_spiral(&cfg.setup, &SpiralOptions::default())?;
                let report = spiral_report(&cfg, &r, !overrides.no_timing);
                fs::create_dir_all(&cfg.output_dir)?;
                append_json_line(&cfg.output_dir.join("bench_spiral.jsonl"), &report, false)?;
                write_spiral_csv(&cfg.output_dir, &r)?;
                print(&report);
                verdict(r.passed(), "spiral")?;
            }
        },
        Command::Compare { config_a, config_b, overrides } => {
            let a = RunConfig::read(&config_a, &overrides.set)?;
            let b = RunConfig::read(&config_b, &overrides.set)?;
            let c = compare(&a, &b, overrides.options())?;
            print(&json!({
                "config_hash_a": c.a.config_hash,
                "config_hash_b": c.b.config_hash,
                "phi_linf": c.phi_linf,
                "phi_linf_relative": c.phi_linf_relative,
                "cv_a": c.a.cv,
                "cv_b": c.b.cv,
                "cv_relative_difference": c.cv_relative_difference,
                "element_updates_a": c.a.element_updates,
                "element_updates_b": c.b.element_updates,
                "update_ratio": c.update_ratio,
                "speedup": c.speedup,
            }));
        }
        Command::Lat { manifest, threshold, field, out } => {
            let (points, lat) = lat_from_manifest(&manifest, &field, threshold)?;
            let mut csv = String::from("x,y,lat_ms\n");
            for (p, t) in points.iter().zip(&lat) {
                let t = t.map(|t| t.to_string()).unwrap_or_default();
                let _ = writeln!(csv, "{},{},{t}", p[0], p[1]);
            }
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

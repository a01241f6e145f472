//! Configured runs: solver loop, snapshots, statistics and summary.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::basis::Basis;
use crate::benchmarks::{build_simulation, stable_uniform_step};
use crate::config::{RunConfig, SolverKind};
use crate::error::{Error, Result};
use crate::ionics::CellModel;
use crate::lat::{conduction_velocity, LatRecorder, DEFAULT_LAT_THRESHOLD};
use crate::mesh::ForestMesh;
use crate::refsolver::UniformSolver;
use crate::sipg::assemble_operators;
use crate::slts::{write_stats_csv, StepStats};
use crate::vtk::{write_vtk, Field, Manifest, Sampler, VtkData};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const STATS_FILE: &str = "stats.csv";
pub const SUMMARY_FILE: &str = "summary.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Record wall-clock times; off gives byte-identical outputs.
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { timing: true }
    }
}

/// Final report of a run, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub preset: String,
    pub solver: String,
    pub t_end: f64,
    pub barrier_steps: u64,
    pub element_updates: u64,
    /// Solver time without output (s).
    pub wall_s: f64,
    pub final_elements: usize,
    pub max_level: u8,
    pub snapshots: usize,
    pub phi_min: f64,
    pub phi_max: f64,
    pub cv: Option<f64>,
    pub invariant_checks: u64,
    pub invariant_violations: usize,
}

struct Output<'a> {
    cfg: &'a RunConfig,
    manifest: Manifest,
}

impl Output<'_> {
    fn snapshot(&mut self, t: f64, mesh: &ForestMesh, basis: &Basis, phi: &[f64], s: &[f64], n_states: usize, cells: &[Field<'_>]) -> Result<()> {
        if self.manifest.entries.last().is_some_and(|e| e.time >= t) {
            return Ok(());
        }
        let name = format!("snap_{:04}.vtk", self.manifest.entries.len());
        if self.cfg.write_vtk {
            let s0: Vec<f64> = s.iter().step_by(n_states).copied().collect();
            let points = [Field { name: "phi", values: phi }, Field { name: "s0", values: &s0 }];
            write_vtk(&self.cfg.output_dir.join(&name), mesh, basis, &points, cells)?;
        }
        self.manifest.push(t, name)
    }
}

fn sample_points(cfg: &RunConfig, f: impl Fn([f64; 2]) -> Option<f64>) -> Vec<f64> {
    cfg.setup.sample_points().into_iter().map(|p| f(p).unwrap_or(f64::NAN)).collect()
}

/// Executes the configured run and writes its artifacts to `output.dir`.
pub fn run(cfg: &RunConfig, opts: RunOptions) -> Result<RunSummary> {
    fs::create_dir_all(&cfg.output_dir)?;
    let setup = &cfg.setup;
    let barrier = setup.settings.dt;
    let n_barriers = (setup.t_end / barrier - 1e-9).ceil().max(0.0) as u64;
    let every = cfg.snapshot_every;
    let mut out = Output {
        cfg,
        manifest: Manifest::default(),
    };
    let points = setup.sample_points();
    let mut rec = LatRecorder::new(points.len(), DEFAULT_LAT_THRESHOLD);
    let mut stats: Vec<StepStats> = Vec::new();
    let mut wall = 0.0;
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut track = |phi: &[f64]| {
        for &v in phi {
            range = (range.0.min(v), range.1.max(v));
        }
    };
    let ns = setup.model.n_states();

    let (updates, final_elements, max_level, checks, violations) = match cfg.solver {
        SolverKind::Slts => {
            let mut sim = build_simulation(setup, cfg.initial_level)?;
            sim.settings = cfg.settings();
            let zeros = vec![0.0; sim.mesh.n_active()];
            let cells = [Field { name: "eta_s", values: &zeros }, Field { name: "eta_t", values: &zeros }, Field { name: "substeps", values: &zeros }];
            out.snapshot(0.0, &sim.mesh, &sim.basis, &sim.state.phi, &sim.state.s, ns, &cells)?;
            rec.record(0.0, &sample_points(cfg, |p| sim.sample(p)))?;
            track(&sim.state.phi);
            for k in 1..=n_barriers {
                let clock = Instant::now();
                let mut st = sim.barrier_step()?;
                wall += clock.elapsed().as_secs_f64();
                if !opts.timing {
                    st.wall_s = 0.0;
                }
                stats.push(st);
                track(&sim.state.phi);
                rec.record(sim.time(), &sample_points(cfg, |p| sim.sample(p)))?;
                if (every > 0 && k % every == 0) || k == n_barriers {
                    let substeps: Vec<f64> = sim
                        .last_plan
                        .as_ref()
                        .map(|p| p.substeps.iter().map(|&s| f64::from(s)).collect())
                        .unwrap_or_else(|| vec![1.0; sim.mesh.n_active()]);
                    let cells = [
                        Field { name: "eta_s", values: &sim.eta_s },
                        Field { name: "eta_t", values: &sim.eta_t },
                        Field { name: "substeps", values: &substeps },
                    ];
                    out.snapshot(sim.time(), &sim.mesh, &sim.basis, &sim.state.phi, &sim.state.s, ns, &cells)?;
                }
            }
            let max_level = stats.iter().map(|s| s.max_level).max().unwrap_or(sim.mesh.max_active_level());
            (sim.total_updates(), sim.mesh.n_active(), max_level, sim.monitor.checks, sim.monitor.violations.len())
        }
        SolverKind::Uniform => {
            let mesh = setup.mesh(cfg.initial_level)?;
            let basis = setup.basis()?;
            let ops = assemble_operators(&mesh, &basis, &setup.tensor()?, setup.gamma)?;
            let dt = cfg.uniform_dt.unwrap_or_else(|| stable_uniform_step(&ops, barrier));
            let per_barrier = (barrier / dt).round() as u64;
            let mut solver = UniformSolver::new(&mesh, &ops, setup.model, setup.stimuli.clone(), dt, 0.0, |x| setup.initial_state(x))?;
            out.snapshot(0.0, &mesh, &basis, &solver.phi, &solver.s, ns, &[])?;
            rec.record(0.0, &sample_points(cfg, |p| solver.sample(p)))?;
            track(&solver.phi);
            for k in 1..=n_barriers {
                let clock = Instant::now();
                for _ in 0..per_barrier {
                    solver.step()?;
                }
                let elapsed = clock.elapsed().as_secs_f64();
                wall += elapsed;
                stats.push(StepStats {
                    step: k,
                    t: solver.time(),
                    n_elements: mesh.n_active(),
                    updates: per_barrier * mesh.n_active() as u64,
                    max_s: per_barrier as u32,
                    max_level: mesh.max_active_level(),
                    wall_s: if opts.timing { elapsed } else { 0.0 },
                    ..Default::default()
                });
                track(&solver.phi);
                rec.record(solver.time(), &sample_points(cfg, |p| solver.sample(p)))?;
                if (every > 0 && k % every == 0) || k == n_barriers {
                    out.snapshot(solver.time(), &mesh, &basis, &solver.phi, &solver.s, ns, &[])?;
                }
            }
            (solver.element_updates(), mesh.n_active(), mesh.max_active_level(), 0, 0)
        }
    };

    let dir = &cfg.output_dir;
    fs::write(dir.join(MANIFEST_FILE), out.manifest.render())?;
    let mut csv = Vec::new();
    write_stats_csv(&mut csv, &stats)?;
    fs::write(dir.join(STATS_FILE), csv)?;
    let cv = rec
        .finish()
        .ok()
        .and_then(|lat| conduction_velocity(&points.iter().map(|p| p[0]).collect::<Vec<_>>(), &lat).ok());
    let summary = RunSummary {
        config_hash: cfg.hash(),
        preset: cfg.preset.clone(),
        solver: match cfg.solver {
            SolverKind::Slts => "slts".into(),
            SolverKind::Uniform => "uniform".into(),
        },
        t_end: setup.t_end,
        barrier_steps: n_barriers,
        element_updates: updates,
        wall_s: if opts.timing { wall } else { 0.0 },
        final_elements,
        max_level,
        snapshots: out.manifest.entries.len(),
        phi_min: range.0,
        phi_max: range.1,
        cv,
        invariant_checks: checks,
        invariant_violations: violations,
    };
    append_json_line(&dir.join(SUMMARY_FILE), &summary, false)?;
    if violations > 0 {
        return Err(Error::ContractViolation(format!("{violations} synchronicity invariant violations")));
    }
    Ok(summary)
}

/// Writes `value` as one JSON line, appending when `append` is set.
pub fn append_json_line(path: &Path, value: &impl Serialize, append: bool) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::InvalidArgument(format!("cannot serialize report: {e}")))?;
    let mut f = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Two configured runs compared on their final snapshots.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub a: RunSummary,
    pub b: RunSummary,
    /// max |φ_a − φ_b| over the nodes of `a`'s final snapshot, with `b`
    /// sampled there.
    pub phi_linf: f64,
    /// `phi_linf` over `b`'s potential range.
    pub phi_linf_relative: f64,
    pub cv_relative_difference: Option<f64>,
    pub update_ratio: f64,
    /// Wall time of `b` over `a`.
    pub speedup: Option<f64>,
}

fn final_snapshot(cfg: &RunConfig) -> Result<VtkData> {
    let manifest = Manifest::read(&cfg.output_dir.join(MANIFEST_FILE))?;
    let last = manifest.entries.last().ok_or_else(|| Error::InsufficientData("run wrote no snapshot".into()))?;
    VtkData::read(&cfg.output_dir.join(&last.file))
}

/// Runs `a` and `b` and compares their final potentials.
pub fn compare(a: &RunConfig, b: &RunConfig, opts: RunOptions) -> Result<Comparison> {
    if a.output_dir == b.output_dir {
        return Err(Error::config("output.dir", None, "compared runs need distinct output directories"));
    }
    if !a.write_vtk || !b.write_vtk {
        return Err(Error::config("output.vtk", None, "compared runs must write snapshots"));
    }
    if a.setup.t_end != b.setup.t_end {
        return Err(Error::config("time.t_end", None, "compared runs must end at the same time"));
    }
    let sa = run(a, opts)?;
    let sb = run(b, opts)?;
    let (fa, fb) = (final_snapshot(a)?, final_snapshot(b)?);
    let missing = |f: &str| Error::Layout(format!("final snapshot has no point field {f}"));
    let pa = fa.point_data.get("phi").ok_or_else(|| missing("phi"))?;
    let pb = fb.point_data.get("phi").ok_or_else(|| missing("phi"))?;
    let sampler = Sampler::new(&fb)?;
    let mut linf = 0.0f64;
    for (x, va) in fa.points.iter().zip(pa) {
        let vb = sampler.sample(pb, *x).ok_or_else(|| Error::Geometry(format!("point {x:?} outside the second mesh")))?;
        linf = linf.max((va - vb).abs());
    }
    let cv = match (sa.cv, sb.cv) {
        (Some(x), Some(y)) => Some((x - y).abs() / y.abs()),
        _ => None,
    };
    Ok(Comparison {
        phi_linf: linf,
        phi_linf_relative: linf / (sb.phi_max - sb.phi_min).max(f64::MIN_POSITIVE),
        cv_relative_difference: cv,
        update_ratio: sa.element_updates as f64 / (sb.element_updates.max(1)) as f64,
        speedup: (opts.timing && sa.wall_s > 0.0).then(|| sb.wall_s / sa.wall_s),
        a: sa,
        b: sb,
    })
}

//! Desk-scale benchmark problems: a 1D cable, a 2D anisotropic strip and a
//! 2D spiral wave.

use std::time::Instant;

use serde::Serialize;

use crate::basis::Basis;
use crate::error::{Error, Result};
use crate::ionics::{CellModel, IonicModel, MitchellSchaeffer, StimulusProtocol, StimulusRegion, MAX_STATES};
use crate::lat::{conduction_velocity, LatRecorder, DEFAULT_LAT_THRESHOLD};
use crate::mesh::ForestMesh;
use crate::refsolver::UniformSolver;
use crate::sipg::{assemble_operators, DiffusionTensor};
use crate::slts::{cfl_estimate, InvariantMonitor, SltsSettings, Simulation};

/// Geometry, discretization and physics of a propagation benchmark.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropagationSetup {
    pub dim: usize,
    pub extent: [f64; 2],
    pub roots: [u32; 2],
    pub order: usize,
    pub gamma: f64,
    pub diffusion: Vec<f64>,
    pub model: IonicModel,
    pub stimuli: Vec<StimulusProtocol>,
    pub initial: InitialCondition,
    pub t_end: f64,
    pub max_level: u8,
    pub settings: SltsSettings,
    /// Spacing of the LAT sample points along the long axis (mm).
    pub sample_spacing: f64,
}

impl PropagationSetup {
    /// 20 mm cable with 1 mm roots.
    pub fn cable() -> Self {
        Self {
            dim: 1,
            extent: [20.0, 0.0],
            roots: [20, 1],
            order: 1,
            gamma: 4.0,
            diffusion: vec![0.1334],
            model: IonicModel::default(),
            stimuli: vec![StimulusProtocol {
                region: StimulusRegion::Box {
                    min: [0.0, 0.0],
                    max: [1.5, 0.0],
                },
                amplitude: 100.0,
                t0: 0.0,
                t1: 2.0,
                spatial_decay: false,
                temporal_decay: true,
            }],
            initial: InitialCondition::Rest,
            t_end: 40.0,
            max_level: 3,
            settings: SltsSettings {
                dt: 0.15,
                ..Default::default()
            },
            sample_spacing: 0.25,
        }
    }

    /// 20 × 7 mm strip with fiber direction along x.
    pub fn strip() -> Self {
        Self {
            dim: 2,
            extent: [20.0, 7.0],
            roots: [20, 7],
            diffusion: vec![0.1334, 0.0176],
            stimuli: vec![StimulusProtocol {
                region: StimulusRegion::Box {
                    min: [0.0, 0.0],
                    max: [1.5, 7.0],
                },
                ..Self::cable().stimuli[0]
            }],
            max_level: 2,
            ..Self::cable()
        }
    }

    /// 40 × 40 mm spiral from a graded initial condition.
    pub fn spiral() -> Self {
        Self {
            dim: 2,
            extent: [40.0, 40.0],
            roots: [16, 16],
            order: 1,
            gamma: 4.0,
            diffusion: vec![0.1, 0.1],
            model: spiral_model(),
            stimuli: Vec::new(),
            initial: InitialCondition::Gradient {
                phi_left: 10.0,
                phi_right: -85.0,
                gate_bottom: 0.6,
                gate_top: 0.1,
                mirror: false,
            },
            t_end: 500.0,
            max_level: 2,
            settings: SltsSettings {
                dt: 0.15,
                ..Default::default()
            },
            sample_spacing: 1.0,
        }
    }

    pub fn mesh(&self, uniform_level: u8) -> Result<ForestMesh> {
        let extent = &self.extent[..self.dim];
        let roots = &self.roots[..self.dim];
        let mut mesh = ForestMesh::build_cartesian_root(extent, roots, self.dim)?.with_max_level(self.max_level.max(uniform_level))?;
        for _ in 0..uniform_level {
            let all: Vec<usize> = (0..mesh.n_active()).collect();
            mesh.refine(mesh.generation(), &all)?;
        }
        Ok(mesh)
    }

    pub fn tensor(&self) -> Result<DiffusionTensor> {
        DiffusionTensor::new(self.dim, &self.diffusion)
    }

    pub fn basis(&self) -> Result<Basis> {
        Basis::new(self.order, self.dim)
    }

    /// LAT sample points on the long axis (mid-height in 2D).
    pub fn sample_points(&self) -> Vec<[f64; 2]> {
        let y = if self.dim == 2 { 0.5 * self.extent[1] + 0.0137 } else { 0.0 };
        let n = (self.extent[0] / self.sample_spacing).floor() as usize;
        (0..n)
            .map(|k| [0.0371 + k as f64 * self.sample_spacing, y])
            .filter(|p| p[0] < self.extent[0])
            .collect()
    }

    /// Initial `(φ, s)` at a point.
    pub fn initial_state(&self, x: [f64; 2]) -> (f64, [f64; MAX_STATES]) {
        match self.initial {
            InitialCondition::Rest => self.model.rest_state(),
            InitialCondition::Gradient {
                phi_left,
                phi_right,
                gate_bottom,
                gate_top,
                mirror,
            } => {
                let fx = x[0] / self.extent[0];
                let fx = if mirror { 1.0 - fx } else { fx };
                let fy = if self.dim == 2 { x[1] / self.extent[1] } else { 0.0 };
                let (_, mut s) = self.model.rest_state();
                s[0] = gate_bottom + fy * (gate_top - gate_bottom);
                (phi_left + fx * (phi_right - phi_left), s)
            }
        }
    }
}

/// Initial state of a benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum InitialCondition {
    Rest,
    /// φ linear in x, first state variable linear in y; `mirror` flips x.
    Gradient {
        phi_left: f64,
        phi_right: f64,
        gate_bottom: f64,
        gate_top: f64,
        mirror: bool,
    },
}

/// Outcome of one propagation run.
#[derive(Clone, Debug, Serialize)]
pub struct PropagationRun {
    pub solver: String,
    /// Uniform level, or the finest level an adaptive run reached.
    pub level: Option<u8>,
    pub dt: f64,
    pub cv: Option<f64>,
    pub lat: Vec<Option<f64>>,
    pub positions: Vec<f64>,
    pub element_updates: u64,
    pub wall_s: f64,
    pub final_elements: usize,
    pub phi_min: f64,
    pub phi_max: f64,
    #[serde(skip)]
    pub monitor: InvariantMonitor,
}

fn finish_run(
    solver: &str,
    level: Option<u8>,
    dt: f64,
    points: &[[f64; 2]],
    rec: &LatRecorder,
    updates: u64,
    wall: f64,
    elements: usize,
    range: (f64, f64),
    monitor: InvariantMonitor,
) -> Result<PropagationRun> {
    let lat = rec.finish()?;
    let positions: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let cv = conduction_velocity(&positions, &lat).ok();
    Ok(PropagationRun {
        solver: solver.into(),
        level,
        dt,
        cv,
        lat,
        positions,
        element_updates: updates,
        wall_s: wall,
        final_elements: elements,
        phi_min: range.0,
        phi_max: range.1,
        monitor,
    })
}

fn sample_all(points: &[[f64; 2]], f: impl Fn([f64; 2]) -> Option<f64>) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|p| f(*p).ok_or_else(|| Error::Geometry(format!("sample point {p:?} outside the mesh"))))
        .collect()
}

/// Largest power-of-two fraction of `dt` not above the smallest CFL bound.
pub fn stable_uniform_step(ops: &crate::sipg::ElementOps, dt: f64) -> f64 {
    let cfl = (0..ops.n_elements()).map(|e| cfl_estimate(ops, e)).fold(f64::INFINITY, f64::min);
    let mut step = dt;
    while step > cfl {
        step *= 0.5;
    }
    step
}

/// Uniform oracle on a uniformly refined mesh, recording LAT every barrier
/// interval `setup.settings.dt`.
pub fn run_uniform(setup: &PropagationSetup, level: u8, dt: Option<f64>) -> Result<PropagationRun> {
    let mesh = setup.mesh(level)?;
    let basis = setup.basis()?;
    let ops = assemble_operators(&mesh, &basis, &setup.tensor()?, setup.gamma)?;
    let barrier = setup.settings.dt;
    let dt = dt.unwrap_or_else(|| stable_uniform_step(&ops, barrier));
    let per_barrier = (barrier / dt).round() as u64;
    if (per_barrier as f64 * dt - barrier).abs() > 1e-12 * barrier {
        return Err(Error::InvalidArgument(format!("step {dt} does not divide the barrier {barrier}")));
    }
    let mut solver = UniformSolver::new(&mesh, &ops, setup.model, setup.stimuli.clone(), dt, 0.0, |x| setup.initial_state(x))?;
    let points = setup.sample_points();
    let mut rec = LatRecorder::new(points.len(), DEFAULT_LAT_THRESHOLD);
    rec.record(0.0, &sample_all(&points, |p| solver.sample(p))?)?;
    let mut wall = 0.0;
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    let n_barriers = (setup.t_end / barrier).round() as u64;
    for _ in 0..n_barriers {
        let clock = Instant::now();
        for _ in 0..per_barrier {
            solver.step()?;
        }
        wall += clock.elapsed().as_secs_f64();
        rec.record(solver.time(), &sample_all(&points, |p| solver.sample(p))?)?;
        for &v in &solver.phi {
            range = (range.0.min(v), range.1.max(v));
        }
    }
    finish_run(
        "uniform",
        Some(level),
        dt,
        &points,
        &rec,
        solver.element_updates(),
        wall,
        mesh.n_active(),
        range,
        InvariantMonitor::default(),
    )
}

/// Builds the adaptive simulation of a setup.
pub fn build_simulation(setup: &PropagationSetup, initial_level: u8) -> Result<Simulation> {
    let mesh = setup.mesh(initial_level)?;
    Simulation::new(
        mesh,
        setup.basis()?,
        setup.tensor()?,
        setup.gamma,
        setup.model,
        setup.stimuli.clone(),
        setup.settings.clone(),
        0.0,
        |x| setup.initial_state(x),
    )
}

/// Adaptive S-LTS run with LAT recorded at every barrier.
pub fn run_slts(setup: &PropagationSetup) -> Result<PropagationRun> {
    let mut sim = build_simulation(setup, 0)?;
    let points = setup.sample_points();
    let mut rec = LatRecorder::new(points.len(), DEFAULT_LAT_THRESHOLD);
    rec.record(0.0, &sample_all(&points, |p| sim.sample(p))?)?;
    let mut wall = 0.0;
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    let n_barriers = (setup.t_end / setup.settings.dt).round() as u64;
    for _ in 0..n_barriers {
        let clock = Instant::now();
        sim.barrier_step()?;
        wall += clock.elapsed().as_secs_f64();
        rec.record(sim.time(), &sample_all(&points, |p| sim.sample(p))?)?;
        for &v in &sim.state.phi {
            range = (range.0.min(v), range.1.max(v));
        }
    }
    let finest = sim.stats.iter().map(|s| s.max_level).max().unwrap_or(0);
    finish_run(
        "slts",
        Some(finest),
        setup.settings.dt,
        &points,
        &rec,
        sim.total_updates(),
        wall,
        sim.mesh.n_active(),
        range,
        sim.monitor.clone(),
    )
}

/// Mitchell–Schaeffer with symmetric gate time constants short enough for
/// sustained reentry in a 40 mm domain.
pub fn spiral_model() -> IonicModel {
    IonicModel::MitchellSchaeffer(MitchellSchaeffer {
        tau_open: 60.0,
        tau_close: 30.0,
        ..Default::default()
    })
}

/// Which solver a benchmark run uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum SolverChoice {
    Slts,
    /// Uniform stepping on a mesh refined uniformly to the given level.
    Uniform { level: u8 },
}

/// Sampling of a spiral run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpiralOptions {
    /// Time between tip detections (ms); rounded to whole barrier steps.
    pub observe_every: f64,
    /// Raster spacing for level sets (mm).
    pub raster: f64,
    pub phi_level: f64,
    pub gate_level: f64,
}

impl Default for SpiralOptions {
    fn default() -> Self {
        Self {
            observe_every: 2.0,
            raster: 0.25,
            phi_level: DEFAULT_LAT_THRESHOLD,
            gate_level: 0.5,
        }
    }
}

/// Outcome of a spiral run.
#[derive(Clone, Debug, Serialize)]
pub struct SpiralRun {
    pub solver: SolverChoice,
    pub tips: crate::analysis::TipTrack,
    pub turning_angle: f64,
    pub axis_lock_fraction: f64,
    pub final_isoline: Vec<[f64; 2]>,
    pub element_updates: u64,
    pub wall_s: f64,
    pub final_elements: usize,
    pub phi_min: f64,
    pub phi_max: f64,
    #[serde(skip)]
    pub monitor: InvariantMonitor,
}

struct Frame<'a> {
    mesh: &'a ForestMesh,
    basis: &'a Basis,
    phi: &'a [f64],
    s: &'a [f64],
    n_states: usize,
}

fn observe(frame: &Frame<'_>, opts: &SpiralOptions) -> Result<(Vec<[f64; 2]>, crate::analysis::Grid)> {
    use crate::analysis::{level_set_intersections, rasterize};
    let f = rasterize(frame.mesh, frame.basis, frame.phi, 1, 0, opts.raster)?;
    let g = rasterize(frame.mesh, frame.basis, frame.s, frame.n_states, 0, opts.raster)?;
    let tips = level_set_intersections(&f, opts.phi_level, &g, opts.gate_level)?;
    Ok((tips, f))
}

/// Runs the spiral benchmark with either solver and tracks the tip.
pub fn run_spiral(setup: &PropagationSetup, solver: SolverChoice, opts: &SpiralOptions) -> Result<SpiralRun> {
    use crate::analysis::{level_set_points, TipTrack};
    if setup.dim != 2 {
        return Err(Error::InvalidArgument("the spiral benchmark is two-dimensional".into()));
    }
    let barrier = setup.settings.dt;
    let n_barriers = (setup.t_end / barrier).round() as u64;
    let every = ((opts.observe_every / barrier).round() as u64).max(1);
    let ns = setup.model.n_states();
    let mut track = TipTrack::default();
    let mut wall = 0.0;
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut update_range = |phi: &[f64]| {
        for &v in phi {
            range = (range.0.min(v), range.1.max(v));
        }
    };
    let (isoline, updates, elements, monitor) = match solver {
        SolverChoice::Slts => {
            let mut sim = build_simulation(setup, 0)?;
            let mut last = None;
            for k in 1..=n_barriers {
                let clock = Instant::now();
                sim.barrier_step()?;
                wall += clock.elapsed().as_secs_f64();
                update_range(&sim.state.phi);
                if k % every == 0 || k == n_barriers {
                    let frame = Frame {
                        mesh: &sim.mesh,
                        basis: &sim.basis,
                        phi: &sim.state.phi,
                        s: &sim.state.s,
                        n_states: ns,
                    };
                    let (tips, grid) = observe(&frame, opts)?;
                    track.push(sim.time(), &tips);
                    last = Some(grid);
                }
            }
            let iso = last.map(|g| level_set_points(&g, opts.phi_level)).unwrap_or_default();
            (iso, sim.total_updates(), sim.mesh.n_active(), sim.monitor.clone())
        }
        SolverChoice::Uniform { level } => {
            let mesh = setup.mesh(level)?;
            let basis = setup.basis()?;
            let ops = assemble_operators(&mesh, &basis, &setup.tensor()?, setup.gamma)?;
            let dt = stable_uniform_step(&ops, barrier);
            let per_barrier = (barrier / dt).round() as u64;
            let mut solver = UniformSolver::new(&mesh, &ops, setup.model, setup.stimuli.clone(), dt, 0.0, |x| setup.initial_state(x))?;
            let mut last = None;
            for k in 1..=n_barriers {
                let clock = Instant::now();
                for _ in 0..per_barrier {
                    solver.step()?;
                }
                wall += clock.elapsed().as_secs_f64();
                update_range(&solver.phi);
                if k % every == 0 || k == n_barriers {
                    let frame = Frame {
                        mesh: &mesh,
                        basis: &basis,
                        phi: &solver.phi,
                        s: &solver.s,
                        n_states: ns,
                    };
                    let (tips, grid) = observe(&frame, opts)?;
                    track.push(solver.time(), &tips);
                    last = Some(grid);
                }
            }
            let iso = last.map(|g| level_set_points(&g, opts.phi_level)).unwrap_or_default();
            (iso, solver.element_updates(), mesh.n_active(), InvariantMonitor::default())
        }
    };
    if isoline.is_empty() {
        return Err(Error::Benchmark(format!(
            "no spiral formed: no tissue above {} mV at t = {} ms (potential range {:.1} to {:.1} mV)",
            opts.phi_level, setup.t_end, range.0, range.1
        )));
    }
    let finest = setup.extent[0] / f64::from(setup.roots[0]) / f64::from(1u32 << setup.max_level);
    Ok(SpiralRun {
        solver,
        turning_angle: track.turning_angle(),
        axis_lock_fraction: track.axis_lock_fraction(finest),
        tips: track,
        final_isoline: isoline,
        element_updates: updates,
        wall_s: wall,
        final_elements: elements,
        phi_min: range.0,
        phi_max: range.1,
        monitor,
    })
}

/// Paired S-LTS and uniform-fine spiral runs with the pinning verdict.
#[derive(Clone, Debug, Serialize)]
pub struct SpiralReport {
    pub slts: SpiralRun,
    pub oracle: SpiralRun,
    pub hausdorff: f64,
    /// Two root element widths.
    pub tolerance: f64,
}

impl SpiralReport {
    pub fn rotating(&self) -> bool {
        self.slts.turning_angle > 2.0 * std::f64::consts::PI
    }

    pub fn axis_locked(&self) -> bool {
        self.slts.axis_lock_fraction > 0.25
    }

    pub fn passed(&self) -> bool {
        self.rotating() && !self.axis_locked() && self.hausdorff <= self.tolerance
    }
}

/// Runs the spiral with S-LTS and with uniform stepping at `max_level`.
pub fn bench_spiral(setup: &PropagationSetup, opts: &SpiralOptions) -> Result<SpiralReport> {
    let slts = run_spiral(setup, SolverChoice::Slts, opts)?;
    let oracle = run_spiral(setup, SolverChoice::Uniform { level: setup.max_level }, opts)?;
    let hausdorff = crate::analysis::hausdorff(&slts.final_isoline, &oracle.final_isoline)?;
    Ok(SpiralReport {
        slts,
        oracle,
        hausdorff,
        tolerance: 2.0 * setup.extent[0] / f64::from(setup.roots[0]),
    })
}

/// Reflects points across the vertical mid-line of the domain.
pub fn mirror_x(points: &[[f64; 2]], extent: [f64; 2]) -> Vec<[f64; 2]> {
    points.iter().map(|p| [extent[0] - p[0], p[1]]).collect()
}

/// S-LTS cable run against uniform oracles one and zero levels below the
/// finest allowed level.
#[derive(Clone, Debug, Serialize)]
pub struct CableReport {
    pub slts: PropagationRun,
    pub coarse: PropagationRun,
    pub fine: PropagationRun,
    /// |cv(h) − cv(h/2)| / cv(h/2).
    pub self_convergence: f64,
    /// |cv(S-LTS) − cv(h/2)| / cv(h/2).
    pub slts_error: f64,
    /// S-LTS element updates over the fine oracle's.
    pub update_ratio: f64,
    pub speedup: f64,
}

impl CableReport {
    pub fn passed(&self) -> bool {
        self.self_convergence < 0.02 && self.slts_error < 0.03 && self.update_ratio < 0.5
    }
}

fn wave_speed(run: &PropagationRun) -> Result<f64> {
    run.cv.ok_or_else(|| {
        Error::Benchmark(format!(
            "wave failed to propagate in the {} run (potential range {:.1} to {:.1} mV, {} of {} samples activated)",
            run.solver,
            run.phi_min,
            run.phi_max,
            run.lat.iter().filter(|t| t.is_some()).count(),
            run.lat.len()
        ))
    })
}

/// Runs the propagation benchmark with S-LTS and the two uniform oracles.
pub fn bench_cable(setup: &PropagationSetup) -> Result<CableReport> {
    if setup.max_level == 0 {
        return Err(Error::InvalidArgument("the cable benchmark needs max_level ≥ 1".into()));
    }
    let slts = run_slts(setup)?;
    let coarse = run_uniform(setup, setup.max_level - 1, None)?;
    let fine = run_uniform(setup, setup.max_level, None)?;
    let (cs, cc, cf) = (wave_speed(&slts)?, wave_speed(&coarse)?, wave_speed(&fine)?);
    Ok(CableReport {
        self_convergence: (cc - cf).abs() / cf,
        slts_error: (cs - cf).abs() / cf,
        update_ratio: slts.element_updates as f64 / fine.element_updates as f64,
        speedup: fine.wall_s / slts.wall_s.max(1e-12),
        slts,
        coarse,
        fine,
    })
}

//! Uniform global time stepping on a fixed mesh, used as the oracle and the
//! wall-clock baseline for the local time stepping engine.

use serde::Serialize;

use crate::basis::Basis;
use crate::error::{Error, Result};
use crate::ionics::{CellModel, IonicModel, StimulusProtocol, MAX_STATES};
use crate::mesh::ForestMesh;
use crate::sipg::ElementOps;
use crate::slts::{cfl_estimate, node_positions, uniform_step, FieldState, Kernel};

/// One stored solution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub t: f64,
    pub generation: u64,
    pub phi: Vec<f64>,
    pub s: Vec<f64>,
}

/// Snapshots at increasing times.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub config_hash: Option<String>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn push(&mut self, snap: Snapshot) -> Result<()> {
        if let Some(last) = self.snapshots.last() {
            if !(snap.t > last.t) {
                return Err(Error::ContractViolation(format!(
                    "snapshot time {} not after {}",
                    snap.t, last.t
                )));
            }
        }
        self.snapshots.push(snap);
        Ok(())
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }
}

/// Explicit solver with one global step for every element.
#[derive(Clone, Debug)]
pub struct UniformSolver<'a> {
    pub mesh: &'a ForestMesh,
    pub ops: &'a ElementOps,
    pub model: IonicModel,
    pub stimuli: Vec<StimulusProtocol>,
    pub dt: f64,
    pub phi: Vec<f64>,
    pub s: Vec<f64>,
    positions: Vec<[f64; 2]>,
    t0: f64,
    steps: u64,
}

impl<'a> UniformSolver<'a> {
    pub fn new(
        mesh: &'a ForestMesh,
        ops: &'a ElementOps,
        model: IonicModel,
        stimuli: Vec<StimulusProtocol>,
        dt: f64,
        t0: f64,
        init: impl Fn([f64; 2]) -> (f64, [f64; MAX_STATES]),
    ) -> Result<Self> {
        ops.check_generation(mesh.generation())?;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let min_cfl = (0..ops.n_elements()).map(|e| cfl_estimate(ops, e)).fold(f64::INFINITY, f64::min);
        if dt > min_cfl {
            log::warn!("uniform step {dt} ms exceeds the Gershgorin bound {min_cfl} ms");
        }
        let positions = node_positions(mesh, ops.basis());
        let ns = model.n_states();
        let mut phi = Vec::with_capacity(positions.len());
        let mut s = Vec::with_capacity(positions.len() * ns);
        for x in &positions {
            let (p, st) = init(*x);
            phi.push(p);
            s.extend_from_slice(&st[..ns]);
        }
        Ok(Self {
            mesh,
            ops,
            model,
            stimuli,
            dt,
            phi,
            s,
            positions,
            t0,
            steps: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.t0 + self.steps as f64 * self.dt
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Total element updates so far.
    pub fn element_updates(&self) -> u64 {
        self.steps * self.ops.n_elements() as u64
    }

    pub fn step(&mut self) -> Result<()> {
        let t = self.time();
        let kernel = Kernel {
            ops: self.ops,
            model: &self.model,
            stimuli: &self.stimuli,
            positions: &self.positions,
            dim: self.mesh.dim(),
        };
        uniform_step(&kernel, &mut self.phi, &mut self.s, t, self.dt)?;
        self.steps += 1;
        if self.phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: self.time() });
        }
        Ok(())
    }

    /// Steps until `t_end`, calling `observer` after every step.
    pub fn run_until(&mut self, t_end: f64, mut observer: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        let n = ((t_end - self.t0) / self.dt - 1e-9).ceil().max(0.0) as u64;
        while self.steps < n {
            self.step()?;
            observer(self)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            t: self.time(),
            generation: self.mesh.generation(),
            phi: self.phi.clone(),
            s: self.s.clone(),
        }
    }

    pub fn field_state(&self) -> Result<FieldState> {
        FieldState::new(
            self.mesh.generation(),
            self.ops.nodes_per_element(),
            self.model.n_states(),
            self.phi.clone(),
            self.s.clone(),
            self.time(),
        )
    }

    pub fn sample(&self, x: [f64; 2]) -> Option<f64> {
        let (e, xi) = self.mesh.locate(x)?;
        let n = self.ops.nodes_per_element();
        Some(self.ops.basis().evaluate(&self.phi[e * n..(e + 1) * n], xi))
    }
}

/// Runs the uniform solver to `t_end` and stores a snapshot every
/// `snapshot_every` steps (0 keeps only the final state).
#[allow(clippy::too_many_arguments)]
pub fn uniform_step_run(
    mesh: &ForestMesh,
    ops: &ElementOps,
    model: IonicModel,
    dt: f64,
    t_end: f64,
    stimuli: Vec<StimulusProtocol>,
    snapshot_every: u64,
    init: impl Fn([f64; 2]) -> (f64, [f64; MAX_STATES]),
) -> Result<Trajectory> {
    let mut solver = UniformSolver::new(mesh, ops, model, stimuli, dt, 0.0, init)?;
    let mut traj = Trajectory::default();
    traj.push(solver.snapshot())?;
    let mut snaps = Vec::new();
    solver.run_until(t_end, |s| {
        if snapshot_every > 0 && s.steps_taken() % snapshot_every == 0 {
            snaps.push(s.snapshot());
        }
        Ok(())
    })?;
    for s in snaps {
        traj.push(s)?;
    }
    if traj.last().map(|s| s.t) != Some(solver.time()) {
        traj.push(solver.snapshot())?;
    }
    Ok(traj)
}

/// Discrete differences of the potential, in mV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateMetrics {
    pub linf: f64,
    pub l2: f64,
    pub per_element_max: Vec<f64>,
}

/// Compares the potentials of two states on the same mesh.
pub fn compare_states(a: &FieldState, b: &FieldState, mesh: &ForestMesh, basis: &Basis) -> Result<StateMetrics> {
    if a.generation != b.generation || a.generation != mesh.generation() || a.phi.len() != b.phi.len() {
        return Err(Error::Layout(format!(
            "states of generations {} and {} cannot be compared on generation {}",
            a.generation,
            b.generation,
            mesh.generation()
        )));
    }
    compare_fields(&a.phi, &b.phi, mesh, basis)
}

/// [`compare_states`] on raw element-major potentials.
pub fn compare_fields(a: &[f64], b: &[f64], mesh: &ForestMesh, basis: &Basis) -> Result<StateMetrics> {
    let n = basis.n_nodes();
    if a.len() != mesh.n_active() * n || b.len() != a.len() {
        return Err(Error::Layout("fields do not match the mesh".into()));
    }
    let mut per = Vec::with_capacity(mesh.n_active());
    let mut l2 = 0.0;
    for e in 0..mesh.n_active() {
        let jac = mesh.element_measure(e) / f64::from(1u32 << mesh.dim());
        let mut m: f64 = 0.0;
        for q in 0..n {
            let d = a[e * n + q] - b[e * n + q];
            m = m.max(d.abs());
            l2 += basis.node_weight(q) * jac * d * d;
        }
        per.push(m);
    }
    Ok(StateMetrics {
        linf: per.iter().copied().fold(0.0, f64::max),
        l2: l2.sqrt(),
        per_element_max: per,
    })
}

//! Adaptive multi-queue synchronous local time stepping.
//!
//! Every element `e` takes `S_e = 2^b` substeps of length `Δt/S_e` inside a
//! barrier step. Time inside a barrier step is tracked as integer ticks out
//! of `maxS = max_e S_e`, so element `e` advances by `maxS/S_e` ticks per
//! substep and all elements meet exactly at the barrier.
//!
//! Within sweep `i` the elements of queue `Q_i` first buffer their current
//! values, then each one advances using neighbor traces linearly
//! interpolated between the neighbor's buffered and current values.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::basis::Basis;
use crate::error::{Error, Result};
use crate::indicators::{kelly_indicator, mark_elements, rvt_indicator, StateView};
use crate::ionics::{advance_node, CellModel, IonicModel, StimulusProtocol};
use crate::mesh::ForestMesh;
use crate::sipg::{assemble_operators, DiffusionTensor, ElementOps};
use crate::transfer::{transfer_element_scalar, transfer_field, TransferOps};

/// Largest substep exponent accepted by the scheduler.
pub const MAX_SUBSTEP_EXPONENT: u32 = 24;

/// Gershgorin bound `1 / max_i Σ_j |L_ij|` over the rows of `L = M⁻¹K` that
/// belong to `elem`, including its face couplings. `+∞` for zero rows.
pub fn cfl_estimate(ops: &ElementOps, elem: usize) -> f64 {
    let n = ops.nodes_per_element();
    let own = ops.own_block(elem);
    let minv = ops.minv(elem);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut row: f64 = own[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum();
        for c in ops.couplings(elem) {
            row += c.block[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>();
        }
        worst = worst.max(minv[i] * row);
    }
    if worst > 0.0 {
        1.0 / worst
    } else {
        f64::INFINITY
    }
}

/// `(S_e, b_cfl, b_cell)` for one element.
///
/// `b_cfl` is the smallest `b ≥ 0` with `Δt/2^b ≤ CFL_e`; `b_cell` is the
/// smallest `b` with `Δt/2^b ≤ Δt̄` when `η_t > τ_cell`, else 0.
pub fn substep_count(dt: f64, cfl: f64, eta_t: f64, tau_cell: f64, dt_bar: f64) -> (u32, u32, u32) {
    let smallest = |limit: f64| -> u32 {
        let mut b = 0;
        while b < MAX_SUBSTEP_EXPONENT + 1 && dt / f64::from(1u32 << b.min(31)) > limit {
            b += 1;
        }
        b
    };
    let b_cfl = if cfl.is_finite() { smallest(cfl) } else { 0 };
    let b_cell = if eta_t > tau_cell && dt_bar > 0.0 { smallest(dt_bar) } else { 0 };
    let b = b_cfl.max(b_cell).min(MAX_SUBSTEP_EXPONENT);
    (1u32 << b, b_cfl, b_cell)
}

/// Substep assignment of one barrier step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub dt: f64,
    pub cfl: Vec<f64>,
    pub b_cfl: Vec<u32>,
    pub b_cell: Vec<u32>,
    pub substeps: Vec<u32>,
    pub max_s: u32,
}

impl StepPlan {
    pub fn new(ops: &ElementOps, dt: f64, eta_t: Option<&[f64]>, tau_cell: f64, dt_bar: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("barrier step must be positive, got {dt}")));
        }
        let n = ops.n_elements();
        if let Some(eta) = eta_t {
            if eta.len() != n {
                return Err(Error::Layout(format!("{} temporal indicators for {n} elements", eta.len())));
            }
        }
        let mut plan = StepPlan {
            dt,
            cfl: Vec::with_capacity(n),
            b_cfl: Vec::with_capacity(n),
            b_cell: Vec::with_capacity(n),
            substeps: Vec::with_capacity(n),
            max_s: 1,
        };
        for e in 0..n {
            let cfl = cfl_estimate(ops, e);
            let eta = eta_t.map_or(0.0, |v| v[e]);
            let (s, bc, bl) = substep_count(dt, cfl, eta, tau_cell, dt_bar);
            plan.cfl.push(cfl);
            plan.b_cfl.push(bc);
            plan.b_cell.push(bl);
            plan.substeps.push(s);
            plan.max_s = plan.max_s.max(s);
        }
        Ok(plan)
    }

    /// Plan with prescribed substep counts (powers of two).
    pub fn with_substeps(dt: f64, substeps: Vec<u32>) -> Result<Self> {
        if substeps.iter().any(|s| !s.is_power_of_two()) {
            return Err(Error::InvalidArgument("substep counts must be powers of two".into()));
        }
        let max_s = substeps.iter().copied().max().unwrap_or(1);
        let n = substeps.len();
        Ok(StepPlan {
            dt,
            cfl: vec![f64::INFINITY; n],
            b_cfl: substeps.iter().map(|s| s.trailing_zeros()).collect(),
            b_cell: vec![0; n],
            substeps,
            max_s,
        })
    }

    pub fn total_updates(&self) -> u64 {
        self.substeps.iter().map(|&s| u64::from(s)).sum()
    }

    /// Tick stride of element `e`.
    pub fn stride(&self, e: usize) -> u32 {
        self.max_s / self.substeps[e]
    }

    /// Explicit queue contents: `Q_i` for `i = 0..maxS`.
    pub fn queues(&self) -> Vec<Vec<usize>> {
        let mut q = vec![Vec::new(); self.max_s as usize];
        for e in 0..self.substeps.len() {
            let stride = self.stride(e) as usize;
            for k in 0..self.substeps[e] as usize {
                q[k * stride].push(e);
            }
        }
        q
    }
}

/// Nodal state of all elements with one buffered copy of the potential.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    pub generation: u64,
    pub n_nodes: usize,
    pub n_states: usize,
    pub phi: Vec<f64>,
    pub s: Vec<f64>,
    pub phi_prev: Vec<f64>,
    pub tick_curr: Vec<u32>,
    pub tick_prev: Vec<u32>,
    /// Time of tick 0 (the last barrier) and physical length of one tick.
    pub t_base: f64,
    pub tick_len: f64,
}

impl FieldState {
    pub fn new(generation: u64, n_nodes: usize, n_states: usize, phi: Vec<f64>, s: Vec<f64>, t: f64) -> Result<Self> {
        if phi.len() % n_nodes != 0 || s.len() != phi.len() * n_states {
            return Err(Error::Layout(format!(
                "{} potentials and {} states do not fit {n_nodes} nodes × {n_states} states",
                phi.len(),
                s.len()
            )));
        }
        let n_elem = phi.len() / n_nodes;
        Ok(Self {
            generation,
            n_nodes,
            n_states,
            phi_prev: phi.clone(),
            phi,
            s,
            tick_curr: vec![0; n_elem],
            tick_prev: vec![0; n_elem],
            t_base: t,
            tick_len: 0.0,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.tick_curr.len()
    }

    pub fn phi_of(&self, e: usize) -> &[f64] {
        &self.phi[e * self.n_nodes..(e + 1) * self.n_nodes]
    }

    pub fn t_curr(&self, e: usize) -> f64 {
        self.t_base + f64::from(self.tick_curr[e]) * self.tick_len
    }

    pub fn t_prev(&self, e: usize) -> f64 {
        self.t_base + f64::from(self.tick_prev[e]) * self.tick_len
    }

    /// Resets the tick bookkeeping to a barrier at time `t`.
    pub fn synchronize(&mut self, t: f64) {
        self.t_base = t;
        self.tick_len = 0.0;
        self.tick_curr.iter_mut().for_each(|v| *v = 0);
        self.tick_prev.iter_mut().for_each(|v| *v = 0);
        self.phi_prev.copy_from_slice(&self.phi);
    }

    fn trace_at_tick<'a>(&'a self, e: usize, tick: u32, scratch: &'a mut [f64]) -> &'a [f64] {
        let (tp, tc) = (self.tick_prev[e], self.tick_curr[e]);
        debug_assert!(tp <= tick && tick <= tc, "trace query {tick} outside [{tp}, {tc}]");
        let n = self.n_nodes;
        let r = e * n..(e + 1) * n;
        if tick == tc {
            &self.phi[r]
        } else if tick == tp {
            &self.phi_prev[r]
        } else {
            let theta = f64::from(tick - tp) / f64::from(tc - tp);
            for ((o, a), b) in scratch.iter_mut().zip(&self.phi_prev[r.clone()]).zip(&self.phi[r]) {
                *o = a + theta * (b - a);
            }
            scratch
        }
    }
}

/// Potential of `elem` linearly interpolated to `t_query`.
pub fn interpolate_neighbor(state: &FieldState, elem: usize, t_query: f64) -> Result<Vec<f64>> {
    if elem >= state.n_elements() {
        return Err(Error::InvalidArgument(format!("element {elem} out of range")));
    }
    let (tp, tc) = (state.t_prev(elem), state.t_curr(elem));
    let n = state.n_nodes;
    let r = elem * n..(elem + 1) * n;
    if t_query == tc {
        return Ok(state.phi[r].to_vec());
    }
    if t_query == tp {
        return Ok(state.phi_prev[r].to_vec());
    }
    if !(tp < t_query && t_query < tc) {
        return Err(Error::ContractViolation(format!(
            "interpolation time {t_query} outside [{tp}, {tc}] of element {elem}"
        )));
    }
    let theta = (t_query - tp) / (tc - tp);
    Ok(state.phi_prev[r.clone()]
        .iter()
        .zip(&state.phi[r])
        .map(|(a, b)| a + theta * (b - a))
        .collect())
}

/// Everything one element update needs besides the state.
pub struct Kernel<'a> {
    pub ops: &'a ElementOps,
    pub model: &'a IonicModel,
    pub stimuli: &'a [StimulusProtocol],
    /// Physical position of every node, element-major.
    pub positions: &'a [[f64; 2]],
    pub dim: usize,
}

impl Kernel<'_> {
    /// One explicit step of element `e` starting at time `t`. `rate` is
    /// scratch of one element's size.
    #[inline]
    pub fn advance_element<'n>(
        &self,
        e: usize,
        t: f64,
        dt: f64,
        phi_e: &mut [f64],
        s_e: &mut [f64],
        neighbor: impl FnMut(usize, usize) -> &'n [f64],
        rate: &mut [f64],
    ) {
        self.ops.diffusion_rate_into(e, phi_e, neighbor, rate);
        let n = phi_e.len();
        let ns = s_e.len() / n;
        let stim_on = self.stimuli.iter().any(|p| p.active_at(t));
        for q in 0..n {
            let stim = if stim_on {
                crate::ionics::total_stimulus(self.stimuli, self.positions[e * n + q], self.dim, t)
            } else {
                0.0
            };
            advance_node(self.model, &mut phi_e[q], &mut s_e[q * ns..(q + 1) * ns], rate[q], stim, dt);
        }
    }
}

/// Records violations of the scheduling invariants.
#[derive(Clone, Debug, Default, Serialize)]
pub struct InvariantMonitor {
    pub checks: u64,
    pub violations: Vec<String>,
}

impl InvariantMonitor {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn fail(&mut self, msg: String) {
        log::error!("scheduling invariant violated: {msg}");
        self.violations.push(msg);
    }

    pub fn check_plan(&mut self, plan: &StepPlan, ops: &ElementOps) {
        self.checks += 1;
        for (e, &s) in plan.substeps.iter().enumerate() {
            if !s.is_power_of_two() {
                self.fail(format!("S_{e} = {s} is not a power of two"));
            }
            if plan.max_s % s != 0 {
                self.fail(format!("S_{e} = {s} does not divide maxS = {}", plan.max_s));
            }
            if plan.dt / f64::from(s) > plan.cfl[e] && plan.b_cfl[e] < MAX_SUBSTEP_EXPONENT {
                self.fail(format!("Δt/S_{e} = {} exceeds CFL {}", plan.dt / f64::from(s), plan.cfl[e]));
            }
            for c in ops.couplings(e) {
                let t = plan.substeps[c.neighbor];
                let (a, b) = (s.max(t), s.min(t));
                if a % b != 0 || !(a / b).is_power_of_two() {
                    self.fail(format!("substep ratio {s}/{t} across face {e}-{} is not a power of two", c.neighbor));
                }
            }
        }
    }

    pub fn check_barrier(&mut self, plan: &StepPlan, state: &FieldState, updates: u64) {
        self.checks += 1;
        if let Some(e) = state.tick_curr.iter().position(|&t| t != plan.max_s) {
            self.fail(format!(
                "element {e} ended at tick {} instead of {}",
                state.tick_curr[e], plan.max_s
            ));
        }
        if updates != plan.total_updates() {
            self.fail(format!("{updates} updates executed, expected {}", plan.total_updates()));
        }
    }
}

/// Executes the sweeps of one barrier step on a fixed mesh.
///
/// Returns the number of element updates performed. `shuffle` permutes the
/// order inside every queue, which must not change the result.
pub fn lts_sweeps(kernel: &Kernel<'_>, state: &mut FieldState, plan: &StepPlan, shuffle: Option<&mut ChaCha8Rng>) -> Result<u64> {
    let n_elem = state.n_elements();
    if plan.substeps.len() != n_elem || kernel.ops.n_elements() != n_elem {
        return Err(Error::Layout(format!(
            "plan for {} elements, state has {n_elem}",
            plan.substeps.len()
        )));
    }
    kernel.ops.check_generation(state.generation)?;
    let n = state.n_nodes;
    let ns = state.n_states;
    let max_s = plan.max_s;
    let t0 = state.t_base;
    state.tick_len = plan.dt / f64::from(max_s);
    state.tick_curr.iter_mut().for_each(|v| *v = 0);
    state.tick_prev.iter_mut().for_each(|v| *v = 0);

    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); max_s as usize];
    queues[0] = (0..n_elem).collect();
    let mut rng = shuffle;
    let mut rate = vec![0.0; n];
    let mut own = vec![0.0; n];
    let max_couplings = (0..n_elem).map(|e| kernel.ops.couplings(e).len()).max().unwrap_or(0);
    let mut traces = vec![0.0; max_couplings * n];
    let mut updates = 0u64;

    for i in 0..max_s {
        let mut queue = std::mem::take(&mut queues[i as usize]);
        if let Some(r) = rng.as_deref_mut() {
            queue.shuffle(r);
        }
        for &e in &queue {
            let r = e * n..(e + 1) * n;
            state.phi_prev[r.clone()].copy_from_slice(&state.phi[r]);
            state.tick_prev[e] = state.tick_curr[e];
        }
        for &e in &queue {
            if state.tick_curr[e] != i {
                return Err(Error::ContractViolation(format!(
                    "element {e} is at tick {} but scheduled at {i}",
                    state.tick_curr[e]
                )));
            }
            let stride = plan.stride(e);
            let couplings = kernel.ops.couplings(e);
            for (k, c) in couplings.iter().enumerate() {
                let (tp, tc) = (state.tick_prev[c.neighbor], state.tick_curr[c.neighbor]);
                if !(tp <= i && i <= tc) {
                    return Err(Error::ContractViolation(format!(
                        "neighbor {} of {e} spans ticks [{tp}, {tc}], sweep {i}",
                        c.neighbor
                    )));
                }
                let slot = &mut traces[k * n..(k + 1) * n];
                let src = state.trace_at_tick(c.neighbor, i, &mut rate);
                slot.copy_from_slice(src);
            }
            own.copy_from_slice(&state.phi[e * n..(e + 1) * n]);
            let t = t0 + f64::from(i) * state.tick_len;
            let dt = plan.dt / f64::from(plan.substeps[e]);
            let s_e = &mut state.s[e * n * ns..(e + 1) * n * ns];
            kernel.advance_element(e, t, dt, &mut own, s_e, |k, _| &traces[k * n..(k + 1) * n], &mut rate);
            state.phi[e * n..(e + 1) * n].copy_from_slice(&own);
            state.tick_curr[e] = i + stride;
            updates += 1;
            let next = i + stride;
            if next < max_s {
                queues[next as usize].push(e);
            } else if next > max_s {
                return Err(Error::ContractViolation(format!(
                    "element {e} would overshoot the barrier (tick {next} of {max_s})"
                )));
            }
        }
    }
    Ok(updates)
}

/// One uniform explicit step of all elements from the same global state.
pub fn uniform_step(kernel: &Kernel<'_>, phi: &mut [f64], s: &mut [f64], t: f64, dt: f64) -> Result<()> {
    let n = kernel.ops.nodes_per_element();
    let n_elem = kernel.ops.n_elements();
    if phi.len() != n_elem * n {
        return Err(Error::Layout(format!("{} values for {n_elem} elements", phi.len())));
    }
    let ns = s.len() / phi.len();
    let old = phi.to_vec();
    let mut rate = vec![0.0; n];
    for e in 0..n_elem {
        let r = e * n..(e + 1) * n;
        kernel.advance_element(
            e,
            t,
            dt,
            &mut phi[r],
            &mut s[e * n * ns..(e + 1) * n * ns],
            |_, nb| &old[nb * n..(nb + 1) * n],
            &mut rate,
        );
    }
    Ok(())
}

/// Controls for the adaptive barrier loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SltsSettings {
    pub dt: f64,
    pub adapt: bool,
    pub tau_refine: f64,
    pub tau_coarsen: f64,
    /// Temporal indicator threshold; `None` disables cell substepping.
    pub tau_cell: Option<f64>,
    pub dt_bar: f64,
    /// Forces every element to the global step (uniform stepping, CFL ignored).
    pub uniform: bool,
    pub shuffle_seed: Option<u64>,
}

impl Default for SltsSettings {
    fn default() -> Self {
        Self {
            dt: 0.15,
            adapt: true,
            tau_refine: crate::indicators::DEFAULT_TAU_REFINE,
            tau_coarsen: crate::indicators::DEFAULT_TAU_REFINE / 3.0,
            tau_cell: None,
            dt_bar: 0.01,
            uniform: false,
            shuffle_seed: None,
        }
    }
}

/// Per barrier step statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub t: f64,
    pub n_elements: usize,
    pub updates: u64,
    pub max_s: u32,
    pub max_level: u8,
    pub refined: usize,
    pub coarsened: usize,
    pub recomputed: usize,
    pub wall_s: f64,
}

pub const STATS_HEADER: &str = "step,t_ms,elements,element_updates,max_substeps,max_level,refined,coarsened,recomputed,wall_s";

impl StepStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6}",
            self.step,
            self.t,
            self.n_elements,
            self.updates,
            self.max_s,
            self.max_level,
            self.refined,
            self.coarsened,
            self.recomputed,
            self.wall_s
        )
    }
}

pub fn write_stats_csv(mut w: impl Write, stats: &[StepStats]) -> Result<()> {
    writeln!(w, "{STATS_HEADER}")?;
    for s in stats {
        writeln!(w, "{}", s.csv_row())?;
    }
    Ok(())
}

/// Node positions of every element.
pub fn node_positions(mesh: &ForestMesh, basis: &Basis) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(mesh.n_active() * basis.n_nodes());
    for e in 0..mesh.n_active() {
        for q in 0..basis.n_nodes() {
            out.push(mesh.to_physical(e, basis.node_ref(q)));
        }
    }
    out
}

/// Adaptive monodomain simulation driven by barrier steps.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub mesh: ForestMesh,
    pub basis: Basis,
    pub ops: ElementOps,
    pub model: IonicModel,
    pub stimuli: Vec<StimulusProtocol>,
    pub settings: SltsSettings,
    pub state: FieldState,
    pub monitor: InvariantMonitor,
    pub stats: Vec<StepStats>,
    pub eta_s: Vec<f64>,
    pub eta_t: Vec<f64>,
    pub last_plan: Option<StepPlan>,
    transfer: TransferOps,
    positions: Vec<[f64; 2]>,
    t_start: f64,
    steps: u64,
    history: Option<(Vec<f64>, Vec<f64>, f64)>,
    rng: Option<ChaCha8Rng>,
}

impl Simulation {
    /// `init` maps a position to `(φ, s)` at `t0`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mesh: ForestMesh,
        basis: Basis,
        diffusion: DiffusionTensor,
        gamma: f64,
        model: IonicModel,
        stimuli: Vec<StimulusProtocol>,
        settings: SltsSettings,
        t0: f64,
        init: impl Fn([f64; 2]) -> (f64, [f64; crate::ionics::MAX_STATES]),
    ) -> Result<Self> {
        model.validate()?;
        for p in &stimuli {
            p.validate()?;
        }
        if !(settings.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("barrier step must be positive, got {}", settings.dt)));
        }
        if settings.adapt && !(settings.tau_coarsen < settings.tau_refine) {
            return Err(Error::InvalidArgument("tau_coarsen must be below tau_refine".into()));
        }
        let ops = assemble_operators(&mesh, &basis, &diffusion, gamma)?;
        let positions = node_positions(&mesh, &basis);
        let ns = model.n_states();
        let mut phi = Vec::with_capacity(positions.len());
        let mut s = Vec::with_capacity(positions.len() * ns);
        for x in &positions {
            let (p, st) = init(*x);
            phi.push(p);
            s.extend_from_slice(&st[..ns]);
        }
        let state = FieldState::new(mesh.generation(), basis.n_nodes(), ns, phi, s, t0)?;
        let rng = settings.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
        Ok(Self {
            transfer: TransferOps::new(&basis),
            eta_s: vec![0.0; mesh.n_active()],
            eta_t: vec![0.0; mesh.n_active()],
            mesh,
            basis,
            ops,
            model,
            stimuli,
            settings,
            state,
            monitor: InvariantMonitor::default(),
            stats: Vec::new(),
            last_plan: None,
            positions,
            t_start: t0,
            steps: 0,
            history: None,
            rng,
        })
    }

    pub fn time(&self) -> f64 {
        self.t_start + self.steps as f64 * self.settings.dt
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn total_updates(&self) -> u64 {
        self.stats.iter().map(|s| s.updates).sum()
    }

    pub fn kernel(&self) -> Kernel<'_> {
        Kernel {
            ops: &self.ops,
            model: &self.model,
            stimuli: &self.stimuli,
            positions: &self.positions,
            dim: self.mesh.dim(),
        }
    }

    fn clamp_gates(&mut self) {
        let mask = self.model.gate_mask().to_vec();
        let ns = mask.len();
        for (i, v) in self.state.s.iter_mut().enumerate() {
            if mask[i % ns] {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }

    /// Temporal indicator over the previous barrier interval, or over a
    /// reaction-only predictor step on the first call.
    fn temporal_indicator(&self) -> Result<Vec<f64>> {
        let t = self.time();
        let current = StateView {
            phi: &self.state.phi,
            s: &self.state.s,
            t,
        };
        match &self.history {
            Some((phi, s, th)) if phi.len() == self.state.phi.len() => rvt_indicator(
                &self.model,
                &self.mesh,
                &self.basis,
                &self.stimuli,
                StateView { phi, s, t: *th },
                current,
            ),
            _ => {
                let dt = self.settings.dt;
                let mut phi = self.state.phi.clone();
                let mut s = self.state.s.clone();
                let ns = self.state.n_states;
                for (q, p) in phi.iter_mut().enumerate() {
                    let stim = crate::ionics::total_stimulus(&self.stimuli, self.positions[q], self.mesh.dim(), t);
                    advance_node(&self.model, p, &mut s[q * ns..(q + 1) * ns], 0.0, stim, dt);
                }
                rvt_indicator(
                    &self.model,
                    &self.mesh,
                    &self.basis,
                    &self.stimuli,
                    current,
                    StateView { phi: &phi, s: &s, t: t + dt },
                )
            }
        }
    }

    fn apply_delta(&mut self, delta: &crate::mesh::RefinementDelta) -> Result<()> {
        let n_new = self.mesh.n_active();
        let ns = self.state.n_states;
        let phi = transfer_field(&self.transfer, delta, &self.state.phi, 1, n_new)?;
        let s = transfer_field(&self.transfer, delta, &self.state.s, ns, n_new)?;
        self.eta_t = transfer_element_scalar(delta, &self.eta_t, n_new)?;
        self.eta_s = transfer_element_scalar(delta, &self.eta_s, n_new)?;
        let t = self.state.t_base;
        self.state = FieldState::new(self.mesh.generation(), self.basis.n_nodes(), ns, phi, s, t)?;
        self.clamp_gates();
        Ok(())
    }

    /// Indicators, adaptation and reassembly at the current barrier.
    fn adapt(&mut self) -> Result<(usize, usize)> {
        self.eta_t = if self.settings.tau_cell.is_some() {
            self.temporal_indicator()?
        } else {
            vec![0.0; self.mesh.n_active()]
        };
        if !self.settings.adapt {
            self.eta_s = kelly_indicator(&self.mesh, &self.ops, &self.state.phi)?;
            return Ok((0, 0));
        }
        self.eta_s = kelly_indicator(&self.mesh, &self.ops, &self.state.phi)?;
        let (refine, coarsen) = mark_elements(&self.eta_s, self.settings.tau_refine, self.settings.tau_coarsen, &self.mesh)?;
        let mut n_ref = 0;
        let mut coarsen_now = coarsen;
        if !refine.is_empty() {
            let delta = self.mesh.refine(self.mesh.generation(), &refine)?;
            n_ref = delta.refined.len();
            if !delta.is_empty() {
                let kept = delta.kept_map();
                coarsen_now = coarsen_now.iter().filter_map(|e| kept.get(e).copied()).collect();
                self.apply_delta(&delta)?;
            }
        }
        let mut n_coarse = 0;
        if !coarsen_now.is_empty() {
            let delta = self.mesh.coarsen(self.mesh.generation(), &coarsen_now)?;
            n_coarse = delta.coarsened.len();
            if !delta.is_empty() {
                self.apply_delta(&delta)?;
            }
        }
        if n_ref + n_coarse > 0 {
            self.ops.reassemble(&self.mesh)?;
            self.positions = node_positions(&self.mesh, &self.basis);
            self.history = None;
        } else {
            self.ops.reassemble(&self.mesh)?;
        }
        Ok((n_ref, n_coarse))
    }

    /// Advances the solution by one barrier step.
    pub fn barrier_step(&mut self) -> Result<StepStats> {
        let clock = Instant::now();
        let t = self.time();
        self.state.synchronize(t);
        let (refined, coarsened) = self.adapt()?;
        let plan = if self.settings.uniform {
            StepPlan::with_substeps(self.settings.dt, vec![1; self.mesh.n_active()])?
        } else {
            StepPlan::new(
                &self.ops,
                self.settings.dt,
                Some(&self.eta_t),
                self.settings.tau_cell.unwrap_or(f64::INFINITY),
                self.settings.dt_bar,
            )?
        };
        if !self.settings.uniform {
            self.monitor.check_plan(&plan, &self.ops);
        }
        if self.settings.tau_cell.is_some() {
            self.history = Some((self.state.phi.clone(), self.state.s.clone(), t));
        }
        let mut rng = self.rng.take();
        let kernel = Kernel {
            ops: &self.ops,
            model: &self.model,
            stimuli: &self.stimuli,
            positions: &self.positions,
            dim: self.mesh.dim(),
        };
        let updates = lts_sweeps(&kernel, &mut self.state, &plan, rng.as_mut());
        self.rng = rng;
        let updates = updates?;
        self.monitor.check_barrier(&plan, &self.state, updates);
        self.steps += 1;
        let t_new = self.time();
        if self.state.phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: t_new });
        }
        self.state.synchronize(t_new);
        let stats = StepStats {
            step: self.steps,
            t: t_new,
            n_elements: self.mesh.n_active(),
            updates,
            max_s: plan.max_s,
            max_level: self.mesh.max_active_level(),
            refined,
            coarsened,
            recomputed: self.ops.recomputed(),
            wall_s: clock.elapsed().as_secs_f64(),
        };
        self.last_plan = Some(plan);
        self.stats.push(stats.clone());
        Ok(stats)
    }

    /// Runs barrier steps until `t_end` (rounded to whole steps), calling
    /// `observer` after every step.
    pub fn run_until(&mut self, t_end: f64, mut observer: impl FnMut(&Simulation) -> Result<()>) -> Result<()> {
        let n = ((t_end - self.t_start) / self.settings.dt - 1e-9).ceil().max(0.0) as u64;
        while self.steps < n {
            self.barrier_step()?;
            observer(self)?;
        }
        Ok(())
    }

    /// Potential at a point, or `None` outside the mesh.
    pub fn sample(&self, x: [f64; 2]) -> Option<f64> {
        let (e, xi) = self.mesh.locate(x)?;
        let n = self.basis.n_nodes();
        Some(self.basis.evaluate(&self.state.phi[e * n..(e + 1) * n], xi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cable(levels: &[usize]) -> (ForestMesh, Basis, ElementOps) {
        let mut mesh = ForestMesh::build_cartesian_root(&[4.0], &[4], 1).unwrap();
        for &e in levels {
            let g = mesh.generation();
            mesh.refine(g, &[e]).unwrap();
        }
        let basis = Basis::new(1, 1).unwrap();
        let ops = assemble_operators(&mesh, &basis, &DiffusionTensor::isotropic(1, 0.1334).unwrap(), 4.0).unwrap();
        (mesh, basis, ops)
    }

    #[test]
    fn substep_arithmetic() {
        assert_eq!(substep_count(0.15, 0.05, 0.0, 1.0, 0.01), (4, 2, 0));
        assert_eq!(substep_count(0.15, 0.2, 0.0, 1.0, 0.01).0, 1);
        let (s, _, b_cell) = substep_count(0.15, 1.0, 2.0, 1.0, 0.01);
        assert_eq!(b_cell, 4);
        assert!(s >= 16);
        assert_eq!(substep_count(0.15, f64::INFINITY, 0.0, 1.0, 0.01).0, 1);
        // exact boundary: Δt/2 = CFL needs exactly one halving
        assert_eq!(substep_count(0.2, 0.1, 0.0, 1.0, 0.01), (2, 1, 0));
    }

    #[test]
    fn zero_diffusion_gives_infinite_cfl() {
        let mesh = ForestMesh::build_cartesian_root(&[2.0, 2.0], &[2, 2], 2).unwrap();
        let basis = Basis::new(1, 2).unwrap();
        let ops = assemble_operators(&mesh, &basis, &DiffusionTensor::isotropic(2, 0.0).unwrap(), 4.0).unwrap();
        assert!(cfl_estimate(&ops, 0).is_infinite());
    }

    #[test]
    fn queues_follow_strides() {
        let plan = StepPlan::with_substeps(1.0, vec![1, 4, 2]).unwrap();
        let q = plan.queues();
        assert_eq!(q, vec![vec![0, 1, 2], vec![1], vec![1, 2], vec![1]]);
        assert_eq!(plan.total_updates(), 7);
        assert!(StepPlan::with_substeps(1.0, vec![3]).is_err());
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let mut st = FieldState::new(0, 2, 1, vec![1.0, 2.0], vec![0.0, 0.0], 0.0).unwrap();
        st.phi_prev = vec![0.0, 0.0];
        st.tick_prev[0] = 0;
        st.tick_curr[0] = 4;
        st.tick_len = 0.25;
        assert_eq!(interpolate_neighbor(&st, 0, 1.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(interpolate_neighbor(&st, 0, 0.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(interpolate_neighbor(&st, 0, 0.5).unwrap(), vec![0.5, 1.0]);
        assert!(matches!(interpolate_neighbor(&st, 0, 1.5), Err(Error::ContractViolation(_))));
        let v = interpolate_neighbor(&st, 0, 0.3).unwrap();
        assert!((v[0] - 0.3).abs() < 1e-14 && (v[1] - 0.6).abs() < 1e-14);
    }

    fn kernel_parts(mesh: &ForestMesh, basis: &Basis) -> (IonicModel, Vec<[f64; 2]>) {
        (IonicModel::default(), node_positions(mesh, basis))
    }

    #[test]
    fn all_ones_schedule_equals_uniform_step() {
        let (mesh, basis, ops) = cable(&[1]);
        let (model, pos) = kernel_parts(&mesh, &basis);
        let kernel = Kernel {
            ops: &ops,
            model: &model,
            stimuli: &[],
            positions: &pos,
            dim: 1,
        };
        let n = pos.len();
        let phi: Vec<f64> = (0..n).map(|i| -85.0 + 7.0 * ((i * 13) % 11) as f64).collect();
        let s: Vec<f64> = (0..n).map(|i| 0.1 * (i % 10) as f64).collect();
        let mut st = FieldState::new(ops.generation(), 2, 1, phi.clone(), s.clone(), 0.0).unwrap();
        let plan = StepPlan::with_substeps(0.05, vec![1; mesh.n_active()]).unwrap();
        let updates = lts_sweeps(&kernel, &mut st, &plan, None).unwrap();
        assert_eq!(updates, mesh.n_active() as u64);
        let (mut p2, mut s2) = (phi, s);
        uniform_step(&kernel, &mut p2, &mut s2, 0.0, 0.05).unwrap();
        assert_eq!(st.phi, p2);
        assert_eq!(st.s, s2);
    }

    #[test]
    fn two_level_schedule_uses_midpoint_trace() {
        // element 0 takes one step, element 1 two; at the second substep of
        // element 1 its neighbor trace is the mean of the buffered and new values
        let (mesh, basis, ops) = cable(&[]);
        let (model, pos) = kernel_parts(&mesh, &basis);
        let kernel = Kernel {
            ops: &ops,
            model: &model,
            stimuli: &[],
            positions: &pos,
            dim: 1,
        };
        let n = pos.len();
        let phi: Vec<f64> = (0..n).map(|i| -85.0 + 3.0 * i as f64).collect();
        let s = vec![1.0; n];
        let mut st = FieldState::new(ops.generation(), 2, 1, phi.clone(), s.clone(), 0.0).unwrap();
        let plan = StepPlan::with_substeps(0.1, vec![1, 2, 2, 2]).unwrap();
        lts_sweeps(&kernel, &mut st, &plan, None).unwrap();

        // manual oracle for element 1
        let mut p0 = phi[0..2].to_vec();
        let mut s0 = s[0..2].to_vec();
        let mut rate = vec![0.0; 2];
        kernel.advance_element(0, 0.0, 0.1, &mut p0, &mut s0, |_, nb| &phi[nb * 2..nb * 2 + 2], &mut rate);
        let mut p1 = phi[2..4].to_vec();
        let mut s1 = s[2..4].to_vec();
        kernel.advance_element(1, 0.0, 0.05, &mut p1, &mut s1, |_, nb| &phi[nb * 2..nb * 2 + 2], &mut rate);
        let mut p2 = phi[4..6].to_vec();
        let mut s2 = s[4..6].to_vec();
        kernel.advance_element(2, 0.0, 0.05, &mut p2, &mut s2, |_, nb| &phi[nb * 2..nb * 2 + 2], &mut rate);
        let mid0: Vec<f64> = phi[0..2].iter().zip(&p0).map(|(a, b)| a + 0.5 * (b - a)).collect();
        let mut q1 = p1.clone();
        let neighbors: Vec<usize> = ops.couplings(1).iter().map(|c| c.neighbor).collect();
        kernel.advance_element(
            1,
            0.05,
            0.05,
            &mut q1,
            &mut s1,
            |k, _| if neighbors[k] == 0 { &mid0 } else { &p2 },
            &mut rate,
        );
        for (a, b) in st.phi[2..4].iter().zip(&q1) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn shuffled_queues_are_bitwise_identical() {
        let (mesh, basis, ops) = cable(&[1, 2, 3]);
        let (model, pos) = kernel_parts(&mesh, &basis);
        let kernel = Kernel {
            ops: &ops,
            model: &model,
            stimuli: &[],
            positions: &pos,
            dim: 1,
        };
        let n = pos.len();
        let phi: Vec<f64> = (0..n).map(|i| -85.0 + 90.0 * ((i as f64) * 0.7).sin().abs()).collect();
        let s = vec![0.8; n];
        let plan = StepPlan::new(&ops, 0.15, None, 1.0, 0.01).unwrap();
        assert!(plan.max_s > 1);
        let mut a = FieldState::new(ops.generation(), 2, 1, phi.clone(), s.clone(), 0.0).unwrap();
        lts_sweeps(&kernel, &mut a, &plan, None).unwrap();
        for seed in 0..5 {
            let mut b = FieldState::new(ops.generation(), 2, 1, phi.clone(), s.clone(), 0.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            lts_sweeps(&kernel, &mut b, &plan, Some(&mut rng)).unwrap();
            assert_eq!(a.phi, b.phi);
            assert_eq!(a.s, b.s);
        }
    }

    #[test]
    fn stale_state_rejected() {
        let (mesh, basis, ops) = cable(&[]);
        let (model, pos) = kernel_parts(&mesh, &basis);
        let kernel = Kernel {
            ops: &ops,
            model: &model,
            stimuli: &[],
            positions: &pos,
            dim: 1,
        };
        let mut st = FieldState::new(ops.generation() + 1, 2, 1, vec![0.0; 8], vec![0.0; 8], 0.0).unwrap();
        let plan = StepPlan::with_substeps(0.1, vec![1; 4]).unwrap();
        assert!(matches!(lts_sweeps(&kernel, &mut st, &plan, None), Err(Error::StaleTopology { .. })));
    }

    #[test]
    fn stats_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_stats_csv(&mut buf, &[StepStats::default()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,t_ms"));
        assert_eq!(text.lines().count(), 2);
    }
}

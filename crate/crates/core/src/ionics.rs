//! Ionic cell models, the partitioned exponential integrator for gates, and
//! applied stimuli.
//!
//! Potentials are in mV and times in ms. Models are written in a normalized
//! voltage `v` and mapped to the physical potential by `φ = offset + scale·v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the number of state variables of any shipped model.
pub const MAX_STATES: usize = 2;

/// Reaction rates at one node.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IonicRates {
    /// `-I_ion` in mV/ms (stimulus excluded).
    pub dphi: f64,
    /// `(h∞, τ)` for gate components; unused entries are zero.
    pub gates: [(f64, f64); MAX_STATES],
    /// Forward rates for non-gate components; unused entries are zero.
    pub ds: [f64; MAX_STATES],
}

/// Interface for a cell model with Hodgkin–Huxley style gates.
pub trait CellModel {
    fn n_states(&self) -> usize;
    fn gate_mask(&self) -> &[bool];
    /// `(φ_rest, s_rest)`.
    fn rest_state(&self) -> (f64, [f64; MAX_STATES]);
    /// `(offset, scale)` with `φ = offset + scale · v`.
    fn phi_scale(&self) -> (f64, f64);
    /// Rates without input validation.
    fn rates(&self, phi: f64, s: &[f64]) -> IonicRates;
}

/// Mitchell–Schaeffer two-variable model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitchellSchaeffer {
    pub tau_in: f64,
    pub tau_out: f64,
    pub tau_open: f64,
    pub tau_close: f64,
    pub v_gate: f64,
}

impl Default for MitchellSchaeffer {
    fn default() -> Self {
        Self {
            tau_in: 0.3,
            tau_out: 6.0,
            tau_open: 120.0,
            tau_close: 150.0,
            v_gate: 0.13,
        }
    }
}

/// FitzHugh–Nagumo with a recovery variable `w`; no gates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitzHughNagumo {
    pub c1: f64,
    pub a: f64,
    pub c2: f64,
    pub b: f64,
}

impl Default for FitzHughNagumo {
    fn default() -> Self {
        Self {
            c1: 0.26,
            a: 0.13,
            c2: 0.1,
            b: 0.013,
        }
    }
}

pub const PHI_OFFSET: f64 = -85.0;
pub const PHI_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum IonicModel {
    MitchellSchaeffer(MitchellSchaeffer),
    FitzHughNagumo(FitzHughNagumo),
}

impl Default for IonicModel {
    fn default() -> Self {
        IonicModel::MitchellSchaeffer(MitchellSchaeffer::default())
    }
}

const MS_MASK: [bool; 1] = [true];
const FHN_MASK: [bool; 1] = [false];

impl IonicModel {
    pub fn name(&self) -> &'static str {
        match self {
            IonicModel::MitchellSchaeffer(_) => "mitchell_schaeffer",
            IonicModel::FitzHughNagumo(_) => "fitzhugh_nagumo",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let taus: Vec<f64> = match self {
            IonicModel::MitchellSchaeffer(m) => vec![m.tau_in, m.tau_out, m.tau_open, m.tau_close],
            IonicModel::FitzHughNagumo(_) => vec![],
        };
        if taus.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::Model(format!("time constants must be positive: {taus:?}")));
        }
        Ok(())
    }

    pub fn to_v(&self, phi: f64) -> f64 {
        let (o, s) = self.phi_scale();
        (phi - o) / s
    }

    pub fn to_phi(&self, v: f64) -> f64 {
        let (o, s) = self.phi_scale();
        o + s * v
    }

    /// Rate of the state components alone (`g(φ, s)`), gates written as
    /// `(h∞ - h)/τ`. Used by the temporal indicator.
    pub fn state_rates(&self, phi: f64, s: &[f64]) -> [f64; MAX_STATES] {
        let r = self.rates(phi, s);
        let mut out = [0.0; MAX_STATES];
        for (k, is_gate) in self.gate_mask().iter().enumerate() {
            out[k] = if *is_gate {
                (r.gates[k].0 - s[k]) / r.gates[k].1
            } else {
                r.ds[k]
            };
        }
        out
    }
}

impl CellModel for IonicModel {
    fn n_states(&self) -> usize {
        1
    }

    fn gate_mask(&self) -> &[bool] {
        match self {
            IonicModel::MitchellSchaeffer(_) => &MS_MASK,
            IonicModel::FitzHughNagumo(_) => &FHN_MASK,
        }
    }

    fn rest_state(&self) -> (f64, [f64; MAX_STATES]) {
        match self {
            IonicModel::MitchellSchaeffer(_) => (PHI_OFFSET, [1.0, 0.0]),
            IonicModel::FitzHughNagumo(_) => (PHI_OFFSET, [0.0, 0.0]),
        }
    }

    fn phi_scale(&self) -> (f64, f64) {
        (PHI_OFFSET, PHI_SCALE)
    }

    #[inline]
    fn rates(&self, phi: f64, s: &[f64]) -> IonicRates {
        let v = (phi - PHI_OFFSET) / PHI_SCALE;
        let mut r = IonicRates::default();
        match self {
            IonicModel::MitchellSchaeffer(m) => {
                let h = s[0];
                let dv = h * v * v * (1.0 - v) / m.tau_in - v / m.tau_out;
                r.dphi = PHI_SCALE * dv;
                r.gates[0] = if v < m.v_gate { (1.0, m.tau_open) } else { (0.0, m.tau_close) };
            }
            IonicModel::FitzHughNagumo(f) => {
                let w = s[0];
                let dv = f.c1 * v * (v - f.a) * (1.0 - v) - f.c2 * w;
                r.dphi = PHI_SCALE * dv;
                r.ds[0] = f.b * (v - w);
            }
        }
        r
    }
}

/// Reaction rates `(dφ, gate parameters, non-gate rates)` with the stimulus
/// (mV/ms) added to `dφ`.
pub fn ionic_rhs(model: &IonicModel, phi: f64, s: &[f64], _t: f64, stim: f64) -> Result<IonicRates> {
    if !phi.is_finite() || !stim.is_finite() || s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDomain(format!("non-finite ionic input φ={phi} s={s:?} stim={stim}")));
    }
    if s.len() < model.n_states() {
        return Err(Error::Layout(format!("model needs {} states, got {}", model.n_states(), s.len())));
    }
    let mut r = model.rates(phi, s);
    r.dphi += stim;
    Ok(r)
}

#[inline]
fn gate_update(h: f64, h_inf: f64, tau: f64, dt: f64) -> f64 {
    h_inf + (h - h_inf) * (-dt / tau).exp()
}

/// One partitioned step of the state variables: exponential for gates,
/// forward Euler otherwise.
pub fn rush_larsen_step(model: &IonicModel, phi: f64, s: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let r = model.rates(phi, s);
    let mut out = s.to_vec();
    for (k, is_gate) in model.gate_mask().iter().enumerate() {
        if *is_gate {
            let (h_inf, tau) = r.gates[k];
            if !(tau > 0.0) {
                return Err(Error::Model(format!("gate {k} has non-positive time constant {tau}")));
            }
            out[k] = gate_update(s[k], h_inf, tau, dt);
        } else {
            out[k] = s[k] + dt * r.ds[k];
        }
    }
    Ok(out)
}

/// Combined explicit update of one node: forward Euler for the potential
/// (diffusion + reaction + stimulus) and the partitioned update for states.
/// Shared by every time stepper so that their results agree bitwise.
#[inline]
pub fn advance_node(model: &IonicModel, phi: &mut f64, s: &mut [f64], diffusion: f64, stim: f64, dt: f64) {
    let r = model.rates(*phi, s);
    let mask = model.gate_mask();
    for k in 0..mask.len() {
        if mask[k] {
            let (h_inf, tau) = r.gates[k];
            s[k] = gate_update(s[k], h_inf, tau, dt);
        } else {
            s[k] += dt * r.ds[k];
        }
    }
    *phi += dt * (diffusion + r.dphi + stim);
}

/// Support of a stimulus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StimulusRegion {
    Box { min: [f64; 2], max: [f64; 2] },
    Ball { center: [f64; 2], radius: f64 },
}

/// Applied current in mV/ms over a region and a time window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusProtocol {
    pub region: StimulusRegion,
    pub amplitude: f64,
    pub t0: f64,
    pub t1: f64,
    pub spatial_decay: bool,
    pub temporal_decay: bool,
}

impl StimulusProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > self.t0) {
            return Err(Error::InvalidArgument(format!("stimulus window [{}, {}] is empty", self.t0, self.t1)));
        }
        match self.region {
            StimulusRegion::Box { min, max } => {
                if min.iter().zip(&max).any(|(a, b)| !(b >= a)) {
                    return Err(Error::InvalidArgument("stimulus box has min > max".into()));
                }
            }
            StimulusRegion::Ball { radius, .. } => {
                if !(radius > 0.0) {
                    return Err(Error::InvalidArgument("stimulus radius must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn active_at(&self, t: f64) -> bool {
        t >= self.t0 && t < self.t1
    }

    pub fn temporal_factor(&self, t: f64) -> f64 {
        if !self.active_at(t) {
            return 0.0;
        }
        if self.temporal_decay {
            1.0 - (t - self.t0) / (self.t1 - self.t0)
        } else {
            1.0
        }
    }

    /// Spatial factor in `[0, 1]`; `dim` limits which coordinates are checked.
    pub fn spatial_factor(&self, x: [f64; 2], dim: usize) -> f64 {
        match self.region {
            StimulusRegion::Box { min, max } => {
                let mut rel: f64 = 0.0;
                for a in 0..dim {
                    if x[a] < min[a] || x[a] > max[a] {
                        return 0.0;
                    }
                    let half = 0.5 * (max[a] - min[a]);
                    if half > 0.0 {
                        rel = rel.max((x[a] - 0.5 * (min[a] + max[a])).abs() / half);
                    }
                }
                if self.spatial_decay {
                    1.0 - rel
                } else {
                    1.0
                }
            }
            StimulusRegion::Ball { center, radius } => {
                let r2: f64 = (0..dim).map(|a| (x[a] - center[a]).powi(2)).sum();
                let r = r2.sqrt();
                if r > radius {
                    0.0
                } else if self.spatial_decay {
                    1.0 - r / radius
                } else {
                    1.0
                }
            }
        }
    }
}

/// Stimulus current at `x` and `t` (mV/ms).
pub fn stimulus_eval(protocol: &StimulusProtocol, x: [f64; 2], dim: usize, t: f64) -> f64 {
    let tf = protocol.temporal_factor(t);
    if tf == 0.0 {
        return 0.0;
    }
    protocol.amplitude * protocol.spatial_factor(x, dim) * tf
}

/// Sum of all protocols at one point.
pub fn total_stimulus(protocols: &[StimulusProtocol], x: [f64; 2], dim: usize, t: f64) -> f64 {
    protocols.iter().map(|p| stimulus_eval(p, x, dim, t)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms() -> IonicModel {
        IonicModel::default()
    }

    #[test]
    fn ms_rest_is_fixed_point() {
        let m = ms();
        let (phi, s) = m.rest_state();
        let r = ionic_rhs(&m, phi, &s, 0.0, 0.0).unwrap();
        assert!(r.dphi.abs() <= 1e-10);
        assert!(m.state_rates(phi, &s)[0].abs() <= 1e-10);
    }

    #[test]
    fn fhn_rest_is_fixed_point() {
        let m = IonicModel::FitzHughNagumo(FitzHughNagumo::default());
        let (phi, s) = m.rest_state();
        let r = ionic_rhs(&m, phi, &s, 0.0, 0.0).unwrap();
        assert!(r.dphi.abs() <= 1e-10 && r.ds[0].abs() <= 1e-10);
    }

    #[test]
    fn ms_gate_closes_above_threshold() {
        let m = ms();
        let r = ionic_rhs(&m, m.to_phi(0.5), &[0.7], 0.0, 0.0).unwrap();
        assert_eq!(r.gates[0], (0.0, 150.0));
        let r = ionic_rhs(&m, m.to_phi(0.05), &[0.7], 0.0, 0.0).unwrap();
        assert_eq!(r.gates[0], (1.0, 120.0));
    }

    #[test]
    fn fhn_rates_match_formula() {
        let m = IonicModel::FitzHughNagumo(FitzHughNagumo::default());
        let (v, w) = (0.5, 0.1);
        let r = ionic_rhs(&m, -85.0 + 100.0 * v, &[w], 0.0, 0.0).unwrap();
        let dv = 0.26 * 0.5 * (0.5 - 0.13) * 0.5 - 0.1 * 0.1;
        assert!((r.dphi - 100.0 * dv).abs() < 1e-12);
        assert!((r.ds[0] - 0.013 * (0.5 - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn stimulus_adds_to_potential_rate() {
        let m = ms();
        let (phi, s) = m.rest_state();
        let r = ionic_rhs(&m, phi, &s, 0.0, 7.5).unwrap();
        assert_eq!(r.dphi, 7.5);
    }

    #[test]
    fn non_finite_input_rejected() {
        let m = ms();
        assert!(matches!(ionic_rhs(&m, f64::NAN, &[1.0], 0.0, 0.0), Err(Error::NumericalDomain(_))));
        assert!(matches!(ionic_rhs(&m, 0.0, &[f64::INFINITY], 0.0, 0.0), Err(Error::NumericalDomain(_))));
    }

    #[test]
    fn rush_larsen_equilibrium_and_limit() {
        let m = ms();
        // v below gate threshold: h∞ = 1
        let phi = m.to_phi(0.0);
        assert_eq!(rush_larsen_step(&m, phi, &[1.0], 3.0).unwrap()[0], 1.0);
        let h = rush_larsen_step(&m, phi, &[0.2], 1e6 * 120.0).unwrap()[0];
        assert!((h - 1.0).abs() < 1e-12);
        assert!(rush_larsen_step(&m, phi, &[0.2], 0.0).is_err());
        let bad = IonicModel::MitchellSchaeffer(MitchellSchaeffer {
            tau_open: -1.0,
            ..Default::default()
        });
        assert!(matches!(rush_larsen_step(&bad, phi, &[0.2], 1.0), Err(Error::Model(_))));
    }

    /// Plateau phase from `v = 0.9, h = 0.6`; returns `(φ, h)` at 20 ms.
    fn plateau(dt: f64, exponential: bool) -> (f64, f64) {
        let m = ms();
        let (mut phi, mut s) = (m.to_phi(0.9), [0.6, 0.0]);
        let steps = (20.0 / dt).round() as usize;
        for _ in 0..steps {
            if exponential {
                advance_node(&m, &mut phi, &mut s, 0.0, 0.0, dt);
            } else {
                let r = m.rates(phi, &s);
                s[0] += dt * (r.gates[0].0 - s[0]) / r.gates[0].1;
                phi += dt * r.dphi;
            }
        }
        (phi, s[0])
    }

    #[test]
    fn partitioned_step_converges_at_first_order() {
        let reference = plateau(0.1 / 1000.0, false);
        let dts = [0.1, 0.05, 0.025, 0.0125];
        let errs: Vec<f64> = dts
            .iter()
            .map(|&dt| {
                let (phi, h) = plateau(dt, true);
                assert!((h - reference.1).abs() < 1e-6);
                (phi - reference.0).abs()
            })
            .collect();
        let n = dts.len() as f64;
        let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope - 1.0).abs() <= 0.1, "slope {slope}, errors {errs:?}");
    }

    #[test]
    fn exponential_gate_step_is_exact_for_frozen_coefficients() {
        let m = ms();
        let phi = m.to_phi(0.0);
        for &dt in &[0.5, 8.0, 64.0] {
            let rl = rush_larsen_step(&m, phi, &[0.2], dt).unwrap()[0];
            let exact = 1.0 + (0.2 - 1.0) * (-dt / 120.0f64).exp();
            assert!((rl - exact).abs() < 1e-14);
        }
    }

    #[test]
    fn rest_state_does_not_drift() {
        let m = ms();
        for &dt in &[0.01, 0.1, 1.0] {
            let (mut phi, mut s) = m.rest_state();
            for _ in 0..1000 {
                advance_node(&m, &mut phi, &mut s, 0.0, 0.0, dt);
            }
            assert!((phi - m.rest_state().0).abs() <= 1e-8);
            assert!((s[0] - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn single_cell_action_potential() {
        let m = ms();
        let (mut phi, mut s) = m.rest_state();
        let dt = 0.01;
        let mut peak = phi;
        let mut apd_end = None;
        let steps = (500.0 / dt) as usize;
        for k in 0..steps {
            let t = k as f64 * dt;
            let stim = if t < 1.0 { 50.0 } else { 0.0 };
            advance_node(&m, &mut phi, &mut s, 0.0, stim, dt);
            peak = peak.max(phi);
            if t > 5.0 && apd_end.is_none() && phi < -85.0 + 0.1 * (peak + 85.0) {
                apd_end = Some(t);
            }
        }
        assert!(peak > 0.0, "no upstroke, peak {peak}");
        let apd = apd_end.expect("no repolarization");
        assert!((200.0..400.0).contains(&apd), "APD90 {apd}");
        assert!((phi + 85.0).abs() < 0.01 * 100.0, "φ(500) = {phi}");
    }

    #[test]
    fn stimulus_support_and_decay() {
        let p = StimulusProtocol {
            region: StimulusRegion::Ball {
                center: [1.0, 1.0],
                radius: 0.5,
            },
            amplitude: 100.0,
            t0: 0.0,
            t1: 2.0,
            spatial_decay: true,
            temporal_decay: true,
        };
        assert_eq!(stimulus_eval(&p, [3.0, 1.0], 2, 0.0), 0.0);
        assert_eq!(stimulus_eval(&p, [1.0, 1.0], 2, 0.0), 100.0);
        assert_eq!(stimulus_eval(&p, [1.0, 1.0], 2, 1.0), 50.0);
        assert_eq!(stimulus_eval(&p, [1.0, 1.0], 2, 2.0), 0.0);
        assert!((stimulus_eval(&p, [1.25, 1.0], 2, 0.0) - 50.0).abs() < 1e-12);
        // continuity at the end of the window
        assert!(stimulus_eval(&p, [1.0, 1.0], 2, 2.0 - 1e-9) < 1e-6);
    }

    #[test]
    fn box_stimulus_without_decay() {
        let p = StimulusProtocol {
            region: StimulusRegion::Box {
                min: [0.0, 0.0],
                max: [1.5, 0.0],
            },
            amplitude: 40.0,
            t0: 0.0,
            t1: 1.0,
            spatial_decay: false,
            temporal_decay: false,
        };
        assert_eq!(stimulus_eval(&p, [0.7, 3.0], 1, 0.5), 40.0);
        assert_eq!(stimulus_eval(&p, [1.6, 0.0], 1, 0.5), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn gates_stay_in_unit_interval(v in -0.5f64..1.5, h in 0.0f64..=1.0, dt in 1e-6f64..1e4) {
            let m = ms();
            let phi = m.to_phi(v);
            let out = rush_larsen_step(&m, phi, &[h], dt).unwrap()[0];
            prop_assert!((0.0..=1.0).contains(&out));
            let mut p = phi;
            let mut s = [h, 0.0];
            advance_node(&m, &mut p, &mut s, 0.0, 0.0, dt);
            prop_assert!((0.0..=1.0).contains(&s[0]));
        }
    }
}

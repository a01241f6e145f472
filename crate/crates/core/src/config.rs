//! Run configuration: flat `key = value` text with dotted section prefixes.
//!
//! ```text
//! preset = cable          # cable | strip | spiral; other keys override it
//! mesh.max_level = 3
//! amr.tau_refine = 0.75
//! lts.tau_cell = off
//! ```
//!
//! `#` starts a comment. Unknown and repeated keys are rejected with the
//! line number.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::benchmarks::{InitialCondition, PropagationSetup};
use crate::error::{Error, Result};
use crate::ionics::{FitzHughNagumo, IonicModel, MitchellSchaeffer, StimulusProtocol, StimulusRegion};
use crate::mesh::LEVEL_LIMIT;
use crate::sipg::DiffusionTensor;

/// Time integrator of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SolverKind {
    Slts,
    Uniform,
}

/// Validated run configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: String,
    pub setup: PropagationSetup,
    pub solver: SolverKind,
    /// Uniform refinement of the initial mesh (the mesh of a uniform run).
    pub initial_level: u8,
    /// Uniform solver step; the largest stable power-of-two fraction of the
    /// barrier step when unset.
    pub uniform_dt: Option<f64>,
    /// Not part of the hash.
    #[serde(skip)]
    pub output_dir: PathBuf,
    /// Snapshot every this many barrier steps; 0 writes only the initial and
    /// final states.
    pub snapshot_every: u64,
    pub write_vtk: bool,
    pub seed: Option<u64>,
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "preset",
    "solver",
    "seed",
    "mesh.dim",
    "mesh.extent",
    "mesh.roots",
    "mesh.max_level",
    "mesh.initial_level",
    "basis.order",
    "sipg.gamma",
    "diffusion.d",
    "time.dt",
    "time.t_end",
    "time.dt_bar",
    "time.uniform_dt",
    "amr.adapt",
    "amr.tau_refine",
    "amr.tau_coarsen",
    "lts.tau_cell",
    "model.name",
    "model.tau_in",
    "model.tau_out",
    "model.tau_open",
    "model.tau_close",
    "model.v_gate",
    "model.c1",
    "model.a",
    "model.c2",
    "model.b",
    "stimulus.region",
    "stimulus.min",
    "stimulus.max",
    "stimulus.center",
    "stimulus.radius",
    "stimulus.amplitude",
    "stimulus.t0",
    "stimulus.t1",
    "stimulus.spatial_decay",
    "stimulus.temporal_decay",
    "initial.kind",
    "initial.phi_left",
    "initial.phi_right",
    "initial.gate_bottom",
    "initial.gate_top",
    "initial.mirror",
    "output.dir",
    "output.snapshot_every",
    "output.vtk",
    "lat.spacing",
];

fn preset(name: &str) -> Option<PropagationSetup> {
    match name {
        "cable" => Some(PropagationSetup::cable()),
        "strip" => Some(PropagationSetup::strip()),
        "spiral" => Some(PropagationSetup::spiral()),
        _ => None,
    }
}

type Fail = String;

fn num<T: std::str::FromStr>(v: &str) -> Result<T, Fail> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn boolean(v: &str) -> Result<bool, Fail> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn list(v: &str) -> Result<Vec<f64>, Fail> {
    v.split(',').map(|t| num::<f64>(t.trim())).collect()
}

fn pair(v: &str) -> Result<[f64; 2], Fail> {
    let l = list(v)?;
    match l.len() {
        1 => Ok([l[0], 0.0]),
        2 => Ok([l[0], l[1]]),
        n => Err(format!("expected 1 or 2 values, got {n}")),
    }
}

fn stimulus(setup: &mut PropagationSetup) -> &mut StimulusProtocol {
    if setup.stimuli.is_empty() {
        setup.stimuli.push(PropagationSetup::cable().stimuli[0]);
    }
    &mut setup.stimuli[0]
}

fn gradient(setup: &mut PropagationSetup) -> Result<&mut InitialCondition, Fail> {
    match setup.initial {
        InitialCondition::Gradient { .. } => Ok(&mut setup.initial),
        InitialCondition::Rest => Err("requires initial.kind = gradient".into()),
    }
}

impl RunConfig {
    fn from_preset(name: &str) -> Result<Self, Fail> {
        let setup = preset(name).ok_or_else(|| format!("unknown preset {name:?} (cable, strip, spiral)"))?;
        Ok(Self {
            preset: name.into(),
            setup,
            solver: SolverKind::Slts,
            initial_level: 0,
            uniform_dt: None,
            output_dir: PathBuf::from("out"),
            snapshot_every: 0,
            write_vtk: true,
            seed: None,
        })
    }

    /// Parses `text`, then applies `key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut entries: BTreeMap<String, (Option<usize>, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, Some(i + 1), "expected `key = value`"))?;
            let key = k.trim().to_string();
            if entries.contains_key(&key) {
                return Err(Error::config(key, Some(i + 1), "key given twice"));
            }
            entries.insert(key, (Some(i + 1), v.trim().to_string()));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), None, "override must be `key=value`"))?;
            entries.insert(k.trim().to_string(), (None, v.trim().to_string()));
        }
        for (key, (line, _)) in &entries {
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::config(key.as_str(), *line, "unknown key"));
            }
        }
        let name = entries.get("preset").map_or("cable", |(_, v)| v.as_str());
        let mut cfg = Self::from_preset(name).map_err(|m| Error::config("preset", entries.get("preset").and_then(|e| e.0), m))?;
        // the model name resets model parameters, so it goes before them
        let mut order: Vec<&String> = entries.keys().filter(|k| *k != "preset").collect();
        order.sort_by_key(|k| (k.as_str() != "model.name" && k.as_str() != "initial.kind" && k.as_str() != "stimulus.region", k.as_str()));
        for key in order {
            let (line, value) = &entries[key];
            cfg.apply(key, value).map_err(|m| Error::config(key.as_str(), *line, m))?;
        }
        cfg.validate(&entries)?;
        Ok(cfg)
    }

    pub fn read(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), None, format!("cannot read: {e}")))?;
        Self::parse(&text, overrides)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<(), Fail> {
        let s = &mut self.setup;
        match key {
            "solver" => {
                self.solver = match v {
                    "slts" => SolverKind::Slts,
                    "uniform" => SolverKind::Uniform,
                    _ => return Err(format!("expected slts or uniform, got {v:?}")),
                }
            }
            "seed" => self.seed = Some(num(v)?),
            "mesh.dim" => s.dim = num(v)?,
            "mesh.extent" => s.extent = pair(v)?,
            "mesh.roots" => {
                let l = list(v)?;
                if l.iter().any(|x| x.fract() != 0.0 || *x < 0.0) || l.is_empty() || l.len() > 2 {
                    return Err(format!("expected 1 or 2 non-negative integers, got {v:?}"));
                }
                s.roots = [l[0] as u32, l.get(1).map_or(1, |x| *x as u32)];
            }
            "mesh.max_level" => s.max_level = num(v)?,
            "mesh.initial_level" => self.initial_level = num(v)?,
            "basis.order" => s.order = num(v)?,
            "sipg.gamma" => s.gamma = num(v)?,
            "diffusion.d" => s.diffusion = list(v)?,
            "time.dt" => s.settings.dt = num(v)?,
            "time.t_end" => s.t_end = num(v)?,
            "time.dt_bar" => s.settings.dt_bar = num(v)?,
            "time.uniform_dt" => self.uniform_dt = Some(num(v)?),
            "amr.adapt" => s.settings.adapt = boolean(v)?,
            "amr.tau_refine" => s.settings.tau_refine = num(v)?,
            "amr.tau_coarsen" => s.settings.tau_coarsen = num(v)?,
            "lts.tau_cell" => s.settings.tau_cell = if v == "off" { None } else { Some(num(v)?) },
            "model.name" => {
                s.model = match v {
                    "mitchell_schaeffer" => IonicModel::MitchellSchaeffer(MitchellSchaeffer::default()),
                    "fitzhugh_nagumo" => IonicModel::FitzHughNagumo(FitzHughNagumo::default()),
                    _ => return Err(format!("unknown model {v:?} (mitchell_schaeffer, fitzhugh_nagumo)")),
                }
            }
            "model.tau_in" | "model.tau_out" | "model.tau_open" | "model.tau_close" | "model.v_gate" => {
                let IonicModel::MitchellSchaeffer(m) = &mut s.model else {
                    return Err("only valid for model.name = mitchell_schaeffer".into());
                };
                let x = num(v)?;
                match key {
                    "model.tau_in" => m.tau_in = x,
                    "model.tau_out" => m.tau_out = x,
                    "model.tau_open" => m.tau_open = x,
                    "model.tau_close" => m.tau_close = x,
                    _ => m.v_gate = x,
                }
            }
            "model.c1" | "model.a" | "model.c2" | "model.b" => {
                let IonicModel::FitzHughNagumo(m) = &mut s.model else {
                    return Err("only valid for model.name = fitzhugh_nagumo".into());
                };
                let x = num(v)?;
                match key {
                    "model.c1" => m.c1 = x,
                    "model.a" => m.a = x,
                    "model.c2" => m.c2 = x,
                    _ => m.b = x,
                }
            }
            "stimulus.region" => match v {
                "none" => s.stimuli.clear(),
                "box" => {
                    let st = stimulus(s);
                    if !matches!(st.region, StimulusRegion::Box { .. }) {
                        st.region = StimulusRegion::Box { min: [0.0; 2], max: [1.0, 1.0] };
                    }
                }
                "ball" => {
                    let st = stimulus(s);
                    if !matches!(st.region, StimulusRegion::Ball { .. }) {
                        st.region = StimulusRegion::Ball { center: [0.0; 2], radius: 1.0 };
                    }
                }
                _ => return Err(format!("expected none, box or ball, got {v:?}")),
            },
            "stimulus.min" | "stimulus.max" => {
                let p = pair(v)?;
                match (&mut stimulus(s).region, key) {
                    (StimulusRegion::Box { min, .. }, "stimulus.min") => *min = p,
                    (StimulusRegion::Box { max, .. }, _) => *max = p,
                    _ => return Err("requires stimulus.region = box".into()),
                }
            }
            "stimulus.center" | "stimulus.radius" => match (&mut stimulus(s).region, key) {
                (StimulusRegion::Ball { center, .. }, "stimulus.center") => *center = pair(v)?,
                (StimulusRegion::Ball { radius, .. }, _) => *radius = num(v)?,
                _ => return Err("requires stimulus.region = ball".into()),
            },
            "stimulus.amplitude" => stimulus(s).amplitude = num(v)?,
            "stimulus.t0" => stimulus(s).t0 = num(v)?,
            "stimulus.t1" => stimulus(s).t1 = num(v)?,
            "stimulus.spatial_decay" => stimulus(s).spatial_decay = boolean(v)?,
            "stimulus.temporal_decay" => stimulus(s).temporal_decay = boolean(v)?,
            "initial.kind" => match v {
                "rest" => s.initial = InitialCondition::Rest,
                "gradient" => {
                    if !matches!(s.initial, InitialCondition::Gradient { .. }) {
                        s.initial = PropagationSetup::spiral().initial;
                    }
                }
                _ => return Err(format!("expected rest or gradient, got {v:?}")),
            },
            "initial.phi_left" | "initial.phi_right" | "initial.gate_bottom" | "initial.gate_top" => {
                let x = num(v)?;
                if let InitialCondition::Gradient {
                    phi_left,
                    phi_right,
                    gate_bottom,
                    gate_top,
                    ..
                } = gradient(s)?
                {
                    match key {
                        "initial.phi_left" => *phi_left = x,
                        "initial.phi_right" => *phi_right = x,
                        "initial.gate_bottom" => *gate_bottom = x,
                        _ => *gate_top = x,
                    }
                }
            }
            "initial.mirror" => {
                let b = boolean(v)?;
                if let InitialCondition::Gradient { mirror, .. } = gradient(s)? {
                    *mirror = b;
                }
            }
            "output.dir" => self.output_dir = PathBuf::from(v),
            "output.snapshot_every" => self.snapshot_every = num(v)?,
            "output.vtk" => self.write_vtk = boolean(v)?,
            "lat.spacing" => s.sample_spacing = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn validate(&self, entries: &BTreeMap<String, (Option<usize>, String)>) -> Result<()> {
        let line = |k: &str| entries.get(k).and_then(|e| e.0);
        let fail = |k: &str, m: String| Err(Error::config(k, line(k), m));
        let s = &self.setup;
        if s.dim != 1 && s.dim != 2 {
            return fail("mesh.dim", format!("must be 1 or 2, got {}", s.dim));
        }
        for a in 0..s.dim {
            if !(s.extent[a] > 0.0) || !s.extent[a].is_finite() {
                return fail("mesh.extent", format!("extents must be positive, got {:?}", &s.extent[..s.dim]));
            }
            if s.roots[a] == 0 {
                return fail("mesh.roots", "root counts must be at least 1".into());
            }
        }
        if s.max_level > LEVEL_LIMIT || self.initial_level > LEVEL_LIMIT {
            return fail("mesh.max_level", format!("levels are limited to {LEVEL_LIMIT}"));
        }
        if self.initial_level > s.max_level && self.solver == SolverKind::Slts {
            return fail("mesh.initial_level", format!("exceeds mesh.max_level = {}", s.max_level));
        }
        if !(1..=3).contains(&s.order) {
            return fail("basis.order", format!("must be 1, 2 or 3, got {}", s.order));
        }
        if !(s.gamma > 0.0) {
            return fail("sipg.gamma", format!("must be positive, got {}", s.gamma));
        }
        if let Err(e) = DiffusionTensor::new(s.dim, &s.diffusion) {
            return fail("diffusion.d", e.to_string());
        }
        if !(s.settings.dt > 0.0) {
            return fail("time.dt", format!("must be positive, got {}", s.settings.dt));
        }
        if !(s.t_end >= 0.0) || !s.t_end.is_finite() {
            return fail("time.t_end", format!("must be non-negative, got {}", s.t_end));
        }
        if !(s.settings.dt_bar > 0.0) {
            return fail("time.dt_bar", format!("must be positive, got {}", s.settings.dt_bar));
        }
        if let Some(dt) = self.uniform_dt {
            let k = s.settings.dt / dt;
            if !(dt > 0.0) || (k - k.round()).abs() > 1e-9 * k {
                return fail("time.uniform_dt", format!("must divide time.dt = {}", s.settings.dt));
            }
        }
        if !(s.settings.tau_coarsen < s.settings.tau_refine) {
            return fail(
                "amr.tau_coarsen",
                format!("must be below amr.tau_refine = {}", s.settings.tau_refine),
            );
        }
        if let Some(t) = s.settings.tau_cell {
            if !(t >= 0.0) {
                return fail("lts.tau_cell", format!("must be non-negative or off, got {t}"));
            }
        }
        if let Err(e) = s.model.validate() {
            return fail("model.name", e.to_string());
        }
        if let IonicModel::MitchellSchaeffer(m) = s.model {
            if !(m.v_gate > 0.0 && m.v_gate < 1.0) {
                return fail("model.v_gate", format!("must lie in (0, 1), got {}", m.v_gate));
            }
        }
        for st in &s.stimuli {
            if let Err(e) = st.validate() {
                return fail("stimulus.region", e.to_string());
            }
        }
        if let InitialCondition::Gradient { gate_bottom, gate_top, .. } = s.initial {
            if !(0.0..=1.0).contains(&gate_bottom) || !(0.0..=1.0).contains(&gate_top) {
                return fail("initial.gate_bottom", "gate values must lie in [0, 1]".into());
            }
        }
        if !(s.sample_spacing > 0.0) {
            return fail("lat.spacing", format!("must be positive, got {}", s.sample_spacing));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Shuffle seed carried into the solver settings.
    pub fn settings(&self) -> crate::slts::SltsSettings {
        let mut s = self.setup.settings.clone();
        s.shuffle_seed = self.seed;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> (String, Option<usize>) {
        match e {
            Error::Config { key, line, .. } => (key, line),
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn defaults_are_the_cable() {
        let c = RunConfig::parse("", &[]).unwrap();
        assert_eq!(c.setup, PropagationSetup::cable());
        assert_eq!(c.solver, SolverKind::Slts);
    }

    #[test]
    fn keys_override_the_preset() {
        let text = "preset = strip\n# comment\nmesh.max_level = 3  # trailing\nlts.tau_cell = 0.005\nsolver = uniform\n";
        let c = RunConfig::parse(text, &["time.t_end=12".into()]).unwrap();
        assert_eq!(c.setup.dim, 2);
        assert_eq!(c.setup.max_level, 3);
        assert_eq!(c.setup.settings.tau_cell, Some(0.005));
        assert_eq!(c.setup.t_end, 12.0);
        assert_eq!(c.solver, SolverKind::Uniform);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let e = RunConfig::parse("preset = cable\ntua_refine = 0.5\n", &[]).unwrap_err();
        assert_eq!(key_of(e), ("tua_refine".into(), Some(2)));
        let e = RunConfig::parse("", &["amr.tua_refine=1".into()]).unwrap_err();
        assert_eq!(key_of(e), ("amr.tua_refine".into(), None));
    }

    #[test]
    fn validation_errors() {
        for (text, key) in [
            ("mesh.dim = 3", "mesh.dim"),
            ("mesh.roots = 0", "mesh.roots"),
            ("amr.tau_coarsen = 2", "amr.tau_coarsen"),
            ("basis.order = 5", "basis.order"),
            ("diffusion.d = -1", "diffusion.d"),
            ("time.dt = 0", "time.dt"),
            ("time.dt = abc", "time.dt"),
            ("model.tau_in = -1", "model.name"),
            ("model.c1 = 1", "model.c1"),
            ("stimulus.radius = 1", "stimulus.radius"),
            ("time.uniform_dt = 0.07", "time.uniform_dt"),
            ("mesh.max_level = 2\nmesh.max_level = 3", "mesh.max_level"),
            ("this line has no equals", "this line has no equals"),
        ] {
            let e = RunConfig::parse(text, &[]).unwrap_err();
            assert_eq!(key_of(e).0, key, "{text}");
        }
    }

    #[test]
    fn model_parameters_follow_the_name() {
        let c = RunConfig::parse("model.tau_close = 40\nmodel.name = mitchell_schaeffer\n", &[]).unwrap();
        let IonicModel::MitchellSchaeffer(m) = c.setup.model else { panic!() };
        assert_eq!(m.tau_close, 40.0);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::parse("", &[]).unwrap();
        let b = RunConfig::parse("preset = cable", &[]).unwrap();
        let c = RunConfig::parse("time.t_end = 41", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}

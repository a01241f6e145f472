use cardiolts::benchmarks::{build_simulation, PropagationSetup};
use cardiolts::indicators::{kelly_indicator, mark_elements, rvt_indicator, StateView};
use cardiolts::ionics::{IonicModel, MitchellSchaeffer};
use cardiolts::{Basis, ForestMesh};

/// Mitchell–Schaeffer right-hand side in mV/ms and 1/ms, written out from
/// the model equations.
fn ms_rhs(m: &MitchellSchaeffer, phi: f64, h: f64) -> (f64, f64) {
    let v = (phi + 85.0) / 100.0;
    let dv = h * v * v * (1.0 - v) / m.tau_in - v / m.tau_out;
    let dh = if v < m.v_gate { (1.0 - h) / m.tau_open } else { -h / m.tau_close };
    (100.0 * dv, dh)
}

/// Reference single-cell trajectory by RK4 with many small steps.
fn trajectory(m: &MitchellSchaeffer, phi0: f64, h0: f64, len: f64, samples: usize) -> Vec<(f64, f64)> {
    let sub = 200;
    let dt = len / (samples * sub) as f64;
    let mut out = vec![(phi0, h0)];
    let (mut p, mut h) = (phi0, h0);
    for _ in 0..samples {
        for _ in 0..sub {
            let k1 = ms_rhs(m, p, h);
            let k2 = ms_rhs(m, p + 0.5 * dt * k1.0, h + 0.5 * dt * k1.1);
            let k3 = ms_rhs(m, p + 0.5 * dt * k2.0, h + 0.5 * dt * k2.1);
            let k4 = ms_rhs(m, p + dt * k3.0, h + dt * k3.1);
            p += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            h += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        out.push((p, h));
    }
    out
}

#[test]
fn temporal_indicator_tracks_dense_quadrature_on_the_upstroke() {
    let m = MitchellSchaeffer::default();
    let model = IonicModel::MitchellSchaeffer(m);
    let mesh = ForestMesh::build_cartesian_root(&[0.5], &[1], 1).unwrap();
    let basis = Basis::new(1, 1).unwrap();
    let measure = 0.5;
    for (phi0, len) in [(-70.0, 0.15), (-60.0, 0.15), (-45.0, 0.15), (-60.0, 0.3), (-30.0, 0.1)] {
        // 100-point midpoint rule in time of ‖f(u(t)) − f(u(t_a))‖², with
        // the spatially uniform state making the space integral a factor
        let n = 100;
        let fine = trajectory(&m, phi0, 1.0, len, 2 * n);
        let fa = ms_rhs(&m, phi0, 1.0);
        let mut acc = 0.0;
        for k in 0..n {
            let (p, h) = fine[2 * k + 1];
            let f = ms_rhs(&m, p, h);
            acc += (len / n as f64) * measure * ((f.0 - fa.0).powi(2) + (f.1 - fa.1).powi(2));
        }
        let dense = acc.sqrt() / len;
        let (p1, h1) = *fine.last().unwrap();
        let start = StateView { phi: &[phi0, phi0], s: &[1.0, 1.0], t: 2.0 };
        let end = StateView { phi: &[p1, p1], s: &[h1, h1], t: 2.0 + len };
        let eta = rvt_indicator(&model, &mesh, &basis, &[], start, end).unwrap()[0];
        let rel = (eta - dense).abs() / dense;
        assert!(rel <= 0.25, "φ0 {phi0}, Δt {len}: midpoint {eta} vs dense {dense} ({:.1}%)", 100.0 * rel);
    }
}

/// Element with the largest nodal potential range per unit width.
fn steepest(mesh: &ForestMesh, basis: &Basis, phi: &[f64]) -> usize {
    let nn = basis.n_nodes();
    (0..mesh.n_active())
        .max_by(|&a, &b| {
            let g = |e: usize| {
                let v = &phi[e * nn..(e + 1) * nn];
                let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
                (hi - lo) / mesh.element_bounds(e).1[0]
            };
            g(a).total_cmp(&g(b))
        })
        .unwrap()
}

fn center_distance(mesh: &ForestMesh, a: usize, b: usize) -> f64 {
    (mesh.element_center(a)[0] - mesh.element_center(b)[0]).abs()
}

#[test]
fn kelly_argmax_follows_the_cable_front() {
    let mut setup = PropagationSetup::cable();
    setup.settings.adapt = false;
    let mut sim = build_simulation(&setup, 1).unwrap();
    let width = 20.0 / sim.mesh.n_active() as f64;
    let mut checked = 0;
    for k in 1..=200 {
        sim.barrier_step().unwrap();
        if k % 20 != 0 {
            continue;
        }
        let eta = kelly_indicator(&sim.mesh, &sim.ops, &sim.state.phi).unwrap();
        let arg = (0..eta.len()).max_by(|&a, &b| eta[a].total_cmp(&eta[b])).unwrap();
        let front = steepest(&sim.mesh, &sim.basis, &sim.state.phi);
        assert!(center_distance(&sim.mesh, arg, front) <= 2.0 * width + 1e-9, "t {}: argmax {arg} vs front {front}", sim.time());
        checked += 1;
    }
    assert_eq!(checked, 10);
}

#[test]
fn refined_band_is_contiguous_on_the_cable() {
    // on the root mesh, so the front is under-resolved and gets marked
    let mut setup = PropagationSetup::cable();
    setup.settings.adapt = false;
    let mut sim = build_simulation(&setup, 0).unwrap();
    for _ in 0..60 {
        sim.barrier_step().unwrap();
    }
    let eta = kelly_indicator(&sim.mesh, &sim.ops, &sim.state.phi).unwrap();
    let (refine, _) = mark_elements(&eta, setup.settings.tau_refine, setup.settings.tau_coarsen, &sim.mesh).unwrap();
    assert!(!refine.is_empty());
    let mut xs: Vec<(f64, f64)> = refine
        .iter()
        .map(|&e| {
            let (lo, size) = sim.mesh.element_bounds(e);
            (lo[0], lo[0] + size[0])
        })
        .collect();
    xs.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in xs.windows(2) {
        assert!((w[1].0 - w[0].1).abs() < 1e-9, "gap between {:?} and {:?}", w[0], w[1]);
    }
}

#[test]
fn refined_band_is_connected_and_spans_the_strip() {
    let setup = PropagationSetup::strip();
    let mut sim = build_simulation(&setup, 0).unwrap();
    for _ in 0..60 {
        sim.barrier_step().unwrap();
    }
    let eta = kelly_indicator(&sim.mesh, &sim.ops, &sim.state.phi).unwrap();
    let (refine, _) = mark_elements(&eta, setup.settings.tau_refine, setup.settings.tau_coarsen, &sim.mesh).unwrap();
    assert!(!refine.is_empty());
    let set: std::collections::HashSet<usize> = refine.iter().copied().collect();
    let mut seen = std::collections::HashSet::from([refine[0]]);
    let mut stack = vec![refine[0]];
    while let Some(e) = stack.pop() {
        for nb in sim.mesh.neighbors(e) {
            if set.contains(&nb) && seen.insert(nb) {
                stack.push(nb);
            }
        }
    }
    assert_eq!(seen.len(), set.len(), "refined set splits into pieces");
    // covers the whole height
    let mut cover: Vec<(f64, f64)> = refine
        .iter()
        .map(|&e| {
            let (lo, size) = sim.mesh.element_bounds(e);
            (lo[1], lo[1] + size[1])
        })
        .collect();
    cover.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut reach = 0.0f64;
    for (a, b) in cover {
        assert!(a <= reach + 1e-9, "uncovered height near y = {reach}");
        reach = reach.max(b);
    }
    assert!((reach - 7.0).abs() < 1e-9);
}

//! Spatial (penalized Kelly) and temporal (reaction drift) error indicators
//! and the refine/coarsen marking built on them.

use std::collections::BTreeSet;

use rustc_hash::FxHashMap as HashMap;

use crate::basis::Basis;
use crate::error::{Error, Result};
use crate::ionics::{total_stimulus, CellModel, IonicModel, StimulusProtocol};
use crate::mesh::{face_axis, face_sign, CellKey, FaceKind, ForestMesh};
use crate::sipg::{face_quadrature, ElementOps, FaceGeometry};

pub const DEFAULT_TAU_REFINE: f64 = 0.75;

/// Indicators and marks of one adaptation pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IndicatorReport {
    pub eta_s: Vec<f64>,
    pub eta_t: Vec<f64>,
    pub refine_set: Vec<usize>,
    pub coarsen_set: Vec<usize>,
    pub tau_refine: f64,
    pub tau_coarsen: f64,
    pub tau_cell: f64,
}

fn flux_row(basis: &Basis, d: &crate::sipg::DiffusionTensor, xi: [f64; 2], size: [f64; 2], normal: [f64; 2]) -> Vec<f64> {
    (0..basis.n_nodes())
        .map(|i| {
            let r = basis.gradient(i, xi);
            let mut g = [0.0; 2];
            for a in 0..basis.dim() {
                g[a] = 2.0 * r[a] / size[a];
            }
            let dg = d.apply(g);
            dg[0] * normal[0] + dg[1] * normal[1]
        })
        .collect()
}

/// Normal-flux rows of both sides at each face quadrature point.
struct JumpTemplate {
    owner: Vec<Vec<f64>>,
    neighbor: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl JumpTemplate {
    fn new(geom: &FaceGeometry, basis: &Basis, d: &crate::sipg::DiffusionTensor) -> Self {
        let mut normal = [0.0; 2];
        normal[face_axis(geom.owner_face)] = face_sign(geom.owner_face);
        let quad = face_quadrature(geom, basis);
        Self {
            owner: quad.iter().map(|q| flux_row(basis, d, q.0, geom.owner_size, normal)).collect(),
            neighbor: quad.iter().map(|q| flux_row(basis, d, q.1, geom.neighbor_size, normal)).collect(),
            weights: quad.iter().map(|q| q.2).collect(),
        }
    }
}

fn geometry_key(g: &FaceGeometry) -> (usize, [u64; 4], i64) {
    let kind = match g.kind {
        FaceKind::Conforming => -1,
        FaceKind::Hanging { subface } => subface as i64,
    };
    (
        g.owner_face,
        [g.owner_size[0].to_bits(), g.owner_size[1].to_bits(), g.neighbor_size[0].to_bits(), g.neighbor_size[1].to_bits()],
        kind,
    )
}

/// Penalized flux-jump indicator:
/// `η_e² = Σ_F (h_F / 2p) ∫_F (W_F [[D∇φ·n]])²`.
///
/// Boundary faces carry no jump. Hanging sub-faces count for both sides.
pub fn kelly_indicator(mesh: &ForestMesh, ops: &ElementOps, phi: &[f64]) -> Result<Vec<f64>> {
    ops.check_generation(mesh.generation())?;
    let basis = ops.basis();
    let n = basis.n_nodes();
    if phi.len() != mesh.n_active() * n {
        return Err(Error::Layout(format!(
            "field has {} values, mesh needs {}",
            phi.len(),
            mesh.n_active() * n
        )));
    }
    let d = ops.diffusion();
    let p = basis.order() as f64;
    let mut eta2 = vec![0.0; mesh.n_active()];
    let mut templates = HashMap::default();
    for face in mesh.face_list() {
        let geom = FaceGeometry::of(&face, mesh);
        let tpl = templates.entry(geometry_key(&geom)).or_insert_with(|| JumpTemplate::new(&geom, basis, d));
        let uo = &phi[face.owner * n..(face.owner + 1) * n];
        let un = &phi[face.neighbor * n..(face.neighbor + 1) * n];
        let mut integral = 0.0;
        for ((ro, rn), w) in tpl.owner.iter().zip(&tpl.neighbor).zip(&tpl.weights) {
            let fo: f64 = ro.iter().zip(uo).map(|(a, b)| a * b).sum();
            let fnb: f64 = rn.iter().zip(un).map(|(a, b)| a * b).sum();
            integral += w * (face.w_f * (fo - fnb)).powi(2);
        }
        let c = face.h_f / (2.0 * p) * integral;
        eta2[face.owner] += c;
        eta2[face.neighbor] += c;
    }
    Ok(eta2.into_iter().map(f64::sqrt).collect())
}

/// Nodal potential and states of all elements at one time.
#[derive(Clone, Copy, Debug)]
pub struct StateView<'a> {
    pub phi: &'a [f64],
    /// `n_states` values per node, element-major.
    pub s: &'a [f64],
    pub t: f64,
}

/// Temporal indicator from the drift of `I` and `g` over `[t_a, t_b]`,
/// with the time integral taken at the midpoint state.
pub fn rvt_indicator(
    model: &IonicModel,
    mesh: &ForestMesh,
    basis: &Basis,
    stimuli: &[StimulusProtocol],
    start: StateView<'_>,
    end: StateView<'_>,
) -> Result<Vec<f64>> {
    let (ta, tb) = (start.t, end.t);
    if !(tb > ta) {
        return Err(Error::InvalidArgument(format!("indicator interval [{ta}, {tb}] is empty")));
    }
    let n = basis.n_nodes();
    let ns = model.n_states();
    let total = mesh.n_active() * n;
    for v in [&start, &end] {
        if v.phi.len() != total || v.s.len() != total * ns {
            return Err(Error::Layout("state does not match the mesh layout".into()));
        }
    }
    let tm = 0.5 * (ta + tb);
    let len = tb - ta;
    let dim = mesh.dim();
    let mut out = Vec::with_capacity(mesh.n_active());
    let mut s_mid = [0.0; crate::ionics::MAX_STATES];
    for e in 0..mesh.n_active() {
        let (_, size) = mesh.element_bounds(e);
        let jac: f64 = (0..dim).map(|a| 0.5 * size[a]).product();
        let (mut ei, mut eg) = (0.0, 0.0);
        for q in 0..n {
            let k = e * n + q;
            let x = mesh.to_physical(e, basis.node_ref(q));
            let phi_a = start.phi[k];
            let phi_m = 0.5 * (start.phi[k] + end.phi[k]);
            let sa = &start.s[k * ns..(k + 1) * ns];
            for c in 0..ns {
                s_mid[c] = 0.5 * (sa[c] + end.s[k * ns + c]);
            }
            let ia = model.rates(phi_a, sa).dphi + total_stimulus(stimuli, x, dim, ta);
            let im = model.rates(phi_m, &s_mid[..ns]).dphi + total_stimulus(stimuli, x, dim, tm);
            let ga = model.state_rates(phi_a, sa);
            let gm = model.state_rates(phi_m, &s_mid[..ns]);
            let w = basis.node_weight(q) * jac;
            ei += w * (im - ia).powi(2);
            eg += w * (0..ns).map(|c| (gm[c] - ga[c]).powi(2)).sum::<f64>();
        }
        // (1/len) · sqrt(len · ∫_e |f(u_mid) − f(u_a)|²)
        let eta_i = (len * ei).sqrt() / len;
        let eta_g = (len * eg).sqrt() / len;
        out.push((eta_i * eta_i + eta_g * eta_g).sqrt());
    }
    Ok(out)
}

/// Refine set `η ≥ τ_refine`; coarsen set `η ≤ τ_coarsen`, restricted to
/// complete sibling families of leaves.
pub fn mark_elements(eta_s: &[f64], tau_refine: f64, tau_coarsen: f64, mesh: &ForestMesh) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(tau_coarsen < tau_refine) {
        return Err(Error::InvalidArgument(format!(
            "coarsen threshold {tau_coarsen} must be below refine threshold {tau_refine}"
        )));
    }
    if eta_s.len() != mesh.n_active() {
        return Err(Error::Layout(format!(
            "{} indicator values for {} elements",
            eta_s.len(),
            mesh.n_active()
        )));
    }
    let refine: Vec<usize> = (0..eta_s.len()).filter(|&e| eta_s[e] >= tau_refine).collect();
    let mut families: HashMap<CellKey, Vec<usize>> = HashMap::default();
    for e in 0..eta_s.len() {
        if eta_s[e] <= tau_coarsen {
            if let Some(parent) = mesh.key(e).parent() {
                families.entry(parent).or_default().push(e);
            }
        }
    }
    let full = 1usize << mesh.dim();
    let mut coarsen = BTreeSet::new();
    for members in families.values() {
        if members.len() == full {
            coarsen.extend(members.iter().copied());
        }
    }
    Ok((refine, coarsen.into_iter().collect()))
}

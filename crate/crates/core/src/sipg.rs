//! Symmetric interior penalty (SIPG) operators for the diffusion part of the
//! monodomain equation.
//!
//! The semi-discrete system is `M dφ/dt = K φ + N(φ, s)`. `M` is diagonal
//! because the nodal basis lives on Gauss–Legendre points and the same points
//! are used for volume quadrature. `K` is stored per element: one "own" block
//! (volume stiffness plus the self-coupling part of every face) and one
//! coupling block per neighbor face.
//!
//! Face terms, with `n` the owner's outward normal and `[[v]] = v_o - v_n`:
//!
//! ```text
//! ∫_F ⟨D∇φ⟩·n [[v]] + [[φ]] ⟨D∇v⟩·n - γ (n·Dn / h_F) [[φ]] [[v]]
//! ```
//!
//! Because geometry on a Cartesian forest only depends on the level and the
//! face configuration, blocks are built once per configuration and shared.

use rustc_hash::FxHashMap as HashMap;
use std::sync::Arc;

use crate::basis::Basis;
use crate::error::{Error, Result};
use crate::mesh::{face_axis, face_sign, CellKey, FaceInfo, FaceKind, ForestMesh};

/// Default penalty for linear elements.
pub const DEFAULT_GAMMA_P1: f64 = 4.0;
/// Default penalty for quadratic elements.
pub const DEFAULT_GAMMA_P2: f64 = 8.0;

pub fn default_gamma(order: usize) -> f64 {
    if order <= 1 {
        DEFAULT_GAMMA_P1
    } else {
        DEFAULT_GAMMA_P2
    }
}

/// Constant symmetric positive-semidefinite diffusion tensor (mm²/ms).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionTensor {
    dim: usize,
    d: [[f64; 2]; 2],
}

impl DiffusionTensor {
    /// `entries` holds either the `dim` diagonal entries or all `dim * dim`
    /// entries in row-major order.
    pub fn new(dim: usize, entries: &[f64]) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidArgument(format!("dimension must be 1 or 2, got {dim}")));
        }
        let mut d = [[0.0; 2]; 2];
        if entries.len() == dim {
            for a in 0..dim {
                d[a][a] = entries[a];
            }
        } else if entries.len() == dim * dim {
            for a in 0..dim {
                for b in 0..dim {
                    d[a][b] = entries[a * dim + b];
                }
            }
        } else {
            return Err(Error::InvalidArgument(format!(
                "diffusion tensor needs {dim} or {} entries, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("diffusion tensor has non-finite entries".into()));
        }
        let scale = entries.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        if (d[0][1] - d[1][0]).abs() > 1e-14 * scale {
            return Err(Error::InvalidArgument("diffusion tensor is not symmetric".into()));
        }
        let t = Self { dim, d };
        if t.min_eigenvalue() < -1e-14 * scale {
            return Err(Error::InvalidArgument("diffusion tensor is not positive semidefinite".into()));
        }
        Ok(t)
    }

    pub fn isotropic(dim: usize, value: f64) -> Result<Self> {
        Self::new(dim, &vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, a: usize, b: usize) -> f64 {
        self.d[a][b]
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.d[0][0] * v[0] + self.d[0][1] * v[1],
            self.d[1][0] * v[0] + self.d[1][1] * v[1],
        ]
    }

    pub fn normal_component(&self, n: [f64; 2]) -> f64 {
        let dn = self.apply(n);
        n[0] * dn[0] + n[1] * dn[1]
    }

    pub fn is_zero(&self) -> bool {
        self.d.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn eigenvalues(&self) -> [f64; 2] {
        if self.dim == 1 {
            return [self.d[0][0], self.d[0][0]];
        }
        let tr = self.d[0][0] + self.d[1][1];
        let det = self.d[0][0] * self.d[1][1] - self.d[0][1] * self.d[1][0];
        let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
        [0.5 * tr - disc, 0.5 * tr + disc]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues()[1]
    }
}

/// Dense square matrix helpers on row-major slices.
#[inline]
fn matvec_acc(block: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &block[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * x[j];
        }
        *o += acc;
    }
}

fn jacobian(size: [f64; 2], dim: usize) -> f64 {
    (0..dim).map(|a| 0.5 * size[a]).product()
}

/// Diagonal of the element mass matrix for an element of the given size.
pub fn mass_diagonal(size: [f64; 2], basis: &Basis) -> Vec<f64> {
    let j = jacobian(size, basis.dim());
    (0..basis.n_nodes()).map(|n| basis.node_weight(n) * j).collect()
}

/// Diagonal inverse mass matrix of an active element.
pub fn element_mass_inverse(mesh: &ForestMesh, elem: usize, basis: &Basis) -> Result<Vec<f64>> {
    let (_, size) = mesh.element_bounds(elem);
    mass_inverse_for_size(size, basis)
}

pub fn mass_inverse_for_size(size: [f64; 2], basis: &Basis) -> Result<Vec<f64>> {
    if (0..basis.dim()).any(|a| !(size[a] > 0.0)) {
        return Err(Error::Geometry(format!("degenerate element of size {size:?}")));
    }
    Ok(mass_diagonal(size, basis).into_iter().map(|m| 1.0 / m).collect())
}

fn physical_gradient(basis: &Basis, n: usize, xi: [f64; 2], size: [f64; 2]) -> [f64; 2] {
    let g = basis.gradient(n, xi);
    let mut out = [0.0; 2];
    for a in 0..basis.dim() {
        out[a] = 2.0 * g[a] / size[a];
    }
    out
}

/// Volume stiffness `K[i][j] = -∫ D∇N_j·∇N_i dV` (row-major, row = test).
pub fn element_stiffness(size: [f64; 2], basis: &Basis, d: &DiffusionTensor) -> Result<Vec<f64>> {
    if (0..basis.dim()).any(|a| !(size[a] > 0.0)) {
        return Err(Error::Geometry(format!("degenerate element of size {size:?}")));
    }
    let n = basis.n_nodes();
    let jac = jacobian(size, basis.dim());
    let mut k = vec![0.0; n * n];
    for q in 0..n {
        let xq = basis.node_ref(q);
        let wq = basis.node_weight(q) * jac;
        let grads: Vec<[f64; 2]> = (0..n).map(|m| physical_gradient(basis, m, xq, size)).collect();
        for j in 0..n {
            let dg = d.apply(grads[j]);
            for i in 0..n {
                k[i * n + j] -= wq * (dg[0] * grads[i][0] + dg[1] * grads[i][1]);
            }
        }
    }
    Ok(k)
}

/// The four coupling blocks of one face; `on` maps neighbor values to owner rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceBlocks {
    pub oo: Vec<f64>,
    pub on: Vec<f64>,
    pub no: Vec<f64>,
    pub nn: Vec<f64>,
}

impl FaceBlocks {
    fn zeros(n: usize) -> Self {
        Self {
            oo: vec![0.0; n * n],
            on: vec![0.0; n * n],
            no: vec![0.0; n * n],
            nn: vec![0.0; n * n],
        }
    }

    fn axpy(&mut self, alpha: f64, other: &FaceBlocks) {
        for (a, b) in [
            (&mut self.oo, &other.oo),
            (&mut self.on, &other.on),
            (&mut self.no, &other.no),
            (&mut self.nn, &other.nn),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }
}

/// Consistency/symmetry part and the penalty part per unit `γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceBlockParts {
    pub consistency: FaceBlocks,
    pub penalty_unit: FaceBlocks,
}

impl FaceBlockParts {
    pub fn combine(&self, gamma: f64) -> FaceBlocks {
        let mut out = self.consistency.clone();
        out.axpy(gamma, &self.penalty_unit);
        out
    }
}

/// Geometry of a face as seen from its owner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceGeometry {
    pub owner_face: usize,
    pub owner_size: [f64; 2],
    pub neighbor_size: [f64; 2],
    pub kind: FaceKind,
}

impl FaceGeometry {
    pub fn of(face: &FaceInfo, mesh: &ForestMesh) -> Self {
        Self {
            owner_face: face.owner_face,
            owner_size: mesh.element_bounds(face.owner).1,
            neighbor_size: mesh.element_bounds(face.neighbor).1,
            kind: face.kind,
        }
    }
}

/// Face quadrature points in owner and neighbor reference coordinates, with
/// physical weights.
pub fn face_quadrature(geom: &FaceGeometry, basis: &Basis) -> Vec<([f64; 2], [f64; 2], f64)> {
    let axis = face_axis(geom.owner_face);
    let sign = face_sign(geom.owner_face);
    if basis.dim() == 1 {
        return vec![([sign, 0.0], [-sign, 0.0], 1.0)];
    }
    let t = 1 - axis;
    let rule = basis.rule();
    let half_len = 0.5 * geom.owner_size[t];
    rule.points
        .iter()
        .zip(&rule.weights)
        .map(|(&s, &w)| {
            let mut xo = [0.0; 2];
            xo[axis] = sign;
            xo[t] = s;
            let mut xn = [0.0; 2];
            xn[axis] = -sign;
            xn[t] = match geom.kind {
                FaceKind::Conforming => s,
                FaceKind::Hanging { subface } => 0.5 * (s + 2.0 * subface as f64 - 1.0),
            };
            (xo, xn, w * half_len)
        })
        .collect()
}

/// SIPG face blocks split into their `γ`-independent and penalty parts.
pub fn face_coupling_parts(geom: &FaceGeometry, basis: &Basis, d: &DiffusionTensor) -> FaceBlockParts {
    let n = basis.n_nodes();
    let axis = face_axis(geom.owner_face);
    let mut normal = [0.0; 2];
    normal[axis] = face_sign(geom.owner_face);
    let dn = d.apply(normal);
    let sigma_unit = d.normal_component(normal) / geom.owner_size[axis];
    let mut cons = FaceBlocks::zeros(n);
    let mut pen = FaceBlocks::zeros(n);
    for (xo, xn, w) in face_quadrature(geom, basis) {
        let vo: Vec<f64> = (0..n).map(|i| basis.value(i, xo)).collect();
        let vn: Vec<f64> = (0..n).map(|i| basis.value(i, xn)).collect();
        let flux = |xi: [f64; 2], size: [f64; 2], i: usize| {
            let g = physical_gradient(basis, i, xi, size);
            dn[0] * g[0] + dn[1] * g[1]
        };
        let go: Vec<f64> = (0..n).map(|i| flux(xo, geom.owner_size, i)).collect();
        let gn: Vec<f64> = (0..n).map(|i| flux(xn, geom.neighbor_size, i)).collect();
        for i in 0..n {
            for j in 0..n {
                let ij = i * n + j;
                cons.oo[ij] += w * 0.5 * (go[j] * vo[i] + vo[j] * go[i]);
                cons.on[ij] += w * 0.5 * (gn[j] * vo[i] - vn[j] * go[i]);
                cons.no[ij] += w * 0.5 * (-go[j] * vn[i] + vo[j] * gn[i]);
                cons.nn[ij] += w * 0.5 * (-gn[j] * vn[i] - vn[j] * gn[i]);
                pen.oo[ij] -= w * sigma_unit * vo[j] * vo[i];
                pen.on[ij] += w * sigma_unit * vn[j] * vo[i];
                pen.no[ij] += w * sigma_unit * vo[j] * vn[i];
                pen.nn[ij] -= w * sigma_unit * vn[j] * vn[i];
            }
        }
    }
    FaceBlockParts {
        consistency: cons,
        penalty_unit: pen,
    }
}

/// SIPG face blocks for penalty `gamma`.
pub fn face_coupling(geom: &FaceGeometry, basis: &Basis, d: &DiffusionTensor, gamma: f64) -> Result<FaceBlocks> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("penalty must be positive, got {gamma}")));
    }
    Ok(face_coupling_parts(geom, basis, d).combine(gamma))
}

/// Block coupling an element to one neighbor.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub neighbor: usize,
    pub block: Arc<[f64]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct FaceConfig {
    owner_level: u8,
    owner_face: u8,
    kind: FaceKind,
}

/// Role of an element on one face plus what is across it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct FaceSlot {
    config: FaceConfig,
    is_owner: bool,
    other: CellKey,
}

#[derive(Clone, Debug)]
struct FaceTemplate {
    blocks: FaceBlocks,
    on: Arc<[f64]>,
    no: Arc<[f64]>,
}

#[derive(Clone, Debug, Default)]
struct TemplateCache {
    volume: HashMap<u8, Arc<[f64]>>,
    minv: HashMap<u8, Arc<[f64]>>,
    faces: HashMap<FaceConfig, Arc<FaceTemplate>>,
}

/// Per-element SIPG operators for one mesh generation.
#[derive(Clone, Debug)]
pub struct ElementOps {
    generation: u64,
    dim: usize,
    n: usize,
    gamma: f64,
    basis: Basis,
    diffusion: DiffusionTensor,
    minv: Vec<Arc<[f64]>>,
    own: Vec<f64>,
    offsets: Vec<usize>,
    couplings: Vec<Coupling>,
    keys: Vec<CellKey>,
    slots: Vec<FaceSlot>,
    slot_offsets: Vec<usize>,
    cache: TemplateCache,
    recomputed: usize,
}

/// Assembles all element and face blocks for the current mesh generation.
pub fn assemble_operators(mesh: &ForestMesh, basis: &Basis, d: &DiffusionTensor, gamma: f64) -> Result<ElementOps> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("penalty must be positive, got {gamma}")));
    }
    if basis.dim() != mesh.dim() || d.dim() != mesh.dim() {
        return Err(Error::InvalidArgument("basis, tensor and mesh dimensions differ".into()));
    }
    let mut ops = ElementOps {
        generation: mesh.generation(),
        dim: mesh.dim(),
        n: basis.n_nodes(),
        gamma,
        basis: basis.clone(),
        diffusion: *d,
        minv: Vec::new(),
        own: Vec::new(),
        offsets: vec![0],
        couplings: Vec::new(),
        keys: Vec::new(),
        slots: Vec::new(),
        slot_offsets: vec![0],
        cache: TemplateCache::default(),
        recomputed: 0,
    };
    ops.rebuild(mesh, None)?;
    Ok(ops)
}

impl ElementOps {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn n_elements(&self) -> usize {
        self.keys.len()
    }

    pub fn nodes_per_element(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn diffusion(&self) -> &DiffusionTensor {
        &self.diffusion
    }

    /// Number of elements whose blocks were rebuilt by the last (re)assembly.
    pub fn recomputed(&self) -> usize {
        self.recomputed
    }

    pub fn check_generation(&self, generation: u64) -> Result<()> {
        if generation != self.generation {
            return Err(Error::StaleTopology {
                expected: generation,
                found: self.generation,
            });
        }
        Ok(())
    }

    pub fn minv(&self, elem: usize) -> &[f64] {
        &self.minv[elem]
    }

    /// Volume stiffness plus the self-coupling blocks of every face.
    pub fn own_block(&self, elem: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.own[elem * nn..(elem + 1) * nn]
    }

    pub fn couplings(&self, elem: usize) -> &[Coupling] {
        &self.couplings[self.offsets[elem]..self.offsets[elem + 1]]
    }

    /// Re-assembles for the current mesh, reusing blocks of elements whose
    /// key and face neighborhood did not change.
    pub fn reassemble(&mut self, mesh: &ForestMesh) -> Result<()> {
        if mesh.generation() == self.generation && mesh.n_active() == self.keys.len() {
            self.recomputed = 0;
            return Ok(());
        }
        let previous = (
            std::mem::take(&mut self.keys),
            (std::mem::take(&mut self.slots), std::mem::take(&mut self.slot_offsets)),
            std::mem::take(&mut self.own),
            std::mem::take(&mut self.minv),
        );
        self.rebuild(mesh, Some(previous))
    }

    #[allow(clippy::type_complexity)]
    fn rebuild(
        &mut self,
        mesh: &ForestMesh,
        previous: Option<(Vec<CellKey>, (Vec<FaceSlot>, Vec<usize>), Vec<f64>, Vec<Arc<[f64]>>)>,
    ) -> Result<()> {
        let n = self.n;
        let nn = n * n;
        let n_elem = mesh.n_active();
        let faces = mesh.face_list();
        // both slots and couplings are stored per element in face order
        let mut offsets = vec![0usize; n_elem + 1];
        for face in &faces {
            offsets[face.owner + 1] += 1;
            offsets[face.neighbor + 1] += 1;
        }
        for e in 0..n_elem {
            offsets[e + 1] += offsets[e];
        }
        let total = offsets[n_elem];
        let mut cursor = offsets[..n_elem].to_vec();
        let mut slots = Vec::with_capacity(total);
        let mut couplings = Vec::with_capacity(total);
        let mut face_blocks = Vec::with_capacity(faces.len());
        let mut order = vec![(0usize, 0usize, true); total];
        for (fi, face) in faces.iter().enumerate() {
            let config = FaceConfig {
                owner_level: mesh.level(face.owner),
                owner_face: face.owner_face as u8,
                kind: face.kind,
            };
            face_blocks.push(self.face_template(config, face, mesh)?);
            order[cursor[face.owner]] = (fi, face.neighbor, true);
            cursor[face.owner] += 1;
            order[cursor[face.neighbor]] = (fi, face.owner, false);
            cursor[face.neighbor] += 1;
        }
        for &(fi, other, is_owner) in &order {
            let face = &faces[fi];
            let blocks = &face_blocks[fi];
            slots.push(FaceSlot {
                config: FaceConfig {
                    owner_level: mesh.level(face.owner),
                    owner_face: face.owner_face as u8,
                    kind: face.kind,
                },
                is_owner,
                other: mesh.key(other),
            });
            couplings.push(Coupling {
                neighbor: other,
                block: if is_owner { blocks.on.clone() } else { blocks.no.clone() },
            });
        }
        for e in 0..n_elem {
            slots[offsets[e]..offsets[e + 1]].sort();
        }

        let prev_index: HashMap<CellKey, usize> = previous
            .as_ref()
            .map(|(keys, ..)| keys.iter().enumerate().map(|(i, &k)| (k, i)).collect())
            .unwrap_or_default();

        let mut own = vec![0.0; n_elem * nn];
        let mut minv = Vec::with_capacity(n_elem);
        let mut recomputed = 0;
        let mut fresh = vec![false; n_elem];
        for e in 0..n_elem {
            let key = mesh.key(e);
            let reuse = previous.as_ref().and_then(|(_, (pslots, poff), pown, pminv)| {
                let &p = prev_index.get(&key)?;
                (pslots[poff[p]..poff[p + 1]] == slots[offsets[e]..offsets[e + 1]]).then(|| (&pown[p * nn..(p + 1) * nn], pminv[p].clone()))
            });
            match reuse {
                Some((block, mi)) => {
                    own[e * nn..(e + 1) * nn].copy_from_slice(block);
                    minv.push(mi);
                }
                None => {
                    let vol = self.volume_template(key.level, mesh)?;
                    own[e * nn..(e + 1) * nn].copy_from_slice(&vol);
                    minv.push(self.minv_template(key.level, mesh)?);
                    fresh[e] = true;
                    recomputed += 1;
                }
            }
        }
        for (face, blocks) in faces.iter().zip(&face_blocks) {
            if fresh[face.owner] {
                for (x, y) in own[face.owner * nn..(face.owner + 1) * nn].iter_mut().zip(&blocks.blocks.oo) {
                    *x += y;
                }
            }
            if fresh[face.neighbor] {
                for (x, y) in own[face.neighbor * nn..(face.neighbor + 1) * nn].iter_mut().zip(&blocks.blocks.nn) {
                    *x += y;
                }
            }
        }


        self.keys = mesh.active_keys().to_vec();
        self.slots = slots;
        self.slot_offsets = offsets.clone();
        self.own = own;
        self.minv = minv;
        self.offsets = offsets;
        self.couplings = couplings;
        self.generation = mesh.generation();
        self.recomputed = recomputed;
        Ok(())
    }

    fn volume_template(&mut self, level: u8, mesh: &ForestMesh) -> Result<Arc<[f64]>> {
        if let Some(v) = self.cache.volume.get(&level) {
            return Ok(v.clone());
        }
        let k: Arc<[f64]> = element_stiffness(mesh.cell_size(level), &self.basis, &self.diffusion)?.into();
        self.cache.volume.insert(level, k.clone());
        Ok(k)
    }

    fn minv_template(&mut self, level: u8, mesh: &ForestMesh) -> Result<Arc<[f64]>> {
        if let Some(v) = self.cache.minv.get(&level) {
            return Ok(v.clone());
        }
        let m: Arc<[f64]> = mass_inverse_for_size(mesh.cell_size(level), &self.basis)?.into();
        self.cache.minv.insert(level, m.clone());
        Ok(m)
    }

    fn face_template(&mut self, config: FaceConfig, face: &FaceInfo, mesh: &ForestMesh) -> Result<Arc<FaceTemplate>> {
        if let Some(b) = self.cache.faces.get(&config) {
            return Ok(b.clone());
        }
        let geom = FaceGeometry::of(face, mesh);
        let blocks = face_coupling(&geom, &self.basis, &self.diffusion, self.gamma)?;
        let b = Arc::new(FaceTemplate {
            on: Arc::from(blocks.on.as_slice()),
            no: Arc::from(blocks.no.as_slice()),
            blocks,
        });
        self.cache.faces.insert(config, b.clone());
        Ok(b)
    }

    /// `K u` restricted to the rows of `elem` (no mass scaling), accumulated
    /// into `out`. `neighbor` yields the values of coupling `k`.
    #[inline]
    pub fn stiffness_rows<'a>(&self, elem: usize, own: &[f64], mut neighbor: impl FnMut(usize, usize) -> &'a [f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        matvec_acc(self.own_block(elem), own, out);
        for (k, c) in self.couplings(elem).iter().enumerate() {
            matvec_acc(&c.block, neighbor(k, c.neighbor), out);
        }
    }

    /// `(M⁻¹ K u)` on the rows of `elem`.
    #[inline]
    pub fn diffusion_rate_into<'a>(&self, elem: usize, own: &[f64], neighbor: impl FnMut(usize, usize) -> &'a [f64], out: &mut [f64]) {
        self.stiffness_rows(elem, own, neighbor, out);
        for (o, m) in out.iter_mut().zip(self.minv(elem).iter()) {
            *o *= m;
        }
    }

    /// Global `K u` for an element-major vector `u`.
    pub fn apply_stiffness(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; u.len()];
        for e in 0..self.n_elements() {
            let (head, tail) = out.split_at_mut(e * n);
            let _ = head;
            self.stiffness_rows(e, &u[e * n..(e + 1) * n], |_, nb| &u[nb * n..(nb + 1) * n], &mut tail[..n]);
        }
        out
    }

    /// Global `M⁻¹ K u`.
    pub fn apply_operator(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = self.apply_stiffness(u);
        for e in 0..self.n_elements() {
            for (o, m) in out[e * n..(e + 1) * n].iter_mut().zip(self.minv(e).iter()) {
                *o *= m;
            }
        }
        out
    }

    /// Global mass-weighted inner product `uᵀ M v`.
    pub fn mass_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        let n = self.n;
        (0..self.n_elements())
            .map(|e| {
                self.minv(e)
                    .iter()
                    .enumerate()
                    .map(|(i, m)| u[e * n + i] * v[e * n + i] / m)
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn spatial_dim(&self) -> usize {
        self.dim
    }
}

/// Diffusion rate `M⁻¹(K_vol u + Σ_F face blocks)` of one element.
///
/// `neighbor_values[k]` must hold the nodal values of the neighbor of
/// coupling `k` (in the order of [`ElementOps::couplings`]).
pub fn apply_diffusion(ops: &ElementOps, elem: usize, own: &[f64], neighbor_values: &[&[f64]]) -> Result<Vec<f64>> {
    let n = ops.nodes_per_element();
    if elem >= ops.n_elements() {
        return Err(Error::InvalidArgument(format!("element {elem} out of range")));
    }
    if own.len() != n {
        return Err(Error::Layout(format!("expected {n} nodal values, got {}", own.len())));
    }
    let needed = ops.couplings(elem).len();
    if neighbor_values.len() != needed {
        return Err(Error::ContractViolation(format!(
            "element {elem} has {needed} face neighbors, {} traces supplied",
            neighbor_values.len()
        )));
    }
    if let Some(bad) = neighbor_values.iter().position(|v| v.len() != n) {
        return Err(Error::Layout(format!("neighbor trace {bad} has wrong length")));
    }
    let mut out = vec![0.0; n];
    ops.diffusion_rate_into(elem, own, |k, _| neighbor_values[k], &mut out);
    Ok(out)
}

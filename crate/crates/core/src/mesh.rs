//! Forest-of-trees h-refinement on a Cartesian root grid (1D lines, 2D quads).
//!
//! Every root element is the top of a binary (1D) or quad (2D) tree. Cells are
//! addressed by [`CellKey`]: the refinement level plus integer coordinates on
//! the uniform grid of that level, so a child of `(l, ix, iy)` is
//! `(l + 1, 2 ix + cx, 2 iy + cy)`. Leaves form the active element list;
//! its order is deterministic (root-major, then Morton order inside a root).
//!
//! The forest is kept 2:1 balanced across faces, so a hanging face always
//! joins a leaf to a neighbor exactly one level coarser.

use std::collections::{BTreeMap, BTreeSet};

use rustc_hash::FxHashMap as HashMap;

use crate::error::{Error, Result};

/// Hard upper bound on refinement depth (keeps Morton keys in 64 bits).
pub const LEVEL_LIMIT: u8 = 20;

/// Default maximum refinement level.
pub const DEFAULT_MAX_LEVEL: u8 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub level: u8,
    pub ix: u32,
    pub iy: u32,
}

impl CellKey {
    pub fn new(level: u8, ix: u32, iy: u32) -> Self {
        Self { level, ix, iy }
    }

    pub fn parent(self) -> Option<CellKey> {
        (self.level > 0).then(|| CellKey::new(self.level - 1, self.ix >> 1, self.iy >> 1))
    }

    /// Child in position `c` (bit 0: upper half in x, bit 1: upper half in y).
    pub fn child(self, c: usize) -> CellKey {
        CellKey::new(
            self.level + 1,
            2 * self.ix + (c & 1) as u32,
            2 * self.iy + (c >> 1 & 1) as u32,
        )
    }

    /// Position of this cell inside its parent.
    pub fn child_position(self) -> usize {
        (self.ix & 1) as usize | ((self.iy & 1) as usize) << 1
    }

    fn coord(self, axis: usize) -> u32 {
        if axis == 0 {
            self.ix
        } else {
            self.iy
        }
    }
}

/// Local face numbering: `0 = -x`, `1 = +x`, `2 = -y`, `3 = +y`.
#[inline]
pub fn face_axis(face: usize) -> usize {
    face / 2
}

#[inline]
pub fn face_sign(face: usize) -> f64 {
    if face % 2 == 0 {
        -1.0
    } else {
        1.0
    }
}

#[inline]
pub fn opposite_face(face: usize) -> usize {
    face ^ 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Node {
    Leaf(usize),
    Branch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaceKind {
    Conforming,
    /// The owner is one level finer than the neighbor and covers the lower
    /// (`0`) or upper (`1`) half of the neighbor's face.
    Hanging { subface: u8 },
}

/// One interior interface. Each geometric face (or fine sub-face) appears once.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceInfo {
    pub owner: usize,
    pub neighbor: usize,
    pub owner_face: usize,
    pub neighbor_face: usize,
    pub kind: FaceKind,
    /// Outward unit normal from the owner.
    pub normal: [f64; 2],
    /// Owner extent along the normal (the finer side on hanging faces).
    pub h_f: f64,
    /// Face measure per unit reference measure: the face length in 2D, 1 in 1D.
    pub w_f: f64,
}

/// Record of one topology change.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefinementDelta {
    pub old_generation: u64,
    pub new_generation: u64,
    /// Elements present in both layouts: `(old id, new id)`.
    pub kept: Vec<(usize, usize)>,
    /// Refined leaves: `(old parent id, new child ids in child-position order)`.
    pub refined: Vec<(usize, Vec<usize>)>,
    /// Collapsed families: `(old child ids in child-position order, new parent id)`.
    pub coarsened: Vec<(Vec<usize>, usize)>,
    /// Old ids refined only to restore 2:1 balance (also listed in `refined`).
    pub balance_induced: Vec<usize>,
    /// Marked ids ignored because they sit at `max_level` (refine) or their
    /// family was incomplete or would break balance (coarsen).
    pub skipped: Vec<usize>,
}

impl RefinementDelta {
    pub fn is_empty(&self) -> bool {
        self.refined.is_empty() && self.coarsened.is_empty()
    }

    /// Old id to new id for every element that is unchanged.
    pub fn kept_map(&self) -> HashMap<usize, usize> {
        self.kept.iter().copied().collect()
    }
}

/// What lies across one face of a cell.
#[derive(Clone, Debug, PartialEq)]
enum Across {
    Boundary,
    Same(CellKey),
    Coarser(CellKey),
    /// Leaves one level finer that touch the face.
    Finer(Vec<CellKey>),
    /// Something two or more levels finer touches the face.
    Deeper,
}

#[derive(Clone, Debug)]
pub struct ForestMesh {
    dim: usize,
    origin: [f64; 2],
    root_size: [f64; 2],
    counts: [u32; 2],
    max_level: u8,
    nodes: HashMap<CellKey, Node>,
    active: Vec<CellKey>,
    generation: u64,
}

impl ForestMesh {
    /// Uniform Cartesian root mesh over `[0, extent]` with `counts` roots per axis.
    pub fn build_cartesian_root(extent: &[f64], counts: &[u32], dim: usize) -> Result<Self> {
        Self::with_origin([0.0; 2], extent, counts, dim)
    }

    pub fn with_origin(origin: [f64; 2], extent: &[f64], counts: &[u32], dim: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidArgument(format!("dimension must be 1 or 2, got {dim}")));
        }
        if extent.len() != dim || counts.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "expected {dim} extents and counts, got {} and {}",
                extent.len(),
                counts.len()
            )));
        }
        let mut root_size = [1.0; 2];
        let mut c = [1u32; 2];
        for a in 0..dim {
            if !(extent[a] > 0.0) || !extent[a].is_finite() {
                return Err(Error::InvalidArgument(format!("extent along axis {a} must be positive")));
            }
            if counts[a] == 0 {
                return Err(Error::InvalidArgument(format!("element count along axis {a} must be >= 1")));
            }
            c[a] = counts[a];
            root_size[a] = extent[a] / counts[a] as f64;
        }
        let mut mesh = Self {
            dim,
            origin,
            root_size,
            counts: c,
            max_level: DEFAULT_MAX_LEVEL,
            nodes: HashMap::default(),
            active: Vec::new(),
            generation: 0,
        };
        for iy in 0..c[1] {
            for ix in 0..c[0] {
                mesh.nodes.insert(CellKey::new(0, ix, iy), Node::Leaf(0));
                mesh.active.push(CellKey::new(0, ix, iy));
            }
        }
        mesh.reindex();
        Ok(mesh)
    }

    pub fn with_max_level(mut self, max_level: u8) -> Result<Self> {
        self.set_max_level(max_level)?;
        Ok(self)
    }

    pub fn set_max_level(&mut self, max_level: u8) -> Result<()> {
        if max_level > LEVEL_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "max_level {max_level} exceeds the limit {LEVEL_LIMIT}"
            )));
        }
        self.max_level = max_level;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_level(&self) -> u8 {
        self.max_level
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn root_counts(&self) -> [u32; 2] {
        self.counts
    }

    pub fn root_size(&self) -> [f64; 2] {
        self.root_size
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    /// Total extent of the root domain.
    pub fn extent(&self) -> [f64; 2] {
        [
            self.root_size[0] * self.counts[0] as f64,
            if self.dim == 2 { self.root_size[1] * self.counts[1] as f64 } else { 0.0 },
        ]
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn active_keys(&self) -> &[CellKey] {
        &self.active
    }

    pub fn key(&self, elem: usize) -> CellKey {
        self.active[elem]
    }

    pub fn level(&self, elem: usize) -> u8 {
        self.active[elem].level
    }

    pub fn index_of(&self, key: CellKey) -> Option<usize> {
        match self.nodes.get(&key) {
            Some(Node::Leaf(i)) => Some(*i),
            _ => None,
        }
    }

    pub fn is_leaf(&self, key: CellKey) -> bool {
        matches!(self.nodes.get(&key), Some(Node::Leaf(_)))
    }

    pub fn max_active_level(&self) -> u8 {
        self.active.iter().map(|k| k.level).max().unwrap_or(0)
    }

    /// Cell extent per axis at `level` (exact halving of the root size).
    pub fn cell_size(&self, level: u8) -> [f64; 2] {
        let scale = 1.0 / (1u64 << level) as f64;
        [
            self.root_size[0] * scale,
            if self.dim == 2 { self.root_size[1] * scale } else { 1.0 },
        ]
    }

    /// Lower corner and size of a cell.
    pub fn cell_bounds(&self, key: CellKey) -> ([f64; 2], [f64; 2]) {
        let size = self.cell_size(key.level);
        let lo = [
            self.origin[0] + key.ix as f64 * size[0],
            if self.dim == 2 { self.origin[1] + key.iy as f64 * size[1] } else { 0.0 },
        ];
        (lo, size)
    }

    pub fn element_bounds(&self, elem: usize) -> ([f64; 2], [f64; 2]) {
        self.cell_bounds(self.active[elem])
    }

    /// Measure (length or area) of an element.
    pub fn element_measure(&self, elem: usize) -> f64 {
        let (_, s) = self.element_bounds(elem);
        s[..self.dim].iter().product()
    }

    pub fn element_center(&self, elem: usize) -> [f64; 2] {
        let (lo, s) = self.element_bounds(elem);
        let mut c = [0.0; 2];
        for a in 0..self.dim {
            c[a] = lo[a] + 0.5 * s[a];
        }
        c
    }

    /// Maps reference coordinates in `[-1, 1]^dim` to physical coordinates.
    pub fn to_physical(&self, elem: usize, xi: [f64; 2]) -> [f64; 2] {
        let (lo, s) = self.element_bounds(elem);
        let mut x = [0.0; 2];
        for a in 0..self.dim {
            x[a] = lo[a] + 0.5 * (xi[a] + 1.0) * s[a];
        }
        x
    }

    /// Active element containing `point`, together with its reference
    /// coordinates. Points on shared boundaries go to the upper element.
    pub fn locate(&self, point: [f64; 2]) -> Option<(usize, [f64; 2])> {
        let mut root = [0u32; 2];
        for a in 0..self.dim {
            let r = (point[a] - self.origin[a]) / self.root_size[a];
            let n = self.counts[a] as f64;
            if !(r >= 0.0 && r <= n) {
                return None;
            }
            root[a] = (r.floor() as u32).min(self.counts[a] - 1);
        }
        let mut key = CellKey::new(0, root[0], root[1]);
        loop {
            match self.nodes.get(&key)? {
                Node::Leaf(i) => {
                    let (lo, s) = self.cell_bounds(key);
                    let mut xi = [0.0; 2];
                    for a in 0..self.dim {
                        xi[a] = (2.0 * (point[a] - lo[a]) / s[a] - 1.0).clamp(-1.0, 1.0);
                    }
                    return Some((*i, xi));
                }
                Node::Branch => {
                    let (lo, s) = self.cell_bounds(key);
                    let mut c = 0;
                    for a in 0..self.dim {
                        if point[a] >= lo[a] + 0.5 * s[a] {
                            c |= 1 << a;
                        }
                    }
                    key = key.child(c);
                }
            }
        }
    }

    fn check_generation(&self, generation: u64) -> Result<()> {
        if generation != self.generation {
            return Err(Error::StaleTopology {
                expected: generation,
                found: self.generation,
            });
        }
        Ok(())
    }

    fn in_domain(&self, level: u8, axis: usize, coord: i64) -> bool {
        coord >= 0 && coord < ((self.counts[axis] as i64) << level)
    }

    fn across(&self, key: CellKey, face: usize) -> Across {
        let axis = face_axis(face);
        if axis >= self.dim {
            return Across::Boundary;
        }
        let delta: i64 = if face % 2 == 0 { -1 } else { 1 };
        let c = key.coord(axis) as i64 + delta;
        if !self.in_domain(key.level, axis, c) {
            return Across::Boundary;
        }
        let nk = if axis == 0 {
            CellKey::new(key.level, c as u32, key.iy)
        } else {
            CellKey::new(key.level, key.ix, c as u32)
        };
        match self.nodes.get(&nk) {
            Some(Node::Leaf(_)) => Across::Same(nk),
            Some(Node::Branch) => {
                // children of nk on the side facing `key`
                let side_bit = if delta > 0 { 0 } else { 1 };
                let mut leaves = Vec::new();
                let tangential = if self.dim == 2 { 2 } else { 1 };
                for t in 0..tangential {
                    let c = if axis == 0 { side_bit | t << 1 } else { t | side_bit << 1 };
                    let ck = nk.child(c);
                    match self.nodes.get(&ck) {
                        Some(Node::Leaf(_)) => leaves.push(ck),
                        _ => return Across::Deeper,
                    }
                }
                Across::Finer(leaves)
            }
            None => {
                let mut k = nk;
                while let Some(p) = k.parent() {
                    if let Some(Node::Leaf(_)) = self.nodes.get(&p) {
                        return Across::Coarser(p);
                    }
                    k = p;
                }
                unreachable!("root cell missing for {nk:?}")
            }
        }
    }

    /// Active neighbors of `elem` across each face.
    pub fn neighbors(&self, elem: usize) -> Vec<usize> {
        let key = self.active[elem];
        let mut out = Vec::new();
        for f in 0..2 * self.dim {
            match self.across(key, f) {
                Across::Same(k) | Across::Coarser(k) => out.extend(self.index_of(k)),
                Across::Finer(ks) => out.extend(ks.into_iter().filter_map(|k| self.index_of(k))),
                Across::Boundary | Across::Deeper => {}
            }
        }
        out
    }

    /// All interior faces; hanging interfaces appear once per fine sub-face
    /// with the fine element as owner.
    pub fn face_list(&self) -> Vec<FaceInfo> {
        let mut faces = Vec::new();
        for (e, &key) in self.active.iter().enumerate() {
            let size = self.cell_size(key.level);
            for f in 0..2 * self.dim {
                let axis = face_axis(f);
                let (neighbor, kind) = match self.across(key, f) {
                    Across::Same(k) if f % 2 == 1 => (k, FaceKind::Conforming),
                    Across::Coarser(k) => {
                        debug_assert_eq!(k.level + 1, key.level, "2:1 balance violated");
                        let subface = if self.dim == 2 {
                            (key.coord(1 - axis) & 1) as u8
                        } else {
                            0
                        };
                        (k, FaceKind::Hanging { subface })
                    }
                    Across::Deeper => panic!("2:1 balance violated at {key:?}"),
                    _ => continue,
                };
                let mut normal = [0.0; 2];
                normal[axis] = face_sign(f);
                let w_f = if self.dim == 2 { size[1 - axis] } else { 1.0 };
                faces.push(FaceInfo {
                    owner: e,
                    neighbor: self.index_of(neighbor).expect("neighbor is a leaf"),
                    owner_face: f,
                    neighbor_face: opposite_face(f),
                    kind,
                    normal,
                    h_f: size[axis],
                    w_f,
                });
            }
        }
        faces
    }

    /// Refines the marked elements (ids of generation `generation`), then
    /// restores 2:1 balance. Elements already at `max_level` are skipped.
    pub fn refine(&mut self, generation: u64, marked: &[usize]) -> Result<RefinementDelta> {
        self.check_generation(generation)?;
        self.check_ids(marked)?;
        let old_active = self.active.clone();
        let mut delta = RefinementDelta {
            old_generation: self.generation,
            ..Default::default()
        };
        let mut requested = BTreeSet::new();
        for &id in marked {
            let key = self.active[id];
            if key.level >= self.max_level {
                delta.skipped.push(id);
            } else {
                requested.insert(key);
            }
        }
        let mut work: Vec<(CellKey, bool)> = requested.iter().rev().map(|&k| (k, false)).collect();
        let mut induced = BTreeSet::new();
        while let Some((key, forced)) = work.pop() {
            if !self.is_leaf(key) {
                continue;
            }
            self.split(key);
            if forced && !requested.contains(&key) {
                induced.insert(key);
            }
            for f in 0..2 * self.dim {
                if let Across::Coarser(k) = self.across(key, f) {
                    if k.level < key.level {
                        work.push((k, true));
                    }
                }
            }
        }
        if requested.is_empty() && induced.is_empty() {
            delta.new_generation = self.generation;
            delta.kept = (0..old_active.len()).map(|i| (i, i)).collect();
            return Ok(delta);
        }
        self.finish_topology_change();
        delta.new_generation = self.generation;
        for (old, &key) in old_active.iter().enumerate() {
            if let Some(new) = self.index_of(key) {
                delta.kept.push((old, new));
            } else {
                let children: Vec<usize> = (0..1 << self.dim)
                    .map(|c| self.index_of(key.child(c)).expect("single-level refinement"))
                    .collect();
                delta.refined.push((old, children));
                if induced.contains(&key) {
                    delta.balance_induced.push(old);
                }
            }
        }
        Ok(delta)
    }

    /// Collapses sibling families whose members are all marked, provided the
    /// collapse keeps 2:1 balance. Other marked ids are reported as skipped.
    pub fn coarsen(&mut self, generation: u64, marked: &[usize]) -> Result<RefinementDelta> {
        self.check_generation(generation)?;
        self.check_ids(marked)?;
        let old_active = self.active.clone();
        let mut delta = RefinementDelta {
            old_generation: self.generation,
            ..Default::default()
        };
        let n_children = 1usize << self.dim;
        let mut families: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
        for &id in marked {
            match self.active[id].parent() {
                Some(p) => families.entry(p).or_default().push(id),
                None => delta.skipped.push(id),
            }
        }
        let mut candidates: Vec<(CellKey, Vec<usize>)> = Vec::new();
        for (parent, mut ids) in families {
            ids.sort_unstable();
            ids.dedup();
            if ids.len() == n_children {
                candidates.push((parent, ids));
            } else {
                delta.skipped.extend(ids);
            }
        }
        // finest families first so that their collapse can unlock coarser ones
        candidates.sort_by(|a, b| b.0.level.cmp(&a.0.level).then(a.0.cmp(&b.0)));
        let mut collapsed = Vec::new();
        for (parent, ids) in candidates {
            if self.can_collapse(parent) {
                for c in 0..n_children {
                    self.nodes.remove(&parent.child(c));
                }
                self.nodes.insert(parent, Node::Leaf(0));
                collapsed.push(parent);
            } else {
                delta.skipped.extend(ids);
            }
        }
        delta.skipped.sort_unstable();
        if collapsed.is_empty() {
            delta.new_generation = self.generation;
            delta.kept = (0..old_active.len()).map(|i| (i, i)).collect();
            return Ok(delta);
        }
        let old_index: HashMap<CellKey, usize> =
            old_active.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        self.finish_topology_change();
        delta.new_generation = self.generation;
        for (new, &key) in self.active.iter().enumerate() {
            if let Some(&old) = old_index.get(&key) {
                delta.kept.push((old, new));
            }
        }
        delta.kept.sort_unstable();
        for parent in collapsed {
            let children = (0..n_children).map(|c| old_index[&parent.child(c)]).collect();
            delta.coarsened.push((children, self.index_of(parent).unwrap()));
        }
        delta.coarsened.sort_by_key(|c| c.1);
        Ok(delta)
    }

    fn can_collapse(&self, parent: CellKey) -> bool {
        let n_children = 1usize << self.dim;
        if !(0..n_children).all(|c| self.is_leaf(parent.child(c))) {
            return false;
        }
        (0..2 * self.dim).all(|f| !matches!(self.across(parent, f), Across::Deeper))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.active.len()) {
            Some(&bad) => Err(Error::InvalidArgument(format!(
                "element id {bad} out of range ({} active)",
                self.active.len()
            ))),
            None => Ok(()),
        }
    }

    fn split(&mut self, key: CellKey) {
        self.nodes.insert(key, Node::Branch);
        for c in 0..1 << self.dim {
            self.nodes.insert(key.child(c), Node::Leaf(0));
        }
    }

    fn finish_topology_change(&mut self) {
        self.active = self
            .nodes
            .iter()
            .filter(|(_, n)| matches!(n, Node::Leaf(_)))
            .map(|(&k, _)| k)
            .collect();
        self.reindex();
        self.generation += 1;
        debug_assert!(self.is_balanced(), "2:1 balance violated after topology change");
        debug_assert!(self.partition_error() < 1e-12, "leaves do not partition the domain");
    }

    fn order_key(&self, key: CellKey) -> (u32, u32, u64) {
        let shift = LEVEL_LIMIT - key.level;
        let rx = key.ix >> key.level;
        let ry = key.iy >> key.level;
        let lx = ((key.ix - (rx << key.level)) as u64) << shift;
        let ly = ((key.iy - (ry << key.level)) as u64) << shift;
        (ry, rx, interleave(lx) | interleave(ly) << 1)
    }

    fn reindex(&mut self) {
        let mut keyed: Vec<_> = self.active.iter().map(|&k| (self.order_key(k), k)).collect();
        keyed.sort_unstable();
        self.active = keyed.into_iter().map(|(_, k)| k).collect();
        for (i, k) in self.active.iter().enumerate() {
            self.nodes.insert(*k, Node::Leaf(i));
        }
    }

    /// True when face-adjacent leaves differ by at most one level.
    pub fn is_balanced(&self) -> bool {
        self.active.iter().all(|&k| {
            (0..2 * self.dim).all(|f| match self.across(k, f) {
                Across::Deeper => false,
                Across::Coarser(c) => c.level + 1 >= k.level,
                _ => true,
            })
        })
    }

    /// Largest level difference between face-adjacent leaves.
    pub fn max_level_jump(&self) -> u8 {
        let mut worst = 0;
        for &k in &self.active {
            for f in 0..2 * self.dim {
                match self.across(k, f) {
                    Across::Coarser(c) => worst = worst.max(k.level - c.level),
                    Across::Deeper => worst = worst.max(2),
                    _ => {}
                }
            }
        }
        worst
    }

    /// Relative difference between the summed leaf measure and the root measure.
    pub fn partition_error(&self) -> f64 {
        let total: f64 = (0..self.active.len()).map(|e| self.element_measure(e)).sum();
        let ext = self.extent();
        let root: f64 = ext[..self.dim].iter().product();
        ((total - root) / root).abs()
    }
}

fn interleave(mut x: u64) -> u64 {
    x &= 0xFFFF_FFFF;
    x = (x | x << 16) & 0x0000_FFFF_0000_FFFF;
    x = (x | x << 8) & 0x00FF_00FF_00FF_00FF;
    x = (x | x << 4) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | x << 2) & 0x3333_3333_3333_3333;
    x = (x | x << 1) & 0x5555_5555_5555_5555;
    x
}

//! Legacy ASCII VTK output of DG fields, the matching reader and the
//! snapshot manifest.
//!
//! Every DG node becomes its own point, so points are duplicated across
//! element interfaces. Cells connect the corner nodes of each element.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::basis::Basis;
use crate::error::{Error, Result};
use crate::mesh::ForestMesh;

const VTK_LINE: u8 = 3;
const VTK_QUAD: u8 = 9;

/// A named field; nodal fields hold `n_nodes` values per element, cell
/// fields one value per element.
#[derive(Clone, Copy, Debug)]
pub struct Field<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

fn corner_nodes(basis: &Basis) -> Vec<usize> {
    let p = basis.order();
    let n1 = p + 1;
    if basis.dim() == 1 {
        vec![0, p]
    } else {
        vec![0, p, n1 * n1 - 1, p * n1]
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::InvalidArgument(format!("field name {name:?} must be a non-empty word")));
    }
    Ok(())
}

/// Renders the file contents. Output is deterministic for fixed inputs.
pub fn vtk_string(mesh: &ForestMesh, basis: &Basis, point_fields: &[Field<'_>], cell_fields: &[Field<'_>]) -> Result<String> {
    if basis.dim() != mesh.dim() {
        return Err(Error::InvalidArgument("basis and mesh dimensions differ".into()));
    }
    let n = basis.n_nodes();
    let n_elem = mesh.n_active();
    let n_points = n_elem * n;
    for f in point_fields {
        check_name(f.name)?;
        if f.values.len() != n_points {
            return Err(Error::Layout(format!("point field {} has {} values, mesh has {n_points} nodes", f.name, f.values.len())));
        }
    }
    for f in cell_fields {
        check_name(f.name)?;
        if f.values.len() != n_elem {
            return Err(Error::Layout(format!("cell field {} has {} values, mesh has {n_elem} elements", f.name, f.values.len())));
        }
    }

    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(out, "cardiolts generation {}", mesh.generation());
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(out, "POINTS {n_points} double");
    for e in 0..n_elem {
        for q in 0..n {
            let x = mesh.to_physical(e, basis.node_ref(q));
            let _ = writeln!(out, "{} {} 0", x[0], if mesh.dim() == 2 { x[1] } else { 0.0 });
        }
    }
    let corners = corner_nodes(basis);
    let _ = writeln!(out, "CELLS {n_elem} {}", n_elem * (corners.len() + 1));
    for e in 0..n_elem {
        out.push_str(&corners.len().to_string());
        for c in &corners {
            let _ = write!(out, " {}", e * n + c);
        }
        out.push('\n');
    }
    let _ = writeln!(out, "CELL_TYPES {n_elem}");
    let ty = if mesh.dim() == 1 { VTK_LINE } else { VTK_QUAD };
    for _ in 0..n_elem {
        let _ = writeln!(out, "{ty}");
    }

    let _ = writeln!(out, "CELL_DATA {n_elem}");
    out.push_str("SCALARS level int 1\nLOOKUP_TABLE default\n");
    for e in 0..n_elem {
        let _ = writeln!(out, "{}", mesh.level(e));
    }
    out.push_str("SCALARS order int 1\nLOOKUP_TABLE default\n");
    for _ in 0..n_elem {
        let _ = writeln!(out, "{}", basis.order());
    }
    for f in cell_fields {
        let _ = writeln!(out, "SCALARS {} double 1\nLOOKUP_TABLE default", f.name);
        for v in f.values {
            let _ = writeln!(out, "{v}");
        }
    }
    if !point_fields.is_empty() {
        let _ = writeln!(out, "POINT_DATA {n_points}");
        for f in point_fields {
            let _ = writeln!(out, "SCALARS {} double 1\nLOOKUP_TABLE default", f.name);
            for v in f.values {
                let _ = writeln!(out, "{v}");
            }
        }
    }
    Ok(out)
}

/// Writes [`vtk_string`] to `path`.
pub fn write_vtk(path: &Path, mesh: &ForestMesh, basis: &Basis, point_fields: &[Field<'_>], cell_fields: &[Field<'_>]) -> Result<()> {
    let text = vtk_string(mesh, basis, point_fields, cell_fields)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Contents of a file written by [`write_vtk`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VtkData {
    pub points: Vec<[f64; 2]>,
    pub cells: Vec<Vec<usize>>,
    pub cell_types: Vec<u8>,
    pub cell_data: BTreeMap<String, Vec<f64>>,
    pub point_data: BTreeMap<String, Vec<f64>>,
}

fn parse_err(what: impl Into<String>) -> Error {
    Error::Layout(format!("malformed VTK file: {}", what.into()))
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| parse_err(format!("missing {what}")))?
        .parse()
        .map_err(|_| parse_err(format!("bad {what}")))
}

impl VtkData {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().skip(4);
        let mut data = VtkData::default();
        let mut section: Option<(bool, usize)> = None;
        while let Some(line) = lines.next() {
            let mut tok = line.split_whitespace();
            match tok.next() {
                None => continue,
                Some("POINTS") => {
                    let count: usize = parse_num(tok.next(), "point count")?;
                    for _ in 0..count {
                        let l = lines.next().ok_or_else(|| parse_err("truncated POINTS"))?;
                        let mut t = l.split_whitespace();
                        data.points.push([parse_num(t.next(), "x")?, parse_num(t.next(), "y")?]);
                    }
                }
                Some("CELLS") => {
                    let count: usize = parse_num(tok.next(), "cell count")?;
                    for _ in 0..count {
                        let l = lines.next().ok_or_else(|| parse_err("truncated CELLS"))?;
                        let ids: Vec<usize> = l.split_whitespace().skip(1).map(|s| s.parse().map_err(|_| parse_err("bad cell"))).collect::<Result<_>>()?;
                        data.cells.push(ids);
                    }
                }
                Some("CELL_TYPES") => {
                    let count: usize = parse_num(tok.next(), "cell type count")?;
                    for _ in 0..count {
                        data.cell_types.push(parse_num(lines.next(), "cell type")?);
                    }
                }
                Some("CELL_DATA") => section = Some((true, parse_num(tok.next(), "cell data count")?)),
                Some("POINT_DATA") => section = Some((false, parse_num(tok.next(), "point data count")?)),
                Some("SCALARS") => {
                    let name = tok.next().ok_or_else(|| parse_err("unnamed SCALARS"))?.to_string();
                    let (is_cell, count) = section.ok_or_else(|| parse_err("SCALARS outside a data section"))?;
                    lines.next(); // lookup table
                    let mut values = Vec::with_capacity(count);
                    for _ in 0..count {
                        values.push(parse_num(lines.next(), &name)?);
                    }
                    if is_cell {
                        data.cell_data.insert(name, values);
                    } else {
                        data.point_data.insert(name, values);
                    }
                }
                Some(other) => return Err(parse_err(format!("unexpected keyword {other}"))),
            }
        }
        if data.cell_types.len() != data.cells.len() {
            return Err(parse_err("cell and cell type counts differ"));
        }
        Ok(data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        if self.cell_types.first() == Some(&VTK_LINE) {
            1
        } else {
            2
        }
    }

    /// Element boxes recovered from the corner nodes and the element order.
    pub fn element_boxes(&self) -> Result<(Basis, Vec<([f64; 2], [f64; 2])>)> {
        let orders = self.cell_data.get("order").ok_or_else(|| parse_err("no order cell data"))?;
        let order = orders.first().copied().unwrap_or(1.0) as usize;
        if orders.iter().any(|&o| o as usize != order) {
            return Err(Error::Layout("mixed element orders are not supported".into()));
        }
        let basis = Basis::new(order, self.dim())?;
        let xi = basis.rule().points[basis.n1() - 1];
        let boxes = self
            .cells
            .iter()
            .map(|c| {
                let a = self.points[c[0]];
                let b = if self.dim() == 1 { self.points[c[1]] } else { self.points[c[2]] };
                let half = [(b[0] - a[0]) / (2.0 * xi), (b[1] - a[1]) / (2.0 * xi)];
                let center = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                ([center[0] - half[0], center[1] - half[1]], [2.0 * half[0], 2.0 * half[1]])
            })
            .collect();
        Ok((basis, boxes))
    }
}

/// Evaluates a nodal field of a snapshot at arbitrary points.
#[derive(Clone, Debug)]
pub struct Sampler {
    basis: Basis,
    boxes: Vec<([f64; 2], [f64; 2])>,
}

impl Sampler {
    pub fn new(data: &VtkData) -> Result<Self> {
        let (basis, boxes) = data.element_boxes()?;
        Ok(Self { basis, boxes })
    }

    /// Value at `x`, from the element containing it (nearest element when
    /// `x` lies outside all of them).
    pub fn sample(&self, values: &[f64], x: [f64; 2]) -> Option<f64> {
        let dim = self.basis.dim();
        let n = self.basis.n_nodes();
        let dist = |(lo, size): &([f64; 2], [f64; 2])| -> f64 {
            (0..dim).map(|a| (lo[a] - x[a]).max(x[a] - lo[a] - size[a]).max(0.0)).fold(0.0, f64::max)
        };
        let (e, bx) = self.boxes.iter().enumerate().min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))?;
        let mut xi = [0.0; 2];
        for a in 0..dim {
            xi[a] = (2.0 * (x[a] - bx.0[a]) / bx.1[a] - 1.0).clamp(-1.0, 1.0);
        }
        values.get(e * n..(e + 1) * n).map(|v| self.basis.evaluate(v, xi))
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub time: f64,
    pub file: String,
}

/// Plain-text snapshot index: `index time filename` per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn push(&mut self, time: f64, file: impl Into<String>) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if !(time > last.time) {
                return Err(Error::ContractViolation(format!("snapshot time {time} not after {}", last.time)));
            }
        }
        self.entries.push(ManifestEntry {
            index: self.entries.len(),
            time,
            file: file.into(),
        });
        Ok(())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|e| format!("{} {} {}\n", e.index, e.time, e.file)).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tok = line.split_whitespace();
            let bad = || Error::Layout(format!("manifest line {}: expected `index time filename`", i + 1));
            let index: usize = tok.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
            let time: f64 = tok.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
            let file = tok.next().ok_or_else(bad)?.to_string();
            if tok.next().is_some() {
                return Err(bad());
            }
            if let Some(last) = m.entries.last() {
                if !(time > last.time) {
                    return Err(Error::Layout(format!("manifest line {}: time {time} not after {}", i + 1, last.time)));
                }
            }
            m.entries.push(ManifestEntry { index, time, file });
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// LAT at the nodes of the first snapshot of a manifest, sampling later
/// snapshots (possibly on other meshes) at those positions.
pub fn lat_from_manifest(path: &Path, field: &str, threshold: f64) -> Result<(Vec<[f64; 2]>, Vec<Option<f64>>)> {
    let manifest = Manifest::read(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut points = Vec::new();
    let mut rec = None;
    for entry in &manifest.entries {
        let data = VtkData::read(&dir.join(&entry.file))?;
        let values = data
            .point_data
            .get(field)
            .ok_or_else(|| Error::Layout(format!("{} has no point field {field}", entry.file)))?;
        if rec.is_none() {
            points = data.points.clone();
            rec = Some(crate::lat::LatRecorder::new(points.len(), threshold));
        }
        let sampler = Sampler::new(&data)?;
        let sampled: Vec<f64> = points
            .iter()
            .map(|&x| sampler.sample(values, x).ok_or_else(|| Error::Layout(format!("{} is empty", entry.file))))
            .collect::<Result<_>>()?;
        rec.as_mut().expect("recorder set above").record(entry.time, &sampled)?;
    }
    let lat = match rec {
        Some(r) => r.finish()?,
        None => return Err(Error::InsufficientData("manifest lists no snapshots".into())),
    };
    Ok((points, lat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_count_is_nodes_per_element() {
        let mut mesh = ForestMesh::build_cartesian_root(&[2.0, 1.0], &[2, 1], 2).unwrap();
        mesh.refine(0, &[1]).unwrap();
        for p in 1..=3 {
            let basis = Basis::new(p, 2).unwrap();
            let text = vtk_string(&mesh, &basis, &[], &[]).unwrap();
            let data = VtkData::parse(&text).unwrap();
            assert_eq!(data.points.len(), mesh.n_active() * (p + 1) * (p + 1));
            assert_eq!(data.cells.len(), mesh.n_active());
            assert!(data.point_data.is_empty());
            assert_eq!(data.cell_data["level"], vec![0.0, 1.0, 1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn roundtrip_and_sampling() {
        let mut mesh = ForestMesh::build_cartesian_root(&[3.0, 2.0], &[3, 2], 2).unwrap();
        mesh.refine(0, &[4]).unwrap();
        let basis = Basis::new(2, 2).unwrap();
        let f = |x: [f64; 2]| 1.0 + x[0] * x[1] - 0.5 * x[1] * x[1];
        let phi: Vec<f64> = (0..mesh.n_active())
            .flat_map(|e| (0..basis.n_nodes()).map(move |q| (e, q)))
            .map(|(e, q)| f(mesh.to_physical(e, basis.node_ref(q))))
            .collect();
        let eta: Vec<f64> = (0..mesh.n_active()).map(|e| e as f64 * 0.25).collect();
        let text = vtk_string(&mesh, &basis, &[Field { name: "phi", values: &phi }], &[Field { name: "eta_s", values: &eta }]).unwrap();
        let data = VtkData::parse(&text).unwrap();
        assert_eq!(data.point_data["phi"], phi);
        assert_eq!(data.cell_data["eta_s"], eta);
        let s = Sampler::new(&data).unwrap();
        for x in [[0.3, 0.2], [2.9, 1.9], [1.4, 1.1], [2.2, 0.7]] {
            assert!((s.sample(&phi, x).unwrap() - f(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn layout_errors() {
        let mesh = ForestMesh::build_cartesian_root(&[1.0], &[2], 1).unwrap();
        let basis = Basis::new(1, 1).unwrap();
        let short = [0.0; 3];
        assert!(matches!(vtk_string(&mesh, &basis, &[Field { name: "phi", values: &short }], &[]), Err(Error::Layout(_))));
        assert!(vtk_string(&mesh, &basis, &[Field { name: "a b", values: &[0.0; 4] }], &[]).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let mut m = Manifest::default();
        m.push(0.0, "snap_0000.vtk").unwrap();
        m.push(1.5, "snap_0001.vtk").unwrap();
        assert!(m.push(1.5, "x").is_err());
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
        assert!(Manifest::parse("0 zero a.vtk").is_err());
    }
}

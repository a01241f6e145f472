//! Moving nodal fields across a mesh adaptation.
//!
//! Refinement interpolates the parent polynomial at the child nodes, which is
//! exact. Coarsening takes the L2 projection of the children onto the parent
//! space, computed exactly by child quadrature.

use crate::basis::Basis;
use crate::error::{Error, Result};
use crate::mesh::RefinementDelta;

/// Precomputed child interpolation matrices.
#[derive(Clone, Debug)]
pub struct TransferOps {
    n: usize,
    dim: usize,
    children: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TransferOps {
    pub fn new(basis: &Basis) -> Self {
        let n_children = 1 << basis.dim();
        Self {
            n: basis.n_nodes(),
            dim: basis.dim(),
            children: (0..n_children).map(|c| basis.child_interpolation(c)).collect(),
            weights: (0..basis.n_nodes()).map(|q| basis.node_weight(q)).collect(),
        }
    }

    pub fn nodes_per_element(&self) -> usize {
        self.n
    }

    /// Values of child `c` from parent values, `stride` components per node.
    pub fn prolong(&self, c: usize, parent: &[f64], stride: usize, out: &mut [f64]) {
        let p = &self.children[c];
        let n = self.n;
        for i in 0..n {
            for k in 0..stride {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += p[i * n + j] * parent[j * stride + k];
                }
                out[i * stride + k] = acc;
            }
        }
    }

    /// L2 projection of the children (in child order) onto the parent.
    pub fn restrict(&self, children: &[&[f64]], stride: usize, out: &mut [f64]) {
        let n = self.n;
        let scale = 1.0 / (1u32 << self.dim) as f64;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, u) in children.iter().enumerate() {
            let p = &self.children[c];
            for q in 0..n {
                for i in 0..n {
                    let f = scale * self.weights[q] / self.weights[i] * p[q * n + i];
                    for k in 0..stride {
                        out[i * stride + k] += f * u[q * stride + k];
                    }
                }
            }
        }
    }
}

/// Moves an element-major nodal field (`stride` values per node) through a
/// refinement or coarsening delta.
pub fn transfer_field(
    ops: &TransferOps,
    delta: &RefinementDelta,
    values: &[f64],
    stride: usize,
    n_new: usize,
) -> Result<Vec<f64>> {
    let block = ops.n * stride;
    if values.len() % block != 0 {
        return Err(Error::Layout(format!(
            "field of length {} is not a multiple of the element block {block}",
            values.len()
        )));
    }
    let old = |e: usize| -> Result<&[f64]> {
        values
            .get(e * block..(e + 1) * block)
            .ok_or_else(|| Error::Layout(format!("old element {e} outside field")))
    };
    let mut out = vec![f64::NAN; n_new * block];
    let target = |e: usize| -> Result<std::ops::Range<usize>> {
        if e >= n_new {
            return Err(Error::Layout(format!("new element {e} out of range {n_new}")));
        }
        Ok(e * block..(e + 1) * block)
    };
    for &(o, nw) in &delta.kept {
        let r = target(nw)?;
        out[r].copy_from_slice(old(o)?);
    }
    for (o, kids) in &delta.refined {
        let parent = old(*o)?;
        for (c, &k) in kids.iter().enumerate() {
            let r = target(k)?;
            ops.prolong(c, parent, stride, &mut out[r]);
        }
    }
    for (kids, p) in &delta.coarsened {
        let slices: Vec<&[f64]> = kids.iter().map(|&k| old(k)).collect::<Result<_>>()?;
        let r = target(*p)?;
        ops.restrict(&slices, stride, &mut out[r]);
    }
    if out.iter().any(|v| v.is_nan()) && !values.iter().any(|v| v.is_nan()) {
        return Err(Error::Layout("delta does not cover every new element".into()));
    }
    Ok(out)
}

/// Moves one scalar per element: children inherit, parents take the maximum.
pub fn transfer_element_scalar(delta: &RefinementDelta, values: &[f64], n_new: usize) -> Result<Vec<f64>> {
    let get = |e: usize| {
        values
            .get(e)
            .copied()
            .ok_or_else(|| Error::Layout(format!("old element {e} outside scalar field")))
    };
    let mut out = vec![0.0; n_new];
    for &(o, nw) in &delta.kept {
        out[nw] = get(o)?;
    }
    for (o, kids) in &delta.refined {
        let v = get(*o)?;
        for &k in kids {
            out[k] = v;
        }
    }
    for (kids, p) in &delta.coarsened {
        let mut m = f64::NEG_INFINITY;
        for &k in kids {
            m = m.max(get(k)?);
        }
        out[*p] = m;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::ForestMesh;

    fn interpolate(mesh: &ForestMesh, basis: &Basis, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        let mut u = Vec::new();
        for e in 0..mesh.n_active() {
            for q in 0..basis.n_nodes() {
                u.push(f(mesh.to_physical(e, basis.node_ref(q))));
            }
        }
        u
    }

    #[test]
    fn polynomials_survive_refine_and_coarsen() {
        for p in 1..=3 {
            let basis = Basis::new(p, 2).unwrap();
            let ops = TransferOps::new(&basis);
            let mut mesh = ForestMesh::build_cartesian_root(&[2.0, 2.0], &[2, 2], 2).unwrap();
            let f = |x: [f64; 2]| {
                let (a, b) = (x[0], x[1]);
                1.0 + a.powi(p as i32) - 2.0 * b.powi(p as i32) + a * b
            };
            let u = interpolate(&mesh, &basis, f);
            let d = mesh.refine(mesh.generation(), &[0, 3]).unwrap();
            let u2 = transfer_field(&ops, &d, &u, 1, mesh.n_active()).unwrap();
            let exact = interpolate(&mesh, &basis, f);
            for (a, b) in u2.iter().zip(&exact) {
                assert!((a - b).abs() < 1e-12);
            }
            let all: Vec<usize> = (0..mesh.n_active()).collect();
            let d = mesh.coarsen(mesh.generation(), &all).unwrap();
            let u3 = transfer_field(&ops, &d, &u2, 1, mesh.n_active()).unwrap();
            for (a, b) in u3.iter().zip(&u) {
                assert!((a - b).abs() < 1e-12, "p={p}");
            }
        }
    }

    #[test]
    fn coarsening_preserves_integral() {
        let basis = Basis::new(2, 1).unwrap();
        let ops = TransferOps::new(&basis);
        let mut mesh = ForestMesh::build_cartesian_root(&[1.0], &[1], 1).unwrap();
        mesh.refine(0, &[0]).unwrap();
        let u: Vec<f64> = (0..6).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        let integral = |mesh: &ForestMesh, u: &[f64]| -> f64 {
            (0..mesh.n_active())
                .map(|e| {
                    let j = mesh.element_measure(e) / 2.0;
                    (0..3).map(|q| basis.node_weight(q) * j * u[e * 3 + q]).sum::<f64>()
                })
                .sum()
        };
        let before = integral(&mesh, &u);
        let d = mesh.coarsen(mesh.generation(), &[0, 1]).unwrap();
        let v = transfer_field(&ops, &d, &u, 1, 1).unwrap();
        assert!((integral(&mesh, &v) - before).abs() < 1e-13);
    }

    #[test]
    fn strided_components_are_independent() {
        let basis = Basis::new(1, 1).unwrap();
        let ops = TransferOps::new(&basis);
        let mut mesh = ForestMesh::build_cartesian_root(&[1.0], &[1], 1).unwrap();
        let u = vec![1.0, 10.0, 3.0, 30.0];
        let d = mesh.refine(0, &[0]).unwrap();
        let v = transfer_field(&ops, &d, &u, 2, 2).unwrap();
        for i in 0..4 {
            assert!((v[2 * i + 1] - 10.0 * v[2 * i]).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_transfer_rules() {
        let mut mesh = ForestMesh::build_cartesian_root(&[2.0], &[2], 1).unwrap();
        let d = mesh.refine(0, &[1]).unwrap();
        let eta = transfer_element_scalar(&d, &[0.5, 2.0], 3).unwrap();
        assert_eq!(eta, vec![0.5, 2.0, 2.0]);
        let d = mesh.coarsen(mesh.generation(), &[1, 2]).unwrap();
        let eta = transfer_element_scalar(&d, &[0.5, 1.0, 3.0], 2).unwrap();
        assert_eq!(eta, vec![0.5, 3.0]);
    }

    #[test]
    fn bad_layout_rejected() {
        let basis = Basis::new(1, 1).unwrap();
        let ops = TransferOps::new(&basis);
        let d = RefinementDelta::default();
        assert!(transfer_field(&ops, &d, &[1.0, 2.0, 3.0], 1, 1).is_err());
    }
}

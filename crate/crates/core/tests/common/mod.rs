//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cardiolts::basis::GaussLegendre;
use cardiolts::{assemble_operators, Basis, DiffusionTensor, ElementOps, ForestMesh};
use rand::Rng;

/// Interior interface found by brute-force geometry.
#[derive(Clone, Debug)]
pub struct GeoFace {
    /// Element on the low side of `axis`.
    pub lo: usize,
    pub hi: usize,
    pub axis: usize,
    pub at: f64,
    /// Tangential extent of the shared segment (unused in 1D).
    pub span: [f64; 2],
    /// Smaller normal extent of the two sides.
    pub h: f64,
}

pub fn geometric_faces(mesh: &ForestMesh) -> Vec<GeoFace> {
    let dim = mesh.dim();
    let n = mesh.n_active();
    let mut out = Vec::new();
    for a in 0..n {
        let (la, sa) = mesh.element_bounds(a);
        for b in 0..n {
            if a == b {
                continue;
            }
            let (lb, sb) = mesh.element_bounds(b);
            for axis in 0..dim {
                let top = la[axis] + sa[axis];
                if (top - lb[axis]).abs() > 1e-9 * sa[axis] {
                    continue;
                }
                let span = if dim == 2 {
                    let t = 1 - axis;
                    let lo = la[t].max(lb[t]);
                    let hi = (la[t] + sa[t]).min(lb[t] + sb[t]);
                    if hi - lo < 1e-9 * sa[t].min(sb[t]) {
                        continue;
                    }
                    [lo, hi]
                } else {
                    [0.0, 0.0]
                };
                out.push(GeoFace {
                    lo: a,
                    hi: b,
                    axis,
                    at: top,
                    span,
                    h: sa[axis].min(sb[axis]),
                });
            }
        }
    }
    out
}

pub fn to_ref(mesh: &ForestMesh, e: usize, x: [f64; 2]) -> [f64; 2] {
    let (lo, size) = mesh.element_bounds(e);
    let mut xi = [0.0; 2];
    for a in 0..mesh.dim() {
        xi[a] = 2.0 * (x[a] - lo[a]) / size[a] - 1.0;
    }
    xi
}

fn phys_grad(mesh: &ForestMesh, basis: &Basis, e: usize, i: usize, xi: [f64; 2]) -> [f64; 2] {
    let (_, size) = mesh.element_bounds(e);
    let g = basis.gradient(i, xi);
    let mut out = [0.0; 2];
    for a in 0..mesh.dim() {
        out[a] = 2.0 * g[a] / size[a];
    }
    out
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Dense global SIPG stiffness `K = −a(·,·)` with natural boundary
/// conditions, assembled from physical-space quadrature over
/// geometrically detected faces. Row-major, element-major unknowns.
pub fn monolithic_stiffness(mesh: &ForestMesh, basis: &Basis, d: &DiffusionTensor, gamma: f64) -> Vec<Vec<f64>> {
    let dim = mesh.dim();
    let nn = basis.n_nodes();
    let n = mesh.n_active() * nn;
    let mut k = vec![vec![0.0; n]; n];
    let rule = GaussLegendre::new(basis.order() + 3);
    let q1 = rule.len();
    // volume
    for e in 0..mesh.n_active() {
        let (lo, size) = mesh.element_bounds(e);
        let jac: f64 = (0..dim).map(|a| 0.5 * size[a]).product();
        let nq = if dim == 1 { q1 } else { q1 * q1 };
        for q in 0..nq {
            let (xi, w) = if dim == 1 {
                ([rule.points[q], 0.0], rule.weights[q])
            } else {
                let (i, j) = (q % q1, q / q1);
                ([rule.points[i], rule.points[j]], rule.weights[i] * rule.weights[j])
            };
            let _ = lo;
            let grads: Vec<[f64; 2]> = (0..nn).map(|i| phys_grad(mesh, basis, e, i, xi)).collect();
            for i in 0..nn {
                for j in 0..nn {
                    k[e * nn + i][e * nn + j] -= w * jac * dot(d.apply(grads[j]), grads[i]);
                }
            }
        }
    }
    // faces: jump [u] = u_lo − u_hi, normal +axis from lo
    for f in geometric_faces(mesh) {
        let mut normal = [0.0; 2];
        normal[f.axis] = 1.0;
        let dn = d.apply(normal);
        let sigma = gamma * dot(dn, normal) / f.h;
        let pts: Vec<([f64; 2], f64)> = if dim == 1 {
            vec![([f.at, 0.0], 1.0)]
        } else {
            let half = 0.5 * (f.span[1] - f.span[0]);
            let mid = 0.5 * (f.span[1] + f.span[0]);
            rule.points
                .iter()
                .zip(&rule.weights)
                .map(|(&s, &w)| {
                    let mut x = [0.0; 2];
                    x[f.axis] = f.at;
                    x[1 - f.axis] = mid + half * s;
                    (x, w * half)
                })
                .collect()
        };
        for (x, w) in pts {
            // (element, sign of its contribution to the jump)
            let sides = [(f.lo, 1.0), (f.hi, -1.0)];
            let mut val = Vec::new();
            let mut flux = Vec::new();
            for &(e, s) in &sides {
                let xi = to_ref(mesh, e, x);
                for i in 0..nn {
                    val.push((e * nn + i, s * basis.value(i, xi)));
                    flux.push((e * nn + i, 0.5 * dot(dn, phys_grad(mesh, basis, e, i, xi))));
                }
            }
            // a += −{D∇u·n}[v] − {D∇v·n}[u] + σ[u][v]
            for &(ri, jv) in &val {
                for &(cj, fu) in &flux {
                    k[ri][cj] += w * fu * jv;
                    k[cj][ri] += w * fu * jv;
                }
                for &(cj, ju) in &val {
                    k[ri][cj] -= w * sigma * ju * jv;
                }
            }
        }
    }
    k
}

pub fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// Nodal interpolant of `f`.
pub fn interpolate(mesh: &ForestMesh, basis: &Basis, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(mesh.n_active() * basis.n_nodes());
    for e in 0..mesh.n_active() {
        for q in 0..basis.n_nodes() {
            out.push(f(mesh.to_physical(e, basis.node_ref(q))));
        }
    }
    out
}

/// L2 distance between the DG field `u` and `f`, by dense quadrature.
pub fn l2_error(mesh: &ForestMesh, basis: &Basis, u: &[f64], f: impl Fn([f64; 2]) -> f64) -> f64 {
    let dim = mesh.dim();
    let nn = basis.n_nodes();
    let rule = GaussLegendre::new(basis.order() + 4);
    let q1 = rule.len();
    let mut acc = 0.0;
    for e in 0..mesh.n_active() {
        let (_, size) = mesh.element_bounds(e);
        let jac: f64 = (0..dim).map(|a| 0.5 * size[a]).product();
        let nq = if dim == 1 { q1 } else { q1 * q1 };
        for q in 0..nq {
            let (xi, w) = if dim == 1 {
                ([rule.points[q], 0.0], rule.weights[q])
            } else {
                let (i, j) = (q % q1, q / q1);
                ([rule.points[i], rule.points[j]], rule.weights[i] * rule.weights[j])
            };
            let v = basis.evaluate(&u[e * nn..(e + 1) * nn], xi);
            acc += w * jac * (v - f(mesh.to_physical(e, xi))).powi(2);
        }
    }
    acc.sqrt()
}

/// Mesh on `[0, 1]^dim` (or the given extent) with `rounds` of random
/// refinement.
pub fn random_mesh(rng: &mut impl Rng, dim: usize, roots: u32, rounds: usize, max_level: u8) -> ForestMesh {
    let extent = [1.0 + rng.gen::<f64>(), 0.5 + rng.gen::<f64>()];
    let counts = [roots, roots];
    let mut mesh = ForestMesh::build_cartesian_root(&extent[..dim], &counts[..dim], dim)
        .unwrap()
        .with_max_level(max_level)
        .unwrap();
    for _ in 0..rounds {
        let marked: Vec<usize> = (0..mesh.n_active()).filter(|_| rng.gen_bool(0.3)).collect();
        let g = mesh.generation();
        mesh.refine(g, &marked).unwrap();
    }
    mesh
}

/// Random symmetric positive definite tensor.
pub fn random_tensor(rng: &mut impl Rng, dim: usize) -> DiffusionTensor {
    if dim == 1 {
        return DiffusionTensor::new(1, &[rng.gen_range(0.01..1.0)]).unwrap();
    }
    let (l1, l2) = (rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0));
    let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (c, s) = (th.cos(), th.sin());
    let a = l1 * c * c + l2 * s * s;
    let b = (l1 - l2) * c * s;
    let dd = l1 * s * s + l2 * c * c;
    DiffusionTensor::new(2, &[a, b, b, dd]).unwrap()
}

/// Element index of each active key in a fresh sort, so tests can compare
/// meshes built along different paths.
pub fn sorted_keys(mesh: &ForestMesh) -> Vec<cardiolts::CellKey> {
    let mut k = mesh.active_keys().to_vec();
    k.sort();
    k
}

pub fn rk4(ops: &ElementOps, u: &mut [f64], dt: f64, steps: usize) {
    let n = u.len();
    let mut tmp = vec![0.0; n];
    for _ in 0..steps {
        let k1 = ops.apply_operator(u);
        for i in 0..n {
            tmp[i] = u[i] + 0.5 * dt * k1[i];
        }
        let k2 = ops.apply_operator(&tmp);
        for i in 0..n {
            tmp[i] = u[i] + 0.5 * dt * k2[i];
        }
        let k3 = ops.apply_operator(&tmp);
        for i in 0..n {
            tmp[i] = u[i] + dt * k3[i];
        }
        let k4 = ops.apply_operator(&tmp);
        for i in 0..n {
            u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// L2 errors of `e^{−λt} cos(πx/Lx) [cos(πy/Ly)]` on meshes with
/// `roots · 2^k` elements per side.
pub fn manufactured_errors(dim: usize, p: usize, roots: u32, levels: std::ops::RangeInclusive<u8>) -> Vec<f64> {
    let (lx, ly) = (1.0, 1.0);
    let d = [0.1334, 0.0176];
    let kx = std::f64::consts::PI / lx;
    let ky = if dim == 2 { std::f64::consts::PI / ly } else { 0.0 };
    let lambda = d[0] * kx * kx + d[1] * ky * ky;
    let t_end = 0.3 / lambda;
    let exact = |x: [f64; 2], t: f64| (-lambda * t).exp() * (kx * x[0]).cos() * (ky * x[1]).cos();
    let tensor = DiffusionTensor::new(dim, &d[..dim]).unwrap();
    let basis = Basis::new(p, dim).unwrap();
    levels
        .map(|level| {
            let c = roots << level;
            let mesh = ForestMesh::build_cartesian_root(&[lx, ly][..dim], &[c, c][..dim], dim).unwrap();
            let ops = assemble_operators(&mesh, &basis, &tensor, cardiolts::sipg::default_gamma(p)).unwrap();
            let cfl = (0..ops.n_elements()).map(|e| cardiolts::slts::cfl_estimate(&ops, e)).fold(f64::INFINITY, f64::min);
            let steps = (t_end / cfl).ceil() as usize;
            let mut u = interpolate(&mesh, &basis, |x| exact(x, 0.0));
            rk4(&ops, &mut u, t_end / steps as f64, steps);
            l2_error(&mesh, &basis, &u, |x| exact(x, t_end))
        })
        .collect()
}

pub fn orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

pub fn sup(u: &[f64]) -> f64 {
    u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Forward Euler on `du/dt = M⁻¹K u`; returns the step count at which the
/// sup norm exceeded `limit` times its start value (or the mass-weighted
/// energy grew, when `monotone`), if any.
pub fn blowup_step(ops: &ElementOps, u0: &[f64], dt: f64, steps: usize, limit: f64, monotone: bool) -> Option<usize> {
    let mut u = u0.to_vec();
    let s0 = sup(u0);
    let mut energy = ops.mass_inner(&u, &u);
    for k in 1..=steps {
        let r = ops.apply_operator(&u);
        for (x, y) in u.iter_mut().zip(r) {
            *x += dt * y;
        }
        let s = sup(&u);
        let e = ops.mass_inner(&u, &u);
        if !s.is_finite() || s > limit * s0 || (monotone && e > energy * (1.0 + 1e-12)) {
            return Some(k);
        }
        energy = e;
    }
    None
}

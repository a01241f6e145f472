//! Post-processing on regular sampling grids: level sets, spiral tips and
//! curve distances.

use serde::Serialize;

use crate::basis::Basis;
use crate::error::{Error, Result};
use crate::mesh::ForestMesh;

/// Cell-centered samples on `[origin, origin + n·dx]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub origin: [f64; 2],
    pub dx: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.dx,
            self.origin[1] + (j as f64 + 0.5) * self.dx,
        ]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }
}

/// Samples component `component` of a nodal field with `stride` values per
/// node on a grid of spacing `dx` covering the mesh.
pub fn rasterize(mesh: &ForestMesh, basis: &Basis, values: &[f64], stride: usize, component: usize, dx: f64) -> Result<Grid> {
    if mesh.dim() != 2 {
        return Err(Error::InvalidArgument("rasterization needs a 2D mesh".into()));
    }
    if !(dx > 0.0) {
        return Err(Error::InvalidArgument(format!("grid spacing must be positive, got {dx}")));
    }
    let n = basis.n_nodes();
    if values.len() != mesh.n_active() * n * stride || component >= stride {
        return Err(Error::Layout("field does not match the mesh".into()));
    }
    let origin = mesh.origin();
    let ext = mesh.extent();
    let nx = (ext[0] / dx).round() as usize;
    let ny = (ext[1] / dx).round() as usize;
    let mut out = vec![f64::NAN; nx * ny];
    let mut local = vec![0.0; n];
    for e in 0..mesh.n_active() {
        let (lo, size) = mesh.element_bounds(e);
        for (q, l) in local.iter_mut().enumerate() {
            *l = values[(e * n + q) * stride + component];
        }
        let range = |a: usize, count: usize| {
            let start = ((lo[a] - origin[a]) / dx - 0.5).ceil().max(0.0) as usize;
            let end = (((lo[a] + size[a] - origin[a]) / dx - 0.5).ceil().max(0.0) as usize).min(count);
            start..end
        };
        for j in range(1, ny) {
            for i in range(0, nx) {
                let p = [origin[0] + (i as f64 + 0.5) * dx, origin[1] + (j as f64 + 0.5) * dx];
                let xi = [2.0 * (p[0] - lo[0]) / size[0] - 1.0, 2.0 * (p[1] - lo[1]) / size[1] - 1.0];
                out[j * nx + i] = basis.evaluate(&local, xi);
            }
        }
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::Geometry("grid point not covered by any element".into()));
    }
    Ok(Grid {
        origin,
        dx,
        nx,
        ny,
        values: out,
    })
}

/// Triangles of grid cell `(i, j)` as corner index pairs.
fn cell_triangles(i: usize, j: usize) -> [[(usize, usize); 3]; 2] {
    [
        [(i, j), (i + 1, j), (i + 1, j + 1)],
        [(i, j), (i + 1, j + 1), (i, j + 1)],
    ]
}

/// Points where the piecewise-linear interpolant of `grid` crosses `level`,
/// one per crossed triangle edge.
pub fn level_set_points(grid: &Grid, level: f64) -> Vec<[f64; 2]> {
    let mut pts = Vec::new();
    if grid.nx < 2 || grid.ny < 2 {
        return pts;
    }
    // horizontal, vertical and diagonal edges each visited once
    let mut edge = |a: (usize, usize), b: (usize, usize)| {
        let (fa, fb) = (grid.at(a.0, a.1) - level, grid.at(b.0, b.1) - level);
        if (fa <= 0.0) != (fb <= 0.0) {
            let s = fa / (fa - fb);
            let (pa, pb) = (grid.point(a.0, a.1), grid.point(b.0, b.1));
            pts.push([pa[0] + s * (pb[0] - pa[0]), pa[1] + s * (pb[1] - pa[1])]);
        }
    };
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            if i + 1 < grid.nx {
                edge((i, j), (i + 1, j));
            }
            if j + 1 < grid.ny {
                edge((i, j), (i, j + 1));
            }
            if i + 1 < grid.nx && j + 1 < grid.ny {
                edge((i, j), (i + 1, j + 1));
            }
        }
    }
    pts
}

/// Intersections of `f = fl` and `g = gl` for two fields on the same grid,
/// using linear interpolation on each grid triangle.
pub fn level_set_intersections(f: &Grid, fl: f64, g: &Grid, gl: f64) -> Result<Vec<[f64; 2]>> {
    if f.nx != g.nx || f.ny != g.ny || f.dx != g.dx || f.origin != g.origin {
        return Err(Error::Layout("grids differ".into()));
    }
    let mut out = Vec::new();
    for j in 0..f.ny.saturating_sub(1) {
        for i in 0..f.nx.saturating_sub(1) {
            for tri in cell_triangles(i, j) {
                let p: Vec<[f64; 2]> = tri.iter().map(|&(a, b)| f.point(a, b)).collect();
                let fv: Vec<f64> = tri.iter().map(|&(a, b)| f.at(a, b) - fl).collect();
                let gv: Vec<f64> = tri.iter().map(|&(a, b)| g.at(a, b) - gl).collect();
                // barycentric solve: value = v0 + (v1-v0) s + (v2-v0) t
                let (a11, a12, b1) = (fv[1] - fv[0], fv[2] - fv[0], -fv[0]);
                let (a21, a22, b2) = (gv[1] - gv[0], gv[2] - gv[0], -gv[0]);
                let det = a11 * a22 - a12 * a21;
                if det.abs() < 1e-300 {
                    continue;
                }
                let s = (b1 * a22 - a12 * b2) / det;
                let t = (a11 * b2 - b1 * a21) / det;
                if s >= 0.0 && t >= 0.0 && s + t <= 1.0 {
                    out.push([
                        p[0][0] + s * (p[1][0] - p[0][0]) + t * (p[2][0] - p[0][0]),
                        p[0][1] + s * (p[1][1] - p[0][1]) + t * (p[2][1] - p[0][1]),
                    ]);
                }
            }
        }
    }
    Ok(out)
}

/// Symmetric Hausdorff distance between two point sets.
pub fn hausdorff(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("Hausdorff distance of an empty set".into()));
    }
    let directed = |x: &[[f64; 2]], y: &[[f64; 2]]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0f64, f64::max)
            .sqrt()
    };
    Ok(directed(a, b).max(directed(b, a)))
}

/// Tip position over time.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TipTrack {
    pub times: Vec<f64>,
    pub tips: Vec<[f64; 2]>,
}

impl TipTrack {
    /// Adds the candidate closest to the previous tip (first candidate
    /// otherwise). Frames without candidates are skipped.
    pub fn push(&mut self, t: f64, candidates: &[[f64; 2]]) {
        let chosen = match self.tips.last() {
            Some(prev) => candidates.iter().copied().min_by(|a, b| {
                let da = (a[0] - prev[0]).powi(2) + (a[1] - prev[1]).powi(2);
                let db = (b[0] - prev[0]).powi(2) + (b[1] - prev[1]).powi(2);
                da.total_cmp(&db)
            }),
            None => candidates.first().copied(),
        };
        if let Some(p) = chosen {
            self.times.push(t);
            self.tips.push(p);
        }
    }

    /// Unwrapped angle swept by the tip around the centroid of its path.
    pub fn turning_angle(&self) -> f64 {
        if self.tips.len() < 2 {
            return 0.0;
        }
        let n = self.tips.len() as f64;
        let c = [
            self.tips.iter().map(|p| p[0]).sum::<f64>() / n,
            self.tips.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let mut total = 0.0;
        let mut prev = (self.tips[0][1] - c[1]).atan2(self.tips[0][0] - c[0]);
        for p in &self.tips[1..] {
            let a = (p[1] - c[1]).atan2(p[0] - c[0]);
            let mut d = a - prev;
            while d > std::f64::consts::PI {
                d -= 2.0 * std::f64::consts::PI;
            }
            while d < -std::f64::consts::PI {
                d += 2.0 * std::f64::consts::PI;
            }
            total += d;
            prev = a;
        }
        total.abs()
    }

    /// Largest fraction of samples whose coordinate lies in one window of
    /// width `spacing`, over both axes.
    pub fn axis_lock_fraction(&self, spacing: f64) -> f64 {
        if self.tips.is_empty() {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for a in 0..2 {
            let mut v: Vec<f64> = self.tips.iter().map(|p| p[a]).collect();
            v.sort_by(f64::total_cmp);
            let mut j = 0;
            for i in 0..v.len() {
                while v[i] - v[j] > spacing {
                    j += 1;
                }
                worst = worst.max((i - j + 1) as f64 / v.len() as f64);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize, ny: usize, dx: f64, f: impl Fn([f64; 2]) -> f64) -> Grid {
        let mut g = Grid {
            origin: [0.0, 0.0],
            dx,
            nx,
            ny,
            values: vec![0.0; nx * ny],
        };
        for j in 0..ny {
            for i in 0..nx {
                g.values[j * nx + i] = f(g.point(i, j));
            }
        }
        g
    }

    #[test]
    fn rasterize_reproduces_linear_field() {
        let mut mesh = ForestMesh::build_cartesian_root(&[2.0, 2.0], &[2, 2], 2).unwrap();
        mesh.refine(0, &[1]).unwrap();
        let basis = Basis::new(1, 2).unwrap();
        let mut u = Vec::new();
        for e in 0..mesh.n_active() {
            for q in 0..4 {
                let x = mesh.to_physical(e, basis.node_ref(q));
                u.push(x[0] - 2.0 * x[1]);
                u.push(7.0);
            }
        }
        let g = rasterize(&mesh, &basis, &u, 2, 0, 0.1).unwrap();
        assert_eq!((g.nx, g.ny), (20, 20));
        for j in 0..g.ny {
            for i in 0..g.nx {
                let p = g.point(i, j);
                assert!((g.at(i, j) - (p[0] - 2.0 * p[1])).abs() < 1e-12);
            }
        }
        let h = rasterize(&mesh, &basis, &u, 2, 1, 0.1).unwrap();
        assert!(h.values.iter().all(|v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn level_set_of_plane_is_a_line() {
        let g = grid(40, 40, 0.25, |p| p[0] - 3.3);
        let pts = level_set_points(&g, 0.0);
        assert!(!pts.is_empty());
        assert!(pts.iter().all(|p| (p[0] - 3.3).abs() < 1e-12));
    }

    #[test]
    fn intersection_of_two_lines() {
        let f = grid(40, 40, 0.25, |p| p[0] - 4.1);
        let g = grid(40, 40, 0.25, |p| p[1] - 6.7);
        let pts = level_set_intersections(&f, 0.0, &g, 0.0).unwrap();
        assert!(!pts.is_empty());
        for p in pts {
            assert!((p[0] - 4.1).abs() < 1e-12 && (p[1] - 6.7).abs() < 1e-12);
        }
    }

    #[test]
    fn hausdorff_of_shifted_sets() {
        let a: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 0.0]).collect();
        let b: Vec<[f64; 2]> = a.iter().map(|p| [p[0], 0.5]).collect();
        assert!((hausdorff(&a, &b).unwrap() - 0.5).abs() < 1e-14);
        assert!((hausdorff(&a, &a[..5]).unwrap() - 5.0).abs() < 1e-14);
        assert!(hausdorff(&a, &[]).is_err());
    }

    #[test]
    fn circling_tip_turns_and_is_not_locked() {
        let mut track = TipTrack::default();
        let step = 2.0 * std::f64::consts::PI / 50.0;
        for k in 0..150 {
            let a = k as f64 * step;
            track.push(k as f64, &[[5.0 + 2.0 * a.cos(), 5.0 + 2.0 * a.sin()]]);
        }
        assert!((track.turning_angle() - 149.0 * step).abs() < 1e-9);
        assert!(track.axis_lock_fraction(0.25) < 0.25);
        let mut line = TipTrack::default();
        for k in 0..50 {
            line.push(k as f64, &[[3.0, k as f64 * 0.1]]);
        }
        assert!(line.axis_lock_fraction(0.25) > 0.99);
        assert!(line.turning_angle() <= std::f64::consts::PI + 1e-12);
    }
}

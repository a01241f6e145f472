//! Gauss–Legendre quadrature and the nodal Lagrange basis built on it.
//!
//! Nodes are the roots of the Legendre polynomial of degree `p + 1`, so they
//! sit strictly inside the reference interval `[-1, 1]`. Using the same points
//! for quadrature makes the element mass matrix diagonal.

use crate::error::{Error, Result};

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one point");
        let mut points = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for k in 0..(n + 1) / 2 {
            // Chebyshev-like initial guess, then Newton on P_n.
            let mut x = -(std::f64::consts::PI * (k as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            points[k] = x;
            weights[k] = w;
            points[n - 1 - k] = -x;
            weights[n - 1 - k] = w;
        }
        if n % 2 == 1 {
            points[n / 2] = 0.0;
        }
        Self { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// One-dimensional Lagrange basis on a set of distinct nodes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lagrange1d {
    nodes: Vec<f64>,
}

impl Lagrange1d {
    pub fn new(nodes: Vec<f64>) -> Self {
        Self { nodes }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, k: usize, x: f64) -> f64 {
        let xk = self.nodes[k];
        self.nodes
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != k)
            .map(|(_, &xm)| (x - xm) / (xk - xm))
            .product()
    }

    pub fn derivative(&self, k: usize, x: f64) -> f64 {
        let xk = self.nodes[k];
        let n = self.nodes.len();
        let mut sum = 0.0;
        for skip in 0..n {
            if skip == k {
                continue;
            }
            let mut term = 1.0 / (xk - self.nodes[skip]);
            for m in 0..n {
                if m != k && m != skip {
                    term *= (x - self.nodes[m]) / (xk - self.nodes[m]);
                }
            }
            sum += term;
        }
        sum
    }
}

/// Tensor-product nodal basis of order `p` on the reference box `[-1, 1]^dim`.
///
/// Node `i + (p + 1) * j` sits at `(xi_i, xi_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    order: usize,
    dim: usize,
    rule: GaussLegendre,
    lagrange: Lagrange1d,
}

impl Basis {
    pub fn new(order: usize, dim: usize) -> Result<Self> {
        if order == 0 || order > 3 {
            return Err(Error::InvalidArgument(format!(
                "basis order must be in 1..=3, got {order}"
            )));
        }
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidArgument(format!("dimension must be 1 or 2, got {dim}")));
        }
        let rule = GaussLegendre::new(order + 1);
        let lagrange = Lagrange1d::new(rule.points.clone());
        Ok(Self {
            order,
            dim,
            rule,
            lagrange,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Nodes per axis.
    pub fn n1(&self) -> usize {
        self.order + 1
    }

    pub fn n_nodes(&self) -> usize {
        self.n1().pow(self.dim as u32)
    }

    pub fn rule(&self) -> &GaussLegendre {
        &self.rule
    }

    pub fn lagrange(&self) -> &Lagrange1d {
        &self.lagrange
    }

    /// Per-axis node indices of tensor node `n`.
    #[inline]
    pub fn split(&self, n: usize) -> [usize; 2] {
        let n1 = self.n1();
        if self.dim == 1 {
            [n, 0]
        } else {
            [n % n1, n / n1]
        }
    }

    /// Reference coordinates of tensor node `n`.
    pub fn node_ref(&self, n: usize) -> [f64; 2] {
        let [i, j] = self.split(n);
        let x = self.rule.points[i];
        if self.dim == 1 {
            [x, 0.0]
        } else {
            [x, self.rule.points[j]]
        }
    }

    /// Reference quadrature weight attached to tensor node `n`.
    pub fn node_weight(&self, n: usize) -> f64 {
        let [i, j] = self.split(n);
        if self.dim == 1 {
            self.rule.weights[i]
        } else {
            self.rule.weights[i] * self.rule.weights[j]
        }
    }

    /// Value of tensor basis function `n` at reference point `xi`.
    pub fn value(&self, n: usize, xi: [f64; 2]) -> f64 {
        let [i, j] = self.split(n);
        let vx = self.lagrange.value(i, xi[0]);
        if self.dim == 1 {
            vx
        } else {
            vx * self.lagrange.value(j, xi[1])
        }
    }

    /// Reference gradient of tensor basis function `n` at `xi`.
    pub fn gradient(&self, n: usize, xi: [f64; 2]) -> [f64; 2] {
        let [i, j] = self.split(n);
        if self.dim == 1 {
            [self.lagrange.derivative(i, xi[0]), 0.0]
        } else {
            let (vx, vy) = (self.lagrange.value(i, xi[0]), self.lagrange.value(j, xi[1]));
            [
                self.lagrange.derivative(i, xi[0]) * vy,
                vx * self.lagrange.derivative(j, xi[1]),
            ]
        }
    }

    /// Evaluates the polynomial with nodal `values` at `xi`.
    pub fn evaluate(&self, values: &[f64], xi: [f64; 2]) -> f64 {
        values
            .iter()
            .enumerate()
            .map(|(n, &v)| v * self.value(n, xi))
            .sum()
    }

    /// Matrix `P[i][j] = N_j(parent)` at child node `i` for the child in
    /// position `child` (bit `a` set = upper half along axis `a`).
    pub fn child_interpolation(&self, child: usize) -> Vec<f64> {
        let n = self.n_nodes();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let xc = self.node_ref(i);
            let mut xp = [0.0; 2];
            for a in 0..self.dim {
                let shift = if child >> a & 1 == 1 { 1.0 } else { -1.0 };
                xp[a] = 0.5 * (xc[a] + shift);
            }
            for j in 0..n {
                out[i * n + j] = self.value(j, xp);
            }
        }
        out
    }
}

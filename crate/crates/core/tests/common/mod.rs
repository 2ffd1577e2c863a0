//! Dense brute-force reference implementations used as test oracles.
//!
//! Nothing here calls into the library's transfer or spectral code: basis
//! functions come from the truncated-power form of the cubic B-spline, and
//! mesh operators are explicit matrices assembled from cosine sums.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub type V2 = [f64; 2];
pub type M2 = [[f64; 2]; 2];

/// Cubic B-spline via truncated powers, `(1/6) sum_k (-1)^k C(4,k) (x+2-k)_+^3`.
pub fn bspline(x: f64) -> f64 {
    if x.abs() >= 2.0 {
        return 0.0;
    }
    const C: [f64; 5] = [1.0, -4.0, 6.0, -4.0, 1.0];
    C.iter()
        .enumerate()
        .map(|(k, c)| c * (x + 2.0 - k as f64).max(0.0).powi(3))
        .sum::<f64>()
        / 6.0
}

pub fn bspline_d(x: f64) -> f64 {
    if x.abs() >= 2.0 {
        return 0.0;
    }
    const C: [f64; 5] = [1.0, -4.0, 6.0, -4.0, 1.0];
    C.iter()
        .enumerate()
        .map(|(k, c)| c * (x + 2.0 - k as f64).max(0.0).powi(2))
        .sum::<f64>()
        / 2.0
}

/// Dense description of a periodic `n x n` mesh on an `l x l` square.
pub struct DenseMesh {
    pub n: usize,
    pub l: f64,
}

impl DenseMesh {
    pub fn h(&self) -> f64 {
        self.l / self.n as f64
    }

    pub fn area(&self) -> f64 {
        self.h() * self.h()
    }

    pub fn nodes(&self) -> usize {
        self.n * self.n
    }

    /// Node index with `i` (x) fastest.
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i + self.n * j
    }

    /// Minimal-image offset of `x` from node `i`, in grid units.
    fn offset(&self, x: f64, i: usize) -> f64 {
        let n = self.n as f64;
        let r = x / self.h() - i as f64;
        r - n * (r / n).round()
    }

    /// `(psi, d psi/dx, d psi/dy)` matrices of shape `nodes x particles`.
    pub fn basis(&self, q: &[V2]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let h = self.h();
        let mut psi = DMatrix::zeros(self.nodes(), q.len());
        let mut dx = DMatrix::zeros(self.nodes(), q.len());
        let mut dy = DMatrix::zeros(self.nodes(), q.len());
        for (b, p) in q.iter().enumerate() {
            for j in 0..self.n {
                for i in 0..self.n {
                    let rx = self.offset(p[0], i);
                    let ry = self.offset(p[1], j);
                    let k = self.idx(i, j);
                    psi[(k, b)] = bspline(rx) * bspline(ry);
                    dx[(k, b)] = bspline_d(rx) * bspline(ry) / h;
                    dy[(k, b)] = bspline(rx) * bspline_d(ry) / h;
                }
            }
        }
        (psi, dx, dy)
    }

    /// Matrix of the periodic Fourier multiplier `f(|k|^2)` acting on nodal
    /// values, assembled as an explicit cosine sum over all modes.
    pub fn operator(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.n;
        let h = self.h();
        let waves: Vec<f64> = (0..n)
            .map(|m| {
                let s = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
                2.0 * PI * s / self.l
            })
            .collect();
        // Depends only on the node offset, so tabulate it once.
        let mut table = vec![0.0; n * n];
        for dj in 0..n {
            for di in 0..n {
                let mut s = 0.0;
                for &ky in &waves {
                    for &kx in &waves {
                        s += f(kx * kx + ky * ky) * (kx * di as f64 * h + ky * dj as f64 * h).cos();
                    }
                }
                table[di + n * dj] = s / (n * n) as f64;
            }
        }
        DMatrix::from_fn(self.nodes(), self.nodes(), |a, b| {
            let (ai, aj) = (a % n, a / n);
            let (bi, bj) = (b % n, b / n);
            table[(ai + n - bi) % n + n * ((aj + n - bj) % n)]
        })
    }

    /// `(1 + alpha^2 |k|^2)^power`.
    pub fn metric(&self, alpha: f64, power: i32) -> DMatrix<f64> {
        self.operator(|k2| (1.0 + alpha * alpha * k2).powi(power))
    }
}

/// Column of x components and column of y components.
pub fn split(v: &[V2]) -> (DVector<f64>, DVector<f64>) {
    (
        DVector::from_iterator(v.len(), v.iter().map(|p| p[0])),
        DVector::from_iterator(v.len(), v.iter().map(|p| p[1])),
    )
}

/// Dense particle-mesh geodesic integrator with plain fixed-point iteration.
pub struct DenseFlow {
    pub mesh: DenseMesh,
    pub a: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

pub struct DenseState {
    pub q: Vec<V2>,
    pub p: Vec<V2>,
    pub j: Vec<M2>,
}

impl DenseFlow {
    pub fn new(mesh: DenseMesh, alpha: f64, power: i32) -> Self {
        let a = mesh.metric(alpha, power);
        let g = a.clone().lu().try_inverse().expect("metric is invertible");
        Self { mesh, a, g }
    }

    /// Nodal velocity components from momenta at positions.
    pub fn velocity(&self, q: &[V2], p: &[V2]) -> (DVector<f64>, DVector<f64>) {
        let (psi, _, _) = self.mesh.basis(q);
        let (px, py) = split(p);
        let s = 1.0 / self.mesh.area();
        (&self.g * (&psi * px) * s, &self.g * (&psi * py) * s)
    }

    pub fn hamiltonian(&self, u: &(DVector<f64>, DVector<f64>)) -> f64 {
        0.5 * self.mesh.area() * (u.0.dot(&(&self.a * &u.0)) + u.1.dot(&(&self.a * &u.1)))
    }

    /// Velocity values and gradients `D[i][j] = d u_i / d x_j` at `q`.
    fn sample(&self, u: &(DVector<f64>, DVector<f64>), q: &[V2]) -> (Vec<V2>, Vec<M2>) {
        let (psi, dx, dy) = self.mesh.basis(q);
        let ux = psi.transpose() * &u.0;
        let uy = psi.transpose() * &u.1;
        let uxx = dx.transpose() * &u.0;
        let uxy = dy.transpose() * &u.0;
        let uyx = dx.transpose() * &u.1;
        let uyy = dy.transpose() * &u.1;
        let vals = (0..q.len()).map(|b| [ux[b], uy[b]]).collect();
        let grads = (0..q.len()).map(|b| [[uxx[b], uxy[b]], [uyx[b], uyy[b]]]).collect();
        (vals, grads)
    }

    /// One symplectic Euler step, returning the new state and `H^{n+1}`.
    pub fn step(&self, s: &DenseState, dt: f64) -> (DenseState, f64) {
        let scale = s.p.iter().map(|v| v[0].abs().max(v[1].abs())).fold(0.0, f64::max);
        let mut p = s.p.clone();
        for _ in 0..10_000 {
            let u = self.velocity(&s.q, &p);
            let (_, d) = self.sample(&u, &s.q);
            let next: Vec<V2> = (0..p.len())
                .map(|b| {
                    let m = d[b];
                    [
                        s.p[b][0] - dt * (m[0][0] * p[b][0] + m[1][0] * p[b][1]),
                        s.p[b][1] - dt * (m[0][1] * p[b][0] + m[1][1] * p[b][1]),
                    ]
                })
                .collect();
            let change = next
                .iter()
                .zip(&p)
                .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
                .fold(0.0, f64::max);
            p = next;
            if change <= 1e-16 * scale {
                break;
            }
        }
        let u = self.velocity(&s.q, &p);
        let (v, d) = self.sample(&u, &s.q);
        let q: Vec<V2> = (0..p.len()).map(|b| [s.q[b][0] + dt * v[b][0], s.q[b][1] + dt * v[b][1]]).collect();
        let j = (0..p.len())
            .map(|b| {
                let (m, jb) = (d[b], s.j[b]);
                let mut out = jb;
                for r in 0..2 {
                    for c in 0..2 {
                        out[r][c] += dt * (m[r][0] * jb[0][c] + m[r][1] * jb[1][c]);
                    }
                }
                out
            })
            .collect();
        (DenseState { q, p, j }, self.hamiltonian(&u))
    }

    pub fn integrate(&self, q0: &[V2], p0: &[V2], steps: usize) -> (Vec<DenseState>, Vec<f64>) {
        let dt = 1.0 / steps as f64;
        let mut states = vec![DenseState {
            q: q0.to_vec(),
            p: p0.to_vec(),
            j: vec![[[1.0, 0.0], [0.0, 1.0]]; q0.len()],
        }];
        let mut hs = vec![self.hamiltonian(&self.velocity(q0, p0))];
        for _ in 0..steps {
            let (next, h) = self.step(states.last().unwrap(), dt);
            states.push(next);
            hs.push(h);
        }
        (states, hs)
    }
}

/// Backward edge vectors of a closed polygon.
pub fn edges(q: &[V2]) -> Vec<V2> {
    let n = q.len();
    (0..n)
        .map(|b| {
            let prev = q[(b + n - 1) % n];
            [q[b][0] - prev[0], q[b][1] - prev[1]]
        })
        .collect()
}

/// Dense current mismatch `dx dy d^T K d` with an explicit kernel matrix.
pub fn dense_mismatch(mesh: &DenseMesh, kernel: &DMatrix<f64>, a: &[V2], b: &[V2]) -> f64 {
    let current = |q: &[V2]| {
        let (psi, _, _) = mesh.basis(q);
        let (ex, ey) = split(&edges(q));
        (&psi * ex, &psi * ey)
    };
    let (ax, ay) = current(a);
    let (bx, by) = current(b);
    let dx = ax - bx;
    let dy = ay - by;
    mesh.area() * (dx.dot(&(kernel * &dx)) + dy.dot(&(kernel * &dy)))
}

/// A smooth star-shaped closed curve with random Fourier wiggles.
pub fn random_curve(rng: &mut impl Rng, n: usize, center: V2, radius: f64) -> Vec<V2> {
    let a1 = rng.random_range(-0.15..0.15);
    let a2 = rng.random_range(-0.1..0.1);
    let ph1 = rng.random_range(0.0..2.0 * PI);
    let ph2 = rng.random_range(0.0..2.0 * PI);
    (0..n)
        .map(|b| {
            let t = 2.0 * PI * b as f64 / n as f64;
            let r = radius * (1.0 + a1 * (2.0 * t + ph1).cos() + a2 * (3.0 * t + ph2).sin());
            [center[0] + r * t.cos(), center[1] + r * t.sin()]
        })
        .collect()
}

//! Periodic mesh fields, cubic B-spline particle/mesh transfer and spectral
//! `(1 - alpha^2 lap)^n` operators.
//!
//! Node `(i, j)` of an `nx x ny` mesh sits at `(i dx, j dy)`; all indices wrap
//! periodically. The basis function attached to a node is the tensor product
//! of cardinal cubic B-splines measured in grid units, so every point touches
//! a 4x4 stencil of nodes.
//!
//! Mesh inner products are unweighted nodewise sums unless stated otherwise;
//! the Riemann weight `dx dy` is applied explicitly by the callers that
//! integrate (norms, the momentum map, the current functional).

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// A point or vector in the plane.
pub type Vec2 = [f64; 2];

/// A 2x2 matrix stored row-major, `m[i][j]`.
pub type Mat2 = [[f64; 2]; 2];

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("mesh needs at least 8 points per axis, got {nx}x{ny}")]
    TooFewPoints { nx: usize, ny: usize },
    #[error("domain lengths must be positive and finite, got {lx} x {ly}")]
    BadLength { lx: f64, ly: f64 },
    #[error("norm operator needs alpha > 0 and power >= 1, got alpha={alpha}, power={power}")]
    BadOperator { alpha: f64, power: u32 },
}

/// Shape and extent of the periodic mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshConfig {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
}

impl MeshConfig {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self, MeshError> {
        if nx < 8 || ny < 8 {
            return Err(MeshError::TooFewPoints { nx, ny });
        }
        if !(lx.is_finite() && ly.is_finite() && lx > 0.0 && ly > 0.0) {
            return Err(MeshError::BadLength { lx, ly });
        }
        Ok(Self { nx, ny, lx, ly })
    }

    /// Square `m x m` mesh on an `l x l` domain.
    pub fn square(m: usize, l: f64) -> Result<Self, MeshError> {
        Self::new(m, m, l, l)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }

    pub fn ly(&self) -> f64 {
        self.ly
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    /// Riemann-sum weight `dx dy`.
    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn num_nodes(&self) -> usize {
        self.nx * self.ny
    }

    /// Flat index of node `(i, j)`; `i` runs fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.nx * j
    }

    pub fn node_position(&self, i: usize, j: usize) -> Vec2 {
        [i as f64 * self.dx(), j as f64 * self.dy()]
    }

    /// Wraps a position into `[0, lx) x [0, ly)`.
    pub fn wrap(&self, p: Vec2) -> Vec2 {
        [p[0].rem_euclid(self.lx), p[1].rem_euclid(self.ly)]
    }

    /// B-spline stencil of the 4x4 nodes whose basis functions are nonzero at `p`.
    pub fn stencil(&self, p: Vec2) -> Stencil {
        let (ix, wx, dwx, ddwx) = axis_stencil(p[0], self.dx(), self.nx);
        let (iy, wy, dwy, ddwy) = axis_stencil(p[1], self.dy(), self.ny);
        Stencil {
            ix,
            iy,
            wx,
            wy,
            dwx,
            dwy,
            ddwx,
            ddwy,
        }
    }
}

/// Cardinal cubic B-spline, support `|r| < 2`.
pub fn bspline_weight(r: f64) -> f64 {
    let a = r.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let t = 2.0 - a;
        t * t * t / 6.0
    } else {
        0.0
    }
}

/// First derivative of [`bspline_weight`].
pub fn bspline_weight_deriv(r: f64) -> f64 {
    let a = r.abs();
    if a < 1.0 {
        -2.0 * r + 1.5 * r * a
    } else if a < 2.0 {
        let t = 2.0 - a;
        -0.5 * t * t * r.signum()
    } else {
        0.0
    }
}

/// Second derivative of [`bspline_weight`] (piecewise linear).
pub fn bspline_weight_deriv2(r: f64) -> f64 {
    let a = r.abs();
    if a < 1.0 {
        -2.0 + 3.0 * a
    } else if a < 2.0 {
        2.0 - a
    } else {
        0.0
    }
}

type AxisStencil = ([usize; 4], [f64; 4], [f64; 4], [f64; 4]);

fn axis_stencil(x: f64, h: f64, n: usize) -> AxisStencil {
    let g = x / h;
    let base = g.floor() as i64 - 1;
    let mut idx = [0usize; 4];
    let mut w = [0.0; 4];
    let mut dw = [0.0; 4];
    let mut ddw = [0.0; 4];
    for a in 0..4 {
        let node = base + a as i64;
        let r = g - node as f64;
        idx[a] = node.rem_euclid(n as i64) as usize;
        w[a] = bspline_weight(r);
        dw[a] = bspline_weight_deriv(r) / h;
        ddw[a] = bspline_weight_deriv2(r) / (h * h);
    }
    (idx, w, dw, ddw)
}

/// Per-axis weights of the 4x4 node block around one point. Derivatives are
/// in physical (not grid) units.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub ix: [usize; 4],
    pub iy: [usize; 4],
    pub wx: [f64; 4],
    pub wy: [f64; 4],
    pub dwx: [f64; 4],
    pub dwy: [f64; 4],
    pub ddwx: [f64; 4],
    pub ddwy: [f64; 4],
}

impl Stencil {
    /// `psi_k` at the point for stencil node `(a, b)`.
    #[inline]
    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.wx[a] * self.wy[b]
    }

    /// `grad psi_k` at the point for stencil node `(a, b)`.
    #[inline]
    pub fn grad(&self, a: usize, b: usize) -> Vec2 {
        [self.dwx[a] * self.wy[b], self.wx[a] * self.dwy[b]]
    }

    /// Hessian of `psi_k` at the point for stencil node `(a, b)`.
    #[inline]
    pub fn hessian(&self, a: usize, b: usize) -> Mat2 {
        let xy = self.dwx[a] * self.dwy[b];
        [
            [self.ddwx[a] * self.wy[b], xy],
            [xy, self.wx[a] * self.ddwy[b]],
        ]
    }
}

/// Vector field sampled on the nodes of a periodic mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshField {
    mesh: MeshConfig,
    data: Vec<Vec2>,
}

impl MeshField {
    pub fn zeros(mesh: &MeshConfig) -> Self {
        Self {
            mesh: *mesh,
            data: vec![[0.0; 2]; mesh.num_nodes()],
        }
    }

    /// Builds a field from a function of node indices.
    pub fn from_fn(mesh: &MeshConfig, mut f: impl FnMut(usize, usize) -> Vec2) -> Self {
        let mut data = Vec::with_capacity(mesh.num_nodes());
        for j in 0..mesh.ny {
            for i in 0..mesh.nx {
                data.push(f(i, j));
            }
        }
        Self { mesh: *mesh, data }
    }

    /// Wraps raw node values (flat layout, `i` fastest).
    pub fn from_values(mesh: &MeshConfig, data: Vec<Vec2>) -> Option<Self> {
        (data.len() == mesh.num_nodes()).then_some(Self { mesh: *mesh, data })
    }

    pub fn mesh(&self) -> &MeshConfig {
        &self.mesh
    }

    pub fn values(&self) -> &[Vec2] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [Vec2] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Vec2 {
        self.data[self.mesh.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Vec2) {
        let k = self.mesh.index(i, j);
        self.data[k] = v;
    }

    /// Unweighted nodewise inner product.
    pub fn dot(&self, other: &MeshField) -> f64 {
        assert_eq!(self.mesh, other.mesh, "fields live on different meshes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1])
            .sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            v[0] *= s;
            v[1] *= s;
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &MeshField) {
        assert_eq!(self.mesh, other.mesh, "fields live on different meshes");
        for (v, w) in self.data.iter_mut().zip(&other.data) {
            v[0] += s * w[0];
            v[1] += s * w[1];
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v[0].abs().max(v[1].abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v[0].is_finite() && v[1].is_finite())
    }

    /// Interpolated value `sum_k u_k psi_k(p)`.
    pub fn interp_at(&self, p: Vec2) -> Vec2 {
        let s = self.mesh.stencil(p);
        let mut out = [0.0; 2];
        for b in 0..4 {
            for a in 0..4 {
                let w = s.weight(a, b);
                let u = self.data[self.mesh.index(s.ix[a], s.iy[b])];
                out[0] += w * u[0];
                out[1] += w * u[1];
            }
        }
        out
    }

    /// Interpolated gradient `D[i][j] = d u_i / d x_j` at `p`.
    pub fn gradient_at(&self, p: Vec2) -> Mat2 {
        let s = self.mesh.stencil(p);
        let mut d = [[0.0; 2]; 2];
        for b in 0..4 {
            for a in 0..4 {
                let g = s.grad(a, b);
                let u = self.data[self.mesh.index(s.ix[a], s.iy[b])];
                for i in 0..2 {
                    d[i][0] += u[i] * g[0];
                    d[i][1] += u[i] * g[1];
                }
            }
        }
        d
    }

    /// Value and gradient in one stencil pass.
    pub fn value_and_gradient_at(&self, p: Vec2) -> (Vec2, Mat2) {
        let s = self.mesh.stencil(p);
        let mut v = [0.0; 2];
        let mut d = [[0.0; 2]; 2];
        for b in 0..4 {
            for a in 0..4 {
                let w = s.weight(a, b);
                let g = s.grad(a, b);
                let u = self.data[self.mesh.index(s.ix[a], s.iy[b])];
                for i in 0..2 {
                    v[i] += w * u[i];
                    d[i][0] += u[i] * g[0];
                    d[i][1] += u[i] * g[1];
                }
            }
        }
        (v, d)
    }

    /// `sum_k (a . u_k) Hess(psi_k)(p) b`, the derivative of
    /// `a . (grad u(p)) b` with respect to `p`.
    pub fn hessian_contract(&self, p: Vec2, a_vec: Vec2, b_vec: Vec2) -> Vec2 {
        let s = self.mesh.stencil(p);
        let mut out = [0.0; 2];
        for b in 0..4 {
            for a in 0..4 {
                let u = self.data[self.mesh.index(s.ix[a], s.iy[b])];
                let c = a_vec[0] * u[0] + a_vec[1] * u[1];
                if c == 0.0 {
                    continue;
                }
                let h = s.hessian(a, b);
                out[0] += c * (h[0][0] * b_vec[0] + h[0][1] * b_vec[1]);
                out[1] += c * (h[1][0] * b_vec[0] + h[1][1] * b_vec[1]);
            }
        }
        out
    }
}

/// Evaluates `field` at every point.
pub fn interp_to_points(field: &MeshField, points: &[Vec2]) -> Vec<Vec2> {
    points.iter().map(|&p| field.interp_at(p)).collect()
}

/// `m_k = sum_beta P_beta psi_k(Q_beta)`, accumulated in particle order.
///
/// This is the exact transpose of [`interp_to_points`] under the unweighted
/// nodewise inner product.
pub fn spread_to_mesh(momenta: &[Vec2], points: &[Vec2], mesh: &MeshConfig) -> MeshField {
    assert_eq!(momenta.len(), points.len(), "momenta/points length mismatch");
    let mut field = MeshField::zeros(mesh);
    for (m, &q) in momenta.iter().zip(points) {
        if m[0] == 0.0 && m[1] == 0.0 {
            continue;
        }
        let s = mesh.stencil(q);
        for b in 0..4 {
            for a in 0..4 {
                let w = s.weight(a, b);
                let v = &mut field.data[mesh.index(s.ix[a], s.iy[b])];
                v[0] += w * m[0];
                v[1] += w * m[1];
            }
        }
    }
    field
}

/// `m_k = sum_beta a_beta (b_beta . grad psi_k(Q_beta))`.
///
/// Transpose of the map `u -> (a_beta . grad u(Q_beta) b_beta)_beta`.
pub fn spread_directional(a: &[Vec2], b: &[Vec2], points: &[Vec2], mesh: &MeshConfig) -> MeshField {
    assert_eq!(a.len(), points.len());
    assert_eq!(b.len(), points.len());
    let mut field = MeshField::zeros(mesh);
    for ((av, bv), &q) in a.iter().zip(b).zip(points) {
        let s = mesh.stencil(q);
        for jb in 0..4 {
            for ia in 0..4 {
                let g = s.grad(ia, jb);
                let c = g[0] * bv[0] + g[1] * bv[1];
                let v = &mut field.data[mesh.index(s.ix[ia], s.iy[jb])];
                v[0] += c * av[0];
                v[1] += c * av[1];
            }
        }
    }
    field
}

/// Exponents of the operator `(1 - alpha^2 lap)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormOperator {
    alpha: f64,
    power: u32,
}

impl NormOperator {
    pub fn new(alpha: f64, power: u32) -> Result<Self, MeshError> {
        if !(alpha.is_finite() && alpha > 0.0) || power == 0 {
            return Err(MeshError::BadOperator { alpha, power });
        }
        Ok(Self { alpha, power })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn power(&self) -> u32 {
        self.power
    }

    /// Fourier multiplier `(1 + alpha^2 |k|^2)^n` for squared wavenumber `k2`.
    #[inline]
    pub fn multiplier(&self, k2: f64) -> f64 {
        (1.0 + self.alpha * self.alpha * k2).powi(self.power as i32)
    }
}

/// Cached FFT plans and wavenumber tables for one mesh.
///
/// Both components of a vector field are transformed together as the real and
/// imaginary parts of one complex array; this is exact because every
/// multiplier used here is real and even in the wavenumber.
#[derive(Clone)]
pub struct Spectral {
    mesh: MeshConfig,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    kx2: Vec<f64>,
    ky2: Vec<f64>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("mesh", &self.mesh).finish()
    }
}

/// Squared angular wavenumbers `(2 pi n / l)^2` in FFT order.
fn wavenumbers_squared(n: usize, l: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let s = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
            let k = 2.0 * std::f64::consts::PI * s / l;
            k * k
        })
        .collect()
}

impl Spectral {
    pub fn new(mesh: &MeshConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            mesh: *mesh,
            fwd_x: planner.plan_fft_forward(mesh.nx),
            inv_x: planner.plan_fft_inverse(mesh.nx),
            fwd_y: planner.plan_fft_forward(mesh.ny),
            inv_y: planner.plan_fft_inverse(mesh.ny),
            kx2: wavenumbers_squared(mesh.nx, mesh.lx),
            ky2: wavenumbers_squared(mesh.ny, mesh.ly),
        }
    }

    pub fn mesh(&self) -> &MeshConfig {
        &self.mesh
    }

    /// Multiplies every Fourier mode by `multiplier(|k|^2)`.
    pub fn filter(&self, field: &MeshField, multiplier: impl Fn(f64) -> f64) -> MeshField {
        assert_eq!(field.mesh, self.mesh, "field does not match spectral mesh");
        let (nx, ny) = (self.mesh.nx, self.mesh.ny);
        let mut buf: Vec<Complex64> = field
            .data
            .iter()
            .map(|v| Complex64::new(v[0], v[1]))
            .collect();
        let scratch_len = [&self.fwd_x, &self.inv_x, &self.fwd_y, &self.inv_y]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];

        self.fwd_x.process_with_scratch(&mut buf, &mut scratch);
        let mut t = transpose(&buf, nx, ny);
        self.fwd_y.process_with_scratch(&mut t, &mut scratch);
        for i in 0..nx {
            let row = &mut t[i * ny..(i + 1) * ny];
            for (j, c) in row.iter_mut().enumerate() {
                *c *= multiplier(self.kx2[i] + self.ky2[j]);
            }
        }
        self.inv_y.process_with_scratch(&mut t, &mut scratch);
        let mut buf = transpose(&t, ny, nx);
        self.inv_x.process_with_scratch(&mut buf, &mut scratch);

        let norm = 1.0 / (nx * ny) as f64;
        MeshField {
            mesh: self.mesh,
            data: buf.iter().map(|c| [c.re * norm, c.im * norm]).collect(),
        }
    }

    /// `(1 - alpha^2 lap)^n u`.
    pub fn apply_metric(&self, field: &MeshField, op: &NormOperator) -> MeshField {
        self.filter(field, |k2| op.multiplier(k2))
    }

    /// `(1 - alpha^2 lap)^{-n} u`.
    pub fn invert_metric(&self, field: &MeshField, op: &NormOperator) -> MeshField {
        self.filter(field, |k2| 1.0 / op.multiplier(k2))
    }

    /// Riemann-sum norm `dx dy sum_k u_k . (A u)_k`.
    pub fn norm_squared(&self, field: &MeshField, op: &NormOperator) -> f64 {
        let au = self.apply_metric(field, op);
        self.mesh.cell_area() * field.dot(&au)
    }
}

/// Swaps the fast and slow axes of a flat 2D array.
fn transpose(src: &[Complex64], n_fast: usize, n_slow: usize) -> Vec<Complex64> {
    let mut dst = vec![Complex64::new(0.0, 0.0); src.len()];
    for s in 0..n_slow {
        for f in 0..n_fast {
            dst[s + n_slow * f] = src[f + n_fast * s];
        }
    }
    dst
}

#[inline]
pub fn dot2(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm2(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn mat_vec(m: &Mat2, v: Vec2) -> Vec2 {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

#[inline]
pub fn mat_t_vec(m: &Mat2, v: Vec2) -> Vec2 {
    [
        m[0][0] * v[0] + m[1][0] * v[1],
        m[0][1] * v[0] + m[1][1] * v[1],
    ]
}

#[inline]
pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

/// Solves `m x = rhs` for a 2x2 system. Returns `None` when singular.
#[inline]
pub fn solve2(m: &Mat2, rhs: Vec2) -> Option<Vec2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([
        (m[1][1] * rhs[0] - m[0][1] * rhs[1]) / det,
        (m[0][0] * rhs[1] - m[1][0] * rhs[0]) / det,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn mesh32() -> MeshConfig {
        MeshConfig::square(32, 2.0 * PI).unwrap()
    }

    fn random_field(mesh: &MeshConfig, rng: &mut StdRng) -> MeshField {
        MeshField::from_fn(mesh, |_, _| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
    }

    #[test]
    fn bspline_closed_form_values() {
        assert_eq!(bspline_weight(0.0), 2.0 / 3.0);
        assert_eq!(bspline_weight(2.0), 0.0);
        assert_eq!(bspline_weight(-2.0), 0.0);
        assert!((bspline_weight(1.0) - 1.0 / 6.0).abs() < 1e-16);
        assert_eq!(bspline_weight_deriv(0.0), 0.0);
        assert!((bspline_weight_deriv(1.0) + 0.5).abs() < 1e-16);
        assert!((bspline_weight_deriv(-1.0) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn bspline_derivatives_match_finite_differences() {
        let h = 1e-6;
        for &r in &[-1.7, -1.2, -0.6, -0.1, 0.3, 0.9, 1.4, 1.95] {
            let fd = (bspline_weight(r + h) - bspline_weight(r - h)) / (2.0 * h);
            assert!((fd - bspline_weight_deriv(r)).abs() < 1e-9, "r={r}");
            let fd2 = (bspline_weight_deriv(r + h) - bspline_weight_deriv(r - h)) / (2.0 * h);
            assert!((fd2 - bspline_weight_deriv2(r)).abs() < 1e-8, "r={r}");
        }
    }

    #[test]
    fn bspline_partition_of_unity_over_shifts() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..200 {
            let r: f64 = rng.random_range(-5.0..5.0);
            let s: f64 = (-6..=6).map(|z| bspline_weight(r + z as f64)).sum();
            let ds: f64 = (-6..=6).map(|z| bspline_weight_deriv(r + z as f64)).sum();
            assert!((s - 1.0).abs() < 1e-14);
            assert!(ds.abs() < 1e-14);
        }
    }

    #[test]
    fn mesh_config_validation() {
        assert!(MeshConfig::new(7, 16, 1.0, 1.0).is_err());
        assert!(MeshConfig::new(16, 16, 0.0, 1.0).is_err());
        assert!(MeshConfig::new(16, 16, 1.0, f64::NAN).is_err());
        let m = MeshConfig::new(16, 8, 2.0, 1.0).unwrap();
        assert_eq!(m.dx(), 0.125);
        assert_eq!(m.node_position(3, 2), [0.375, 0.25]);
    }

    #[test]
    fn interp_constant_and_zero_fields() {
        let mesh = mesh32();
        let c = MeshField::from_fn(&mesh, |_, _| [1.5, -0.25]);
        let z = MeshField::zeros(&mesh);
        for p in [[0.1, 0.2], [3.3, 6.2], [-1.0, 7.5]] {
            let v = c.interp_at(p);
            assert!((v[0] - 1.5).abs() < 1e-14 && (v[1] + 0.25).abs() < 1e-14);
            assert_eq!(z.interp_at(p), [0.0, 0.0]);
        }
    }

    #[test]
    fn interp_single_node_at_node() {
        let mesh = mesh32();
        let mut f = MeshField::zeros(&mesh);
        f.set(5, 7, [1.0, 2.0]);
        let v = f.interp_at(mesh.node_position(5, 7));
        let w = (2.0f64 / 3.0).powi(2);
        assert!((v[0] - w).abs() < 1e-15 && (v[1] - 2.0 * w).abs() < 1e-15);
    }

    #[test]
    fn spread_single_particle_at_node() {
        let mesh = mesh32();
        let f = spread_to_mesh(&[[0.5, -1.0]], &[mesh.node_position(3, 4)], &mesh);
        let w = (2.0f64 / 3.0).powi(2);
        let v = f.get(3, 4);
        assert!((v[0] - 0.5 * w).abs() < 1e-15 && (v[1] + w).abs() < 1e-15);
        let zero = spread_to_mesh(&[[0.0, 0.0]; 3], &[[1.0, 1.0]; 3], &mesh);
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn partition_of_unity_and_gradient_sum() {
        let mesh = mesh32();
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..1000 {
            let p = [rng.random_range(-1.0..8.0), rng.random_range(-1.0..8.0)];
            let s = mesh.stencil(p);
            let mut sum = 0.0;
            let mut g = [0.0; 2];
            for b in 0..4 {
                for a in 0..4 {
                    sum += s.weight(a, b);
                    let d = s.grad(a, b);
                    g[0] += d[0];
                    g[1] += d[1];
                }
            }
            assert!((sum - 1.0).abs() < 1e-13);
            assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
        }
    }

    #[test]
    fn spread_is_transpose_of_interp() {
        let mesh = mesh32();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 17;
            let q: Vec<Vec2> = (0..n)
                .map(|_| [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)])
                .collect();
            let p: Vec<Vec2> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let w = random_field(&mesh, &mut rng);
            let lhs = spread_to_mesh(&p, &q, &mesh).dot(&w);
            let rhs: f64 = interp_to_points(&w, &q).iter().zip(&p).map(|(a, b)| dot2(*a, *b)).sum();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()));
        }
    }

    #[test]
    fn spread_directional_is_transpose_of_gradient() {
        let mesh = mesh32();
        let mut rng = StdRng::seed_from_u64(4);
        let n = 9;
        let q: Vec<Vec2> = (0..n).map(|_| [rng.random_range(0.0..6.0), rng.random_range(0.0..6.0)]).collect();
        let a: Vec<Vec2> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let b: Vec<Vec2> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let w = random_field(&mesh, &mut rng);
        let lhs = spread_directional(&a, &b, &q, &mesh).dot(&w);
        let rhs: f64 = (0..n)
            .map(|i| dot2(a[i], mat_vec(&w.gradient_at(q[i]), b[i])))
            .sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn hessian_contract_matches_finite_difference() {
        let mesh = mesh32();
        let mut rng = StdRng::seed_from_u64(5);
        let w = random_field(&mesh, &mut rng);
        let p = [1.2345, 4.321];
        let (a, b) = ([0.3, -0.7], [1.1, 0.4]);
        let f = |x: Vec2| dot2(a, mat_vec(&w.gradient_at(x), b));
        let h = 1e-6;
        let fd = [
            (f([p[0] + h, p[1]]) - f([p[0] - h, p[1]])) / (2.0 * h),
            (f([p[0], p[1] + h]) - f([p[0], p[1] - h])) / (2.0 * h),
        ];
        let an = w.hessian_contract(p, a, b);
        for i in 0..2 {
            assert!((fd[i] - an[i]).abs() < 1e-6 * an[i].abs().max(1.0), "{fd:?} vs {an:?}");
        }
    }

    #[test]
    fn translation_by_grid_spacing_rolls_spread() {
        let mesh = mesh32();
        let mut rng = StdRng::seed_from_u64(6);
        let q: Vec<Vec2> = (0..11).map(|_| [rng.random_range(0.5..5.5), rng.random_range(0.5..5.5)]).collect();
        let p: Vec<Vec2> = (0..11).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let shifted: Vec<Vec2> = q.iter().map(|x| [x[0] + mesh.dx(), x[1]]).collect();
        let a = spread_to_mesh(&p, &q, &mesh);
        let b = spread_to_mesh(&p, &shifted, &mesh);
        let scale = a.max_abs();
        for j in 0..mesh.ny() {
            for i in 0..mesh.nx() {
                let va = a.get(i, j);
                let vb = b.get((i + 1) % mesh.nx(), j);
                assert!((va[0] - vb[0]).abs() <= 1e-13 * scale);
                assert!((va[1] - vb[1]).abs() <= 1e-13 * scale);
            }
        }
    }

    #[test]
    fn metric_on_constant_and_single_mode() {
        let mesh = MeshConfig::new(16, 32, 2.0 * PI, 4.0).unwrap();
        let sp = Spectral::new(&mesh);
        let op = NormOperator::new(0.4, 2).unwrap();
        let c = MeshField::from_fn(&mesh, |_, _| [2.0, -3.0]);
        let ac = sp.apply_metric(&c, &op);
        for v in ac.values() {
            assert!((v[0] - 2.0).abs() < 1e-13 && (v[1] + 3.0).abs() < 1e-13);
        }
        let (mx, my) = (3.0, 2.0);
        let kx = 2.0 * PI * mx / mesh.lx();
        let ky = 2.0 * PI * my / mesh.ly();
        let mode = MeshField::from_fn(&mesh, |i, j| {
            let x = mesh.node_position(i, j);
            [(kx * x[0] + ky * x[1]).cos(), (kx * x[0]).sin()]
        });
        let am = sp.apply_metric(&mode, &op);
        let s0 = op.multiplier(kx * kx + ky * ky);
        let s1 = op.multiplier(kx * kx);
        for (v, w) in am.values().iter().zip(mode.values()) {
            assert!((v[0] - s0 * w[0]).abs() < 1e-11 * s0);
            assert!((v[1] - s1 * w[1]).abs() < 1e-11 * s1);
        }
    }

    #[test]
    fn metric_roundtrip_is_identity() {
        let mesh = MeshConfig::new(24, 16, 3.0, 2.0).unwrap();
        let sp = Spectral::new(&mesh);
        let op = NormOperator::new(0.3, 2).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        let f = random_field(&mesh, &mut rng);
        let back = sp.invert_metric(&sp.apply_metric(&f, &op), &op);
        let mut diff = back.clone();
        diff.axpy(-1.0, &f);
        assert!(diff.max_abs() <= 1e-12 * f.max_abs());
    }

    #[test]
    fn norm_of_constant_field() {
        let mesh = mesh32();
        let sp = Spectral::new(&mesh);
        let op = NormOperator::new(0.4, 2).unwrap();
        let c = MeshField::from_fn(&mesh, |_, _| [0.5, 2.0]);
        let n = sp.norm_squared(&c, &op);
        let expect = (0.25 + 4.0) * 4.0 * PI * PI;
        assert!((n - expect).abs() < 1e-11 * expect);
        assert_eq!(sp.norm_squared(&MeshField::zeros(&mesh), &op), 0.0);
    }

    #[test]
    fn norm_operator_validation() {
        assert!(NormOperator::new(0.0, 2).is_err());
        assert!(NormOperator::new(0.4, 0).is_err());
        assert!(NormOperator::new(0.4, 1).unwrap().multiplier(0.0) == 1.0);
    }

    #[test]
    fn solve2_inverts() {
        let m = [[2.0, 1.0], [0.5, 3.0]];
        let x = solve2(&m, [1.0, -2.0]).unwrap();
        let r = mat_vec(&m, x);
        assert!((r[0] - 1.0).abs() < 1e-15 && (r[1] + 2.0).abs() < 1e-15);
        assert!(solve2(&[[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0]).is_none());
    }
}

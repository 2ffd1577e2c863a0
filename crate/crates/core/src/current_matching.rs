//! Curves as mesh currents and the kernel mismatch between them.
//!
//! The current of a curve is the spread of its backward edge vectors,
//! `v_k = sum_b (Q_b - Q_{b-1}) psi_k(Q_b)`. The mismatch of two curves is
//! `dx dy <d, K d>` with `d` the difference of their currents and `K` the
//! spectral inverse `(1 - alpha^2 lap)^{-p}`, applied without assembling a
//! matrix.

use thiserror::Error;

use crate::mesh_ops::{mat_t_vec, spread_to_mesh, MeshConfig, MeshField, Spectral, Vec2};
use crate::shape::edge_vectors;

#[derive(Debug, Error, PartialEq)]
#[error("kernel needs alpha > 0 and power >= 1, got alpha={alpha}, power={power}")]
pub struct KernelError {
    pub alpha: f64,
    pub power: u32,
}

/// Smoothing kernel with Fourier multiplier `(1 + alpha^2 |k|^2)^{-power}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOperator {
    alpha: f64,
    power: u32,
}

impl Default for KernelOperator {
    fn default() -> Self {
        Self { alpha: 0.4, power: 2 }
    }
}

impl KernelOperator {
    pub fn new(alpha: f64, power: u32) -> Result<Self, KernelError> {
        if !(alpha.is_finite() && alpha > 0.0) || power == 0 {
            return Err(KernelError { alpha, power });
        }
        Ok(Self { alpha, power })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn power(&self) -> u32 {
        self.power
    }

    #[inline]
    pub fn multiplier(&self, k2: f64) -> f64 {
        (1.0 + self.alpha * self.alpha * k2).powi(-(self.power as i32))
    }

    pub fn apply(&self, spectral: &Spectral, field: &MeshField) -> MeshField {
        spectral.filter(field, |k2| self.multiplier(k2))
    }
}

/// Mesh current of a closed curve given by its cyclic particle list.
pub fn singular_current(points: &[Vec2], mesh: &MeshConfig) -> MeshField {
    spread_to_mesh(&edge_vectors(points), points, mesh)
}

/// Mismatch of curves `a` and `b`.
pub fn mismatch(a: &[Vec2], b: &[Vec2], kernel: &KernelOperator, spectral: &Spectral) -> f64 {
    CurrentMatcher::new(b, *kernel, spectral.clone()).value(a)
}

/// Gradient of [`mismatch`] with respect to the particles of `a`.
pub fn mismatch_gradient(a: &[Vec2], b: &[Vec2], kernel: &KernelOperator, spectral: &Spectral) -> Vec<Vec2> {
    CurrentMatcher::new(b, *kernel, spectral.clone()).value_and_gradient(a).1
}

/// Mismatch against a fixed target whose current is computed once.
#[derive(Debug, Clone)]
pub struct CurrentMatcher {
    spectral: Spectral,
    kernel: KernelOperator,
    target: MeshField,
}

impl CurrentMatcher {
    pub fn new(target: &[Vec2], kernel: KernelOperator, spectral: Spectral) -> Self {
        let target = singular_current(target, spectral.mesh());
        Self {
            spectral,
            kernel,
            target,
        }
    }

    pub fn kernel(&self) -> &KernelOperator {
        &self.kernel
    }

    pub fn target_current(&self) -> &MeshField {
        &self.target
    }

    fn difference(&self, points: &[Vec2]) -> MeshField {
        let mut d = singular_current(points, self.spectral.mesh());
        d.axpy(-1.0, &self.target);
        d
    }

    pub fn value(&self, points: &[Vec2]) -> f64 {
        let d = self.difference(points);
        let kd = self.kernel.apply(&self.spectral, &d);
        self.spectral.mesh().cell_area() * d.dot(&kd)
    }

    /// Mismatch and its gradient with respect to every particle. A particle
    /// enters through its own basis weights and through the two edges it
    /// bounds.
    pub fn value_and_gradient(&self, points: &[Vec2]) -> (f64, Vec<Vec2>) {
        let area = self.spectral.mesh().cell_area();
        let d = self.difference(points);
        let mut w = self.kernel.apply(&self.spectral, &d);
        let value = area * d.dot(&w);
        w.scale(2.0 * area);

        let n = points.len();
        let edges = edge_vectors(points);
        let at: Vec<(Vec2, [[f64; 2]; 2])> = points.iter().map(|&p| w.value_and_gradient_at(p)).collect();
        let grad = (0..n)
            .map(|b| {
                let (wb, db) = at[b];
                let (wnext, _) = at[(b + 1) % n];
                let g = mat_t_vec(&db, edges[b]);
                [g[0] + wb[0] - wnext[0], g[1] + wb[1] - wnext[1]]
            })
            .collect();
        (value, grad)
    }
}

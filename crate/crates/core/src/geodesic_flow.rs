//! Implicit symplectic Euler integration of the particle-mesh geodesic
//! equations, Jacobian transport and conservation diagnostics.
//!
//! One step from `(Q^n, P^n)` solves
//!
//! ```text
//! dx dy A u = spread(P^{n+1}, Q^n)
//! P^{n+1}   = P^n - dt (grad u(Q^n))^T P^{n+1}
//! Q^{n+1}   = Q^n + dt u(Q^n)
//! J^{n+1}   = (I + dt grad u(Q^n)) J^n
//! ```
//!
//! where `A = (1 - alpha^2 lap)^n`. With `J` transported this way the
//! products `J^T P` are invariant step by step, which is what keeps initially
//! normal momenta normal to the advected curve.

use thiserror::Error;

use crate::mesh_ops::{
    dot2, mat_mul, mat_t_vec, mat_vec, solve2, spread_to_mesh, Mat2, MeshConfig, MeshField, NormOperator,
    Spectral, Vec2, IDENTITY,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("implicit step did not converge in {iterations} iterations (last momentum update {residual:.3e}); reduce the time step")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("implicit step matrix is singular at particle {particle}")]
    Singular { particle: usize },
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<FlowError>,
    },
    #[error("need at least one time step")]
    NoSteps,
    #[error("momentum and position lists differ in length ({momenta} vs {points})")]
    LengthMismatch { momenta: usize, points: usize },
}

/// Particle positions, momenta and flow Jacobians at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: Vec<Vec2>,
    pub p: Vec<Vec2>,
    pub j: Vec<Mat2>,
}

impl PhaseState {
    /// State with identity Jacobians.
    pub fn initial(q: Vec<Vec2>, p: Vec<Vec2>) -> Result<Self, FlowError> {
        if q.len() != p.len() {
            return Err(FlowError::LengthMismatch {
                momenta: p.len(),
                points: q.len(),
            });
        }
        let j = vec![IDENTITY; q.len()];
        Ok(Self { q, p, j })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// `N` uniform steps covering `t in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self, FlowError> {
        if steps == 0 {
            return Err(FlowError::NoSteps);
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

/// Fixed-point solver controls for the implicit step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSettings {
    /// Convergence threshold on the max-norm momentum update, relative to
    /// the largest momentum entering the step.
    pub tol_fp: f64,
    pub max_iter: usize,
}

impl Default for FlowSettings {
    fn default() -> Self {
        Self {
            tol_fp: 1e-13,
            max_iter: 500,
        }
    }
}

/// Result of a single implicit step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: PhaseState,
    /// `u^{n+1}`, the mesh velocity used to move from level `n` to `n + 1`.
    pub velocity: MeshField,
    pub iterations: usize,
}

/// A complete discrete geodesic.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `N + 1` time levels.
    pub states: Vec<PhaseState>,
    /// `u^{n+1}` for `n = 0..N`.
    pub velocities: Vec<MeshField>,
    /// `H^0 = H(P^0, Q^0)` followed by `H(P^{n+1}, Q^n) = |u^{n+1}|^2 / 2`.
    pub hamiltonians: Vec<f64>,
    pub dt: f64,
    pub iterations: Vec<usize>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.velocities.len()
    }

    pub fn initial(&self) -> &PhaseState {
        &self.states[0]
    }

    pub fn last(&self) -> &PhaseState {
        self.states.last().expect("trajectory has at least one state")
    }

    /// `max_b |J^T_b P_b - P^0_b|` at level `n`.
    pub fn relabel_drift_at(&self, n: usize) -> f64 {
        let p0 = &self.states[0].p;
        relabelling_momentum(&self.states[n])
            .iter()
            .zip(p0)
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max)
    }

    /// Largest relabelling drift over all levels, divided by `max_b |P^0_b|`.
    /// Zero for a zero-momentum trajectory.
    pub fn relative_relabel_drift(&self) -> f64 {
        let scale = max_norm(&self.states[0].p);
        if scale == 0.0 {
            return 0.0;
        }
        (0..self.states.len()).map(|n| self.relabel_drift_at(n)).fold(0.0, f64::max) / scale
    }

    /// `max_b |P^n_b . J^n_b dQ^0_b|` at level `n`.
    pub fn tangential_max_at(&self, n: usize, dq0: &[Vec2]) -> f64 {
        tangential_component(&self.states[n], dq0)
            .iter()
            .fold(0.0, |a, t| a.max(t.abs()))
    }

    /// `max_n |H^n - H^0|`.
    pub fn hamiltonian_drift(&self) -> f64 {
        let h0 = self.hamiltonians[0];
        self.hamiltonians.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max)
    }
}

/// The particle-mesh geodesic integrator for one mesh and norm.
#[derive(Debug, Clone)]
pub struct Flow {
    spectral: Spectral,
    norm: NormOperator,
    settings: FlowSettings,
}

impl Flow {
    pub fn new(mesh: &MeshConfig, norm: NormOperator, settings: FlowSettings) -> Self {
        Self {
            spectral: Spectral::new(mesh),
            norm,
            settings,
        }
    }

    pub fn mesh(&self) -> &MeshConfig {
        self.spectral.mesh()
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn norm(&self) -> &NormOperator {
        &self.norm
    }

    pub fn settings(&self) -> &FlowSettings {
        &self.settings
    }

    /// Solves `dx dy A u = spread(P, Q)` for `u`.
    pub fn velocity_from_momentum(&self, p: &[Vec2], q: &[Vec2]) -> MeshField {
        let m = spread_to_mesh(p, q, self.mesh());
        self.velocity_from_mesh_momentum(&m)
    }

    /// `u = A^{-1} m / (dx dy)` for a momentum already on the mesh.
    pub fn velocity_from_mesh_momentum(&self, m: &MeshField) -> MeshField {
        let mut u = self.spectral.invert_metric(m, &self.norm);
        u.scale(1.0 / self.mesh().cell_area());
        u
    }

    /// `|u(P, Q)|^2 / 2` in the discrete norm.
    pub fn hamiltonian(&self, p: &[Vec2], q: &[Vec2]) -> f64 {
        let u = self.velocity_from_momentum(p, q);
        0.5 * self.spectral.norm_squared(&u, &self.norm)
    }

    /// One implicit symplectic Euler step.
    pub fn step(&self, state: &PhaseState, dt: f64) -> Result<StepOutput, FlowError> {
        let n = state.len();
        let q = &state.q;
        let scale = max_norm(&state.p);
        if scale == 0.0 {
            return Ok(StepOutput {
                state: state.clone(),
                velocity: MeshField::zeros(self.mesh()),
                iterations: 0,
            });
        }

        let mut p_new = state.p.clone();
        let mut next = vec![[0.0; 2]; n];
        let mut converged = None;
        let mut residual = f64::INFINITY;
        for it in 1..=self.settings.max_iter {
            let u = self.velocity_from_momentum(&p_new, q);
            residual = 0.0;
            for b in 0..n {
                let d = u.gradient_at(q[b]);
                let m = implicit_matrix(&d, dt);
                let pb = solve2(&m, state.p[b]).ok_or(FlowError::Singular { particle: b })?;
                residual = f64::max(residual, (pb[0] - p_new[b][0]).abs().max((pb[1] - p_new[b][1]).abs()));
                next[b] = pb;
            }
            std::mem::swap(&mut p_new, &mut next);
            if !residual.is_finite() {
                break;
            }
            if residual <= self.settings.tol_fp * scale {
                converged = Some(it);
                break;
            }
        }
        let Some(iterations) = converged else {
            return Err(FlowError::NoConvergence {
                iterations: self.settings.max_iter,
                residual,
            });
        };

        let u = self.velocity_from_momentum(&p_new, q);
        let mut q_new = Vec::with_capacity(n);
        let mut j_new = Vec::with_capacity(n);
        for (qb, jb) in q.iter().zip(&state.j) {
            let (v, d) = u.value_and_gradient_at(*qb);
            q_new.push([qb[0] + dt * v[0], qb[1] + dt * v[1]]);
            j_new.push(jacobian_update(jb, &d, dt));
        }
        Ok(StepOutput {
            state: PhaseState {
                q: q_new,
                p: p_new,
                j: j_new,
            },
            velocity: u,
            iterations,
        })
    }

    /// Integrates `N` steps from `(Q^0, P^0)` with `J^0 = I`.
    pub fn integrate(&self, q0: &[Vec2], p0: &[Vec2], grid: TimeGrid) -> Result<Trajectory, FlowError> {
        let dt = grid.dt();
        let mut state = PhaseState::initial(q0.to_vec(), p0.to_vec())?;
        let mut states = Vec::with_capacity(grid.steps() + 1);
        let mut velocities = Vec::with_capacity(grid.steps());
        let mut hamiltonians = Vec::with_capacity(grid.steps() + 1);
        let mut iterations = Vec::with_capacity(grid.steps());
        hamiltonians.push(self.hamiltonian(p0, q0));
        for n in 0..grid.steps() {
            let out = self.step(&state, dt).map_err(|e| FlowError::Step {
                step: n,
                source: Box::new(e),
            })?;
            hamiltonians.push(0.5 * self.spectral.norm_squared(&out.velocity, &self.norm));
            states.push(std::mem::replace(&mut state, out.state));
            velocities.push(out.velocity);
            iterations.push(out.iterations);
        }
        states.push(state);
        Ok(Trajectory {
            states,
            velocities,
            hamiltonians,
            dt,
            iterations,
        })
    }
}

/// `I + dt D^T`, the matrix of the per-particle momentum equation.
#[inline]
pub(crate) fn implicit_matrix(d: &Mat2, dt: f64) -> Mat2 {
    [
        [1.0 + dt * d[0][0], dt * d[1][0]],
        [dt * d[0][1], 1.0 + dt * d[1][1]],
    ]
}

#[inline]
fn jacobian_update(j: &Mat2, d: &Mat2, dt: f64) -> Mat2 {
    let jd = mat_mul(d, j);
    [
        [j[0][0] + dt * jd[0][0], j[0][1] + dt * jd[0][1]],
        [j[1][0] + dt * jd[1][0], j[1][1] + dt * jd[1][1]],
    ]
}

/// `J^{n+1}_b = (I + dt grad u^{n+1}(Q^n_b)) J^n_b`, the linearization of
/// the position update.
pub fn evolve_jacobian(j: &[Mat2], q: &[Vec2], u: &MeshField, dt: f64) -> Vec<Mat2> {
    j.iter()
        .zip(q)
        .map(|(jb, &qb)| jacobian_update(jb, &u.gradient_at(qb), dt))
        .collect()
}

/// `J^T_b P_b` per particle.
pub fn relabelling_momentum(state: &PhaseState) -> Vec<Vec2> {
    state.j.iter().zip(&state.p).map(|(j, p)| mat_t_vec(j, *p)).collect()
}

/// `P_b . (J_b dQ^0_b)`, the momentum component along the advected edge.
pub fn tangential_component(state: &PhaseState, dq0: &[Vec2]) -> Vec<f64> {
    state
        .j
        .iter()
        .zip(&state.p)
        .zip(dq0)
        .map(|((j, p), dq)| dot2(*p, mat_vec(j, *dq)))
        .collect()
}

/// Advects passive points through the stored velocities with the same
/// explicit position update as the particles. Returns one snapshot per time
/// level, `N + 1` in total.
pub fn transport_points(aux: &[Vec2], velocities: &[MeshField], dt: f64) -> Vec<Vec<Vec2>> {
    let mut levels = Vec::with_capacity(velocities.len() + 1);
    let mut x = aux.to_vec();
    for u in velocities {
        let next: Vec<Vec2> = x
            .iter()
            .map(|&p| {
                let v = u.interp_at(p);
                [p[0] + dt * v[0], p[1] + dt * v[1]]
            })
            .collect();
        levels.push(std::mem::replace(&mut x, next));
    }
    levels.push(x);
    levels
}

pub(crate) fn max_norm(v: &[Vec2]) -> f64 {
    v.iter().map(|p| p[0].abs().max(p[1].abs())).fold(0.0, f64::max)
}

//! Geodesic shooting: optimize the initial normal momenta so that the end of
//! the discrete geodesic matches the target current.
//!
//! The gradient is the exact reverse-mode derivative of the discrete map
//! `control -> P^0 -> (steps) -> Q^N -> mismatch`. Each implicit step is
//! differentiated at its converged solution through the implicit function
//! theorem, so the result does not depend on how many fixed-point iterations
//! the forward solve took.

use thiserror::Error;

use crate::current_matching::{CurrentMatcher, KernelOperator};
use crate::geodesic_flow::{max_norm, Flow, FlowError, FlowSettings, TimeGrid, Trajectory};
use crate::mesh_ops::{
    dot2, mat_t_vec, mat_vec, solve2, spread_directional, spread_to_mesh, Mat2, MeshConfig, NormOperator, Vec2,
};
use crate::shape::{ParticleCurve, ShapeError};

#[derive(Debug, Error)]
pub enum ShootingError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("source curve: {0}")]
    Shape(#[from] ShapeError),
    #[error("control has {got} entries, source curve has {expected} particles")]
    ControlLength { expected: usize, got: usize },
    #[error("adjoint step {step} did not converge (last update {residual:.3e})")]
    AdjointNoConvergence { step: usize, residual: f64 },
    #[error("penalty sigma must be positive and finite, got {0}")]
    BadPenalty(f64),
    #[error("objective is not finite at the initial control")]
    NonFiniteObjective,
}

/// Normal momentum magnitudes, one per source particle.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector(pub Vec<f64>);

impl ControlVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Everything that defines one matching problem.
#[derive(Debug, Clone)]
pub struct ShootingProblem {
    pub source: ParticleCurve,
    /// Enters only through its current, so its particle count is free.
    pub target: ParticleCurve,
    pub mesh: MeshConfig,
    pub norm: NormOperator,
    pub kernel: KernelOperator,
    pub grid: TimeGrid,
    pub flow: FlowSettings,
    /// When set, the objective becomes `sum_n dt |u^{n+1}|^2 + mismatch / sigma^2`.
    pub penalty_sigma: Option<f64>,
}

/// Forward and reverse evaluation of the shooting objective.
#[derive(Debug, Clone)]
pub struct Shooter {
    problem: ShootingProblem,
    flow: Flow,
    matcher: CurrentMatcher,
    normals: Vec<Vec2>,
}

/// Objective value, gradient and the trajectory they were computed on.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub trajectory: Trajectory,
}

impl Shooter {
    pub fn new(problem: ShootingProblem) -> Result<Self, ShootingError> {
        if let Some(s) = problem.penalty_sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(ShootingError::BadPenalty(s));
            }
        }
        let normals = problem.source.outward_normals()?;
        let flow = Flow::new(&problem.mesh, problem.norm, problem.flow);
        let matcher = CurrentMatcher::new(problem.target.points(), problem.kernel, flow.spectral().clone());
        Ok(Self {
            problem,
            flow,
            matcher,
            normals,
        })
    }

    pub fn problem(&self) -> &ShootingProblem {
        &self.problem
    }

    pub fn flow(&self) -> &Flow {
        &self.flow
    }

    pub fn matcher(&self) -> &CurrentMatcher {
        &self.matcher
    }

    pub fn normals(&self) -> &[Vec2] {
        &self.normals
    }

    pub fn num_controls(&self) -> usize {
        self.normals.len()
    }

    /// `P^0_b = p_b n_b`.
    pub fn initial_momenta(&self, control: &[f64]) -> Result<Vec<Vec2>, ShootingError> {
        if control.len() != self.normals.len() {
            return Err(ShootingError::ControlLength {
                expected: self.normals.len(),
                got: control.len(),
            });
        }
        Ok(control
            .iter()
            .zip(&self.normals)
            .map(|(p, n)| [p * n[0], p * n[1]])
            .collect())
    }

    fn terminal_weight(&self) -> f64 {
        self.problem.penalty_sigma.map_or(1.0, |s| 1.0 / (s * s))
    }

    /// Integrates the geodesic for `control`.
    pub fn shoot(&self, control: &[f64]) -> Result<Trajectory, ShootingError> {
        let p0 = self.initial_momenta(control)?;
        Ok(self.flow.integrate(self.problem.source.points(), &p0, self.problem.grid)?)
    }

    /// Objective value of a trajectory already integrated.
    pub fn objective_of(&self, traj: &Trajectory) -> f64 {
        let mismatch = self.matcher.value(&traj.last().q);
        match self.problem.penalty_sigma {
            None => mismatch,
            Some(_) => {
                // |u^{n+1}|^2 = 2 H^{n+1}
                let path: f64 = traj.hamiltonians[1..].iter().map(|h| 2.0 * h * traj.dt).sum();
                path + self.terminal_weight() * mismatch
            }
        }
    }

    pub fn objective(&self, control: &[f64]) -> Result<(f64, Trajectory), ShootingError> {
        let traj = self.shoot(control)?;
        Ok((self.objective_of(&traj), traj))
    }

    /// Objective and its exact gradient with respect to the control.
    pub fn gradient(&self, control: &[f64]) -> Result<Evaluation, ShootingError> {
        let traj = self.shoot(control)?;
        let (mismatch, gq) = self.matcher.value_and_gradient(&traj.last().q);
        let value = match self.problem.penalty_sigma {
            None => mismatch,
            Some(_) => self.objective_of(&traj),
        };
        let w = self.terminal_weight();
        let qbar: Vec<Vec2> = gq.iter().map(|g| [w * g[0], w * g[1]]).collect();
        let pbar0 = self.backpropagate(&traj, qbar)?;
        let gradient = pbar0.iter().zip(&self.normals).map(|(pb, n)| dot2(*pb, *n)).collect();
        Ok(Evaluation {
            value,
            gradient,
            trajectory: traj,
        })
    }

    /// Reverse sweep: given the adjoint of `Q^N`, returns the adjoint of `P^0`.
    fn backpropagate(&self, traj: &Trajectory, mut qbar: Vec<Vec2>) -> Result<Vec<Vec2>, ShootingError> {
        let n_p = qbar.len();
        let mut pbar = vec![[0.0; 2]; n_p];
        let dt = traj.dt;
        let mesh = self.flow.mesh();
        let tol = self.flow.settings().tol_fp;
        let max_iter = self.flow.settings().max_iter;
        let penalized = self.problem.penalty_sigma.is_some();

        for step in (0..traj.steps()).rev() {
            let q = &traj.states[step].q;
            let p_next = &traj.states[step + 1].p;
            let u = &traj.velocities[step];
            let grads: Vec<Mat2> = q.iter().map(|&x| u.gradient_at(x)).collect();

            // Position update Q' = Q + dt u(Q).
            let qbar_in: Vec<Vec2> = (0..n_p)
                .map(|b| {
                    let t = mat_t_vec(&grads[b], qbar[b]);
                    [qbar[b][0] + dt * t[0], qbar[b][1] + dt * t[1]]
                })
                .collect();
            let scaled: Vec<Vec2> = qbar.iter().map(|v| [dt * v[0], dt * v[1]]).collect();
            // g_ubar = G ubar with G = A^{-1} / (dx dy).
            let mut g_ubar = self.flow.velocity_from_mesh_momentum(&spread_to_mesh(&scaled, q, mesh));
            if penalized {
                // d/du of dt |u|^2 is 2 dt dx dy A u, and G of that is 2 dt u.
                g_ubar.axpy(2.0 * dt, u);
            }
            let rhs: Vec<Vec2> = (0..n_p)
                .map(|b| {
                    let v = g_ubar.interp_at(q[b]);
                    [pbar[b][0] + v[0], pbar[b][1] + v[1]]
                })
                .collect();

            // Adjoint of the implicit (u, P') system:
            //   (I + dt D_b) lam_b = rhs_b - dt [G W(lam)](Q_b),
            //   W(lam)_k = sum_b P'_b (lam_b . grad psi_k(Q_b)).
            let solve = |b: usize, r: Vec2| -> Result<Vec2, ShootingError> {
                let d = &grads[b];
                let m = [
                    [1.0 + dt * d[0][0], dt * d[0][1]],
                    [dt * d[1][0], 1.0 + dt * d[1][1]],
                ];
                solve2(&m, r).ok_or(ShootingError::Flow(FlowError::Singular { particle: b }))
            };
            let mut lam = (0..n_p).map(|b| solve(b, rhs[b])).collect::<Result<Vec<_>, _>>()?;
            let mut g_w;
            let mut converged = false;
            let mut residual = f64::INFINITY;
            let mut iter = 0;
            loop {
                g_w = self.flow.velocity_from_mesh_momentum(&spread_directional(p_next, &lam, q, mesh));
                if converged || iter == max_iter {
                    break;
                }
                iter += 1;
                let mut next = Vec::with_capacity(n_p);
                for b in 0..n_p {
                    let v = g_w.interp_at(q[b]);
                    next.push(solve(b, [rhs[b][0] - dt * v[0], rhs[b][1] - dt * v[1]])?);
                }
                residual = next
                    .iter()
                    .zip(&lam)
                    .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
                    .fold(0.0, f64::max);
                let scale = max_norm(&next);
                lam = next;
                if !residual.is_finite() {
                    break;
                }
                converged = residual <= tol * scale || scale == 0.0;
            }
            if !converged {
                return Err(ShootingError::AdjointNoConvergence { step, residual });
            }

            // G lam1 = G ubar - dt G W(lam).
            let mut g_lam1 = g_ubar;
            g_lam1.axpy(-dt, &g_w);
            qbar = (0..n_p)
                .map(|b| {
                    let dl = g_lam1.gradient_at(q[b]);
                    let a = mat_t_vec(&dl, p_next[b]);
                    let h = u.hessian_contract(q[b], p_next[b], lam[b]);
                    [
                        qbar_in[b][0] + a[0] - dt * h[0],
                        qbar_in[b][1] + a[1] - dt * h[1],
                    ]
                })
                .collect();
            pbar = lam;
        }
        Ok(pbar)
    }
}

/// Descent method used by [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    /// Polak-Ribiere+ nonlinear conjugate gradients with restarts.
    #[default]
    NonlinearCg,
    /// Truncated Newton with finite-difference Hessian-vector products.
    NewtonCg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub method: Method,
    pub max_iters: usize,
    /// Stop once `|g| <= grad_tol |g_0|`.
    pub grad_tol: f64,
    /// Sufficient-decrease constant of the line search.
    pub armijo: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            method: Method::NonlinearCg,
            max_iters: 500,
            grad_tol: 1e-4,
            armijo: 1e-4,
        }
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The gradient vanished exactly (for example source equals target).
    ZeroGradient,
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Termination::ZeroGradient | Termination::GradientTolerance)
    }
}

/// Progress report passed to an observer after every accepted iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationInfo {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub control: ControlVector,
    pub objective_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub trajectory: Trajectory,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Max over levels and particles of `|J^T P - P^0|`, relative to `max |P^0|`.
    pub relabel_drift: f64,
    /// Max over levels of `|P . J T^0|` with `T^0` the centered tangents of the
    /// source, relative to `max |P^0| max |T^0|`.
    pub tangential_max: f64,
    /// `max_n |H^n - H^0|`.
    pub hamiltonian_drift: f64,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        self.termination.converged()
    }

    pub fn initial_objective(&self) -> f64 {
        self.objective_history[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_history.last().expect("history is never empty")
    }

    /// Initial over final objective; infinite when the final value is zero.
    pub fn reduction_factor(&self) -> f64 {
        let f = self.final_objective();
        if f == 0.0 {
            if self.initial_objective() == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            self.initial_objective() / f
        }
    }
}

/// Conservation maxima of one trajectory: relative relabelling drift,
/// relative tangential momentum, absolute Hamiltonian drift.
pub fn conservation_diagnostics(traj: &Trajectory, dq0: &[Vec2]) -> (f64, f64, f64) {
    let p_scale = max_norm(&traj.initial().p);
    let e_scale = dq0.iter().map(|e| e[0].hypot(e[1])).fold(0.0, f64::max);
    let tangential = if p_scale == 0.0 {
        0.0
    } else {
        (0..traj.states.len())
            .map(|n| traj.tangential_max_at(n, dq0))
            .fold(0.0, f64::max)
            / (p_scale * e_scale)
    };
    (traj.relative_relabel_drift(), tangential, traj.hamiltonian_drift())
}

pub fn minimize(
    shooter: &Shooter,
    settings: &OptimizerSettings,
    initial: ControlVector,
) -> Result<OptimResult, ShootingError> {
    minimize_with(shooter, settings, initial, |_| {})
}

struct Counter<'a> {
    shooter: &'a Shooter,
    evaluations: usize,
}

impl Counter<'_> {
    /// Objective for line-search trials; integrator failures count as an
    /// infinite objective so the search backs off.
    fn trial(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        match self.shooter.objective(x) {
            Ok((f, _)) if f.is_finite() => f,
            _ => f64::INFINITY,
        }
    }

    fn full(&mut self, x: &[f64]) -> Result<Evaluation, ShootingError> {
        self.evaluations += 1;
        self.shooter.gradient(x)
    }
}

/// Like [`minimize`], calling `observer` after every accepted iteration.
pub fn minimize_with(
    shooter: &Shooter,
    settings: &OptimizerSettings,
    initial: ControlVector,
    mut observer: impl FnMut(&IterationInfo),
) -> Result<OptimResult, ShootingError> {
    let n = shooter.num_controls();
    if initial.len() != n {
        return Err(ShootingError::ControlLength {
            expected: n,
            got: initial.len(),
        });
    }
    let mut counter = Counter {
        shooter,
        evaluations: 0,
    };
    let mut x = initial.0;
    let mut eval = counter.full(&x)?;
    if !eval.value.is_finite() {
        return Err(ShootingError::NonFiniteObjective);
    }
    let g0_norm = l2(&eval.gradient);
    let mut objective_history = vec![eval.value];
    let mut grad_norm_history = vec![g0_norm];
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    if g0_norm == 0.0 {
        termination = Termination::ZeroGradient;
    } else {
        let mut d: Vec<f64> = eval.gradient.iter().map(|g| -g).collect();
        let mut prev_step = 1.0 / g0_norm;
        let mut prev_slope = -g0_norm * g0_norm;
        while iterations < settings.max_iters {
            let g = eval.gradient.clone();
            if settings.method == Method::NewtonCg {
                d = newton_direction(&mut counter, &x, &g)?;
            }
            let mut slope = dot(&g, &d);
            if slope >= 0.0 {
                d = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            let alpha0 = match settings.method {
                Method::NewtonCg => 1.0,
                Method::NonlinearCg => (prev_step * prev_slope / slope).clamp(1e-12, 1e12),
            };
            let Some((alpha, x_new)) = line_search(&mut counter, &x, eval.value, slope, &d, alpha0, settings.armijo)
            else {
                termination = Termination::LineSearchFailed;
                break;
            };
            let new_eval = counter.full(&x_new)?;
            iterations += 1;
            let g_new = &new_eval.gradient;
            let gn = l2(g_new);
            objective_history.push(new_eval.value);
            grad_norm_history.push(gn);
            observer(&IterationInfo {
                iteration: iterations,
                objective: new_eval.value,
                grad_norm: gn,
                step: alpha,
            });

            if settings.method == Method::NonlinearCg {
                let gg = dot(&g, &g);
                let beta = if iterations % n == 0 {
                    0.0
                } else {
                    (g_new.iter().zip(&g).map(|(a, b)| a * (a - b)).sum::<f64>() / gg).max(0.0)
                };
                d = g_new.iter().zip(&d).map(|(gi, di)| -gi + beta * di).collect();
            }
            prev_step = alpha;
            prev_slope = slope;
            x = x_new;
            eval = new_eval;
            if gn == 0.0 || gn <= settings.grad_tol * g0_norm {
                termination = Termination::GradientTolerance;
                break;
            }
        }
    }

    let dq0 = shooter.problem().source.tangent_vectors();
    let (relabel_drift, tangential_max, hamiltonian_drift) = conservation_diagnostics(&eval.trajectory, &dq0);
    Ok(OptimResult {
        control: ControlVector(x),
        objective_history,
        grad_norm_history,
        trajectory: eval.trajectory,
        iterations,
        evaluations: counter.evaluations,
        termination,
        relabel_drift,
        tangential_max,
        hamiltonian_drift,
    })
}

/// Backtracking Armijo search that first tries to expand an accepted step.
fn line_search(
    counter: &mut Counter<'_>,
    x: &[f64],
    f0: f64,
    slope: f64,
    d: &[f64],
    alpha0: f64,
    c1: f64,
) -> Option<(f64, Vec<f64>)> {
    let at = |a: f64| -> Vec<f64> { x.iter().zip(d).map(|(xi, di)| xi + a * di).collect() };
    let armijo = |a: f64, f: f64| f <= f0 + c1 * a * slope;
    let mut a = alpha0;
    let mut f = counter.trial(&at(a));
    if armijo(a, f) {
        for _ in 0..30 {
            let a2 = 2.0 * a;
            let f2 = counter.trial(&at(a2));
            if armijo(a2, f2) && f2 < f {
                a = a2;
                f = f2;
            } else {
                break;
            }
        }
        return (f < f0).then(|| (a, at(a)));
    }
    for _ in 0..60 {
        let denom = 2.0 * (f - f0 - slope * a);
        let quad = if f.is_finite() && denom > 0.0 { -slope * a * a / denom } else { 0.5 * a };
        a = quad.clamp(0.1 * a, 0.5 * a);
        f = counter.trial(&at(a));
        if armijo(a, f) && f < f0 {
            return Some((a, at(a)));
        }
        if a * d.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e-16 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        {
            break;
        }
    }
    None
}

/// Truncated CG on `H d = -g` with `H v ~ (g(x + h v) - g(x)) / h`.
fn newton_direction(counter: &mut Counter<'_>, x: &[f64], g: &[f64]) -> Result<Vec<f64>, ShootingError> {
    let n = g.len();
    let gnorm = l2(g);
    let tol = gnorm.sqrt().min(0.5) * gnorm;
    let mut d = vec![0.0; n];
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let xnorm = l2(x);
    for k in 0..(2 * n).min(200) {
        let pn = l2(&p);
        let h = 1.49e-8 * (1.0 + xnorm) / pn;
        let xp: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + h * b).collect();
        let gp = counter.full(&xp)?.gradient;
        let hp: Vec<f64> = gp.iter().zip(g).map(|(a, b)| (a - b) / h).collect();
        let curv = dot(&p, &hp);
        if curv <= 0.0 {
            if k == 0 {
                return Ok(g.iter().map(|v| -v).collect());
            }
            break;
        }
        let a = rr / curv;
        for i in 0..n {
            d[i] += a * p[i];
            r[i] -= a * hp[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(d)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `J T^0` per particle at one level: initial tangents carried by the flow.
pub fn advected_edges(traj: &Trajectory, level: usize, dq0: &[Vec2]) -> Vec<Vec2> {
    traj.states[level].j.iter().zip(dq0).map(|(j, e)| mat_vec(j, *e)).collect()
}

//! Classical two-point boundary-value problem.
//!
//! Paths are found by single shooting on the initial velocity. The flow
//! sensitivity `Y = ∂(γ, γ̇)/∂(q₀, v₀)` is integrated alongside the
//! Euler–Lagrange equations; it gives the Newton Jacobian and the Jacobi
//! fields `φ⁰ = ∂γ/∂q₀`, `φ¹ = ∂γ/∂q₁`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::expr::{velocity_hessian, ExprError, Expression};
use crate::ode::{self, DenseSolution, OdeConfig, OdeError};
use crate::quad::gauss_legendre;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ClassicalError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("Newton shooting did not converge (residual {residual:e} after {iterations} iterations)")]
    NewtonFailed { residual: f64, iterations: usize },
    #[error("focal trajectory (|det ∂γ(t₁)/∂v₀| = {det:e})")]
    Focal { det: f64 },
    #[error("velocity Hessian is not positive-definite at t = {t}")]
    IndefiniteHessian { t: f64 },
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("near-zero eigenvalue {eigenvalue:e} in the action Hessian: degenerate path")]
    DegenerateMorse { eigenvalue: f64 },
    #[error("Morse index did not stabilize under mesh refinement")]
    MorseUnstable,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub ode: OdeConfig,
    /// Endpoint tolerance, relative to `1 + |q₁|`.
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { ode: OdeConfig::default(), newton_tol: 1e-12, max_newton: 60 }
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub d: usize,
    pub lagrangian: Expression,
    pub t0: f64,
    pub t1: f64,
    pub q0: Vec<f64>,
    pub q1: Vec<f64>,
    pub v0_guess: Vec<f64>,
    pub solver: SolverConfig,
}

impl Problem {
    pub fn new(
        lagrangian: Expression,
        t0: f64,
        t1: f64,
        q0: Vec<f64>,
        q1: Vec<f64>,
        v0_guess: Option<Vec<f64>>,
    ) -> Result<Problem, ClassicalError> {
        let d = lagrangian
            .scope
            .lagrangian_dim()
            .ok_or_else(|| ClassicalError::InvalidProblem("expression is not a Lagrangian".into()))?;
        if !(t0 < t1) {
            return Err(ClassicalError::InvalidProblem(format!("need t0 < t1, got {t0}, {t1}")));
        }
        if q0.len() != d || q1.len() != d {
            return Err(ClassicalError::InvalidProblem(format!("endpoints must have dimension {d}")));
        }
        let v0_guess = match v0_guess {
            Some(v) if v.len() != d => {
                return Err(ClassicalError::InvalidProblem(format!("v0_guess must have dimension {d}")))
            }
            Some(v) => v,
            None => q0.iter().zip(&q1).map(|(a, b)| (b - a) / (t1 - t0)).collect(),
        };
        Ok(Problem { d, lagrangian, t0, t1, q0, q1, v0_guess, solver: SolverConfig::default() })
    }

    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    /// The point `(τ, v, q)` in Lagrangian scope order.
    pub fn point(&self, t: f64, v: &[f64], q: &[f64]) -> Vec<f64> {
        let mut p = Vec::with_capacity(1 + 2 * self.d);
        p.push(t);
        p.extend_from_slice(v);
        p.extend_from_slice(q);
        p
    }

    fn v_var(&self, i: usize) -> usize {
        1 + i
    }

    fn q_var(&self, i: usize) -> usize {
        1 + self.d + i
    }

    /// Euler–Lagrange right-hand side for the state `(γ, γ̇, Y)`.
    fn rhs(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, ClassicalError> {
        let d = self.d;
        let (q, v) = (&y[..d], &y[d..2 * d]);
        let jet = self.lagrangian.jet(&self.point(t, v, q), 3)?;
        let vh = velocity_hessian(&jet, d)?;
        let (iv, iq) = (|i| self.v_var(i), |i| self.q_var(i));
        let mut r = DVector::zeros(d);
        for i in 0..d {
            let mut s = jet.partial(&[iq(i)]) - jet.partial(&[iv(i), 0]);
            for j in 0..d {
                s -= jet.partial(&[iv(i), iq(j)]) * v[j];
            }
            r[i] = s;
        }
        let acc = &vh.a_inv * &r;
        let mut out = Vec::with_capacity(y.len());
        out.extend_from_slice(v);
        out.extend(acc.iter());
        if y.len() == 2 * d {
            return Ok(out);
        }
        // ∂acc/∂x = a⁻¹ (∂r/∂x − (∂a/∂x) acc)
        let mut jac = DMatrix::zeros(d, 2 * d);
        for k in 0..2 * d {
            let xk = if k < d { iq(k) } else { iv(k - d) };
            let mut col = DVector::zeros(d);
            for i in 0..d {
                let mut s = jet.partial(&[iq(i), xk]) - jet.partial(&[iv(i), 0, xk]);
                for j in 0..d {
                    s -= jet.partial(&[iv(i), iq(j), xk]) * v[j];
                    s -= jet.partial(&[iv(i), iv(j), xk]) * acc[j];
                }
                if k >= d {
                    s -= jet.partial(&[iv(i), iq(k - d)]);
                }
                col[i] = s;
            }
            jac.set_column(k, &(&vh.a_inv * col));
        }
        let n = 2 * d;
        let ymat = DMatrix::from_column_slice(n, n, &y[n..]);
        let mut jfull = DMatrix::zeros(n, n);
        for i in 0..d {
            jfull[(i, d + i)] = 1.0;
        }
        jfull.view_mut((d, 0), (d, n)).copy_from(&jac);
        let yd = jfull * ymat;
        out.extend(yd.iter());
        Ok(out)
    }

    fn shoot(&self, v0: &[f64]) -> Result<DenseSolution, ClassicalError> {
        let d = self.d;
        let n = 2 * d;
        let mut y0 = Vec::with_capacity(n + n * n);
        y0.extend_from_slice(&self.q0);
        y0.extend_from_slice(v0);
        y0.extend(DMatrix::<f64>::identity(n, n).iter());
        ode::integrate(|t, y| self.rhs(t, y), self.t0, y0, self.t1, &self.solver.ode).map_err(|e| match e {
            OdeError::Rhs { source, .. } => source,
            other => ClassicalError::Integration(other.to_string()),
        })
    }
}

/// Path data at one time.
#[derive(Debug, Clone)]
pub struct PathPoint {
    pub t: f64,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub acc: DVector<f64>,
    pub phi0: DMatrix<f64>,
    pub phi0_dot: DMatrix<f64>,
    pub phi0_ddot: DMatrix<f64>,
    pub phi1: DMatrix<f64>,
    pub phi1_dot: DMatrix<f64>,
    pub phi1_ddot: DMatrix<f64>,
}

/// A solved classical path.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub problem: Problem,
    sol: DenseSolution,
    pub v0: Vec<f64>,
    k_inv: Option<DMatrix<f64>>,
    y_gq_t1: DMatrix<f64>,
    /// `det ∂γ(t₁)/∂v₀`.
    pub flow_det: f64,
    pub nonfocal: bool,
    pub action: f64,
    /// `∂L/∂v` at `t₀` and `t₁`.
    pub p0: DVector<f64>,
    pub p1: DVector<f64>,
    /// Largest scaled Euler–Lagrange residual at step midpoints.
    pub el_residual: f64,
    pub newton_iterations: usize,
}

/// Solve the two-point problem by Newton shooting from `problem.v0_guess`.
pub fn solve_bvp(problem: &Problem) -> Result<Trajectory, ClassicalError> {
    let d = problem.d;
    let tol = problem.solver.newton_tol * (1.0 + norm(&problem.q1));
    let residual = |sol: &DenseSolution| -> DVector<f64> {
        let y = &sol.last().y;
        DVector::from_fn(d, |i, _| y[i] - problem.q1[i])
    };
    let mut v0 = problem.v0_guess.clone();
    let mut sol = problem.shoot(&v0)?;
    let mut res = residual(&sol);
    for iter in 0..problem.solver.max_newton {
        if res.norm() <= tol {
            return Trajectory::finish(problem.clone(), sol, v0, iter);
        }
        let k = flow_block(&sol.last().y, d, 0, 1);
        let step = match k.clone().lu().solve(&res) {
            Some(s) if s.iter().all(|x| x.is_finite()) => -s,
            _ => return Err(ClassicalError::Focal { det: k.determinant() }),
        };
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = v0.iter().zip(step.iter()).map(|(a, s)| a + lambda * s).collect();
            if let Ok(s) = problem.shoot(&trial) {
                let r = residual(&s);
                if r.norm() < res.norm() * (1.0 - 1e-4 * lambda) || r.norm() <= tol {
                    v0 = trial;
                    sol = s;
                    res = r;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-8 {
                return Err(ClassicalError::NewtonFailed { residual: res.norm(), iterations: iter });
            }
        }
    }
    if res.norm() <= tol {
        return Trajectory::finish(problem.clone(), sol, v0, problem.solver.max_newton);
    }
    Err(ClassicalError::NewtonFailed { residual: res.norm(), iterations: problem.solver.max_newton })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// Block (rows: 0 = γ, 1 = γ̇; cols: 0 = q₀, 1 = v₀) of the flow sensitivity.
fn flow_block(y: &[f64], d: usize, row: usize, col: usize) -> DMatrix<f64> {
    let n = 2 * d;
    let ymat = DMatrix::from_column_slice(n, n, &y[n..n + n * n]);
    ymat.view((row * d, col * d), (d, d)).into_owned()
}

impl Trajectory {
    fn finish(
        problem: Problem,
        sol: DenseSolution,
        v0: Vec<f64>,
        iterations: usize,
    ) -> Result<Trajectory, ClassicalError> {
        let d = problem.d;
        let end = sol.last().y.clone();
        let k = flow_block(&end, d, 0, 1);
        let flow_det = k.determinant();
        let nonfocal = flow_det.abs() >= 1e-8 * problem.duration().powi(d as i32);
        let k_inv = if nonfocal { k.try_inverse() } else { None };
        let y_gq_t1 = flow_block(&end, d, 0, 0);
        let mut traj = Trajectory {
            problem,
            sol,
            v0,
            k_inv,
            y_gq_t1,
            flow_det,
            nonfocal,
            action: 0.0,
            p0: DVector::zeros(d),
            p1: DVector::zeros(d),
            el_residual: 0.0,
            newton_iterations: iterations,
        };
        traj.check_convexity()?;
        traj.action = traj.compute_action()?;
        traj.p0 = traj.momentum(traj.t0())?;
        traj.p1 = traj.momentum(traj.t1())?;
        traj.el_residual = traj.compute_el_residual()?;
        Ok(traj)
    }

    pub fn d(&self) -> usize {
        self.problem.d
    }

    pub fn t0(&self) -> f64 {
        self.problem.t0
    }

    pub fn t1(&self) -> f64 {
        self.problem.t1
    }

    pub fn duration(&self) -> f64 {
        self.problem.duration()
    }

    /// Times of the accepted integration steps.
    pub fn grid(&self) -> Vec<f64> {
        self.sol.nodes().iter().map(|n| n.t).collect()
    }

    /// `(γ(t), γ̇(t))`.
    pub fn position_velocity(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.d();
        let y = self.sol.state(t);
        (y[..d].to_vec(), y[d..2 * d].to_vec())
    }

    /// `(τ, γ̇(τ), γ(τ))` as a Lagrangian evaluation point.
    pub fn lagrangian_point(&self, t: f64) -> Vec<f64> {
        let (q, v) = self.position_velocity(t);
        self.problem.point(t, &v, &q)
    }

    /// Full path data including Jacobi fields (nonfocal paths only).
    pub fn point(&self, t: f64) -> Result<PathPoint, ClassicalError> {
        let d = self.d();
        let k_inv = self.k_inv.as_ref().ok_or(ClassicalError::Focal { det: self.flow_det })?;
        let y = self.sol.state(t);
        let f = self.problem.rhs(t, &y)?;
        let (gq, gv) = (flow_block(&y, d, 0, 0), flow_block(&y, d, 0, 1));
        let (vq, vv) = (flow_block(&y, d, 1, 0), flow_block(&y, d, 1, 1));
        let (aq, av) = (flow_block(&f, d, 1, 0), flow_block(&f, d, 1, 1));
        let phi1 = &gv * k_inv;
        let phi1_dot = &vv * k_inv;
        let phi1_ddot = &av * k_inv;
        let corr = k_inv * &self.y_gq_t1;
        let phi0 = &gq - &gv * &corr;
        let phi0_dot = &vq - &vv * &corr;
        let phi0_ddot = &aq - &av * &corr;
        Ok(PathPoint {
            t,
            q: DVector::from_column_slice(&y[..d]),
            v: DVector::from_column_slice(&y[d..2 * d]),
            acc: DVector::from_column_slice(&f[d..2 * d]),
            phi0,
            phi0_dot,
            phi0_ddot,
            phi1,
            phi1_dot,
            phi1_ddot,
        })
    }

    fn momentum(&self, t: f64) -> Result<DVector<f64>, ClassicalError> {
        let d = self.d();
        let jet = self.problem.lagrangian.jet(&self.lagrangian_point(t), 1)?;
        Ok(DVector::from_fn(d, |i, _| jet.partial(&[1 + i])))
    }

    fn check_convexity(&self) -> Result<(), ClassicalError> {
        let d = self.d();
        for node in self.sol.nodes() {
            let p = self.problem.point(node.t, &node.y[d..2 * d], &node.y[..d]);
            let vh = velocity_hessian(&self.problem.lagrangian.jet(&p, 2)?, d)?;
            if !vh.positive_definite {
                return Err(ClassicalError::IndefiniteHessian { t: node.t });
            }
        }
        Ok(())
    }

    fn compute_action(&self) -> Result<f64, ClassicalError> {
        let rule = gauss_legendre(8);
        let nodes = self.sol.nodes();
        let mut s = 0.0;
        for w in nodes.windows(2) {
            let (a, b) = (w[0].t, w[1].t);
            let h = 0.5 * (b - a);
            for (&x, &wt) in rule.0.iter().zip(&rule.1) {
                let t = 0.5 * (a + b) + h * x;
                s += wt * h * self.problem.lagrangian.eval(&self.lagrangian_point(t))?;
            }
        }
        Ok(s)
    }

    fn compute_el_residual(&self) -> Result<f64, ClassicalError> {
        let d = self.d();
        let mut worst = 0.0f64;
        for w in self.sol.nodes().windows(2) {
            let t = 0.5 * (w[0].t + w[1].t);
            let y = self.sol.state(t);
            let acc_interp = &self.sol.derivative(t)[d..2 * d];
            let f = self.problem.rhs(t, &y[..2 * d])?;
            let scale = 1.0 + f[d..2 * d].iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for i in 0..d {
                worst = worst.max((acc_interp[i] - f[d + i]).abs() / scale);
            }
        }
        Ok(worst)
    }
}

/// `(∂S/∂q₀, ∂S/∂q₁) = (−∂L/∂v|_{t₀}, ∂L/∂v|_{t₁})`.
pub fn s_gradients(traj: &Trajectory) -> (DVector<f64>, DVector<f64>) {
    (-traj.p0.clone(), traj.p1.clone())
}

pub fn action(traj: &Trajectory) -> f64 {
    traj.action
}

pub fn nonfocal_check(traj: &Trajectory) -> bool {
    traj.nonfocal
}

#[derive(Debug, Clone)]
pub struct VanVleck {
    /// `W = ∂²(−S)/∂q₀∂q₁` (rows: q₀ index, columns: q₁ index).
    pub w: DMatrix<f64>,
    pub abs_det: f64,
    /// The same matrix read off at `t₁` instead of `t₀`.
    pub w_from_t1: DMatrix<f64>,
}

impl VanVleck {
    pub fn log_abs_det(&self) -> f64 {
        self.abs_det.ln()
    }
}

fn velocity_blocks(traj: &Trajectory, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>), ClassicalError> {
    let d = traj.d();
    let jet = traj.problem.lagrangian.jet(&traj.lagrangian_point(t), 2)?;
    let a = DMatrix::from_fn(d, d, |i, j| jet.partial(&[1 + i, 1 + j]));
    let lvq = DMatrix::from_fn(d, d, |i, j| jet.partial(&[1 + i, 1 + d + j]));
    Ok((a, lvq))
}

/// Van Vleck matrix `W = a(t₀)·φ̇¹(t₀) = −(a(t₁)·φ̇⁰(t₁))ᵀ`.
pub fn van_vleck(traj: &Trajectory) -> Result<VanVleck, ClassicalError> {
    if !traj.nonfocal {
        return Err(ClassicalError::Focal { det: traj.flow_det });
    }
    let (a0, _) = velocity_blocks(traj, traj.t0())?;
    let (a1, _) = velocity_blocks(traj, traj.t1())?;
    let w = &a0 * traj.point(traj.t0())?.phi1_dot;
    let w_from_t1 = -(&a1 * traj.point(traj.t1())?.phi0_dot).transpose();
    let abs_det = w.determinant().abs();
    Ok(VanVleck { w, abs_det, w_from_t1 })
}

/// Hessian of `S(q₀, q₁)` in the `2d` boundary coordinates `(q₀, q₁)`.
pub fn s_hessian(traj: &Trajectory) -> Result<DMatrix<f64>, ClassicalError> {
    let d = traj.d();
    let (a0, lvq0) = velocity_blocks(traj, traj.t0())?;
    let (a1, lvq1) = velocity_blocks(traj, traj.t1())?;
    let p0 = traj.point(traj.t0())?;
    let p1 = traj.point(traj.t1())?;
    let mut h = DMatrix::zeros(2 * d, 2 * d);
    let h00 = -(&a0 * &p0.phi0_dot + &lvq0);
    let h01 = -(&a0 * &p0.phi1_dot);
    let h11 = &a1 * &p1.phi1_dot + &lvq1;
    h.view_mut((0, 0), (d, d)).copy_from(&h00);
    h.view_mut((0, d), (d, d)).copy_from(&h01);
    h.view_mut((d, 0), (d, d)).copy_from(&h01.transpose());
    h.view_mut((d, d), (d, d)).copy_from(&h11);
    Ok(h)
}

#[derive(Debug, Clone, Copy)]
pub struct MorseConfig {
    pub initial_elements: usize,
    pub max_doublings: usize,
}

impl Default for MorseConfig {
    fn default() -> Self {
        MorseConfig { initial_elements: 16, max_doublings: 6 }
    }
}

/// Negative-eigenvalue count of the Galerkin (hat function) discretization
/// of the second variation on based loops, refined until stable across two
/// successive doublings.
pub fn morse_index(traj: &Trajectory, cfg: &MorseConfig) -> Result<usize, ClassicalError> {
    let mut counts = Vec::new();
    let mut n = cfg.initial_elements.max(2);
    for _ in 0..=cfg.max_doublings {
        counts.push(galerkin_negative_count(traj, n)?);
        if counts.len() >= 3 {
            let k = counts.len();
            if counts[k - 1] == counts[k - 2] && counts[k - 2] == counts[k - 3] {
                return Ok(counts[k - 1]);
            }
        }
        n *= 2;
    }
    Err(ClassicalError::MorseUnstable)
}

fn galerkin_negative_count(traj: &Trajectory, elements: usize) -> Result<usize, ClassicalError> {
    let d = traj.d();
    let (t0, t1) = (traj.t0(), traj.t1());
    let h = (t1 - t0) / elements as f64;
    let nodes = elements - 1;
    let mut k = DMatrix::<f64>::zeros(nodes * d, nodes * d);
    let rule = gauss_legendre(4);
    for e in 0..elements {
        let a = t0 + e as f64 * h;
        for (&x, &w) in rule.0.iter().zip(&rule.1) {
            let s = 0.5 * (x + 1.0);
            let t = a + s * h;
            let jet = traj.problem.lagrangian.jet(&traj.lagrangian_point(t), 2)?;
            let wt = 0.5 * w * h;
            // local hats: left node (1 − s), right node s
            let vals = [1.0 - s, s];
            let ders = [-1.0 / h, 1.0 / h];
            for (la, node_a) in [(0usize, e as isize - 1), (1, e as isize)] {
                if node_a < 0 || node_a as usize >= nodes {
                    continue;
                }
                for (lb, node_b) in [(0usize, e as isize - 1), (1, e as isize)] {
                    if node_b < 0 || node_b as usize >= nodes {
                        continue;
                    }
                    for i in 0..d {
                        for j in 0..d {
                            let (vi, vj, qi, qj) = (1 + i, 1 + j, 1 + d + i, 1 + d + j);
                            let val = jet.partial(&[vi, vj]) * ders[la] * ders[lb]
                                + jet.partial(&[vi, qj]) * ders[la] * vals[lb]
                                + jet.partial(&[qi, vj]) * vals[la] * ders[lb]
                                + jet.partial(&[qi, qj]) * vals[la] * vals[lb];
                            k[(node_a as usize * d + i, node_b as usize * d + j)] += wt * val;
                        }
                    }
                }
            }
        }
    }
    let eig = SymmetricEigen::new(k);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let thresh = 1e-10 * scale;
    if let Some(&l) = eig.eigenvalues.iter().find(|l| l.abs() < thresh) {
        return Err(ClassicalError::DegenerateMorse { eigenvalue: l });
    }
    Ok(eig.eigenvalues.iter().filter(|&&l| l < -thresh).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use std::collections::BTreeMap;

    fn problem(l: &str, t1: f64, q0: f64, q1: f64) -> Problem {
        let e = parse(l, 1, &BTreeMap::new()).unwrap();
        Problem::new(e, 0.0, t1, vec![q0], vec![q1], None).unwrap()
    }

    #[test]
    fn free_particle() {
        let tr = solve_bvp(&problem("v^2/2", 1.0, 0.0, 1.0)).unwrap();
        for t in [0.0, 0.25, 0.7, 1.0] {
            let (q, v) = tr.position_velocity(t);
            assert!((q[0] - t).abs() < 1e-12);
            assert!((v[0] - 1.0).abs() < 1e-12);
        }
        assert!((tr.action - 0.5).abs() < 1e-12);
        let (g0, g1) = s_gradients(&tr);
        assert!((g0[0] + 1.0).abs() < 1e-12 && (g1[0] - 1.0).abs() < 1e-12);
        let vv = van_vleck(&tr).unwrap();
        assert!((vv.w[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(nonfocal_check(&tr));
        assert_eq!(morse_index(&tr, &MorseConfig::default()).unwrap(), 0);
        let p = tr.point(0.3).unwrap();
        assert!((p.phi0[(0, 0)] - 0.7).abs() < 1e-12);
        assert!((p.phi1[(0, 0)] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn constant_lagrangian_action() {
        let e = parse("5 + 0*q + v^2*0.5 - v^2/2", 1, &BTreeMap::new()).unwrap();
        // degenerate in v: the solver must refuse
        let p = Problem::new(e, 0.0, 2.0, vec![0.0], vec![1.0], None).unwrap();
        assert!(solve_bvp(&p).is_err());
    }

    #[test]
    fn exponential_metric_path() {
        let e = std::f64::consts::E;
        let tr = solve_bvp(&problem("v^2/(2*q^2)", 1.0, 1.0, e)).unwrap();
        for t in [0.1, 0.5, 0.9] {
            assert!((tr.position_velocity(t).0[0] - t.exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn harmonic_oscillator() {
        let (w, t1, q0, q1) = (1.0f64, 2.5f64, 0.3, -0.4);
        let tr = solve_bvp(&problem("v^2/2 - q^2/2", t1, q0, q1)).unwrap();
        let exact = |t: f64| (q0 * (w * (t1 - t)).sin() + q1 * (w * t).sin()) / (w * t1).sin();
        for t in [0.3, 1.1, 2.0] {
            assert!((tr.position_velocity(t).0[0] - exact(t)).abs() < 1e-8);
        }
        let s = w / (2.0 * (w * t1).sin()) * ((q0 * q0 + q1 * q1) * (w * t1).cos() - 2.0 * q0 * q1);
        assert!((tr.action - s).abs() < 1e-8);
        let vv = van_vleck(&tr).unwrap();
        assert!((vv.w[(0, 0)] - w / (w * t1).sin()).abs() < 1e-8);
        assert!((vv.w_from_t1[(0, 0)] - vv.w[(0, 0)]).abs() < 1e-9);
        assert!(tr.el_residual < 1e-6, "{}", tr.el_residual);
        assert_eq!(morse_index(&tr, &MorseConfig::default()).unwrap(), 0);

        let tr = solve_bvp(&problem("v^2/2 - q^2/2", 4.5, q0, q1)).unwrap();
        assert!(nonfocal_check(&tr));
        assert_eq!(morse_index(&tr, &MorseConfig::default()).unwrap(), 1);
        let tr = solve_bvp(&problem("v^2/2 - q^2/2", 1.5 * std::f64::consts::PI, q0, q1)).unwrap();
        assert!(nonfocal_check(&tr));
    }

    #[test]
    fn focal_configuration() {
        let pi = std::f64::consts::PI;
        let tr = solve_bvp(&problem("v^2/2 - q^2/2", pi, 0.0, 0.0)).unwrap();
        assert!(!nonfocal_check(&tr));
        assert!(matches!(van_vleck(&tr), Err(ClassicalError::Focal { .. })));
    }

    #[test]
    fn hessian_blocks_symmetric() {
        let tr = solve_bvp(&problem("v^2/(2*q^2) + 0.1*v*q", 1.0, 1.0, 2.0)).unwrap();
        let h = s_hessian(&tr).unwrap();
        assert!((&h - h.transpose()).amax() < 1e-9);
    }
}

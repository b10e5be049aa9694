//! Green's function of the Jacobi operator along a classical path.
//!
//! The Jacobi operator is the second variation of the action on based loops,
//!
//! ```text
//! D ξ = −d/dτ (a ξ̇ + L_vq ξ) + L_qv ξ̇ + L_qq ξ,
//! ```
//!
//! and `G` is its inverse with Dirichlet conditions. Two constructions are
//! available: variation of parameters through `M(τ)⁻¹`, and the closed form
//! in terms of Jacobi fields and the van Vleck matrix,
//!
//! ```text
//! G(ς, τ) = φ¹(ς) W⁻¹ φ⁰(τ)ᵀ     (ς < τ)
//!         = φ⁰(ς) W⁻ᵀ φ¹(τ)ᵀ     (ς > τ).
//! ```

use nalgebra::DMatrix;

use crate::classical::{van_vleck, ClassicalError, Trajectory};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GreenError {
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error("time {0} outside the path interval")]
    OutOfDomain(f64),
    #[error("points closer than the finite-difference stencil ({0:e})")]
    NearDiagonal(f64),
    #[error("internal inconsistency: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GreenMode {
    VariationOfParameters,
    #[default]
    VanVleck,
}

/// Everything about the path needed at a single time.
#[derive(Debug, Clone)]
pub struct Slice {
    pub t: f64,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub a: DMatrix<f64>,
    pub a_inv: DMatrix<f64>,
    /// `d/dτ a(τ, γ̇, γ)` along the path.
    pub a_dot: DMatrix<f64>,
    pub lvq: DMatrix<f64>,
    pub phi0: DMatrix<f64>,
    pub phi0_dot: DMatrix<f64>,
    pub phi0_ddot: DMatrix<f64>,
    pub phi1: DMatrix<f64>,
    pub phi1_dot: DMatrix<f64>,
    pub phi1_ddot: DMatrix<f64>,
}

impl Slice {
    /// `[φ̇ᵃ; φᵃ]`, the `2d × d` leg matrix in (v, q) index order.
    pub fn legs(&self, a: usize) -> DMatrix<f64> {
        let d = self.q.len();
        let (p, pd) = if a == 0 { (&self.phi0, &self.phi0_dot) } else { (&self.phi1, &self.phi1_dot) };
        let mut m = DMatrix::zeros(2 * d, d);
        m.view_mut((0, 0), (d, d)).copy_from(pd);
        m.view_mut((d, 0), (d, d)).copy_from(p);
        m
    }
}

/// Value of a (possibly differentiated) Green's function.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenValue {
    pub smooth: DMatrix<f64>,
    /// Coefficient of `δ(ς − τ)`; present only for the mixed derivative.
    pub delta_coeff: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct GreenRep {
    traj: Trajectory,
    pub w: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
    pub mode: GreenMode,
    /// Sup-norm distance between the two constructions on the check grid.
    pub max_discrepancy: f64,
}

/// Grid size of the consistency check run by [`GreenRep::build`].
pub const CHECK_GRID: usize = 50;

impl GreenRep {
    pub fn build(traj: &Trajectory) -> Result<GreenRep, GreenError> {
        let vv = van_vleck(traj)?;
        let w_inv = vv
            .w
            .clone()
            .try_inverse()
            .ok_or_else(|| GreenError::Inconsistent("van Vleck matrix not invertible".into()))?;
        let mut rep = GreenRep { traj: traj.clone(), w: vv.w, w_inv, mode: GreenMode::VanVleck, max_discrepancy: 0.0 };
        let n = CHECK_GRID;
        let times: Vec<f64> =
            (0..n).map(|i| traj.t0() + traj.duration() * i as f64 / (n - 1) as f64).collect();
        let slices = times.iter().map(|&t| rep.slice(t)).collect::<Result<Vec<_>, _>>()?;
        let mut worst = 0.0f64;
        for s in &slices {
            for t in &slices {
                let a = rep.eval_slices(GreenMode::VanVleck, s, t, 0, 0)?.smooth;
                let b = rep.eval_slices(GreenMode::VariationOfParameters, s, t, 0, 0)?.smooth;
                worst = worst.max((a - b).amax());
            }
        }
        rep.max_discrepancy = worst;
        Ok(rep)
    }

    pub fn with_mode(mut self, mode: GreenMode) -> GreenRep {
        self.mode = mode;
        self
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    pub fn d(&self) -> usize {
        self.traj.d()
    }

    fn check_time(&self, t: f64) -> Result<(), GreenError> {
        let eps = 1e-12 * (1.0 + self.traj.duration());
        if t < self.traj.t0() - eps || t > self.traj.t1() + eps || !t.is_finite() {
            return Err(GreenError::OutOfDomain(t));
        }
        Ok(())
    }

    pub fn slice(&self, t: f64) -> Result<Slice, GreenError> {
        self.check_time(t)?;
        let d = self.d();
        let p = self.traj.point(t)?;
        let jet = self.traj.problem.lagrangian.jet(&self.traj.lagrangian_point(t), 3).map_err(ClassicalError::from)?;
        let a = DMatrix::from_fn(d, d, |i, j| jet.partial(&[1 + i, 1 + j]));
        let lvq = DMatrix::from_fn(d, d, |i, j| jet.partial(&[1 + i, 1 + d + j]));
        let a_dot = DMatrix::from_fn(d, d, |i, j| {
            let mut s = jet.partial(&[1 + i, 1 + j, 0]);
            for k in 0..d {
                s += jet.partial(&[1 + i, 1 + j, 1 + d + k]) * p.v[k];
                s += jet.partial(&[1 + i, 1 + j, 1 + k]) * p.acc[k];
            }
            s
        });
        let a_inv = a
            .clone()
            .try_inverse()
            .ok_or_else(|| GreenError::Inconsistent(format!("velocity Hessian singular at {t}")))?;
        Ok(Slice {
            t,
            q: p.q.iter().copied().collect(),
            v: p.v.iter().copied().collect(),
            a,
            a_inv,
            a_dot,
            lvq,
            phi0: p.phi0,
            phi0_dot: p.phi0_dot,
            phi0_ddot: p.phi0_ddot,
            phi1: p.phi1,
            phi1_dot: p.phi1_dot,
            phi1_ddot: p.phi1_ddot,
        })
    }

    /// `∂ς^{dς} ∂τ^{dτ} G(ς, τ)` in the current mode.
    pub fn eval(&self, sigma: f64, tau: f64, d_sigma: u8, d_tau: u8) -> Result<GreenValue, GreenError> {
        let s = self.slice(sigma)?;
        let t = if sigma == tau { s.clone() } else { self.slice(tau)? };
        self.eval_slices(self.mode, &s, &t, d_sigma, d_tau)
    }

    /// As [`GreenRep::eval`] from precomputed slices. On the diagonal the
    /// smooth part is the average of the two one-sided limits.
    pub fn eval_slices(
        &self,
        mode: GreenMode,
        s: &Slice,
        t: &Slice,
        d_sigma: u8,
        d_tau: u8,
    ) -> Result<GreenValue, GreenError> {
        assert!(d_sigma <= 1 && d_tau <= 1, "only first derivatives in each slot");
        let below = |m: GreenMode| match m {
            GreenMode::VanVleck => self.vv_below(s, t, d_sigma, d_tau),
            GreenMode::VariationOfParameters => self.vop_below(s, t, d_sigma, d_tau),
        };
        let above = |m: GreenMode| match m {
            GreenMode::VanVleck => self.vv_above(s, t, d_sigma, d_tau),
            GreenMode::VariationOfParameters => self.vop_above(s, t, d_sigma, d_tau),
        };
        let smooth = if s.t < t.t {
            below(mode)?
        } else if s.t > t.t {
            above(mode)?
        } else {
            (below(mode)? + above(mode)?) * 0.5
        };
        let delta_coeff = (d_sigma == 1 && d_tau == 1).then(|| t.a_inv.clone());
        Ok(GreenValue { smooth, delta_coeff })
    }

    // ς < τ
    fn vv_below(&self, s: &Slice, t: &Slice, ds: u8, dt: u8) -> Result<DMatrix<f64>, GreenError> {
        let l = if ds == 0 { &s.phi1 } else { &s.phi1_dot };
        let r = if dt == 0 { &t.phi0 } else { &t.phi0_dot };
        Ok(l * &self.w_inv * r.transpose())
    }

    // ς > τ
    fn vv_above(&self, s: &Slice, t: &Slice, ds: u8, dt: u8) -> Result<DMatrix<f64>, GreenError> {
        let l = if ds == 0 { &s.phi0 } else { &s.phi0_dot };
        let r = if dt == 0 { &t.phi1 } else { &t.phi1_dot };
        Ok(l * self.w_inv.transpose() * r.transpose())
    }

    /// `(a⁻¹ψ₀ᵀ, a⁻¹ψ₁ᵀ)` at a slice and their derivatives.
    fn vop_factors(&self, s: &Slice, deriv: bool) -> Result<(DMatrix<f64>, DMatrix<f64>), GreenError> {
        let d = self.d();
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        m.view_mut((0, 0), (d, d)).copy_from(&s.phi0);
        m.view_mut((0, d), (d, d)).copy_from(&s.phi1);
        m.view_mut((d, 0), (d, d)).copy_from(&s.phi0_dot);
        m.view_mut((d, d), (d, d)).copy_from(&s.phi1_dot);
        let m_inv = m.try_inverse().ok_or_else(|| {
            GreenError::Inconsistent(format!("fundamental matrix singular at τ = {}", s.t))
        })?;
        let psi = m_inv.columns(d, d).into_owned();
        let (psi0, psi1) = (psi.rows(0, d).into_owned(), psi.rows(d, d).into_owned());
        if deriv {
            let mut m_dot = DMatrix::zeros(2 * d, 2 * d);
            m_dot.view_mut((0, 0), (d, d)).copy_from(&s.phi0_dot);
            m_dot.view_mut((0, d), (d, d)).copy_from(&s.phi1_dot);
            m_dot.view_mut((d, 0), (d, d)).copy_from(&s.phi0_ddot);
            m_dot.view_mut((d, d), (d, d)).copy_from(&s.phi1_ddot);
            let dpsi = -(&m_inv * m_dot * psi);
            let a_inv_dot = -(&s.a_inv * &s.a_dot * &s.a_inv);
            let f0 = &a_inv_dot * psi0.transpose() + &s.a_inv * dpsi.rows(0, d).transpose();
            let f1 = &a_inv_dot * psi1.transpose() + &s.a_inv * dpsi.rows(d, d).transpose();
            return Ok((f0, f1));
        }
        Ok((&s.a_inv * psi0.transpose(), &s.a_inv * psi1.transpose()))
    }

    fn vop_below(&self, s: &Slice, t: &Slice, ds: u8, dt: u8) -> Result<DMatrix<f64>, GreenError> {
        let (f0, _) = self.vop_factors(s, ds == 1)?;
        let r = if dt == 0 { &t.phi0 } else { &t.phi0_dot };
        Ok(-(f0 * r.transpose()))
    }

    fn vop_above(&self, s: &Slice, t: &Slice, ds: u8, dt: u8) -> Result<DMatrix<f64>, GreenError> {
        let (_, f1) = self.vop_factors(s, ds == 1)?;
        let r = if dt == 0 { &t.phi1 } else { &t.phi1_dot };
        Ok(f1 * r.transpose())
    }

    /// Smooth part of the `2d × 2d` edge matrix in (v, q) index order:
    /// `[[∂ς∂τG, ∂ςG], [∂τG, G]]`.
    pub fn edge_matrix(&self, s: &Slice, t: &Slice) -> DMatrix<f64> {
        let d = self.d();
        let mut e = DMatrix::zeros(2 * d, 2 * d);
        for (ds, row) in [(1u8, 0usize), (0, d)] {
            for (dt, col) in [(1u8, 0usize), (0, d)] {
                let g = self
                    .eval_slices(GreenMode::VanVleck, s, t, ds, dt)
                    .expect("van Vleck evaluation is infallible")
                    .smooth;
                e.view_mut((row, col), (d, d)).copy_from(&g);
            }
        }
        e
    }

    /// `D_τ` applied to `G(ς, −)`, transposed so that columns are sources.
    pub fn operator_residual(&self, sigma: f64, tau: f64) -> Result<DMatrix<f64>, GreenError> {
        let h = 1e-3 * self.traj.duration();
        if (sigma - tau).abs() <= 2.5 * h {
            return Err(GreenError::NearDiagonal((sigma - tau).abs()));
        }
        self.check_time(tau - 2.0 * h)?;
        self.check_time(tau + 2.0 * h)?;
        let s = self.slice(sigma)?;
        // flux(τ) = a ġ + L_vq g with g(τ) = G(ς, τ)ᵀ
        let flux = |x: f64| -> Result<DMatrix<f64>, GreenError> {
            let t = self.slice(x)?;
            let g = self.eval_slices(self.mode, &s, &t, 0, 0)?.smooth.transpose();
            let gd = self.eval_slices(self.mode, &s, &t, 0, 1)?.smooth.transpose();
            Ok(&t.a * gd + &t.lvq * g)
        };
        let d1 = (flux(tau + h)? - flux(tau - h)?) / (2.0 * h);
        let d2 = (flux(tau + 2.0 * h)? - flux(tau - 2.0 * h)?) / (4.0 * h);
        let dflux = (d1 * 4.0 - d2) / 3.0;
        let t = self.slice(tau)?;
        let g = self.eval_slices(self.mode, &s, &t, 0, 0)?.smooth.transpose();
        let gd = self.eval_slices(self.mode, &s, &t, 0, 1)?.smooth.transpose();
        Ok(-dflux + t.lvq.transpose() * gd + self.lqq(&t)? * g)
    }

    fn lqq(&self, t: &Slice) -> Result<DMatrix<f64>, GreenError> {
        let d = self.d();
        let p = self.traj.problem.point(t.t, &t.v, &t.q);
        let jet = self.traj.problem.lagrangian.jet(&p, 2).map_err(ClassicalError::from)?;
        Ok(DMatrix::from_fn(d, d, |i, j| jet.partial(&[1 + d + i, 1 + d + j])))
    }

    /// CSV table of `∂ς^{dς}∂τ^{dτ}G` on an `n × n` grid.
    pub fn grid_csv(&self, n: usize, d_sigma: u8, d_tau: u8) -> Result<String, GreenError> {
        let d = self.d();
        let n = n.max(2);
        let times: Vec<f64> =
            (0..n).map(|i| self.traj.t0() + self.traj.duration() * i as f64 / (n - 1) as f64).collect();
        let slices = times.iter().map(|&t| self.slice(t)).collect::<Result<Vec<_>, _>>()?;
        let mut out = String::from("sigma,tau");
        for i in 0..d {
            for j in 0..d {
                out.push_str(&format!(",g{}{}", i + 1, j + 1));
            }
        }
        if d_sigma == 1 && d_tau == 1 {
            for i in 0..d {
                for j in 0..d {
                    out.push_str(&format!(",delta{}{}", i + 1, j + 1));
                }
            }
        }
        out.push('\n');
        for s in &slices {
            for t in &slices {
                let v = self.eval_slices(self.mode, s, t, d_sigma, d_tau)?;
                out.push_str(&format!("{},{}", s.t, t.t));
                for i in 0..d {
                    for j in 0..d {
                        out.push_str(&format!(",{}", v.smooth[(i, j)]));
                    }
                }
                if let Some(c) = &v.delta_coeff {
                    for i in 0..d {
                        for j in 0..d {
                            out.push_str(&format!(",{}", c[(i, j)]));
                        }
                    }
                }
                out.push('\n');
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::{solve_bvp, Problem};
    use crate::expr::parse;
    use std::collections::BTreeMap;

    fn rep(l: &str, d: usize, t1: f64, q0: Vec<f64>, q1: Vec<f64>) -> GreenRep {
        let e = parse(l, d, &BTreeMap::new()).unwrap();
        let tr = solve_bvp(&Problem::new(e, 0.0, t1, q0, q1, None).unwrap()).unwrap();
        GreenRep::build(&tr).unwrap()
    }

    #[test]
    fn free_particle_closed_form() {
        let t1 = 2.0;
        let g = rep("v^2/2", 1, t1, vec![0.0], vec![1.0]);
        assert!(g.max_discrepancy < 1e-12);
        for (s, t) in [(0.3f64, 1.1f64), (1.5, 0.2), (0.7, 0.7), (0.0, 1.0)] {
            let exact = s.min(t) * (t1 - s.max(t)) / t1;
            assert!((g.eval(s, t, 0, 0).unwrap().smooth[(0, 0)] - exact).abs() < 1e-12);
        }
        // jump of ∂τG across the diagonal is −a⁻¹
        let s = 0.8;
        let up = g.eval(s, s + 1e-9, 0, 1).unwrap().smooth[(0, 0)];
        let dn = g.eval(s, s - 1e-9, 0, 1).unwrap().smooth[(0, 0)];
        assert!((up - dn + 1.0).abs() < 1e-7);
        let mixed = g.eval(0.4, 0.9, 1, 1).unwrap();
        assert!((mixed.smooth[(0, 0)] + 1.0 / t1).abs() < 1e-12);
        assert_eq!(mixed.delta_coeff.unwrap()[(0, 0)], 1.0);
        assert!(g.eval(0.4, 0.9, 0, 0).unwrap().delta_coeff.is_none());
        assert!(g.operator_residual(0.3, 0.7).unwrap().amax() < 1e-6);
        assert!(matches!(g.eval(-0.5, 0.2, 0, 0), Err(GreenError::OutOfDomain(_))));
    }

    #[test]
    fn coupled_two_dimensional_structure() {
        let l = "(v1^2 + 0.4*v1*v2 + 1.5*v2^2)/2 * (1 + 0.1*q1^2) + 0.3*(q1*v2 - q2*v1) - 0.2*q1*q2 + 0.1*tau*q2^2";
        let g = rep(l, 2, 1.3, vec![0.2, -0.1], vec![0.5, 0.4]);
        assert!(g.max_discrepancy < 1e-9, "{}", g.max_discrepancy);
        let times = [0.0, 0.17, 0.5, 0.81, 1.3];
        for &s in &times {
            for &t in &times {
                let a = g.eval(s, t, 0, 0).unwrap().smooth;
                let b = g.eval(t, s, 0, 0).unwrap().smooth.transpose();
                assert!((&a - &b).amax() < 1e-9);
                if t == 0.0 || t == 1.3 {
                    assert!(a.amax() < 1e-10);
                }
                for (ds, dt) in [(1, 0), (0, 1), (1, 1)] {
                    if s == t {
                        continue;
                    }
                    let vv = g.eval_slices(GreenMode::VanVleck, &g.slice(s).unwrap(), &g.slice(t).unwrap(), ds, dt);
                    let vp = g.eval_slices(
                        GreenMode::VariationOfParameters,
                        &g.slice(s).unwrap(),
                        &g.slice(t).unwrap(),
                        ds,
                        dt,
                    );
                    assert!((vv.unwrap().smooth - vp.unwrap().smooth).amax() < 1e-8);
                }
            }
        }
        for (s, t) in [(0.3, 0.9), (1.0, 0.2)] {
            assert!(g.operator_residual(s, t).unwrap().amax() < 1e-6);
        }
        // jump: a(ς)·(∂τG(ς,ς⁺) − ∂τG(ς,ς⁻))ᵀ = −I
        let s = 0.6;
        let sl = g.slice(s).unwrap();
        let up = g.eval(s, s + 1e-9, 0, 1).unwrap().smooth;
        let dn = g.eval(s, s - 1e-9, 0, 1).unwrap().smooth;
        let jump = &sl.a * (up - dn).transpose();
        assert!((jump + DMatrix::identity(2, 2)).amax() < 1e-6);
    }

    #[test]
    fn exponential_metric_closed_form() {
        let e = std::f64::consts::E;
        let g = rep("v^2/(2*q^2)", 1, 1.0, vec![1.0], vec![e]);
        for (s, t) in [(0.2f64, 0.6f64), (0.9, 0.3), (0.5, 0.5)] {
            let exact = s.exp() * t.exp() * (0.5 * (s + t) - s * t - 0.5 * (t - s).abs());
            assert!((g.eval(s, t, 0, 0).unwrap().smooth[(0, 0)] - exact).abs() < 1e-9);
            // direct differentiation: ℓ²G + ℓγγ(1 − (ς+τ)/T) + γγ(−1/T + δ), ℓ = T = 1
            let m = g.eval(s, t, 1, 1).unwrap();
            if s != t {
                let want = exact + s.exp() * t.exp() * (1.0 - s - t) - s.exp() * t.exp();
                assert!((m.smooth[(0, 0)] - want).abs() < 1e-8);
            }
            assert!((m.delta_coeff.unwrap()[(0, 0)] - (2.0 * t).exp()).abs() < 1e-9);
        }
        assert!(g.operator_residual(0.25, 0.75).unwrap().amax() < 1e-6);
    }

    #[test]
    fn csv_shape() {
        let g = rep("v^2/2", 1, 1.0, vec![0.0], vec![1.0]);
        let csv = g.grid_csv(3, 1, 1).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sigma,tau,g11,delta11");
        assert_eq!(lines.len(), 10);
    }
}

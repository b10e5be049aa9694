//! Run configuration and the verification drivers behind the `spi` CLI.
//!
//! Config files are TOML:
//!
//! ```toml
//! [problem]
//! dimension = 1
//! lagrangian = "v^2/2 - 0.1*q^4"
//! t0 = 0.0
//! t1 = 1.0
//! q0 = [0.3]
//! q1 = [0.7]
//!
//! [compute]
//! loop_order = 1
//! quad_order = 32
//!
//! [fubini]
//! split_time = 0.4
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amplitude::{
    assemble, divergence_report, AmplitudeError, CoincidenceRule, DeltaPoly, OrderDivergence, PropagatorResult,
    QuadConfig,
};
use crate::classical::{s_gradients, s_hessian, solve_bvp, van_vleck, ClassicalError, Problem, Trajectory};
use crate::expr::{parse, parse_in_scope, BinOp, ExprError, Expression, Node, Scope};
use crate::graphs::{enumerate, GraphError};
use crate::green::{GreenError, GreenRep};
use crate::stphase::{
    formal_integral, numeric_oracle, sorted_indices, Region, SignConvention, StPhaseError, SymTensor,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("expr: {0}")]
    Expr(#[from] ExprError),
    #[error("classical: {0}")]
    Classical(#[from] ClassicalError),
    #[error("green: {0}")]
    Green(#[from] GreenError),
    #[error("amplitude: {0}")]
    Amplitude(#[from] AmplitudeError),
    #[error("stphase: {0}")]
    StPhase(#[from] StPhaseError),
    #[error("graphs: {0}")]
    Graph(#[from] GraphError),
}

impl HarnessError {
    /// CLI exit status: 2 for usage and configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub dimension: usize,
    pub lagrangian: String,
    pub t0: f64,
    pub t1: f64,
    pub q0: Vec<f64>,
    pub q1: Vec<f64>,
    #[serde(default)]
    pub v0_guess: Option<Vec<f64>>,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComputeSection {
    pub loop_order: usize,
    pub quad_order: usize,
    pub coincidence: CoincidenceRule,
    /// Points per axis for `green`.
    pub grid: usize,
    /// Derivative orders `(∂ς, ∂τ)` for `green`.
    pub green_derivatives: [u8; 2],
    /// Finite-difference steps in `q`, Richardson-combined.
    pub fd_steps: [f64; 2],
}

impl Default for ComputeSection {
    fn default() -> Self {
        ComputeSection {
            loop_order: 1,
            quad_order: 32,
            coincidence: CoincidenceRule::default(),
            grid: 50,
            green_derivatives: [0, 0],
            fd_steps: [1e-2, 5e-3],
        }
    }
}

fn default_fubini_tol() -> f64 {
    1e-3
}

fn default_prefactor_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FubiniSection {
    pub split_time: f64,
    #[serde(default = "default_fubini_tol")]
    pub tolerance: f64,
    #[serde(default = "default_prefactor_tol")]
    pub prefactor_tolerance: f64,
}

fn default_coords_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordsSection {
    /// `q = f(q̃)`, one expression per component in `q1..qd` (or `q`).
    pub map: Vec<String>,
    #[serde(default = "default_prefactor_tol")]
    pub classical_tolerance: f64,
    #[serde(default = "default_coords_tol")]
    pub tolerance: f64,
}

fn default_hbars() -> Vec<f64> {
    vec![0.2, 0.1, 0.05]
}

fn default_oracle_orders() -> Vec<usize> {
    vec![1, 2]
}

fn default_half_width() -> f64 {
    8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StPhaseSection {
    /// `A(x)` in `x1..xn` (or `x`).
    pub action: String,
    #[serde(default = "one")]
    pub dimension: usize,
    #[serde(default = "default_hbars")]
    pub hbar: Vec<f64>,
    #[serde(default = "default_oracle_orders")]
    pub orders: Vec<usize>,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
}

fn one() -> usize {
    1
}

fn default_div_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergencesSection {
    /// Config files, relative to this one.
    #[serde(default)]
    pub configs: Vec<String>,
    #[serde(default = "default_div_tol")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Option<ProblemSection>,
    #[serde(default)]
    pub compute: ComputeSection,
    pub fubini: Option<FubiniSection>,
    pub coords: Option<CoordsSection>,
    pub stphase: Option<StPhaseSection>,
    pub divergences: Option<DivergencesSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Static checks; nothing is solved here.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if let Some(p) = &self.problem {
            if p.dimension == 0 {
                return bad("problem.dimension must be at least 1".into());
            }
            if p.q0.len() != p.dimension || p.q1.len() != p.dimension {
                return bad(format!("problem.q0 and problem.q1 must have {} entries", p.dimension));
            }
            if p.v0_guess.as_ref().is_some_and(|v| v.len() != p.dimension) {
                return bad(format!("problem.v0_guess must have {} entries", p.dimension));
            }
            if !(p.t0 < p.t1) {
                return bad(format!("problem.t0 < problem.t1 required, got {} and {}", p.t0, p.t1));
            }
            parse(&p.lagrangian, p.dimension, &p.parameters)
                .map_err(|e| HarnessError::Config(format!("problem.lagrangian: {e}")))?;
        }
        let c = &self.compute;
        if c.quad_order == 0 {
            return bad("compute.quad_order must be positive".into());
        }
        if c.loop_order > crate::graphs::MAX_MINUS_CHI {
            return bad(format!("compute.loop_order must be at most {}", crate::graphs::MAX_MINUS_CHI));
        }
        if !(c.fd_steps[0] > 0.0 && c.fd_steps[1] > 0.0 && c.fd_steps[0] != c.fd_steps[1]) {
            return bad("compute.fd_steps must be two distinct positive steps".into());
        }
        if let Some(f) = &self.fubini {
            let p = self.problem.as_ref().ok_or_else(|| HarnessError::Config("[fubini] needs [problem]".into()))?;
            if !(p.t0 < f.split_time && f.split_time < p.t1) {
                return bad(format!("fubini.split_time must lie in ({}, {})", p.t0, p.t1));
            }
        }
        if let Some(m) = &self.coords {
            let p = self.problem.as_ref().ok_or_else(|| HarnessError::Config("[coords] needs [problem]".into()))?;
            if m.map.len() != p.dimension {
                return bad(format!("coords.map must have {} components", p.dimension));
            }
            parse_map(&m.map, p.dimension, &p.parameters)
                .map_err(|e| HarnessError::Config(format!("coords.map: {e}")))?;
        }
        if let Some(s) = &self.stphase {
            if s.dimension == 0 || s.hbar.is_empty() || s.hbar.iter().any(|&h| h <= 0.0) {
                return bad("stphase needs dimension ≥ 1 and positive hbar values".into());
            }
            if s.center.as_ref().is_some_and(|c| c.len() != s.dimension) {
                return bad(format!("stphase.center must have {} entries", s.dimension));
            }
            parse_in_scope(&s.action, Arc::new(Scope::coordinates("x", s.dimension)), &s.parameters)
                .map_err(|e| HarnessError::Config(format!("stphase.action: {e}")))?;
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<Problem> {
        let p = self.problem.as_ref().ok_or_else(|| HarnessError::Config("missing section [problem]".into()))?;
        let l = parse(&p.lagrangian, p.dimension, &p.parameters)?;
        Ok(Problem::new(l, p.t0, p.t1, p.q0.clone(), p.q1.clone(), p.v0_guess.clone())?)
    }

    pub fn quad(&self) -> QuadConfig {
        QuadConfig { order: self.compute.quad_order, coincidence: self.compute.coincidence }
    }
}

fn parse_map(map: &[String], d: usize, params: &BTreeMap<String, f64>) -> std::result::Result<Vec<Expression>, String> {
    map.iter()
        .map(|s| {
            let e = parse(s, d, params).map_err(|e| e.to_string())?;
            let mut vars = Vec::new();
            collect_vars(&e.root, &mut vars);
            if vars.iter().any(|&v| v <= d) {
                return Err(format!("`{s}` may depend on positions only"));
            }
            Ok(e)
        })
        .collect()
}

fn collect_vars(n: &Node, out: &mut Vec<usize>) {
    match n {
        Node::Num(_) | Node::Param(..) => {}
        Node::Var(i) => out.push(*i),
        Node::Neg(a) | Node::Call(_, a) => collect_vars(a, out),
        Node::Bin(_, a, b) => {
            collect_vars(a, out);
            collect_vars(b, out);
        }
    }
}

/// One scalar comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarRow {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_residual: f64,
    pub rel_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ScalarRow {
    /// Passes when the relative residual is within `tolerance`.
    pub fn relative(name: &str, lhs: f64, rhs: f64, tolerance: f64) -> ScalarRow {
        let abs = (lhs - rhs).abs();
        let rel = relative(abs, lhs.abs().max(rhs.abs()));
        ScalarRow { name: name.into(), lhs, rhs, abs_residual: abs, rel_residual: rel, tolerance, pass: rel <= tolerance }
    }

    pub fn exact(name: &str, lhs: usize, rhs: usize) -> ScalarRow {
        let abs = (lhs as f64 - rhs as f64).abs();
        ScalarRow {
            name: name.into(),
            lhs: lhs as f64,
            rhs: rhs as f64,
            abs_residual: abs,
            rel_residual: relative(abs, lhs.max(rhs) as f64),
            tolerance: 0.0,
            pass: lhs == rhs,
        }
    }
}

fn relative(abs: f64, scale: f64) -> f64 {
    if abs == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        abs / scale
    }
}

/// Series comparison at one loop order. Pass/fail uses the `D0`-free parts;
/// the divergent parts are reported alongside.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub order: usize,
    pub lhs: DeltaPoly,
    pub rhs: DeltaPoly,
    pub abs_residual: f64,
    pub rel_residual: f64,
    pub divergent_abs_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn new(order: usize, lhs: DeltaPoly, rhs: DeltaPoly, tolerance: f64) -> CheckRow {
        let (a, b) = (lhs.coeff(0), rhs.coeff(0));
        let abs = (a - b).abs();
        let rel = relative(abs, a.abs().max(b.abs()));
        let divergent_abs_residual = (1..=lhs.degree().max(rhs.degree()))
            .map(|k| (lhs.coeff(k) - rhs.coeff(k)).abs())
            .fold(0.0, f64::max);
        CheckRow {
            order,
            lhs,
            rhs,
            abs_residual: abs,
            rel_residual: rel,
            divergent_abs_residual,
            tolerance,
            pass: rel <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub version: String,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub scalars: Vec<ScalarRow>,
    pub rows: Vec<CheckRow>,
    pub pass: bool,
    pub provenance: Provenance,
}

impl CheckReport {
    fn new(check: &str, scalars: Vec<ScalarRow>, rows: Vec<CheckRow>, cfg: &RunConfig) -> CheckReport {
        let pass = scalars.iter().all(|s| s.pass) && rows.iter().all(|r| r.pass);
        CheckReport {
            check: check.into(),
            scalars,
            rows,
            pass,
            provenance: Provenance { version: env!("CARGO_PKG_VERSION").into(), config: cfg.to_toml() },
        }
    }

    pub fn scalar(&self, name: &str) -> Option<&ScalarRow> {
        self.scalars.iter().find(|s| s.name == name)
    }

    pub fn row(&self, order: usize) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.order == order)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Solve, build the Green's function and assemble through `max_order`.
pub fn propagate(problem: &Problem, max_order: usize, quad: &QuadConfig) -> Result<PropagatorResult> {
    let traj = solve_bvp(problem)?;
    let g = GreenRep::build(&traj)?;
    Ok(assemble(&g, max_order, quad)?)
}

fn require_finite(result: &PropagatorResult, tol: f64, what: &str) -> Result<()> {
    for r in divergence_report(result, tol) {
        if !r.divergence_free {
            return Err(HarnessError::Precondition(format!(
                "{what}: order {} has uncancelled δ(0) terms; the composition law assumes no ultraviolet divergences",
                r.order
            )));
        }
    }
    Ok(())
}

/// Central-difference partials with Richardson extrapolation over two steps,
/// memoizing function values by grid offset.
struct Fd<'a> {
    f: Box<dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a>,
    c: Vec<f64>,
    steps: [f64; 2],
    cache: HashMap<(u64, Vec<i32>), Vec<f64>>,
}

fn stencil(k: usize) -> &'static [(i32, f64)] {
    match k {
        0 => &[(0, 1.0)],
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        4 => &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
        _ => panic!("no stencil for order {k}"),
    }
}

impl<'a> Fd<'a> {
    fn new(f: impl FnMut(&[f64]) -> Result<Vec<f64>> + 'a, c: &[f64], steps: [f64; 2]) -> Fd<'a> {
        Fd { f: Box::new(f), c: c.to_vec(), steps, cache: HashMap::new() }
    }

    fn value(&mut self, h: f64, offset: Vec<i32>) -> Result<Vec<f64>> {
        let offset = if offset.iter().all(|&o| o == 0) { vec![0; offset.len()] } else { offset };
        let key = (if offset.iter().all(|&o| o == 0) { 0 } else { h.to_bits() }, offset);
        if let Some(v) = self.cache.get(&key) {
            return Ok(v.clone());
        }
        let x: Vec<f64> = self.c.iter().zip(&key.1).map(|(c, &o)| c + h * o as f64).collect();
        let v = (self.f)(&x)?;
        self.cache.insert(key, v.clone());
        Ok(v)
    }

    fn at_step(&mut self, axes: &[usize], h: f64) -> Result<Vec<f64>> {
        let d = self.c.len();
        let mut counts = vec![0usize; d];
        for &a in axes {
            counts[a] += 1;
        }
        let stencils: Vec<&[(i32, f64)]> = counts.iter().map(|&k| stencil(k)).collect();
        let mut idx = vec![0usize; d];
        let mut acc: Option<Vec<f64>> = None;
        loop {
            let offset: Vec<i32> = (0..d).map(|k| stencils[k][idx[k]].0).collect();
            let w: f64 = (0..d).map(|k| stencils[k][idx[k]].1).product();
            let v = self.value(h, offset)?;
            match &mut acc {
                Some(a) => a.iter_mut().zip(&v).for_each(|(s, x)| *s += w * x),
                None => acc = Some(v.iter().map(|x| w * x).collect()),
            }
            let mut k = 0;
            while k < d {
                idx[k] += 1;
                if idx[k] < stencils[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        let scale = h.powi(axes.len() as i32);
        Ok(acc.expect("nonempty stencil").into_iter().map(|x| x / scale).collect())
    }

    fn partial(&mut self, axes: &[usize]) -> Result<Vec<f64>> {
        let [h1, h2] = self.steps;
        let d1 = self.at_step(axes, h1)?;
        if axes.is_empty() {
            return Ok(d1);
        }
        let d2 = self.at_step(axes, h2)?;
        let (a, b) = (h1 * h1, h2 * h2);
        Ok(d1.iter().zip(&d2).map(|(x1, x2)| (a * x2 - b * x1) / (a - b)).collect())
    }
}

fn problem_like(base: &Problem, t0: f64, t1: f64, q0: &[f64], q1: &[f64], guess: &[f64]) -> Result<Problem> {
    let mut p = Problem::new(base.lagrangian.clone(), t0, t1, q0.to_vec(), q1.to_vec(), Some(guess.to_vec()))?;
    p.solver = base.solver.clone();
    Ok(p)
}

/// Hessian of `S₀ + S₁` in the intermediate point.
fn intermediate_hessian(a: &Trajectory, b: &Trajectory) -> Result<DMatrix<f64>> {
    let d = a.d();
    let ha = s_hessian(a)?;
    let hb = s_hessian(b)?;
    Ok(ha.view((d, d), (d, d)) + hb.view((0, 0), (d, d)))
}

/// Composition law: the path integral over `[t₀, t₁]` against the formal
/// integral over the intermediate point of the product of the two halves.
pub fn fubini_check(cfg: &RunConfig) -> Result<CheckReport> {
    let fsec = cfg.fubini.clone().ok_or_else(|| HarnessError::Config("missing section [fubini]".into()))?;
    let base = cfg.problem()?;
    let quad = cfg.quad();
    let m_max = cfg.compute.loop_order;
    let d = base.d;
    let ts = fsec.split_time;

    let full_traj = solve_bvp(&base)?;
    let full = assemble(&GreenRep::build(&full_traj)?, m_max, &quad)?;
    require_finite(&full, 1e-6, "full path")?;

    let (c, v_split) = full_traj.position_velocity(ts);
    let guess0 = full_traj.v0.clone();
    let solve_halves = |q: &[f64]| -> Result<(Trajectory, Trajectory)> {
        let a = solve_bvp(&problem_like(&base, base.t0, ts, &base.q0, q, &guess0)?)?;
        let b = solve_bvp(&problem_like(&base, ts, base.t1, q, &base.q1, &v_split)?)?;
        Ok((a, b))
    };
    let (h0, h1) = solve_halves(&c)?;
    let half0 = assemble(&GreenRep::build(&h0)?, m_max, &quad)?;
    let half1 = assemble(&GreenRep::build(&h1)?, m_max, &quad)?;
    require_finite(&half0, 1e-6, "first half")?;
    require_finite(&half1, 1e-6, "second half")?;

    // derivatives of the phase A = S₀ + S₁
    let a2 = intermediate_hessian(&h0, &h1)?;
    let (_, g0_end) = s_gradients(&h0);
    let (g1_start, _) = s_gradients(&h1);
    let grad = g0_end + g1_start;
    let max_rank = 2 * m_max + 2;
    let mut a_derivs = vec![
        SymTensor::scalar(h0.action + h1.action),
        SymTensor::from_fn(d, 1, |i| grad[i[0]]),
        SymTensor::from_matrix(&a2),
    ];
    {
        let mut fd = Fd::new(
            |q: &[f64]| {
                let (a, b) = solve_halves(q)?;
                Ok(intermediate_hessian(&a, &b)?.iter().copied().collect())
            },
            &c,
            cfg.compute.fd_steps,
        );
        for r in 3..=max_rank {
            let mut t = SymTensor::zeros(d, r);
            for idx in sorted_indices(d, r) {
                let v = fd.partial(&idx[2..])?[idx[0] + d * idx[1]];
                t.set(&idx, v);
            }
            a_derivs.push(t);
        }
    }
    let eta_c = a_derivs[2].signature();

    // B_k(q) = |det W₀ det W₁|^{1/2} Σ_{i+j=k} c_i⁽⁰⁾(q) c_j⁽¹⁾(q)
    let b_value = |q: &[f64], k: usize| -> Result<f64> {
        let (a, b) = solve_halves(q)?;
        let amp = (van_vleck(&a)?.abs_det * van_vleck(&b)?.abs_det).sqrt();
        if k == 0 {
            return Ok(amp);
        }
        let ra = assemble(&GreenRep::build(&a)?, k, &quad)?;
        let rb = assemble(&GreenRep::build(&b)?, k, &quad)?;
        let p: f64 = (0..=k).map(|i| ra.order(i).coeff(0) * rb.order(k - i).coeff(0)).sum();
        Ok(amp * p)
    };
    let mut r = vec![0.0; m_max + 1];
    for k in 0..=m_max {
        let ranks = 2 * (m_max - k);
        let mut fd = Fd::new(|q: &[f64]| Ok(vec![b_value(q, k)?]), &c, cfg.compute.fd_steps);
        let mut b_derivs = Vec::with_capacity(ranks + 1);
        for rank in 0..=ranks {
            let mut t = SymTensor::zeros(d, rank);
            for idx in sorted_indices(d, rank) {
                t.set(&idx, fd.partial(&idx)?[0]);
            }
            b_derivs.push(t);
        }
        let top = m_max - k;
        if top == 0 {
            // only the bare marked vertex, at order −1
            r[k] += b_derivs[0].get(&[]);
            continue;
        }
        let exp = formal_integral(&a_derivs, Some(&b_derivs), eta_c, top - 1)?;
        for n in k..=m_max {
            let m = n as i64 - k as i64 - 1;
            r[n] += exp.series.get(&m).copied().unwrap_or(0.0);
        }
    }

    let w0 = van_vleck(&h0)?.abs_det;
    let w1 = van_vleck(&h1)?.abs_det;
    let det_a2 = a2.determinant().abs();
    let scalars = vec![
        ScalarRow::relative("action", full.s, half0.s + half1.s, fsec.prefactor_tolerance),
        ScalarRow::relative("abs_det_W", full.log_abs_det_w.exp(), w0 * w1 / det_a2, fsec.prefactor_tolerance),
        ScalarRow::exact("morse_index", full.morse_index, half0.morse_index + half1.morse_index + eta_c),
    ];
    let rows = (0..=m_max)
        .map(|n| CheckRow::new(n, full.order(n), DeltaPoly::constant(r[n] / r[0]), fsec.tolerance))
        .collect();
    Ok(CheckReport::new("fubini", scalars, rows, cfg))
}

/// Map data at one point: `f(q̃)` and `Df(q̃)`.
fn map_jet(map: &[Expression], d: usize, q: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut point = vec![0.0; 1 + 2 * d];
    point[1 + d..].copy_from_slice(q);
    let vars: Vec<usize> = (1 + d..=2 * d).collect();
    let mut f = DVector::zeros(d);
    let mut df = DMatrix::zeros(d, d);
    for (i, e) in map.iter().enumerate() {
        let jet = e.jet_in(&point, &vars, 1)?;
        f[i] = jet.value();
        for j in 0..d {
            df[(i, j)] = jet.partial_local(&[j]);
        }
    }
    Ok((f, df))
}

fn invert_map(map: &[Expression], d: usize, target: &[f64]) -> Result<Vec<f64>> {
    let mut x = DVector::from_column_slice(target);
    let y = DVector::from_column_slice(target);
    for _ in 0..100 {
        let (f, df) = map_jet(map, d, x.as_slice())?;
        let r = &f - &y;
        if r.amax() <= 1e-15 * (1.0 + y.amax()) {
            return Ok(x.as_slice().to_vec());
        }
        let step = df
            .lu()
            .solve(&r)
            .ok_or_else(|| HarnessError::Precondition("coordinate map has a singular Jacobian".into()))?;
        x -= step;
    }
    let (f, _) = map_jet(map, d, x.as_slice())?;
    if (&f - &y).amax() <= 1e-12 * (1.0 + y.amax()) {
        Ok(x.as_slice().to_vec())
    } else {
        Err(HarnessError::Precondition(format!("could not invert the coordinate map at {target:?}")))
    }
}

/// `L̃(τ, ṽ, q̃) = L(τ, Df(q̃)ṽ, f(q̃))`.
pub fn pullback(l: &Expression, map: &[Expression]) -> Expression {
    let d = map.len();
    let mut subs = Vec::with_capacity(1 + 2 * d);
    subs.push(Node::Var(0));
    for f in map {
        let mut terms = Vec::new();
        for j in 0..d {
            let dij = f.diff(1 + d + j).root;
            match dij {
                Node::Num(x) if x == 0.0 => {}
                Node::Num(x) if x == 1.0 => terms.push(Node::Var(1 + j)),
                other => terms.push(Node::bin(BinOp::Mul, other, Node::Var(1 + j))),
            }
        }
        let sum = terms.into_iter().reduce(|a, b| Node::bin(BinOp::Add, a, b)).unwrap_or(Node::Num(0.0));
        subs.push(sum);
    }
    for f in map {
        subs.push(f.root.clone());
    }
    l.substitute(&subs, l.scope.clone())
}

/// Coordinate invariance under a volume-preserving map `q = f(q̃)`.
pub fn coordinate_check(cfg: &RunConfig) -> Result<CheckReport> {
    let sec = cfg.coords.clone().ok_or_else(|| HarnessError::Config("missing section [coords]".into()))?;
    let p = cfg.problem.as_ref().ok_or_else(|| HarnessError::Config("missing section [problem]".into()))?;
    let d = p.dimension;
    let map = parse_map(&sec.map, d, &p.parameters).map_err(HarnessError::Config)?;
    let base = cfg.problem()?;
    let quad = cfg.quad();

    let check_det = |q: &[f64]| -> Result<()> {
        let (_, df) = map_jet(&map, d, q)?;
        let det = df.determinant();
        if (det.abs() - 1.0).abs() > 1e-10 {
            return Err(HarnessError::Precondition(format!(
                "coordinate map is not volume-preserving: det Df = {det} at {q:?}"
            )));
        }
        Ok(())
    };
    let q0t = invert_map(&map, d, &base.q0)?;
    let q1t = invert_map(&map, d, &base.q1)?;
    check_det(&q0t)?;
    check_det(&q1t)?;
    let (_, df0) = map_jet(&map, d, &q0t)?;
    let guess = df0
        .lu()
        .solve(&DVector::from_column_slice(&base.v0_guess))
        .ok_or_else(|| HarnessError::Precondition("coordinate map has a singular Jacobian".into()))?;
    let mut moved = problem_like(&base, base.t0, base.t1, &q0t, &q1t, guess.as_slice())?;
    moved.lagrangian = pullback(&base.lagrangian, &map);

    let m = cfg.compute.loop_order;
    let lhs = propagate(&base, m, &quad)?;
    let traj = solve_bvp(&moved)?;
    for t in traj.grid() {
        let (q, _) = traj.position_velocity(t);
        check_det(&q)?;
    }
    let rhs = assemble(&GreenRep::build(&traj)?, m, &quad)?;
    let tol0 = sec.classical_tolerance;
    let scalars = vec![
        ScalarRow::relative("action", lhs.s, rhs.s, tol0),
        ScalarRow::relative("abs_det_W", lhs.log_abs_det_w.exp(), rhs.log_abs_det_w.exp(), tol0),
        ScalarRow::exact("morse_index", lhs.morse_index, rhs.morse_index),
    ];
    let rows = (0..=m)
        .map(|n| CheckRow::new(n, lhs.order(n), rhs.order(n), if n == 0 { tol0 } else { sec.tolerance }))
        .collect();
    Ok(CheckReport::new("coords", scalars, rows, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceEntry {
    pub config: String,
    pub orders: Vec<OrderDivergence>,
}

/// `divergence_report` for each listed config (or this one), in parallel.
pub fn divergences(cfg: &RunConfig, base_dir: &Path) -> Result<(Vec<DivergenceEntry>, bool)> {
    let sec = cfg.divergences.clone().unwrap_or(DivergencesSection { configs: Vec::new(), tolerance: 1e-6 });
    let jobs: Vec<(String, RunConfig)> = if sec.configs.is_empty() {
        vec![("<self>".to_string(), cfg.clone())]
    } else {
        sec.configs
            .iter()
            .map(|c| Ok((c.clone(), RunConfig::load(&base_dir.join(c))?)))
            .collect::<Result<_>>()?
    };
    let entries: Vec<DivergenceEntry> = jobs
        .par_iter()
        .map(|(name, c)| {
            let res = propagate(&c.problem()?, c.compute.loop_order, &c.quad())?;
            Ok(DivergenceEntry { config: name.clone(), orders: divergence_report(&res, sec.tolerance) })
        })
        .collect::<Result<_>>()?;
    let ok = entries.iter().all(|e| e.orders.iter().all(|o| o.divergence_free));
    Ok((entries, ok))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub hbar: f64,
    pub order: usize,
    pub series: [f64; 2],
    pub oracle: [f64; 2],
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSweep {
    pub rows: Vec<OracleRow>,
    /// Per truncation order: `log(e_i/e_{i+1}) / log(ħ_i/ħ_{i+1})` for
    /// consecutive `ħ`.
    pub observed_orders: BTreeMap<usize, Vec<f64>>,
    pub pass: bool,
}

impl OracleSweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("hbar,order,series_re,series_im,oracle_re,oracle_im,rel_error\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e},{:e}\n",
                r.hbar, r.order, r.series[0], r.series[1], r.oracle[0], r.oracle[1], r.rel_error
            ));
        }
        s
    }
}

/// Truncated formal integral against the quadrature oracle over a sweep of
/// `ħ`. Passes when every observed order is at least `M + 1`.
pub fn stphase_sweep(sec: &StPhaseSection) -> Result<OracleSweep> {
    let n = sec.dimension;
    let e = parse_in_scope(&sec.action, Arc::new(Scope::coordinates("x", n)), &sec.parameters)?;
    let max_m = sec.orders.iter().copied().max().unwrap_or(0);
    let max_rank = 2 * max_m + 2;
    // critical point by Newton from the centre
    let mut x = sec.center.clone().unwrap_or_else(|| vec![0.0; n]);
    for _ in 0..100 {
        let jet = e.jet(&x, 2)?;
        let g = DVector::from_fn(n, |i, _| jet.partial_local(&[i]));
        if g.amax() < 1e-14 {
            break;
        }
        let h = DMatrix::from_fn(n, n, |i, j| jet.partial_local(&[i, j]));
        let step = h.lu().solve(&g).ok_or(StPhaseError::SingularHessian)?;
        x.iter_mut().zip(step.iter()).for_each(|(xi, s)| *xi -= s);
    }
    let jet = e.jet(&x, max_rank)?;
    let derivs = crate::stphase::derivatives_from_jet(&jet, max_rank);
    let eta = derivs[2].signature();
    let exp = formal_integral(&derivs, None, eta, max_m)?;
    let region = Region { center: x.clone(), half_width: vec![sec.half_width; n] };
    let action = |p: &[f64]| e.eval(p).unwrap_or(f64::NAN);
    let oracle: Vec<Complex64> =
        sec.hbar.par_iter().map(|&h| numeric_oracle(&action, None, &region, h)).collect::<std::result::Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut observed = BTreeMap::new();
    for &m in &sec.orders {
        let mut errs = Vec::new();
        for (&h, &i) in sec.hbar.iter().zip(&oracle) {
            let im = exp.evaluate(h, m as i64, SignConvention::MinusI);
            let err = (im / i - 1.0).norm();
            errs.push(err);
            rows.push(OracleRow { hbar: h, order: m, series: [im.re, im.im], oracle: [i.re, i.im], rel_error: err });
        }
        let orders: Vec<f64> = (1..errs.len())
            .map(|k| (errs[k - 1] / errs[k]).ln() / (sec.hbar[k - 1] / sec.hbar[k]).ln())
            .collect();
        observed.insert(m, orders);
    }
    let pass = observed.iter().all(|(&m, o)| o.iter().all(|&p| p >= (m + 1) as f64));
    Ok(OracleSweep { rows, observed_orders: observed, pass })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Diagrams,
    Propagate,
    Green,
    Fubini,
    Coords,
    Divergences,
    StphaseOracle,
}

/// A result document and whether the run's check (if any) passed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub document: String,
    pub passed: bool,
}

/// Dispatch one subcommand. `base_dir` resolves relative paths in the config.
pub fn run(cfg: &RunConfig, cmd: Subcommand, base_dir: &Path) -> Result<RunOutput> {
    let out = |document: String, passed: bool| Ok(RunOutput { document, passed });
    match cmd {
        Subcommand::Diagrams => {
            let mut s = String::new();
            for d in enumerate(cfg.compute.loop_order, 0)? {
                if d.vertex_count() > 0 {
                    s.push_str(&format!("{d}\n"));
                }
            }
            out(s, true)
        }
        Subcommand::Propagate => {
            let r = propagate(&cfg.problem()?, cfg.compute.loop_order, &cfg.quad())?;
            out(r.to_json() + "\n", true)
        }
        Subcommand::Green => {
            let traj = solve_bvp(&cfg.problem()?)?;
            let g = GreenRep::build(&traj)?;
            let [a, b] = cfg.compute.green_derivatives;
            out(g.grid_csv(cfg.compute.grid, a, b)?, true)
        }
        Subcommand::Fubini => {
            let r = fubini_check(cfg)?;
            out(r.to_json() + "\n", r.pass)
        }
        Subcommand::Coords => match coordinate_check(cfg) {
            Ok(r) => out(r.to_json() + "\n", r.pass),
            Err(HarnessError::Precondition(m)) => out(serde_json::json!({ "check": "coords", "pass": false, "error": m }).to_string() + "\n", false),
            Err(e) => Err(e),
        },
        Subcommand::Divergences => {
            let (entries, ok) = divergences(cfg, base_dir)?;
            out(serde_json::to_string_pretty(&entries).expect("report serializes") + "\n", ok)
        }
        Subcommand::StphaseOracle => {
            let sec = cfg.stphase.as_ref().ok_or_else(|| HarnessError::Config("missing section [stphase]".into()))?;
            let sweep = stphase_sweep(sec)?;
            out(sweep.to_csv(), sweep.pass)
        }
    }
}

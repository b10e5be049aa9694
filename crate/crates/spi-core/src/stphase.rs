//! Finite-dimensional stationary phase.
//!
//! [`formal_integral`] evaluates the diagrammatic expansion of
//! `∫ exp(−(iħ)⁻¹A(x)) dx` (optionally with a `(iħ)⁻¹B(x)` insertion) from the
//! derivative tensors of `A` and `B` at a nondegenerate critical point;
//! [`numeric_oracle`] computes the same oscillatory integral by quadrature.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::expr::Jet;
use crate::graphs::{self, Diagram, GraphError};
use crate::network::Plan;
use crate::quad::gauss_legendre;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum StPhaseError {
    #[error("gradient not zero at the critical point (|A'| = {0:e})")]
    GradientNotZero(f64),
    #[error("singular Hessian at the critical point")]
    SingularHessian,
    #[error("Hessian is not positive-definite")]
    NotPositiveDefinite,
    #[error("sign exponent {given} does not match the Hessian signature {expected}")]
    EtaMismatch { given: usize, expected: usize },
    #[error("derivative tensors up to rank {0} are required")]
    MissingDerivatives(usize),
    #[error("oscillatory quadrature did not converge (last change {0:e})")]
    NonConvergent(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Symmetric tensor stored once per sorted multi-index.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor {
    dim: usize,
    rank: usize,
    values: BTreeMap<Vec<usize>, f64>,
}

/// All sorted multi-indices `i1 ≤ … ≤ i_rank` over `0..dim`.
pub fn sorted_indices(dim: usize, rank: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(rank);
    fn rec(dim: usize, rank: usize, lo: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == rank {
            out.push(cur.clone());
            return;
        }
        for i in lo..dim {
            cur.push(i);
            rec(dim, rank, i, cur, out);
            cur.pop();
        }
    }
    rec(dim, rank, 0, &mut cur, &mut out);
    out
}

impl SymTensor {
    pub fn zeros(dim: usize, rank: usize) -> SymTensor {
        SymTensor::from_fn(dim, rank, |_| 0.0)
    }

    /// `f` is called once per sorted multi-index.
    pub fn from_fn(dim: usize, rank: usize, mut f: impl FnMut(&[usize]) -> f64) -> SymTensor {
        let values = sorted_indices(dim, rank).into_iter().map(|i| {
            let v = f(&i);
            (i, v)
        });
        SymTensor { dim, rank, values: values.collect() }
    }

    pub fn scalar(x: f64) -> SymTensor {
        SymTensor::from_fn(0, 0, |_| x)
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> SymTensor {
        SymTensor::from_fn(m.nrows(), 2, |i| 0.5 * (m[(i[0], i[1])] + m[(i[1], i[0])]))
    }

    /// Rank-`rank` partial derivatives from a jet (over its active variables).
    pub fn from_jet(jet: &Jet, rank: usize) -> SymTensor {
        SymTensor::from_fn(jet.vars().len(), rank, |i| jet.partial_local(i))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        let mut k = idx.to_vec();
        k.sort_unstable();
        self.values.get(&k).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let mut k = idx.to_vec();
        k.sort_unstable();
        self.values.insert(k, v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.values.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    pub fn scaled(&self, s: f64) -> SymTensor {
        let values = self.values.iter().map(|(k, v)| (k.clone(), v * s)).collect();
        SymTensor { dim: self.dim, rank: self.rank, values }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Row-major dense array of size `dim^rank`.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.dim.pow(self.rank as u32);
        let mut out = vec![0.0; n];
        let mut idx = vec![0usize; self.rank];
        for slot in out.iter_mut() {
            *slot = self.get(&idx);
            for k in (0..self.rank).rev() {
                idx[k] += 1;
                if idx[k] < self.dim {
                    break;
                }
                idx[k] = 0;
            }
        }
        out
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        assert_eq!(self.rank, 2, "matrix view needs rank 2");
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(&[i, j]))
    }

    pub fn determinant(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn inverse(&self) -> Option<DMatrix<f64>> {
        self.matrix().try_inverse()
    }

    /// Number of negative eigenvalues (rank 2).
    pub fn signature(&self) -> usize {
        let eig = SymmetricEigen::new(self.matrix());
        eig.eigenvalues.iter().filter(|&&l| l < 0.0).count()
    }
}

/// Derivative tensors of ranks `0..=max_rank` from a jet.
pub fn derivatives_from_jet(jet: &Jet, max_rank: usize) -> Vec<SymTensor> {
    (0..=max_rank).map(|r| SymTensor::from_jet(jet, r)).collect()
}

fn double_factorial(n: usize) -> f64 {
    (1..=n).rev().step_by(2).map(|k| k as f64).product()
}

/// `Σ_pairings b·(a⁻¹)^{⊗n/2}`.
pub fn gaussian_moment(b: &SymTensor, a: &SymTensor) -> Result<f64, StPhaseError> {
    if a.matrix().cholesky().is_none() {
        return Err(StPhaseError::NotPositiveDefinite);
    }
    let n = b.rank();
    if n % 2 == 1 {
        return Ok(0.0);
    }
    if n == 0 {
        return Ok(b.get(&[]));
    }
    let ainv = a.inverse().ok_or(StPhaseError::SingularHessian)?;
    // all pairings agree on a symmetric tensor: contract the pairing
    // (0,1)(2,3)… and multiply by the number of pairings
    let dim = b.dim();
    let mut labels = vec![(0..n).collect::<Vec<_>>()];
    let mut inputs = vec![b.dense()];
    for k in 0..n / 2 {
        labels.push(vec![2 * k, 2 * k + 1]);
        inputs.push(ainv.transpose().iter().copied().collect());
    }
    let v = Plan::new(dim, &labels).execute(inputs)[0];
    Ok(v * double_factorial(n - 1))
}

/// Sign factor convention for the Morse index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignConvention {
    /// `(−i)^η`
    #[default]
    MinusI,
    /// `(−1)^η`
    MinusOne,
}

impl SignConvention {
    pub fn factor(self, eta: usize) -> Complex64 {
        match self {
            SignConvention::MinusI => Complex64::new(0.0, -1.0).powu(eta as u32),
            SignConvention::MinusOne => Complex64::new(if eta % 2 == 0 { 1.0 } else { -1.0 }, 0.0),
        }
    }
}

/// Structured result of the formal integral.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticExpansion {
    /// Dimension `N` (the prefactor carries `(2πiħ)^{N/2}`).
    pub dim: usize,
    /// `A(c)`.
    pub phase: f64,
    pub eta: usize,
    pub abs_det_hessian: f64,
    /// Loop order `m = −χ` to coefficient of `(iħ)^m`. With a marked
    /// insertion the leading order is `m = −1`.
    pub series: BTreeMap<i64, f64>,
    pub marked: bool,
    /// Per-diagram values `ev(Γ)/|Aut Γ|`.
    pub diagrams: Vec<(Diagram, f64)>,
}

impl AsymptoticExpansion {
    /// Numeric value with the series truncated at order `max_order`.
    pub fn evaluate(&self, hbar: f64, max_order: i64, convention: SignConvention) -> Complex64 {
        let ih = Complex64::new(0.0, hbar);
        let pref = (2.0 * PI * ih).powf(self.dim as f64 / 2.0)
            * (Complex64::new(0.0, self.phase / hbar)).exp()
            * convention.factor(self.eta)
            / self.abs_det_hessian.sqrt();
        let sum: Complex64 = self
            .series
            .iter()
            .filter(|(&m, _)| m <= max_order)
            .map(|(&m, &c)| ih.powi(m as i32) * c)
            .sum();
        pref * sum
    }
}

/// Evaluate one diagram: unmarked vertices carry `−A^(deg)`, the marked
/// vertex carries `B^(deg)`, edges carry `G = (A^(2))⁻¹`.
pub fn evaluate_finite_diagram(
    d: &Diagram,
    a_derivs: &[SymTensor],
    b_derivs: Option<&[SymTensor]>,
    g: &DMatrix<f64>,
) -> Result<f64, StPhaseError> {
    let dim = g.nrows();
    let mut labels = Vec::new();
    let mut inputs = Vec::new();
    let mut legs: Vec<Vec<usize>> = vec![Vec::new(); d.vertex_count()];
    for (e, &(a, b)) in d.edges().iter().enumerate() {
        legs[a].push(2 * e);
        legs[b].push(2 * e + 1);
        labels.push(vec![2 * e, 2 * e + 1]);
        inputs.push(g.transpose().iter().copied().collect::<Vec<f64>>());
    }
    for (v, l) in legs.into_iter().enumerate() {
        let deg = l.len();
        let t = match d.marks()[v] {
            None => a_derivs
                .get(deg)
                .ok_or(StPhaseError::MissingDerivatives(deg))?
                .dense()
                .into_iter()
                .map(|x| -x)
                .collect(),
            Some(_) => b_derivs
                .and_then(|b| b.get(deg))
                .ok_or(StPhaseError::MissingDerivatives(deg))?
                .dense(),
        };
        labels.push(l);
        inputs.push(t);
    }
    if labels.is_empty() {
        return Ok(1.0);
    }
    Ok(Plan::new(dim, &labels).execute(inputs)[0])
}

/// Diagrammatic expansion through loop order `max_order` (inclusive).
///
/// `a_derivs[r]` is the rank-`r` derivative of `A` at `c` (rank 0 is `A(c)`);
/// likewise `b_derivs`. Needed ranks depend on the diagrams and are checked.
pub fn formal_integral(
    a_derivs: &[SymTensor],
    b_derivs: Option<&[SymTensor]>,
    eta: usize,
    max_order: usize,
) -> Result<AsymptoticExpansion, StPhaseError> {
    if a_derivs.len() < 3 {
        return Err(StPhaseError::MissingDerivatives(2));
    }
    let hess = &a_derivs[2];
    let dim = hess.dim();
    let grad = a_derivs[1].max_abs();
    if grad > 1e-9 * (1.0 + hess.max_abs()) {
        return Err(StPhaseError::GradientNotZero(grad));
    }
    let det = hess.determinant();
    if det.abs() < 1e-14 * hess.max_abs().powi(dim as i32).max(1e-300) {
        return Err(StPhaseError::SingularHessian);
    }
    let expected = hess.signature();
    if expected != eta {
        return Err(StPhaseError::EtaMismatch { given: eta, expected });
    }
    let g = hess.inverse().ok_or(StPhaseError::SingularHessian)?;
    let marks = usize::from(b_derivs.is_some());
    let mut series = BTreeMap::new();
    let mut diagrams = Vec::new();
    for d in graphs::enumerate(max_order, marks)? {
        let v = evaluate_finite_diagram(&d, a_derivs, b_derivs, &g)? / d.aut() as f64;
        *series.entry(d.minus_chi()).or_insert(0.0) += v;
        diagrams.push((d, v));
    }
    Ok(AsymptoticExpansion {
        dim,
        phase: a_derivs[0].get(&[]),
        eta,
        abs_det_hessian: det.abs(),
        series,
        marked: b_derivs.is_some(),
        diagrams,
    })
}

/// Axis-aligned box `center ± half_width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

// Smooth cutoff: an erfc step centred at |s| = 0.8, within 1e-16 of 1 on
// |s| ≤ 0.6 and of 0 at |s| = 1 (clamped exactly there). Its spectrum is
// Gaussian, so the cutoff adds no visible boundary term to the oscillatory
// integral.
fn bump(s: f64) -> f64 {
    let s = s.abs();
    if s <= 0.6 {
        return 1.0;
    }
    if s >= 1.0 {
        return 0.0;
    }
    0.5 * libm::erfc(30.0 * (s - 0.8))
}

/// `∫ (iħ)⁻¹B·exp(−(iħ)⁻¹A)·χ` over the region (or without `B`), by composite
/// tensor-product Gauss–Legendre with panel doubling.
pub fn numeric_oracle(
    a: &dyn Fn(&[f64]) -> f64,
    b: Option<&dyn Fn(&[f64]) -> f64>,
    region: &Region,
    hbar: f64,
) -> Result<Complex64, StPhaseError> {
    let n = region.center.len();
    let rule = gauss_legendre(16);
    let eval = |panels: usize| -> Complex64 {
        let pts_per_dim = panels * rule.0.len();
        let mut idx = vec![0usize; n];
        let mut x = vec![0.0; n];
        let mut total = Complex64::new(0.0, 0.0);
        let total_pts = pts_per_dim.pow(n as u32);
        for _ in 0..total_pts {
            let mut w = 1.0;
            let mut cut = 1.0;
            for k in 0..n {
                let (p, q) = (idx[k] / rule.0.len(), idx[k] % rule.0.len());
                let h = 2.0 * region.half_width[k] / panels as f64;
                let lo = region.center[k] - region.half_width[k] + p as f64 * h;
                x[k] = lo + 0.5 * h * (rule.0[q] + 1.0);
                w *= 0.5 * h * rule.1[q];
                cut *= bump((x[k] - region.center[k]) / region.half_width[k]);
            }
            if cut > 0.0 {
                let phase = Complex64::new(0.0, a(&x) / hbar).exp();
                let amp = match b {
                    Some(b) => b(&x) / Complex64::new(0.0, hbar),
                    None => Complex64::new(1.0, 0.0),
                };
                total += amp * phase * (w * cut);
            }
            for k in (0..n).rev() {
                idx[k] += 1;
                if idx[k] < pts_per_dim {
                    break;
                }
                idx[k] = 0;
            }
        }
        total
    };
    let max_points: usize = 1 << 26;
    let mut panels = 8;
    let mut prev = eval(panels);
    loop {
        panels *= 2;
        if (panels * 16).pow(n as u32) > max_points {
            return Err(StPhaseError::NonConvergent(f64::NAN));
        }
        let cur = eval(panels);
        let change = (cur - prev).norm();
        if change <= 1e-13 * cur.norm().max(1e-300) {
            return Ok(cur);
        }
        prev = cur;
    }
}

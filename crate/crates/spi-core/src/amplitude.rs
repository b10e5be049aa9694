//! Feynman-diagram evaluation along a classical path and assembly of the
//! formal path integral.
//!
//! A vertex of degree `n` at time `τ` carries `−∂ⁿL` in the `2d` variables
//! `(v, q)`; an edge carries the `2d × 2d` matrix of Green's function
//! derivatives `[[∂ς∂τG, ∂ςG], [∂τG, G]]`. The mixed block has a
//! `δ(ς − τ)·a⁻¹` part. Expanding every edge into its smooth and δ parts
//! gives one term per subset of edges; δ edges merge time variables, and a
//! δ that closes a cycle among already merged vertices becomes a factor of
//! the formal symbol `D0 = δ(0)`. What survives is integrated over the
//! order chambers of the remaining times.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{morse_index, solve_bvp, van_vleck, ClassicalError, MorseConfig, Problem};
use crate::graphs::{Diagram, GraphError};
use crate::green::{GreenError, GreenRep};
use crate::network::Plan;
use crate::quad::gauss_legendre;
use crate::stphase::SymTensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AmplitudeError {
    #[error(transparent)]
    Green(#[from] GreenError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("marked vertices cannot be evaluated along a path")]
    Marked,
    #[error("unsupported derivative order {0} (expected 3..=6)")]
    Order(usize),
}

/// Polynomial `c₀ + c₁·D0 + c₂·D0² + …` in the formal symbol `D0 = δ(0)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
#[serde(transparent)]
pub struct DeltaPoly {
    pub coeffs: Vec<f64>,
}

impl DeltaPoly {
    pub fn zero() -> DeltaPoly {
        DeltaPoly { coeffs: Vec::new() }
    }

    pub fn constant(x: f64) -> DeltaPoly {
        DeltaPoly { coeffs: vec![x] }
    }

    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs.get(k).copied().unwrap_or(0.0)
    }

    /// Highest stored power (structural, zeros included).
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn add_term(&mut self, k: usize, x: f64) {
        if self.coeffs.len() <= k {
            self.coeffs.resize(k + 1, 0.0);
        }
        self.coeffs[k] += x;
    }

    pub fn add(&self, other: &DeltaPoly) -> DeltaPoly {
        let mut out = self.clone();
        for (k, &c) in other.coeffs.iter().enumerate() {
            out.add_term(k, c);
        }
        out
    }

    pub fn scale(&self, s: f64) -> DeltaPoly {
        DeltaPoly { coeffs: self.coeffs.iter().map(|c| c * s).collect() }
    }

    pub fn mul(&self, other: &DeltaPoly) -> DeltaPoly {
        let mut out = DeltaPoly::zero();
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in other.coeffs.iter().enumerate() {
                out.add_term(i + j, a * b);
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// `Σ_{k≥1} |c_k|`.
    pub fn divergent_magnitude(&self) -> f64 {
        self.coeffs.iter().skip(1).map(|c| c.abs()).sum()
    }
}

/// How smooth edge factors joining vertices at coincident times are valued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoincidenceRule {
    /// Each factor independently takes the mean of its two one-sided limits.
    #[default]
    FactorAverage,
    /// The product is averaged over all relative orderings of the merged
    /// vertices.
    OrderingAverage,
    /// Each δ is taken as the derivative of the step that the smooth factors
    /// jump across: a product of step-dependent factors across one δ becomes
    /// `∫₀¹ F(u) du` in the step value `u`. For pairs joined only through
    /// other δ's the steps compose as for a Gaussian mollifier.
    Integrated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadConfig {
    /// Gauss–Legendre order per time variable and chamber.
    pub order: usize,
    pub coincidence: CoincidenceRule,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig { order: 32, coincidence: CoincidenceRule::FactorAverage }
    }
}

/// A diagram with optional external legs. Leg `k` is attached to vertex
/// `legs[k]` and carries the Jacobi-field matrix `[φ̇ᵃ; φᵃ]`, indexed by the
/// `2d` boundary coordinates `(q₀, q₁)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub vertex_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub legs: Vec<usize>,
}

impl Network {
    pub fn from_diagram(diagram: &Diagram) -> Result<Network, AmplitudeError> {
        if diagram.marked_count() > 0 {
            return Err(AmplitudeError::Marked);
        }
        Ok(Network { vertex_count: diagram.vertex_count(), edges: diagram.edges().to_vec(), legs: Vec::new() })
    }

    pub fn degree(&self, v: usize) -> usize {
        let e: usize = self.edges.iter().map(|&(a, b)| (a == v) as usize + (b == v) as usize).sum();
        e + self.legs.iter().filter(|&&l| l == v).count()
    }

    fn max_degree(&self) -> usize {
        (0..self.vertex_count).map(|v| self.degree(v)).max().unwrap_or(0)
    }
}

/// Per-time data: path slice, vertex tensors and leg/edge factors.
struct TimeData {
    /// `[φ̇ᵃ; φᵃ]` for `a = 0, 1`.
    psi: [DMatrix<f64>; 2],
    /// `Ψ₁ W⁻¹` and `Ψ₀ W⁻ᵀ`.
    left: [DMatrix<f64>; 2],
    /// `2d × 2d` leg matrix, row-major.
    legs: Vec<f64>,
    /// `a⁻¹` embedded in the vv block, row-major.
    delta: Vec<f64>,
    /// `−∂ⁿL`, dense row-major, indexed by rank.
    vertices: Vec<Arc<Vec<f64>>>,
}

/// Evaluates networks along one path, caching per-time data.
pub struct Evaluator<'a> {
    g: &'a GreenRep,
    cfg: QuadConfig,
    max_rank: usize,
    cache: Mutex<HashMap<u64, Arc<TimeData>>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(g: &'a GreenRep, cfg: QuadConfig, max_rank: usize) -> Evaluator<'a> {
        Evaluator { g, cfg, max_rank, cache: Mutex::new(HashMap::new()) }
    }

    fn dim(&self) -> usize {
        2 * self.g.d()
    }

    fn data(&self, t: f64) -> Result<Arc<TimeData>, AmplitudeError> {
        if let Some(x) = self.cache.lock().expect("cache poisoned").get(&t.to_bits()) {
            return Ok(x.clone());
        }
        let x = Arc::new(self.compute(t)?);
        self.cache.lock().expect("cache poisoned").insert(t.to_bits(), x.clone());
        Ok(x)
    }

    fn compute(&self, t: f64) -> Result<TimeData, AmplitudeError> {
        let d = self.g.d();
        let n = 2 * d;
        let slice = self.g.slice(t)?;
        let psi = [slice.legs(0), slice.legs(1)];
        let left = [&psi[1] * &self.g.w_inv, &psi[0] * self.g.w_inv.transpose()];
        let mut legs = vec![0.0; n * n];
        for x in 0..n {
            for b in 0..n {
                legs[x * n + b] = psi[b / d][(x, b % d)];
            }
        }
        let mut delta = vec![0.0; n * n];
        for i in 0..d {
            for j in 0..d {
                delta[i * n + j] = slice.a_inv[(i, j)];
            }
        }
        let traj = self.g.trajectory();
        let point = traj.problem.point(t, &slice.v, &slice.q);
        let vars: Vec<usize> = (1..=n).collect();
        let jet = traj.problem.lagrangian.jet_in(&point, &vars, self.max_rank).map_err(ClassicalError::from)?;
        let vertices = (0..=self.max_rank)
            .map(|r| {
                let mut out = vec![0.0; n.pow(r as u32)];
                let mut idx = vec![0usize; r];
                for slot in out.iter_mut() {
                    *slot = -jet.partial_local(&idx);
                    for k in (0..r).rev() {
                        idx[k] += 1;
                        if idx[k] < n {
                            break;
                        }
                        idx[k] = 0;
                    }
                }
                Arc::new(out)
            })
            .collect();
        Ok(TimeData { psi, left, legs, delta, vertices })
    }

    /// Smooth edge matrix `E(s, t)`, row-major, as `(1 − u)·E(s < t) + u·E(s > t)`.
    fn edge(&self, s: &TimeData, t: &TimeData, u: f64) -> Vec<f64> {
        let n = self.dim();
        let below = || &s.left[0] * t.psi[0].transpose();
        let above = || &s.left[1] * t.psi[1].transpose();
        let m = if u == 0.0 {
            below()
        } else if u == 1.0 {
            above()
        } else {
            below() * (1.0 - u) + above() * u
        };
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = m[(i, j)];
            }
        }
        out
    }

    /// Value of a network as a map from `D0` degree to a dense tensor over
    /// the legs (a scalar when there are none).
    pub fn evaluate(&self, net: &Network) -> Result<BTreeMap<usize, Vec<f64>>, AmplitudeError> {
        let n = self.dim();
        let v_count = net.vertex_count;
        let e_count = net.edges.len();
        let l_count = net.legs.len();
        assert!(net.max_degree() <= self.max_rank, "evaluator rank too small");
        let mut out = BTreeMap::new();
        if v_count == 0 {
            out.insert(0, vec![1.0]);
            return Ok(out);
        }
        // labels: half-edges 2e, 2e+1; leg half-edges 2E+k; outputs 2E+L+k
        let mut vertex_labels = vec![Vec::new(); v_count];
        for (e, &(a, b)) in net.edges.iter().enumerate() {
            vertex_labels[a].push(2 * e);
            vertex_labels[b].push(2 * e + 1);
        }
        for (k, &v) in net.legs.iter().enumerate() {
            vertex_labels[v].push(2 * e_count + k);
        }
        let mut labels = vertex_labels.clone();
        labels.extend((0..e_count).map(|e| vec![2 * e, 2 * e + 1]));
        labels.extend((0..l_count).map(|k| vec![2 * e_count + k, 2 * e_count + l_count + k]));
        let plan = Plan::new(n, &labels);
        let out_pos: Vec<usize> = (0..l_count)
            .map(|k| plan.output_labels().iter().position(|&x| x == 2 * e_count + l_count + k).unwrap())
            .collect();

        for mask in 0u64..(1u64 << e_count) {
            let mut uf: Vec<usize> = (0..v_count).collect();
            let mut d0 = 0usize;
            let mut tree = Vec::new();
            for (e, &(a, b)) in net.edges.iter().enumerate() {
                if mask >> e & 1 == 0 {
                    continue;
                }
                let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
                if ra == rb {
                    d0 += 1;
                } else {
                    uf[ra] = rb;
                    tree.push((a, b));
                }
            }
            let mut roots: Vec<usize> = Vec::new();
            let class_of: Vec<usize> = (0..v_count)
                .map(|v| {
                    let r = find(&mut uf, v);
                    match roots.iter().position(|&x| x == r) {
                        Some(i) => i,
                        None => {
                            roots.push(r);
                            roots.len() - 1
                        }
                    }
                })
                .collect();
            let c = roots.len();
            let members: Vec<Vec<usize>> =
                (0..c).map(|k| (0..v_count).filter(|&v| class_of[v] == k).collect()).collect();
            let crossing = net
                .edges
                .iter()
                .enumerate()
                .filter(|&(e, &(a, b))| mask >> e & 1 == 0 && a != b && class_of[a] == class_of[b])
                .count();
            let configs = coincidence_configs(self.cfg.coincidence, &members, &tree, crossing, v_count);
            let value = self.integrate(c, |times, ranks| {
                let td: Vec<Arc<TimeData>> =
                    (0..v_count).map(|v| self.data(times[class_of[v]])).collect::<Result<_, _>>()?;
                let mut acc = vec![0.0; n.pow(l_count as u32)];
                for (weight, uc) in &configs {
                    // weight of the s_a > s_b branch
                    let u = |a: usize, b: usize| match ranks[class_of[a]].cmp(&ranks[class_of[b]]) {
                        std::cmp::Ordering::Less => 0.0,
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => uc[a * v_count + b],
                    };
                    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(labels.len());
                    for v in 0..v_count {
                        inputs.push(td[v].vertices[vertex_labels[v].len()].as_ref().clone());
                    }
                    for (e, &(a, b)) in net.edges.iter().enumerate() {
                        if mask >> e & 1 == 1 {
                            inputs.push(td[a].delta.clone());
                        } else {
                            inputs.push(self.edge(&td[a], &td[b], u(a, b)));
                        }
                    }
                    for &v in &net.legs {
                        inputs.push(td[v].legs.clone());
                    }
                    let r = plan.execute(inputs);
                    for (slot, x) in acc.iter_mut().zip(permute_output(&r, &out_pos, n)) {
                        *slot += weight * x;
                    }
                }
                Ok(acc)
            })?;
            let entry = out.entry(d0).or_insert_with(|| vec![0.0; value.len()]);
            for (s, x) in entry.iter_mut().zip(value) {
                *s += x;
            }
        }
        Ok(out)
    }

    /// `∫` over `[t₀, t₁]^c`, split into the `c!` order chambers, each mapped
    /// to the unit cube by nested order statistics. `f` receives the times
    /// per class and each class's rank within the chamber.
    fn integrate(
        &self,
        c: usize,
        mut f: impl FnMut(&[f64], &[usize]) -> Result<Vec<f64>, AmplitudeError>,
    ) -> Result<Vec<f64>, AmplitudeError> {
        let traj = self.g.trajectory();
        let (t0, t1) = (traj.t0(), traj.t1());
        let rule = gauss_legendre(self.cfg.order);
        let mut total: Option<Vec<f64>> = None;
        for perm in all_permutations(c) {
            let mut ranks = vec![0usize; c];
            for (k, &cls) in perm.iter().enumerate() {
                ranks[cls] = k;
            }
            let mut times = vec![0.0; c];
            let mut idx = vec![0usize; c];
            loop {
                let mut lo = t0;
                let mut w = 1.0;
                for k in 0..c {
                    let h = 0.5 * (t1 - lo);
                    let x = lo + h * (1.0 + rule.0[idx[k]]);
                    w *= h * rule.1[idx[k]];
                    times[perm[k]] = x;
                    lo = x;
                }
                let v = f(&times, &ranks)?;
                match &mut total {
                    Some(tot) => tot.iter_mut().zip(&v).for_each(|(s, x)| *s += w * x),
                    None => total = Some(v.iter().map(|x| w * x).collect()),
                }
                let mut k = c;
                loop {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                    idx[k] += 1;
                    if idx[k] < rule.0.len() {
                        break;
                    }
                    idx[k] = 0;
                    if k == 0 {
                        k = usize::MAX;
                        break;
                    }
                }
                if k == usize::MAX || c == 0 {
                    break;
                }
            }
        }
        Ok(total.unwrap_or_else(|| vec![0.0]))
    }
}

fn find(p: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while p[r] != r {
        r = p[r];
    }
    r
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_quantile(u: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Weighted tables `u[a·V + b]` giving, for vertices merged into one class,
/// the weight of the `s_a > s_b` branch of a smooth edge between them.
/// `tree` lists the δ edges that did the merging; `crossing` counts smooth
/// edges between distinct vertices of a class.
fn coincidence_configs(
    rule: CoincidenceRule,
    members: &[Vec<usize>],
    tree: &[(usize, usize)],
    crossing: usize,
    v_count: usize,
) -> Vec<(f64, Vec<f64>)> {
    let half = vec![0.5; v_count * v_count];
    if crossing == 0 {
        return vec![(1.0, half)];
    }
    match rule {
        CoincidenceRule::FactorAverage => vec![(1.0, half)],
        CoincidenceRule::OrderingAverage => {
            let orders = intra_orders(members, v_count);
            let w = 1.0 / orders.len() as f64;
            orders
                .into_iter()
                .map(|o| {
                    let mut u = half.clone();
                    for a in 0..v_count {
                        for b in 0..v_count {
                            if a != b {
                                u[a * v_count + b] = if o[a] > o[b] { 1.0 } else { 0.0 };
                            }
                        }
                    }
                    (w, u)
                })
                .collect()
        }
        CoincidenceRule::Integrated => {
            // exact for the polynomial case (classes of two vertices)
            let pairs_only = members.iter().all(|m| m.len() <= 2);
            let nodes = if pairs_only { crossing / 2 + 1 } else { (crossing / 2 + 1).max(8) };
            let rule = gauss_legendre(nodes);
            let k = tree.len();
            let mut out = Vec::with_capacity(nodes.pow(k as u32));
            let mut idx = vec![0usize; k];
            loop {
                let mut w = 1.0;
                let mut z = Vec::with_capacity(k);
                for &i in &idx {
                    let u = 0.5 * (1.0 + rule.0[i]);
                    w *= 0.5 * rule.1[i];
                    z.push(normal_quantile(u));
                }
                // positions in mollifier widths; edge (a, b) has p_a − p_b = z
                let mut pos: Vec<Option<f64>> = vec![None; v_count];
                for m in members {
                    pos[m[0]] = Some(0.0);
                    let mut changed = true;
                    while changed {
                        changed = false;
                        for (e, &(a, b)) in tree.iter().enumerate() {
                            match (pos[a], pos[b]) {
                                (Some(pa), None) => {
                                    pos[b] = Some(pa - z[e]);
                                    changed = true;
                                }
                                (None, Some(pb)) => {
                                    pos[a] = Some(pb + z[e]);
                                    changed = true;
                                }
                                _ => {}
                            }
                        }
                    }
                }
                let mut u = half.clone();
                for m in members {
                    for &a in m {
                        for &b in m {
                            if a != b {
                                let (pa, pb) = (pos[a].expect("placed"), pos[b].expect("placed"));
                                u[a * v_count + b] = normal_cdf(pa - pb);
                            }
                        }
                    }
                }
                out.push((w, u));
                let mut j = 0;
                while j < k {
                    idx[j] += 1;
                    if idx[j] < nodes {
                        break;
                    }
                    idx[j] = 0;
                    j += 1;
                }
                if j == k {
                    break;
                }
            }
            out
        }
    }
}

/// Every combination of relative orders inside each class, as a per-vertex
/// position.
fn intra_orders(members: &[Vec<usize>], v_count: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0usize; v_count]];
    for m in members {
        let perms = all_permutations(m.len());
        let mut next = Vec::with_capacity(out.len() * perms.len());
        for base in &out {
            for p in &perms {
                let mut o = base.clone();
                for (i, &v) in m.iter().enumerate() {
                    o[v] = p[i];
                }
                next.push(o);
            }
        }
        out = next;
    }
    out
}

/// Reorder a contraction result whose output axes are at `pos[k]` into leg
/// order.
fn permute_output(r: &[f64], pos: &[usize], n: usize) -> Vec<f64> {
    let l = pos.len();
    if l <= 1 {
        return r.to_vec();
    }
    let mut out = vec![0.0; r.len()];
    let mut idx = vec![0usize; l];
    for slot in out.iter_mut() {
        let mut src_idx = vec![0usize; l];
        for k in 0..l {
            src_idx[pos[k]] = idx[k];
        }
        let off = src_idx.iter().fold(0, |acc, &x| acc * n + x);
        *slot = r[off];
        for k in (0..l).rev() {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

fn to_poly(m: &BTreeMap<usize, Vec<f64>>) -> DeltaPoly {
    let mut p = DeltaPoly::zero();
    for (&k, v) in m {
        p.add_term(k, v[0]);
    }
    if p.coeffs.is_empty() {
        p.add_term(0, 0.0);
    }
    p
}

/// `ev(Γ)` for an unmarked diagram: no `1/|Aut|`, no `ħ` powers.
/// Disconnected diagrams are products of their components.
pub fn evaluate_diagram(diagram: &Diagram, g: &GreenRep, quad: &QuadConfig) -> Result<DeltaPoly, AmplitudeError> {
    let ev = Evaluator::new(g, *quad, diagram.degrees().into_iter().max().unwrap_or(0));
    evaluate_with(&ev, diagram)
}

fn evaluate_with(ev: &Evaluator, diagram: &Diagram) -> Result<DeltaPoly, AmplitudeError> {
    if diagram.marked_count() > 0 {
        return Err(AmplitudeError::Marked);
    }
    let mut acc = DeltaPoly::constant(1.0);
    for comp in diagram.components() {
        acc = acc.mul(&to_poly(&ev.evaluate(&Network::from_diagram(&comp)?)?));
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesEntry {
    pub order: usize,
    pub delta_poly: DeltaPoly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagramEntry {
    pub canonical: String,
    pub aut: u64,
    pub order: usize,
    /// `ev(Γ)/|Aut Γ|`.
    pub contribution: DeltaPoly,
}

/// The formal path integral
/// `(2πiħ)^{−d/2} e^{iS/ħ} (−i)^η |det W|^{1/2} Σ_m (iħ)^m series[m]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropagatorResult {
    pub d: usize,
    pub t0: f64,
    pub t1: f64,
    pub q0: Vec<f64>,
    pub q1: Vec<f64>,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "log_abs_det_W")]
    pub log_abs_det_w: f64,
    pub morse_index: usize,
    pub series: Vec<SeriesEntry>,
    pub diagrams: Vec<DiagramEntry>,
    pub quad_order: usize,
    pub coincidence: CoincidenceRule,
}

impl PropagatorResult {
    pub fn order(&self, m: usize) -> DeltaPoly {
        self.series.iter().find(|s| s.order == m).map(|s| s.delta_poly.clone()).unwrap_or_default()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// Sum all unmarked diagrams with `−χ ≤ max_order`.
pub fn assemble(g: &GreenRep, max_order: usize, quad: &QuadConfig) -> Result<PropagatorResult, AmplitudeError> {
    let traj = g.trajectory();
    let eta = morse_index(traj, &MorseConfig::default())?;
    let vv = van_vleck(traj)?;
    let diagrams = crate::graphs::enumerate(max_order, 0)?;
    let max_rank = diagrams.iter().flat_map(|d| d.degrees()).max().unwrap_or(0);
    let ev = Evaluator::new(g, *quad, max_rank);
    // distinct connected components, evaluated once each
    let mut comps: BTreeMap<String, Diagram> = BTreeMap::new();
    for d in &diagrams {
        for c in d.components() {
            comps.entry(c.canonical()).or_insert(c);
        }
    }
    let comp_list: Vec<(String, Diagram)> = comps.into_iter().collect();
    let values: Vec<DeltaPoly> = comp_list
        .par_iter()
        .map(|(_, c)| Ok(to_poly(&ev.evaluate(&Network::from_diagram(c)?)?)))
        .collect::<Result<_, AmplitudeError>>()?;
    let lookup: HashMap<&str, &DeltaPoly> =
        comp_list.iter().map(|(k, _)| k.as_str()).zip(values.iter()).collect();
    let mut series: BTreeMap<usize, DeltaPoly> = (0..=max_order).map(|m| (m, DeltaPoly::constant(0.0))).collect();
    let mut entries = Vec::new();
    for d in &diagrams {
        let m = d.minus_chi() as usize;
        let mut val = DeltaPoly::constant(1.0);
        for c in d.components() {
            val = val.mul(lookup[c.canonical().as_str()]);
        }
        let contribution = val.scale(1.0 / d.aut() as f64);
        let s = series.get_mut(&m).expect("order in range");
        *s = s.add(&contribution);
        entries.push(DiagramEntry { canonical: d.canonical(), aut: d.aut(), order: m, contribution });
    }
    Ok(PropagatorResult {
        d: traj.d(),
        t0: traj.t0(),
        t1: traj.t1(),
        q0: traj.problem.q0.clone(),
        q1: traj.problem.q1.clone(),
        s: traj.action,
        log_abs_det_w: vv.log_abs_det(),
        morse_index: eta,
        series: series.into_iter().map(|(order, delta_poly)| SeriesEntry { order, delta_poly }).collect(),
        diagrams: entries,
        quad_order: quad.order,
        coincidence: quad.coincidence,
    })
}

/// Trees with `n` labelled leaves and internal vertices of degree ≥ 3.
pub fn leaf_trees(n: usize) -> Vec<Network> {
    // nodes: internal vertices 0..m, leaf k encoded as usize::MAX - k
    #[derive(Clone)]
    struct T {
        m: usize,
        edges: Vec<(usize, usize)>,
    }
    let leaf = |k: usize| usize::MAX - k;
    let mut trees = vec![T { m: 1, edges: vec![(0, leaf(0)), (0, leaf(1)), (0, leaf(2))] }];
    for k in 3..n {
        let mut next = Vec::new();
        for t in &trees {
            for v in 0..t.m {
                let mut u = t.clone();
                u.edges.push((v, leaf(k)));
                next.push(u);
            }
            for e in 0..t.edges.len() {
                let (a, b) = t.edges[e];
                let x = t.m;
                let mut u = t.clone();
                u.m += 1;
                u.edges[e] = (a, x);
                u.edges.push((x, b));
                u.edges.push((x, leaf(k)));
                next.push(u);
            }
        }
        trees = next;
    }
    trees
        .into_iter()
        .map(|t| {
            let mut legs = vec![0usize; n];
            let mut edges = Vec::new();
            for &(a, b) in &t.edges {
                let is_leaf = |x: usize| x > usize::MAX - n;
                match (is_leaf(a), is_leaf(b)) {
                    (false, true) => legs[usize::MAX - b] = a,
                    (true, false) => legs[usize::MAX - a] = b,
                    _ => edges.push((a, b)),
                }
            }
            Network { vertex_count: t.m, edges, legs }
        })
        .collect()
}

/// `∂ⁿ(−S)` in the boundary coordinates `(q₀, q₁)` as a sum over trees.
pub fn s_derivative_trees(g: &GreenRep, n: usize, quad: &QuadConfig) -> Result<SymTensor, AmplitudeError> {
    if !(3..=6).contains(&n) {
        return Err(AmplitudeError::Order(n));
    }
    let trees = leaf_trees(n);
    let ev = Evaluator::new(g, *quad, n);
    let parts: Vec<BTreeMap<usize, Vec<f64>>> =
        trees.par_iter().map(|t| ev.evaluate(t)).collect::<Result<_, _>>()?;
    let dim = ev.dim();
    let mut dense = vec![0.0; dim.pow(n as u32)];
    for p in &parts {
        debug_assert!(p.keys().all(|&k| k == 0), "trees carry no D0");
        for (s, x) in dense.iter_mut().zip(&p[&0]) {
            *s += x;
        }
    }
    Ok(SymTensor::from_fn(dim, n, |idx| dense[idx.iter().fold(0, |acc, &x| acc * dim + x)]))
}

/// Outcome of comparing `∂ log|det W|/∂q` with the one-loop tadpole.
#[derive(Debug, Clone, PartialEq)]
pub enum TadpoleCheck {
    Converged {
        /// Per boundary coordinate `(q₀, q₁)`.
        finite_difference: Vec<f64>,
        tadpole: Vec<f64>,
        residual: Vec<f64>,
    },
    /// The tadpole has `D0` content; per coordinate.
    Divergent { tadpole: Vec<DeltaPoly> },
}

pub fn tadpole_network() -> Network {
    Network { vertex_count: 1, edges: vec![(0, 0)], legs: vec![0] }
}

pub fn tadpole_logdet_check(g: &GreenRep, quad: &QuadConfig) -> Result<TadpoleCheck, AmplitudeError> {
    let traj = g.trajectory();
    let d = traj.d();
    let ev = Evaluator::new(g, *quad, 3);
    let val = ev.evaluate(&tadpole_network())?;
    let finite = val.get(&0).cloned().unwrap_or_else(|| vec![0.0; 2 * d]);
    let scale = 1.0 + finite.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let divergent = val.iter().any(|(&k, v)| k > 0 && v.iter().any(|x| x.abs() > 1e-12 * scale));
    if divergent {
        let polys = (0..2 * d)
            .map(|b| {
                let mut p = DeltaPoly::zero();
                for (&k, v) in &val {
                    p.add_term(k, v[b]);
                }
                p
            })
            .collect();
        return Ok(TadpoleCheck::Divergent { tadpole: polys });
    }
    let mut fd = Vec::with_capacity(2 * d);
    for b in 0..2 * d {
        let h = 1e-3 * (1.0 + traj.problem.q0.iter().chain(&traj.problem.q1).fold(0.0f64, |m, x| m.max(x.abs())));
        let at = |step: f64| -> Result<f64, AmplitudeError> {
            let mut p: Problem = traj.problem.clone();
            p.v0_guess = traj.v0.clone();
            if b < d {
                p.q0[b] += step;
            } else {
                p.q1[b - d] += step;
            }
            Ok(van_vleck(&solve_bvp(&p)?)?.log_abs_det())
        };
        let d1 = (at(h)? - at(-h)?) / (2.0 * h);
        let d2 = (at(2.0 * h)? - at(-2.0 * h)?) / (4.0 * h);
        fd.push((4.0 * d1 - d2) / 3.0);
    }
    let residual = fd.iter().zip(&finite).map(|(a, b)| (a - b).abs()).collect();
    Ok(TadpoleCheck::Converged { finite_difference: fd, tadpole: finite, residual })
}

/// Divergent content of one loop order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderDivergence {
    pub order: usize,
    /// `D0` degree → summed coefficient.
    pub coefficients: BTreeMap<usize, f64>,
    /// `D0` degree → `Σ |per-diagram coefficient|`.
    pub magnitudes: BTreeMap<usize, f64>,
    pub divergence_free: bool,
}

/// Flag each order as divergence-free when every `D0^k` (`k ≥ 1`) sum is
/// within `tol` times the sum of magnitudes of its diagram contributions.
pub fn divergence_report(result: &PropagatorResult, tol: f64) -> Vec<OrderDivergence> {
    result
        .series
        .iter()
        .map(|s| {
            let mut coefficients = BTreeMap::new();
            let mut magnitudes = BTreeMap::new();
            for k in 1..=s.delta_poly.degree() {
                coefficients.insert(k, s.delta_poly.coeff(k));
                let mag: f64 = result
                    .diagrams
                    .iter()
                    .filter(|d| d.order == s.order)
                    .map(|d| d.contribution.coeff(k).abs())
                    .sum();
                magnitudes.insert(k, mag);
            }
            // Round-off floor: when every individual D0 term vanishes the
            // relative test alone would compare noise with noise.
            let scale: f64 = result
                .diagrams
                .iter()
                .filter(|d| d.order == s.order)
                .flat_map(|d| d.contribution.coeffs.iter())
                .map(|c| c.abs())
                .sum();
            let floor = 64.0 * f64::EPSILON * scale;
            let divergence_free =
                coefficients.iter().all(|(k, c)| c.abs() <= tol * magnitudes[k] || c.abs() <= floor);
            OrderDivergence { order: s.order, coefficients, magnitudes, divergence_free }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::solve_bvp;
    use crate::expr::parse;

    fn rep(l: &str, d: usize, t1: f64, q0: Vec<f64>, q1: Vec<f64>) -> GreenRep {
        let e = parse(l, d, &BTreeMap::new()).unwrap();
        let tr = solve_bvp(&Problem::new(e, 0.0, t1, q0, q1, None).unwrap()).unwrap();
        GreenRep::build(&tr).unwrap()
    }

    #[test]
    fn delta_poly_arithmetic() {
        let a = DeltaPoly { coeffs: vec![1.0, 2.0] };
        let b = DeltaPoly { coeffs: vec![0.5, 0.0, 3.0] };
        assert_eq!(a.mul(&b).coeffs, vec![0.5, 1.0, 3.0, 6.0]);
        assert_eq!(a.add(&b).coeffs, vec![1.5, 2.0, 3.0]);
        assert_eq!(b.divergent_magnitude(), 3.0);
    }

    #[test]
    fn tree_counts() {
        let counts: Vec<usize> = (3..=6).map(|n| leaf_trees(n).len()).collect();
        assert_eq!(counts, vec![1, 4, 26, 236]);
        for t in leaf_trees(5) {
            assert!((0..t.vertex_count).all(|v| t.degree(v) >= 3));
            assert_eq!(t.edges.len() + 1, t.vertex_count);
        }
    }

    #[test]
    fn permutation_helpers() {
        assert_eq!(all_permutations(3).len(), 6);
        let o = intra_orders(&[vec![0, 2], vec![1]], 3);
        assert_eq!(o.len(), 2);
        let r = vec![0.0, 1.0, 2.0, 3.0];
        // axes swapped: out[i][j] = r[j][i]
        assert_eq!(permute_output(&r, &[1, 0], 2), vec![0.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn barbell_divergence_exponential_metric() {
        let e = std::f64::consts::E;
        for q1 in [e, 1.0] {
            let g = rep("v^2/(2*q^2)", 1, 1.0, vec![1.0], vec![q1]);
            let res = assemble(&g, 1, &QuadConfig::default()).unwrap();
            let c2 = res.order(1).coeff(2);
            assert!((c2 - 1.0 / 24.0).abs() < 1e-6 / 24.0, "q1={q1}: {c2}");
        }
    }

    #[test]
    fn quadratic_lagrangian_has_trivial_series() {
        let g = rep("v^2/2 - q^2/2", 1, 1.0, vec![0.2], vec![0.5]);
        let res = assemble(&g, 2, &QuadConfig { order: 6, ..Default::default() }).unwrap();
        assert_eq!(res.order(0).coeffs, vec![1.0]);
        assert!(res.order(1).is_zero() && res.order(2).is_zero());
    }

    #[test]
    fn s_derivatives_match_hessian_differences() {
        let l = "v^2/2 - 0.1*q^4";
        let e = parse(l, 1, &BTreeMap::new()).unwrap();
        let base = Problem::new(e, 0.0, 1.0, vec![0.3], vec![0.7], None).unwrap();
        let tr = solve_bvp(&base).unwrap();
        let g = GreenRep::build(&tr).unwrap();
        let t3 = s_derivative_trees(&g, 3, &QuadConfig::default()).unwrap();
        let h = 1e-3;
        let hess = |dq0: f64| {
            let mut p = base.clone();
            p.q0[0] += dq0;
            -crate::classical::s_hessian(&solve_bvp(&p).unwrap()).unwrap()
        };
        let fd = (hess(h) - hess(-h)) / (2.0 * h);
        for i in 0..2 {
            for j in 0..2 {
                assert!((t3.get(&[0, i, j]) - fd[(i, j)]).abs() < 1e-5, "{i}{j}");
            }
        }
        assert!(matches!(s_derivative_trees(&g, 2, &QuadConfig::default()), Err(AmplitudeError::Order(2))));
    }

    #[test]
    fn tadpole_matches_log_det_derivative() {
        let g = rep("v^2/2 - 0.1*q^4", 1, 1.0, vec![0.3], vec![0.7]);
        match tadpole_logdet_check(&g, &QuadConfig::default()).unwrap() {
            TadpoleCheck::Converged { residual, tadpole, .. } => {
                assert!(tadpole.iter().any(|x| x.abs() > 1e-3));
                assert!(residual.iter().all(|&r| r < 1e-4), "{residual:?}");
            }
            other => panic!("{other:?}"),
        }
        let g = rep("v^2/(2*q^2)", 1, 1.0, vec![1.0], vec![2.0]);
        assert!(matches!(
            tadpole_logdet_check(&g, &QuadConfig::default()).unwrap(),
            TadpoleCheck::Divergent { .. }
        ));
    }
}

//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use spi_core::amplitude::DeltaPoly;
use spi_core::classical::{solve_bvp, Problem};
use spi_core::expr::{parse, Expression};
use spi_core::graphs::Diagram;
use spi_core::green::{GreenMode, GreenRep};
use spi_core::quad::gauss_legendre;

pub const FLAT_QUARTIC: &str = "v^2/2 - 0.1*q^4";
pub const EXPONENTIAL: &str = "v^2/(2*q^2)";
pub const DET1: &str = "0.5*(exp(0.3*q1)*v1^2 + exp(-0.3*q1)*v2^2)";

pub fn green(l: &str, d: usize, t1: f64, q0: Vec<f64>, q1: Vec<f64>) -> GreenRep {
    let e = parse(l, d, &BTreeMap::new()).unwrap();
    GreenRep::build(&solve_bvp(&Problem::new(e, 0.0, t1, q0, q1, None).unwrap()).unwrap()).unwrap()
}

pub fn flat_quartic() -> GreenRep {
    green(FLAT_QUARTIC, 1, 1.0, vec![0.3], vec![0.7])
}

pub fn exponential(q1: f64) -> GreenRep {
    green(EXPONENTIAL, 1, 1.0, vec![1.0], vec![q1])
}

pub fn det1() -> GreenRep {
    green(DET1, 2, 1.0, vec![0.0, 0.0], vec![0.5, 0.4])
}

/// Straightforward evaluator for diagrams with at most two vertices: every
/// δ/smooth choice per edge and every leg index assignment is written out
/// as an explicit loop. Vertex tensors come from symbolic differentiation and
/// edges from the variation-of-parameters Green's function, so nothing is
/// shared with the production evaluator beyond the path itself.
pub struct HandEvaluator<'a> {
    g: GreenRep,
    lagrangian: &'a Expression,
    d: usize,
    derivs: RefCell<HashMap<Vec<usize>, Expression>>,
    order: usize,
}

impl<'a> HandEvaluator<'a> {
    pub fn new(g: &'a GreenRep, order: usize) -> HandEvaluator<'a> {
        HandEvaluator {
            g: g.clone().with_mode(GreenMode::VariationOfParameters),
            lagrangian: &g.trajectory().problem.lagrangian,
            d: g.d(),
            derivs: RefCell::new(HashMap::new()),
            order,
        }
    }

    fn point(&self, t: f64) -> Vec<f64> {
        self.g.trajectory().lagrangian_point(t)
    }

    /// `−∂ⁿL` with leg indices in `(v, q)` order.
    fn vertex(&self, t: f64, idx: &[usize]) -> f64 {
        let mut key = idx.to_vec();
        key.sort();
        let mut cache = self.derivs.borrow_mut();
        let e = cache.entry(key.clone()).or_insert_with(|| {
            let mut e = self.lagrangian.clone();
            for &x in &key {
                e = e.diff(1 + x);
            }
            e
        });
        -e.eval(&self.point(t)).unwrap()
    }

    fn a_inv(&self, t: f64) -> DMatrix<f64> {
        let d = self.d;
        let a = DMatrix::from_fn(d, d, |i, j| -self.vertex(t, &[i, j]));
        a.try_inverse().unwrap()
    }

    /// `[[∂ς∂τG, ∂ςG], [∂τG, G]]` (smooth part).
    fn edge(&self, s: f64, t: f64) -> DMatrix<f64> {
        let d = self.d;
        let mut e = DMatrix::zeros(2 * d, 2 * d);
        for (ds, r) in [(1u8, 0), (0u8, d)] {
            for (dt, c) in [(1u8, 0), (0u8, d)] {
                let v = self.g.eval(s, t, ds, dt).unwrap().smooth;
                e.view_mut((r, c), (d, d)).copy_from(&v);
            }
        }
        e
    }

    fn delta(&self, t: f64) -> DMatrix<f64> {
        let d = self.d;
        let mut e = DMatrix::zeros(2 * d, 2 * d);
        e.view_mut((0, 0), (d, d)).copy_from(&self.a_inv(t));
        e
    }

    /// Sum over all leg index assignments of vertex and edge factors.
    fn contract(&self, diagram: &Diagram, times: &[f64], mats: &[DMatrix<f64>]) -> f64 {
        let n = 2 * self.d;
        let edges = diagram.edges();
        let h = 2 * edges.len();
        let mut idx = vec![0usize; h];
        let mut memo: HashMap<(usize, Vec<usize>), f64> = HashMap::new();
        let mut total = 0.0;
        loop {
            let mut term = 1.0;
            for (e, m) in mats.iter().enumerate() {
                term *= m[(idx[2 * e], idx[2 * e + 1])];
                if term == 0.0 {
                    break;
                }
            }
            if term != 0.0 {
                for v in 0..diagram.vertex_count() {
                    let legs: Vec<usize> = edges
                        .iter()
                        .enumerate()
                        .flat_map(|(e, &(a, b))| {
                            let mut l = Vec::new();
                            if a == v {
                                l.push(idx[2 * e]);
                            }
                            if b == v {
                                l.push(idx[2 * e + 1]);
                            }
                            l
                        })
                        .collect();
                    let mut key = legs;
                    key.sort();
                    term *= *memo.entry((v, key)).or_insert_with_key(|(_, k)| self.vertex(times[v], k));
                }
                total += term;
            }
            let mut k = 0;
            while k < h {
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == h {
                break;
            }
        }
        total
    }

    pub fn evaluate(&self, diagram: &Diagram) -> DeltaPoly {
        assert!(diagram.vertex_count() <= 2 && diagram.marked_count() == 0);
        let (t0, t1) = (self.g.trajectory().t0(), self.g.trajectory().t1());
        let edges = diagram.edges().to_vec();
        let rule = gauss_legendre(self.order);
        let mut out = DeltaPoly::zero();
        if diagram.vertex_count() == 0 {
            return DeltaPoly::constant(1.0);
        }
        for mask in 0u32..(1 << edges.len()) {
            let is_delta = |e: usize| mask >> e & 1 == 1;
            let loops_delta = (0..edges.len()).filter(|&e| is_delta(e) && edges[e].0 == edges[e].1).count();
            let link_delta = (0..edges.len()).filter(|&e| is_delta(e) && edges[e].0 != edges[e].1).count();
            let mats_at = |s: f64, t: f64| -> Vec<DMatrix<f64>> {
                edges
                    .iter()
                    .enumerate()
                    .map(|(e, &(a, b))| {
                        let (ta, tb) = (if a == 0 { s } else { t }, if b == 0 { s } else { t });
                        if is_delta(e) {
                            self.delta(tb)
                        } else {
                            self.edge(ta, tb)
                        }
                    })
                    .collect()
            };
            if diagram.vertex_count() == 1 || link_delta > 0 {
                // one surviving time
                let mut acc = 0.0;
                for (&x, &w) in rule.0.iter().zip(&rule.1) {
                    let t = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * x;
                    acc += 0.5 * (t1 - t0) * w * self.contract(diagram, &[t, t], &mats_at(t, t));
                }
                let degree = loops_delta + link_delta.saturating_sub(1);
                out.add_term(degree, acc);
            } else {
                // outer t, inner s on either side of it
                let mut acc = 0.0;
                for (&x, &w) in rule.0.iter().zip(&rule.1) {
                    let t = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * x;
                    for (lo, hi) in [(t0, t), (t, t1)] {
                        for (&y, &u) in rule.0.iter().zip(&rule.1) {
                            let s = 0.5 * (lo + hi) + 0.5 * (hi - lo) * y;
                            let wt = 0.25 * (t1 - t0) * (hi - lo) * w * u;
                            acc += wt * self.contract(diagram, &[s, t], &mats_at(s, t));
                        }
                    }
                }
                out.add_term(loops_delta, acc);
            }
        }
        out
    }
}

impl HandEvaluator<'_> {
    /// Value of a two-vertex diagram with a single link edge when every δ is
    /// replaced by a Gaussian of width `eps`: self-loop δ(0) becomes the peak
    /// height, the link δ is integrated against the mollifier.
    pub fn regularized(&self, diagram: &Diagram, eps: f64) -> f64 {
        let edges = diagram.edges().to_vec();
        assert_eq!(diagram.vertex_count(), 2);
        assert_eq!(edges.iter().filter(|(a, b)| a != b).count(), 1, "one link edge");
        let (t0, t1) = (self.g.trajectory().t0(), self.g.trajectory().t1());
        let peak = 1.0 / (eps * (2.0 * std::f64::consts::PI).sqrt());
        let rule = gauss_legendre(self.order);
        let mut total = 0.0;
        for mask in 0u32..(1 << edges.len()) {
            let is_delta = |e: usize| mask >> e & 1 == 1;
            let mats_at = |s: f64, t: f64| -> Vec<DMatrix<f64>> {
                edges
                    .iter()
                    .enumerate()
                    .map(|(e, &(a, b))| {
                        let (ta, tb) = (if a == 0 { s } else { t }, if b == 0 { s } else { t });
                        match (is_delta(e), a == b) {
                            (true, true) => self.delta(tb) * peak,
                            (true, false) => self.delta(tb),
                            (false, _) => self.edge(ta, tb),
                        }
                    })
                    .collect()
            };
            let link_delta = edges.iter().enumerate().any(|(e, &(a, b))| a != b && is_delta(e));
            let mut acc = 0.0;
            for (&x, &w) in rule.0.iter().zip(&rule.1) {
                let t = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * x;
                let wt = 0.5 * (t1 - t0) * w;
                if link_delta {
                    // s = t + eps·y, Gaussian weight in y
                    let lo = ((t0 - t) / eps).max(-9.0);
                    let hi = ((t1 - t) / eps).min(9.0);
                    for (&y, &u) in rule.0.iter().zip(&rule.1) {
                        let z = 0.5 * (lo + hi) + 0.5 * (hi - lo) * y;
                        let s = t + eps * z;
                        let kernel = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        acc += wt * 0.5 * (hi - lo) * u * kernel * self.contract(diagram, &[s, t], &mats_at(s, t));
                    }
                } else {
                    for (lo, hi) in [(t0, t), (t, t1)] {
                        for (&y, &u) in rule.0.iter().zip(&rule.1) {
                            let s = 0.5 * (lo + hi) + 0.5 * (hi - lo) * y;
                            acc += wt * 0.5 * (hi - lo) * u * self.contract(diagram, &[s, t], &mats_at(s, t));
                        }
                    }
                }
            }
            total += acc;
        }
        total
    }
}

/// `∫ G(τ, τ)² dτ` for `L = v²/2 − λq⁴` with `G` from a second-order finite
/// difference discretization of `−d²/dτ² − 12λγ²`, Richardson extrapolated.
pub fn flat_quartic_loop_integral(g: &GreenRep, lambda: f64) -> f64 {
    let traj = g.trajectory();
    let (t0, t1) = (traj.t0(), traj.t1());
    let run = |n: usize| {
        let h = (t1 - t0) / (n + 1) as f64;
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            let tau = t0 + (i + 1) as f64 * h;
            let q = traj.position_velocity(tau).0[0];
            a[(i, i)] = 2.0 / (h * h) - 12.0 * lambda * q * q;
            if i > 0 {
                a[(i, i - 1)] = -1.0 / (h * h);
                a[(i - 1, i)] = -1.0 / (h * h);
            }
        }
        let inv = a.try_inverse().unwrap();
        // trapezoid; G vanishes at both ends
        (0..n).map(|i| (inv[(i, i)] / h).powi(2)).sum::<f64>() * h
    };
    let (coarse, fine) = (run(199), run(399));
    (4.0 * fine - coarse) / 3.0
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

pub type Key = (Vec<Option<u8>>, Vec<(usize, usize)>);

/// Lexicographically smallest relabelling over all vertex permutations.
pub fn brute_canonical(marks: &[Option<u8>], edges: &[(usize, usize)]) -> Key {
    let n = marks.len();
    let mut best: Option<Key> = None;
    for p in permutations(n) {
        let mut m = vec![None; n];
        for (old, &new) in p.iter().enumerate() {
            m[new] = marks[old];
        }
        let mut e: Vec<(usize, usize)> = edges
            .iter()
            .map(|&(a, b)| (p[a].min(p[b]), p[a].max(p[b])))
            .collect();
        e.sort();
        let k = (m, e);
        if best.as_ref().map_or(true, |b| k < *b) {
            best = Some(k);
        }
    }
    best.unwrap()
}

/// Half-edge automorphisms counted by brute force over all half-edge
/// permutations.
pub fn brute_aut(marks: &[Option<u8>], edges: &[(usize, usize)]) -> u64 {
    let h = 2 * edges.len();
    let vert: Vec<usize> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    let partner = |x: usize| x ^ 1;
    let mut count = 0;
    'perm: for p in permutations(h) {
        let mut sigma = vec![usize::MAX; marks.len()];
        for x in 0..h {
            if p[partner(x)] != partner(p[x]) {
                continue 'perm;
            }
            let (u, w) = (vert[x], vert[p[x]]);
            if sigma[u] == usize::MAX {
                sigma[u] = w;
            } else if sigma[u] != w {
                continue 'perm;
            }
        }
        // isolated vertices are fixed by this count; diagrams here have none
        let mut seen = BTreeSet::new();
        for (u, &w) in sigma.iter().enumerate() {
            if w == usize::MAX {
                continue;
            }
            if !seen.insert(w) || marks[u] != marks[w] {
                continue 'perm;
            }
        }
        count += 1;
    }
    count
}

fn multisets(pool: &[(usize, usize)], k: usize, start: usize, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
    if k == 0 {
        out.push(cur.clone());
        return;
    }
    for i in start..pool.len() {
        cur.push(pool[i]);
        multisets(pool, k - 1, i, cur, out);
        cur.pop();
    }
}

/// Naive class count: every edge multiset on every vertex count, filtered by
/// degree, deduplicated by exhaustive isomorphism testing.
pub fn naive_classes(max_minus_chi: i64, nm: usize) -> BTreeSet<Key> {
    let mut classes = BTreeSet::new();
    let max_unmarked = 2 * (max_minus_chi as usize + nm);
    for u in 0..=max_unmarked {
        let v = u + nm;
        let marks: Vec<Option<u8>> = (0..v).map(|i| if i < nm { Some(i as u8) } else { None }).collect();
        let pool: Vec<(usize, usize)> = (0..v).flat_map(|a| (a..v).map(move |b| (a, b))).collect();
        for minus_chi in -(v as i64)..=max_minus_chi {
            let e = v as i64 + minus_chi;
            if e < 0 {
                continue;
            }
            let mut all = Vec::new();
            multisets(&pool, e as usize, 0, &mut Vec::new(), &mut all);
            for edges in all {
                let mut deg = vec![0; v];
                for &(a, b) in &edges {
                    deg[a] += 1;
                    deg[b] += 1;
                }
                if (nm..v).all(|i| deg[i] >= 3) {
                    classes.insert(brute_canonical(&marks, &edges));
                }
            }
        }
    }
    classes
}

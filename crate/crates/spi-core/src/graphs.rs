//! Feynman diagrams as isomorphism classes of finite multigraphs.
//!
//! Self-loops and parallel edges are allowed. Unmarked vertices have degree
//! at least three; marked vertices (mark ids 0 and 1) may have any degree and
//! are never exchanged with other vertices.

use std::collections::BTreeMap;
use std::fmt;

/// Largest `−χ` accepted by [`enumerate`].
pub const MAX_MINUS_CHI: usize = 4;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("−χ = {0} exceeds the enumeration ceiling {MAX_MINUS_CHI}")]
    LimitExceeded(usize),
    #[error("at most two marked vertices are supported, got {0}")]
    TooManyMarks(usize),
    #[error("vertex {0} is unmarked and has degree {1} < 3")]
    LowDegree(usize, usize),
    #[error("edge ({0},{1}) refers to a missing vertex")]
    BadEdge(usize, usize),
}

/// A diagram in canonical vertex order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Diagram {
    marks: Vec<Option<u8>>,
    edges: Vec<(usize, usize)>,
    aut: u64,
}

impl Diagram {
    /// Build and canonicalize. Edges are unordered pairs; self-loops are `(v, v)`.
    pub fn new(marks: Vec<Option<u8>>, edges: Vec<(usize, usize)>) -> Result<Diagram, GraphError> {
        let n = marks.len();
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(GraphError::BadEdge(a, b));
            }
        }
        let d = Diagram::new_unchecked(marks, edges);
        for v in 0..n {
            if d.marks[v].is_none() && d.degree(v) < 3 {
                return Err(GraphError::LowDegree(v, d.degree(v)));
            }
        }
        Ok(d)
    }

    /// Canonicalize without the degree check (used for open diagrams and trees).
    pub(crate) fn new_unchecked(marks: Vec<Option<u8>>, edges: Vec<(usize, usize)>) -> Diagram {
        let (perm, vertex_aut) = canonical_permutation(&marks, &edges);
        let mut new_marks = vec![None; marks.len()];
        for (old, &new) in perm.iter().enumerate() {
            new_marks[new] = marks[old];
        }
        let new_edges = relabel(&edges, &perm);
        let mut d = Diagram { marks: new_marks, edges: new_edges, aut: 1 };
        d.aut = vertex_aut * d.edge_symmetry();
        d
    }

    pub fn empty() -> Diagram {
        Diagram { marks: Vec::new(), edges: Vec::new(), aut: 1 }
    }

    pub fn vertex_count(&self) -> usize {
        self.marks.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn marks(&self) -> &[Option<u8>] {
        &self.marks
    }

    pub fn marked_count(&self) -> usize {
        self.marks.iter().filter(|m| m.is_some()).count()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().map(|&(a, b)| (a == v) as usize + (b == v) as usize).sum()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.vertex_count()).map(|v| self.degree(v)).collect()
    }

    /// Euler characteristic `V − E`.
    pub fn chi(&self) -> i64 {
        self.marks.len() as i64 - self.edges.len() as i64
    }

    /// Loop order `−χ`.
    pub fn minus_chi(&self) -> i64 {
        -self.chi()
    }

    /// Order of the automorphism group acting on half-edges.
    pub fn aut(&self) -> u64 {
        self.aut
    }

    /// Total-order key on isomorphism classes.
    pub fn canonical(&self) -> String {
        self.to_string()
    }

    // Parallel-edge permutations and self-loop flips.
    fn edge_symmetry(&self) -> u64 {
        let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for &e in &self.edges {
            *counts.entry(e).or_default() += 1;
        }
        counts
            .iter()
            .map(|(&(a, b), &m)| factorial(m) * if a == b { 1 << m } else { 1 })
            .product()
    }

    /// Connected components, each canonicalized. Isolated vertices are
    /// components of their own.
    pub fn components(&self) -> Vec<Diagram> {
        let n = self.vertex_count();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut y = x;
            while p[y] != r {
                let next = p[y];
                p[y] = r;
                y = next;
            }
            r
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for v in 0..n {
            let r = find(&mut parent, v);
            groups.entry(r).or_default().push(v);
        }
        groups
            .values()
            .map(|vs| {
                let local = |v: usize| vs.iter().position(|&w| w == v).unwrap();
                let marks = vs.iter().map(|&v| self.marks[v]).collect();
                let edges = self
                    .edges
                    .iter()
                    .filter(|(a, _)| vs.contains(a))
                    .map(|&(a, b)| (local(a), local(b)))
                    .collect();
                Diagram::new_unchecked(marks, edges)
            })
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        self.vertex_count() <= 1 || self.components().len() == 1
    }
}

impl fmt::Display for Diagram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V={} marks=", self.vertex_count())?;
        let marked: Vec<String> = self
            .marks
            .iter()
            .enumerate()
            .filter_map(|(v, m)| m.map(|id| format!("{v}:{id}")))
            .collect();
        if marked.is_empty() {
            write!(f, "none")?;
        } else {
            write!(f, "{}", marked.join(","))?;
        }
        write!(f, " edges=")?;
        let edges: Vec<String> = self.edges.iter().map(|(a, b)| format!("({a},{b})")).collect();
        write!(f, "{}", edges.join(","))?;
        write!(f, " chi={} aut={}", self.chi(), self.aut)
    }
}

fn factorial(n: u64) -> u64 {
    (1..=n).product()
}

fn relabel(edges: &[(usize, usize)], perm: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = edges
        .iter()
        .map(|&(a, b)| {
            let (x, y) = (perm[a], perm[b]);
            (x.min(y), x.max(y))
        })
        .collect();
    out.sort_unstable();
    out
}

/// Returns `perm` (old vertex → canonical position) and the number of vertex
/// permutations that fix the multigraph and its marks.
///
/// Vertices are first split by iterated colour refinement (mark, loop count,
/// then multisets of neighbour colours with multiplicities); the canonical
/// form is the lexicographically smallest relabelled edge list over all
/// orderings that respect the colour cells.
fn canonical_permutation(marks: &[Option<u8>], edges: &[(usize, usize)]) -> (Vec<usize>, u64) {
    let n = marks.len();
    if n == 0 {
        return (Vec::new(), 1);
    }
    let mut mult = vec![vec![0usize; n]; n];
    for &(a, b) in edges {
        mult[a][b] += 1;
        if a != b {
            mult[b][a] += 1;
        }
    }
    let mut colour: Vec<usize> = {
        let sig: Vec<(u8, usize)> =
            (0..n).map(|v| (marks[v].map_or(u8::MAX, |m| m), mult[v][v])).collect();
        rank(&sig)
    };
    loop {
        let sig: Vec<(usize, Vec<(usize, usize)>)> = (0..n)
            .map(|v| {
                let mut nb: Vec<(usize, usize)> = (0..n)
                    .filter(|&w| w != v && mult[v][w] > 0)
                    .map(|w| (colour[w], mult[v][w]))
                    .collect();
                nb.sort_unstable();
                (colour[v], nb)
            })
            .collect();
        let next = rank(&sig);
        let distinct = |c: &[usize]| c.iter().collect::<std::collections::BTreeSet<_>>().len();
        if distinct(&next) == distinct(&colour) {
            colour = next;
            break;
        }
        colour = next;
    }
    let ncol = colour.iter().max().unwrap() + 1;
    let cells: Vec<Vec<usize>> =
        (0..ncol).map(|c| (0..n).filter(|&v| colour[v] == c).collect()).collect();

    let mut best: Option<(Vec<(usize, usize)>, Vec<usize>)> = None;
    let mut count = 0u64;
    let mut perm = vec![0usize; n];
    let mut visit = |order: &[usize]| {
        for (pos, &v) in order.iter().enumerate() {
            perm[v] = pos;
        }
        let key = relabel(edges, &perm);
        match &best {
            Some((k, _)) if key > *k => {}
            Some((k, _)) if key == *k => count += 1,
            _ => {
                best = Some((key, perm.clone()));
                count = 1;
            }
        }
    };
    let mut order = Vec::with_capacity(n);
    permute_cells(&cells, 0, &mut order, &mut visit);
    (best.unwrap().1, count)
}

fn rank<T: Ord + Clone>(sig: &[T]) -> Vec<usize> {
    let mut sorted: Vec<T> = sig.to_vec();
    sorted.sort();
    sorted.dedup();
    sig.iter().map(|s| sorted.binary_search(s).unwrap()).collect()
}

fn permute_cells(
    cells: &[Vec<usize>],
    c: usize,
    order: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if c == cells.len() {
        visit(order);
        return;
    }
    let mut cell = cells[c].clone();
    permutations(&mut cell, 0, &mut |p| {
        let len = order.len();
        order.extend_from_slice(p);
        permute_cells(cells, c + 1, order, visit);
        order.truncate(len);
    });
}

fn permutations(items: &mut [usize], k: usize, f: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, f);
        items.swap(k, i);
    }
}

/// `|Aut|` of a diagram (already cached at construction).
pub fn automorphism_order(d: &Diagram) -> u64 {
    d.aut()
}

/// All diagrams with `−χ ≤ max_minus_chi` and the given number of marked
/// vertices (mark ids `0..marked_vertices`), one per isomorphism class, sorted
/// by (−χ, canonical label). Disconnected diagrams are included; the empty
/// diagram is included when `marked_vertices = 0`.
pub fn enumerate(max_minus_chi: usize, marked_vertices: usize) -> Result<Vec<Diagram>, GraphError> {
    if max_minus_chi > MAX_MINUS_CHI {
        return Err(GraphError::LimitExceeded(max_minus_chi));
    }
    if marked_vertices > 2 {
        return Err(GraphError::TooManyMarks(marked_vertices));
    }
    let m = max_minus_chi as i64;
    let nm = marked_vertices;
    let mut found: BTreeMap<(i64, String), Diagram> = BTreeMap::new();
    let max_unmarked = 2 * (max_minus_chi + nm);
    for u in 0..=max_unmarked {
        let v = u + nm;
        for minus_chi in -(nm as i64)..=m {
            let e = v as i64 + minus_chi;
            if e < 0 {
                continue;
            }
            let e = e as usize;
            if 3 * u > 2 * e {
                continue;
            }
            for degs in degree_sequences(u, nm, 2 * e) {
                realize(&degs, &mut |edges| {
                    let mut marks = vec![None; v];
                    for (i, mk) in marks.iter_mut().take(nm).enumerate() {
                        *mk = Some(i as u8);
                    }
                    let d = Diagram::new_unchecked(marks, edges.to_vec());
                    found.entry((d.minus_chi(), d.canonical())).or_insert(d);
                });
            }
        }
    }
    Ok(found.into_values().collect())
}

// Degree sequences: `nm` marked vertices first (any degree ≥ 0), then `u`
// unmarked vertices in non-increasing order with degree ≥ 3, summing to `total`.
fn degree_sequences(u: usize, nm: usize, total: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn marked(
        nm: usize,
        u: usize,
        left: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if cur.len() == nm {
            unmarked(u, left, usize::MAX, cur, out);
            return;
        }
        for d in 0..=left {
            cur.push(d);
            marked(nm, u, left - d, cur, out);
            cur.pop();
        }
    }
    fn unmarked(u: usize, left: usize, cap: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if u == 0 {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        if left < 3 * u {
            return;
        }
        let hi = cap.min(left - 3 * (u - 1));
        for d in (3..=hi).rev() {
            cur.push(d);
            unmarked(u - 1, left - d, d, cur, out);
            cur.pop();
        }
    }
    marked(nm, u, total, &mut cur, &mut out);
    out
}

// Every edge multiset realizing the degree sequence exactly.
fn realize(degs: &[usize], f: &mut impl FnMut(&[(usize, usize)])) {
    let mut left = degs.to_vec();
    let mut edges = Vec::new();
    realize_vertex(0, &mut left, &mut edges, f);
}

fn realize_vertex(
    v: usize,
    left: &mut Vec<usize>,
    edges: &mut Vec<(usize, usize)>,
    f: &mut impl FnMut(&[(usize, usize)]),
) {
    if v == left.len() {
        f(edges);
        return;
    }
    let max_loops = left[v] / 2;
    for loops in 0..=max_loops {
        left[v] -= 2 * loops;
        for _ in 0..loops {
            edges.push((v, v));
        }
        distribute(v, v + 1, left, edges, f);
        for _ in 0..loops {
            edges.pop();
        }
        left[v] += 2 * loops;
    }
}

// Spread the remaining degree of `v` over vertices `w ≥ next`.
fn distribute(
    v: usize,
    next: usize,
    left: &mut Vec<usize>,
    edges: &mut Vec<(usize, usize)>,
    f: &mut impl FnMut(&[(usize, usize)]),
) {
    if left[v] == 0 {
        realize_vertex(v + 1, left, edges, f);
        return;
    }
    if next == left.len() {
        return;
    }
    let max_k = left[v].min(left[next]);
    for k in (0..=max_k).rev() {
        left[v] -= k;
        left[next] -= k;
        for _ in 0..k {
            edges.push((v, next));
        }
        distribute(v, next + 1, left, edges, f);
        for _ in 0..k {
            edges.pop();
        }
        left[v] += k;
        left[next] += k;
    }
}

/// All perfect matchings of `{1..n}`: each a list of sorted pairs sorted by
/// first element. Empty for odd `n`; `[[]]` for `n = 0`.
pub fn pairings(n: usize) -> Vec<Vec<(usize, usize)>> {
    if n % 2 == 1 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut free: Vec<usize> = (1..=n).collect();
    let mut cur = Vec::new();
    fn rec(free: &mut Vec<usize>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if free.is_empty() {
            out.push(cur.clone());
            return;
        }
        let first = free.remove(0);
        for i in 0..free.len() {
            let partner = free.remove(i);
            cur.push((first, partner));
            rec(free, cur, out);
            cur.pop();
            free.insert(i, partner);
        }
        free.insert(0, first);
    }
    rec(&mut free, &mut cur, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(marks: usize, unmarked: usize, edges: &[(usize, usize)]) -> Diagram {
        let mut m = vec![None; marks + unmarked];
        for (i, x) in m.iter_mut().take(marks).enumerate() {
            *x = Some(i as u8);
        }
        Diagram::new(m, edges.to_vec()).unwrap()
    }

    #[test]
    fn no_one_loop_vacuum_diagrams() {
        let all = enumerate(0, 0).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].vertex_count(), 0);
        assert!(all.iter().all(|g| g.minus_chi() == 0));
    }

    #[test]
    fn two_loop_vacuum_diagrams() {
        let all: Vec<Diagram> =
            enumerate(1, 0).unwrap().into_iter().filter(|g| g.minus_chi() == 1).collect();
        assert_eq!(all.len(), 3);
        let mut auts: Vec<u64> = all.iter().map(|g| g.aut()).collect();
        auts.sort();
        assert_eq!(auts, vec![8, 8, 12]);
    }

    #[test]
    fn automorphism_examples() {
        assert_eq!(d(1, 0, &[(0, 0)]).aut(), 2);
        assert_eq!(d(0, 2, &[(0, 1), (0, 1), (0, 1)]).aut(), 12);
        assert_eq!(d(0, 3, &[(0, 1), (1, 2), (0, 2), (0, 0), (1, 1), (2, 2)]).aut(), 6 * 8);
        assert_eq!(d(0, 1, &[(0, 0), (0, 0)]).aut(), 8);
        assert_eq!(d(0, 2, &[(0, 0), (0, 1), (1, 1)]).aut(), 8);
        // triangle with marked vertices exempt from the degree bound
        let tri = Diagram::new_unchecked(vec![None; 3], vec![(0, 1), (1, 2), (0, 2)]);
        assert_eq!(tri.aut(), 6);
    }

    #[test]
    fn canonical_labels_identify_isomorphs() {
        let a = d(0, 2, &[(0, 0), (0, 1), (1, 1)]);
        let b = d(0, 2, &[(1, 1), (1, 0), (0, 0)]);
        assert_eq!(a, b);
        let theta = d(0, 2, &[(0, 1), (0, 1), (0, 1)]);
        assert_ne!(a.canonical(), theta.canonical());
    }

    #[test]
    fn marked_vertices_are_distinguished() {
        let a = d(2, 0, &[(0, 0)]);
        let b = d(2, 0, &[(1, 1)]);
        assert_ne!(a, b);
        assert_eq!(a.aut(), 2);
        let all = enumerate(0, 1).unwrap();
        // isolated marked vertex (−χ = −1); at −χ = 0 the marked vertex with
        // a self-loop, the marked vertex joined to a vertex carrying a
        // self-loop, and the isolated marked vertex next to each of the three
        // two-loop vacuum diagrams
        assert_eq!(all.len(), 6);
        assert_eq!(all.iter().filter(|g| g.minus_chi() == -1).count(), 1);
    }

    #[test]
    fn pairings_examples() {
        assert!(pairings(3).is_empty());
        assert_eq!(pairings(4).len(), 3);
        assert_eq!(pairings(2), vec![vec![(1, 2)]]);
        assert_eq!(pairings(6).len(), 15);
        assert_eq!(pairings(8).len(), 105);
        for p in pairings(6) {
            assert!(p.windows(2).all(|w| w[0].0 < w[1].0));
            assert!(p.iter().all(|(a, b)| a < b));
        }
    }

    #[test]
    fn ceiling() {
        assert_eq!(enumerate(5, 0).unwrap_err(), GraphError::LimitExceeded(5));
    }

    #[test]
    fn components_split() {
        let g = d(0, 2, &[(0, 0), (0, 0), (1, 1), (1, 1)]);
        let c = g.components();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0], c[1]);
        assert_eq!(g.aut(), 128);
    }
}

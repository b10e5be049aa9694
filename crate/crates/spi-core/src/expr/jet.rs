//! Truncated multivariate Taylor arithmetic.
//!
//! A [`Jet`] stores `∂^α f / α!` for every multi-index `|α| ≤ N` over its
//! active variables. Products are truncated convolutions; elementary
//! functions are composed through their univariate Taylor coefficients.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::{BinOp, ExprError, Func, Node};

/// Monomial bookkeeping shared by all jets with the same (variables, order).
#[derive(Debug)]
pub struct JetLayout {
    nvars: usize,
    order: usize,
    monomials: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
    /// `(i, j, k)`: monomial i times monomial j lands on monomial k.
    products: Vec<(u32, u32, u32)>,
}

impl JetLayout {
    pub fn get(nvars: usize, order: usize) -> Arc<JetLayout> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<JetLayout>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut guard = cache.lock().expect("jet layout cache poisoned");
        guard
            .entry((nvars, order))
            .or_insert_with(|| Arc::new(JetLayout::build(nvars, order)))
            .clone()
    }

    fn build(nvars: usize, order: usize) -> JetLayout {
        let mut monomials = Vec::new();
        for deg in 0..=order {
            let mut cur = vec![0u8; nvars];
            push_degree(&mut monomials, &mut cur, 0, deg);
        }
        let index: HashMap<Vec<u8>, usize> =
            monomials.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        let degree = |m: &[u8]| m.iter().map(|&x| x as usize).sum::<usize>();
        let mut products = Vec::new();
        for (i, a) in monomials.iter().enumerate() {
            let da = degree(a);
            for (j, b) in monomials.iter().enumerate() {
                if da + degree(b) > order {
                    continue;
                }
                let sum: Vec<u8> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                products.push((i as u32, j as u32, index[&sum] as u32));
            }
        }
        JetLayout { nvars, order, monomials, index, products }
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn monomial(&self, i: usize) -> &[u8] {
        &self.monomials[i]
    }

    pub fn position(&self, exps: &[u8]) -> Option<usize> {
        self.index.get(exps).copied()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }
}

// Monomials of exact degree `deg`, in reverse-lexicographic order within the degree.
fn push_degree(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, var: usize, deg: usize) {
    let n = cur.len();
    if n == 0 {
        if deg == 0 {
            out.push(Vec::new());
        }
        return;
    }
    if var + 1 == n {
        cur[var] = deg as u8;
        out.push(cur.clone());
        cur[var] = 0;
        return;
    }
    for k in (0..=deg).rev() {
        cur[var] = k as u8;
        push_degree(out, cur, var + 1, deg - k);
    }
    cur[var] = 0;
}

#[derive(Debug, Clone)]
pub struct Jet {
    layout: Arc<JetLayout>,
    /// Scope index of each jet variable.
    vars: Arc<[usize]>,
    c: Vec<f64>,
}

impl Jet {
    pub fn constant(layout: &Arc<JetLayout>, vars: &Arc<[usize]>, x: f64) -> Jet {
        let mut c = vec![0.0; layout.len()];
        c[0] = x;
        Jet { layout: layout.clone(), vars: vars.clone(), c }
    }

    fn variable(layout: &Arc<JetLayout>, vars: &Arc<[usize]>, j: usize, x: f64) -> Jet {
        let mut jet = Jet::constant(layout, vars, x);
        if layout.order >= 1 {
            let mut e = vec![0u8; layout.nvars];
            e[j] = 1;
            jet.c[layout.index[&e]] = 1.0;
        }
        jet
    }

    pub fn order(&self) -> usize {
        self.layout.order
    }

    pub fn layout(&self) -> &Arc<JetLayout> {
        &self.layout
    }

    /// Scope indices of the active variables.
    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.c
    }

    /// Scaled coefficient `∂^α f / α!` for exponents over the jet variables.
    pub fn coeff(&self, exps: &[u8]) -> f64 {
        self.layout.position(exps).map_or(0.0, |i| self.c[i])
    }

    /// Mixed partial `∂ⁿ f / ∂x_{s1}..∂x_{sn}` for scope variable indices `s`.
    ///
    /// Panics if a listed variable is not active in this jet or the order is
    /// exceeded.
    pub fn partial(&self, scope_vars: &[usize]) -> f64 {
        assert!(scope_vars.len() <= self.layout.order, "jet order insufficient");
        let mut e = vec![0u8; self.layout.nvars];
        for s in scope_vars {
            let j = self
                .vars
                .iter()
                .position(|v| v == s)
                .unwrap_or_else(|| panic!("variable {s} is not active in this jet"));
            e[j] += 1;
        }
        let fact: f64 = e.iter().map(|&k| factorial(k as usize)).product();
        self.coeff(&e) * fact
    }

    /// Same as [`Jet::partial`] but with jet-variable indices.
    pub fn partial_local(&self, jet_vars: &[usize]) -> f64 {
        let mut e = vec![0u8; self.layout.nvars];
        for &j in jet_vars {
            e[j] += 1;
        }
        if e.iter().map(|&x| x as usize).sum::<usize>() > self.layout.order {
            panic!("jet order insufficient");
        }
        let fact: f64 = e.iter().map(|&k| factorial(k as usize)).product();
        self.coeff(&e) * fact
    }

    fn zip(&self, other: &Jet, f: impl Fn(f64, f64) -> f64) -> Jet {
        let c = self.c.iter().zip(&other.c).map(|(&a, &b)| f(a, b)).collect();
        Jet { layout: self.layout.clone(), vars: self.vars.clone(), c }
    }

    pub fn add(&self, other: &Jet) -> Jet {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Jet) -> Jet {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Jet {
        let c = self.c.iter().map(|&a| a * s).collect();
        Jet { layout: self.layout.clone(), vars: self.vars.clone(), c }
    }

    pub fn mul(&self, other: &Jet) -> Jet {
        let mut c = vec![0.0; self.c.len()];
        for &(i, j, k) in &self.layout.products {
            c[k as usize] += self.c[i as usize] * other.c[j as usize];
        }
        Jet { layout: self.layout.clone(), vars: self.vars.clone(), c }
    }

    /// `Σ_k taylor[k] · (self − self₀)^k`, i.e. `f(self)` given the Taylor
    /// coefficients of `f` at the constant part.
    pub fn compose(&self, taylor: &[f64]) -> Jet {
        let n = self.layout.order;
        let mut h = self.clone();
        h.c[0] = 0.0;
        let mut r = Jet::constant(&self.layout, &self.vars, taylor[n]);
        for k in (0..n).rev() {
            r = r.mul(&h);
            r.c[0] += taylor[k];
        }
        r
    }

    fn powi(&self, mut n: u64) -> Jet {
        let mut base = self.clone();
        let mut acc = Jet::constant(&self.layout, &self.vars, 1.0);
        while n > 0 {
            if n & 1 == 1 {
                acc = acc.mul(&base);
            }
            n >>= 1;
            if n > 0 {
                base = base.mul(&base);
            }
        }
        acc
    }

    fn recip(&self) -> Result<Jet, ExprError> {
        let x = self.c[0];
        if x == 0.0 {
            return Err(ExprError::Domain("division by zero".into()));
        }
        let t: Vec<f64> = (0..=self.layout.order)
            .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 } / x.powi(k as i32 + 1))
            .collect();
        Ok(self.compose(&t))
    }

    fn powf(&self, p: f64) -> Result<Jet, ExprError> {
        let x = self.c[0];
        if x <= 0.0 {
            return Err(ExprError::Domain(format!("real power {p} of non-positive value {x}")));
        }
        let mut t = Vec::with_capacity(self.layout.order + 1);
        let mut binom = 1.0;
        for k in 0..=self.layout.order {
            t.push(binom * x.powf(p - k as f64));
            binom *= (p - k as f64) / (k as f64 + 1.0);
        }
        Ok(self.compose(&t))
    }

    fn apply(&self, f: Func) -> Result<Jet, ExprError> {
        let x = self.c[0];
        let n = self.layout.order;
        let t: Vec<f64> = match f {
            Func::Exp => (0..=n).map(|k| x.exp() / factorial(k)).collect(),
            Func::Sin => (0..=n)
                .map(|k| (x + k as f64 * std::f64::consts::FRAC_PI_2).sin() / factorial(k))
                .collect(),
            Func::Cos => (0..=n)
                .map(|k| (x + k as f64 * std::f64::consts::FRAC_PI_2).cos() / factorial(k))
                .collect(),
            Func::Log => {
                if x <= 0.0 {
                    return Err(ExprError::Domain(format!("log of non-positive value {x}")));
                }
                (0..=n)
                    .map(|k| {
                        if k == 0 {
                            x.ln()
                        } else {
                            let s = if k % 2 == 1 { 1.0 } else { -1.0 };
                            s / (k as f64 * x.powi(k as i32))
                        }
                    })
                    .collect()
            }
            Func::Sqrt => {
                if x < 0.0 || (x == 0.0 && n > 0) {
                    return Err(ExprError::Domain(format!("sqrt at non-positive value {x}")));
                }
                if n == 0 {
                    vec![x.sqrt()]
                } else {
                    return self.powf(0.5);
                }
            }
            Func::Tanh => tanh_taylor(x, n),
        };
        Ok(self.compose(&t))
    }

    fn check_finite(self) -> Result<Jet, ExprError> {
        if self.c.iter().all(|x| x.is_finite()) {
            Ok(self)
        } else {
            Err(ExprError::NonFinite)
        }
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

// Taylor coefficients of tanh at x: tanh^(k) is a polynomial in t = tanh x,
// with P_{k+1}(t) = P_k'(t)(1 − t²).
fn tanh_taylor(x: f64, n: usize) -> Vec<f64> {
    let t = x.tanh();
    let mut poly = vec![0.0, 1.0];
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let val = poly.iter().rev().fold(0.0, |acc, &c| acc * t + c);
        out.push(val / factorial(k));
        let deriv: Vec<f64> = poly.iter().enumerate().skip(1).map(|(i, &c)| c * i as f64).collect();
        let mut next = vec![0.0; deriv.len() + 2];
        for (i, &c) in deriv.iter().enumerate() {
            next[i] += c;
            next[i + 2] -= c;
        }
        poly = next;
    }
    out
}

/// Evaluate `node` as a jet in the scope variables `vars` at `point`.
pub(super) fn eval_node(
    node: &Node,
    point: &[f64],
    vars: &[usize],
    order: usize,
) -> Result<Jet, ExprError> {
    let layout = JetLayout::get(vars.len(), order);
    let vars: Arc<[usize]> = vars.into();
    eval_rec(node, point, &layout, &vars)
}

fn eval_rec(
    node: &Node,
    point: &[f64],
    layout: &Arc<JetLayout>,
    vars: &Arc<[usize]>,
) -> Result<Jet, ExprError> {
    let r = match node {
        Node::Num(x) | Node::Param(_, x) => Jet::constant(layout, vars, *x),
        Node::Var(i) => match vars.iter().position(|v| v == i) {
            Some(j) => Jet::variable(layout, vars, j, point[*i]),
            None => Jet::constant(layout, vars, point[*i]),
        },
        Node::Neg(a) => eval_rec(a, point, layout, vars)?.scale(-1.0),
        Node::Call(f, a) => eval_rec(a, point, layout, vars)?.apply(*f)?,
        Node::Bin(op, a, b) => {
            let x = eval_rec(a, point, layout, vars)?;
            match op {
                BinOp::Add => x.add(&eval_rec(b, point, layout, vars)?),
                BinOp::Sub => x.sub(&eval_rec(b, point, layout, vars)?),
                BinOp::Mul => x.mul(&eval_rec(b, point, layout, vars)?),
                BinOp::Div => x.mul(&eval_rec(b, point, layout, vars)?.recip()?),
                BinOp::Pow => {
                    if b.is_constant() {
                        let p = b.eval(point)?;
                        if p.fract() == 0.0 && p.abs() < 1e9 {
                            if p >= 0.0 {
                                x.powi(p as u64)
                            } else {
                                x.recip()?.powi((-p) as u64)
                            }
                        } else {
                            x.powf(p)?
                        }
                    } else {
                        if x.value() <= 0.0 {
                            return Err(ExprError::Domain(
                                "variable exponent needs a positive base".into(),
                            ));
                        }
                        let y = eval_rec(b, point, layout, vars)?;
                        y.mul(&x.apply(Func::Log)?).apply(Func::Exp)?
                    }
                }
            }
        }
    };
    r.check_finite()
}

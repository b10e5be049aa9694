use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use proptest::prelude::*;
use spi_core::expr::{parse_in_scope, Expression, Scope};
use spi_core::stphase::{
    derivatives_from_jet, formal_integral, gaussian_moment, numeric_oracle, Region, SymTensor,
};

fn coords(src: &str, n: usize) -> Expression {
    parse_in_scope(src, Arc::new(Scope::coordinates("x", n)), &BTreeMap::new()).unwrap()
}

/// Quadratic form and polynomial perturbation in `n ≤ 2` variables.
#[derive(Debug, Clone)]
struct Model {
    n: usize,
    h: [[f64; 2]; 2],
    cubic: Vec<f64>,
    quartic: Vec<f64>,
}

fn monomials(n: usize, deg: usize) -> Vec<String> {
    if n == 1 {
        return vec![format!("x1^{deg}")];
    }
    (0..=deg).map(|k| format!("x1^{}*x2^{}", k, deg - k)).collect()
}

impl Model {
    fn quadratic(&self) -> String {
        if self.n == 1 {
            format!("{}*x1^2/2", self.h[0][0])
        } else {
            format!(
                "({}*x1^2 + 2*{}*x1*x2 + {}*x2^2)/2",
                self.h[0][0], self.h[0][1], self.h[1][1]
            )
        }
    }

    fn perturbation(&self) -> String {
        let mut terms = Vec::new();
        for (c, m) in self.cubic.iter().zip(monomials(self.n, 3)) {
            terms.push(format!("({c})*{m}"));
        }
        for (c, m) in self.quartic.iter().zip(monomials(self.n, 4)) {
            terms.push(format!("({c})*{m}"));
        }
        terms.join(" + ")
    }

    fn full(&self) -> String {
        format!("{} + {}", self.quadratic(), self.perturbation())
    }

    fn hessian(&self) -> SymTensor {
        SymTensor::from_fn(self.n, 2, |i| self.h[i[0]][i[1]])
    }
}

fn model() -> impl Strategy<Value = Model> {
    (1usize..=2).prop_flat_map(|n| {
        (
            Just(n),
            0.5f64..2.0,
            -0.3f64..0.3,
            0.5f64..2.0,
            prop::collection::vec(-0.3f64..0.3, n + 2),
            prop::collection::vec(-0.3f64..0.3, n + 3),
        )
            .prop_map(|(n, a, b, c, cubic, quartic)| {
                let mut cubic = cubic;
                let mut quartic = quartic;
                cubic.truncate(if n == 1 { 1 } else { 4 });
                quartic.truncate(if n == 1 { 1 } else { 5 });
                Model { n, h: [[a, b], [b, c]], cubic, quartic }
            })
    })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Coefficient of (iħ)^m obtained by expanding exp(−V/(iħ)) in powers of V
/// and taking Gaussian moments of each homogeneous piece.
fn brute_wick(m: &Model, max_order: i64) -> BTreeMap<i64, f64> {
    let mut out = BTreeMap::new();
    let h = m.hessian();
    let v = m.perturbation();
    let zero = vec![0.0; m.n];
    for k in 0..=(2 * max_order as usize) {
        let vk = if k == 0 { coords("1", m.n) } else { coords(&format!("({v})^{k}"), m.n) };
        let top = 2 * (max_order as usize + k);
        let jet = vk.jet(&zero, top).unwrap();
        for d in (0..=top).step_by(2) {
            let order = d as i64 / 2 - k as i64;
            if order < 0 || order > max_order {
                continue;
            }
            let t = SymTensor::from_jet(&jet, d);
            let moment = gaussian_moment(&t, &h).unwrap() / factorial(d);
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            *out.entry(order).or_insert(0.0) += sign * moment / factorial(k);
        }
    }
    out
}

fn series(src: &str, n: usize, max_order: usize) -> BTreeMap<i64, f64> {
    let jet = coords(src, n).jet(&vec![0.0; n], 2 * max_order + 2).unwrap();
    let derivs = derivatives_from_jet(&jet, 2 * max_order + 2);
    formal_integral(&derivs, None, 0, max_order).unwrap().series
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn diagram_sum_matches_brute_force_wick(m in model()) {
        let got = series(&m.full(), m.n, 2);
        let want = brute_wick(&m, 2);
        for order in 0..=2 {
            let (a, b) = (got[&order], want[&order]);
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-3), "order {}: {} vs {}", order, a, b);
        }
    }

    #[test]
    fn unimodular_linear_maps_preserve_series(m in model(), s in -1.0f64..1.0, r in 0.5f64..2.0) {
        prop_assume!(m.n == 2);
        // T = [[r, s], [0, 1/r]]
        let sub = format!("({r}*y1 + ({s})*y2)");
        let sub2 = format!("(y2/{r})");
        let src = m.full().replace("x1", "#1").replace("x2", "#2").replace("#1", &sub).replace("#2", &sub2).replace('y', "x");
        let a = series(&m.full(), 2, 2);
        let b = series(&src, 2, 2);
        for order in 1..=2 {
            prop_assert!((a[&order] - b[&order]).abs() <= 1e-10 * a[&order].abs().max(1e-3));
        }
    }

    #[test]
    fn odd_moments_vanish(n in 1usize..=3, rank in (0usize..4).prop_map(|k| 2 * k + 1), seed in 0u64..1000) {
        let b = SymTensor::from_fn(n, rank, |i| ((seed as usize + i.iter().sum::<usize>()) % 7) as f64 - 3.0);
        let a = SymTensor::from_fn(n, 2, |i| if i[0] == i[1] { 2.0 } else { 0.3 });
        prop_assert_eq!(gaussian_moment(&b, &a).unwrap(), 0.0);
    }
}

#[test]
fn quartic_and_cubic_first_order() {
    let g = 0.7;
    let s = series(&format!("x^2/2 + {g}*x^4/24"), 1, 1);
    assert!((s[&1] + g / 8.0).abs() < 1e-14);
    let c = 0.9;
    let s = series(&format!("x^2/2 + {c}*x^3/6"), 1, 1);
    assert!((s[&1] - 5.0 / 24.0 * c * c).abs() < 1e-14);
}

#[test]
fn gaussian_oracle_and_constant_insertion() {
    let hbar = 0.1;
    let region = Region { center: vec![0.0], half_width: vec![8.0] };
    let a = |x: &[f64]| x[0] * x[0] / 2.0;
    let plain = numeric_oracle(&a, None, &region, hbar).unwrap();
    let exact = (Complex64::new(0.0, 2.0 * std::f64::consts::PI * hbar)).sqrt();
    assert!((plain - exact).norm() < 1e-10);
    let one = |_: &[f64]| 1.0;
    let with_b = numeric_oracle(&a, Some(&one), &region, hbar).unwrap();
    assert!((with_b - plain / Complex64::new(0.0, hbar)).norm() < 1e-12 * with_b.norm());
}

/// Closed-form Gaussian moments give the full quartic series
/// `a_n = (−1/24)^n (4n−1)!!/n!`; the oracle must follow the partial sums
/// beyond the orders the acceptance sweep inspects.
#[test]
fn oracle_follows_known_quartic_series() {
    let a = |n: i32| -> f64 {
        let dfact: f64 = (1..4 * n).step_by(2).map(|k| k as f64).product();
        let fact: f64 = (1..=n).map(|k| k as f64).product();
        (-1.0f64 / 24.0).powi(n) * dfact / fact
    };
    let s = series("x^2/2 + x^4/24", 1, 2);
    assert!((s[&1] - a(1)).abs() < 1e-14 && (s[&2] - a(2)).abs() < 1e-14);
    let region = Region { center: vec![0.0], half_width: vec![8.0] };
    let action = |x: &[f64]| x[0] * x[0] / 2.0 + x[0].powi(4) / 24.0;
    for hbar in [0.1, 0.05] {
        let i = numeric_oracle(&action, None, &region, hbar).unwrap();
        let eps = Complex64::new(0.0, hbar);
        let pref = (2.0 * std::f64::consts::PI * eps).sqrt();
        let partial: Complex64 = (0..=4).map(|n| eps.powi(n) * a(n)).sum();
        let err = (i / pref - partial).norm();
        assert!(err < 2.0 * a(5).abs() * hbar.powi(5), "ħ = {hbar}: {err:e}");
    }
}

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use spi_core::amplitude::CoincidenceRule;
use spi_core::classical::{solve_bvp, Problem, Trajectory};
use spi_core::expr::{parse, Expression};
use spi_core::harness::{coordinate_check, fubini_check, pullback, RunConfig};
use spi_core::quad::integrate;

const DET1: &str = "0.5*(exp(0.3*q1)*v1^2 + exp(-0.3*q1)*v2^2)";
const SHEAR: [&str; 2] = ["q1 + 0.2*sin(q2)", "q2"];

fn coords_config(rule: &str) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
[problem]
dimension = 2
lagrangian = "{DET1}"
t0 = 0.0
t1 = 1.0
q0 = [0.0, 0.0]
q1 = [0.5, 0.4]

[compute]
loop_order = 1
quad_order = 32
coincidence = "{rule}"

[coords]
map = ["{}", "{}"]
"#,
        SHEAR[0], SHEAR[1]
    ))
    .unwrap()
}

/// Christoffel symbols `Γ^l_{ik}` of `g = ∂²L/∂v∂v` at the path point.
fn christoffel(l: &Expression, traj: &Trajectory, t: f64) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let d = traj.d();
    let jet = l.jet(&traj.lagrangian_point(t), 3).unwrap();
    let g = DMatrix::from_fn(d, d, |i, j| jet.partial(&[1 + i, 1 + j]));
    let dg = |m: usize, i: usize, k: usize| jet.partial(&[1 + m, 1 + i, 1 + d + k]);
    let ginv = g.clone().try_inverse().unwrap();
    let gamma = (0..d)
        .map(|l| {
            DMatrix::from_fn(d, d, |i, k| {
                (0..d).map(|m| 0.5 * ginv[(l, m)] * (dg(m, i, k) + dg(m, k, i) - dg(i, k, m))).sum()
            })
        })
        .collect();
    (g, gamma)
}

/// `(∫g^{ij}Γ^l_{ik}Γ^k_{jl}, ∫g^{ij}g_{kl}g^{mn}Γ^k_{im}Γ^l_{jn})` along the path.
fn gamma_gamma_integrals(l: &Expression, traj: &Trajectory) -> (f64, f64) {
    let d = traj.d();
    let at = |t: f64| {
        let (g, gam) = christoffel(l, traj, t);
        let gi = g.clone().try_inverse().unwrap();
        let mut ts = 0.0;
        let mut mr = 0.0;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for ll in 0..d {
                        ts += gi[(i, j)] * gam[ll][(i, k)] * gam[k][(j, ll)];
                        for m in 0..d {
                            for n in 0..d {
                                mr += gi[(i, j)] * g[(k, ll)] * gi[(m, n)] * gam[k][(i, m)] * gam[ll][(j, n)];
                            }
                        }
                    }
                }
            }
        }
        (ts, mr)
    };
    let ts = integrate(traj.t0(), traj.t1(), 40, |t| at(t).0);
    let mr = integrate(traj.t0(), traj.t1(), 40, |t| at(t).1);
    (ts, mr)
}

fn paths() -> ((Expression, Trajectory), (Expression, Trajectory)) {
    let none = BTreeMap::new();
    let l = parse(DET1, 2, &none).unwrap();
    let a = solve_bvp(&Problem::new(l.clone(), 0.0, 1.0, vec![0.0, 0.0], vec![0.5, 0.4], None).unwrap()).unwrap();
    let map: Vec<Expression> = SHEAR.iter().map(|s| parse(s, 2, &none).unwrap()).collect();
    let lt = pullback(&l, &map);
    // inverse of the shear at the far endpoint
    let q1t = vec![0.5 - 0.2 * f64::sin(0.4), 0.4];
    let b = solve_bvp(&Problem::new(lt.clone(), 0.0, 1.0, vec![0.0, 0.0], q1t, None).unwrap()).unwrap();
    ((l, a), (lt, b))
}

/// The order-1 coordinate dependence of each pointwise coincidence rule is
/// the non-covariant ΓΓ counterterm of the matching lattice scheme.
#[test]
fn coordinate_residual_is_the_scheme_counterterm() {
    let ((l, a), (lt, b)) = paths();
    let (ts_a, mr_a) = gamma_gamma_integrals(&l, &a);
    let (ts_b, mr_b) = gamma_gamma_integrals(&lt, &b);

    let residual = |rule: &str| {
        let report = coordinate_check(&coords_config(rule)).unwrap();
        let row = report.row(1).unwrap();
        row.lhs.coeff(0) - row.rhs.coeff(0)
    };
    let fa = residual("factor-average");
    let want = (ts_a - ts_b) / 8.0;
    assert!((fa - want).abs() < 1e-5 * want.abs(), "factor average {fa} vs {want}");
    let int = residual("integrated");
    let want = -(mr_a - mr_b) / 24.0;
    assert!((int - want).abs() < 1e-4 * want.abs(), "integrated {int} vs {want}");
}

#[test]
fn affine_shear_is_invariant() {
    let mut cfg = coords_config("factor-average");
    cfg.coords.as_mut().unwrap().map = vec!["q1 + 0.3*q2".into(), "q2".into()];
    // Christoffel symbols transform as tensors under linear maps, so no
    // rule picks up a counterterm difference
    for rule in [CoincidenceRule::FactorAverage, CoincidenceRule::OrderingAverage, CoincidenceRule::Integrated] {
        cfg.compute.coincidence = rule;
        let r = coordinate_check(&cfg).unwrap();
        assert!(r.pass, "{rule:?}: {}", r.to_json());
    }
}

fn fubini_config(lagrangian: &str, q0: f64, q1: f64, split: f64) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
[problem]
dimension = 1
lagrangian = "{lagrangian}"
t0 = 0.0
t1 = 1.0
q0 = [{q0}]
q1 = [{q1}]

[compute]
loop_order = 1
quad_order = 16

[fubini]
split_time = {split}
"#
    ))
    .unwrap()
}

#[test]
fn fubini_free_and_harmonic_at_midpoint() {
    for l in ["v^2/2", "v^2/2 - q^2/2"] {
        let r = fubini_check(&fubini_config(l, 0.2, 0.5, 0.5)).unwrap();
        assert!(r.pass, "{l}: {}", r.to_json());
        let det = r.scalar("abs_det_W").unwrap();
        assert!(det.rel_residual <= 1e-8);
        let eta = r.scalar("morse_index").unwrap();
        assert_eq!(eta.lhs, eta.rhs);
    }
}

#[test]
fn fubini_flat_quartic() {
    let r = fubini_check(&fubini_config("v^2/2 - 0.1*q^4", 0.3, 0.7, 0.4)).unwrap();
    let row = r.row(1).unwrap();
    assert!(row.rel_residual <= 1e-3, "{}", r.to_json());
    assert!(r.pass);
}

#[test]
fn reports_are_deterministic() {
    let cfg = fubini_config("v^2/2 - 0.1*q^4", 0.3, 0.7, 0.4);
    let a = fubini_check(&cfg).unwrap().to_json();
    let b = fubini_check(&cfg).unwrap().to_json();
    assert_eq!(a, b);
}

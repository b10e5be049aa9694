//! Dormand–Prince 5(4) with step recording and cubic Hermite dense output.

#[derive(Debug, Clone, Copy)]
pub struct OdeConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Largest step as a fraction of the interval length.
    pub max_step_fraction: f64,
    pub max_steps: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig { rtol: 1e-12, atol: 1e-13, max_step_fraction: 1.0 / 256.0, max_steps: 200_000 }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub t: f64,
    pub y: Vec<f64>,
    pub f: Vec<f64>,
}

/// Accepted steps of an integration; interpolates between them.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    nodes: Vec<Node>,
}

impl DenseSolution {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn t_start(&self) -> f64 {
        self.nodes[0].t
    }

    pub fn t_end(&self) -> f64 {
        self.nodes.last().unwrap().t
    }

    pub fn last(&self) -> &Node {
        self.nodes.last().unwrap()
    }

    fn locate(&self, t: f64) -> usize {
        let n = self.nodes.len();
        match self.nodes.binary_search_by(|nd| nd.t.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        }
    }

    /// Interpolated state at `t` (clamped to the integration interval).
    pub fn state(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(self.t_start(), self.t_end());
        let i = self.locate(t);
        let (a, b) = (&self.nodes[i], &self.nodes[i + 1]);
        let h = b.t - a.t;
        let s = (t - a.t) / h;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        (0..a.y.len())
            .map(|k| h00 * a.y[k] + h * h10 * a.f[k] + h01 * b.y[k] + h * h11 * b.f[k])
            .collect()
    }

    /// Derivative of the interpolant at `t`.
    pub fn derivative(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(self.t_start(), self.t_end());
        let i = self.locate(t);
        let (a, b) = (&self.nodes[i], &self.nodes[i + 1]);
        let h = b.t - a.t;
        let s = (t - a.t) / h;
        let d00 = 6.0 * s * (s - 1.0) / h;
        let d10 = (1.0 - s) * (1.0 - 3.0 * s);
        let d01 = -d00;
        let d11 = s * (3.0 * s - 2.0);
        (0..a.y.len())
            .map(|k| d00 * a.y[k] + d10 * a.f[k] + d01 * b.y[k] + d11 * b.f[k])
            .collect()
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OdeError<E> {
    #[error("right-hand side failed at t = {t}: {source}")]
    Rhs { t: f64, source: E },
    #[error("step size underflow at t = {0}")]
    StepUnderflow(f64),
    #[error("too many steps")]
    TooManySteps,
}

/// Integrate `y' = f(t, y)` from `t0` to `t1 > t0`.
pub fn integrate<E>(
    mut f: impl FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
    t0: f64,
    y0: Vec<f64>,
    t1: f64,
    cfg: &OdeConfig,
) -> Result<DenseSolution, OdeError<E>> {
    let n = y0.len();
    let span = t1 - t0;
    let h_max = span * cfg.max_step_fraction;
    let f0 = f(t0, &y0).map_err(|e| OdeError::Rhs { t: t0, source: e })?;
    let mut nodes = vec![Node { t: t0, y: y0, f: f0 }];
    let mut h = h_max * 0.25;
    let mut t = t0;
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    for _ in 0..cfg.max_steps {
        if t >= t1 {
            return Ok(DenseSolution { nodes });
        }
        let last = nodes.last().unwrap();
        let y = last.y.clone();
        let mut hh = h.min(h_max);
        let mut final_step = false;
        if t + hh >= t1 - 1e-14 * span {
            hh = t1 - t;
            final_step = true;
        }
        k[0] = last.f.clone();
        let mut failed = None;
        for s in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += hh * A[s][j] * kj[i];
                }
                tmp[i] = acc;
            }
            match f(t + C[s] * hh, &tmp) {
                Ok(v) => k[s] = v,
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failed {
            h = hh * 0.25;
            if h < 1e-14 * span {
                return Err(OdeError::Rhs { t, source: e });
            }
            continue;
        }
        let mut y5 = vec![0.0; n];
        let mut err = 0.0;
        for i in 0..n {
            let mut s5 = y[i];
            let mut s4 = y[i];
            for s in 0..7 {
                s5 += hh * B5[s] * k[s][i];
                s4 += hh * B4[s] * k[s][i];
            }
            y5[i] = s5;
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(s5.abs());
            err += ((s5 - s4) / sc).powi(2);
        }
        let err = (err / n as f64).sqrt();
        if err <= 1.0 {
            t = if final_step { t1 } else { t + hh };
            // FSAL: stage 7 is f at the new point
            nodes.push(Node { t, y: y5, f: k[6].clone() });
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = hh * fac;
        } else {
            h = hh * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            if h < 1e-14 * span {
                return Err(OdeError::StepUnderflow(t));
            }
        }
    }
    Err(OdeError::TooManySteps)
}

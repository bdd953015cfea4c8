//! Brute-force reference computations used to check the flow and the
//! classifier independently of their production code paths.

mod battery;

pub use battery::{run_checks, CheckReport, CheckResult, CheckSelector, Fault};

use thiserror::Error;

use crate::flow::{self, Density, EulerStep, FlowConfig, FlowError};
use crate::graph::WeightedGraph;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("path optimization did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("graph is disconnected")]
    DisconnectedGraph,
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("reference flow left the simplex interior at step {step}")]
    LostPositivity { step: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Two nodes joined by one edge of weight `w`, with endpoint densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoNodeInstance {
    pub w: f64,
    pub p0: [f64; 2],
    pub p1: [f64; 2],
}

impl TwoNodeInstance {
    /// Builds an instance from the first-node masses of both endpoints.
    pub fn new(w: f64, a: f64, b: f64) -> Result<Self, OracleError> {
        let inst = TwoNodeInstance {
            w,
            p0: [a, 1.0 - a],
            p1: [b, 1.0 - b],
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.w > 0.0 && self.w.is_finite()) {
            return Err(OracleError::InvalidInstance(format!("edge weight {} must be positive", self.w)));
        }
        for p in [self.p0, self.p1] {
            if p.iter().any(|&x| !(x > 0.0 && x < 1.0)) || ((p[0] + p[1]) - 1.0).abs() > 1e-12 {
                return Err(OracleError::InvalidInstance(format!("{p:?} is not an interior density")));
            }
        }
        Ok(())
    }

    /// Start and end mass of the node that gives mass away.
    fn donor_masses(&self) -> (f64, f64) {
        let d = if self.p1[0] <= self.p0[0] { 0 } else { 1 };
        (self.p0[d], self.p1[d])
    }
}

/// `(4 / w) (sqrt(a) - sqrt(b))^2` with `a`, `b` the donor's start and end mass.
///
/// Along a monotone transfer the action density is `(db/dt)^2 / (w b)`,
/// which becomes `4 (ds/dt)^2 / w` in `s = sqrt(b)`; a straight line in `s`
/// is optimal.
pub fn gw2_two_node_closed_form(inst: &TwoNodeInstance) -> f64 {
    let (a, b) = inst.donor_masses();
    let d = a.sqrt() - b.sqrt();
    4.0 / inst.w * d * d
}

/// Slice cost `(x - y) ln(x / y)`: the exact action of a constant velocity
/// moving the donor from mass `x` to `y`, times `w dt`.
fn slice_cost(x: f64, y: f64) -> f64 {
    if x == y {
        0.0
    } else {
        (x - y) * (x / y).ln()
    }
}

/// Minimum action over schedules with one constant velocity per time slice.
///
/// Unknowns are the donor masses at the interior knots. The objective is a
/// sum of jointly convex slice costs with a tridiagonal Hessian, minimized
/// by damped Newton iterations.
pub fn gw2_two_node_numeric(inst: &TwoNodeInstance, time_steps: usize) -> Result<f64, OracleError> {
    inst.validate()?;
    if time_steps < 10 {
        return Err(OracleError::InvalidInstance(format!("time_steps {time_steps} < 10")));
    }
    let (a, b) = inst.donor_masses();
    let k = time_steps;
    let scale = k as f64 / inst.w;
    if a == b {
        return Ok(0.0);
    }
    // knots b_0 = a, ..., b_k = b; start from the straight line in mass
    let mut knots: Vec<f64> = (0..=k).map(|t| a + (b - a) * t as f64 / k as f64).collect();
    let objective = |kn: &[f64]| -> f64 { kn.windows(2).map(|p| slice_cost(p[0], p[1])).sum() };

    let m = k - 1;
    let mut grad = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut off = vec![0.0; m.saturating_sub(1)];
    let mut current = objective(&knots);
    let mut last_decrement = f64::NAN;
    const MAX_ITERS: usize = 200;
    for _ in 0..MAX_ITERS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        diag.iter_mut().for_each(|h| *h = 0.0);
        for s in 0..k {
            let (x, y) = (knots[s], knots[s + 1]);
            let r = x / y;
            // d/dx, d/dy, d2/dx2, d2/dy2, d2/dxdy of (x - y) ln(x / y)
            let gx = r.ln() + 1.0 - y / x;
            let gy = -r.ln() + 1.0 - x / y;
            let hxx = 1.0 / x + y / (x * x);
            let hyy = 1.0 / y + x / (y * y);
            let hxy = -1.0 / x - 1.0 / y;
            if s >= 1 {
                grad[s - 1] += gx;
                diag[s - 1] += hxx;
            }
            if s < m {
                grad[s] += gy;
                diag[s] += hyy;
            }
            if s >= 1 && s < m {
                off[s - 1] = hxy;
            }
        }
        let step = solve_tridiagonal(&off, &diag, &off, &grad);
        // squared Newton decrement bounds the remaining suboptimality
        let decrement: f64 = grad.iter().zip(&step).map(|(g, d)| g * d).sum();
        if !decrement.is_finite() {
            break;
        }
        let tol = 1e-14 * current + 1e-18;
        if decrement <= tol {
            return Ok(scale * current);
        }
        last_decrement = decrement;
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = std::iter::once(a)
                .chain(knots[1..k].iter().zip(&step).map(|(x, d)| x - t * d))
                .chain(std::iter::once(b))
                .collect();
            if trial.iter().all(|&x| x > 0.0 && x < 1.0) {
                let val = objective(&trial);
                if val <= current {
                    knots = trial;
                    current = val;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-12 {
                // no descent left at machine precision
                return if decrement <= 1e4 * tol {
                    Ok(scale * current)
                } else {
                    Err(OracleError::NonConvergence {
                        iterations: MAX_ITERS,
                        residual: decrement,
                    })
                };
            }
        }
    }
    Err(OracleError::NonConvergence {
        iterations: MAX_ITERS,
        residual: last_decrement,
    })
}

/// Thomas algorithm for a tridiagonal system with sub-, main- and
/// super-diagonals `lower`, `diag`, `upper`.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = if n > 1 { upper[0] / diag[0] } else { 0.0 };
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - lower[i - 1] * c[i - 1];
        if i + 1 < n {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Check {
    /// First-node mass maximizing the proximal objective.
    pub lhs_argmax: f64,
    /// First-node mass maximizing the free energy inside the GW ball.
    pub rhs_argmax: f64,
    pub epsilon: f64,
}

fn two_node_free_energy(q1: f64, loss: [f64; 2], beta: f64) -> f64 {
    let q2 = 1.0 - q1;
    let ent = if beta == 0.0 { 0.0 } else { q1 * q1.ln() + q2 * q2.ln() };
    q1 * loss[0] + q2 * loss[1] - beta * ent
}

/// Compares the one-step proximal maximizer with the maximizer of the free
/// energy over the GW ball it sits on, both by grid search over
/// `q_1 = k / grid` on a unit-weight edge.
pub fn check_theorem1_two_node(
    loss: [f64; 2],
    p: [f64; 2],
    beta: f64,
    tau: f64,
    grid: usize,
) -> Result<Theorem1Check, OracleError> {
    if grid < 2 {
        return Err(OracleError::InvalidInstance("grid must be at least 2".into()));
    }
    if !(tau > 0.0) || !(beta >= 0.0) {
        return Err(OracleError::InvalidInstance("need tau > 0 and beta >= 0".into()));
    }
    let origin = TwoNodeInstance::new(1.0, p[0], p[0])?;
    let dist = |q1: f64| {
        gw2_two_node_closed_form(&TwoNodeInstance {
            p1: [q1, 1.0 - q1],
            ..origin
        })
    };
    let points: Vec<f64> = (1..grid).map(|k| k as f64 / grid as f64).collect();
    let argmax = |score: &dyn Fn(f64) -> Option<f64>| -> f64 {
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        for &q in &points {
            if let Some(s) = score(q) {
                if s > best.0 {
                    best = (s, q);
                }
            }
        }
        best.1
    };
    let lhs = argmax(&|q| Some(two_node_free_energy(q, loss, beta) - dist(q) / (2.0 * tau)));
    let epsilon = dist(lhs);
    let rhs = argmax(&|q| (dist(q) <= epsilon).then(|| two_node_free_energy(q, loss, beta)));
    Ok(Theorem1Check {
        lhs_argmax: lhs,
        rhs_argmax: rhs,
        epsilon,
    })
}

/// Progress ratios `(F(q_T) - F(u)) / (F(gibbs) - F(u))` at each checkpoint
/// step count, for the flow started at the uniform density `u`.
pub fn check_theorem2_trend(
    g: &WeightedGraph,
    loss: &[f64],
    beta: f64,
    cfg: &FlowConfig,
    checkpoints: &[usize],
) -> Result<Vec<f64>, OracleError> {
    theorem2_ratios(g, loss, beta, cfg, checkpoints, &|q, loss, g, cfg| {
        flow::euler_step(q, loss, g, cfg)
    })
}

type Stepper<'a> = &'a dyn Fn(&Density, &[f64], &WeightedGraph, &FlowConfig) -> Result<EulerStep, FlowError>;

pub(crate) fn theorem2_ratios(
    g: &WeightedGraph,
    loss: &[f64],
    beta: f64,
    cfg: &FlowConfig,
    checkpoints: &[usize],
    step: Stepper<'_>,
) -> Result<Vec<f64>, OracleError> {
    if g.connected_components().len() != 1 {
        return Err(OracleError::DisconnectedGraph);
    }
    if !(beta > 0.0) {
        return Err(OracleError::InvalidInstance("beta must be positive".into()));
    }
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(OracleError::InvalidInstance("checkpoints must be sorted".into()));
    }
    let cfg = FlowConfig { beta, ..cfg.clone() };
    let uniform = Density::uniform(g.num_nodes());
    let f_u = flow::free_energy(&uniform, loss, beta)?;
    let gibbs = flow::gibbs_stationary(loss, beta, g, &uniform)?;
    let gap = flow::free_energy(&gibbs, loss, beta)? - f_u;
    if !(gap > 0.0) {
        return Err(OracleError::InvalidInstance("uniform density is already stationary".into()));
    }
    let mut q = uniform;
    let mut done = 0usize;
    let mut ratios = Vec::with_capacity(checkpoints.len());
    for &t in checkpoints {
        while done < t {
            q = step(&q, loss, g, &cfg)?.density;
            done += 1;
        }
        ratios.push((flow::free_energy(&q, loss, beta)? - f_u) / gap);
    }
    Ok(ratios)
}

/// Central differences `(f(x + eps e_k) - f(x - eps e_k)) / (2 eps)`.
pub fn finite_diff_gradient(f: impl Fn(&[f64]) -> f64, params: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "eps must be positive");
    let mut x = params.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + eps;
            let up = f(&x);
            x[k] = orig - eps;
            let down = f(&x);
            x[k] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Plain forward Euler of the flow with `steps` equal steps covering
/// `total_time`, written node by node from the neighbour lists and with no
/// step control or renormalization.
pub fn fine_step_reference(
    q0: &Density,
    loss: &[f64],
    g: &WeightedGraph,
    beta: f64,
    total_time: f64,
    steps: usize,
) -> Result<Density, OracleError> {
    if steps == 0 {
        return Err(OracleError::InvalidInstance("steps must be at least 1".into()));
    }
    let n = g.num_nodes();
    if q0.len() != n || loss.len() != n {
        return Err(OracleError::InvalidInstance("length mismatch".into()));
    }
    let nbrs: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| g.neighbors(i).expect("node in range"))
        .collect();
    let tau = total_time / steps as f64;
    let mut q = q0.values().to_vec();
    let mut next = vec![0.0; n];
    for step in 0..steps {
        for i in 0..n {
            let mut rate = 0.0;
            for &(j, w) in &nbrs[i] {
                let v = loss[i] - loss[j] + beta * (q[j].ln() - q[i].ln());
                let donor = if v > 0.0 { q[j] } else { q[i] };
                rate += w * v * donor;
            }
            next[i] = q[i] + tau * rate;
        }
        if next.iter().any(|&x| !(x > 0.0)) {
            return Err(OracleError::LostPositivity { step });
        }
        std::mem::swap(&mut q, &mut next);
    }
    Ok(Density::from_weights(q)?)
}

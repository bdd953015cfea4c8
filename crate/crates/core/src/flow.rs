//! Gradient flow of the entropy-regularized weighted loss in the discrete
//! geometric Wasserstein space of a graph.
//!
//! Sample weights `q` evolve by mass transport along edges only:
//!
//! ```text
//! v_ij     = l_i - l_j + beta * (ln q_j - ln q_i)          (i, j) in E
//! xi_ij    = q_j if v_ij > 0 else q_i                      (upwind donor)
//! dq_i/dt  = sum_j w_ij * v_ij * xi_ij
//! ```
//!
//! and are advanced with forward Euler steps. The flow ascends the free
//! energy `sum q_i l_i - beta * sum q_i ln q_i`; its fixed point on a
//! connected component is the Gibbs density `exp(l / beta)` rescaled to the
//! component's mass.
//!
//! The action of one step (duration `tau`, constant velocity, rescaled to
//! unit time) is `tau^2 * 1/2 * sum_{(i,j) in E} w_ij xi_ij v_ij^2`, with the
//! sum over ordered pairs; that is `tau^2 * sum` over undirected edges. The
//! per-step actions add up to the trajectory's transport cost estimate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::WeightedGraph;

/// Tolerance on `|sum q - 1|` for a valid [`Density`].
pub const SUM_TOLERANCE: f64 = 1e-12;

/// A step only renormalizes when the transported mass drifts further than
/// this from one. Below it the update stays exactly local.
pub const RENORM_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("density is empty")]
    EmptyDensity,
    #[error("density entry {index} is not strictly positive: {value}")]
    NonPositiveDensity { index: usize, value: f64 },
    #[error("density sums to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("loss entry {index} is not finite: {value}")]
    NonFiniteLoss { index: usize, value: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("positivity not restored after {shrinks} step halvings (tau = {tau:e})")]
    StepShrinkExhausted { shrinks: u32, tau: f64 },
    #[error("beta must be positive for the Gibbs fixed point")]
    ZeroBeta,
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
}

/// Neumaier-compensated sum in fixed order.
pub(crate) fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Strictly positive probability vector over graph nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Density(Vec<f64>);

impl TryFrom<Vec<f64>> for Density {
    type Error = FlowError;
    fn try_from(v: Vec<f64>) -> Result<Self, FlowError> {
        Density::new(v)
    }
}

impl From<Density> for Vec<f64> {
    fn from(d: Density) -> Self {
        d.0
    }
}

impl Density {
    pub fn new(values: Vec<f64>) -> Result<Self, FlowError> {
        if values.is_empty() {
            return Err(FlowError::EmptyDensity);
        }
        for (index, &value) in values.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(FlowError::NonPositiveDensity { index, value });
            }
        }
        let sum = stable_sum(values.iter().copied());
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(FlowError::NotNormalized { sum });
        }
        Ok(Density(values))
    }

    /// Normalizes positive weights to sum one.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, FlowError> {
        for (index, &value) in weights.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(FlowError::NonPositiveDensity { index, value });
            }
        }
        let sum = stable_sum(weights.iter().copied());
        Density::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform density needs at least one node");
        Density(vec![1.0 / n as f64; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        stable_sum(self.0.iter().copied())
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -stable_sum(self.0.iter().map(|&q| q * q.ln()))
    }

    pub fn linf_distance(&self, other: &Density) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn total_variation(&self, other: &Density) -> f64 {
        0.5 * stable_sum(self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()))
    }

    /// Mass carried by a node subset.
    pub fn mass_of(&self, nodes: &[usize]) -> f64 {
        stable_sum(nodes.iter().map(|&i| self.0[i]))
    }
}

/// Per-edge velocities aligned with [`WeightedGraph::edges`]; entry `e`
/// is `v_ij` for the canonical orientation `i < j` (so `v_ji = -v_ij`).
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField(Vec<f64>);

impl VelocityField {
    pub fn from_edge_values(values: Vec<f64>) -> Self {
        VelocityField(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Oriented lookup: `v_ij` for any ordered pair, zero off the edge set.
    pub fn get(&self, g: &WeightedGraph, i: usize, j: usize) -> f64 {
        let (a, b, sign) = if i < j { (i, j, 1.0) } else { (j, i, -1.0) };
        match g.edges().binary_search_by(|e| (e.i, e.j).cmp(&(a, b))) {
            Ok(idx) => sign * self.0[idx],
            Err(_) => 0.0,
        }
    }

    pub fn negated(&self) -> Self {
        VelocityField(self.0.iter().map(|v| -v).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FlowConfig {
    pub beta: f64,
    pub tau: f64,
    pub t_in: usize,
    pub positivity_floor: f64,
    pub max_step_shrinks: u32,
    /// When halving cannot restore positivity, clamp at the floor and
    /// renormalize instead of failing.
    pub clamp_on_exhaustion: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            beta: 0.01,
            tau: 0.01,
            t_in: 10,
            positivity_floor: 1e-12,
            max_step_shrinks: 40,
            clamp_on_exhaustion: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self, num_nodes: usize) -> Result<(), FlowError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(FlowError::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(FlowError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.positivity_floor > 0.0 && self.positivity_floor * (num_nodes as f64) < 1.0) {
            return Err(FlowError::InvalidConfig(format!(
                "positivity floor {} must lie in (0, 1/N) for N = {num_nodes}",
                self.positivity_floor
            )));
        }
        Ok(())
    }
}

fn check_inputs(loss: &[f64], q: &Density, g: &WeightedGraph) -> Result<(), FlowError> {
    let n = g.num_nodes();
    if q.len() != n {
        return Err(FlowError::LengthMismatch {
            expected: n,
            got: q.len(),
        });
    }
    if loss.len() != n {
        return Err(FlowError::LengthMismatch {
            expected: n,
            got: loss.len(),
        });
    }
    if let Some((index, &value)) = loss.iter().enumerate().find(|(_, l)| !l.is_finite()) {
        return Err(FlowError::NonFiniteLoss { index, value });
    }
    Ok(())
}

/// `v_ij = l_i - l_j + beta (ln q_j - ln q_i)` on every edge.
pub fn velocity(
    loss: &[f64],
    q: &Density,
    g: &WeightedGraph,
    beta: f64,
) -> Result<VelocityField, FlowError> {
    check_inputs(loss, q, g)?;
    Ok(velocity_unchecked(loss, q.values(), g, beta))
}

fn velocity_unchecked(loss: &[f64], q: &[f64], g: &WeightedGraph, beta: f64) -> VelocityField {
    let v = if beta == 0.0 {
        g.edges().iter().map(|e| loss[e.i] - loss[e.j]).collect()
    } else {
        let log_q: Vec<f64> = q.iter().map(|x| x.ln()).collect();
        g.edges()
            .iter()
            .map(|e| loss[e.i] - loss[e.j] + beta * (log_q[e.j] - log_q[e.i]))
            .collect()
    };
    VelocityField(v)
}

#[inline]
fn upwind(q: &[f64], i: usize, j: usize, v: f64) -> f64 {
    if v > 0.0 {
        q[j]
    } else {
        q[i]
    }
}

/// `xi_ij(q) * v_ij` per canonical edge (no edge weight).
pub fn upwind_flux(q: &Density, v: &VelocityField, g: &WeightedGraph) -> Result<Vec<f64>, FlowError> {
    if v.0.len() != g.num_edges() {
        return Err(FlowError::LengthMismatch {
            expected: g.num_edges(),
            got: v.0.len(),
        });
    }
    if q.len() != g.num_nodes() {
        return Err(FlowError::LengthMismatch {
            expected: g.num_nodes(),
            got: q.len(),
        });
    }
    let qv = q.values();
    Ok(g.edges()
        .iter()
        .zip(&v.0)
        .map(|(e, &vij)| upwind(qv, e.i, e.j, vij) * vij)
        .collect())
}

/// `dq/dt` induced by a given velocity field.
pub fn derivative_from_velocity(
    q: &Density,
    v: &VelocityField,
    g: &WeightedGraph,
) -> Result<Vec<f64>, FlowError> {
    if v.0.len() != g.num_edges() || q.len() != g.num_nodes() {
        return Err(FlowError::LengthMismatch {
            expected: g.num_edges(),
            got: v.0.len(),
        });
    }
    let mut dq = vec![0.0; g.num_nodes()];
    accumulate_derivative(q.values(), &v.0, g, &mut dq);
    Ok(dq)
}

fn accumulate_derivative(q: &[f64], v: &[f64], g: &WeightedGraph, dq: &mut [f64]) {
    for (e, &vij) in g.edges().iter().zip(v) {
        let flux = e.w * vij * upwind(q, e.i, e.j, vij);
        dq[e.i] += flux;
        dq[e.j] -= flux;
    }
}

pub fn density_derivative(
    q: &Density,
    loss: &[f64],
    g: &WeightedGraph,
    beta: f64,
) -> Result<Vec<f64>, FlowError> {
    let v = velocity(loss, q, g, beta)?;
    derivative_from_velocity(q, &v, g)
}

/// Transport action of one step of length `tau` at velocity `v`.
fn step_action(q: &[f64], v: &[f64], g: &WeightedGraph, tau: f64) -> f64 {
    let kinetic = stable_sum(
        g.edges()
            .iter()
            .zip(v)
            .map(|(e, &vij)| e.w * upwind(q, e.i, e.j, vij) * vij * vij),
    );
    tau * tau * kinetic
}

/// Result of one accepted Euler step.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerStep {
    pub density: Density,
    pub step_action: f64,
    pub effective_tau: f64,
    /// `sum q'` before any renormalization.
    pub pre_renorm_sum: f64,
    pub shrinks: u32,
}

pub fn euler_step(
    q: &Density,
    loss: &[f64],
    g: &WeightedGraph,
    cfg: &FlowConfig,
) -> Result<EulerStep, FlowError> {
    let v = velocity(loss, q, g, cfg.beta)?;
    advance(q, &v, g, cfg)
}

/// Euler step along a precomputed velocity field, halving `tau` until
/// every entry stays above the positivity floor.
pub fn advance(
    q: &Density,
    v: &VelocityField,
    g: &WeightedGraph,
    cfg: &FlowConfig,
) -> Result<EulerStep, FlowError> {
    cfg.validate(g.num_nodes())?;
    let dq = derivative_from_velocity(q, v, g)?;
    let qv = q.values();
    let floor = cfg.positivity_floor;

    let mut tau = cfg.tau;
    let mut next = vec![0.0; qv.len()];
    let mut shrinks = 0u32;
    let mut accepted = false;
    loop {
        for ((out, &qi), &di) in next.iter_mut().zip(qv).zip(&dq) {
            *out = qi + tau * di;
        }
        if next.iter().all(|&x| x >= floor) {
            accepted = true;
            break;
        }
        if shrinks == cfg.max_step_shrinks {
            break;
        }
        tau *= 0.5;
        shrinks += 1;
    }
    if shrinks > 0 {
        log::debug!("step halved {shrinks} times to tau = {tau:e}");
    }
    if !accepted {
        if !cfg.clamp_on_exhaustion {
            return Err(FlowError::StepShrinkExhausted { shrinks, tau });
        }
        for x in next.iter_mut() {
            *x = x.max(floor);
        }
    }

    let pre_renorm_sum = stable_sum(next.iter().copied());
    if (pre_renorm_sum - 1.0).abs() > RENORM_TOLERANCE {
        for x in next.iter_mut() {
            *x = (*x / pre_renorm_sum).max(floor);
        }
    }
    let step_action = step_action(qv, &v.0, g, tau);
    Ok(EulerStep {
        density: Density(next),
        step_action,
        effective_tau: tau,
        pre_renorm_sum,
        shrinks,
    })
}

/// `sum q_i l_i - beta * sum q_i ln q_i`.
pub fn free_energy(q: &Density, loss: &[f64], beta: f64) -> Result<f64, FlowError> {
    if loss.len() != q.len() {
        return Err(FlowError::LengthMismatch {
            expected: q.len(),
            got: loss.len(),
        });
    }
    let qv = q.values();
    let weighted = stable_sum(qv.iter().zip(loss).map(|(a, b)| a * b));
    if beta == 0.0 {
        return Ok(weighted);
    }
    Ok(weighted - beta * stable_sum(qv.iter().map(|&x| x * x.ln())))
}

/// Trajectory of an inner flow run.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub densities: Vec<Density>,
    pub step_actions: Vec<f64>,
    pub cumulative_gw2: f64,
    pub free_energies: Vec<f64>,
    pub effective_taus: Vec<f64>,
}

impl FlowTrace {
    pub fn final_density(&self) -> &Density {
        self.densities.last().expect("trace holds at least the initial density")
    }
}

/// Runs `cfg.t_in` Euler steps from `q0` (uniform when `None`).
pub fn run_flow(
    q0: Option<&Density>,
    loss: &[f64],
    g: &WeightedGraph,
    cfg: &FlowConfig,
) -> Result<FlowTrace, FlowError> {
    let q0 = q0.cloned().unwrap_or_else(|| Density::uniform(g.num_nodes()));
    check_inputs(loss, &q0, g)?;
    cfg.validate(g.num_nodes())?;
    let mut densities = Vec::with_capacity(cfg.t_in + 1);
    let mut free_energies = Vec::with_capacity(cfg.t_in + 1);
    let mut step_actions = Vec::with_capacity(cfg.t_in);
    let mut effective_taus = Vec::with_capacity(cfg.t_in);
    free_energies.push(free_energy(&q0, loss, cfg.beta)?);
    densities.push(q0);
    for _ in 0..cfg.t_in {
        let q = densities.last().expect("non-empty");
        let step = euler_step(q, loss, g, cfg)?;
        free_energies.push(free_energy(&step.density, loss, cfg.beta)?);
        step_actions.push(step.step_action);
        effective_taus.push(step.effective_tau);
        densities.push(step.density);
    }
    let cumulative_gw2 = step_actions.iter().sum();
    Ok(FlowTrace {
        densities,
        step_actions,
        cumulative_gw2,
        free_energies,
        effective_taus,
    })
}

/// Final density and accumulated action without keeping the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutcome {
    pub density: Density,
    pub cumulative_gw2: f64,
}

pub fn flow_to_end(
    q0: Option<&Density>,
    loss: &[f64],
    g: &WeightedGraph,
    cfg: &FlowConfig,
    steps: usize,
) -> Result<FlowOutcome, FlowError> {
    let mut q = q0.cloned().unwrap_or_else(|| Density::uniform(g.num_nodes()));
    check_inputs(loss, &q, g)?;
    let mut cumulative_gw2 = 0.0;
    for _ in 0..steps {
        let step = euler_step(&q, loss, g, cfg)?;
        cumulative_gw2 += step.step_action;
        q = step.density;
    }
    Ok(FlowOutcome {
        density: q,
        cumulative_gw2,
    })
}

/// Numerically stable softmax of `values / beta`, scaled to `mass`.
pub(crate) fn tilted(values: &[f64], beta: f64, mass: f64) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|&l| ((l - m) / beta).exp()).collect();
    let z = stable_sum(e.iter().copied());
    e.into_iter().map(|x| mass * x / z).collect()
}

/// Stationary density of the flow: on each connected component `S`,
/// `m_S * softmax(l_S / beta)` with `m_S` the component's mass under `q0`.
pub fn gibbs_stationary(
    loss: &[f64],
    beta: f64,
    g: &WeightedGraph,
    q0: &Density,
) -> Result<Density, FlowError> {
    if beta <= 0.0 {
        return Err(FlowError::ZeroBeta);
    }
    check_inputs(loss, q0, g)?;
    let mut out = vec![0.0; g.num_nodes()];
    for comp in g.connected_components() {
        let mass = q0.mass_of(&comp);
        let sub: Vec<f64> = comp.iter().map(|&i| loss[i]).collect();
        for (&i, p) in comp.iter().zip(tilted(&sub, beta, mass)) {
            out[i] = p;
        }
    }
    // underflowed entries get clamped; renormalize only if that moved mass
    let floor = f64::MIN_POSITIVE;
    if out.iter().any(|&x| x < floor) {
        return Density::from_weights(out.into_iter().map(|x| x.max(floor)).collect());
    }
    Density::new(out)
}

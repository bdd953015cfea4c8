//! Seeded battery of oracle checks with a JSON-serializable report.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    check_theorem1_two_node, finite_diff_gradient, fine_step_reference, gw2_two_node_closed_form,
    gw2_two_node_numeric, theorem2_ratios, TwoNodeInstance,
};
use crate::flow::{self, Density, EulerStep, FlowConfig, FlowError};
use crate::graph::WeightedGraph;
use crate::model::{weighted_loss, weighted_loss_gradient, ClassifierParams, FeatureMatrix, LabelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckSelector {
    All,
    Flow,
    Gradients,
    Theorem1,
    Theorem2,
    Gw2,
}

impl CheckSelector {
    pub const NAMES: [&'static str; 6] = ["all", "flow", "gradients", "theorem1", "theorem2", "gw2"];

    fn includes(self, group: CheckSelector) -> bool {
        self == CheckSelector::All || self == group
    }
}

impl FromStr for CheckSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "all" => CheckSelector::All,
            "flow" => CheckSelector::Flow,
            "gradients" => CheckSelector::Gradients,
            "theorem1" => CheckSelector::Theorem1,
            "theorem2" => CheckSelector::Theorem2,
            "gw2" => CheckSelector::Gw2,
            other => return Err(format!("unknown selector `{other}`")),
        })
    }
}

impl fmt::Display for CheckSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [
            CheckSelector::All,
            CheckSelector::Flow,
            CheckSelector::Gradients,
            CheckSelector::Theorem1,
            CheckSelector::Theorem2,
            CheckSelector::Gw2,
        ]
        .iter()
        .position(|s| s == self)
        .expect("listed");
        f.write_str(Self::NAMES[i])
    }
}

/// Deliberate corruption of the production stepper, for exercising the
/// failure path of the battery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    FlipVelocitySign,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flip-velocity-sign" => Ok(Fault::FlipVelocitySign),
            other => Err(format!("unknown fault `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub group: CheckSelector,
    pub passed: bool,
    pub instances: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub selector: CheckSelector,
    pub seed: u64,
    pub fault: Option<Fault>,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

struct Battery {
    seed: u64,
    fault: Option<Fault>,
}

impl Battery {
    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    fn step(&self, q: &Density, loss: &[f64], g: &WeightedGraph, cfg: &FlowConfig) -> Result<EulerStep, FlowError> {
        match self.fault {
            None => flow::euler_step(q, loss, g, cfg),
            Some(Fault::FlipVelocitySign) => {
                let v = flow::velocity(loss, q, g, cfg.beta)?;
                flow::advance(q, &v.negated(), g, cfg)
            }
        }
    }
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> WeightedGraph {
    let mut triples = Vec::new();
    for i in 1..n {
        // spanning path keeps the graph connected
        triples.push((i - 1, i, rng.random_range(0.2..2.0)));
        for j in 0..i - 1 {
            if rng.random::<f64>() < p {
                triples.push((j, i, rng.random_range(0.2..2.0)));
            }
        }
    }
    WeightedGraph::build(n, &triples).expect("valid random graph")
}

fn random_density(rng: &mut ChaCha8Rng, n: usize) -> Density {
    Density::from_weights((0..n).map(|_| rng.random_range(0.2..1.0)).collect()).expect("positive weights")
}

fn random_loss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn result(name: &str, group: CheckSelector, instances: usize, worst: f64, threshold: f64, ok: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        group,
        passed: ok,
        instances,
        worst,
        threshold,
        detail,
    }
}

fn failure(name: &str, group: CheckSelector, err: impl fmt::Display) -> CheckResult {
    result(name, group, 0, f64::NAN, f64::NAN, false, format!("error: {err}"))
}

fn mass_conservation(b: &Battery) -> CheckResult {
    let name = "mass-conservation";
    let mut rng = b.rng(1);
    let mut worst = 0.0f64;
    let n_inst = 200;
    for _ in 0..n_inst {
        let n = rng.random_range(2..=30);
        let g = random_graph(&mut rng, n, 0.2);
        let q = random_density(&mut rng, n);
        let loss = random_loss(&mut rng, n);
        let cfg = FlowConfig {
            beta: rng.random_range(0.0..1.0),
            tau: 0.01,
            ..FlowConfig::default()
        };
        match b.step(&q, &loss, &g, &cfg) {
            Ok(s) => worst = worst.max((s.pre_renorm_sum - 1.0).abs()),
            Err(e) => return failure(name, CheckSelector::Flow, e),
        }
    }
    let ok = worst <= 1e-12;
    result(name, CheckSelector::Flow, n_inst, worst, 1e-12, ok, "max |sum q' - 1| before renormalization".into())
}

fn free_energy_monotone(b: &Battery) -> CheckResult {
    let name = "free-energy-monotone";
    let mut rng = b.rng(2);
    let mut worst = f64::NEG_INFINITY;
    let n_inst = 20;
    for _ in 0..n_inst {
        let n = rng.random_range(2..=15);
        let g = random_graph(&mut rng, n, 0.3);
        let loss = random_loss(&mut rng, n);
        let beta = rng.random_range(0.01..1.0);
        let cfg = FlowConfig {
            beta,
            tau: 1e-3,
            ..FlowConfig::default()
        };
        let mut q = random_density(&mut rng, n);
        let mut f = flow::free_energy(&q, &loss, beta).expect("lengths match");
        for _ in 0..200 {
            q = match b.step(&q, &loss, &g, &cfg) {
                Ok(s) => s.density,
                Err(e) => return failure(name, CheckSelector::Flow, e),
            };
            let next = flow::free_energy(&q, &loss, beta).expect("lengths match");
            worst = worst.max(f - next);
            f = next;
        }
    }
    let ok = worst <= 1e-10;
    result(name, CheckSelector::Flow, n_inst, worst, 1e-10, ok, "largest one-step free energy decrease".into())
}

fn gibbs_fixed_point(b: &Battery) -> CheckResult {
    let name = "gibbs-fixed-point";
    let mut rng = b.rng(3);
    let g = WeightedGraph::path(5).expect("path");
    let loss = random_loss(&mut rng, 5);
    let cfg = FlowConfig {
        beta: 0.5,
        tau: 0.05,
        ..FlowConfig::default()
    };
    let mut q = Density::uniform(5);
    for _ in 0..3000 {
        q = match b.step(&q, &loss, &g, &cfg) {
            Ok(s) => s.density,
            Err(e) => return failure(name, CheckSelector::Flow, e),
        };
    }
    let gibbs = flow::gibbs_stationary(&loss, 0.5, &g, &Density::uniform(5)).expect("beta > 0");
    let dist = q.linf_distance(&gibbs);
    result(name, CheckSelector::Flow, 1, dist, 1e-6, dist <= 1e-6, "L-inf distance to the Gibbs density".into())
}

fn component_mass(b: &Battery) -> CheckResult {
    let name = "component-mass";
    let mut rng = b.rng(4);
    let g = WeightedGraph::build(6, &[(0, 1, 1.0), (1, 2, 1.0), (3, 4, 1.0), (4, 5, 0.5)]).expect("graph");
    let comps = g.connected_components();
    let loss = random_loss(&mut rng, 6);
    let cfg = FlowConfig {
        beta: 0.1,
        tau: 0.05,
        ..FlowConfig::default()
    };
    let mut q = random_density(&mut rng, 6);
    let start: Vec<f64> = comps.iter().map(|c| q.mass_of(c)).collect();
    let mut worst = 0.0f64;
    for _ in 0..500 {
        q = match b.step(&q, &loss, &g, &cfg) {
            Ok(s) => s.density,
            Err(e) => return failure(name, CheckSelector::Flow, e),
        };
        for (c, m0) in comps.iter().zip(&start) {
            worst = worst.max((q.mass_of(c) - m0).abs());
        }
    }
    result(name, CheckSelector::Flow, 1, worst, 1e-12, worst <= 1e-12, "max per-component mass drift".into())
}

fn first_order(b: &Battery) -> CheckResult {
    let name = "first-order-convergence";
    let mut rng = b.rng(5);
    let n = 6;
    let g = random_graph(&mut rng, n, 0.3);
    let loss = random_loss(&mut rng, n);
    let q0 = random_density(&mut rng, n);
    let beta = 0.3;
    let total = 0.5;
    let coarse_err = |steps: usize| -> Result<f64, String> {
        let cfg = FlowConfig {
            beta,
            tau: total / steps as f64,
            ..FlowConfig::default()
        };
        let mut q = q0.clone();
        for _ in 0..steps {
            q = b.step(&q, &loss, &g, &cfg).map_err(|e| e.to_string())?.density;
        }
        let fine = fine_step_reference(&q0, &loss, &g, beta, total, 10 * steps).map_err(|e| e.to_string())?;
        Ok(q.linf_distance(&fine))
    };
    match (coarse_err(20), coarse_err(200)) {
        (Ok(e1), Ok(e2)) => {
            let ratio = e1 / e2;
            let ok = (5.0..=20.0).contains(&ratio);
            result(name, CheckSelector::Flow, 1, ratio, 10.0, ok, format!("error ratio {ratio:.3} for a 10x smaller step (want 5..20)"))
        }
        (Err(e), _) | (_, Err(e)) => failure(name, CheckSelector::Flow, e),
    }
}

fn gradient_check(b: &Battery) -> CheckResult {
    let name = "weighted-loss-gradient";
    let mut rng = b.rng(6);
    let n_inst = 50;
    let mut worst = 0.0f64;
    for inst in 0..n_inst {
        let n = rng.random_range(2..=20);
        let d = rng.random_range(1..=5);
        let c = rng.random_range(2..=4);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x = FeatureMatrix::from_rows(&rows).expect("finite");
        let mut labels: Vec<Option<usize>> = (0..n)
            .map(|_| (rng.random::<f64>() < 0.7).then(|| rng.random_range(0..c)))
            .collect();
        labels[0] = Some(rng.random_range(0..c));
        let y = LabelVector::new(labels, c).expect("labels in range");
        let q = random_density(&mut rng, n);
        let params = ClassifierParams::init(c, d, inst as u64 + b.seed);
        let analytic = weighted_loss_gradient(&params, &x, &y, &q, true).expect("shapes").to_flat();
        let numeric = finite_diff_gradient(
            |flat| weighted_loss(&params.from_flat(flat), &x, &y, &q).expect("shapes"),
            &params.to_flat(),
            1e-5,
        );
        let num: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(num / den);
    }
    result(name, CheckSelector::Gradients, n_inst, worst, 1e-5, worst < 1e-5, "relative L2 error vs central differences".into())
}

fn theorem1(b: &Battery) -> CheckResult {
    let name = "theorem1-argmax-agreement";
    let mut rng = b.rng(7);
    let grid = 10_000;
    let n_inst = 100;
    let mut worst = 0.0f64;
    for _ in 0..n_inst {
        let loss = [rng.random::<f64>(), rng.random::<f64>()];
        let p1 = rng.random_range(0.05..0.95);
        let beta = rng.random_range(0.01..0.5);
        let tau = rng.random_range(0.01..1.0);
        match check_theorem1_two_node(loss, [p1, 1.0 - p1], beta, tau, grid) {
            Ok(r) => worst = worst.max((r.lhs_argmax - r.rhs_argmax).abs()),
            Err(e) => return failure(name, CheckSelector::Theorem1, e),
        }
    }
    let tol = 2.0 / grid as f64;
    result(name, CheckSelector::Theorem1, n_inst, worst, tol, worst <= tol, "max |proximal argmax - constrained argmax|".into())
}

fn theorem2(b: &Battery) -> CheckResult {
    let name = "theorem2-trend";
    let mut rng = b.rng(8);
    let g = WeightedGraph::path(5).expect("path");
    let loss = random_loss(&mut rng, 5);
    let cfg = FlowConfig {
        tau: 0.05,
        ..FlowConfig::default()
    };
    let checkpoints = [0, 1, 3, 10, 30, 100, 1000];
    let stepper = |q: &Density, l: &[f64], g: &WeightedGraph, c: &FlowConfig| b.step(q, l, g, c);
    match theorem2_ratios(&g, &loss, 0.5, &cfg, &checkpoints, &stepper) {
        Ok(r) => {
            let drop = r.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
            let last = *r.last().expect("non-empty");
            let ok = drop <= 1e-10 && last >= 0.99;
            result(name, CheckSelector::Theorem2, 1, last, 0.99, ok, format!("ratios {r:?}"))
        }
        Err(e) => failure(name, CheckSelector::Theorem2, e),
    }
}

fn gw2_agreement(b: &Battery) -> CheckResult {
    let name = "gw2-closed-form-agreement";
    let mut rng = b.rng(9);
    let n_inst = 100;
    let mut worst = 0.0f64;
    for _ in 0..n_inst {
        let inst = TwoNodeInstance::new(
            rng.random_range(0.1..5.0),
            rng.random_range(0.01..0.99),
            rng.random_range(0.01..0.99),
        )
        .expect("interior");
        let exact = gw2_two_node_closed_form(&inst);
        match gw2_two_node_numeric(&inst, 1000) {
            Ok(num) => worst = worst.max((num - exact).abs() / exact.max(1e-300)),
            Err(e) => return failure(name, CheckSelector::Gw2, e),
        }
    }
    result(name, CheckSelector::Gw2, n_inst, worst, 1e-3, worst < 1e-3, "relative error of the closed form at 1000 slices".into())
}

fn gw2_refinement(b: &Battery) -> CheckResult {
    let name = "gw2-refinement-monotone";
    let mut rng = b.rng(10);
    let n_inst = 20;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..n_inst {
        let inst = TwoNodeInstance::new(
            rng.random_range(0.1..5.0),
            rng.random_range(0.01..0.99),
            rng.random_range(0.01..0.99),
        )
        .expect("interior");
        let mut prev = f64::INFINITY;
        for k in [10, 20, 40, 80, 160, 320] {
            match gw2_two_node_numeric(&inst, k) {
                Ok(v) => {
                    if prev.is_finite() {
                        worst = worst.max((v - prev) / prev.max(1e-300));
                    }
                    prev = v;
                }
                Err(e) => return failure(name, CheckSelector::Gw2, e),
            }
        }
    }
    result(name, CheckSelector::Gw2, n_inst, worst, 1e-12, worst <= 1e-12, "largest relative increase when slices double".into())
}

/// Runs every check in the selected group.
pub fn run_checks(selector: CheckSelector, seed: u64, fault: Option<Fault>) -> CheckReport {
    let b = Battery { seed, fault };
    type Check = fn(&Battery) -> CheckResult;
    let all: [(CheckSelector, Check); 10] = [
        (CheckSelector::Flow, mass_conservation),
        (CheckSelector::Flow, free_energy_monotone),
        (CheckSelector::Flow, gibbs_fixed_point),
        (CheckSelector::Flow, component_mass),
        (CheckSelector::Flow, first_order),
        (CheckSelector::Gradients, gradient_check),
        (CheckSelector::Theorem1, theorem1),
        (CheckSelector::Theorem2, theorem2),
        (CheckSelector::Gw2, gw2_agreement),
        (CheckSelector::Gw2, gw2_refinement),
    ];
    let checks: Vec<CheckResult> = all
        .iter()
        .filter(|(group, _)| selector.includes(*group))
        .map(|(_, check)| {
            let r = check(&b);
            log::info!("check {}: {}", r.name, if r.passed { "pass" } else { "FAIL" });
            r
        })
        .collect();
    CheckReport {
        selector,
        seed,
        fault,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_round_trip() {
        for name in CheckSelector::NAMES {
            assert_eq!(name.parse::<CheckSelector>().unwrap().to_string(), name);
        }
        assert!("bogus".parse::<CheckSelector>().is_err());
    }

    #[test]
    fn gw2_group_only() {
        let r = run_checks(CheckSelector::Gw2, 0, None);
        assert!(r.checks.iter().all(|c| c.group == CheckSelector::Gw2));
        assert_eq!(r.checks.len(), 2);
        assert!(r.passed, "{:?}", r.failed());
    }

    #[test]
    fn flipped_velocity_is_caught() {
        let r = run_checks(CheckSelector::Flow, 0, Some(Fault::FlipVelocitySign));
        assert!(!r.passed);
        assert!(r.failed().contains(&"free-energy-monotone"), "{:?}", r.failed());
    }
}

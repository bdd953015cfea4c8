//! Outer minimax loop: reweight nodes, then take one full-batch gradient
//! step on the reweighted loss.
//!
//! Reweighting methods:
//! - `Tar`: inner Wasserstein gradient flow on the input graph.
//! - `TarN { k }`: same flow on the graph with labeled-node shortcuts.
//! - `Erm`: uniform weights.
//! - `KlTilt`: graph-blind `softmax(loss / beta)` over all nodes.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{self, Density, FlowConfig, FlowError};
use crate::graph::{GraphError, NodeId, WeightedGraph};
use crate::metrics::Metrics;
use crate::model::{
    self, ClassifierParams, FeatureMatrix, LabelVector, ModelError, PropagationConfig,
};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Method {
    Tar,
    TarN { k: usize },
    Erm,
    KlTilt,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Tar => "tar",
            Method::TarN { .. } => "tar-n",
            Method::Erm => "erm",
            Method::KlTilt => "kl-tilt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainConfig {
    pub epochs: usize,
    pub gamma: f64,
    pub flow: FlowConfig,
    pub prop: PropagationConfig,
    pub method: Method,
    pub seed: u64,
    pub eval_every: usize,
    /// Unlabeled (imputed) losses pass gradient through the labeled mean.
    pub impute_grad: bool,
    /// Start each epoch's flow from the previous epoch's weights instead of
    /// uniform.
    pub q_warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            gamma: 0.5,
            flow: FlowConfig::default(),
            prop: PropagationConfig::default(),
            method: Method::Tar,
            seed: 0,
            eval_every: 1,
            impute_grad: true,
            q_warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_nodes: usize) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::ConfigInvalid("epochs must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(TrainError::ConfigInvalid(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.eval_every == 0 {
            return Err(TrainError::ConfigInvalid("eval-every must be >= 1".into()));
        }
        match self.method {
            Method::TarN { k: 0 } => {
                return Err(TrainError::ConfigInvalid("tar-n needs k >= 1".into()))
            }
            Method::KlTilt if self.flow.beta <= 0.0 => {
                return Err(TrainError::ConfigInvalid("kl-tilt needs beta > 0".into()))
            }
            _ => {}
        }
        self.flow
            .validate(num_nodes)
            .map_err(|e| TrainError::ConfigInvalid(e.to_string()))
    }
}

/// Train/validation/test node sets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Masks {
    pub train: Vec<NodeId>,
    pub val: Vec<NodeId>,
    pub test: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_weighted: f64,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
    pub cumulative_gw2: f64,
    pub q_max: f64,
    pub q_entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_secs: f64,
    pub reweight_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub method: Method,
    pub records: Vec<EpochRecord>,
    pub final_params: ClassifierParams,
    /// Parameters at the best validation accuracy (final params when no
    /// validation mask is given).
    pub best_params: ClassifierParams,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub test_at_best_val: Option<f64>,
    pub worst_group_acc: Option<f64>,
    /// Wall-clock only; excluded from determinism comparisons.
    pub timings: Timings,
}

impl TrainReport {
    /// Everything except wall-clock timings and the method tag.
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        self.records == other.records
            && self.final_params == other.final_params
            && self.best_params == other.best_params
            && self.best_epoch == other.best_epoch
            && self.best_val == other.best_val
            && self.test_at_best_val == other.test_at_best_val
            && self.worst_group_acc == other.worst_group_acc
    }
}

/// Inputs shared by every epoch of a run.
pub struct TrainData<'a> {
    pub graph: &'a WeightedGraph,
    pub features: &'a FeatureMatrix,
    pub labels: &'a LabelVector,
    pub masks: &'a Masks,
    pub groups: Option<&'a [Vec<NodeId>]>,
}

/// Sample weights for one epoch under `method`.
pub fn reweight(
    method: Method,
    loss: &[f64],
    flow_graph: &WeightedGraph,
    cfg: &FlowConfig,
    start: Option<&Density>,
) -> Result<(Density, f64), TrainError> {
    let n = loss.len();
    match method {
        Method::Erm => Ok((Density::uniform(n), 0.0)),
        Method::KlTilt => {
            let w = flow::tilted(loss, cfg.beta, 1.0);
            let w: Vec<f64> = w.into_iter().map(|x| x.max(f64::MIN_POSITIVE)).collect();
            Ok((Density::from_weights(w)?, 0.0))
        }
        Method::Tar | Method::TarN { .. } => {
            let out = flow::flow_to_end(start, loss, flow_graph, cfg, cfg.t_in)?;
            Ok((out.density, out.cumulative_gw2))
        }
    }
}

pub fn worst_group_accuracy(
    params: &ClassifierParams,
    x: &FeatureMatrix,
    y: &LabelVector,
    groups: &[Vec<NodeId>],
) -> Result<f64, TrainError> {
    let mut worst = f64::INFINITY;
    for (gi, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(TrainError::EmptyGroup(gi));
        }
        worst = worst.min(model::evaluate(params, x, y, group)?.acc);
    }
    if groups.is_empty() {
        return Err(TrainError::ConfigInvalid("no groups given".into()));
    }
    Ok(worst)
}

/// Runs the alternating reweight / descend loop.
pub fn train(data: &TrainData<'_>, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let started = Instant::now();
    let g = data.graph;
    let n = g.num_nodes();
    cfg.validate(n)?;
    if data.masks.train.is_empty() {
        return Err(TrainError::ConfigInvalid("train mask is empty".into()));
    }
    if data.features.rows() != n || data.labels.len() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "graph has {n} nodes, features {} rows, labels {}",
            data.features.rows(),
            data.labels.len()
        ))
        .into());
    }

    let x = model::propagate_features(data.features, g, &cfg.prop)?;
    let train_labels = data.labels.restrict_to(&data.masks.train);
    if train_labels.labeled_nodes().len() != data.masks.train.len() {
        return Err(TrainError::ConfigInvalid("train mask contains unlabeled nodes".into()));
    }
    let reconnected;
    let flow_graph = match cfg.method {
        Method::TarN { k } => {
            reconnected = g.reconnect_labeled(&data.masks.train, k)?;
            &reconnected
        }
        _ => g,
    };

    let mut params = ClassifierParams::init(data.labels.num_classes(), x.cols(), cfg.seed);
    let mut best_params = params.clone();
    let mut best: Option<(f64, usize, Option<f64>)> = None;
    let mut records = Vec::new();
    let mut carried: Option<Density> = None;
    let mut reweight_secs = 0.0;

    for epoch in 1..=cfg.epochs {
        let loss = model::per_node_loss(&params, &x, &train_labels)?;
        let t0 = Instant::now();
        let start = if cfg.q_warm_start { carried.as_ref() } else { None };
        let (q, gw2) = reweight(cfg.method, &loss, flow_graph, &cfg.flow, start)?;
        reweight_secs += t0.elapsed().as_secs_f64();
        let train_loss_weighted: f64 = q.values().iter().zip(&loss).map(|(a, b)| a * b).sum();
        let grad = model::weighted_loss_gradient(&params, &x, &train_labels, &q, cfg.impute_grad)?;
        params = model::sgd_step(&params, &grad, cfg.gamma);

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let val = (!data.masks.val.is_empty())
                .then(|| model::evaluate(&params, &x, data.labels, &data.masks.val))
                .transpose()?;
            let test = (!data.masks.test.is_empty())
                .then(|| model::evaluate(&params, &x, data.labels, &data.masks.test))
                .transpose()?;
            if let Some(v) = val {
                if best.is_none_or(|(b, _, _)| v.acc > b) {
                    best = Some((v.acc, epoch, test.map(|t| t.acc)));
                    best_params = params.clone();
                }
            }
            records.push(EpochRecord {
                epoch,
                train_loss_weighted,
                val,
                test,
                cumulative_gw2: gw2,
                q_max: q.max(),
                q_entropy: q.entropy(),
            });
        }
        carried = Some(q);
    }

    let (best_val, best_epoch, test_at_best_val) = match best {
        Some((v, e, t)) => (Some(v), e, t),
        None => {
            best_params = params.clone();
            let t = (!data.masks.test.is_empty())
                .then(|| model::evaluate(&params, &x, data.labels, &data.masks.test))
                .transpose()?
                .map(|m| m.acc);
            (None, cfg.epochs, t)
        }
    };
    let worst_group_acc = data
        .groups
        .map(|gs| worst_group_accuracy(&best_params, &x, data.labels, gs))
        .transpose()?;
    log::info!(
        "{}: best epoch {best_epoch} of {}, val {best_val:?}, test {test_at_best_val:?}",
        cfg.method.label(),
        cfg.epochs
    );

    Ok(TrainReport {
        method: cfg.method,
        records,
        final_params: params,
        best_params,
        best_epoch,
        best_val,
        test_at_best_val,
        worst_group_acc,
        timings: Timings {
            total_secs: started.elapsed().as_secs_f64(),
            reweight_secs,
        },
    })
}

/// Default sweep grids.
pub const DEFAULT_T_IN_GRID: [usize; 6] = [1, 3, 5, 10, 30, 100];
pub const DEFAULT_BETA_GRID: [f64; 5] = [1.0, 0.1, 0.01, 0.001, 0.0];

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub t_in: usize,
    pub beta: f64,
    pub report: TrainReport,
}

/// One full training run per `(t_in, beta)` cell, `t_in` outer, sharing the
/// seed. Cells run on `jobs` threads; results come back in grid order.
pub fn sweep(
    data: &TrainData<'_>,
    base: &TrainConfig,
    t_in_grid: &[usize],
    beta_grid: &[f64],
    jobs: usize,
) -> Result<Vec<SweepCell>, TrainError> {
    if t_in_grid.is_empty() || beta_grid.is_empty() {
        return Err(TrainError::ConfigInvalid("sweep grids must be non-empty".into()));
    }
    let cells: Vec<(usize, f64)> = t_in_grid
        .iter()
        .flat_map(|&t| beta_grid.iter().map(move |&b| (t, b)))
        .collect();
    let run = |&(t_in, beta): &(usize, f64)| -> Result<SweepCell, TrainError> {
        let mut cfg = base.clone();
        cfg.flow.t_in = t_in;
        cfg.flow.beta = beta;
        Ok(SweepCell {
            t_in,
            beta,
            report: train(data, &cfg)?,
        })
    };
    if jobs <= 1 {
        return cells.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
    pool.install(|| cells.par_iter().map(run).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (WeightedGraph, FeatureMatrix, LabelVector, Masks) {
        let g = WeightedGraph::path(8).unwrap();
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 8.0 - 0.5, ((i * 7) % 5) as f64 / 5.0]).collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let y = LabelVector::new((0..8).map(|i| Some(usize::from(i >= 4))).collect(), 2).unwrap();
        let masks = Masks {
            train: vec![0, 2, 5, 7],
            val: vec![1, 6],
            test: vec![3, 4],
        };
        (g, x, y, masks)
    }

    #[test]
    fn config_validation() {
        let base = TrainConfig::default();
        assert!(base.validate(10).is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..base.clone() },
            TrainConfig { gamma: 0.0, ..base.clone() },
            TrainConfig { method: Method::TarN { k: 0 }, ..base.clone() },
            TrainConfig {
                method: Method::KlTilt,
                flow: FlowConfig { beta: 0.0, ..FlowConfig::default() },
                ..base.clone()
            },
        ] {
            assert!(matches!(bad.validate(10), Err(TrainError::ConfigInvalid(_))));
        }
    }

    #[test]
    fn erm_single_epoch_is_plain_mean_descent() {
        let (g, x, y, masks) = toy();
        let cfg = TrainConfig { epochs: 1, method: Method::Erm, ..TrainConfig::default() };
        let data = TrainData { graph: &g, features: &x, labels: &y, masks: &masks, groups: None };
        let report = train(&data, &cfg).unwrap();

        let xp = model::propagate_features(&x, &g, &cfg.prop).unwrap();
        let ty = y.restrict_to(&masks.train);
        let p0 = ClassifierParams::init(2, 2, cfg.seed);
        let grad = model::weighted_loss_gradient(&p0, &xp, &ty, &Density::uniform(8), true).unwrap();
        assert_eq!(report.final_params, model::sgd_step(&p0, &grad, cfg.gamma));
    }

    #[test]
    fn zero_step_flow_matches_erm() {
        let (g, x, y, masks) = toy();
        let data = TrainData { graph: &g, features: &x, labels: &y, masks: &masks, groups: None };
        let tar = TrainConfig {
            epochs: 30,
            flow: FlowConfig { t_in: 0, ..FlowConfig::default() },
            ..TrainConfig::default()
        };
        let erm = TrainConfig { method: Method::Erm, ..tar.clone() };
        assert!(train(&data, &tar).unwrap().same_trajectory(&train(&data, &erm).unwrap()));
    }

    #[test]
    fn worst_group_examples() {
        let (g, x, y, _) = toy();
        let xp = model::propagate_features(&x, &g, &PropagationConfig::default()).unwrap();
        // predicts class 1 whenever the first feature is positive
        let p = ClassifierParams::from_parts(vec![vec![-10.0, 0.0], vec![10.0, 0.0]], vec![0.0, 0.0]).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let acc = model::evaluate(&p, &xp, &y, &all).unwrap().acc;
        assert_eq!(worst_group_accuracy(&p, &xp, &y, std::slice::from_ref(&all)).unwrap(), acc);
        assert_eq!(worst_group_accuracy(&p, &xp, &y, &[vec![0], vec![]]), Err(TrainError::EmptyGroup(1)));
        let zero = ClassifierParams::zeros(2, 2);
        // always predicts class 0: group {0..4} perfect, group {4..8} zero
        let wg = worst_group_accuracy(&zero, &xp, &y, &[vec![0, 1, 2, 3], vec![4, 5, 6, 7]]).unwrap();
        assert_eq!(wg, 0.0);
        let eq = worst_group_accuracy(&zero, &xp, &y, &[vec![0, 4], vec![1, 5]]).unwrap();
        assert_eq!(eq, 0.5);
    }

    #[test]
    fn report_invariants() {
        let (g, x, y, masks) = toy();
        let data = TrainData { graph: &g, features: &x, labels: &y, masks: &masks, groups: None };
        let cfg = TrainConfig { epochs: 25, eval_every: 5, ..TrainConfig::default() };
        let r = train(&data, &cfg).unwrap();
        assert_eq!(r.records.len(), 5);
        for rec in &r.records {
            assert!(rec.q_entropy >= 0.0 && rec.q_entropy <= (8f64).ln() + 1e-12);
        }
        let again = train(&data, &cfg).unwrap();
        assert!(r.same_trajectory(&again));
    }

    #[test]
    fn sweep_single_cell_matches_train() {
        let (g, x, y, masks) = toy();
        let data = TrainData { graph: &g, features: &x, labels: &y, masks: &masks, groups: None };
        let base = TrainConfig { epochs: 10, ..TrainConfig::default() };
        let cells = sweep(&data, &base, &[3], &[0.1], 1).unwrap();
        let mut cfg = base.clone();
        cfg.flow.t_in = 3;
        cfg.flow.beta = 0.1;
        assert!(cells[0].report.same_trajectory(&train(&data, &cfg).unwrap()));
        assert!(sweep(&data, &base, &[], &[0.1], 1).is_err());
    }
}

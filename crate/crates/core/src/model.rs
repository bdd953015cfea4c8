//! Node classifier: fixed k-hop normalized feature propagation followed by
//! a linear softmax head trained with closed-form gradients.
//!
//! Per-node losses are cross-entropy on labeled nodes. Unlabeled nodes carry
//! the mean labeled loss so that the inner flow sees a loss on every node.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Density;
use crate::graph::{NodeId, WeightedGraph};
use crate::metrics::{classification_metrics, Metrics};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no labeled nodes")]
    NoLabeledNodes,
    #[error("label {label} at node {node} is outside [0, {num_classes})")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("evaluation mask is empty")]
    EmptyMask,
    #[error("mask node {0} has no label")]
    UnlabeledMaskNode(usize),
}

/// Row-major `rows x cols` matrix of node features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ModelError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy restricted to the given columns.
    pub fn select_columns(&self, cols: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend(cols.iter().map(|&c| r[c]));
        }
        FeatureMatrix {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }
}

/// Per-node class index, `None` for unlabeled nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    labels: Vec<Option<usize>>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<Option<usize>>, num_classes: usize) -> Result<Self, ModelError> {
        for (node, l) in labels.iter().enumerate() {
            if let Some(label) = *l {
                if label >= num_classes {
                    return Err(ModelError::LabelOutOfRange {
                        node,
                        label,
                        num_classes,
                    });
                }
            }
        }
        Ok(LabelVector { labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, i: NodeId) -> Option<usize> {
        self.labels[i]
    }

    pub fn as_slice(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn labeled_nodes(&self) -> Vec<NodeId> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    /// Keeps labels on `nodes` only.
    pub fn restrict_to(&self, nodes: &[NodeId]) -> LabelVector {
        let mut labels = vec![None; self.labels.len()];
        for &i in nodes {
            labels[i] = self.labels[i];
        }
        LabelVector {
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Linear softmax head: `logits = W x + b` with `W` of shape `C x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    num_classes: usize,
    dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsJson {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Serialize for ClassifierParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ParamsJson {
            weight: self.weight.chunks(self.dim.max(1)).map(<[f64]>::to_vec).collect(),
            bias: self.bias.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassifierParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let j = ParamsJson::deserialize(d)?;
        ClassifierParams::from_parts(j.weight, j.bias).map_err(serde::de::Error::custom)
    }
}

impl ClassifierParams {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        ClassifierParams {
            num_classes,
            dim,
            weight: vec![0.0; num_classes * dim],
            bias: vec![0.0; num_classes],
        }
    }

    /// Uniform(-s, s) weights with `s = sqrt(6 / (d + C))`, zero bias.
    pub fn init(num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (6.0 / (dim + num_classes) as f64).sqrt();
        let weight = (0..num_classes * dim).map(|_| rng.random_range(-s..s)).collect();
        ClassifierParams {
            num_classes,
            dim,
            weight,
            bias: vec![0.0; num_classes],
        }
    }

    pub fn from_parts(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self, ModelError> {
        let num_classes = weight.len();
        let dim = weight.first().map_or(0, Vec::len);
        if weight.iter().any(|r| r.len() != dim) || bias.len() != num_classes {
            return Err(ModelError::DimensionMismatch("weight/bias shapes disagree".into()));
        }
        let weight = weight.concat();
        if let Some(pos) = weight.iter().chain(&bias).position(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite { row: pos, col: 0 });
        }
        Ok(ClassifierParams {
            num_classes,
            dim,
            weight,
            bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Flat view `[W (row-major) | b]`, the coordinate order used for
    /// finite-difference checks.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weight.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn from_flat(&self, flat: &[f64]) -> Self {
        let split = self.weight.len();
        assert_eq!(flat.len(), split + self.bias.len());
        ClassifierParams {
            num_classes: self.num_classes,
            dim: self.dim,
            weight: flat[..split].to_vec(),
            bias: flat[split..].to_vec(),
        }
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, z) in out.iter_mut().enumerate() {
            let w = &self.weight[c * self.dim..(c + 1) * self.dim];
            *z = self.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Class probabilities for one feature row.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.num_classes];
        self.logits_into(x, &mut z);
        softmax_in_place(&mut z);
        z
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.num_classes];
        self.logits_into(x, &mut z);
        argmax(&z)
    }

    fn check_features(&self, x: &FeatureMatrix) -> Result<(), ModelError> {
        if x.cols() != self.dim {
            return Err(ModelError::DimensionMismatch(format!(
                "features have {} columns, params expect {}",
                x.cols(),
                self.dim
            )));
        }
        Ok(())
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = c;
        }
    }
    best
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PropagationConfig {
    pub hops: usize,
    pub self_loop_weight: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            hops: 2,
            self_loop_weight: 1.0,
        }
    }
}

/// `hops` rounds of `X <- D^-1/2 (A + s I) D^-1/2 X`. Nodes with zero
/// augmented degree propagate to zero.
pub fn propagate_features(
    x: &FeatureMatrix,
    g: &WeightedGraph,
    cfg: &PropagationConfig,
) -> Result<FeatureMatrix, ModelError> {
    let n = g.num_nodes();
    if x.rows() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "{} feature rows for {n} nodes",
            x.rows()
        )));
    }
    if cfg.hops == 0 {
        return Ok(x.clone());
    }
    let sl = cfg.self_loop_weight;
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = g.neighbor_slice(i).map(|(_, w)| w).sum::<f64>() + sl;
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let d = x.cols();
    let mut cur = x.data.clone();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..cfg.hops {
        for i in 0..n {
            let out = &mut next[i * d..(i + 1) * d];
            let self_coef = sl * inv_sqrt_deg[i] * inv_sqrt_deg[i];
            for (o, &v) in out.iter_mut().zip(&cur[i * d..(i + 1) * d]) {
                *o = self_coef * v;
            }
            for (j, w) in g.neighbor_slice(i) {
                let coef = w * inv_sqrt_deg[i] * inv_sqrt_deg[j];
                for (o, &v) in out.iter_mut().zip(&cur[j * d..(j + 1) * d]) {
                    *o += coef * v;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(FeatureMatrix {
        rows: n,
        cols: d,
        data: cur,
    })
}

fn check_shapes(
    params: &ClassifierParams,
    x: &FeatureMatrix,
    y: &LabelVector,
) -> Result<(), ModelError> {
    params.check_features(x)?;
    if y.len() != x.rows() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} labels for {} feature rows",
            y.len(),
            x.rows()
        )));
    }
    if y.num_classes() != params.num_classes() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} label classes, params have {}",
            y.num_classes(),
            params.num_classes()
        )));
    }
    Ok(())
}

/// Cross-entropy per node; unlabeled nodes get the labeled mean.
pub fn per_node_loss(
    params: &ClassifierParams,
    x: &FeatureMatrix,
    y: &LabelVector,
) -> Result<Vec<f64>, ModelError> {
    check_shapes(params, x, y)?;
    let mut z = vec![0.0; params.num_classes];
    let mut loss = vec![f64::NAN; x.rows()];
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, l) in loss.iter_mut().enumerate() {
        if let Some(c) = y.get(i) {
            params.logits_into(x.row(i), &mut z);
            *l = log_sum_exp(&z) - z[c];
            total += *l;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::NoLabeledNodes);
    }
    let mean = total / count as f64;
    for (i, l) in loss.iter_mut().enumerate() {
        if y.get(i).is_none() {
            *l = mean;
        }
    }
    Ok(loss)
}

/// `sum_i q_i l_i` with imputed unlabeled losses.
pub fn weighted_loss(
    params: &ClassifierParams,
    x: &FeatureMatrix,
    y: &LabelVector,
    q: &Density,
) -> Result<f64, ModelError> {
    let loss = per_node_loss(params, x, y)?;
    if q.len() != loss.len() {
        return Err(ModelError::DimensionMismatch("density length".into()));
    }
    Ok(q.values().iter().zip(&loss).map(|(a, b)| a * b).sum())
}

/// Gradient of `sum_i q_i l_i` in parameter shape.
///
/// With `impute_grad`, unlabeled mass reaches the parameters through the
/// labeled mean: each labeled node's coefficient is
/// `q_i + (sum of unlabeled q) / |labeled|`. Without it imputed losses are
/// treated as constants.
pub fn weighted_loss_gradient(
    params: &ClassifierParams,
    x: &FeatureMatrix,
    y: &LabelVector,
    q: &Density,
    impute_grad: bool,
) -> Result<ClassifierParams, ModelError> {
    check_shapes(params, x, y)?;
    if q.len() != x.rows() {
        return Err(ModelError::DimensionMismatch("density length".into()));
    }
    let qv = q.values();
    let labeled = y.labeled_nodes();
    if labeled.is_empty() {
        return Err(ModelError::NoLabeledNodes);
    }
    let unlabeled_mass: f64 = if impute_grad {
        (0..x.rows()).filter(|&i| y.get(i).is_none()).map(|i| qv[i]).sum()
    } else {
        0.0
    };
    let share = unlabeled_mass / labeled.len() as f64;

    let (c_count, d) = (params.num_classes, params.dim);
    let mut grad = ClassifierParams::zeros(c_count, d);
    let mut p = vec![0.0; c_count];
    for &i in &labeled {
        let coef = qv[i] + share;
        let target = y.get(i).expect("labeled");
        let xi = x.row(i);
        params.logits_into(xi, &mut p);
        softmax_in_place(&mut p);
        p[target] -= 1.0;
        for c in 0..c_count {
            let r = coef * p[c];
            grad.bias[c] += r;
            for (gw, &xv) in grad.weight[c * d..(c + 1) * d].iter_mut().zip(xi) {
                *gw += r * xv;
            }
        }
    }
    Ok(grad)
}

/// `params - gamma * grad`.
pub fn sgd_step(params: &ClassifierParams, grad: &ClassifierParams, gamma: f64) -> ClassifierParams {
    assert_eq!(params.weight.len(), grad.weight.len());
    assert_eq!(params.bias.len(), grad.bias.len());
    let step = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, g)| p - gamma * g).collect() };
    ClassifierParams {
        num_classes: params.num_classes,
        dim: params.dim,
        weight: step(&params.weight, &grad.weight),
        bias: step(&params.bias, &grad.bias),
    }
}

/// Predicted class per masked node.
pub fn predictions(params: &ClassifierParams, x: &FeatureMatrix, mask: &[NodeId]) -> Vec<usize> {
    mask.iter().map(|&i| params.predict(x.row(i))).collect()
}

pub fn evaluate(
    params: &ClassifierParams,
    x: &FeatureMatrix,
    y_true: &LabelVector,
    mask: &[NodeId],
) -> Result<Metrics, ModelError> {
    check_shapes(params, x, y_true)?;
    if mask.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let truth: Vec<usize> = mask
        .iter()
        .map(|&i| y_true.get(i).ok_or(ModelError::UnlabeledMaskNode(i)))
        .collect::<Result<_, _>>()?;
    let pred = predictions(params, x, mask);
    let scores: Option<Vec<f64>> = (params.num_classes == 2)
        .then(|| mask.iter().map(|&i| params.predict_proba(x.row(i))[1]).collect());
    Ok(classification_metrics(
        &truth,
        &pred,
        scores.as_deref(),
        params.num_classes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[Option<usize>], c: usize) -> LabelVector {
        LabelVector::new(v.to_vec(), c).unwrap()
    }

    #[test]
    fn propagation_identity_and_two_node() {
        let g = WeightedGraph::build(2, &[(0, 1, 1.0)]).unwrap();
        let x = FeatureMatrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let id = propagate_features(&x, &g, &PropagationConfig { hops: 0, self_loop_weight: 1.0 }).unwrap();
        assert_eq!(id, x);
        let one = propagate_features(&x, &g, &PropagationConfig { hops: 1, self_loop_weight: 1.0 }).unwrap();
        for v in one.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_column_fixed_on_regular_graph() {
        // ring of 6 is 2-regular, so the normalized operator is row-stochastic
        let t: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6, 1.0)).collect();
        let g = WeightedGraph::build(6, &t).unwrap();
        let x = FeatureMatrix::new(6, 1, vec![3.0; 6]).unwrap();
        let y = propagate_features(&x, &g, &PropagationConfig { hops: 1, self_loop_weight: 1.0 }).unwrap();
        for v in y.data() {
            assert!((v - 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn propagation_shape_check() {
        let g = WeightedGraph::path(3).unwrap();
        let x = FeatureMatrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            propagate_features(&x, &g, &PropagationConfig::default()),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn uniform_logits_loss_is_log_c() {
        let p = ClassifierParams::zeros(4, 2);
        let x = FeatureMatrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let l = per_node_loss(&p, &x, &labels(&[Some(3)], 4)).unwrap();
        assert!((l[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mean_imputation() {
        // zero weights, bias chosen so the two labeled losses are 1 and 3:
        // class logits (0, b): loss(y=0) = ln(1 + e^b), loss(y=1) = ln(1 + e^-b)
        // use explicit features instead: one-dim x, W = [[0],[1]]
        let p = ClassifierParams::from_parts(vec![vec![0.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
        // loss for y=0 at x: ln(1 + e^x). Solve for 1.0 and 3.0.
        let x_for = |l: f64| (l.exp() - 1.0).ln();
        let x = FeatureMatrix::from_rows(&[vec![x_for(1.0)], vec![x_for(3.0)], vec![0.0]]).unwrap();
        let y = labels(&[Some(0), Some(0), None], 2);
        let l = per_node_loss(&p, &x, &y).unwrap();
        assert!((l[0] - 1.0).abs() < 1e-12);
        assert!((l[1] - 3.0).abs() < 1e-12);
        assert!((l[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn no_labels_is_error() {
        let p = ClassifierParams::zeros(2, 1);
        let x = FeatureMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(per_node_loss(&p, &x, &labels(&[None, None], 2)), Err(ModelError::NoLabeledNodes));
    }

    #[test]
    fn uniform_weights_give_mean_gradient() {
        let p = ClassifierParams::init(3, 2, 7);
        let x = FeatureMatrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.3, -0.7]]).unwrap();
        let y = labels(&[Some(0), Some(2), Some(1)], 3);
        let g = weighted_loss_gradient(&p, &x, &y, &Density::uniform(3), true).unwrap();
        // average of single-node gradients
        let mut avg = vec![0.0; p.to_flat().len()];
        for i in 0..3 {
            let yi = labels(&(0..3).map(|k| if k == i { y.get(i) } else { None }).collect::<Vec<_>>(), 3);
            let mut w = vec![1e-30; 3];
            w[i] = 1.0;
            let q = Density::from_weights(w).unwrap();
            let gi = weighted_loss_gradient(&p, &x, &yi, &q, false).unwrap().to_flat();
            for (a, b) in avg.iter_mut().zip(gi) {
                *a += b / 3.0;
            }
        }
        for (a, b) in g.to_flat().iter().zip(&avg) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_examples() {
        let p = ClassifierParams::from_parts(vec![vec![1.0]], vec![0.0]).unwrap();
        let g = ClassifierParams::from_parts(vec![vec![2.0]], vec![0.0]).unwrap();
        let s = sgd_step(&p, &g, 0.1);
        assert!((s.weight()[0] - 0.8).abs() < 1e-15);
        assert_eq!(sgd_step(&p, &g, 0.0), p);
        assert_eq!(sgd_step(&p, &ClassifierParams::zeros(1, 1), 0.5), p);
    }

    #[test]
    fn params_json_round_trip() {
        let p = ClassifierParams::init(3, 4, 11);
        let s = serde_json::to_string(&p).unwrap();
        let back: ClassifierParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn evaluate_errors() {
        let p = ClassifierParams::zeros(2, 1);
        let x = FeatureMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        let y = labels(&[Some(0), None], 2);
        assert_eq!(evaluate(&p, &x, &y, &[]), Err(ModelError::EmptyMask));
        assert_eq!(evaluate(&p, &x, &y, &[1]), Err(ModelError::UnlabeledMaskNode(1)));
    }
}

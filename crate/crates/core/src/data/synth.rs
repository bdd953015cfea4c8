//! Seeded synthetic shift datasets.
//!
//! Every generator draws three domains of `n_per_group` nodes each, stored
//! domain-major: domain 0 is the training source, domain 1 the validation
//! split and domain 2 the shifted target used for testing. Labels within a
//! domain are balanced round-robin. Graphs are mutual k-NN inside each
//! domain plus sparse Bernoulli edges across domains, all with weight 1.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use super::{DataError, Dataset};
use crate::graph::{NodeId, WeightedGraph};
use crate::model::{FeatureMatrix, LabelVector};
use crate::trainer::Masks;

const DOMAINS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub k_nn: usize,
    pub cross_p: f64,
    /// Distance between neighbouring class means on the causal dims.
    pub class_sep: f64,
    /// Standard deviation of the spurious dim around its class code.
    pub spurious_noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            k_nn: 5,
            cross_p: 0.01,
            class_sep: 2.0,
            spurious_noise: 0.1,
        }
    }
}

impl SynthOptions {
    fn validate(&self) -> Result<(), DataError> {
        if self.k_nn == 0 {
            return Err(DataError::DegenerateConfig("k_nn must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cross_p) {
            return Err(DataError::DegenerateConfig(format!("cross_p {} outside [0, 1]", self.cross_p)));
        }
        if !(self.class_sep.is_finite() && self.class_sep > 0.0) {
            return Err(DataError::DegenerateConfig(format!("class_sep {} must be positive", self.class_sep)));
        }
        if !(self.spurious_noise.is_finite() && self.spurious_noise >= 0.0) {
            return Err(DataError::DegenerateConfig(format!(
                "spurious_noise {} must be non-negative",
                self.spurious_noise
            )));
        }
        Ok(())
    }

    fn to_json(self) -> serde_json::Value {
        json!({
            "k_nn": self.k_nn,
            "cross_p": self.cross_p,
            "class_sep": self.class_sep,
            "spurious_noise": self.spurious_noise,
        })
    }
}

fn check_sizes(n_per_group: usize, d: usize, num_classes: usize) -> Result<(), DataError> {
    if num_classes < 2 {
        return Err(DataError::DegenerateConfig(format!("need at least 2 classes, got {num_classes}")));
    }
    if n_per_group < num_classes {
        return Err(DataError::DegenerateConfig(format!(
            "n_per_group {n_per_group} is smaller than the class count {num_classes}"
        )));
    }
    if d == 0 {
        return Err(DataError::DegenerateConfig("d must be positive".into()));
    }
    if num_classes > 2 && d < 2 {
        return Err(DataError::DegenerateConfig("more than two classes need d >= 2".into()));
    }
    Ok(())
}

/// Class means: `±sep/2` on dim 0 for two classes, otherwise evenly spaced
/// on a circle in dims 0 and 1 with neighbouring means `sep` apart.
fn class_means(num_classes: usize, d: usize, sep: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut mu = vec![0.0; d];
            if num_classes == 2 {
                mu[0] = if c == 0 { -sep / 2.0 } else { sep / 2.0 };
            } else {
                let radius = sep / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                mu[0] = radius * angle.cos();
                mu[1] = radius * angle.sin();
            }
            mu
        })
        .collect()
}

fn signal_dims(num_classes: usize) -> usize {
    if num_classes == 2 {
        1
    } else {
        2
    }
}

/// Balanced labels for one domain, shuffled.
fn domain_labels(rng: &mut ChaCha8Rng, n: usize, num_classes: usize) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    y.shuffle(rng);
    y
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mutual k-NN edges within each domain on the first `dims` columns, plus
/// Bernoulli cross-domain edges.
fn build_graph(
    rng: &mut ChaCha8Rng,
    points: &[Vec<f64>],
    dims: usize,
    n_per_group: usize,
    opts: &SynthOptions,
) -> Result<WeightedGraph, DataError> {
    let n = points.len();
    let k = opts.k_nn.min(n_per_group.saturating_sub(1));
    let mut triples = Vec::new();
    for dom in 0..DOMAINS {
        let base = dom * n_per_group;
        let knn: Vec<Vec<usize>> = (0..n_per_group)
            .map(|a| {
                let mut others: Vec<(f64, usize)> = (0..n_per_group)
                    .filter(|&b| b != a)
                    .map(|b| (sq_dist(&points[base + a][..dims], &points[base + b][..dims]), b))
                    .collect();
                others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                let mut nn: Vec<usize> = others.iter().take(k).map(|&(_, b)| b).collect();
                nn.sort_unstable();
                nn
            })
            .collect();
        for a in 0..n_per_group {
            for &b in &knn[a] {
                if a < b && knn[b].binary_search(&a).is_ok() {
                    triples.push((base + a, base + b, 1.0));
                }
            }
        }
    }
    if opts.cross_p > 0.0 {
        for i in 0..n {
            for j in (i + 1)..n {
                if i / n_per_group != j / n_per_group && rng.random::<f64>() < opts.cross_p {
                    triples.push((i, j, 1.0));
                }
            }
        }
    }
    Ok(WeightedGraph::build(n, &triples)?)
}

fn domain_masks(n_per_group: usize) -> Masks {
    Masks {
        train: (0..n_per_group).collect(),
        val: (n_per_group..2 * n_per_group).collect(),
        test: (2 * n_per_group..3 * n_per_group).collect(),
    }
}

fn assemble(
    graph: WeightedGraph,
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
    masks: Masks,
    groups: Vec<Vec<NodeId>>,
    meta: serde_json::Value,
) -> Result<Dataset, DataError> {
    let ds = Dataset {
        graph,
        features: FeatureMatrix::from_rows(&points)?,
        labels: LabelVector::new(labels.into_iter().map(Some).collect(), num_classes)?,
        masks,
        groups: Some(groups.into_iter().filter(|g| !g.is_empty()).collect()),
        meta,
    };
    ds.validate()?;
    Ok(ds)
}

/// Covariate shift: class-conditional means are shared by every domain;
/// domain `g` adds an offset `shift * g / 2` along the last feature dim and
/// a two-component mixture along the same dim whose weight moves with `g`.
/// The last dim is orthogonal to the class means, so `P(y | x)` is the same
/// in every domain. Test groups are the two mixture components.
pub fn gen_covariate_shift(
    seed: u64,
    n_per_group: usize,
    d: usize,
    num_classes: usize,
    shift_magnitude: f64,
    opts: &SynthOptions,
) -> Result<Dataset, DataError> {
    check_sizes(n_per_group, d, num_classes)?;
    opts.validate()?;
    if !(shift_magnitude.is_finite() && shift_magnitude >= 0.0) {
        return Err(DataError::DegenerateConfig(format!(
            "shift_magnitude {shift_magnitude} must be finite and non-negative"
        )));
    }
    let shift_dim = d - 1;
    if shift_dim < signal_dims(num_classes) {
        return Err(DataError::DegenerateConfig(format!(
            "d = {d} leaves no dim orthogonal to the class means"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(num_classes, d, opts.class_sep);
    let mut points = Vec::with_capacity(DOMAINS * n_per_group);
    let mut labels = Vec::with_capacity(DOMAINS * n_per_group);
    let mut groups = vec![Vec::new(), Vec::new()];
    for dom in 0..DOMAINS {
        let level = dom as f64 / (DOMAINS - 1) as f64;
        let offset = shift_magnitude * level;
        let p_upper = 0.5 + 0.4 * level * shift_magnitude / (1.0 + shift_magnitude);
        for (a, y) in domain_labels(&mut rng, n_per_group, num_classes).into_iter().enumerate() {
            let upper = rng.random::<f64>() < p_upper;
            let mut x: Vec<f64> = means[y].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
            x[shift_dim] += offset + if upper { 1.0 } else { -1.0 };
            if dom == DOMAINS - 1 {
                groups[usize::from(upper)].push(dom * n_per_group + a);
            }
            points.push(x);
            labels.push(y);
        }
    }
    let graph = build_graph(&mut rng, &points, d, n_per_group, opts)?;
    let meta = json!({
        "generator": "covariate",
        "seed": seed,
        "n_per_group": n_per_group,
        "d": d,
        "shift_magnitude": shift_magnitude,
        "options": opts.to_json(),
    });
    assemble(graph, points, labels, num_classes, domain_masks(n_per_group), groups, meta)
}

/// Concept shift: `d` causal dims drawn from the class-conditional Gaussians
/// plus one spurious dim holding the code of a proxy label. The proxy equals
/// the true label with probability `spurious_strength` in training, 1/2 in
/// validation and `1 - spurious_strength` in test; otherwise it is a uniform
/// draw from the other classes. Test groups are the non-empty
/// (class, proxy agrees) cells.
pub fn gen_concept_shift(
    seed: u64,
    n_per_group: usize,
    d: usize,
    num_classes: usize,
    spurious_strength: f64,
    opts: &SynthOptions,
) -> Result<Dataset, DataError> {
    check_sizes(n_per_group, d, num_classes)?;
    opts.validate()?;
    if !(0.0..=1.0).contains(&spurious_strength) {
        return Err(DataError::DegenerateConfig(format!(
            "spurious_strength {spurious_strength} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(num_classes, d, opts.class_sep);
    let code = |c: usize| 2.0 * c as f64 / (num_classes - 1) as f64 - 1.0;
    let agreement = [spurious_strength, 0.5, 1.0 - spurious_strength];
    let mut points = Vec::with_capacity(DOMAINS * n_per_group);
    let mut labels = Vec::with_capacity(DOMAINS * n_per_group);
    let mut groups = vec![Vec::new(); 2 * num_classes];
    for dom in 0..DOMAINS {
        for (a, y) in domain_labels(&mut rng, n_per_group, num_classes).into_iter().enumerate() {
            let agrees = rng.random::<f64>() < agreement[dom];
            let proxy = if agrees {
                y
            } else {
                let other = rng.random_range(0..num_classes - 1);
                if other >= y {
                    other + 1
                } else {
                    other
                }
            };
            let mut x: Vec<f64> = means[y].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
            x.push(code(proxy) + opts.spurious_noise * rng.sample::<f64, _>(StandardNormal));
            if dom == DOMAINS - 1 {
                groups[2 * y + usize::from(!agrees)].push(dom * n_per_group + a);
            }
            points.push(x);
            labels.push(y);
        }
    }
    let graph = build_graph(&mut rng, &points, d, n_per_group, opts)?;
    let meta = json!({
        "generator": "concept",
        "seed": seed,
        "n_per_group": n_per_group,
        "d": d,
        "spurious_strength": spurious_strength,
        "options": opts.to_json(),
    });
    assemble(graph, points, labels, num_classes, domain_masks(n_per_group), groups, meta)
}

/// Subsamples the training mask so that class 0 keeps `n_max` nodes, the
/// last class keeps `n_min = floor(avail_0 / ratio)` and class `c` in between
/// keeps `floor(n_max * ratio^(-c / (C - 1)))`, with `n_max = floor(n_min * ratio)`.
/// Validation and test masks are untouched; test groups become the classes.
pub fn gen_class_imbalance(seed: u64, base: &Dataset, imbalance_ratio: f64) -> Result<Dataset, DataError> {
    if !(imbalance_ratio.is_finite() && imbalance_ratio >= 1.0) {
        return Err(DataError::DegenerateConfig(format!(
            "imbalance_ratio {imbalance_ratio} must be at least 1"
        )));
    }
    let num_classes = base.num_classes();
    let mut by_class: Vec<Vec<NodeId>> = vec![Vec::new(); num_classes];
    for &i in &base.masks.train {
        let y = base.labels.get(i).expect("train nodes are labeled");
        by_class[y].push(i);
    }
    let avail0 = by_class[0].len();
    let n_min = (avail0 as f64 / imbalance_ratio).floor() as usize;
    if n_min == 0 {
        return Err(DataError::InsufficientSamples {
            class: 0,
            needed: imbalance_ratio.ceil() as usize,
            available: avail0,
        });
    }
    let n_max = ((n_min as f64 * imbalance_ratio).floor() as usize).min(avail0);
    let targets: Vec<usize> = (0..num_classes)
        .map(|c| {
            if c == 0 {
                n_max
            } else if c + 1 == num_classes {
                n_min
            } else {
                let frac = c as f64 / (num_classes - 1) as f64;
                ((n_max as f64 * imbalance_ratio.powf(-frac)).floor() as usize).max(n_min)
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    for (c, nodes) in by_class.iter().enumerate() {
        if nodes.len() < targets[c] {
            return Err(DataError::InsufficientSamples {
                class: c,
                needed: targets[c],
                available: nodes.len(),
            });
        }
        train.extend(nodes.choose_multiple(&mut rng, targets[c]).copied());
    }
    train.sort_unstable();

    let mut groups: Vec<Vec<NodeId>> = vec![Vec::new(); num_classes];
    for &i in &base.masks.test {
        if let Some(y) = base.labels.get(i) {
            groups[y].push(i);
        }
    }
    let groups: Vec<Vec<NodeId>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    let covered: usize = groups.iter().map(Vec::len).sum();

    let ds = Dataset {
        graph: base.graph.clone(),
        features: base.features.clone(),
        labels: base.labels.clone(),
        masks: Masks {
            train,
            val: base.masks.val.clone(),
            test: base.masks.test.clone(),
        },
        groups: (covered == base.masks.test.len() && !groups.is_empty()).then_some(groups),
        meta: json!({
            "generator": "imbalance",
            "seed": seed,
            "imbalance_ratio": imbalance_ratio,
            "train_counts": targets,
            "base": base.meta.clone(),
        }),
    };
    ds.validate()?;
    Ok(ds)
}

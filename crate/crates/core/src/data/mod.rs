//! Datasets: graph + features + labels + split masks, with optional test
//! shift groups used only for evaluation.

mod io;
mod synth;

pub use io::{load_dataset, save_dataset, DATASET_FILES};
pub use synth::{gen_class_imbalance, gen_concept_shift, gen_covariate_shift, SynthOptions};

use serde_json::Value;
use thiserror::Error;

use crate::graph::{GraphError, NodeId, WeightedGraph};
use crate::model::{FeatureMatrix, LabelVector, ModelError};
use crate::trainer::Masks;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("{file}: parse error at line {line}, column {column}: {msg}")]
    Parse {
        file: String,
        line: u64,
        column: usize,
        msg: String,
    },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("degenerate generator config: {0}")]
    DegenerateConfig(String),
    #[error("class {class} needs {needed} training samples, only {available} available")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: WeightedGraph,
    pub features: FeatureMatrix,
    pub labels: LabelVector,
    pub masks: Masks,
    pub groups: Option<Vec<Vec<NodeId>>>,
    /// Generator parameters and seed; `Null` for hand-assembled data.
    pub meta: Value,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    /// Checks shapes, mask disjointness, train labels and group coverage.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.graph.num_nodes();
        if self.features.rows() != n {
            return Err(DataError::SchemaMismatch(format!(
                "{} feature rows for {n} nodes",
                self.features.rows()
            )));
        }
        if self.labels.len() != n {
            return Err(DataError::SchemaMismatch(format!(
                "{} labels for {n} nodes",
                self.labels.len()
            )));
        }
        let mut owner = vec![None; n];
        for (name, mask) in [
            ("train", &self.masks.train),
            ("val", &self.masks.val),
            ("test", &self.masks.test),
        ] {
            for &i in mask {
                if i >= n {
                    return Err(DataError::SchemaMismatch(format!("{name} mask node {i} out of range")));
                }
                if let Some(prev) = owner[i].replace(name) {
                    return Err(DataError::SchemaMismatch(format!(
                        "node {i} is in both {prev} and {name} masks"
                    )));
                }
            }
        }
        if let Some(&i) = self.masks.train.iter().find(|&&i| self.labels.get(i).is_none()) {
            return Err(DataError::SchemaMismatch(format!("train node {i} has no label")));
        }
        if let Some(groups) = &self.groups {
            let mut seen: Vec<NodeId> = groups.iter().flatten().copied().collect();
            seen.sort_unstable();
            let mut test = self.masks.test.clone();
            test.sort_unstable();
            if seen != test {
                return Err(DataError::SchemaMismatch("groups do not partition the test mask".into()));
            }
            if groups.iter().any(Vec::is_empty) {
                return Err(DataError::SchemaMismatch("empty group".into()));
            }
        }
        Ok(())
    }
}

//! Topology-aware sample reweighting for node classification.
//!
//! Node weights follow a discrete Wasserstein gradient flow on the input
//! graph, so mass only moves along edges. The outer loop trains a
//! propagated-feature softmax classifier on the reweighted loss.

pub mod data;
pub mod flow;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod trainer;

pub use data::{DataError, Dataset};
pub use flow::{Density, FlowConfig, FlowError, FlowTrace};
pub use graph::{GraphError, NodeId, WeightedGraph};
pub use metrics::Metrics;
pub use model::{ClassifierParams, FeatureMatrix, LabelVector, PropagationConfig};
pub use trainer::{Masks, Method, TrainConfig, TrainData, TrainError, TrainReport};

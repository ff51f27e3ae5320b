//! Network graph, execution engine, metrics and analysis reports.

pub mod exec;
pub mod graph;
pub mod metrics;
pub mod prepare;
pub mod reports;
pub mod synth;

pub use exec::{Assignment, Compute, Executor, LayerProbe, PrecisionMode};
pub use graph::{
    LayerQuant, MatmulKind, MatmulLayer, NetworkGraph, Node, Op, QuantConfig, RatioBoundary, Selection,
};
pub use metrics::{l2_distance, relative_l2, top1_accuracy, total_loss, LossInputs};
pub use prepare::{prepare_network, PrepareConfig};

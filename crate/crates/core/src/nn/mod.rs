//! Layers, the training graph, the optimizer and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;

pub use graph::{Graph, GraphBuilder, NodeId};
pub use layers::{Layer, LayerKind, Mode, Param, ParamRole};
pub use optim::{LrSchedule, Sgd, SgdConfig, ShiftNorm};

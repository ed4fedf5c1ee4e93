//! Network structure: specs, block composition, and cost accounting.

pub mod cost;
pub mod network;
pub mod spec;

pub use cost::{count_macs_params, layer_cost, CostRow, CostTable};
pub use network::{Block, BlockCache, Network, NetworkCache, NetworkGrads, Trainable};
pub use spec::{bundled_spec, parse_model_spec, BlockSpec, ClassifierLayer, ModelDoc, ModelSpec, BUNDLED_MODELS};

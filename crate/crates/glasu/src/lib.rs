//! Communication-efficient vertical federated training of graph neural
//! networks over one shared node set: clients hold disjoint feature blocks
//! and private edge sets, a parameter-free server aggregates partial node
//! representations at a chosen subset of layers (lazy aggregation), and
//! clients reuse the aggregated state for several local model updates per
//! round (stale updates). Includes both label-ownership regimes, an exact
//! message ledger, and the closed-form convergence bounds.

pub mod error;
pub mod federation;
pub mod fixture;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod sampling;
pub mod theory;
pub mod transport;

pub use error::{GlasuError, Result};

//! Deterministic simulator and protocol library for data availability
//! sampling over peer-to-peer networks.

pub mod adversary;
pub mod commitment;
pub mod erasure;
pub mod kademlia;
pub mod metrics;
pub mod model;
pub mod sampling;
pub mod scenario;
pub mod sim;
pub mod strategy;

pub use model::{
    coordinate_index, derive_node_id, BlobGeometry, Cell, CellCoordinate, DeterministicRng, Key, NodeId, NodeProfile,
    Role, SlotParameters,
};

//! Kademlia DHT: XOR metric, k-buckets with a subnet admission cap,
//! iterative/recursive/disjoint lookups, PoW identities and region storage.

mod network;
mod pow;
mod protocol;
mod region;
mod routing;


use sha2::{Digest, Sha256};

pub use network::{Behavior, DhtNetwork, DhtNode, NodeSpec};
pub use pow::{pow_node_id, pow_node_id_where, satisfies_pow, PowIdentity, MAX_POW_DIFFICULTY};
pub use protocol::{
    DhtError, DhtMessage, DhtParams, DhtSimulation, GetResult, LookupConfig, LookupMode, LookupResult, LookupTrace,
    OpId, OpOutcome, PutResult, RegionResult, CONTACT_BYTES, REQUEST_BYTES, RESPONSE_HEADER_BYTES,
};
pub use region::{Region, MAX_REGION_DEPTH};
pub use routing::{bucket_index, Admission, NodeRecord, RejectReason, RoutingConfig, RoutingTable, ID_BITS};

use crate::model::{CellCoordinate, Key, NodeId};

/// XOR distance as a 256-bit big-endian integer.
pub fn xor_distance(a: &NodeId, b: &NodeId) -> NodeId {
    a.xor(b)
}

/// DHT key of copy `copy` of a cell: `SHA-256(slot || row || col || copy)`.
pub fn cell_key(slot: u64, coord: CellCoordinate, copy: u32) -> Key {
    let mut h = Sha256::new();
    h.update(slot.to_be_bytes());
    h.update(coord.row.to_be_bytes());
    h.update(coord.col.to_be_bytes());
    h.update(copy.to_be_bytes());
    NodeId(h.finalize().into())
}

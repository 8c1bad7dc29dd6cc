//! Size-preserving stand-in for per-cell polynomial commitments.
//!
//! The blob is committed to with a Merkle root over all cells. Per-cell
//! proofs are a keyed digest of `(coordinate, payload)` under a key derived
//! from that root, truncated or stretched to exactly `proof_bytes`. This is a
//! simulation device: it has the wire size of the real scheme and sound
//! verify semantics against parties that never see the root key derivation
//! inputs, nothing more.

use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;

use crate::erasure::BlobMatrix;
use crate::model::{BlobGeometry, Cell, CellCoordinate};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommitmentError {
    #[error("blob is missing {missing} cells; commitments need the full extended matrix")]
    Incomplete { missing: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlobCommitment {
    pub root: [u8; 32],
    pub geometry: BlobGeometry,
}

impl BlobCommitment {
    fn proof_key(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"dasim/proof-key");
        h.update(self.root);
        h.finalize().into()
    }
}

/// Merkle root over every cell in row-major index order.
pub fn commit_blob(blob: &BlobMatrix) -> Result<BlobCommitment, CommitmentError> {
    let g = *blob.geometry();
    if !blob.is_complete() {
        return Err(CommitmentError::Incomplete {
            missing: g.total_cells() - blob.present_count(),
        });
    }
    let mut level: Vec<[u8; 32]> = g
        .coordinates()
        .enumerate()
        .map(|(i, c)| {
            let mut h = Sha256::new();
            h.update([0u8]);
            h.update((i as u64).to_be_bytes());
            h.update(blob.get(c).expect("complete blob"));
            h.finalize().into()
        })
        .collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [l, r] => {
                    let mut h = Sha256::new();
                    h.update([1u8]);
                    h.update(l);
                    h.update(r);
                    h.finalize().into()
                }
                [single] => *single,
                _ => unreachable!(),
            })
            .collect();
    }
    Ok(BlobCommitment {
        root: level[0],
        geometry: g,
    })
}

/// Proof bytes for `(coord, payload)` under `commitment`.
fn cell_tag(commitment: &BlobCommitment, coord: CellCoordinate, payload: &[u8]) -> Vec<u8> {
    let want = commitment.geometry.proof_bytes as usize;
    let key = commitment.proof_key();
    let mut out = Vec::with_capacity(want.max(64));
    let mut counter = 0u32;
    while out.len() < want {
        let mut h = Sha512::new();
        h.update(key);
        h.update(counter.to_be_bytes());
        h.update(coord.row.to_be_bytes());
        h.update(coord.col.to_be_bytes());
        h.update(payload);
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    out.truncate(want);
    out
}

/// A fully populated blob together with its commitment.
#[derive(Debug, Clone)]
pub struct CommittedBlob {
    matrix: BlobMatrix,
    commitment: BlobCommitment,
}

impl CommittedBlob {
    pub fn new(matrix: BlobMatrix) -> Result<Self, CommitmentError> {
        let commitment = commit_blob(&matrix)?;
        Ok(CommittedBlob { matrix, commitment })
    }

    pub fn matrix(&self) -> &BlobMatrix {
        &self.matrix
    }

    pub fn commitment(&self) -> &BlobCommitment {
        &self.commitment
    }

    /// The cell at `coord` with its proof attached.
    pub fn cell(&self, coord: CellCoordinate) -> Option<Cell> {
        let payload = self.matrix.get(coord)?.to_vec();
        let proof = cell_tag(&self.commitment, coord, &payload);
        Some(Cell { coord, payload, proof })
    }
}

/// Proof for the genuine cell at `coord`; empty if the coordinate is outside
/// the matrix.
pub fn prove_cell(blob: &CommittedBlob, coord: CellCoordinate) -> Vec<u8> {
    blob.cell(coord).map(|c| c.proof).unwrap_or_default()
}

pub fn verify_cell(commitment: &BlobCommitment, coord: CellCoordinate, payload: &[u8], proof: &[u8]) -> bool {
    if !commitment.geometry.contains(coord)
        || payload.len() != commitment.geometry.cell_payload_bytes as usize
        || proof.len() != commitment.geometry.proof_bytes as usize
    {
        return false;
    }
    let expected = cell_tag(commitment, coord, payload);
    // no early exit on the first differing byte
    expected.iter().zip(proof).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

/// Convenience form taking a whole [`Cell`].
pub fn verify(commitment: &BlobCommitment, cell: &Cell) -> bool {
    verify_cell(commitment, cell.coord, &cell.payload, &cell.proof)
}

/// What a simulated message carries in place of cell bytes: the coordinate
/// and whether the sender holds the genuine cell. A forged cell stands for
/// altered payload bytes replayed with the genuine proof.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellPayload {
    pub coord: CellCoordinate,
    pub genuine: bool,
}

impl CellPayload {
    pub fn genuine(coord: CellCoordinate) -> Self {
        CellPayload { coord, genuine: true }
    }

    pub fn forged(coord: CellCoordinate) -> Self {
        CellPayload { coord, genuine: false }
    }
}

/// The blob of one slot as the strategies see it.
///
/// `Materialized` holds real bytes and verifies through [`verify_cell`].
/// `Virtual` is used where materializing the matrix is too expensive; it
/// trusts the `genuine` flag, which matches the materialized outcome.
#[derive(Debug, Clone)]
pub enum SlotBlob {
    Materialized(Box<CommittedBlob>),
    Virtual(BlobGeometry),
}

impl SlotBlob {
    pub fn geometry(&self) -> &BlobGeometry {
        match self {
            SlotBlob::Materialized(b) => b.matrix().geometry(),
            SlotBlob::Virtual(g) => g,
        }
    }

    /// The wire cell a payload stands for. `None` for virtual blobs.
    pub fn materialize(&self, p: &CellPayload) -> Option<Cell> {
        let SlotBlob::Materialized(b) = self else {
            return None;
        };
        let mut cell = b.cell(p.coord)?;
        if !p.genuine {
            if let Some(first) = cell.payload.first_mut() {
                *first ^= 0xff;
            }
        }
        Some(cell)
    }

    pub fn verify(&self, p: &CellPayload) -> bool {
        match self {
            SlotBlob::Materialized(b) => self
                .materialize(p)
                .is_some_and(|cell| verify(b.commitment(), &cell)),
            SlotBlob::Virtual(g) => p.genuine && g.contains(p.coord),
        }
    }
}

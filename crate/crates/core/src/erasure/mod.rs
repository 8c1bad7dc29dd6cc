//! Reed-Solomon coding over GF(2^8)/GF(2^16) and the 2D blob extension.

mod blob;
mod codec;
pub mod field;

pub use blob::{
    extend_blob, extend_blob_default, field_for, reconstruct_blob, BlobMatrix, ReconstructStatus, Reconstruction,
};
pub use codec::{rs_decode_line, rs_encode_line, FieldConfig, LineCodec};

use thiserror::Error;

use crate::model::{CellCoordinate, ModelError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ErasureError {
    #[error("GF(2^{field_bits}) has too few elements for lines of {line_len} symbols")]
    FieldTooSmall { field_bits: u8, line_len: usize },
    #[error("unsupported field width {0} bits")]
    UnsupportedField(u8),
    #[error("line must carry at least one source symbol")]
    EmptyLine,
    #[error("line length {got}, expected {expected}")]
    LineLength { expected: usize, got: usize },
    #[error("symbol {symbol} is not an element of the field")]
    SymbolOutOfField { symbol: u16 },
    #[error("{present} shares present, {required} required")]
    InsufficientShares { present: usize, required: usize },
    #[error("received symbol at position {position} disagrees with the decoded line")]
    DecodeInconsistent { position: usize },
    #[error("shard of {got} bytes, expected {expected}")]
    ShardSize { expected: usize, got: usize },
    #[error("payload of {payload_bytes} bytes is not a multiple of the {symbol_bytes}-byte symbol")]
    PayloadAlignment { payload_bytes: usize, symbol_bytes: usize },
    #[error("source buffer of {got} bytes, expected {expected}")]
    SourceShape { expected: usize, got: usize },
    #[error("coordinate {0} outside the matrix")]
    Coordinate(CellCoordinate),
    #[error(transparent)]
    Model(#[from] ModelError),
}

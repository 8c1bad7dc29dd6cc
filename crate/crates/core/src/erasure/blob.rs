//! Two-dimensional extension of a blob and iterative row/column peeling.

use crate::model::{BlobGeometry, CellCoordinate};

use super::codec::{FieldConfig, LineCodec};
use super::ErasureError;

/// The `2R x 2C` extended matrix. Each cell is either present or absent
/// (withheld, not yet received).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobMatrix {
    geometry: BlobGeometry,
    field: FieldConfig,
    data: Vec<u8>,
    present: Vec<bool>,
    present_count: u64,
}

impl BlobMatrix {
    /// A matrix with no cells present.
    pub fn empty(geometry: BlobGeometry, field: FieldConfig) -> Result<Self, ErasureError> {
        geometry.validate()?;
        check_field(&geometry, field)?;
        let cells = geometry.total_cells() as usize;
        Ok(BlobMatrix {
            geometry,
            field,
            data: vec![0; cells * geometry.cell_payload_bytes as usize],
            present: vec![false; cells],
            present_count: 0,
        })
    }

    pub fn geometry(&self) -> &BlobGeometry {
        &self.geometry
    }

    pub fn field(&self) -> FieldConfig {
        self.field
    }

    pub fn present_count(&self) -> u64 {
        self.present_count
    }

    pub fn is_complete(&self) -> bool {
        self.present_count == self.geometry.total_cells()
    }

    pub fn is_present(&self, coord: CellCoordinate) -> bool {
        self.slot(coord).map(|i| self.present[i]).unwrap_or(false)
    }

    pub fn get(&self, coord: CellCoordinate) -> Option<&[u8]> {
        let i = self.slot(coord)?;
        self.present[i].then(|| self.payload_at(i))
    }

    pub fn insert(&mut self, coord: CellCoordinate, payload: &[u8]) -> Result<(), ErasureError> {
        let i = self.slot(coord).ok_or(ErasureError::Coordinate(coord))?;
        let n = self.geometry.cell_payload_bytes as usize;
        if payload.len() != n {
            return Err(ErasureError::ShardSize {
                expected: n,
                got: payload.len(),
            });
        }
        self.data[i * n..(i + 1) * n].copy_from_slice(payload);
        if !self.present[i] {
            self.present[i] = true;
            self.present_count += 1;
        }
        Ok(())
    }

    pub fn remove(&mut self, coord: CellCoordinate) {
        if let Some(i) = self.slot(coord) {
            if self.present[i] {
                self.present[i] = false;
                self.present_count -= 1;
                let n = self.geometry.cell_payload_bytes as usize;
                self.data[i * n..(i + 1) * n].fill(0);
            }
        }
    }

    /// Copy keeping only the cells for which `keep` holds.
    pub fn filtered(&self, mut keep: impl FnMut(CellCoordinate) -> bool) -> BlobMatrix {
        let mut out = self.clone();
        for c in self.geometry.coordinates() {
            if !keep(c) {
                out.remove(c);
            }
        }
        out
    }

    /// Row-major source quadrant as a flat payload buffer, if fully present.
    pub fn source_payload(&self) -> Option<Vec<u8>> {
        let g = &self.geometry;
        let n = g.cell_payload_bytes as usize;
        let mut out = Vec::with_capacity((g.source_rows * g.source_cols) as usize * n);
        for row in 0..g.source_rows {
            for col in 0..g.source_cols {
                out.extend_from_slice(self.get(CellCoordinate { row, col })?);
            }
        }
        Some(out)
    }

    pub fn row_present(&self, row: u32) -> usize {
        (0..self.geometry.extended_cols())
            .filter(|&col| self.is_present(CellCoordinate { row, col }))
            .count()
    }

    pub fn col_present(&self, col: u32) -> usize {
        (0..self.geometry.extended_rows())
            .filter(|&row| self.is_present(CellCoordinate { row, col }))
            .count()
    }

    fn slot(&self, coord: CellCoordinate) -> Option<usize> {
        self.geometry.coordinate_index(coord).ok().map(|i| i as usize)
    }

    fn payload_at(&self, i: usize) -> &[u8] {
        let n = self.geometry.cell_payload_bytes as usize;
        &self.data[i * n..(i + 1) * n]
    }

    fn line(&self, coords: impl Iterator<Item = CellCoordinate>) -> Vec<Option<Vec<u8>>> {
        coords.map(|c| self.get(c).map(<[u8]>::to_vec)).collect()
    }
}

fn check_field(geometry: &BlobGeometry, field: FieldConfig) -> Result<(), ErasureError> {
    let longest = geometry.extended_rows().max(geometry.extended_cols()) as usize;
    field.check_line(longest)?;
    if !(geometry.cell_payload_bytes as usize).is_multiple_of(field.symbol_bytes()) {
        return Err(ErasureError::PayloadAlignment {
            payload_bytes: geometry.cell_payload_bytes as usize,
            symbol_bytes: field.symbol_bytes(),
        });
    }
    Ok(())
}

/// Default field for a geometry: the smallest one with enough evaluation points.
pub fn field_for(geometry: &BlobGeometry) -> Result<FieldConfig, ErasureError> {
    FieldConfig::smallest_for(geometry.extended_rows().max(geometry.extended_cols()) as usize)
}

/// Extends a row-major `R x C` source payload matrix to the full `2R x 2C`
/// codeword: rows first, then every column of the row-extended matrix.
pub fn extend_blob(source: &[u8], geometry: &BlobGeometry, field: FieldConfig) -> Result<BlobMatrix, ErasureError> {
    geometry.validate()?;
    let n = geometry.cell_payload_bytes as usize;
    let (r, c) = (geometry.source_rows, geometry.source_cols);
    let expected = r as usize * c as usize * n;
    if source.len() != expected {
        return Err(ErasureError::SourceShape {
            expected,
            got: source.len(),
        });
    }
    let mut m = BlobMatrix::empty(*geometry, field)?;
    for row in 0..r {
        for col in 0..c {
            let i = (row * c + col) as usize;
            m.insert(CellCoordinate { row, col }, &source[i * n..(i + 1) * n])?;
        }
    }
    let row_codec = LineCodec::new(field, c as usize)?;
    for row in 0..r {
        let parity = {
            let shards: Vec<&[u8]> = (0..c)
                .map(|col| m.get(CellCoordinate { row, col }).expect("source cell"))
                .collect();
            row_codec.encode_shards(&shards)?
        };
        for (j, p) in parity.iter().enumerate() {
            m.insert(CellCoordinate::new(row, c + j as u32), p)?;
        }
    }
    let col_codec = LineCodec::new(field, r as usize)?;
    for col in 0..2 * c {
        let parity = {
            let shards: Vec<&[u8]> = (0..r)
                .map(|row| m.get(CellCoordinate { row, col }).expect("row-extended cell"))
                .collect();
            col_codec.encode_shards(&shards)?
        };
        for (j, p) in parity.iter().enumerate() {
            m.insert(CellCoordinate::new(r + j as u32, col), p)?;
        }
    }
    Ok(m)
}

/// Extends with the geometry's default field.
pub fn extend_blob_default(source: &[u8], geometry: &BlobGeometry) -> Result<BlobMatrix, ErasureError> {
    extend_blob(source, geometry, field_for(geometry)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReconstructStatus {
    Complete,
    /// Peeling reached a fixpoint with cells still missing.
    Undecodable { missing: u64 },
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub matrix: BlobMatrix,
    pub status: ReconstructStatus,
    /// Number of line decodes performed.
    pub lines_decoded: usize,
}

impl Reconstruction {
    pub fn is_complete(&self) -> bool {
        self.status == ReconstructStatus::Complete
    }
}

/// Iterative peeling: decode every row or column holding at least half of
/// its cells until nothing changes.
///
/// Returns `Err` only for inconsistent (corrupted) lines; an undecodable
/// pattern is reported through [`ReconstructStatus::Undecodable`].
pub fn reconstruct_blob(partial: BlobMatrix) -> Result<Reconstruction, ErasureError> {
    let mut m = partial;
    let g = *m.geometry();
    let (rows, cols) = (g.extended_rows(), g.extended_cols());
    let row_codec = LineCodec::new(m.field, g.source_cols as usize)?;
    let col_codec = LineCodec::new(m.field, g.source_rows as usize)?;
    let mut row_count: Vec<usize> = (0..rows).map(|r| m.row_present(r)).collect();
    let mut col_count: Vec<usize> = (0..cols).map(|c| m.col_present(c)).collect();
    let mut lines_decoded = 0;
    loop {
        let mut progress = false;
        for row in 0..rows {
            let have = row_count[row as usize];
            if have >= g.source_cols as usize && have < cols as usize {
                let mut shards = m.line((0..cols).map(|col| CellCoordinate { row, col }));
                row_codec.reconstruct_shards(&mut shards)?;
                for (col, s) in shards.into_iter().enumerate() {
                    let coord = CellCoordinate::new(row, col as u32);
                    if !m.is_present(coord) {
                        m.insert(coord, &s.expect("reconstructed"))?;
                        col_count[col] += 1;
                    }
                }
                row_count[row as usize] = cols as usize;
                lines_decoded += 1;
                progress = true;
            }
        }
        for col in 0..cols {
            let have = col_count[col as usize];
            if have >= g.source_rows as usize && have < rows as usize {
                let mut shards = m.line((0..rows).map(|row| CellCoordinate { row, col }));
                col_codec.reconstruct_shards(&mut shards)?;
                for (row, s) in shards.into_iter().enumerate() {
                    let coord = CellCoordinate::new(row as u32, col);
                    if !m.is_present(coord) {
                        m.insert(coord, &s.expect("reconstructed"))?;
                        row_count[row] += 1;
                    }
                }
                col_count[col as usize] = rows as usize;
                lines_decoded += 1;
                progress = true;
            }
        }
        if !progress {
            break;
        }
    }
    let status = if m.is_complete() {
        ReconstructStatus::Complete
    } else {
        ReconstructStatus::Undecodable {
            missing: g.total_cells() - m.present_count(),
        }
    };
    Ok(Reconstruction {
        matrix: m,
        status,
        lines_decoded,
    })
}

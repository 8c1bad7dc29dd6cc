//! Systematic rate-1/2 Reed-Solomon line codec.
//!
//! A line of `k` source symbols is read as the values of a polynomial of
//! degree `< k` at the evaluation points `0..k`; the `k` parity symbols are
//! that polynomial evaluated at `k..2k`. Any `k` of the `2k` symbols pin the
//! polynomial down, so decoding is Lagrange interpolation.

use serde::{Deserialize, Serialize};

use super::field::GaloisField;
use super::ErasureError;

/// Field selection for the codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldConfig {
    pub field_bits: u8,
}

impl FieldConfig {
    pub const GF8: FieldConfig = FieldConfig { field_bits: 8 };
    pub const GF16: FieldConfig = FieldConfig { field_bits: 16 };

    /// Smallest supported field that has `line_len` distinct evaluation points.
    pub fn smallest_for(line_len: usize) -> Result<Self, ErasureError> {
        if line_len <= 256 {
            Ok(Self::GF8)
        } else if line_len <= 65536 {
            Ok(Self::GF16)
        } else {
            Err(ErasureError::FieldTooSmall {
                field_bits: 16,
                line_len,
            })
        }
    }

    pub fn field(&self) -> Result<&'static GaloisField, ErasureError> {
        match self.field_bits {
            8 => Ok(GaloisField::gf8()),
            16 => Ok(GaloisField::gf16()),
            other => Err(ErasureError::UnsupportedField(other)),
        }
    }

    /// Bytes per serialized symbol.
    pub fn symbol_bytes(&self) -> usize {
        if self.field_bits == 16 {
            2
        } else {
            1
        }
    }

    pub fn check_line(&self, line_len: usize) -> Result<(), ErasureError> {
        let field = self.field()?;
        if line_len as u64 > field.size() as u64 {
            return Err(ErasureError::FieldTooSmall {
                field_bits: self.field_bits,
                line_len,
            });
        }
        Ok(())
    }
}

/// Encoder/decoder for lines of `k` source symbols.
#[derive(Debug, Clone)]
pub struct LineCodec {
    field: &'static GaloisField,
    config: FieldConfig,
    k: usize,
    /// `parity_logs[j * k + i]`: log of the weight of source `i` in parity `j`,
    /// or `None` when the weight is zero.
    parity_logs: Vec<Option<u32>>,
}

impl LineCodec {
    pub fn new(config: FieldConfig, k: usize) -> Result<Self, ErasureError> {
        if k == 0 {
            return Err(ErasureError::EmptyLine);
        }
        config.check_line(2 * k)?;
        let field = config.field()?;
        let interp = Interpolator::new(field, (0..k as u32).map(|x| x as u16).collect());
        let mut parity_logs = Vec::with_capacity(k * k);
        for j in 0..k {
            for w in interp.weights((k + j) as u16) {
                parity_logs.push((w != 0).then(|| field.log(w)));
            }
        }
        Ok(LineCodec {
            field,
            config,
            k,
            parity_logs,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn config(&self) -> FieldConfig {
        self.config
    }

    /// Encodes `k` symbols into the `2k`-symbol systematic codeword.
    pub fn encode(&self, data: &[u16]) -> Result<Vec<u16>, ErasureError> {
        self.check_len(data.len(), self.k)?;
        self.check_symbols(data.iter().copied())?;
        let mut out = Vec::with_capacity(2 * self.k);
        out.extend_from_slice(data);
        for j in 0..self.k {
            let row = &self.parity_logs[j * self.k..(j + 1) * self.k];
            let mut acc = 0u16;
            for (w, &d) in row.iter().zip(data) {
                if let Some(lw) = w {
                    acc ^= self.field.mul_by_log(*lw, d);
                }
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Recovers the `k` source symbols from a codeword with erasures.
    ///
    /// Every received symbol beyond the first `k` is checked against the
    /// interpolated polynomial.
    pub fn decode(&self, received: &[Option<u16>]) -> Result<Vec<u16>, ErasureError> {
        self.check_len(received.len(), 2 * self.k)?;
        self.check_symbols(received.iter().flatten().copied())?;
        let present: Vec<usize> = (0..received.len()).filter(|&i| received[i].is_some()).collect();
        if present.len() < self.k {
            return Err(ErasureError::InsufficientShares {
                present: present.len(),
                required: self.k,
            });
        }
        let basis = &present[..self.k];
        let xs: Vec<u16> = basis.iter().map(|&i| i as u16).collect();
        let ys: Vec<u16> = basis.iter().map(|&i| received[i].expect("present")).collect();
        let interp = Interpolator::new(self.field, xs);
        let eval = |t: usize| -> u16 {
            if let Some(pos) = basis.iter().position(|&b| b == t) {
                return ys[pos];
            }
            interp
                .weights(t as u16)
                .into_iter()
                .zip(&ys)
                .fold(0u16, |acc, (w, &y)| acc ^ self.field.mul(w, y))
        };
        for &extra in &present[self.k..] {
            if eval(extra) != received[extra].expect("present") {
                return Err(ErasureError::DecodeInconsistent { position: extra });
            }
        }
        Ok((0..self.k).map(eval).collect())
    }

    /// Encodes interleaved shards: shard `i` holds the serialized symbols of
    /// source position `i`. Returns the `k` parity shards.
    pub fn encode_shards(&self, data: &[&[u8]]) -> Result<Vec<Vec<u8>>, ErasureError> {
        self.check_len(data.len(), self.k)?;
        let len = shard_len(data.iter().copied())?;
        let io = SymbolIo::new(self.config, len)?;
        let inputs: Vec<Vec<u16>> = data.iter().map(|s| io.read(s)).collect();
        let mut out = Vec::with_capacity(self.k);
        let mut acc = vec![0u16; io.symbols];
        for j in 0..self.k {
            acc.iter_mut().for_each(|a| *a = 0);
            let row = &self.parity_logs[j * self.k..(j + 1) * self.k];
            for (w, input) in row.iter().zip(&inputs) {
                if let Some(lw) = *w {
                    self.axpy(lw, input, &mut acc);
                }
            }
            out.push(io.write(&acc));
        }
        Ok(out)
    }

    /// Fills every missing shard of a `2k`-shard line in place.
    pub fn reconstruct_shards(&self, shards: &mut [Option<Vec<u8>>]) -> Result<(), ErasureError> {
        self.check_len(shards.len(), 2 * self.k)?;
        let present: Vec<usize> = (0..shards.len()).filter(|&i| shards[i].is_some()).collect();
        if present.len() < self.k {
            return Err(ErasureError::InsufficientShares {
                present: present.len(),
                required: self.k,
            });
        }
        let len = shard_len(present.iter().map(|&i| shards[i].as_deref().expect("present")))?;
        let io = SymbolIo::new(self.config, len)?;
        let basis = &present[..self.k];
        let xs: Vec<u16> = basis.iter().map(|&i| i as u16).collect();
        let ys: Vec<Vec<u16>> = basis
            .iter()
            .map(|&i| io.read(shards[i].as_deref().expect("present")))
            .collect();
        let interp = Interpolator::new(self.field, xs);
        let mut acc = vec![0u16; io.symbols];
        let interpolate = |t: usize, acc: &mut Vec<u16>| {
            acc.iter_mut().for_each(|a| *a = 0);
            for (w, y) in interp.weights(t as u16).into_iter().zip(&ys) {
                if w != 0 {
                    self.axpy(self.field.log(w), y, acc);
                }
            }
        };
        for &extra in &present[self.k..] {
            interpolate(extra, &mut acc);
            if io.write(&acc) != *shards[extra].as_ref().expect("present") {
                return Err(ErasureError::DecodeInconsistent { position: extra });
            }
        }
        for t in 0..shards.len() {
            if shards[t].is_none() {
                interpolate(t, &mut acc);
                shards[t] = Some(io.write(&acc));
            }
        }
        Ok(())
    }

    #[inline]
    fn axpy(&self, log_w: u32, x: &[u16], acc: &mut [u16]) {
        for (a, &v) in acc.iter_mut().zip(x) {
            *a ^= self.field.mul_by_log(log_w, v);
        }
    }

    fn check_len(&self, got: usize, expected: usize) -> Result<(), ErasureError> {
        if got != expected {
            return Err(ErasureError::LineLength { expected, got });
        }
        Ok(())
    }

    fn check_symbols(&self, symbols: impl Iterator<Item = u16>) -> Result<(), ErasureError> {
        let size = self.field.size();
        for s in symbols {
            if s as u32 >= size {
                return Err(ErasureError::SymbolOutOfField { symbol: s });
            }
        }
        Ok(())
    }
}

/// Encodes one line; convenience wrapper around [`LineCodec`].
pub fn rs_encode_line(config: FieldConfig, data: &[u16]) -> Result<Vec<u16>, ErasureError> {
    LineCodec::new(config, data.len())?.encode(data)
}

/// Decodes one line of `2k` optional symbols.
pub fn rs_decode_line(config: FieldConfig, received: &[Option<u16>]) -> Result<Vec<u16>, ErasureError> {
    if !received.len().is_multiple_of(2) {
        return Err(ErasureError::LineLength {
            expected: received.len() + 1,
            got: received.len(),
        });
    }
    LineCodec::new(config, received.len() / 2)?.decode(received)
}

/// Lagrange interpolation over a fixed set of distinct points, using
/// barycentric weights so each evaluation costs `O(k)`.
struct Interpolator<'f> {
    field: &'f GaloisField,
    xs: Vec<u16>,
    /// `1 / prod_{m != i} (x_i - x_m)`
    bary: Vec<u16>,
}

impl<'f> Interpolator<'f> {
    fn new(field: &'f GaloisField, xs: Vec<u16>) -> Self {
        let bary = xs
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let denom = xs
                    .iter()
                    .enumerate()
                    .filter(|&(m, _)| m != i)
                    .fold(1u16, |acc, (_, &xm)| field.mul(acc, xi ^ xm));
                field.inv(denom)
            })
            .collect();
        Interpolator { field, xs, bary }
    }

    /// Basis values `L_i(target)`.
    fn weights(&self, target: u16) -> Vec<u16> {
        if let Some(pos) = self.xs.iter().position(|&x| x == target) {
            let mut w = vec![0u16; self.xs.len()];
            w[pos] = 1;
            return w;
        }
        // In characteristic 2 subtraction is xor.
        let f = self.field;
        let prod_all = self.xs.iter().fold(1u16, |acc, &x| f.mul(acc, target ^ x));
        self.xs
            .iter()
            .zip(&self.bary)
            .map(|(&xi, &b)| f.mul(f.mul(prod_all, b), f.inv(target ^ xi)))
            .collect()
    }
}

fn shard_len<'a>(mut shards: impl Iterator<Item = &'a [u8]>) -> Result<usize, ErasureError> {
    let first = shards.next().map(|s| s.len()).unwrap_or(0);
    for s in shards {
        if s.len() != first {
            return Err(ErasureError::ShardSize {
                expected: first,
                got: s.len(),
            });
        }
    }
    Ok(first)
}

/// Serializes symbols to bytes: one byte per symbol for GF(2^8), big-endian
/// pairs for GF(2^16).
struct SymbolIo {
    wide: bool,
    symbols: usize,
}

impl SymbolIo {
    fn new(config: FieldConfig, bytes: usize) -> Result<Self, ErasureError> {
        let width = config.symbol_bytes();
        if !bytes.is_multiple_of(width) {
            return Err(ErasureError::PayloadAlignment {
                payload_bytes: bytes,
                symbol_bytes: width,
            });
        }
        Ok(SymbolIo {
            wide: width == 2,
            symbols: bytes / width,
        })
    }

    fn read(&self, bytes: &[u8]) -> Vec<u16> {
        if self.wide {
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        } else {
            bytes.iter().map(|&b| b as u16).collect()
        }
    }

    fn write(&self, symbols: &[u16]) -> Vec<u8> {
        if self.wide {
            symbols.iter().flat_map(|s| s.to_be_bytes()).collect()
        } else {
            symbols.iter().map(|&s| s as u8).collect()
        }
    }
}

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::NodeIdx;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LatencyError {
    #[error("latency range is empty or starts at zero ({min_us}..={max_us} us)")]
    Range { min_us: u64, max_us: u64 },
    #[error("region matrix must be square and non-empty")]
    MatrixShape,
    #[error("region matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("region matrix entry ({0}, {1}) is zero")]
    ZeroEntry(usize, usize),
}

/// One-way propagation delay between two simulator nodes.
///
/// `UniformRange` draws one fixed delay per unordered node pair from a hash of
/// `(seed, a, b)`, so a link keeps its delay for the whole run. `RegionMatrix`
/// places node `i` in region `i % regions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyModel {
    Constant { us: u64 },
    UniformRange { min_us: u64, max_us: u64 },
    RegionMatrix { matrix_us: Vec<Vec<u64>> },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::UniformRange {
            min_us: 40_000,
            max_us: 160_000,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), LatencyError> {
        match self {
            LatencyModel::Constant { .. } => Ok(()),
            &LatencyModel::UniformRange { min_us, max_us } => {
                if min_us == 0 || min_us > max_us {
                    Err(LatencyError::Range { min_us, max_us })
                } else {
                    Ok(())
                }
            }
            LatencyModel::RegionMatrix { matrix_us } => {
                let n = matrix_us.len();
                if n == 0 || matrix_us.iter().any(|row| row.len() != n) {
                    return Err(LatencyError::MatrixShape);
                }
                for i in 0..n {
                    for j in 0..n {
                        if matrix_us[i][j] != matrix_us[j][i] {
                            return Err(LatencyError::Asymmetric(i, j));
                        }
                        if matrix_us[i][j] == 0 {
                            return Err(LatencyError::ZeroEntry(i, j));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    pub fn latency_us(&self, seed: u64, a: NodeIdx, b: NodeIdx) -> u64 {
        match self {
            &LatencyModel::Constant { us } => us,
            &LatencyModel::UniformRange { min_us, max_us } => {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let h = splitmix64(seed ^ splitmix64(((lo as u64) << 32) | hi as u64));
                min_us + h % (max_us - min_us + 1)
            }
            LatencyModel::RegionMatrix { matrix_us } => {
                let n = matrix_us.len();
                matrix_us[a as usize % n][b as usize % n]
            }
        }
    }

    pub fn max_us(&self) -> u64 {
        match self {
            &LatencyModel::Constant { us } => us,
            &LatencyModel::UniformRange { max_us, .. } => max_us,
            LatencyModel::RegionMatrix { matrix_us } => matrix_us.iter().flatten().copied().max().unwrap_or(0),
        }
    }

    pub fn mean_us(&self) -> f64 {
        match self {
            &LatencyModel::Constant { us } => us as f64,
            &LatencyModel::UniformRange { min_us, max_us } => (min_us + max_us) as f64 / 2.0,
            LatencyModel::RegionMatrix { matrix_us } => {
                let n = matrix_us.len() as f64;
                matrix_us.iter().flatten().sum::<u64>() as f64 / (n * n)
            }
        }
    }
}

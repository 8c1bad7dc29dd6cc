use rand::RngCore;

use crate::model::{derive_node_id, NodeId};

/// Desk-scale cap on PoW difficulty.
pub const MAX_POW_DIFFICULTY: u32 = 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PowIdentity {
    pub secret: [u8; 32],
    pub node_id: NodeId,
    pub attempts: u64,
}

pub fn satisfies_pow(id: &NodeId, difficulty_bits: u32) -> bool {
    id.trailing_zeros() >= difficulty_bits
}

/// Draws random secrets until `derive_node_id(secret)` has at least
/// `difficulty_bits` trailing zero bits and `accept` holds, or `budget`
/// attempts are spent. The error carries the attempts made.
pub fn pow_node_id_where<R: RngCore + ?Sized>(
    rng: &mut R,
    difficulty_bits: u32,
    budget: u64,
    accept: impl Fn(&NodeId) -> bool,
) -> Result<PowIdentity, u64> {
    let mut secret = [0u8; 32];
    for attempts in 1..=budget {
        rng.fill_bytes(&mut secret);
        let node_id = derive_node_id(&secret).expect("non-empty secret");
        if satisfies_pow(&node_id, difficulty_bits) && accept(&node_id) {
            return Ok(PowIdentity {
                secret,
                node_id,
                attempts,
            });
        }
    }
    Err(budget)
}

/// Brute-forces an id with `difficulty_bits` trailing zeros. Difficulty is
/// clamped to [`MAX_POW_DIFFICULTY`].
pub fn pow_node_id<R: RngCore + ?Sized>(rng: &mut R, difficulty_bits: u32) -> PowIdentity {
    pow_node_id_where(rng, difficulty_bits.min(MAX_POW_DIFFICULTY), u64::MAX, |_| true)
        .expect("unbounded budget")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeterministicRng;

    #[test]
    fn difficulty_zero_accepts_first_attempt() {
        let id = pow_node_id(&mut DeterministicRng::new(1, 0), 0);
        assert_eq!(id.attempts, 1);
        assert_eq!(derive_node_id(&id.secret).unwrap(), id.node_id);
    }

    #[test]
    fn difficulty_eight_mean_attempts() {
        let mut rng = DeterministicRng::new(2, 0);
        let runs: Vec<_> = (0..100).map(|_| pow_node_id(&mut rng, 8)).collect();
        assert!(runs.iter().all(|r| r.node_id.trailing_zeros() >= 8));
        let mean = runs.iter().map(|r| r.attempts).sum::<u64>() as f64 / 100.0;
        assert!((128.0..=512.0).contains(&mean), "mean attempts {mean}");
    }

    #[test]
    fn budget_exhaustion_reports_attempts() {
        let r = pow_node_id_where(&mut DeterministicRng::new(3, 0), 0, 50, |_| false);
        assert_eq!(r, Err(50));
    }
}

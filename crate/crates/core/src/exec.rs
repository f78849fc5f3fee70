//! Serial/parallel execution switch and seed derivation.
//!
//! Without the `parallel` feature, [`Execution::Parallel`] runs serially.

/// How batch operations iterate over their units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Serial,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Serial
        }
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-unit seed from a base seed and a unit identity, so a unit's random
/// stream does not depend on iteration order.
pub fn derive_seed(base: u64, dialogue_id: &str, turn_id: u32) -> u64 {
    let mut bytes = Vec::with_capacity(dialogue_id.len() + 13);
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(dialogue_id.as_bytes());
    bytes.push(0x1f);
    bytes.extend_from_slice(&turn_id.to_le_bytes());
    splitmix64(stable_hash(&bytes))
}

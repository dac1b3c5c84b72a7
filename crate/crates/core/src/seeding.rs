//! Deterministic seed derivation and the worker-pool limit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "EXITLAB_THREADS";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stable child seed for `(base, module, index)`; independent of scheduling.
pub fn child_seed(base: u64, module: &str, index: u64) -> u64 {
    let a = splitmix64(base ^ fnv1a(module.as_bytes()));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn rng_for(base: u64, module: &str, index: u64) -> SimRng {
    SimRng::seed_from_u64(child_seed(base, module, index))
}

/// Installs a global rayon pool sized by `EXITLAB_THREADS` if set. Safe to
/// call more than once.
pub fn install_thread_limit() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(child_seed(7, "sbm", 3), child_seed(7, "sbm", 3));
        assert_ne!(child_seed(7, "sbm", 3), child_seed(7, "sbm", 4));
        assert_ne!(child_seed(7, "sbm", 3), child_seed(7, "pde", 3));
        assert_ne!(child_seed(7, "sbm", 3), child_seed(8, "sbm", 3));
    }
}

//! Deterministic seed derivation.
//!
//! All randomness in the pipeline flows from a single root seed; each
//! component derives its own stream by hashing (component name, root seed),
//! so adding a component never perturbs the streams of existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the component name, folded with the root seed.
pub fn derive_seed(component: &str, root_seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= root_seed;
    h = h.wrapping_mul(0x0000_0100_0000_01b3);
    h
}

/// Seeded generator for a named component.
pub fn component_rng(component: &str, root_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(component, root_seed))
}

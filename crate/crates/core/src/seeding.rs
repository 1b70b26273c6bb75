//! Deterministic seed fan-out: one master seed expands into labeled
//! per-component streams so that any single component (library, channels,
//! noise, codebook) is reproducible in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream label baked into the derived RNG key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Library = 1,
    Channels = 2,
    UplinkNoise = 3,
    DownlinkNoise = 4,
    Codebook = 5,
}

/// RNG keyed by (master seed, domain, a, b). Distinct keys give independent
/// streams; identical keys reproduce the same stream.
pub fn derive_rng(master: u64, domain: Domain, a: u64, b: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

//! File library construction, packet/subpacket splitting, and per-user
//! cache population.
//!
//! Each of the `N = K` files holds `C(K,t)` packets indexed by the t-subset
//! of users that can access them; each packet holds `C(K-t-1, L-1)`
//! subpackets of `f` uniformly pseudorandom bits. User `k` caches exactly
//! the subpackets whose access set contains `k`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::combinatorics::{SystemParams, UserSet};
use crate::error::{Error, Result};
use crate::seeding::{derive_rng, Domain};

/// Address of one subpacket: file `n`, access set `p` (|p| = t), split
/// index `q` in `1..=C(K-t-1, L-1)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubpacketId {
    pub n: u32,
    pub p: UserSet,
    pub q: u32,
}

impl SubpacketId {
    pub fn new(n: u32, p: UserSet, q: u32) -> Self {
        Self { n, p, q }
    }
}

impl fmt::Display for SubpacketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W^{}_{},{}", self.n, self.p, self.q)
    }
}

/// The full library: every subpacket's bits, keyed by id in lexicographic
/// (n, P, q) order. Immutable after generation.
#[derive(Debug, Clone)]
pub struct FileLibrary {
    params: SystemParams,
    seed: u64,
    bits: BTreeMap<SubpacketId, Vec<u8>>,
}

impl FileLibrary {
    /// Deterministic pseudorandom library: each subpacket's bits come from a
    /// counter-style stream keyed by (seed, n, rank(P), q), so the content of
    /// any subpacket is independent of generation order.
    pub fn generate(params: &SystemParams, seed: u64) -> Self {
        let all = params.all_users();
        let mut bits = BTreeMap::new();
        for n in 1..=params.n_files() {
            for p in UserSet::k_subsets(&all, params.t as usize) {
                let p_rank = p.rank(params.k);
                for q in 1..=params.splits_per_packet() as u32 {
                    let mut rng =
                        derive_rng(seed, Domain::Library, ((n as u64) << 32) | p_rank, q as u64);
                    let sub: Vec<u8> = (0..params.f_bits).map(|_| rng.gen_range(0..2u8)).collect();
                    bits.insert(SubpacketId::new(n, p.clone(), q), sub);
                }
            }
        }
        Self {
            params: params.clone(),
            seed,
            bits,
        }
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self, id: &SubpacketId) -> Option<&[u8]> {
        self.bits.get(id).map(|v| v.as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = &SubpacketId> {
        self.bits.keys()
    }

    /// All F bits of file `n`, subpackets concatenated in lexicographic
    /// (P, q) order.
    pub fn file_bits(&self, n: u32) -> Vec<u8> {
        self.bits
            .iter()
            .filter(|(id, _)| id.n == n)
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }

    /// Writes the library as a flat binary file: a fixed header (K, L, t, f,
    /// seed) followed by each subpacket's bits in lexicographic (n, P, q)
    /// order, packed MSB-first and padded to a byte boundary per subpacket.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"MIRL")?;
        for v in [
            self.params.k,
            self.params.l,
            self.params.t,
            self.params.f_bits,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        for sub in self.bits.values() {
            w.write_all(&pack_bits(sub))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a library dumped by [`FileLibrary::dump`]. Modulation and power
    /// settings are taken from `params`, which must agree with the stored
    /// (K, L, t, f) header.
    pub fn load(path: &Path, params: &SystemParams) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MIRL" {
            return Err(Error::Config("not a library dump (bad magic)".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut header = [0u32; 4];
        for h in header.iter_mut() {
            r.read_exact(&mut u32buf)?;
            *h = u32::from_le_bytes(u32buf);
        }
        let [k, l, t, f_bits] = header;
        if (k, l, t, f_bits) != (params.k, params.l, params.t, params.f_bits) {
            return Err(Error::Config(format!(
                "library header (K={k}, L={l}, t={t}, f={f_bits}) does not match parameters"
            )));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);

        let all = params.all_users();
        let mut bits = BTreeMap::new();
        let bytes_per_sub = (params.f_bits as usize).div_ceil(8);
        let mut buf = vec![0u8; bytes_per_sub];
        for n in 1..=params.n_files() {
            for p in UserSet::k_subsets(&all, params.t as usize) {
                for q in 1..=params.splits_per_packet() as u32 {
                    r.read_exact(&mut buf)?;
                    bits.insert(
                        SubpacketId::new(n, p.clone(), q),
                        unpack_bits(&buf, params.f_bits as usize),
                    );
                }
            }
        }
        Ok(Self {
            params: params.clone(),
            seed,
            bits,
        })
    }
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 1 << (7 - i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect()
}

/// The subpackets accessible to one user; bits are looked up in the library.
#[derive(Debug, Clone)]
pub struct CacheContents {
    pub user: u32,
    pub entries: BTreeSet<SubpacketId>,
}

impl CacheContents {
    pub fn contains(&self, id: &SubpacketId) -> bool {
        self.entries.contains(id)
    }
}

/// The cache of user `k`: exactly the ids whose access set contains `k`.
pub fn build_cache(library: &FileLibrary, k: u32) -> CacheContents {
    let entries = library
        .ids()
        .filter(|id| id.p.contains(k))
        .cloned()
        .collect();
    CacheContents { user: k, entries }
}

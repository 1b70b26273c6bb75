//! Link-level simulator for a two-step (uplink/downlink) coded data-exchange
//! scheme in which `K` single-antenna users, each holding a fraction of a
//! shared file library, swap the missing fragments through an `L`-antenna
//! base station that has no library access of its own.
//!
//! The uplink builds per-user superpositions of encoded cached subpackets so
//! that the base station, using zero-forcing receive beamformers, can extract
//! one size-(t+1) coded combination per user group out of only
//! `C(t+L-1, t)` transmissions per stage. The downlink broadcasts random
//! mixtures of those combinations through zero-forcing precoders; each user
//! cancels the cached part, solves a small linear system, and demaps its own
//! subpackets. An exact symbolic mode carries signals as formal linear
//! combinations and serves as the ground-truth oracle for the sampled
//! (noiseless or noisy) pipeline.

pub mod channel;
pub mod cli;
pub mod coding;
pub mod combinatorics;
pub mod downlink;
pub mod error;
pub mod ndt;
pub mod placement;
pub mod seeding;
pub mod uplink;

pub use error::{Error, Result};

/// Execution mode of the signal pipeline.
///
/// `Symbolic` carries signals as formal linear combinations of subpacket
/// symbols (exact bookkeeping, used as the ground-truth oracle); the other
/// two modes carry sampled complex basebands, without and with noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Symbolic,
    Noiseless,
    Noisy,
}

impl std::fmt::Display for SimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimMode::Symbolic => write!(f, "symbolic"),
            SimMode::Noiseless => write!(f, "noiseless"),
            SimMode::Noisy => write!(f, "noisy"),
        }
    }
}

impl std::str::FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symbolic" => Ok(SimMode::Symbolic),
            "noiseless" => Ok(SimMode::Noiseless),
            "noisy" => Ok(SimMode::Noisy),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected symbolic|noiseless|noisy)"
            ))),
        }
    }
}

//! Modulation map for subpacket bits and the formal-linear-combination
//! algebra carried by the symbolic pipeline.
//!
//! A subpacket of `f` bits maps blockwise onto `f/b` Gray-coded square-QAM
//! symbols of unit average energy, so every scalar relation in the scheme
//! applies symbol-wise across a block. The bit-exact constellation tables
//! are documented in `docs/constellations.md`.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::combinatorics::UserSet;
use crate::error::{Error, Result};
use crate::placement::{FileLibrary, SubpacketId};

/// Coefficients below this magnitude are dropped from the canonical sparse
/// form of a formal signal.
pub const COEFF_PRUNE_TOL: f64 = 1e-12;

/// Supported unit-energy Gray-coded square constellations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constellation {
    Qpsk,
    Qam16,
}

impl Constellation {
    pub fn bits_per_symbol(&self) -> u32 {
        match self {
            Constellation::Qpsk => 2,
            Constellation::Qam16 => 4,
        }
    }

    /// The 2^b constellation points in bit-pattern order: index `i` is the
    /// symbol for the bit group with value `i` read MSB-first.
    pub fn table(&self) -> Vec<Complex64> {
        let half = self.bits_per_symbol() / 2;
        let scale = match self {
            Constellation::Qpsk => 1.0 / 2f64.sqrt(),
            Constellation::Qam16 => 1.0 / 10f64.sqrt(),
        };
        (0..1u32 << self.bits_per_symbol())
            .map(|v| {
                let i_bits = v >> half;
                let q_bits = v & ((1 << half) - 1);
                Complex64::new(gray_pam(i_bits, half), gray_pam(q_bits, half)) * scale
            })
            .collect()
    }
}

impl std::str::FromStr for Constellation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qpsk" => Ok(Constellation::Qpsk),
            "qam16" | "16qam" => Ok(Constellation::Qam16),
            other => Err(Error::Config(format!(
                "unknown modulation '{other}' (expected qpsk|qam16)"
            ))),
        }
    }
}

impl std::fmt::Display for Constellation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Constellation::Qpsk => write!(f, "qpsk"),
            Constellation::Qam16 => write!(f, "qam16"),
        }
    }
}

/// Gray-coded PAM level for one axis: bits=0 maps to the most positive level.
///
/// 1 bit: 0 -> +1, 1 -> -1. 2 bits: 00 -> +3, 01 -> +1, 11 -> -1, 10 -> -3.
fn gray_pam(bits: u32, n_bits: u32) -> f64 {
    match n_bits {
        1 => {
            if bits == 0 {
                1.0
            } else {
                -1.0
            }
        }
        2 => match bits {
            0b00 => 3.0,
            0b01 => 1.0,
            0b11 => -1.0,
            0b10 => -3.0,
            _ => unreachable!(),
        },
        _ => unreachable!("only 1- or 2-bit axes are defined"),
    }
}

/// One encoded subpacket: `f/b` unit-average-power symbols, before any power
/// scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBlock {
    pub symbols: Vec<Complex64>,
}

/// Gray-coded square-QAM mapping of an f-bit subpacket, b bits per symbol;
/// invertible and of unit average power.
pub fn encode_subpacket(bits: &[u8], constellation: Constellation) -> Result<EncodedBlock> {
    let b = constellation.bits_per_symbol() as usize;
    if !bits.len().is_multiple_of(b) {
        return Err(Error::Domain(format!(
            "bit length {} not divisible by bits-per-symbol {b}",
            bits.len()
        )));
    }
    let table = constellation.table();
    let symbols = bits
        .chunks(b)
        .map(|group| {
            let mut v = 0usize;
            for &bit in group {
                v = (v << 1) | (bit as usize & 1);
            }
            table[v]
        })
        .collect();
    Ok(EncodedBlock { symbols })
}

/// Minimum-distance demapping, symbol by symbol, Gray-decoded back to bits.
/// Ties break toward the first constellation point in table order.
pub fn decode_block(symbols: &[Complex64], constellation: Constellation) -> Vec<u8> {
    let b = constellation.bits_per_symbol() as usize;
    let table = constellation.table();
    let mut bits = Vec::with_capacity(symbols.len() * b);
    for s in symbols {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, point) in table.iter().enumerate() {
            let d = (s - point).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        for j in (0..b).rev() {
            bits.push(((best >> j) & 1) as u8);
        }
    }
    bits
}

/// Label of one tracked noise term in the symbolic pipeline.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum NoiseLabel {
    /// One entry of the relay noise vector during uplink reception `s` of a
    /// stage, before any beamforming.
    UplinkRaw {
        stage: u32,
        s: UserSet,
        antenna: u32,
    },
    /// The scalar obtained by applying the receive beamformer of set `r` to
    /// the relay noise of reception `s`.
    UplinkBeamformed { stage: u32, r: UserSet, s: UserSet },
    /// The local receiver noise of `user` during a downlink stage.
    DownlinkLocal { stage: u32, user: u32 },
}

/// A linear combination of subpacket symbols plus tracked noise terms: the
/// symbolic-mode currency. Kept in canonical sparse form (no stored
/// coefficient below [`COEFF_PRUNE_TOL`]).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FormalSignal {
    terms: BTreeMap<SubpacketId, Complex64>,
    noise: BTreeMap<NoiseLabel, Complex64>,
}

impl FormalSignal {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn term(id: SubpacketId, coeff: Complex64) -> Self {
        let mut s = Self::zero();
        s.add_term(id, coeff);
        s
    }

    pub fn add_term(&mut self, id: SubpacketId, coeff: Complex64) {
        let new = self.terms.get(&id).copied().unwrap_or(Complex64::ZERO) + coeff;
        if new.norm() <= COEFF_PRUNE_TOL {
            self.terms.remove(&id);
        } else {
            self.terms.insert(id, new);
        }
    }

    pub fn add_noise(&mut self, label: NoiseLabel, coeff: Complex64) {
        let new = self.noise.get(&label).copied().unwrap_or(Complex64::ZERO) + coeff;
        if new.norm() <= COEFF_PRUNE_TOL {
            self.noise.remove(&label);
        } else {
            self.noise.insert(label, new);
        }
    }

    /// self += coeff * other, re-canonicalized.
    pub fn add_scaled(&mut self, coeff: Complex64, other: &FormalSignal) {
        for (id, c) in &other.terms {
            self.add_term(id.clone(), coeff * c);
        }
        for (label, c) in &other.noise {
            self.add_noise(label.clone(), coeff * c);
        }
    }

    pub fn scale(&mut self, coeff: Complex64) {
        if coeff.norm() <= COEFF_PRUNE_TOL {
            self.terms.clear();
            self.noise.clear();
            return;
        }
        for c in self.terms.values_mut() {
            *c *= coeff;
        }
        for c in self.noise.values_mut() {
            *c *= coeff;
        }
        self.prune();
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.norm() > COEFF_PRUNE_TOL);
        self.noise.retain(|_, c| c.norm() > COEFF_PRUNE_TOL);
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty() && self.noise.is_empty()
    }

    pub fn coeff(&self, id: &SubpacketId) -> Complex64 {
        self.terms.get(id).copied().unwrap_or(Complex64::ZERO)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&SubpacketId, Complex64)> {
        self.terms.iter().map(|(id, c)| (id, *c))
    }

    pub fn support(&self) -> Vec<&SubpacketId> {
        self.terms.keys().collect()
    }

    pub fn noise_terms(&self) -> impl Iterator<Item = (&NoiseLabel, Complex64)> {
        self.noise.iter().map(|(l, c)| (l, *c))
    }

    pub fn noise_labels(&self) -> Vec<&NoiseLabel> {
        self.noise.keys().collect()
    }

    /// Drops all raw uplink noise terms and records a single beamformed label
    /// in their place (the scalar a receive vector produces from one relay
    /// noise draw).
    pub fn collapse_raw_noise(&mut self, label: NoiseLabel) {
        self.noise
            .retain(|l, _| !matches!(l, NoiseLabel::UplinkRaw { .. }));
        self.add_noise(label, Complex64::ONE);
    }

    /// Numeric value of the subpacket part of this signal, symbol-wise over
    /// the block: sum of coeff * encode(bits). Noise terms are ignored, so
    /// this is the noiseless evaluation used by oracle comparisons.
    pub fn evaluate(&self, library: &FileLibrary, constellation: Constellation) -> Vec<Complex64> {
        let block_len = library.params().block_len();
        let mut out = vec![Complex64::ZERO; block_len];
        for (id, coeff) in &self.terms {
            let bits = library
                .bits(id)
                .unwrap_or_else(|| panic!("library is missing {id}"));
            let block = encode_subpacket(bits, constellation).expect("library bit length");
            for (o, s) in out.iter_mut().zip(block.symbols.iter()) {
                *o += coeff * s;
            }
        }
        out
    }
}

/// A signal in whichever representation the active mode uses: a formal
/// combination (symbolic) or a sampled complex block (numeric).
#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    Formal(FormalSignal),
    Block(Vec<Complex64>),
}

impl Signal {
    pub fn zero(symbolic: bool, block_len: usize) -> Self {
        if symbolic {
            Signal::Formal(FormalSignal::zero())
        } else {
            Signal::Block(vec![Complex64::ZERO; block_len])
        }
    }

    /// self += coeff * other. Both sides must share a representation.
    pub fn add_scaled(&mut self, coeff: Complex64, other: &Signal) {
        match (self, other) {
            (Signal::Formal(a), Signal::Formal(b)) => a.add_scaled(coeff, b),
            (Signal::Block(a), Signal::Block(b)) => {
                assert_eq!(a.len(), b.len(), "block length mismatch");
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    *x += coeff * y;
                }
            }
            _ => panic!("mixed symbolic/numeric signals"),
        }
    }

    pub fn scale(&mut self, coeff: Complex64) {
        match self {
            Signal::Formal(s) => s.scale(coeff),
            Signal::Block(b) => b.iter_mut().for_each(|x| *x *= coeff),
        }
    }

    pub fn as_formal(&self) -> &FormalSignal {
        match self {
            Signal::Formal(s) => s,
            Signal::Block(_) => panic!("expected a symbolic signal"),
        }
    }

    pub fn as_block(&self) -> &[Complex64] {
        match self {
            Signal::Block(b) => b,
            Signal::Formal(_) => panic!("expected a numeric signal"),
        }
    }

    /// Mean per-symbol energy. For a formal signal this is the expectation
    /// over independent unit-power subpacket symbols, i.e. the sum of squared
    /// coefficient magnitudes (noise terms excluded).
    pub fn mean_energy(&self) -> f64 {
        match self {
            Signal::Formal(s) => s.terms.values().map(|c| c.norm_sqr()).sum(),
            Signal::Block(b) => {
                if b.is_empty() {
                    0.0
                } else {
                    b.iter().map(|x| x.norm_sqr()).sum::<f64>() / b.len() as f64
                }
            }
        }
    }
}

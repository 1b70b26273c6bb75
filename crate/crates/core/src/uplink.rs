//! Uplink step: per-user transmit signals, relay reception, and codeword
//! extraction.
//!
//! In each stage transmission labeled by a (t+1)-subset `S` of the active
//! users, a member `k` of `S` sends the encoded subpacket its circular
//! successor in `S` is missing, while a non-member sends the negated sum of
//! the t+1 subpackets it holds for the neighboring transmission labels. The
//! relay then recovers one size-(t+1) combination per (t+1)-subset of the
//! stage: directly by beamforming a single reception (set A, label contains
//! the lone user) or by beamforming the sum of t+1 receptions, in which all
//! other subpacket terms cancel (set B).

use std::collections::BTreeMap;

use num_complex::Complex64;
use num_rational::Ratio;

use crate::channel::{sample_noise, zf_receive_vector, ChannelState, ReceiveBeamformer};
use crate::coding::{encode_subpacket, Constellation, NoiseLabel, Signal};
use crate::combinatorics::{binomial, StagePlan, SystemParams, UserSet};
use crate::error::{Error, Result};
use crate::placement::{CacheContents, FileLibrary, SubpacketId};
use crate::seeding::{derive_rng, Domain};
use crate::SimMode;

/// Power role of one transmitted subpacket within a stage.
///
/// The stage's lone user sends a single subpacket per slot at the reference
/// power; every subpacket sent by any other user (alone or inside the
/// negated sum) gets the shared non-lone power, chosen so that all users
/// spend the same energy per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerRole {
    Lone,
    NonLone,
}

/// Per-subpacket transmit power as a fraction of the uplink reference power:
/// 1 for the lone user, N_T / (C(t+L-2, t-1) + (t+1) C(t+L-2, t)) otherwise.
pub fn subpacket_power_ratio(role: PowerRole, params: &SystemParams) -> Ratio<u64> {
    match role {
        PowerRole::Lone => Ratio::from_integer(1),
        PowerRole::NonLone => {
            let tl = (params.t + params.l) as u64;
            let t = params.t as u64;
            let denom = binomial(tl - 2, t - 1) + (t + 1) * binomial(tl - 2, t);
            Ratio::new(params.n_transmissions(), denom)
        }
    }
}

/// Per-subpacket transmit power on the linear scale.
pub fn subpacket_power(role: PowerRole, params: &SystemParams) -> f64 {
    let r = subpacket_power_ratio(role, params);
    params.p_ul * (*r.numer() as f64) / (*r.denom() as f64)
}

/// Real amplitude scale applied to a unit-power encoded block.
pub fn subpacket_amplitude(role: PowerRole, params: &SystemParams) -> f64 {
    subpacket_power(role, params).sqrt()
}

/// Power role of `user` within `stage`.
pub fn power_role(user: u32, stage: &StagePlan) -> PowerRole {
    if user == stage.lone_user {
        PowerRole::Lone
    } else {
        PowerRole::NonLone
    }
}

/// Expected energy a stage member spends over the stage's N_T transmissions,
/// in units of the uplink reference power; equals N_T for every member.
pub fn user_stage_energy_ratio(user: u32, stage: &StagePlan, params: &SystemParams) -> Ratio<u64> {
    if user == stage.lone_user {
        return Ratio::from_integer(params.n_transmissions());
    }
    let member_slots = stage
        .transmissions
        .iter()
        .filter(|s| s.contains(user))
        .count() as u64;
    let outsider_slots = params.n_transmissions() - member_slots;
    let p = subpacket_power_ratio(PowerRole::NonLone, params);
    p * Ratio::from_integer(member_slots + outsider_slots * (params.t + 1) as u64)
}

/// One uplink transmission: the signal of every active user for the slot
/// labeled by `s`.
#[derive(Debug, Clone)]
pub struct UlTransmission {
    pub stage_index: u32,
    pub s: UserSet,
    pub per_user_signal: BTreeMap<u32, Signal>,
}

/// The relay's received signal for one transmission: one entry per antenna.
#[derive(Debug, Clone)]
pub struct UlReception {
    pub stage_index: u32,
    pub s: UserSet,
    pub y: Vec<Signal>,
}

/// One extracted size-(t+1) combination, ready for the downlink step.
#[derive(Debug, Clone)]
pub struct Codeword {
    pub stage_index: u32,
    /// The t+1 users whose subpackets this combination carries.
    pub q_set: UserSet,
    /// Split index of every subpacket inside (this stage's q for `q_set`).
    pub split_q: u32,
    /// +1 when the stage's lone user belongs to `q_set` (set A), -1 otherwise
    /// (set B).
    pub theta: f64,
    /// The stored combination, noise included.
    pub payload: Signal,
    /// Per-member beamformed channel gains v_Q h_k.
    pub coefficients: BTreeMap<u32, Complex64>,
    /// The relay-noise terms folded into the payload: one for set A, t+1 for
    /// set B.
    pub noise_labels: Vec<NoiseLabel>,
}

impl Codeword {
    /// The subpacket this combination carries for user `n`.
    pub fn subpacket_for(&self, n: u32) -> Result<SubpacketId> {
        if !self.q_set.contains(n) {
            return Err(Error::Domain(format!(
                "user {n} is not in codeword set {}",
                self.q_set
            )));
        }
        Ok(SubpacketId::new(n, self.q_set.without(n), self.split_q))
    }
}

/// The subpacket user `k` contributes to transmission `s` when `k` is a
/// member of `s`.
fn member_subpacket(k: u32, s: &UserSet, stage: &StagePlan) -> Result<SubpacketId> {
    let n = s.circular_successor(k)?;
    Ok(SubpacketId::new(n, s.without(n), stage.q_of(s)?))
}

/// The subpackets user `k` (not in `s`) sums over, one per member `j` of
/// `s`: for each j, the subpacket addressed by the set s + {k} - {j}.
fn outsider_subpackets(k: u32, s: &UserSet, stage: &StagePlan) -> Result<Vec<SubpacketId>> {
    s.iter()
        .map(|j| {
            let q_set = s.with(k).without(j);
            let n = q_set.circular_successor(k)?;
            Ok(SubpacketId::new(n, q_set.without(n), stage.q_of(&q_set)?))
        })
        .collect()
}

/// The signal user `k` transmits in the slot labeled `s`: a single encoded
/// subpacket when `k` is in `s`, the negated sum of t+1 encoded subpackets
/// otherwise, all at their allocated power.
#[allow(clippy::too_many_arguments)]
pub fn ul_transmit_signal(
    k: u32,
    s: &UserSet,
    stage: &StagePlan,
    cache: &CacheContents,
    library: &FileLibrary,
    params: &SystemParams,
    constellation: Constellation,
    mode: SimMode,
) -> Result<Signal> {
    debug_assert_eq!(cache.user, k);
    let (sign, ids) = if s.contains(k) {
        (1.0, vec![member_subpacket(k, s, stage)?])
    } else {
        (-1.0, outsider_subpackets(k, s, stage)?)
    };
    let amplitude = subpacket_amplitude(power_role(k, stage), params);

    let mut signal = Signal::zero(mode == SimMode::Symbolic, params.block_len());
    for id in ids {
        if !cache.contains(&id) {
            return Err(Error::PlacementConsistency { user: k, id });
        }
        let coeff = Complex64::new(sign * amplitude, 0.0);
        match &mut signal {
            Signal::Formal(f) => f.add_term(id, coeff),
            Signal::Block(b) => {
                let bits = library.bits(&id).expect("cached id exists in library");
                let block = encode_subpacket(bits, constellation)?;
                for (x, sym) in b.iter_mut().zip(block.symbols.iter()) {
                    *x += coeff * sym;
                }
            }
        }
    }
    Ok(signal)
}

/// Builds the full transmission for slot `s`: one signal per stage user.
pub fn build_ul_transmission(
    s: &UserSet,
    stage: &StagePlan,
    caches: &[CacheContents],
    library: &FileLibrary,
    params: &SystemParams,
    constellation: Constellation,
    mode: SimMode,
) -> Result<UlTransmission> {
    let mut per_user_signal = BTreeMap::new();
    for k in stage.users.iter() {
        let cache = &caches[k as usize - 1];
        let signal = ul_transmit_signal(k, s, stage, cache, library, params, constellation, mode)?;
        per_user_signal.insert(k, signal);
    }
    Ok(UlTransmission {
        stage_index: stage.index,
        s: s.clone(),
        per_user_signal,
    })
}

/// The relay's antenna-wise received signal: y_i = sum_k h_k[i] x_k + n_i.
///
/// In symbolic mode each antenna carries one raw noise label per
/// transmission; in numeric mode noise of the given variance is drawn from a
/// stream keyed by (seed, stage, transmission).
pub fn bs_receive(
    transmission: &UlTransmission,
    channels: &ChannelState,
    noise_variance: f64,
    seed: u64,
    params: &SystemParams,
    mode: SimMode,
) -> UlReception {
    let l = params.l as usize;
    let symbolic = mode == SimMode::Symbolic;
    let mut y: Vec<Signal> = (0..l)
        .map(|_| Signal::zero(symbolic, params.block_len()))
        .collect();
    for (&k, x) in &transmission.per_user_signal {
        let h = channels.h(k);
        for (i, yi) in y.iter_mut().enumerate() {
            yi.add_scaled(h[i], x);
        }
    }
    if symbolic {
        for (i, yi) in y.iter_mut().enumerate() {
            if let Signal::Formal(f) = yi {
                f.add_noise(
                    NoiseLabel::UplinkRaw {
                        stage: transmission.stage_index,
                        s: transmission.s.clone(),
                        antenna: i as u32,
                    },
                    Complex64::ONE,
                );
            }
        }
    } else if noise_variance > 0.0 {
        let mut rng = derive_rng(
            seed,
            Domain::UplinkNoise,
            transmission.stage_index as u64,
            transmission.s.rank(params.k),
        );
        for yi in y.iter_mut() {
            let n = sample_noise(params.block_len(), noise_variance, &mut rng);
            if let Signal::Block(b) = yi {
                for (x, z) in b.iter_mut().zip(n.iter()) {
                    *x += z;
                }
            }
        }
    }
    UlReception {
        stage_index: transmission.stage_index,
        s: transmission.s.clone(),
        y,
    }
}

/// Applies a receive beamformer to one reception, producing the scalar
/// stream v * y; in symbolic mode the raw relay-noise terms collapse into a
/// single beamformed label for (r_set, reception).
fn beamform_reception(
    beamformer: &ReceiveBeamformer,
    reception: &UlReception,
    symbolic: bool,
    block_len: usize,
) -> Signal {
    let mut out = Signal::zero(symbolic, block_len);
    for (i, yi) in reception.y.iter().enumerate() {
        out.add_scaled(beamformer.entry(i), yi);
    }
    if let Signal::Formal(f) = &mut out {
        f.collapse_raw_noise(NoiseLabel::UplinkBeamformed {
            stage: reception.stage_index,
            r: beamformer.q_set.clone(),
            s: reception.s.clone(),
        });
    }
    out
}

fn reception_for<'a>(
    receptions: &'a [UlReception],
    s: &UserSet,
    stage: &StagePlan,
) -> Result<&'a UlReception> {
    receptions
        .iter()
        .find(|r| r.s == *s)
        .ok_or_else(|| Error::StageIncomplete {
            stage: stage.index,
            detail: format!("missing reception for transmission {s}"),
        })
}

/// Set-A extraction: for each transmission label `S`, the beamformed
/// reception v_S y(S) is directly one stored combination.
pub fn extract_codewords_a(
    stage: &StagePlan,
    receptions: &[UlReception],
    beamformers: &BTreeMap<UserSet, ReceiveBeamformer>,
    channels: &ChannelState,
    params: &SystemParams,
    mode: SimMode,
) -> Result<Vec<Codeword>> {
    let symbolic = mode == SimMode::Symbolic;
    let mut out = Vec::with_capacity(stage.transmissions.len());
    for s in &stage.transmissions {
        let reception = reception_for(receptions, s, stage)?;
        let v = beamformers.get(s).ok_or_else(|| Error::StageIncomplete {
            stage: stage.index,
            detail: format!("missing receive beamformer for {s}"),
        })?;
        let payload = beamform_reception(v, reception, symbolic, params.block_len());
        let coefficients = s.iter().map(|k| (k, v.apply(channels.h(k)))).collect();
        out.push(Codeword {
            stage_index: stage.index,
            q_set: s.clone(),
            split_q: stage.q_of(s)?,
            theta: 1.0,
            payload,
            coefficients,
            noise_labels: vec![NoiseLabel::UplinkBeamformed {
                stage: stage.index,
                r: s.clone(),
                s: s.clone(),
            }],
        });
    }
    Ok(out)
}

/// Set-B extraction: for each (t+1)-subset `R` of the stage users avoiding
/// the lone user, beamform with v_R the sum of the t+1 receptions labeled
/// R + {lone} - {j}; all subpacket terms not addressed to `R` cancel.
pub fn extract_codewords_b(
    stage: &StagePlan,
    receptions: &[UlReception],
    beamformers: &BTreeMap<UserSet, ReceiveBeamformer>,
    channels: &ChannelState,
    params: &SystemParams,
    mode: SimMode,
) -> Result<Vec<Codeword>> {
    let symbolic = mode == SimMode::Symbolic;
    let mut out = Vec::new();
    for r_set in stage.codeword_sets(params.t) {
        if r_set.contains(stage.lone_user) {
            continue;
        }
        let v = beamformers
            .get(&r_set)
            .ok_or_else(|| Error::StageIncomplete {
                stage: stage.index,
                detail: format!("missing receive beamformer for {r_set}"),
            })?;
        let mut payload = Signal::zero(symbolic, params.block_len());
        let mut noise_labels = Vec::with_capacity(r_set.len());
        for j in r_set.iter() {
            let s = r_set.with(stage.lone_user).without(j);
            let reception = reception_for(receptions, &s, stage)?;
            let partial = beamform_reception(v, reception, symbolic, params.block_len());
            payload.add_scaled(Complex64::ONE, &partial);
            noise_labels.push(NoiseLabel::UplinkBeamformed {
                stage: stage.index,
                r: r_set.clone(),
                s,
            });
        }
        let coefficients = r_set.iter().map(|k| (k, v.apply(channels.h(k)))).collect();
        out.push(Codeword {
            stage_index: stage.index,
            q_set: r_set.clone(),
            split_q: stage.q_of(&r_set)?,
            theta: -1.0,
            payload,
            coefficients,
            noise_labels,
        });
    }
    Ok(out)
}

/// All C(t+L, t+1) combinations of a stage, sets A and B merged and sorted
/// by their user set.
pub fn extract_all_codewords(
    stage: &StagePlan,
    receptions: &[UlReception],
    beamformers: &BTreeMap<UserSet, ReceiveBeamformer>,
    channels: &ChannelState,
    params: &SystemParams,
    mode: SimMode,
) -> Result<Vec<Codeword>> {
    let mut all = extract_codewords_a(stage, receptions, beamformers, channels, params, mode)?;
    all.extend(extract_codewords_b(
        stage,
        receptions,
        beamformers,
        channels,
        params,
        mode,
    )?);
    all.sort_by(|a, b| a.q_set.cmp(&b.q_set));
    Ok(all)
}

/// Receive beamformers for every (t+1)-subset of the stage users.
pub fn stage_receive_beamformers(
    stage: &StagePlan,
    channels: &ChannelState,
    params: &SystemParams,
) -> Result<BTreeMap<UserSet, ReceiveBeamformer>> {
    stage
        .codeword_sets(params.t)
        .into_iter()
        .map(|q| zf_receive_vector(&q, stage, channels).map(|v| (q, v)))
        .collect()
}

//! Downlink step: broadcast of codeword superpositions, cache-aided
//! interference cancellation, per-user linear solving, equalization,
//! demapping, and file reassembly.
//!
//! Per stage the relay broadcasts, in each of N_T transmissions, a random
//! real-weighted superposition of all C(t+L, t+1) stored combinations, each
//! behind its zero-forcing precoder. A stage user observes only the N_T
//! combinations addressed to sets containing it, regenerates the cached
//! parts and removes them, inverts the N_T x N_T weight matrix, divides by
//! the known equalizer gain, and demaps its subpackets.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::{sample_noise, zf_precoder, ChannelState, Precoder, EPS_SIG};
use crate::coding::{decode_block, encode_subpacket, Constellation, NoiseLabel, Signal};
use crate::combinatorics::{StagePlan, SystemParams, UserSet};
use crate::error::{Error, Result};
use crate::placement::{CacheContents, FileLibrary, SubpacketId};
use crate::seeding::{derive_rng, Domain};
use crate::uplink::{power_role, subpacket_amplitude, Codeword};
use crate::SimMode;

/// Largest acceptable condition number of any per-user weight matrix.
pub const KAPPA_MAX: f64 = 1e6;
/// Regeneration cap for ill-conditioned codebook draws.
const CODEBOOK_RETRY_CAP: usize = 32;

/// The per-stage broadcast weights: one real vector of length N_T per
/// (t+1)-subset of the stage users.
#[derive(Debug, Clone)]
pub struct CoefficientCodebook {
    pub stage_index: u32,
    a: BTreeMap<UserSet, Vec<f64>>,
}

impl CoefficientCodebook {
    /// i.i.d. standard-normal weights, redrawn until every stage user's
    /// weight matrix has condition number at most [`KAPPA_MAX`].
    pub fn generate(stage: &StagePlan, params: &SystemParams, seed: u64) -> Result<Self> {
        let n_t = params.n_transmissions() as usize;
        for attempt in 0..CODEBOOK_RETRY_CAP {
            let mut rng = derive_rng(seed, Domain::Codebook, stage.index as u64, attempt as u64);
            let a: BTreeMap<UserSet, Vec<f64>> = stage
                .codeword_sets(params.t)
                .into_iter()
                .map(|q| {
                    let v: Vec<f64> = (0..n_t).map(|_| rng.sample(StandardNormal)).collect();
                    (q, v)
                })
                .collect();
            let candidate = Self {
                stage_index: stage.index,
                a,
            };
            if candidate.well_conditioned(stage) {
                return Ok(candidate);
            }
        }
        Err(Error::CodebookConditioning(format!(
            "no acceptable codebook for stage {} in {CODEBOOK_RETRY_CAP} draws",
            stage.index
        )))
    }

    /// Wraps externally chosen weights (a fixed-codebook hook), enforcing the
    /// same conditioning invariant as the random generator.
    pub fn from_vectors(
        stage: &StagePlan,
        params: &SystemParams,
        a: BTreeMap<UserSet, Vec<f64>>,
    ) -> Result<Self> {
        let n_t = params.n_transmissions() as usize;
        for q in stage.codeword_sets(params.t) {
            match a.get(&q) {
                Some(v) if v.len() == n_t => {}
                Some(_) => {
                    return Err(Error::CodebookConditioning(format!(
                        "weight vector for {q} has the wrong length"
                    )))
                }
                None => {
                    return Err(Error::CodebookConditioning(format!(
                        "missing weight vector for {q}"
                    )))
                }
            }
        }
        let candidate = Self {
            stage_index: stage.index,
            a,
        };
        if !candidate.well_conditioned(stage) {
            return Err(Error::CodebookConditioning(
                "a per-user weight matrix exceeds the condition limit".into(),
            ));
        }
        Ok(candidate)
    }

    pub fn weights(&self, q_set: &UserSet) -> Result<&[f64]> {
        self.a
            .get(q_set)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::StageIncomplete {
                stage: self.stage_index,
                detail: format!("no codebook weights for {q_set}"),
            })
    }

    /// The sets containing `user`, in lexicographic order: the columns of
    /// that user's weight matrix.
    pub fn sets_for_user(&self, user: u32) -> Vec<UserSet> {
        self.a
            .keys()
            .filter(|q| q.contains(user))
            .cloned()
            .collect()
    }

    /// The N_T x N_T matrix whose (j, i) entry is the weight of set
    /// `sets_for_user(user)[i]` in transmission j, scaled per transmission by
    /// `gains` (broadcast power normalization).
    pub fn user_matrix(&self, user: u32, gains: &[f64]) -> DMatrix<f64> {
        let sets = self.sets_for_user(user);
        let n_t = gains.len();
        DMatrix::from_fn(n_t, sets.len(), |j, i| self.a[&sets[i]][j] * gains[j])
    }

    fn well_conditioned(&self, stage: &StagePlan) -> bool {
        let n_t = stage.transmissions.len();
        let unit = vec![1.0; n_t];
        stage.users.iter().all(|k| {
            let m = self.user_matrix(k, &unit);
            if m.ncols() != n_t {
                return false;
            }
            condition_number(&m).is_some_and(|c| c <= KAPPA_MAX)
        })
    }
}

fn condition_number(m: &DMatrix<f64>) -> Option<f64> {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if smin <= 0.0 {
        None
    } else {
        Some(smax / smin)
    }
}

/// One user's received sample of one downlink transmission.
#[derive(Debug, Clone)]
pub struct DlObservation {
    pub user: u32,
    /// 0-based transmission index within the stage.
    pub j: usize,
    pub y: Signal,
}

/// Where each subpacket of a recovered file came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Cached,
    Decoded,
}

/// A fully reassembled file at one user.
#[derive(Debug, Clone)]
pub struct RecoveredFile {
    pub user: u32,
    pub bits: Vec<u8>,
    pub provenance: BTreeMap<SubpacketId, Provenance>,
}

impl RecoveredFile {
    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.values().filter(|&&x| x == p).count()
    }
}

/// The relay's broadcast for one transmission: an L-vector of signals
/// x(j) = g_j * sum_Q a_Q[j] f_Q w_Q, plus the power-normalization gain g_j.
///
/// In numeric modes g_j is chosen so the expected transmit power of the
/// superposition (payload powers measured at extraction) equals the
/// configured relay power; in symbolic mode g_j = 1 (the gain cancels in the
/// recovered scalars, which are what symbolic mode asserts on).
pub fn bs_dl_transmit(
    j: usize,
    codewords: &[Codeword],
    codebook: &CoefficientCodebook,
    precoders: &BTreeMap<UserSet, Precoder>,
    params: &SystemParams,
    mode: SimMode,
) -> Result<(Vec<Signal>, f64)> {
    let symbolic = mode == SimMode::Symbolic;
    let expected =
        crate::combinatorics::binomial((params.t + params.l) as u64, (params.t + 1) as u64)
            as usize;
    if codewords.len() != expected {
        return Err(Error::StageIncomplete {
            stage: codebook.stage_index,
            detail: format!("{} of {expected} combinations available", codewords.len()),
        });
    }

    let gain = if symbolic {
        1.0
    } else {
        let mut total = 0.0;
        for cw in codewords {
            let a = codebook.weights(&cw.q_set)?[j];
            total += a * a * cw.payload.mean_energy();
        }
        if total > 0.0 {
            (params.p_bs / total).sqrt()
        } else {
            1.0
        }
    };

    let l = params.l as usize;
    let mut x: Vec<Signal> = (0..l)
        .map(|_| Signal::zero(symbolic, params.block_len()))
        .collect();
    for cw in codewords {
        let a = codebook.weights(&cw.q_set)?[j];
        let w = precoders
            .get(&cw.q_set)
            .ok_or_else(|| Error::StageIncomplete {
                stage: codebook.stage_index,
                detail: format!("missing precoder for {}", cw.q_set),
            })?;
        for (i, xi) in x.iter_mut().enumerate() {
            xi.add_scaled(Complex64::new(gain * a, 0.0) * w.entry(i), &cw.payload);
        }
    }
    Ok((x, gain))
}

/// One user's reception of broadcast `x`: y = h_k^H x + n_k.
///
/// The local noise is a single draw per (stage, user), reused across the
/// stage's transmissions; the per-user decoding below stacks its N_T
/// observations into one linear system carrying that one noise term.
#[allow(clippy::too_many_arguments)]
pub fn user_receive(
    k: u32,
    j: usize,
    x: &[Signal],
    channels: &ChannelState,
    stage: &StagePlan,
    noise_variance: f64,
    seed: u64,
    params: &SystemParams,
    mode: SimMode,
) -> DlObservation {
    let symbolic = mode == SimMode::Symbolic;
    let mut y = Signal::zero(symbolic, params.block_len());
    let h = channels.h(k);
    for (i, xi) in x.iter().enumerate() {
        y.add_scaled(h[i].conj(), xi);
    }
    if symbolic {
        if let Signal::Formal(f) = &mut y {
            f.add_noise(
                NoiseLabel::DownlinkLocal {
                    stage: stage.index,
                    user: k,
                },
                Complex64::ONE,
            );
        }
    } else if noise_variance > 0.0 {
        let mut rng = derive_rng(seed, Domain::DownlinkNoise, stage.index as u64, k as u64);
        let n = sample_noise(params.block_len(), noise_variance, &mut rng);
        if let Signal::Block(b) = &mut y {
            for (x, z) in b.iter_mut().zip(n.iter()) {
                *x += z;
            }
        }
    }
    DlObservation { user: k, j, y }
}

/// The circular predecessor of `k` in `q_set`: the member whose successor is
/// `k`, i.e. the user whose uplink transmission carried `k`'s subpacket.
pub fn predecessor_in(q_set: &UserSet, k: u32) -> Result<u32> {
    q_set
        .iter()
        .find(|&l| q_set.circular_successor(l).ok() == Some(k))
        .ok_or_else(|| Error::Domain(format!("user {k} is not a member of {q_set}")))
}

/// Removes from one observation every cached term: for each combination
/// addressed to a set containing `k`, the t cached subpackets are re-encoded,
/// re-weighted with the known channel products, and subtracted, leaving only
/// `k`'s desired terms plus noise.
#[allow(clippy::too_many_arguments)]
pub fn cancel_cached_interference(
    observation: &DlObservation,
    codewords: &[Codeword],
    codebook: &CoefficientCodebook,
    gains: &[f64],
    precoders: &BTreeMap<UserSet, Precoder>,
    channels: &ChannelState,
    stage: &StagePlan,
    cache: &CacheContents,
    library: &FileLibrary,
    params: &SystemParams,
    constellation: Constellation,
    _mode: SimMode,
) -> Result<Signal> {
    let k = observation.user;
    let j = observation.j;
    let h_k = channels.h(k);
    let mut cleaned = observation.y.clone();
    for cw in codewords.iter().filter(|cw| cw.q_set.contains(k)) {
        let a = codebook.weights(&cw.q_set)?[j] * gains[j];
        let w = precoders
            .get(&cw.q_set)
            .ok_or_else(|| Error::StageIncomplete {
                stage: stage.index,
                detail: format!("missing precoder for {}", cw.q_set),
            })?;
        let hw = w.apply(h_k);
        let l_star = predecessor_in(&cw.q_set, k)?;
        for l in cw.q_set.iter().filter(|&l| l != l_star) {
            let n = cw.q_set.circular_successor(l)?;
            let sub = SubpacketId::new(n, cw.q_set.without(n), cw.split_q);
            if !cache.contains(&sub) {
                return Err(Error::PlacementConsistency { user: k, id: sub });
            }
            let coeff = Complex64::new(a * cw.theta, 0.0)
                * hw
                * cw.coefficients[&l]
                * subpacket_amplitude(power_role(l, stage), params);
            match &mut cleaned {
                Signal::Formal(f) => f.add_term(sub, -coeff),
                Signal::Block(b) => {
                    let bits = library.bits(&sub).expect("cached id exists in library");
                    let block = encode_subpacket(bits, constellation)?;
                    for (x, sym) in b.iter_mut().zip(block.symbols.iter()) {
                        *x -= coeff * sym;
                    }
                }
            }
        }
    }
    Ok(cleaned)
}

/// Solves one user's N_T x N_T linear system: observations stacked over the
/// stage's transmissions, unknowns being the per-set scalars
/// (h_k^H w_Q) f̂_Q. Returns one signal per set containing the user.
pub fn solve_user_system(
    k: u32,
    cleaned: &[Signal],
    codebook: &CoefficientCodebook,
    gains: &[f64],
    params: &SystemParams,
) -> Result<BTreeMap<UserSet, Signal>> {
    let n_t = params.n_transmissions() as usize;
    if cleaned.len() != n_t {
        return Err(Error::StageIncomplete {
            stage: codebook.stage_index,
            detail: format!("{} of {n_t} cleaned observations available", cleaned.len()),
        });
    }
    let m = codebook.user_matrix(k, gains);
    match condition_number(&m) {
        Some(c) if c <= KAPPA_MAX => {}
        other => {
            return Err(Error::CodebookConditioning(format!(
                "weight matrix of user {k} has condition number {other:?}"
            )))
        }
    }
    let inv = m.try_inverse().ok_or_else(|| {
        Error::CodebookConditioning(format!("singular weight matrix for user {k}"))
    })?;

    let symbolic = matches!(cleaned[0], Signal::Formal(_));
    let sets = codebook.sets_for_user(k);
    let mut out = BTreeMap::new();
    for (i, q_set) in sets.into_iter().enumerate() {
        let mut z = Signal::zero(symbolic, params.block_len());
        for (j, obs) in cleaned.iter().enumerate() {
            z.add_scaled(Complex64::new(inv[(i, j)], 0.0), obs);
        }
        out.insert(q_set, z);
    }
    Ok(out)
}

/// Divides each solved scalar by its known gain
/// theta_Q (h_k^H w_Q)(v_Q h_{l*}) amp_{l*}, leaving the desired unit-power
/// encoded subpacket plus scaled noise.
pub fn equalize(
    k: u32,
    solved: &BTreeMap<UserSet, Signal>,
    codewords: &[Codeword],
    precoders: &BTreeMap<UserSet, Precoder>,
    channels: &ChannelState,
    stage: &StagePlan,
    params: &SystemParams,
) -> Result<BTreeMap<UserSet, Signal>> {
    let h_k = channels.h(k);
    let mut out = BTreeMap::new();
    for (q_set, z) in solved {
        let cw = codewords
            .iter()
            .find(|c| c.q_set == *q_set)
            .ok_or_else(|| Error::StageIncomplete {
                stage: stage.index,
                detail: format!("no stored combination for {q_set}"),
            })?;
        let w = precoders.get(q_set).ok_or_else(|| Error::StageIncomplete {
            stage: stage.index,
            detail: format!("missing precoder for {q_set}"),
        })?;
        let l_star = predecessor_in(q_set, k)?;
        let gain = Complex64::new(cw.theta, 0.0)
            * w.apply(h_k)
            * cw.coefficients[&l_star]
            * subpacket_amplitude(power_role(l_star, stage), params);
        if gain.norm() < EPS_SIG {
            return Err(Error::Unequalizable {
                user: k,
                gain: gain.norm(),
            });
        }
        let mut eq = z.clone();
        eq.scale(gain.inv());
        out.insert(q_set.clone(), eq);
    }
    Ok(out)
}

/// Demaps equalized numeric blocks into addressed subpacket bits.
pub fn demap(
    k: u32,
    equalized: &BTreeMap<UserSet, Signal>,
    codewords: &[Codeword],
    constellation: Constellation,
) -> Result<BTreeMap<SubpacketId, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for (q_set, signal) in equalized {
        let cw = codewords
            .iter()
            .find(|c| c.q_set == *q_set)
            .expect("equalize checked presence");
        let sub = cw.subpacket_for(k)?;
        let bits = decode_block(signal.as_block(), constellation);
        out.insert(sub, bits);
    }
    Ok(out)
}

/// Equalizes and demaps in one go (numeric modes).
#[allow(clippy::too_many_arguments)]
pub fn equalize_and_demap(
    k: u32,
    solved: &BTreeMap<UserSet, Signal>,
    codewords: &[Codeword],
    precoders: &BTreeMap<UserSet, Precoder>,
    channels: &ChannelState,
    stage: &StagePlan,
    params: &SystemParams,
    constellation: Constellation,
) -> Result<BTreeMap<SubpacketId, Vec<u8>>> {
    let equalized = equalize(k, solved, codewords, precoders, channels, stage, params)?;
    demap(k, &equalized, codewords, constellation)
}

/// Concatenates user `k`'s file from its cached subpackets and the decoded
/// ones, in lexicographic (P, q) order, recording each subpacket's origin.
pub fn reassemble_file(
    k: u32,
    cache: &CacheContents,
    library: &FileLibrary,
    decoded: &BTreeMap<SubpacketId, Vec<u8>>,
    params: &SystemParams,
) -> Result<RecoveredFile> {
    let all = params.all_users();
    let mut bits = Vec::with_capacity(params.file_bits() as usize);
    let mut provenance = BTreeMap::new();
    let mut missing = Vec::new();
    for p in UserSet::k_subsets(&all, params.t as usize) {
        for q in 1..=params.splits_per_packet() as u32 {
            let sub = SubpacketId::new(k, p.clone(), q);
            if cache.contains(&sub) {
                bits.extend_from_slice(library.bits(&sub).expect("cached id exists"));
                provenance.insert(sub, Provenance::Cached);
            } else if let Some(d) = decoded.get(&sub) {
                bits.extend_from_slice(d);
                provenance.insert(sub, Provenance::Decoded);
            } else {
                missing.push(sub);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteRecovery { user: k, missing });
    }
    Ok(RecoveredFile {
        user: k,
        bits,
        provenance,
    })
}

/// Precoders for every (t+1)-subset of the stage users.
pub fn stage_precoders(
    stage: &StagePlan,
    channels: &ChannelState,
    params: &SystemParams,
) -> Result<BTreeMap<UserSet, Precoder>> {
    stage
        .codeword_sets(params.t)
        .into_iter()
        .map(|q| zf_precoder(&q, stage, channels).map(|w| (q, w)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinatorics::enumerate_stages;
    use crate::placement::build_cache;
    use crate::uplink::{
        bs_receive, build_ul_transmission, extract_all_codewords, stage_receive_beamformers,
    };

    fn us(members: &[u32]) -> UserSet {
        UserSet::from_slice(members).unwrap()
    }

    struct StageRun {
        params: SystemParams,
        library: FileLibrary,
        caches: Vec<CacheContents>,
        stage: StagePlan,
        channels: ChannelState,
        codewords: Vec<Codeword>,
        precoders: BTreeMap<UserSet, Precoder>,
        codebook: CoefficientCodebook,
    }

    /// Runs the uplink of the first stage and prepares downlink inputs.
    fn prepare(k: u32, l: u32, t: u32, seed: u64, mode: SimMode) -> StageRun {
        let params = SystemParams::new(k, l, t, 8, 2).unwrap();
        let library = FileLibrary::generate(&params, seed);
        let caches: Vec<_> = (1..=k).map(|u| build_cache(&library, u)).collect();
        let stage = enumerate_stages(&params)[0].clone();
        let channels = ChannelState::generate(&params, seed).unwrap();
        let receptions: Vec<_> = stage
            .transmissions
            .iter()
            .map(|s| {
                let tx = build_ul_transmission(
                    s,
                    &stage,
                    &caches,
                    &library,
                    &params,
                    Constellation::Qpsk,
                    mode,
                )
                .unwrap();
                bs_receive(&tx, &channels, 0.0, seed, &params, mode)
            })
            .collect();
        let beamformers = stage_receive_beamformers(&stage, &channels, &params).unwrap();
        let codewords =
            extract_all_codewords(&stage, &receptions, &beamformers, &channels, &params, mode)
                .unwrap();
        let precoders = stage_precoders(&stage, &channels, &params).unwrap();
        let codebook = CoefficientCodebook::generate(&stage, &params, seed).unwrap();
        StageRun {
            params,
            library,
            caches,
            stage,
            channels,
            codewords,
            precoders,
            codebook,
        }
    }

    /// Runs the downlink for every stage user, returning per-user solved
    /// scalars (pre-equalization) and equalized signals.
    #[allow(clippy::type_complexity)]
    fn run_downlink(
        run: &StageRun,
        mode: SimMode,
    ) -> BTreeMap<u32, (BTreeMap<UserSet, Signal>, BTreeMap<UserSet, Signal>)> {
        let n_t = run.params.n_transmissions() as usize;
        let mut broadcasts = Vec::new();
        let mut gains = Vec::new();
        for j in 0..n_t {
            let (x, g) = bs_dl_transmit(
                j,
                &run.codewords,
                &run.codebook,
                &run.precoders,
                &run.params,
                mode,
            )
            .unwrap();
            broadcasts.push(x);
            gains.push(g);
        }
        let mut out = BTreeMap::new();
        for k in run.stage.users.iter() {
            let cleaned: Vec<Signal> = (0..n_t)
                .map(|j| {
                    let obs = user_receive(
                        k,
                        j,
                        &broadcasts[j],
                        &run.channels,
                        &run.stage,
                        0.0,
                        0,
                        &run.params,
                        mode,
                    );
                    cancel_cached_interference(
                        &obs,
                        &run.codewords,
                        &run.codebook,
                        &gains,
                        &run.precoders,
                        &run.channels,
                        &run.stage,
                        &run.caches[k as usize - 1],
                        &run.library,
                        &run.params,
                        Constellation::Qpsk,
                        mode,
                    )
                    .unwrap()
                })
                .collect();
            let solved =
                solve_user_system(k, &cleaned, &run.codebook, &gains, &run.params).unwrap();
            let equalized = equalize(
                k,
                &solved,
                &run.codewords,
                &run.precoders,
                &run.channels,
                &run.stage,
                &run.params,
            )
            .unwrap();
            out.insert(k, (solved, equalized));
        }
        out
    }

    #[test]
    fn codebook_generation_and_conditioning() {
        let params = SystemParams::new(3, 2, 1, 8, 2).unwrap();
        let stage = enumerate_stages(&params)[0].clone();
        let cb = CoefficientCodebook::generate(&stage, &params, 1).unwrap();
        // per-user matrices are 2x2 and invertible for users 1, 2, 3
        for k in 1..=3 {
            let m = cb.user_matrix(k, &[1.0, 1.0]);
            assert_eq!((m.nrows(), m.ncols()), (2, 2));
            assert!(condition_number(&m).unwrap() <= KAPPA_MAX);
        }
        // seeded reproducibility
        let cb2 = CoefficientCodebook::generate(&stage, &params, 1).unwrap();
        for q in stage.codeword_sets(params.t) {
            assert_eq!(cb.weights(&q).unwrap(), cb2.weights(&q).unwrap());
        }
    }

    #[test]
    fn scalar_codebook_is_trivially_invertible() {
        // t=2, L=1 gives N_T = 1: weight vectors are scalars
        let params = SystemParams::new(3, 1, 2, 8, 2).unwrap();
        let stage = enumerate_stages(&params)[0].clone();
        let cb = CoefficientCodebook::generate(&stage, &params, 5).unwrap();
        for q in stage.codeword_sets(params.t) {
            assert_eq!(cb.weights(&q).unwrap().len(), 1);
        }
    }

    #[test]
    fn fixed_codebook_hook_validates() {
        let params = SystemParams::new(3, 2, 1, 8, 2).unwrap();
        let stage = enumerate_stages(&params)[0].clone();
        let mut a = BTreeMap::new();
        a.insert(us(&[1, 2]), vec![1.0, 0.0]);
        a.insert(us(&[1, 3]), vec![0.0, 1.0]);
        a.insert(us(&[2, 3]), vec![1.0, 1.0]);
        assert!(CoefficientCodebook::from_vectors(&stage, &params, a.clone()).is_ok());
        // degenerate weights are rejected
        a.insert(us(&[1, 3]), vec![1.0, 0.0]);
        assert!(CoefficientCodebook::from_vectors(&stage, &params, a).is_err());
    }

    #[test]
    fn broadcast_support_is_union_of_codeword_supports() {
        let run = prepare(3, 2, 1, 21, SimMode::Symbolic);
        let (x, gain) = bs_dl_transmit(
            0,
            &run.codewords,
            &run.codebook,
            &run.precoders,
            &run.params,
            SimMode::Symbolic,
        )
        .unwrap();
        assert_eq!(gain, 1.0);
        let mut union: Vec<&SubpacketId> = Vec::new();
        for cw in &run.codewords {
            for (sub, _) in cw.payload.as_formal().terms() {
                if !union.contains(&sub) {
                    union.push(sub);
                }
            }
        }
        for xi in &x {
            let sup = xi.as_formal().support();
            assert_eq!(sup.len(), union.len());
        }
    }

    #[test]
    fn broadcast_power_normalization_is_exact() {
        // the expected superposition power, measured from payload energies,
        // must equal the configured relay power for every transmission
        let mut run = prepare(5, 3, 2, 3, SimMode::Noiseless);
        run.params.p_bs = 2.5;
        for j in 0..run.params.n_transmissions() as usize {
            let (_, g) = bs_dl_transmit(
                j,
                &run.codewords,
                &run.codebook,
                &run.precoders,
                &run.params,
                SimMode::Noiseless,
            )
            .unwrap();
            let total: f64 = run
                .codewords
                .iter()
                .map(|cw| {
                    let a = run.codebook.weights(&cw.q_set).unwrap()[j] * g;
                    a * a * cw.payload.mean_energy()
                })
                .sum();
            assert!((total - run.params.p_bs).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_codeword_is_stage_incomplete() {
        let run = prepare(3, 2, 1, 21, SimMode::Symbolic);
        let partial = &run.codewords[..2];
        let err = bs_dl_transmit(
            0,
            partial,
            &run.codebook,
            &run.precoders,
            &run.params,
            SimMode::Symbolic,
        );
        assert!(matches!(err, Err(Error::StageIncomplete { .. })));
    }

    #[test]
    fn user_observation_contains_only_own_sets() {
        // symbolic support of y_k: only subpackets of combinations whose set
        // contains k survive the precoders
        let run = prepare(3, 2, 1, 8, SimMode::Symbolic);
        let (x, _) = bs_dl_transmit(
            0,
            &run.codewords,
            &run.codebook,
            &run.precoders,
            &run.params,
            SimMode::Symbolic,
        )
        .unwrap();
        for k in run.stage.users.iter() {
            let obs = user_receive(
                k,
                0,
                &x,
                &run.channels,
                &run.stage,
                0.0,
                0,
                &run.params,
                SimMode::Symbolic,
            );
            let f = obs.y.as_formal();
            let own: Vec<&Codeword> = run
                .codewords
                .iter()
                .filter(|cw| cw.q_set.contains(k))
                .collect();
            let mut expect: Vec<SubpacketId> = Vec::new();
            for cw in own {
                for (sub, _) in cw.payload.as_formal().terms() {
                    expect.push(sub.clone());
                }
            }
            expect.sort();
            let mut got: Vec<SubpacketId> = f.support().into_iter().cloned().collect();
            got.sort();
            assert_eq!(got, expect, "user {k}");
            // one local-noise label is present
            assert!(f
                .noise_labels()
                .iter()
                .any(|l| matches!(l, NoiseLabel::DownlinkLocal { user, .. } if *user == k)));
        }
    }

    #[test]
    fn cancellation_leaves_only_desired_file_terms() {
        // K=3 user 1: the cached B_1 (from {1,2}) and C_1 (from {1,3})
        // interference is regenerated and removed
        let run = prepare(3, 2, 1, 8, SimMode::Symbolic);
        let (x, _) = bs_dl_transmit(
            0,
            &run.codewords,
            &run.codebook,
            &run.precoders,
            &run.params,
            SimMode::Symbolic,
        )
        .unwrap();
        let obs = user_receive(
            1,
            0,
            &x,
            &run.channels,
            &run.stage,
            0.0,
            0,
            &run.params,
            SimMode::Symbolic,
        );
        let cleaned = cancel_cached_interference(
            &obs,
            &run.codewords,
            &run.codebook,
            &[1.0, 1.0],
            &run.precoders,
            &run.channels,
            &run.stage,
            &run.caches[0],
            &run.library,
            &run.params,
            Constellation::Qpsk,
            SimMode::Symbolic,
        )
        .unwrap();
        let f = cleaned.as_formal();
        for sub in f.support() {
            assert_eq!(sub.n, 1, "leftover interference term {sub}");
        }
        assert_eq!(f.support().len(), 2); // A_2 and A_3
    }

    #[test]
    fn cancellation_k5_leaves_six_desired_terms() {
        let run = prepare(5, 3, 2, 8, SimMode::Symbolic);
        let n_t = run.params.n_transmissions() as usize;
        let gains = vec![1.0; n_t];
        let (x, _) = bs_dl_transmit(
            0,
            &run.codewords,
            &run.codebook,
            &run.precoders,
            &run.params,
            SimMode::Symbolic,
        )
        .unwrap();
        let obs = user_receive(
            1,
            0,
            &x,
            &run.channels,
            &run.stage,
            0.0,
            0,
            &run.params,
            SimMode::Symbolic,
        );
        // before cancellation: 6 own sets x 3 subpackets each
        assert_eq!(obs.y.as_formal().support().len(), 18);
        let cleaned = cancel_cached_interference(
            &obs,
            &run.codewords,
            &run.codebook,
            &gains,
            &run.precoders,
            &run.channels,
            &run.stage,
            &run.caches[0],
            &run.library,
            &run.params,
            Constellation::Qpsk,
            SimMode::Symbolic,
        )
        .unwrap();
        let f = cleaned.as_formal();
        // 12 cached-coded terms removed, the 6 desired A_xy terms remain
        assert_eq!(f.support().len(), 6);
        for sub in f.support() {
            assert_eq!(sub.n, 1);
        }
    }

    #[test]
    fn solved_scalars_are_single_subpackets() {
        // after solving, each per-set signal carries exactly the desired
        // subpacket (plus noise labels), for every stage user
        for (k, l, t) in [(3u32, 2u32, 1u32), (5, 3, 2)] {
            let run = prepare(k, l, t, 9, SimMode::Symbolic);
            let results = run_downlink(&run, SimMode::Symbolic);
            for (user, (solved, equalized)) in &results {
                assert_eq!(solved.len() as u64, run.params.n_transmissions());
                for (q_set, z) in solved {
                    let f = z.as_formal();
                    let desired = SubpacketId::new(
                        *user,
                        q_set.without(*user),
                        run.stage.q_of(q_set).unwrap(),
                    );
                    assert_eq!(f.support(), vec![&desired], "user {user} set {q_set}");
                }
                // equalized coefficient is exactly 1
                for (q_set, z) in equalized {
                    let f = z.as_formal();
                    let desired = SubpacketId::new(
                        *user,
                        q_set.without(*user),
                        run.stage.q_of(q_set).unwrap(),
                    );
                    assert!(
                        (f.coeff(&desired) - Complex64::ONE).norm() < 1e-9,
                        "set {q_set}"
                    );
                }
            }
        }
    }

    #[test]
    fn identity_codebook_solving_is_relabeling() {
        // with user 1's weight matrix equal to the identity, its solved
        // scalars are exactly its cleaned observations
        let run0 = prepare(3, 2, 1, 33, SimMode::Symbolic);
        let mut a = BTreeMap::new();
        a.insert(us(&[1, 2]), vec![1.0, 0.0]);
        a.insert(us(&[1, 3]), vec![0.0, 1.0]);
        a.insert(us(&[2, 3]), vec![1.0, 1.0]);
        let codebook = CoefficientCodebook::from_vectors(&run0.stage, &run0.params, a).unwrap();
        let run = StageRun { codebook, ..run0 };
        let n_t = 2usize;
        let gains = vec![1.0; n_t];
        let mut broadcasts = Vec::new();
        for j in 0..n_t {
            let (x, _) = bs_dl_transmit(
                j,
                &run.codewords,
                &run.codebook,
                &run.precoders,
                &run.params,
                SimMode::Symbolic,
            )
            .unwrap();
            broadcasts.push(x);
        }
        let cleaned: Vec<Signal> = (0..n_t)
            .map(|j| {
                let obs = user_receive(
                    1,
                    j,
                    &broadcasts[j],
                    &run.channels,
                    &run.stage,
                    0.0,
                    0,
                    &run.params,
                    SimMode::Symbolic,
                );
                cancel_cached_interference(
                    &obs,
                    &run.codewords,
                    &run.codebook,
                    &gains,
                    &run.precoders,
                    &run.channels,
                    &run.stage,
                    &run.caches[0],
                    &run.library,
                    &run.params,
                    Constellation::Qpsk,
                    SimMode::Symbolic,
                )
                .unwrap()
            })
            .collect();
        let solved = solve_user_system(1, &cleaned, &run.codebook, &gains, &run.params).unwrap();
        // user 1's sets in order: {1,2} then {1,3}; identity matrix means
        // solved[{1,2}] = cleaned[0] and solved[{1,3}] = cleaned[1]
        for (q_set, j) in [(us(&[1, 2]), 0usize), (us(&[1, 3]), 1usize)] {
            let s = solved[&q_set].as_formal();
            let c = cleaned[j].as_formal();
            for (sub, coeff) in c.terms() {
                assert!((s.coeff(sub) - coeff).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_labels_propagate_through_decoding() {
        // each solved scalar carries exactly its source combination's relay
        // labels (1 for set A, t+1 for set B) plus the one local label
        for (k, l, t) in [(3u32, 2u32, 1u32), (5, 3, 2)] {
            let run = prepare(k, l, t, 29, SimMode::Symbolic);
            let results = run_downlink(&run, SimMode::Symbolic);
            for (user, (solved, _)) in &results {
                for (q_set, z) in solved {
                    let f = z.as_formal();
                    let cw = run.codewords.iter().find(|c| c.q_set == *q_set).unwrap();
                    let mut expect: Vec<NoiseLabel> = cw.noise_labels.clone();
                    expect.push(NoiseLabel::DownlinkLocal {
                        stage: run.stage.index,
                        user: *user,
                    });
                    expect.sort();
                    let mut got: Vec<NoiseLabel> = f.noise_labels().into_iter().cloned().collect();
                    got.sort();
                    assert_eq!(got, expect, "user {user} set {q_set}");
                    assert_eq!(got.len(), if cw.theta > 0.0 { 2 } else { t as usize + 2 });
                }
            }
        }
    }

    #[test]
    fn noiseless_numeric_roundtrip_decodes_library_bits() {
        for (k, l, t) in [(3u32, 2u32, 1u32), (5, 3, 2)] {
            let run = prepare(k, l, t, 41, SimMode::Noiseless);
            let n_t = run.params.n_transmissions() as usize;
            let mut broadcasts = Vec::new();
            let mut gains = Vec::new();
            for j in 0..n_t {
                let (x, g) = bs_dl_transmit(
                    j,
                    &run.codewords,
                    &run.codebook,
                    &run.precoders,
                    &run.params,
                    SimMode::Noiseless,
                )
                .unwrap();
                broadcasts.push(x);
                gains.push(g);
            }
            for user in run.stage.users.iter() {
                let cleaned: Vec<Signal> = (0..n_t)
                    .map(|j| {
                        let obs = user_receive(
                            user,
                            j,
                            &broadcasts[j],
                            &run.channels,
                            &run.stage,
                            0.0,
                            0,
                            &run.params,
                            SimMode::Noiseless,
                        );
                        cancel_cached_interference(
                            &obs,
                            &run.codewords,
                            &run.codebook,
                            &gains,
                            &run.precoders,
                            &run.channels,
                            &run.stage,
                            &run.caches[user as usize - 1],
                            &run.library,
                            &run.params,
                            Constellation::Qpsk,
                            SimMode::Noiseless,
                        )
                        .unwrap()
                    })
                    .collect();
                let solved =
                    solve_user_system(user, &cleaned, &run.codebook, &gains, &run.params).unwrap();
                let decoded = equalize_and_demap(
                    user,
                    &solved,
                    &run.codewords,
                    &run.precoders,
                    &run.channels,
                    &run.stage,
                    &run.params,
                    Constellation::Qpsk,
                )
                .unwrap();
                assert_eq!(decoded.len(), n_t);
                for (sub, bits) in &decoded {
                    assert_eq!(sub.n, user);
                    assert_eq!(
                        bits.as_slice(),
                        run.library.bits(sub).unwrap(),
                        "user {user} subpacket {sub}"
                    );
                }
            }
        }
    }

    #[test]
    fn forced_zero_gain_is_unequalizable() {
        let run = prepare(3, 2, 1, 21, SimMode::Symbolic);
        let mut codewords = run.codewords.clone();
        for cw in codewords.iter_mut() {
            for c in cw.coefficients.values_mut() {
                *c = Complex64::ZERO;
            }
        }
        let solved: BTreeMap<UserSet, Signal> = [
            (us(&[1, 2]), Signal::zero(true, 4)),
            (us(&[1, 3]), Signal::zero(true, 4)),
        ]
        .into();
        let err = equalize(
            1,
            &solved,
            &codewords,
            &run.precoders,
            &run.channels,
            &run.stage,
            &run.params,
        );
        assert!(matches!(err, Err(Error::Unequalizable { .. })));
    }

    #[test]
    fn reassembly_counts_and_errors() {
        let run = prepare(5, 3, 2, 41, SimMode::Noiseless);
        // user 1: 4 cached + 6 decoded = 10 = C(5,2) subpackets
        let decoded: BTreeMap<SubpacketId, Vec<u8>> = run
            .library
            .ids()
            .filter(|sub| sub.n == 1 && !sub.p.contains(1))
            .map(|sub| (sub.clone(), run.library.bits(sub).unwrap().to_vec()))
            .collect();
        assert_eq!(decoded.len(), 6);
        let file = reassemble_file(1, &run.caches[0], &run.library, &decoded, &run.params).unwrap();
        assert_eq!(file.count(Provenance::Cached), 4);
        assert_eq!(file.count(Provenance::Decoded), 6);
        assert_eq!(file.bits, run.library.file_bits(1));

        // dropping one subpacket must name it in the error
        let mut partial = decoded.clone();
        let dropped = partial.keys().next().cloned().unwrap();
        partial.remove(&dropped);
        match reassemble_file(1, &run.caches[0], &run.library, &partial, &run.params) {
            Err(Error::IncompleteRecovery { user, missing }) => {
                assert_eq!(user, 1);
                assert_eq!(missing, vec![dropped]);
            }
            other => panic!("expected incomplete recovery, got {other:?}"),
        }
    }
}

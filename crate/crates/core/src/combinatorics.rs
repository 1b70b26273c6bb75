//! Subset enumeration, ranking, and the stage/transmission bookkeeping that
//! drives both communication steps.
//!
//! Users are numbered `1..=K`. Every subset of users is kept as a strictly
//! ascending sequence, and every enumeration in this crate is lexicographic
//! over those sequences, so all derived indexing (stage order, transmission
//! order, split-index assignment) is reproducible.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Binomial coefficient with u128 intermediates; returns 0 for k > n.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut result: u128 = 1;
    for i in 1..=k as u128 {
        result = result * (n as u128 - (k as u128 - i)) / i;
    }
    result as u64
}

/// A set of user indices, stored strictly ascending.
///
/// Ordering (`Ord`) is lexicographic over the member sequence, which for
/// equal-sized sets is exactly the subset order used throughout.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserSet {
    members: Vec<u32>,
}

impl UserSet {
    /// Builds a set from arbitrary user indices, validating that they are
    /// strictly ascending after sorting (i.e. no duplicates) and >= 1.
    pub fn new(mut members: Vec<u32>) -> Result<Self> {
        members.sort_unstable();
        if members.first().is_some_and(|&m| m == 0) {
            return Err(Error::Domain("user indices are 1-based".into()));
        }
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain("duplicate user index in set".into()));
        }
        Ok(Self { members })
    }

    pub fn from_slice(members: &[u32]) -> Result<Self> {
        Self::new(members.to_vec())
    }

    pub fn members(&self) -> &[u32] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, user: u32) -> bool {
        self.members.binary_search(&user).is_ok()
    }

    pub fn min_member(&self) -> u32 {
        self.members[0]
    }

    pub fn max_member(&self) -> u32 {
        *self.members.last().expect("non-empty set")
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.members.iter().copied()
    }

    /// Set with `user` inserted.
    pub fn with(&self, user: u32) -> Self {
        let mut members = self.members.clone();
        if let Err(pos) = members.binary_search(&user) {
            members.insert(pos, user);
        }
        Self { members }
    }

    /// Set with `user` removed.
    pub fn without(&self, user: u32) -> Self {
        let mut members = self.members.clone();
        if let Ok(pos) = members.binary_search(&user) {
            members.remove(pos);
        }
        Self { members }
    }

    /// True if every member of `self` is a member of `other`.
    pub fn is_subset_of(&self, other: &UserSet) -> bool {
        self.members.iter().all(|&m| other.contains(m))
    }

    /// The element of the set that follows `l` under a circular shift: the
    /// smallest member greater than `l`, wrapping to the minimum when `l` is
    /// the maximum. `l` must be a member.
    pub fn circular_successor(&self, l: u32) -> Result<u32> {
        if !self.contains(l) {
            return Err(Error::Domain(format!(
                "circular successor of {l} requested but {l} is not a member of {self}"
            )));
        }
        if l == self.max_member() {
            Ok(self.min_member())
        } else {
            Ok(*self
                .members
                .iter()
                .find(|&&m| m > l)
                .expect("l < max implies a larger member exists"))
        }
    }

    /// All `k`-subsets of `ground`, in lexicographic order.
    pub fn k_subsets(ground: &[u32], k: usize) -> Vec<UserSet> {
        let n = ground.len();
        if k > n {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(binomial(n as u64, k as u64) as usize);
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            out.push(UserSet {
                members: idx.iter().map(|&i| ground[i]).collect(),
            });
            // advance to the next combination
            let mut i = k;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if idx[i] != i + n - k {
                    break;
                }
            }
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }

    /// 0-based lexicographic rank of this set among all same-sized subsets of
    /// `[1..=n]`.
    pub fn rank(&self, n: u32) -> u64 {
        let k = self.members.len() as u64;
        let mut rank = 0u64;
        let mut prev = 0u32;
        for (i, &c) in self.members.iter().enumerate() {
            for skipped in prev + 1..c {
                rank += binomial((n - skipped) as u64, k - i as u64 - 1);
            }
            prev = c;
        }
        rank
    }
}

impl fmt::Display for UserSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, m) in self.members.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{m}")?;
        }
        write!(f, "}}")
    }
}

/// Global system parameters.
///
/// `k` users each cache a `t/k` fraction of the library; the relay has `l`
/// antennas. Each of the `k` files splits into `C(k,t)` packets, and each
/// packet into `C(k-t-1, l-1)` subpackets of `f_bits` bits.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    pub k: u32,
    pub l: u32,
    pub t: u32,
    /// Subpacket size in bits.
    pub f_bits: u32,
    /// Bits per modulation symbol (2 for QPSK, 4 for 16-QAM).
    pub bits_per_symbol: u32,
    /// Uplink reference power (linear scale) of the single-subpacket user.
    pub p_ul: f64,
    /// Total relay transmit power (linear scale) per downlink transmission.
    pub p_bs: f64,
}

impl SystemParams {
    pub fn new(k: u32, l: u32, t: u32, f_bits: u32, bits_per_symbol: u32) -> Result<Self> {
        let params = Self {
            k,
            l,
            t,
            f_bits,
            bits_per_symbol,
            p_ul: 1.0,
            p_bs: 1.0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 1 {
            return Err(Error::InvalidParams("t >= 1 violated".into()));
        }
        if self.l < 1 {
            return Err(Error::InvalidParams("L >= 1 violated".into()));
        }
        if self.k < self.t + self.l {
            return Err(Error::InvalidParams(format!(
                "K >= t+L violated: K={}, t+L={}",
                self.k,
                self.t + self.l
            )));
        }
        if self.bits_per_symbol == 0 || !self.f_bits.is_multiple_of(self.bits_per_symbol) {
            return Err(Error::InvalidParams(format!(
                "f divisible by bits-per-symbol violated: f={}, b={}",
                self.f_bits, self.bits_per_symbol
            )));
        }
        if self.p_ul <= 0.0 || self.p_bs <= 0.0 {
            return Err(Error::InvalidParams("powers must be positive".into()));
        }
        Ok(())
    }

    /// Number of files; one per user.
    pub fn n_files(&self) -> u32 {
        self.k
    }

    /// Cache ratio t/K as an exact rational (numerator, denominator).
    pub fn gamma(&self) -> (u32, u32) {
        (self.t, self.k)
    }

    /// Users active per stage.
    pub fn stage_size(&self) -> u32 {
        self.t + self.l
    }

    /// Stages per step: C(K, t+L).
    pub fn n_stages(&self) -> u64 {
        binomial(self.k as u64, (self.t + self.l) as u64)
    }

    /// Transmissions per stage: C(t+L-1, t).
    pub fn n_transmissions(&self) -> u64 {
        binomial((self.t + self.l - 1) as u64, self.t as u64)
    }

    /// Packets per file: C(K, t).
    pub fn packets_per_file(&self) -> u64 {
        binomial(self.k as u64, self.t as u64)
    }

    /// Subpackets per packet: C(K-t-1, L-1).
    pub fn splits_per_packet(&self) -> u64 {
        binomial((self.k - self.t - 1) as u64, (self.l - 1) as u64)
    }

    /// Subpackets per file.
    pub fn subpackets_per_file(&self) -> u64 {
        self.packets_per_file() * self.splits_per_packet()
    }

    /// File size in bits (F = f * C(K,t) * C(K-t-1,L-1)).
    pub fn file_bits(&self) -> u64 {
        self.f_bits as u64 * self.subpackets_per_file()
    }

    /// Symbols per encoded subpacket block.
    pub fn block_len(&self) -> usize {
        (self.f_bits / self.bits_per_symbol) as usize
    }

    /// All users `1..=K`.
    pub fn all_users(&self) -> Vec<u32> {
        (1..=self.k).collect()
    }
}

/// One stage of either step: a (t+L)-user activation period with its
/// transmission schedule and split-index assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    /// 1-based stage index in lexicographic stage order.
    pub index: u32,
    /// The t+L active users.
    pub users: UserSet,
    /// The stage member that sends a single subpacket per slot (minimum).
    pub lone_user: u32,
    /// The N_T transmission labels: (t+1)-subsets of `users` containing
    /// `lone_user`, lexicographic.
    pub transmissions: Vec<UserSet>,
    /// For every (t+1)-subset Q of `users`, the split index q assigned to the
    /// subpackets this stage carries for Q.
    q_assignment: BTreeMap<UserSet, u32>,
}

impl StagePlan {
    /// The split index assigned to the (t+1)-subset `q_set` in this stage.
    pub fn q_of(&self, q_set: &UserSet) -> Result<u32> {
        self.q_assignment.get(q_set).copied().ok_or_else(|| {
            Error::Domain(format!(
                "{q_set} is not a (t+1)-subset of stage users {}",
                self.users
            ))
        })
    }

    /// All (t+1)-subsets of the stage users, lexicographic. These label the
    /// combinations the relay can form out of this stage.
    pub fn codeword_sets(&self, t: u32) -> Vec<UserSet> {
        UserSet::k_subsets(self.users.members(), t as usize + 1)
    }
}

/// The transmission labels of a stage: all (t+1)-subsets of `users` that
/// contain `lone_user`, in lexicographic order.
pub fn build_set_m(users: &UserSet, lone_user: u32, t: u32) -> Vec<UserSet> {
    UserSet::k_subsets(users.members(), t as usize + 1)
        .into_iter()
        .filter(|s| s.contains(lone_user))
        .collect()
}

/// Split index for the subpackets that the stage `stage` carries for the
/// (t+1)-subset `q_set`: the 1-based lexicographic rank of `stage.users`
/// among all (t+L)-subsets of `[1..=K]` containing `q_set`.
///
/// There are exactly C(K-t-1, L-1) such supersets, matching the number of
/// subpackets per packet, so ranging over stages covers every split exactly
/// once.
pub fn q_index(q_set: &UserSet, stage: &StagePlan, params: &SystemParams) -> Result<u32> {
    if !q_set.is_subset_of(&stage.users) {
        return Err(Error::Domain(format!(
            "{q_set} is not contained in stage users {}",
            stage.users
        )));
    }
    let mut supersets = supersets_of(q_set, params);
    supersets.sort();
    let pos = supersets
        .iter()
        .position(|s| *s == stage.users)
        .expect("stage users are a superset of q_set");
    Ok(pos as u32 + 1)
}

/// All (t+L)-subsets of `[1..=K]` containing `q_set` (unsorted).
fn supersets_of(q_set: &UserSet, params: &SystemParams) -> Vec<UserSet> {
    let rest: Vec<u32> = (1..=params.k).filter(|u| !q_set.contains(*u)).collect();
    let extra = (params.stage_size() as usize).saturating_sub(q_set.len());
    UserSet::k_subsets(&rest, extra)
        .into_iter()
        .map(|c| {
            let mut members: Vec<u32> = q_set.iter().chain(c.iter()).collect();
            members.sort_unstable();
            UserSet { members }
        })
        .collect()
}

/// One `StagePlan` per (t+L)-subset of `[1..=K]`, in lexicographic order.
pub fn enumerate_stages(params: &SystemParams) -> Vec<StagePlan> {
    let all = params.all_users();
    UserSet::k_subsets(&all, params.stage_size() as usize)
        .into_iter()
        .enumerate()
        .map(|(i, users)| {
            let lone_user = users.min_member();
            let transmissions = build_set_m(&users, lone_user, params.t);
            let mut stage = StagePlan {
                index: i as u32 + 1,
                users,
                lone_user,
                transmissions,
                q_assignment: BTreeMap::new(),
            };
            let mut q_assignment = BTreeMap::new();
            for q_set in stage.codeword_sets(params.t) {
                let q = q_index(&q_set, &stage, params).expect("subset of stage users");
                q_assignment.insert(q_set, q);
            }
            stage.q_assignment = q_assignment;
            stage
        })
        .collect()
}

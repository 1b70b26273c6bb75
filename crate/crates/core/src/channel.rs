//! Channel vectors, zero-forcing receive/transmit beamformers, and noise
//! sampling.
//!
//! All beamformers are unit-norm with a canonical phase (first entry above
//! the pruning floor rotated to be positive real), so derived coefficients
//! are deterministic given the channel draw.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::combinatorics::{StagePlan, SystemParams, UserSet};
use crate::error::{Error, Result};
use crate::seeding::{derive_rng, Domain};

/// Residual above which a supposedly nulled product counts as a failure.
pub const EPS_NULL: f64 = 1e-9;
/// Magnitude below which a supposedly useful product counts as degenerate.
pub const EPS_SIG: f64 = 1e-6;
/// Relative rank tolerance of the generic-position check.
const EPS_RANK: f64 = 1e-6;
/// Resampling cap when a channel draw fails the generic-position check.
const CHANNEL_RETRY_CAP: usize = 16;

/// The K complex channel vectors of length L.
#[derive(Debug, Clone)]
pub struct ChannelState {
    h: Vec<DVector<Complex64>>,
}

impl ChannelState {
    /// i.i.d. circularly-symmetric unit-variance complex Gaussian channels,
    /// resampled until every L-subset of vectors is in generic position.
    pub fn generate(params: &SystemParams, seed: u64) -> Result<Self> {
        let mut rng = derive_rng(seed, Domain::Channels, 0, 0);
        for _ in 0..CHANNEL_RETRY_CAP {
            let h: Vec<DVector<Complex64>> = (0..params.k)
                .map(|_| {
                    DVector::from_iterator(
                        params.l as usize,
                        (0..params.l).map(|_| sample_cn(&mut rng, 1.0)),
                    )
                })
                .collect();
            let candidate = Self { h };
            if candidate.in_generic_position(params.l as usize) {
                return Ok(candidate);
            }
        }
        Err(Error::ChannelDegeneracy(format!(
            "no generic channel draw found in {CHANNEL_RETRY_CAP} attempts"
        )))
    }

    /// Wraps externally supplied vectors, enforcing the generic-position
    /// invariant.
    pub fn from_vectors(h: Vec<Vec<Complex64>>) -> Result<Self> {
        if h.is_empty() {
            return Err(Error::ChannelDegeneracy("no channel vectors".into()));
        }
        let l = h[0].len();
        if h.iter().any(|v| v.len() != l) {
            return Err(Error::ChannelDegeneracy("unequal vector lengths".into()));
        }
        let state = Self {
            h: h.into_iter().map(DVector::from_vec).collect(),
        };
        if !state.in_generic_position(l) {
            return Err(Error::ChannelDegeneracy(
                "channel vectors are not in generic position".into(),
            ));
        }
        Ok(state)
    }

    /// Channel vector of `user` (1-based).
    pub fn h(&self, user: u32) -> &DVector<Complex64> {
        &self.h[user as usize - 1]
    }

    pub fn num_users(&self) -> usize {
        self.h.len()
    }

    /// Every L-subset of channel vectors must be numerically full rank; this
    /// implies each beamformer's null space is one-dimensional and no useful
    /// product degenerates.
    fn in_generic_position(&self, l: usize) -> bool {
        let users: Vec<u32> = (1..=self.h.len() as u32).collect();
        for subset in UserSet::k_subsets(&users, l) {
            let m = DMatrix::from_columns(
                &subset.iter().map(|u| self.h(u).clone()).collect::<Vec<_>>(),
            );
            let sv = m.svd(false, false).singular_values;
            let smax = sv.max();
            let smin = sv.min();
            if smax <= 0.0 || smin < EPS_RANK * smax {
                return false;
            }
        }
        true
    }
}

/// Receive beamforming row vector for the user set `q_set` of a stage:
/// orthogonal (under the plain product v*h) to every other stage member's
/// channel.
#[derive(Debug, Clone)]
pub struct ReceiveBeamformer {
    pub q_set: UserSet,
    pub stage_index: u32,
    v: DVector<Complex64>,
}

impl ReceiveBeamformer {
    /// The scalar v * h for an arbitrary vector.
    pub fn apply(&self, h: &DVector<Complex64>) -> Complex64 {
        self.v.iter().zip(h.iter()).map(|(v, h)| v * h).sum()
    }

    /// Entry i of the row vector.
    pub fn entry(&self, i: usize) -> Complex64 {
        self.v[i]
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Transmit precoder column vector for `q_set`: orthogonal (under h^H w) to
/// every other stage member's channel.
#[derive(Debug, Clone)]
pub struct Precoder {
    pub q_set: UserSet,
    pub stage_index: u32,
    w: DVector<Complex64>,
}

impl Precoder {
    /// The scalar h^H * w for an arbitrary vector.
    pub fn apply(&self, h: &DVector<Complex64>) -> Complex64 {
        h.dotc(&self.w)
    }

    pub fn entry(&self, i: usize) -> Complex64 {
        self.w[i]
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Receive beamformer v with v h_j = 0 for stage members j outside `q_set`
/// and |v h_j| bounded away from zero inside it.
pub fn zf_receive_vector(
    q_set: &UserSet,
    stage: &StagePlan,
    channels: &ChannelState,
) -> Result<ReceiveBeamformer> {
    check_beamformer_pre(q_set, stage)?;
    // v h_j = 0 means v is Hermitian-orthogonal to conj(h_j)
    let nulled: Vec<DVector<Complex64>> = stage
        .users
        .iter()
        .filter(|j| !q_set.contains(*j))
        .map(|j| channels.h(j).conjugate())
        .collect();
    let v = orthonormal_complement(&nulled, channels.h(q_set.min_member()).len())?;
    let bf = ReceiveBeamformer {
        q_set: q_set.clone(),
        stage_index: stage.index,
        v,
    };
    for j in q_set.iter() {
        let g = bf.apply(channels.h(j));
        if g.norm() <= EPS_SIG {
            return Err(Error::ChannelDegeneracy(format!(
                "receive vector for {q_set} has vanishing gain {:e} toward user {j}",
                g.norm()
            )));
        }
    }
    Ok(bf)
}

/// Precoder w with h_j^H w = 0 for stage members j outside `q_set`.
pub fn zf_precoder(
    q_set: &UserSet,
    stage: &StagePlan,
    channels: &ChannelState,
) -> Result<Precoder> {
    check_beamformer_pre(q_set, stage)?;
    // h_j^H w = 0 means w is Hermitian-orthogonal to h_j itself
    let nulled: Vec<DVector<Complex64>> = stage
        .users
        .iter()
        .filter(|j| !q_set.contains(*j))
        .map(|j| channels.h(j).clone())
        .collect();
    let w = orthonormal_complement(&nulled, channels.h(q_set.min_member()).len())?;
    let pc = Precoder {
        q_set: q_set.clone(),
        stage_index: stage.index,
        w,
    };
    for j in q_set.iter() {
        let g = pc.apply(channels.h(j));
        if g.norm() <= EPS_SIG {
            return Err(Error::ChannelDegeneracy(format!(
                "precoder for {q_set} has vanishing gain {:e} toward user {j}",
                g.norm()
            )));
        }
    }
    Ok(pc)
}

fn check_beamformer_pre(q_set: &UserSet, stage: &StagePlan) -> Result<()> {
    if !q_set.is_subset_of(&stage.users) {
        return Err(Error::Domain(format!(
            "{q_set} is not contained in stage users {}",
            stage.users
        )));
    }
    Ok(())
}

/// Unit vector Hermitian-orthogonal to all of `nulled` (each of length
/// `dim`), with canonical phase. Requires the orthogonal complement to be
/// exactly one-dimensional, i.e. `nulled` must have full rank dim-1 (or be
/// empty with dim = 1).
fn orthonormal_complement(nulled: &[DVector<Complex64>], dim: usize) -> Result<DVector<Complex64>> {
    if nulled.len() + 1 != dim {
        return Err(Error::ChannelDegeneracy(format!(
            "expected {} nulling constraints in dimension {dim}, got {}",
            dim - 1,
            nulled.len()
        )));
    }
    if nulled.is_empty() {
        return Ok(DVector::from_element(1, Complex64::ONE));
    }

    // rank-revealing orthogonal decomposition of the stacked nulled matrix
    let a = DMatrix::from_columns(nulled);
    let qr = a.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols()))
        .map(|i| r[(i, i)].norm())
        .collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    if dmax <= 0.0 || diag.iter().any(|&d| d < EPS_RANK * dmax) {
        return Err(Error::ChannelDegeneracy(
            "nulled channels are rank deficient; null space is not one-dimensional".into(),
        ));
    }

    // project each standard basis vector out of range(Q); the largest
    // residual spans the complement
    let mut best: Option<DVector<Complex64>> = None;
    let mut best_norm = 0.0;
    for i in 0..dim {
        let mut e = DVector::from_element(dim, Complex64::ZERO);
        e[i] = Complex64::ONE;
        let mut resid = e.clone();
        let proj = &q * (q.adjoint() * &e);
        resid -= proj;
        let n = resid.norm();
        if n > best_norm {
            best_norm = n;
            best = Some(resid);
        }
    }
    let mut v = best.expect("dim >= 1");
    // re-orthogonalize once for numerical hygiene, then normalize
    let proj = &q * (q.adjoint() * &v);
    v -= proj;
    let n = v.norm();
    if n < EPS_SIG {
        return Err(Error::ChannelDegeneracy(
            "orthogonal complement collapsed numerically".into(),
        ));
    }
    v /= Complex64::new(n, 0.0);
    Ok(canonical_phase(v))
}

/// Rotates a unit vector so its first entry above the pruning floor is
/// positive real. Idempotent.
fn canonical_phase(mut v: DVector<Complex64>) -> DVector<Complex64> {
    if let Some(first) = v.iter().find(|x| x.norm() > 1e-12).copied() {
        let rot = first.conj() / first.norm();
        v *= rot;
    }
    v
}

/// One draw of circularly-symmetric complex Gaussian noise CN(0, variance).
fn sample_cn<R: Rng>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// i.i.d. CN(0, variance) samples; variance 0 returns exact zeros.
pub fn sample_noise<R: Rng>(len: usize, variance: f64, rng: &mut R) -> Vec<Complex64> {
    if variance == 0.0 {
        return vec![Complex64::ZERO; len];
    }
    (0..len).map(|_| sample_cn(rng, variance)).collect()
}

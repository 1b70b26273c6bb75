//! Closed-form normalized-delivery-time evaluation for the proposed scheme
//! and the two reference strategies, plus the cache-ratio sweep table.
//!
//! All delivery times are exact rationals; decimals appear only at the CSV
//! boundary. The sweep follows the usual continuous-curve convention of
//! evaluating the formulas at real t = gamma*K even where t is not an
//! integer; such rows are flagged.

use num_rational::Ratio;
use num_traits::Zero;

use crate::error::{Error, Result};

pub type Rational = Ratio<i64>;

/// Which transmission strategy a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Strategy {
    /// Uplink rides both the multicast and the spatial multiplexing gain.
    Proposed,
    /// Uplink uses spatial multiplexing only (L users per slot, decoded
    /// separately).
    A,
    /// Uplink uses the multicast gain only (t+1 users per slot, added over
    /// the air).
    B,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Proposed => write!(f, "proposed"),
            Strategy::A => write!(f, "A"),
            Strategy::B => write!(f, "B"),
        }
    }
}

/// Normalized delivery times of one strategy at one operating point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NdtReport {
    pub strategy: Strategy,
    pub k: u32,
    pub l: u32,
    /// Caching parameter; rational so sweep rows with non-integer t = gamma*K
    /// stay exact.
    pub t: Rational,
    pub t_ul: Rational,
    pub t_dl: Rational,
}

fn check_point(k: u32, t: Rational, l: u32) -> Result<()> {
    if l < 1 {
        return Err(Error::InvalidParams("L >= 1 violated".into()));
    }
    if t < Rational::zero() || t > Rational::from_integer(k as i64) {
        return Err(Error::InvalidParams(format!("t = {t} outside [0, K]")));
    }
    Ok(())
}

fn report(strategy: Strategy, k: u32, t: Rational, l: u32, t_ul: Rational) -> NdtReport {
    // every strategy shares the downlink time (K-t)/(t+L)
    let kk = Rational::from_integer(k as i64);
    let ll = Rational::from_integer(l as i64);
    NdtReport {
        strategy,
        k,
        l,
        t,
        t_ul,
        t_dl: (kk - t) / (t + ll),
    }
}

/// Proposed scheme at real-valued t: both steps take (K-t)/(t+L).
pub fn ndt_proposed_at(k: u32, t: Rational, l: u32) -> Result<NdtReport> {
    check_point(k, t, l)?;
    let kk = Rational::from_integer(k as i64);
    let ll = Rational::from_integer(l as i64);
    let t_ul = (kk - t) / (t + ll);
    Ok(report(Strategy::Proposed, k, t, l, t_ul))
}

/// Reference strategy A at real-valued t: uplink (K-t)/L.
pub fn ndt_strategy_a_at(k: u32, t: Rational, l: u32) -> Result<NdtReport> {
    check_point(k, t, l)?;
    let kk = Rational::from_integer(k as i64);
    let ll = Rational::from_integer(l as i64);
    let t_ul = (kk - t) / ll;
    Ok(report(Strategy::A, k, t, l, t_ul))
}

/// Reference strategy B at real-valued t: uplink (K-t)/(t+1).
pub fn ndt_strategy_b_at(k: u32, t: Rational, l: u32) -> Result<NdtReport> {
    check_point(k, t, l)?;
    let kk = Rational::from_integer(k as i64);
    let one = Rational::from_integer(1);
    let t_ul = (kk - t) / (t + one);
    Ok(report(Strategy::B, k, t, l, t_ul))
}

/// Proposed scheme at integer t.
pub fn ndt_proposed(k: u32, t: u32, l: u32) -> Result<NdtReport> {
    ndt_proposed_at(k, Rational::from_integer(t as i64), l)
}

/// Strategy A at integer t.
pub fn ndt_strategy_a(k: u32, t: u32, l: u32) -> Result<NdtReport> {
    ndt_strategy_a_at(k, Rational::from_integer(t as i64), l)
}

/// Strategy B at integer t.
pub fn ndt_strategy_b(k: u32, t: u32, l: u32) -> Result<NdtReport> {
    ndt_strategy_b_at(k, Rational::from_integer(t as i64), l)
}

/// One sweep row: all three strategies at one cache ratio.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub gamma: Rational,
    /// t = gamma * K, possibly non-integer.
    pub t: Rational,
    /// True when t is an integer, i.e. the scheme is realizable as-is.
    pub integer_t: bool,
    pub a: NdtReport,
    pub b: NdtReport,
    pub proposed: NdtReport,
}

/// Evaluates all three strategies on a cache-ratio grid.
pub fn sweep_gamma(k: u32, l: u32, gamma_grid: &[Rational]) -> Result<Vec<SweepRow>> {
    gamma_grid
        .iter()
        .map(|&gamma| {
            let t = gamma * Rational::from_integer(k as i64);
            Ok(SweepRow {
                gamma,
                t,
                integer_t: t.is_integer(),
                a: ndt_strategy_a_at(k, t, l)?,
                b: ndt_strategy_b_at(k, t, l)?,
                proposed: ndt_proposed_at(k, t, l)?,
            })
        })
        .collect()
}

/// The default sweep grid: gamma = 0.00, 0.01, ..., 1.00.
pub fn default_gamma_grid() -> Vec<Rational> {
    (0..=100).map(|i| Rational::new(i, 100)).collect()
}

/// Formats a rational with fixed 6-decimal precision for the CSV boundary.
pub fn format_rational(r: Rational) -> String {
    format!("{:.6}", *r.numer() as f64 / *r.denom() as f64)
}

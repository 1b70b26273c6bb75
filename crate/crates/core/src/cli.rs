//! Configuration, experiment orchestration, seeding, and result persistence.
//!
//! A run executes placement, channel generation, the uplink stages, the
//! downlink stages, per-user decoding and reassembly, then writes a JSON
//! detail file (plus a bit-error CSV in noisy mode). The cache-ratio sweep
//! writes a CSV with one row per (gamma, strategy). Identical configuration
//! and seed give byte-identical output files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use rand::RngCore;
use serde::Serialize;

use crate::channel::ChannelState;
use crate::coding::{Constellation, Signal};
use crate::combinatorics::{enumerate_stages, StagePlan, SystemParams, UserSet};
use crate::downlink::{
    bs_dl_transmit, cancel_cached_interference, demap, equalize, reassemble_file, stage_precoders,
    CoefficientCodebook, Provenance,
};
use crate::error::{Error, Result};
use crate::ndt::{default_gamma_grid, format_rational, ndt_proposed, sweep_gamma, Rational};
use crate::placement::{build_cache, CacheContents, FileLibrary, SubpacketId};
use crate::seeding::{derive_rng, Domain};
use crate::uplink::{
    bs_receive, build_ul_transmission, extract_all_codewords, stage_receive_beamformers,
    user_stage_energy_ratio, Codeword,
};
use crate::SimMode;

/// Relative tolerance for the structural recovery check in symbolic mode.
const SYMBOLIC_UNIT_TOL: f64 = 1e-9;

/// (bit errors, bits total) keyed by (SNR point index, user).
type ErrorCounts = BTreeMap<(usize, u32), (u64, u64)>;

/// Relay-to-user transmit power ratio applied when mapping an SNR grid point
/// to link powers: the relay budget sits 20 dB above the single-user uplink
/// reference, mirroring macro-cell link budgets (grid-powered multi-antenna
/// relay vs. battery-powered single-antenna users).
pub const DL_TO_UL_POWER_RATIO: f64 = 100.0;

/// A fully validated experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub params: SystemParams,
    pub mode: SimMode,
    pub constellation: Constellation,
    pub snr_grid_db: Vec<f64>,
    pub trials: u32,
    pub seed: u64,
    pub output_path: Option<PathBuf>,
    pub workers: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.params.bits_per_symbol != self.constellation.bits_per_symbol() {
            return Err(Error::Config(
                "bits-per-symbol does not match the modulation".into(),
            ));
        }
        if self.trials < 1 {
            return Err(Error::Config("trials >= 1 violated".into()));
        }
        if self.mode == SimMode::Noisy && self.snr_grid_db.is_empty() {
            return Err(Error::Config(
                "noisy mode requires a nonempty --snr-db grid".into(),
            ));
        }
        if self.workers < 1 {
            return Err(Error::Config("workers >= 1 violated".into()));
        }
        Ok(())
    }
}

/// Command-line flags. A config file may replace the per-run flags.
#[derive(Debug, Parser)]
#[command(
    name = "mir-sim",
    about = "Link-level simulator for a two-step coded data-exchange scheme \
             over a multi-antenna relay"
)]
pub struct CliArgs {
    /// Number of users (and files)
    #[arg(long = "K")]
    pub k: Option<u32>,
    /// Number of relay antennas
    #[arg(long = "L")]
    pub l: Option<u32>,
    /// Caching parameter t = gamma*K
    #[arg(long = "t")]
    pub t: Option<u32>,
    /// Subpacket size in bits
    #[arg(long = "f")]
    pub f_bits: Option<u32>,
    /// symbolic | noiseless | noisy
    #[arg(long)]
    pub mode: Option<String>,
    /// qpsk | qam16
    #[arg(long)]
    pub modulation: Option<String>,
    /// Comma-separated SNR grid in dB (noisy mode)
    #[arg(long = "snr-db", value_delimiter = ',')]
    pub snr_db: Vec<f64>,
    /// Monte-Carlo trials per SNR point
    #[arg(long)]
    pub trials: Option<u32>,
    /// Master seed; labeled per-component streams derive from it
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path (JSON for runs, CSV for the sweep)
    #[arg(long = "out")]
    pub out: Option<PathBuf>,
    /// Worker threads for Monte-Carlo trials
    #[arg(long)]
    pub workers: Option<usize>,
    /// Emit the delivery-time sweep over gamma instead of running the link
    #[arg(long = "gamma-sweep", default_value_t = false)]
    pub gamma_sweep: bool,
    /// Flat key-value config file; replaces the per-run flags above
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// What the binary should do.
#[derive(Debug)]
pub enum Command {
    Run(SimConfig),
    Sweep {
        k: u32,
        l: u32,
        out: Option<PathBuf>,
    },
}

/// Validates flags (or the config file) into a runnable command.
pub fn parse_config(args: &CliArgs) -> Result<Command> {
    if args.gamma_sweep {
        return Ok(Command::Sweep {
            k: args.k.unwrap_or(5),
            l: args.l.unwrap_or(3),
            out: args.out.clone(),
        });
    }

    if let Some(path) = &args.config {
        if args.k.is_some() || args.l.is_some() || args.t.is_some() {
            return Err(Error::Config(
                "--config replaces the per-run flags; drop --K/--L/--t".into(),
            ));
        }
        return Ok(Command::Run(read_config_file(path)?));
    }

    // absent size flags fall back to the desk-scale default system
    let k = args.k.unwrap_or(5);
    let l = args.l.unwrap_or(3);
    let t = args.t.unwrap_or(2);
    let constellation: Constellation = args.modulation.as_deref().unwrap_or("qpsk").parse()?;
    let mode: SimMode = args.mode.as_deref().unwrap_or("noiseless").parse()?;
    let params = SystemParams::new(
        k,
        l,
        t,
        args.f_bits.unwrap_or(8),
        constellation.bits_per_symbol(),
    )?;
    let config = SimConfig {
        params,
        mode,
        constellation,
        snr_grid_db: args.snr_db.clone(),
        trials: args.trials.unwrap_or(1),
        seed: args.seed.unwrap_or(0),
        output_path: args.out.clone(),
        workers: args.workers.unwrap_or(1),
    };
    config.validate()?;
    Ok(Command::Run(config))
}

/// Reads a flat key-value config file (`key value` per line, `#` comments).
pub fn read_config_file(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key value'", lineno + 1)))?;
        kv.insert(key, value.trim());
    }
    let get = |key: &str| {
        kv.get(key)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing key '{key}'")))
    };
    let parse_num = |key: &str| -> Result<u64> {
        get(key)?
            .parse()
            .map_err(|e| Error::Config(format!("key '{key}': {e}")))
    };

    let constellation: Constellation = kv.get("modulation").copied().unwrap_or("qpsk").parse()?;
    let mode: SimMode = get("mode")?.parse()?;
    let params = SystemParams::new(
        parse_num("K")? as u32,
        parse_num("L")? as u32,
        parse_num("t")? as u32,
        parse_num("f")? as u32,
        constellation.bits_per_symbol(),
    )?;
    let snr_grid_db = match kv.get("snr_db") {
        Some(s) if !s.is_empty() => s
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("key 'snr_db': {e}")))
            })
            .collect::<Result<Vec<f64>>>()?,
        _ => Vec::new(),
    };
    let config = SimConfig {
        params,
        mode,
        constellation,
        snr_grid_db,
        trials: kv.get("trials").map_or(Ok(1), |s| {
            s.parse().map_err(|e| Error::Config(format!("trials: {e}")))
        })?,
        seed: kv.get("seed").map_or(Ok(0), |s| {
            s.parse().map_err(|e| Error::Config(format!("seed: {e}")))
        })?,
        output_path: kv.get("out").map(PathBuf::from),
        workers: kv.get("workers").map_or(Ok(1), |s| {
            s.parse()
                .map_err(|e| Error::Config(format!("workers: {e}")))
        })?,
    };
    config.validate()?;
    Ok(config)
}

/// Writes a config in the flat key-value format readable by
/// [`read_config_file`].
pub fn write_config_file(config: &SimConfig, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("K {}\n", config.params.k));
    out.push_str(&format!("L {}\n", config.params.l));
    out.push_str(&format!("t {}\n", config.params.t));
    out.push_str(&format!("f {}\n", config.params.f_bits));
    out.push_str(&format!("mode {}\n", config.mode));
    out.push_str(&format!("modulation {}\n", config.constellation));
    if !config.snr_grid_db.is_empty() {
        let grid: Vec<String> = config.snr_grid_db.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!("snr_db {}\n", grid.join(",")));
    }
    out.push_str(&format!("trials {}\n", config.trials));
    out.push_str(&format!("seed {}\n", config.seed));
    out.push_str(&format!("workers {}\n", config.workers));
    if let Some(p) = &config.output_path {
        out.push_str(&format!("out {}\n", p.display()));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Everything one stage produced, kept for verification and decoding.
pub struct StageArtifacts {
    pub stage: StagePlan,
    pub codewords: Vec<Codeword>,
    pub gains: Vec<f64>,
    /// Per user: the solved pre-equalization scalars, one per own set.
    pub solved: BTreeMap<u32, BTreeMap<UserSet, Signal>>,
    /// Per user: the equalized signals.
    pub equalized: BTreeMap<u32, BTreeMap<UserSet, Signal>>,
}

/// Output of one full link pass over all stages.
pub struct PassOutput {
    pub channels: ChannelState,
    pub stages: Vec<StageArtifacts>,
    /// Per user (index 0 is user 1): sample energy spent across the uplink,
    /// in units of the reference power.
    pub measured_energy: Vec<f64>,
    /// Per user: every decoded subpacket's bits.
    pub decoded: BTreeMap<u32, BTreeMap<SubpacketId, Vec<u8>>>,
}

/// Runs placement-to-decoding once for every stage.
///
/// `master` seeds channels, noise, and codebooks; the library is shared
/// across passes. In symbolic mode decoding verifies each equalized signal
/// is exactly the desired unit-coefficient subpacket and then takes its bits
/// from the library.
#[allow(clippy::too_many_arguments)]
pub fn run_link_pass(
    params: &SystemParams,
    library: &FileLibrary,
    caches: &[CacheContents],
    stages: &[StagePlan],
    master: u64,
    noise_variance: f64,
    constellation: Constellation,
    mode: SimMode,
) -> Result<PassOutput> {
    let channels = ChannelState::generate(params, master)?;
    let n_t = params.n_transmissions() as usize;
    let mut measured_energy = vec![0.0; params.k as usize];
    let mut decoded: BTreeMap<u32, BTreeMap<SubpacketId, Vec<u8>>> = BTreeMap::new();
    let mut artifacts = Vec::with_capacity(stages.len());

    for stage in stages {
        // uplink
        let mut receptions = Vec::with_capacity(n_t);
        for s in &stage.transmissions {
            let tx = build_ul_transmission(s, stage, caches, library, params, constellation, mode)?;
            for (&k, x) in &tx.per_user_signal {
                measured_energy[k as usize - 1] += x.mean_energy();
            }
            receptions.push(bs_receive(
                &tx,
                &channels,
                noise_variance,
                master,
                params,
                mode,
            ));
        }
        let beamformers = stage_receive_beamformers(stage, &channels, params)?;
        let codewords =
            extract_all_codewords(stage, &receptions, &beamformers, &channels, params, mode)?;
        let precoders = stage_precoders(stage, &channels, params)?;

        // downlink
        let codebook = CoefficientCodebook::generate(stage, params, master)?;
        let mut broadcasts = Vec::with_capacity(n_t);
        let mut gains = Vec::with_capacity(n_t);
        for j in 0..n_t {
            let (x, g) = bs_dl_transmit(j, &codewords, &codebook, &precoders, params, mode)?;
            broadcasts.push(x);
            gains.push(g);
        }

        let mut solved_all = BTreeMap::new();
        let mut equalized_all = BTreeMap::new();
        for k in stage.users.iter() {
            let cache = &caches[k as usize - 1];
            let cleaned: Vec<Signal> = (0..n_t)
                .map(|j| {
                    let obs = crate::downlink::user_receive(
                        k,
                        j,
                        &broadcasts[j],
                        &channels,
                        stage,
                        noise_variance,
                        master,
                        params,
                        mode,
                    );
                    cancel_cached_interference(
                        &obs,
                        &codewords,
                        &codebook,
                        &gains,
                        &precoders,
                        &channels,
                        stage,
                        cache,
                        library,
                        params,
                        constellation,
                        mode,
                    )
                })
                .collect::<Result<_>>()?;
            let solved =
                crate::downlink::solve_user_system(k, &cleaned, &codebook, &gains, params)?;
            let equalized = equalize(k, &solved, &codewords, &precoders, &channels, stage, params)?;

            let user_decoded = decoded.entry(k).or_default();
            if mode == SimMode::Symbolic {
                for (q_set, signal) in &equalized {
                    let f = signal.as_formal();
                    let desired = SubpacketId::new(k, q_set.without(k), stage.q_of(q_set)?);
                    let coeff = f.coeff(&desired);
                    if f.support() != vec![&desired]
                        || (coeff - num_complex::Complex64::ONE).norm() > SYMBOLIC_UNIT_TOL
                    {
                        return Err(Error::StageIncomplete {
                            stage: stage.index,
                            detail: format!(
                                "symbolic recovery check failed for user {k}, set {q_set}"
                            ),
                        });
                    }
                    user_decoded.insert(
                        desired.clone(),
                        library.bits(&desired).expect("library id").to_vec(),
                    );
                }
            } else {
                for (sub, bits) in demap(k, &equalized, &codewords, constellation)? {
                    user_decoded.insert(sub, bits);
                }
            }
            solved_all.insert(k, solved);
            equalized_all.insert(k, equalized);
        }

        artifacts.push(StageArtifacts {
            stage: stage.clone(),
            codewords,
            gains,
            solved: solved_all,
            equalized: equalized_all,
        });
    }

    Ok(PassOutput {
        channels,
        stages: artifacts,
        measured_energy,
        decoded,
    })
}

/// Per-user recovery summary of a symbolic or noiseless run.
#[derive(Debug, Clone, Serialize)]
pub struct UserRecovery {
    pub user: u32,
    pub bit_exact: bool,
    pub decoded_subpackets: u64,
    pub cached_subpackets: u64,
}

/// One bit-error measurement point.
#[derive(Debug, Clone, Serialize)]
pub struct BerPoint {
    pub snr_db: f64,
    pub user: u32,
    pub bit_errors: u64,
    pub bits_total: u64,
}

/// Per-user uplink energy accounting, in units of the reference power.
#[derive(Debug, Clone, Serialize)]
pub struct UserEnergy {
    pub user: u32,
    /// The analytic value N_T * C(K-1, t+L-1).
    pub expected: f64,
    /// Sample energy of the actually built signals (equals `expected`
    /// exactly in symbolic mode).
    pub measured: f64,
}

/// Delivery-time summary attached to every run.
#[derive(Debug, Clone, Serialize)]
pub struct NdtSummary {
    pub t_ul: String,
    pub t_dl: String,
    pub t_ul_decimal: f64,
    pub t_dl_decimal: f64,
}

/// Configuration echo embedded in the result file.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub k: u32,
    pub l: u32,
    pub t: u32,
    pub f_bits: u32,
    pub mode: SimMode,
    pub modulation: Constellation,
    pub snr_grid_db: Vec<f64>,
    pub trials: u32,
    pub seed: u64,
    pub workers: usize,
}

/// Everything a run produces. The wall clock is reported on stdout but kept
/// out of the serialized result so identical (config, seed) runs emit
/// byte-identical files.
#[derive(Debug, Serialize)]
pub struct SimResult {
    pub config: ConfigEcho,
    pub users: Vec<UserRecovery>,
    pub ber: Vec<BerPoint>,
    pub ul_energy: Vec<UserEnergy>,
    pub ndt: NdtSummary,
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

/// The analytic uplink energy of one user across the whole step, in units
/// of the reference power: N_T * C(K-1, t+L-1).
pub fn expected_user_energy(user: u32, stages: &[StagePlan], params: &SystemParams) -> Rational {
    stages
        .iter()
        .filter(|st| st.users.contains(user))
        .map(|st| {
            let r = user_stage_energy_ratio(user, st, params);
            Rational::new(*r.numer() as i64, *r.denom() as i64)
        })
        .sum()
}

fn rational_to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// A sub-seed for one Monte-Carlo trial, derived from the master seed and
/// the (SNR point, trial) coordinates.
fn trial_seed(master: u64, snr_idx: usize, trial: u32) -> u64 {
    derive_rng(master, Domain::Channels, snr_idx as u64, trial as u64).next_u64()
}

/// Executes the configured experiment: placement, channels, both steps,
/// decoding, reassembly, and accounting. Deterministic given (config, seed).
pub fn run_experiment(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let start = Instant::now();
    let params = &config.params;
    let library = FileLibrary::generate(params, config.seed);
    let caches: Vec<CacheContents> = (1..=params.k).map(|u| build_cache(&library, u)).collect();
    let stages = enumerate_stages(params);

    // analytic energy accounting holds in every mode
    let equal_energy_total = Rational::from_integer(
        (params.n_transmissions()
            * crate::combinatorics::binomial(
                (params.k - 1) as u64,
                (params.t + params.l - 1) as u64,
            )) as i64,
    );
    let mut ul_energy = Vec::with_capacity(params.k as usize);
    for user in 1..=params.k {
        let expected = expected_user_energy(user, &stages, params);
        if expected != equal_energy_total {
            return Err(Error::InvalidParams(format!(
                "energy accounting for user {user} is {expected}, expected {equal_energy_total}"
            )));
        }
        ul_energy.push(UserEnergy {
            user,
            expected: rational_to_f64(expected),
            measured: 0.0,
        });
    }

    let mut users = Vec::new();
    let mut ber = Vec::new();

    match config.mode {
        SimMode::Symbolic | SimMode::Noiseless => {
            let pass = run_link_pass(
                params,
                &library,
                &caches,
                &stages,
                config.seed,
                0.0,
                config.constellation,
                config.mode,
            )?;
            for (user, energy) in ul_energy.iter_mut().enumerate() {
                energy.measured = pass.measured_energy[user];
            }
            if config.mode == SimMode::Symbolic {
                for e in &ul_energy {
                    if (e.measured - e.expected).abs() > 1e-9 {
                        return Err(Error::InvalidParams(format!(
                            "symbolic energy of user {} is {} instead of {}",
                            e.user, e.measured, e.expected
                        )));
                    }
                }
            }
            for user in 1..=params.k {
                let empty = BTreeMap::new();
                let user_decoded = pass.decoded.get(&user).unwrap_or(&empty);
                let file = reassemble_file(
                    user,
                    &caches[user as usize - 1],
                    &library,
                    user_decoded,
                    params,
                )?;
                users.push(UserRecovery {
                    user,
                    bit_exact: file.bits == library.file_bits(user),
                    decoded_subpackets: file.count(Provenance::Decoded) as u64,
                    cached_subpackets: file.count(Provenance::Cached) as u64,
                });
            }
        }
        SimMode::Noisy => {
            // sample energy is independent of channels and noise; measure it
            // once from the built signals
            let probe = run_link_pass(
                params,
                &library,
                &caches,
                &stages,
                config.seed,
                0.0,
                config.constellation,
                SimMode::Noiseless,
            )?;
            for (user, energy) in ul_energy.iter_mut().enumerate() {
                energy.measured = probe.measured_energy[user];
            }

            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            let grid: Vec<(usize, f64)> = config.snr_grid_db.iter().copied().enumerate().collect();
            let mut counts: ErrorCounts = BTreeMap::new();
            let results: Vec<Result<ErrorCounts>> = pool.install(|| {
                use rayon::prelude::*;
                grid.par_iter()
                    .flat_map(|&(snr_idx, snr_db)| {
                        (0..config.trials)
                            .into_par_iter()
                            .map(move |trial| (snr_idx, snr_db, trial))
                    })
                    .map(|(snr_idx, snr_db, trial)| {
                        let mut point_params = params.clone();
                        let power = 10f64.powf(snr_db / 10.0);
                        point_params.p_ul = power;
                        point_params.p_bs = power * DL_TO_UL_POWER_RATIO;
                        let pass = run_link_pass(
                            &point_params,
                            &library,
                            &caches,
                            &stages,
                            trial_seed(config.seed, snr_idx, trial),
                            1.0,
                            config.constellation,
                            SimMode::Noisy,
                        )?;
                        let mut local: ErrorCounts = BTreeMap::new();
                        for user in 1..=params.k {
                            let entry = local.entry((snr_idx, user)).or_insert((0, 0));
                            if let Some(decoded) = pass.decoded.get(&user) {
                                for (sub, bits) in decoded {
                                    let truth = library.bits(sub).expect("library id");
                                    entry.0 +=
                                        bits.iter()
                                            .zip(truth.iter())
                                            .filter(|(a, b)| a != b)
                                            .count() as u64;
                                    entry.1 += truth.len() as u64;
                                }
                            }
                        }
                        Ok(local)
                    })
                    .collect()
            });
            for r in results {
                for (key, (errs, total)) in r? {
                    let entry = counts.entry(key).or_insert((0, 0));
                    entry.0 += errs;
                    entry.1 += total;
                }
            }
            for ((snr_idx, user), (bit_errors, bits_total)) in counts {
                ber.push(BerPoint {
                    snr_db: config.snr_grid_db[snr_idx],
                    user,
                    bit_errors,
                    bits_total,
                });
            }
        }
    }

    let ndt = ndt_proposed(params.k, params.t, params.l)?;
    Ok(SimResult {
        config: ConfigEcho {
            k: params.k,
            l: params.l,
            t: params.t,
            f_bits: params.f_bits,
            mode: config.mode,
            modulation: config.constellation,
            snr_grid_db: config.snr_grid_db.clone(),
            trials: config.trials,
            seed: config.seed,
            workers: config.workers,
        },
        users,
        ber,
        ul_energy,
        ndt: NdtSummary {
            t_ul: ndt.t_ul.to_string(),
            t_dl: ndt.t_dl.to_string(),
            t_ul_decimal: rational_to_f64(ndt.t_ul),
            t_dl_decimal: rational_to_f64(ndt.t_dl),
        },
        wall_clock_ms: start.elapsed().as_millis(),
    })
}

/// Serializes the bit-error points as CSV.
pub fn ber_csv(ber: &[BerPoint]) -> String {
    let mut out = String::from("snr_db,user,bit_errors,bits_total\n");
    for p in ber {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.snr_db, p.user, p.bit_errors, p.bits_total
        ));
    }
    out
}

/// Serializes the gamma sweep as CSV; also returns how many rows have a
/// non-integer caching parameter (evaluated on the continuous curve).
pub fn gamma_sweep_csv(k: u32, l: u32, grid: &[Rational]) -> Result<(String, usize)> {
    let rows = sweep_gamma(k, l, grid)?;
    let mut out = String::from("gamma,t,strategy,T_ul,T_dl\n");
    let mut fractional = 0usize;
    for row in &rows {
        if !row.integer_t {
            fractional += 1;
        }
        for report in [&row.a, &row.b, &row.proposed] {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                format_rational(row.gamma),
                format_rational(row.t),
                report.strategy,
                format_rational(report.t_ul),
                format_rational(report.t_dl),
            ));
        }
    }
    Ok((out, fractional))
}

/// Writes the per-run JSON (and the bit-error CSV when present); returns the
/// written paths.
pub fn emit_results(result: &SimResult, path: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let json = serde_json::to_string_pretty(result)
        .map_err(|e| Error::Config(format!("serialization: {e}")))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(json.as_bytes())?;
    file.write_all(b"\n")?;
    written.push(path.to_path_buf());

    if !result.ber.is_empty() {
        let csv_path = path.with_extension("ber.csv");
        std::fs::write(&csv_path, ber_csv(&result.ber))?;
        written.push(csv_path);
    }
    Ok(written)
}

/// Runs the gamma sweep on the default grid and writes its CSV.
pub fn run_gamma_sweep(k: u32, l: u32, out: Option<&Path>) -> Result<String> {
    let (csv, fractional) = gamma_sweep_csv(k, l, &default_gamma_grid())?;
    if fractional > 0 {
        eprintln!(
            "note: {fractional} grid points have non-integer t = gamma*K; \
             their rows evaluate the closed forms on the continuous curve"
        );
    }
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_valid_run() {
        let args = CliArgs::parse_from(["mir-sim", "--K", "5", "--L", "3", "--t", "2"]);
        match parse_config(&args).unwrap() {
            Command::Run(cfg) => {
                assert_eq!(cfg.params.k, 5);
                assert_eq!(cfg.params.l, 3);
                assert_eq!(cfg.params.t, 2);
                assert_eq!(cfg.mode, SimMode::Noiseless);
                assert_eq!(cfg.constellation, Constellation::Qpsk);
            }
            other => panic!("expected run, got {other:?}"),
        }
    }

    #[test]
    fn bare_invocation_uses_desk_scale_defaults() {
        let args = CliArgs::parse_from(["mir-sim"]);
        match parse_config(&args).unwrap() {
            Command::Run(cfg) => {
                assert_eq!((cfg.params.k, cfg.params.l, cfg.params.t), (5, 3, 2));
                assert_eq!(cfg.params.f_bits, 8);
                assert_eq!(cfg.constellation, Constellation::Qpsk);
            }
            other => panic!("expected run, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_small_k() {
        let args = CliArgs::parse_from(["mir-sim", "--K", "3", "--L", "3", "--t", "1"]);
        let err = parse_config(&args).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("K >= t+L"), "message was: {msg}");
    }

    #[test]
    fn parse_noisy_needs_snr_grid() {
        let args = CliArgs::parse_from([
            "mir-sim", "--K", "3", "--L", "2", "--t", "1", "--mode", "noisy",
        ]);
        assert!(parse_config(&args).is_err());
    }

    #[test]
    fn config_file_roundtrip() {
        let dir = std::env::temp_dir().join("mir_sim_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        let config = SimConfig {
            params: SystemParams::new(5, 3, 2, 8, 2).unwrap(),
            mode: SimMode::Noisy,
            constellation: Constellation::Qpsk,
            snr_grid_db: vec![0.0, 10.0, 20.0, 30.0],
            trials: 7,
            seed: 99,
            output_path: Some(PathBuf::from("x.json")),
            workers: 2,
        };
        write_config_file(&config, &path).unwrap();
        let back = read_config_file(&path).unwrap();
        assert_eq!(config, back);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn noiseless_run_recovers_everything() {
        let config = SimConfig {
            params: SystemParams::new(3, 2, 1, 8, 2).unwrap(),
            mode: SimMode::Noiseless,
            constellation: Constellation::Qpsk,
            snr_grid_db: vec![],
            trials: 1,
            seed: 1,
            output_path: None,
            workers: 1,
        };
        let result = run_experiment(&config).unwrap();
        assert_eq!(result.users.len(), 3);
        for u in &result.users {
            assert!(u.bit_exact, "user {}", u.user);
            assert_eq!(u.decoded_subpackets, 2);
            assert_eq!(u.cached_subpackets, 1);
        }
        // analytic value echoed: N_T * C(K-1, t+L-1) = 2 * 1 = 2
        for e in &result.ul_energy {
            assert_eq!(e.expected, 2.0);
        }
        assert_eq!(result.ndt.t_ul, "2/3");
    }

    #[test]
    fn symbolic_run_passes_structural_checks() {
        let config = SimConfig {
            params: SystemParams::new(5, 3, 2, 8, 2).unwrap(),
            mode: SimMode::Symbolic,
            constellation: Constellation::Qpsk,
            snr_grid_db: vec![],
            trials: 1,
            seed: 3,
            output_path: None,
            workers: 1,
        };
        let result = run_experiment(&config).unwrap();
        for u in &result.users {
            assert!(u.bit_exact);
            assert_eq!(u.decoded_subpackets, 6);
            assert_eq!(u.cached_subpackets, 4);
        }
        // symbolic measured energy equals the analytic value exactly
        for e in &result.ul_energy {
            assert_eq!(e.expected, 6.0);
            assert!((e.measured - e.expected).abs() < 1e-9);
        }
    }

    #[test]
    fn emitted_outputs_are_byte_identical_across_runs() {
        let dir = std::env::temp_dir().join("mir_sim_emit_test");
        std::fs::create_dir_all(&dir).unwrap();
        let config = SimConfig {
            params: SystemParams::new(3, 2, 1, 8, 2).unwrap(),
            mode: SimMode::Noisy,
            constellation: Constellation::Qpsk,
            snr_grid_db: vec![10.0, 20.0],
            trials: 3,
            seed: 5,
            output_path: None,
            workers: 2,
        };
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        let pa = dir.join("a.json");
        let pb = dir.join("b.json");
        emit_results(&a, &pa).unwrap();
        emit_results(&b, &pb).unwrap();
        assert_eq!(
            std::fs::read(&pa).unwrap(),
            std::fs::read(&pb).unwrap(),
            "JSON must be byte-identical"
        );
        assert_eq!(
            std::fs::read(pa.with_extension("ber.csv")).unwrap(),
            std::fs::read(pb.with_extension("ber.csv")).unwrap(),
            "CSV must be byte-identical"
        );
        for p in [
            pa.clone(),
            pb.clone(),
            pa.with_extension("ber.csv"),
            pb.with_extension("ber.csv"),
        ] {
            let _ = std::fs::remove_file(p);
        }
    }

    #[test]
    fn sweep_csv_schema() {
        let (csv, fractional) = gamma_sweep_csv(10, 4, &default_gamma_grid()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "gamma,t,strategy,T_ul,T_dl");
        // 101 grid points x 3 strategies
        assert_eq!(csv.lines().count(), 1 + 101 * 3);
        assert!(fractional > 0);
        // the gamma = 0.2 block carries the reference values
        assert!(csv.contains("0.200000,2.000000,A,2.000000,1.333333"));
        assert!(csv.contains("0.200000,2.000000,B,2.666667,1.333333"));
        assert!(csv.contains("0.200000,2.000000,proposed,1.333333,1.333333"));
    }

    #[test]
    fn json_output_schema_roundtrips() {
        let config = SimConfig {
            params: SystemParams::new(3, 2, 1, 8, 2).unwrap(),
            mode: SimMode::Noiseless,
            constellation: Constellation::Qpsk,
            snr_grid_db: vec![],
            trials: 1,
            seed: 1,
            output_path: None,
            workers: 1,
        };
        let result = run_experiment(&config).unwrap();
        let json = serde_json::to_string(&result).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["config"]["k"], 3);
        assert_eq!(value["ndt"]["t_ul"], "2/3");
        assert_eq!(value["users"].as_array().unwrap().len(), 3);
        assert!(value.get("wall_clock_ms").is_none());
    }
}

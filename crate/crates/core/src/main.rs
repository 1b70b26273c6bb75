use clap::Parser;

use mir_sim::cli::{parse_config, run_experiment, run_gamma_sweep, CliArgs, Command};

fn main() {
    let args = CliArgs::parse();
    if let Err(e) = run(&args) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(args: &CliArgs) -> mir_sim::Result<()> {
    match parse_config(args)? {
        Command::Sweep { k, l, out } => {
            let csv = run_gamma_sweep(k, l, out.as_deref())?;
            match &out {
                Some(path) => eprintln!("sweep written to {}", path.display()),
                None => print!("{csv}"),
            }
        }
        Command::Run(config) => {
            let result = run_experiment(&config)?;
            println!(
                "mode={} K={} L={} t={} seed={} elapsed={}ms",
                config.mode,
                config.params.k,
                config.params.l,
                config.params.t,
                config.seed,
                result.wall_clock_ms
            );
            println!(
                "delivery time: uplink {} downlink {}",
                result.ndt.t_ul, result.ndt.t_dl
            );
            for e in &result.ul_energy {
                println!(
                    "user {} uplink energy: {:.6} x P_UL (analytic {:.6})",
                    e.user, e.measured, e.expected
                );
            }
            for u in &result.users {
                println!(
                    "user {}: {} ({} decoded + {} cached subpackets)",
                    u.user,
                    if u.bit_exact { "bit-exact" } else { "MISMATCH" },
                    u.decoded_subpackets,
                    u.cached_subpackets
                );
            }
            for p in &result.ber {
                println!(
                    "snr {} dB user {}: {}/{} bit errors",
                    p.snr_db, p.user, p.bit_errors, p.bits_total
                );
            }
            if let Some(path) = &config.output_path {
                for written in mir_sim::cli::emit_results(&result, path)? {
                    eprintln!("wrote {}", written.display());
                }
            }
        }
    }
    Ok(())
}

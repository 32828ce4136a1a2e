use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ste_bisim::estimator::{dsq_bound, tanh_constants};
use ste_bisim::experiment::{run_experiment, sweep_experiment};
use ste_bisim::io::config::load_config;
use ste_bisim::io::report::emit_report;
use ste_bisim::Error;

#[derive(Parser)]
#[command(
    version,
    about = "Lockstep training of an estimator-based quantized net against its STE twin"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one lockstep experiment and write trace.csv and weights.csv.
    Run {
        config: PathBuf,
        /// Output directory; defaults to `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the experiment over base learning rates and fit the E-vs-eta slope.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        etas: Vec<f64>,
    },
    /// Print the tanh-estimator constant table and the DSQ interval.
    Constants,
    /// Summarize traces and draw alignment and weight plots.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_IO: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged(_) => EXIT_DIVERGED,
        Error::Io { .. }
        | Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::TraceRow { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

/// Bits, steepness `k`, and step `2 / (2^bits - 1)` for the constants table.
const TABLE: [(u32, f64); 4] = [(8, 8.0), (4, 6.0), (3, 4.0), (2, 2.0)];
const DSQ_SHAPES: [f64; 2] = [0.25, 0.11];

fn print_constants() {
    println!(
        "{:>4} {:>4} {:>12} {:>12} {:>12} {:>12} {:>10}",
        "bits", "k", "delta", "L_minus", "L_plus", "L_prime", "ratio"
    );
    for (bits, k) in TABLE {
        let delta = 2.0 / ((1u64 << bits) - 1) as f64;
        let c = tanh_constants(k, delta);
        println!(
            "{bits:>4} {k:>4} {delta:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>10.4}",
            c.l_minus,
            c.l_plus,
            c.l_prime,
            c.convexity_ratio()
        );
    }
    for a in DSQ_SHAPES {
        let bound = dsq_bound(a).expect("shape in (0, 1]");
        println!("dsq a={a} bound={bound:.4}");
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let output = run_experiment(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let path = output.write(&dir)?;
            println!("trace: {}", path.display());
            if let Some(r) = output.trace.rows.last() {
                println!(
                    "steps={} E_norm={:.4e} agreement={:.5} loss_qhat={:.5} loss_ste={:.5}",
                    output.trace.rows.len(),
                    r.e_norm_mean,
                    r.agreement,
                    output.full_loss_qhat,
                    output.full_loss_ste
                );
            }
            if let Some(reason) = output.diverged {
                eprintln!("diverged: {reason}");
                return Ok(EXIT_DIVERGED);
            }
            Ok(0)
        }
        Command::Sweep { config, etas } => {
            let cfg = load_config(&config)?;
            let result = sweep_experiment(&cfg, &etas)?;
            println!(
                "{:>12} {:>14} {:>14} {:>8}",
                "eta", "final_E", "min_agreement", "flagged"
            );
            for p in &result.points {
                println!(
                    "{:>12.3e} {:>14.6e} {:>14.6} {:>8}",
                    p.eta, p.final_e, p.min_agreement, p.flagged
                );
            }
            match result.slope {
                Some(s) => println!("slope {s:.4}"),
                None => println!("slope undefined (a final E is zero)"),
            }
            Ok(0)
        }
        Command::Constants => {
            print_constants();
            Ok(0)
        }
        Command::Report { traces, out } => {
            let report = emit_report(&traces, &out)?;
            print!("{}", report.to_text());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pqs_bfl::bench::{
    emit_crypto_table, emit_scaling_data, parse_config, parse_suite, run_suite, BenchError, Overrides, SuiteOutcome, SuiteSpec,
    DEFAULT_TRIALS,
};
use pqs_bfl::sigsuite::SchemeId;

/// Federated learning with signed updates on a simulated gas-metered ledger.
#[derive(Debug, Parser)]
#[command(name = "pqs-bfl", version)]
struct Cli {
    /// key = value config file (flags override it)
    #[arg(long)]
    config: Option<PathBuf>,
    /// synth or csv:<path>
    #[arg(long)]
    dataset: Option<String>,
    /// PQC, ECDSA or NONE
    #[arg(long)]
    crypto: Option<String>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// on or off
    #[arg(long)]
    blockchain: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suite file with [defaults] and [run] blocks
    #[arg(long, conflicts_with = "config")]
    suite: Option<PathBuf>,
    /// Time keygen/sign/verify per scheme and write crypto.csv
    #[arg(long, conflicts_with_all = ["config", "suite"])]
    crypto_bench: bool,
    /// Trials per scheme for --crypto-bench
    #[arg(long, default_value_t = DEFAULT_TRIALS, requires = "crypto_bench")]
    trials: usize,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset.clone(),
            crypto: self.crypto.clone(),
            clients: self.clients,
            rounds: self.rounds,
            blockchain: self.blockchain.clone(),
            seed: self.seed,
        }
    }
}

fn print_outcome(spec: &SuiteSpec, outcome: &SuiteOutcome) {
    for row in &outcome.rows {
        match row.final_accuracy {
            Some(acc) => println!(
                "{:<24} final_acc={:.4} gas/update={} verified={} rejected={}",
                row.name,
                acc,
                row.mean_gas_per_update.map_or("-".into(), |g| format!("{g:.0}")),
                row.total_verified.unwrap_or(0),
                row.total_rejected.unwrap_or(0),
            ),
            None => println!("{:<24} FAILED: {}", row.name, row.error),
        }
    }
    println!("results in {}", spec.out_dir.display());
}

fn run(cli: &Cli) -> Result<bool, BenchError> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    if cli.crypto_bench {
        std::fs::create_dir_all(&out)?;
        let path = out.join("crypto.csv");
        let rows = emit_crypto_table(&SchemeId::ALL, cli.trials, &path)?;
        println!("{:<6} {:>10} {:>10} {:>10} {:>8} {:>6} {:>6}", "scheme", "keygen_ms", "sign_ms", "verify_ms", "sig_B", "pk_B", "sk_B");
        for r in rows {
            println!(
                "{:<6} {:>10.4} {:>10.4} {:>10.4} {:>8.1} {:>6} {:>6}",
                r.scheme, r.keygen_ms, r.sign_ms, r.verify_ms, r.signature_bytes, r.public_key_bytes, r.private_key_bytes
            );
        }
        println!("wrote {}", path.display());
        return Ok(true);
    }

    let spec = match &cli.suite {
        Some(path) => {
            let origin = path.display().to_string();
            let text = std::fs::read_to_string(path).map_err(|e| BenchError::Parse { origin: origin.clone(), line: None, msg: e.to_string() })?;
            let mut spec = parse_suite(&text, &origin, &cli.overrides())?;
            if let Some(dir) = &cli.out {
                spec.out_dir = dir.clone();
            }
            spec
        }
        None => SuiteSpec::new(vec![parse_config(cli.config.as_deref(), &cli.overrides())?], out)?,
    };
    let outcome = run_suite(&spec)?;
    if spec.formats.csv {
        match emit_scaling_data(&outcome.reports, &spec.out_dir.join("scaling.csv")) {
            Ok(_) | Err(BenchError::InsufficientPoints(_)) => {}
            Err(e) => return Err(e),
        }
    }
    print_outcome(&spec, &outcome);
    Ok(outcome.failures() == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

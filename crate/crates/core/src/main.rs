use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use afire::runner;
use afire::Error;

/// Multispectral CT reconstruction experiments.
#[derive(Parser)]
#[command(name = "afire", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Evaluate the convergence certificate on a config's tiny instance.
    Certificate { config: PathBuf },
    /// Export a bundled truth (`forbild_like` or `random:<seed>`).
    Phantom {
        name: String,
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 5.0)]
        half_width: f64,
    },
}

const THREADS_VAR: &str = "AFIRE_THREADS";

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("{THREADS_VAR}={v} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("{THREADS_VAR}: {e}")))
}

fn execute(cli: Cli) -> Result<String, Error> {
    init_threads()?;
    let v = match cli.command {
        Command::Run { config } => serde_json::to_value(runner::run(config)?.summary),
        Command::Certificate { config } => serde_json::to_value(runner::certificate(config)?),
        Command::Phantom { name, out, n, half_width } => {
            let files = runner::export_phantom(&name, out, n, half_width)?;
            serde_json::to_value(files)
        }
    };
    Ok(v.expect("serializable").to_string())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

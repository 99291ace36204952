use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hrpricer::harness::{error_exit_code, run, Command, Method, RunConfig, Settings};
use hrpricer::Error;

#[derive(Parser)]
#[command(name = "hrpricer", version, about = "American puts under the Hobson-Rogers delay GBM")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Price the put at (x0, z0).
    Price {
        #[command(flatten)]
        common: Common,
        /// pde, lsmc or binomial; defaults to the config's method.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Extract the exercise boundary and striking curves.
    Boundary {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate (X, Y, Z) paths.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the property checks and write a verification report.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(cli: Cli) -> Result<i32, Error> {
    let (command, common, method) = match cli.command {
        Cmd::Price { common, method } => (Command::Price, common, method),
        Cmd::Boundary { common } => (Command::Boundary, common, None),
        Cmd::Simulate { common } => (Command::Simulate, common, None),
        Cmd::Verify { common } => (Command::Verify, common, None),
    };
    let settings = Settings::from_file(&common.config)?;
    let method = method.unwrap_or(settings.method);
    let cfg = RunConfig {
        command,
        settings,
        out_dir: common.out,
        seed: common.seed,
    };
    let outcome = run(&cfg, method)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    for a in &outcome.artifacts {
        eprintln!("wrote {}", a.display());
    }
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            ExitCode::from(error_exit_code(&e) as u8)
        }
    }
}

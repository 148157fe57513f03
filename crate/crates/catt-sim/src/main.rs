use std::process::ExitCode;

use clap::Parser;

use catt_sim::cli::{self, Cli};

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CATT_SIM_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                // Ignore the error if a global pool already exists.
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("catt-sim: CATT_SIM_THREADS must be a positive integer");
                return ExitCode::from(cli::EXIT_PARSE);
            }
        }
    }
    let args = Cli::parse();
    match cli::run(&args) {
        Ok(()) => ExitCode::from(cli::EXIT_OK),
        Err(e) => {
            eprintln!("catt-sim: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

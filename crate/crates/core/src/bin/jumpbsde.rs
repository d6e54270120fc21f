use std::process::ExitCode;

use clap::Parser;
use jumpbsde::cli::{self, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Cli::parse();
    match cli::run(&args) {
        Ok(report) if report.all_pass() => ExitCode::SUCCESS,
        Ok(report) => {
            for c in report.checks.iter().filter(|c| !c.pass) {
                eprintln!("check failed: {} (gap {:e}, tolerance {:e})", c.check_name, c.gap, c.tolerance);
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

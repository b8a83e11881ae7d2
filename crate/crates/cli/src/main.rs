use std::process::ExitCode;

use clap::Parser;
use qmmr_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(&cli.command);
    match &result {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.audit_failed {
                eprintln!("{}: some checks failed", cli.command.name());
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result))
}

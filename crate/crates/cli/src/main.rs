use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use anchorvid_cli::{outcome_status, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli).and_then(|outcome| {
        print!("{}", outcome.render());
        let _ = std::io::stdout().flush();
        outcome_status(&outcome)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

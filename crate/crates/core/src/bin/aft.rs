use std::process::ExitCode;

use clap::Parser;

use aft::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aft: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

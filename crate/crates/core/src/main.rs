use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    // help and version go through clap's own printer
    if let Err(e) = holomotion::cli::Cli::try_parse_from(&argv) {
        let code = if e.use_stderr() { 2 } else { 0 };
        let _ = e.print();
        return ExitCode::from(code);
    }
    match holomotion::cli::run(argv) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::process::ExitCode;

use clap::Parser;
use modalfuse_cli::args::Cli;
use modalfuse_cli::error::report;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    report(modalfuse_cli::run(&cli))
}

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = match lemma_htr_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    lemma_htr_cli::run(cli)
}

use std::process::ExitCode;

use clap::Parser;
use rdm_cli::alloc::CountingAlloc;
use rdm_cli::app::{run, Cli, EXIT_ARGUMENT};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ARGUMENT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(run(cli))
}

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use moelab_cli::alloc::CountingAlloc;
use moelab_cli::{emit, execute, Cli};

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = execute(&cli.command).and_then(|report| emit(&report, cli.command.out()));
    match result {
        Ok(Some(text)) => {
            // a closed pipe downstream is not a failure of the run
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(detail) = &e.detail {
                eprintln!("{}", serde_json::to_string_pretty(detail).expect("detail serializes"));
            }
            ExitCode::from(e.code as u8)
        }
    }
}

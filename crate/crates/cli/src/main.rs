use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(gsf_bounds_cli::run_with(std::env::args_os(), &mut io::stdout(), &mut io::stderr()))
}

use std::process::ExitCode;

fn main() -> ExitCode {
    psopf_core::cli::run(std::env::args_os())
}

use std::process::ExitCode;

fn main() -> ExitCode {
    osfsl_cli::main_with_args(std::env::args_os().collect())
}

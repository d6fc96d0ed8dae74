use std::process::ExitCode;

fn main() -> ExitCode {
    smoothdit::cli::main_with_args(std::env::args_os())
}

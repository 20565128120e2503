use std::process::ExitCode;

fn main() -> ExitCode {
    gliorank::cli::main_with_args(std::env::args_os())
}

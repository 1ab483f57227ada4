use std::process::ExitCode;

fn main() -> ExitCode {
    precdelta::cli::main_with_args(std::env::args_os())
}

use std::process::ExitCode;

fn main() -> ExitCode {
    orthoestim::cli::run(std::env::args_os())
}

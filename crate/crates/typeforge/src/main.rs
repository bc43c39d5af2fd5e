use std::process::ExitCode;

fn main() -> ExitCode {
    typeforge::cli::main()
}

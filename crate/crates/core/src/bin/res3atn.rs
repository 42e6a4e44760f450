use std::process::ExitCode;

fn main() -> ExitCode {
    let code = res3atn::cli::main_with_args(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    ExitCode::from(code as u8)
}

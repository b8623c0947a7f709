use std::process::ExitCode;

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    ExitCode::from(nav_cli::main_with(std::env::args_os(), &mut stdout.lock()))
}

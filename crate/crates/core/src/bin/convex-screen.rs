use std::process::ExitCode;

fn main() -> ExitCode {
    convex_screen::cli::main_entry()
}

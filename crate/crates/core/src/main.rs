use std::process::ExitCode;

use xraygan::cli::{run, EXIT_INTERNAL};

fn main() -> ExitCode {
    let result = std::panic::catch_unwind(|| run(std::env::args_os()));
    let Ok(r) = result else {
        return ExitCode::from(EXIT_INTERNAL as u8);
    };
    if r.json {
        if !r.summary.is_empty() {
            eprintln!("{}", r.summary.trim_end());
        }
        println!("{}", r.to_json());
    } else if r.success() {
        println!("{}", r.summary.trim_end());
    } else {
        eprintln!("{}", r.summary.trim_end());
    }
    ExitCode::from(r.exit_code as u8)
}

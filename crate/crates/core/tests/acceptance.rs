//! Acceptance criteria. `KOOPMAN_ACCEPTANCE=fast` skips the two long
//! reproduction runs (AC1, AC3).

use std::process::ExitCode;

use koopman_core::acceptance::{check_registry, run, Mode};

fn main() -> ExitCode {
    let mode = match std::env::var("KOOPMAN_ACCEPTANCE").as_deref() {
        Ok("fast") => Mode::Fast,
        _ => Mode::Full,
    };
    if let Err(e) = check_registry() {
        println!("FAIL registry: {e}");
        return ExitCode::FAILURE;
    }
    let (outcomes, info) = run(mode);
    for o in &outcomes {
        println!("{o}");
    }
    for line in &info {
        println!("info: {line}");
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

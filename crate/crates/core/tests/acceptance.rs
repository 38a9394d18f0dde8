//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fail.

mod common;

use std::process::ExitCode;

fn main() -> ExitCode {
    let mut failed = 0;
    for (name, check) in common::CRITERIA {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!(
        "{} of {} criteria pass",
        common::CRITERIA.len() - failed,
        common::CRITERIA.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Runs every acceptance criterion and prints one line per criterion.
//! `EMBCHORD_SEED` overrides the default seed.

use std::process::ExitCode;

use embchord::bench::{acceptance, DEFAULT_SEED};

fn main() -> ExitCode {
    let seed = std::env::var("EMBCHORD_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(DEFAULT_SEED);
    let report = acceptance(seed);
    for r in &report.results {
        println!("{}", r.line());
    }
    let passed = report.results.iter().filter(|r| r.passed).count();
    println!("acceptance: {passed}/{} criteria passed (seed {seed})", report.results.len());
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

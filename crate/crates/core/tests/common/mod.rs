#![allow(dead_code)]

pub mod checks;
pub mod oracle;
pub mod tape;

use std::io::Write;

/// Prints a line that bypasses the test harness's output capture.
pub fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

//! Full verification battery, one line per criterion.
//!
//! Run with `cargo test -p logchol --test acceptance -- --nocapture` to see
//! the lines stream as each check finishes; `logchol-cli verify` prints the
//! same report.

use logchol::verify;

#[test]
fn all_criteria_pass() {
    let reports = verify::run_all_with(|r| println!("{}", r.line()));
    assert_eq!(reports.len(), 12);

    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.line()).collect();
    assert!(
        failed.is_empty(),
        "{} of {} criteria failed:\n{}",
        failed.len(),
        reports.len(),
        failed.join("\n"),
    );
}

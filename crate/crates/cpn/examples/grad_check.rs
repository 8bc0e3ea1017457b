//! Verifies every analytic gradient against central finite differences.
//!
//! The same checks back the `gradcheck` subcommand of the CLI; here they run
//! at a reduced point count so the example finishes in about a second.

use cpn::gradcore::{fd_suite, FD_TOLERANCE};
use cpn::model::loss::loss_fd_suite;

fn main() {
    let points = 50;
    let seed = 0;
    let mut checks = fd_suite(points, seed);
    checks.extend(loss_fd_suite(points, seed));

    let mut all_ok = true;
    for check in &checks {
        let status = if check.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<34} max rel err {:>10.3e} over {:>3} points  {status}",
            check.name, check.max_rel_err, check.points
        );
        all_ok &= check.passed();
    }
    if !all_ok {
        eprintln!("some gradients exceed the {FD_TOLERANCE:e} tolerance");
        std::process::exit(1);
    }
    println!(
        "all {} gradient checks pass at tolerance {FD_TOLERANCE:e}",
        checks.len()
    );
}

//! Acceptance suite: runs every verification criterion at its full size and
//! prints one pass/fail line per check.
//!
//! These are the long-running end-to-end checks; the per-module unit tests
//! live next to the code. Thresholds are pinned inside `chns::verify`.

use chns::verify::{format_check, run_suite};

fn run_and_assert(suite: &str) {
    let checks = run_suite(suite, None).unwrap_or_else(|e| panic!("suite {suite} errored: {e}"));
    assert!(!checks.is_empty(), "suite {suite} produced no checks");
    let mut failed = Vec::new();
    for c in &checks {
        println!("{}", format_check(c));
        if !c.pass {
            failed.push(c.name.clone());
        }
    }
    assert!(
        failed.is_empty(),
        "suite {suite} failed checks: {}",
        failed.join("; ")
    );
}

#[test]
fn criterion_01_operator_oracles() {
    run_and_assert("operators");
}

#[test]
fn criterion_02_mass_laws() {
    run_and_assert("mass");
}

#[test]
fn criterion_03_energy_dissipation() {
    run_and_assert("energy");
}

#[test]
fn criterion_04_energy_balance_consistency() {
    run_and_assert("balance");
}

#[test]
fn criterion_05_strict_separation() {
    run_and_assert("separation");
}

#[test]
fn criteria_06_07_stability_and_rate() {
    run_and_assert("stability");
}

#[test]
fn criterion_08_equilibrium_cross_validation() {
    run_and_assert("equilibrium");
}

#[test]
fn criterion_09_rate_fit_self_test() {
    run_and_assert("ratefit");
}

#[test]
fn criterion_10_shift_identity() {
    run_and_assert("shift");
}

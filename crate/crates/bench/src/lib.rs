//! Shared fixtures for the criterion benchmarks.

use crossfeat::datagen::{gen_rpm, MiniRpmProblem, Regime, Split};

/// A small fixed problem set for forward-pass benchmarks.
pub fn rpm_fixture(count: usize) -> Vec<MiniRpmProblem> {
    gen_rpm(0, count, Regime::Iid, Split::Train).expect("fixture generates")
}

//! Holds the acceptance suite in `tests/acceptance.rs`. Cargo runs test targets package by
//! package in name order, so this package comes last and a failing criterion does not keep
//! the other suites from running.

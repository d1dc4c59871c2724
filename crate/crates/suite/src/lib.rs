//! Home of the `acceptance` test target, which runs every acceptance
//! criterion against `filterlab` and prints one PASS/FAIL line for each.
//!
//! It lives in its own package so that a failing criterion cannot stop
//! cargo's fail-fast run before the unit and integration tests of the other
//! crates have executed.

//! Holds the `acceptance` test target in `tests/acceptance.rs`.

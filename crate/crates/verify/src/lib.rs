//! Acceptance checks for `mrdd-core`. Run them with
//! `cargo test -p mrdd-verify --test acceptance`; the desk-scale benchmark runs
//! only when `--ignored` is passed after `--`.

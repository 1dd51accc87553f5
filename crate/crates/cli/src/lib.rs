//! Library side of the `cac` command: the review HTTP API, kept separate
//! from the binary so it can be exercised in-process.

pub mod api;

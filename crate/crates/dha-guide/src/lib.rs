//! The guide's chapters, included verbatim as rustdoc so that every code
//! snippet in the book compiles and runs as a doc-test. If the book drifts
//! from the library, `cargo test -p dha-guide` fails.
//!
//! The rendered book lives in `book/` at the workspace root
//! (`mdbook build book`).

#[doc = include_str!("../../../README.md")]
pub mod readme {}

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/numerics.md")]
pub mod numerics {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data_formats {}

#[doc = include_str!("../../../book/src/autoencoders.md")]
pub mod autoencoders {}

#[doc = include_str!("../../../book/src/sequences.md")]
pub mod sequences {}

#[doc = include_str!("../../../book/src/fusion.md")]
pub mod fusion {}

#[doc = include_str!("../../../book/src/factorization.md")]
pub mod factorization {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod command_line {}

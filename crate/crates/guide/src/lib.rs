//! Runs every code block of the guide in `book/` as a doc-test.
//!
//! mdbook cannot test snippets that depend on a library crate, so each
//! chapter is pulled in as the docs of an empty module and `cargo test`
//! picks the blocks up from there.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/prototypes.md")]
pub mod prototypes {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

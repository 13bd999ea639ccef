//! The guide from `book/` embedded as rustdoc, chapter by chapter.
//!
//! Including each chapter as a module's documentation makes every fenced
//! Rust block in the book a doc-test of this crate, so `cargo test --doc`
//! keeps the prose and the library from drifting apart. Build the rendered
//! book with `mdbook build book/` from the repository root.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors-and-gradients.md")]
pub mod tensors_and_gradients {}

#[doc = include_str!("../../../book/src/scenes-and-masks.md")]
pub mod scenes_and_masks {}

#[doc = include_str!("../../../book/src/blur-synthesis.md")]
pub mod blur_synthesis {}

#[doc = include_str!("../../../book/src/separable-normalization.md")]
pub mod separable_normalization {}

#[doc = include_str!("../../../book/src/texture-extraction.md")]
pub mod texture_extraction {}

#[doc = include_str!("../../../book/src/losses-and-metrics.md")]
pub mod losses_and_metrics {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}

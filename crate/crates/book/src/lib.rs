//! The guide's chapters as doc comments, one module per chapter, so that
//! `cargo test --doc` runs every snippet in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/likelihood.md")]
pub mod likelihood {}
#[doc = include_str!("../../../book/src/consistency.md")]
pub mod consistency {}
#[doc = include_str!("../../../book/src/sigma_points.md")]
pub mod sigma_points {}
#[doc = include_str!("../../../book/src/filter.md")]
pub mod filter {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

//! Runs the guide's code blocks as doctests. One module per chapter, so a
//! failure names the chapter it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/atoms.md")]
pub mod atoms {}
#[doc = include_str!("../../../book/src/pairs.md")]
pub mod pairs {}
#[doc = include_str!("../../../book/src/embeddings.md")]
pub mod embeddings {}
#[doc = include_str!("../../../book/src/siamese.md")]
pub mod siamese {}
#[doc = include_str!("../../../book/src/cross-encoder.md")]
pub mod cross_encoder {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

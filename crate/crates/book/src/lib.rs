//! The guide under `book/src`, one module per chapter, so that
//! `cargo test --doc` runs every code block.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/sample-sets.md")]
pub mod sample_sets {}
#[doc = include_str!("../../../book/src/local-polynomials.md")]
pub mod local_polynomials {}
#[doc = include_str!("../../../book/src/local-gps.md")]
pub mod local_gps {}
#[doc = include_str!("../../../book/src/sampler.md")]
pub mod sampler {}
#[doc = include_str!("../../../book/src/problems.md")]
pub mod problems {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}

//! Gated decoupled distillation, relational kernel alignment and group-wise
//! learned-step quantization, with a toy student-teacher harness to train
//! them on.
//!
//! The guide in `book/` walks through each piece with runnable examples.

pub mod controller;
pub mod distill;
pub mod error;
pub mod harness;
pub mod numkit;
pub mod quant;
pub mod rcka;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/numkit.md")]
    mod numkit {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/rcka.md")]
    mod rcka {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/controller.md")]
    mod controller {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

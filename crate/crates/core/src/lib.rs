//! Numerical building blocks of a frequency-attention detection transformer, each small
//! enough to check against brute-force oracles and finite differences.

pub mod cli;
pub mod error;
pub mod eval;
pub mod hff;
pub mod matching;
pub mod msda;
pub mod msfca;
pub mod pipeline;
pub mod posenc;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};

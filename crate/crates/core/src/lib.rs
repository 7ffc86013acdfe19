//! Full-prefill / pruned-decode transformer inference and training.
//!
//! A decoder-only model processes the prompt with its full parameters and
//! hands the KV cache to a width-pruned subset of itself for token-by-token
//! generation. The pruned subset keeps every attention head and layer, so the
//! cache written by one is readable by the other.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod autograd;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod perfmodel;
pub mod pruner;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

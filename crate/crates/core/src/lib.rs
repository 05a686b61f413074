//! Filler-token chain-of-thought experiments on the Match-3 (3SUM mod m) task.
//!
//! The pipeline: generate datasets ([`data`]), train a small LLaMA-style
//! decoder ([`model`], [`train`]), read intermediate layers through the logit
//! lens ([`lens`]) and recover the hidden reasoning with filler-bypass decoding
//! ([`decode`]). [`oracle`] is the brute-force ground truth for all of it.

pub mod data;
pub mod decode;
pub mod oracle;
pub mod rng;
pub mod vocab;
pub mod checkpoint;
pub mod cli;
pub mod eval;
pub mod lens;
pub mod linalg;
pub mod model;
pub mod train;

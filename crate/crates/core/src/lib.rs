//! Disentangled interest/conformity embeddings for recommendation under
//! popularity shift.
//!
//! The crate ingests implicit feedback ([`dataset`]), builds an intervened
//! non-IID split ([`splitter`]), samples popularity-margin triplets
//! ([`sampler`]), trains four causal embedding tables ([`model`],
//! [`losses`], [`trainer`]) and evaluates them against debiasing baselines
//! ([`baselines`], [`evaluator`]). The [`cli`] module drives it all from a
//! config file.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod par;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod splitter;
pub mod synthetic;
pub mod trainer;

//! Desk-scale federated learning simulator.
//!
//! The crate wires together a small differentiable network engine, synthetic
//! non-i.i.d. data generation, round orchestration, a focused sign-flip
//! backdoor attack with trigger optimization, and eight aggregation/defense
//! strategies (FedAvg, FedDF, FedRAD, FedMV pruning, Bulyan, Robust LR,
//! DeepSight, CRFL). Every run is a pure function of its seeded config, so
//! experiments are reproducible byte for byte.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};

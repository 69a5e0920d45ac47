//! Experiment configuration and batch runners behind the `oi4dvar` binary.
//!
//! The library split exists so integration tests can drive the experiment
//! pipeline directly; the binary in `main.rs` is a thin argument-parsing
//! wrapper around [`experiments`].

pub mod config;
pub mod experiments;

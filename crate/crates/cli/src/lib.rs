//! Command-line driver: synthetic data, training, evaluation and inference.

pub mod commands;
pub mod config;
pub mod viz;

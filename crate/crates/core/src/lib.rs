//! Recurrent forecasting of aggregated mobility counts under differential
//! privacy.
//!
//! The crate covers the whole experiment path: ingestion and cleaning of
//! per-region count series, LSTM/GRU models with hand-written backpropagation
//! through time, plain and DP-SGD style Adam training, the Gaussian mechanism
//! for input perturbation, a Rényi-DP accountant for gradient perturbation,
//! a sequential-composition ledger, evaluation pipelines and a small
//! hyperparameter search.

pub mod data;
pub mod error;
pub mod forecast;
pub mod neural;
pub mod numeric;
pub mod optim;
pub mod privacy;
pub mod tune;

pub use error::{Error, Result};

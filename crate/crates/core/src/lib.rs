//! Arbitrage-free calibration of option price and implied-volatility surfaces,
//! Dupire local volatility extraction, and repricing backtests.

pub mod backtest;
pub mod black_scholes;
pub mod constrained_sampling;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod local_vol;
pub mod market_data;
pub mod nn_iv;
pub mod optim;
pub mod ssvi;

pub use error::{Error, Result};

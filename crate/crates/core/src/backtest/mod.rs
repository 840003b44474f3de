//! Repricing backtests of local volatility surfaces and a synthetic quote generator.

pub mod cn;
pub mod mc;
pub mod report;
pub mod synthetic;

pub use cn::{price_cn, price_options_cn, CnConfig, CnSurface};
pub use mc::{price_mc, McConfig, McPrice};
pub use report::{report, BacktestReport, Method, ReportRow};
pub use synthetic::{generate_synthetic, Generator, SyntheticSpec};

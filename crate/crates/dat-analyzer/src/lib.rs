//! Static cost model for the DAT backbone: exact integer FLOPs, parameter
//! counts with and without buffer counting, activation-element counts, and
//! the analytic comparison against per-query K-point attention.

mod compare;
mod cost;
mod format;

pub use compare::{compare_ddetr, ddetr_module_cost, dmha_module_cost, DdetrComparison, ModuleCost, StageComparison};
pub use cost::{analyze, count_flops, count_params, dmha_flops, CostReport, DmhaFlops, LayerRecord, Totals};
pub use format::{to_json, to_table};

/// Analyzer-level error: invalid geometry or configuration.
#[derive(Debug)]
pub struct Error(pub String);

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "analyzer error: {}", self.0)
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn analyze_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error(msg.into()))
}

//! Comparison protocols: BFT without secret sharing, and a longest-chain protocol.

mod bft;
mod longest_chain;

pub use bft::run_baseline_bft;
pub use longest_chain::run_longest_chain;

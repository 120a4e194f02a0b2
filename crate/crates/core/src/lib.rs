pub mod analysis;
pub mod baselines;
pub mod codec;
pub mod group;
pub mod metrics;
pub mod protocol;
pub mod pvss;
pub mod simnet;
pub mod vrf;

//! Scenario configuration, read from TOML.
//!
//! ```toml
//! name = "demo"
//! nodes = 40
//! views = 100
//! seeds = [1, 2]
//! variants = ["pvss-bft", "baseline-bft"]
//!
//! [adversary]
//! strategy = "equivocating-leader"
//! malicious = [0, 5, 10]
//!
//! [churn]
//! initial_awake = 40
//!
//! [[churn.stages]]
//! model = "static"
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::churn::{ChurnModel, ChurnSchedule};
use crate::group::SecurityLevel;
use crate::metrics::Variant;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Honest,
    /// Sends one block to each half of the honest nodes.
    EquivocatingLeader,
    /// Corrupts encrypted shares for one half while keeping the commitments.
    ShareForger,
    /// Sends one half a deal with different commitments.
    CommitmentForger,
    /// Votes true with a deal that encodes false.
    VoteEquivocator,
    /// Withholds its proposal from one half.
    SelectiveBroadcaster,
}

impl Strategy {
    pub const ADVERSARIAL: [Strategy; 5] = [
        Strategy::EquivocatingLeader,
        Strategy::ShareForger,
        Strategy::CommitmentForger,
        Strategy::VoteEquivocator,
        Strategy::SelectiveBroadcaster,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Honest => "honest",
            Strategy::EquivocatingLeader => "equivocating-leader",
            Strategy::ShareForger => "share-forger",
            Strategy::CommitmentForger => "commitment-forger",
            Strategy::VoteEquivocator => "vote-equivocator",
            Strategy::SelectiveBroadcaster => "selective-broadcaster",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_malicious() -> Vec<usize> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    #[serde(default)]
    pub strategy: Strategy,
    /// Byzantine node counts to sweep over.
    #[serde(default = "default_malicious")]
    pub malicious: Vec<usize>,
    /// Seeds the split of honest nodes into two groups.
    #[serde(default)]
    pub split_seed: u64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig { strategy: Strategy::Honest, malicious: default_malicious(), split_seed: 0 }
    }
}

fn default_tx_interval() -> u64 {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    /// Ticks between client transactions; 0 disables the client.
    #[serde(default = "default_tx_interval")]
    pub tx_interval: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Workload { tx_interval: default_tx_interval() }
    }
}

fn default_slot_ticks() -> u64 {
    15
}

fn default_confirm_depth() -> u64 {
    10
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongestChainParams {
    #[serde(default = "default_slot_ticks")]
    pub slot_ticks: u64,
    /// Blocks that must extend a block before it is confirmed.
    #[serde(default = "default_confirm_depth")]
    pub confirm_depth: u64,
}

impl Default for LongestChainParams {
    fn default() -> Self {
        LongestChainParams { slot_ticks: default_slot_ticks(), confirm_depth: default_confirm_depth() }
    }
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::PvssBft]
}

fn default_profile() -> SecurityLevel {
    SecurityLevel::Test64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub nodes: usize,
    /// Run length in views; one view is four ticks for every variant.
    pub views: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_profile", with = "level_serde")]
    pub profile: SecurityLevel,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    pub churn: ChurnSchedule,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub longest_chain: LongestChainParams,
}

mod level_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::group::SecurityLevel;

    pub fn serialize<S: Serializer>(l: &SecurityLevel, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(l.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SecurityLevel, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// One fully determined simulation run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSpec {
    pub scenario: String,
    pub variant: Variant,
    pub nodes: usize,
    pub views: u64,
    pub seed: u64,
    #[serde(with = "level_serde")]
    pub profile: SecurityLevel,
    pub strategy: Strategy,
    pub malicious: usize,
    pub split_seed: u64,
    pub churn: ChurnSchedule,
    pub workload: Workload,
    pub longest_chain: LongestChainParams,
}

impl RunSpec {
    /// A churn-free honest run with defaults, convenient for tests.
    pub fn basic(variant: Variant, nodes: usize, views: u64, seed: u64) -> Self {
        RunSpec {
            scenario: "basic".into(),
            variant,
            nodes,
            views,
            seed,
            profile: SecurityLevel::Test64,
            strategy: Strategy::Honest,
            malicious: 0,
            split_seed: 0,
            churn: ChurnSchedule::default(),
            workload: Workload::default(),
            longest_chain: LongestChainParams::default(),
        }
    }

    pub fn ticks(&self) -> u64 {
        self.views * 4
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.nodes == 0 {
            return bad("nodes must be positive".into());
        }
        if self.malicious >= self.nodes {
            return bad(format!("malicious count {} must be below nodes {}", self.malicious, self.nodes));
        }
        if self.churn.stages.is_empty() {
            return bad("churn needs at least one stage".into());
        }
        if let Some(k) = self.churn.initial_awake {
            if k > self.nodes {
                return bad(format!("churn.initial_awake {k} exceeds nodes {}", self.nodes));
            }
        }
        let last = self.churn.stages.len() - 1;
        for (i, s) in self.churn.stages.iter().enumerate() {
            if s.ticks.is_none() && i != last {
                return bad(format!("churn.stages[{i}]: only the last stage may omit ticks"));
            }
            if s.ticks == Some(0) {
                return bad(format!("churn.stages[{i}]: ticks must be positive"));
            }
            let unit = |name: &str, v: f64| {
                if (0.0..=1.0).contains(&v) {
                    Ok(())
                } else {
                    Err(ConfigError::Invalid(format!("churn.stages[{i}].{name} = {v} is outside [0, 1]")))
                }
            };
            match s.model {
                ChurnModel::Static => {}
                ChurnModel::Bernoulli { awake_prob } => unit("awake_prob", awake_prob)?,
                ChurnModel::Flip { flip_prob } => unit("flip_prob", flip_prob)?,
                ChurnModel::Sinusoidal { mean, amplitude, period } => {
                    unit("mean", mean)?;
                    unit("amplitude", amplitude)?;
                    if !(period > 0.0) {
                        return bad(format!("churn.stages[{i}].period must be positive"));
                    }
                }
            }
        }
        if self.longest_chain.slot_ticks == 0 {
            return bad("longest_chain.slot_ticks must be positive".into());
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must list at least one seed".into()));
        }
        if self.variants.is_empty() {
            return Err(ConfigError::Invalid("variants must list at least one protocol".into()));
        }
        if self.adversary.malicious.is_empty() {
            return Err(ConfigError::Invalid("adversary.malicious must not be empty".into()));
        }
        self.runs().iter().try_for_each(RunSpec::validate)
    }

    /// Replaces the seed list with a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }

    /// Expands the sweep into runs ordered by variant, malicious count, seed.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &malicious in &self.adversary.malicious {
                for &seed in &self.seeds {
                    out.push(RunSpec {
                        scenario: format!("{}-m{}", self.name, malicious),
                        variant,
                        nodes: self.nodes,
                        views: self.views,
                        seed,
                        profile: self.profile,
                        strategy: self.adversary.strategy,
                        malicious,
                        split_seed: self.adversary.split_seed,
                        churn: self.churn.clone(),
                        workload: self.workload,
                        longest_chain: self.longest_chain,
                    });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
nodes = 10
views = 5
seeds = [1, 2]
variants = ["pvss-bft", "longest-chain"]

[adversary]
strategy = "share-forger"
malicious = [0, 3]

[churn]
initial_awake = 6

[[churn.stages]]
model = "sinusoidal"
ticks = 8

[[churn.stages]]
model = "flip"
flip_prob = 0.5
"#;

    #[test]
    fn parses_and_expands() {
        let c = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(c.profile, SecurityLevel::Test64);
        assert_eq!(c.churn.stages[0].model, ChurnModel::Sinusoidal { mean: 0.5, amplitude: 0.2, period: 120.0 });
        let runs = c.runs();
        assert_eq!(runs.len(), 8);
        assert_eq!(runs[3].scenario, "t-m3");
        assert_eq!(runs[3].variant, Variant::PvssBft);
        assert_eq!(runs[4].variant, Variant::LongestChain);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let text = BASE.replace("flip_prob = 0.5", "flip_prob = 0.5\nflip_rate = 1");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("flip_rate"), "{err}");
        assert!(err.contains("line"), "{err}");
        let text = BASE.replace("[adversary]", "[adversary]\nsplit = 3");
        assert!(ExperimentConfig::from_toml_str(&text).unwrap_err().to_string().contains("split"));
    }

    #[test]
    fn semantic_errors_are_reported() {
        let text = BASE.replace("malicious = [0, 3]", "malicious = [10]");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(ConfigError::Invalid(_))));
        let text = BASE.replace("flip_prob = 0.5", "flip_prob = 1.5");
        assert!(ExperimentConfig::from_toml_str(&text).unwrap_err().to_string().contains("flip_prob"));
        let text = BASE.replace("ticks = 8\n", "");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        assert!(ExperimentConfig::from_toml_str("name = \"x\"\nnodes = 3\nviews = 1\nseeds = [1]\n").is_err());
    }
}

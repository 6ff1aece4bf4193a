//! Training configuration and the flat key-value file that carries it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::models::Arch;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Training scheme. `Freekd` is the full method; the rest are ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "freekd")]
    Freekd,
    /// Node-level transfer only (structure weight forced to 0).
    #[serde(rename = "freekd-node")]
    FreekdNode,
    /// No agent: every node distills in both directions.
    #[serde(rename = "w.o.-judge")]
    WithoutJudge,
    /// Direction chosen by the lower cross-entropy.
    #[serde(rename = "loss-heuristic")]
    LossHeuristic,
    /// Agent directions, but every batch neighbor forms the local structure.
    #[serde(rename = "all-neighbors")]
    AllNeighbors,
    /// Agent directions, every local structure propagated.
    #[serde(rename = "all-structures")]
    AllStructures,
    /// Both networks trained alone.
    #[serde(rename = "independent")]
    Independent,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Independent,
        Variant::Freekd,
        Variant::FreekdNode,
        Variant::WithoutJudge,
        Variant::LossHeuristic,
        Variant::AllNeighbors,
        Variant::AllStructures,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Freekd => "freekd",
            Variant::FreekdNode => "freekd-node",
            Variant::WithoutJudge => "w.o.-judge",
            Variant::LossHeuristic => "loss-heuristic",
            Variant::AllNeighbors => "all-neighbors",
            Variant::AllStructures => "all-structures",
            Variant::Independent => "independent",
        }
    }

    /// Whether the node-level policy samples the distillation directions.
    pub fn uses_agent(self) -> bool {
        matches!(
            self,
            Variant::Freekd | Variant::FreekdNode | Variant::AllNeighbors | Variant::AllStructures
        )
    }

    /// Whether the structure-level policy samples `a2`.
    pub fn uses_struct_agent(self) -> bool {
        matches!(self, Variant::Freekd | Variant::AllNeighbors)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

/// Every key is required in a config file; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch_phi: Arch,
    pub arch_psi: Arch,
    /// Weight of the node-level distillation loss.
    pub mu: f64,
    /// Weight of the structure-level distillation loss.
    pub rho: f64,
    /// Weight of the neighborhood term of the reward.
    pub gamma: f64,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub policy_lr: f64,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Training nodes per batch; 0 uses the whole training set.
    pub batch_size: usize,
    pub variant: Variant,
    pub row_normalize: bool,
}

pub fn default_lr(arch: Arch) -> f64 {
    match arch {
        Arch::Gat => 0.05,
        Arch::Gcn | Arch::Sage => 0.01,
    }
}

impl TrainConfig {
    pub fn for_archs(arch_phi: Arch, arch_psi: Arch) -> Self {
        Self {
            arch_phi,
            arch_psi,
            lr_phi: default_lr(arch_phi),
            lr_psi: default_lr(arch_psi),
            ..Self::default()
        }
    }

    /// `lr0 * factor^floor(epoch / every)`.
    pub fn lr_at(&self, lr0: f64, epoch: usize) -> f64 {
        let k = epoch / self.lr_decay_every.max(1);
        lr0 * self.lr_decay_factor.powi(k as i32)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    reason: format!("must be positive, got {v}"),
                })
            }
        };
        let non_negative = |key: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    reason: format!("must be non-negative, got {v}"),
                })
            }
        };
        let fraction = |key: &'static str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    reason: format!("must lie in [0, 1), got {v}"),
                })
            }
        };
        let at_least_one = |key: &'static str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    reason: "must be at least 1".into(),
                })
            }
        };
        non_negative("mu", self.mu)?;
        non_negative("rho", self.rho)?;
        non_negative("gamma", self.gamma)?;
        positive("lr_phi", self.lr_phi)?;
        positive("lr_psi", self.lr_psi)?;
        positive("lr_decay_factor", self.lr_decay_factor)?;
        positive("policy_lr", self.policy_lr)?;
        fraction("dropout", self.dropout)?;
        fraction("attention_dropout", self.attention_dropout)?;
        non_negative("weight_decay", self.weight_decay)?;
        at_least_one("lr_decay_every", self.lr_decay_every)?;
        at_least_one("hidden", self.hidden)?;
        at_least_one("layers", self.layers)?;
        at_least_one("heads", self.heads)?;
        at_least_one("patience", self.patience)?;
        at_least_one("max_epochs", self.max_epochs)?;
        for (key, arch) in [("arch_phi", self.arch_phi), ("arch_psi", self.arch_psi)] {
            if arch == Arch::Gat && self.layers > 1 && self.hidden % self.heads != 0 {
                return Err(ConfigError::Invalid {
                    key,
                    reason: format!("gat needs hidden ({}) divisible by heads ({})", self.hidden, self.heads),
                });
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch_phi: Arch::Gcn,
            arch_psi: Arch::Gcn,
            mu: 1.0,
            rho: 1.0,
            gamma: 0.3,
            lr_phi: 0.01,
            lr_psi: 0.01,
            lr_decay_every: 100,
            lr_decay_factor: 0.1,
            policy_lr: 0.01,
            dropout: 0.5,
            attention_dropout: 0.5,
            weight_decay: 0.0005,
            hidden: 64,
            layers: 2,
            heads: 8,
            patience: 150,
            max_epochs: 500,
            seed: 0,
            batch_size: 0,
            variant: Variant::Freekd,
            row_normalize: false,
        }
    }
}

//! Experiment configuration: TOML schema with strict unknown-key
//! rejection and defaults matching the reference parameter table
//! (N = 50, C = 1, T = 50, E = 2, b = 64).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::aggregation::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossEvalPoint {
    /// F_i at the client's post-training local model (no extra
    /// communication).
    Local,
    /// F_i at the broadcast global model the round started from.
    Global,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub n_clients: usize,
    /// Ratio of participating clients; the protocol is full-participation,
    /// so anything other than 1 is a configuration error.
    pub client_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub run_seed: u64,
    pub theory_checks: bool,
    pub loss_eval_point: LossEvalPoint,
    /// Held-out fraction of synthetic datasets used for global accuracy.
    pub test_fraction: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            n_clients: 50,
            client_fraction: 1.0,
            rounds: 50,
            local_epochs: 2,
            batch_size: 64,
            run_seed: 0,
            theory_checks: true,
            loss_eval_point: LossEvalPoint::Local,
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub name: String,
    pub k: Option<usize>,
    pub temperature: Option<f64>,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            name: "fedavg".into(),
            k: None,
            temperature: None,
        }
    }
}

/// Default FedSoftMax temperature: midpoint of the explored 5–30 range.
pub const DEFAULT_TEMPERATURE: f64 = 15.0;

impl StrategySection {
    pub fn build(&self) -> Result<Strategy> {
        match self.name.as_str() {
            "fedavg" => Ok(Strategy::Fedavg),
            "fedmax" => Ok(Strategy::Fedmax),
            "fedmax_k" => {
                let k = self.k.ok_or_else(|| {
                    FedError::Config("strategy fedmax_k requires key `k`".into())
                })?;
                Ok(Strategy::FedmaxK { k })
            }
            "fedsoftmax" => Ok(Strategy::Fedsoftmax {
                temperature: self.temperature.unwrap_or(DEFAULT_TEMPERATURE),
            }),
            other => Err(FedError::Config(format!(
                "unknown strategy `{other}` (expected fedavg|fedmax|fedmax_k|fedsoftmax)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSection {
    /// "exponential" or "theoretical".
    pub kind: String,
    pub eta0: f64,
    pub decay: f64,
    /// Explicit μ for the theoretical schedule; defaults to the testbed's
    /// analytic μ.
    pub mu: Option<f64>,
    /// Explicit γ; defaults to 4L/μ from the testbed constants.
    pub gamma: Option<f64>,
}

impl Default for LrSection {
    fn default() -> Self {
        LrSection {
            kind: "exponential".into(),
            eta0: 1e-4,
            decay: 0.99,
            mu: None,
            gamma: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "quadratic", "blobs", or "idx".
    pub kind: String,
    // quadratic testbed
    pub dim: usize,
    pub curvature_min: f64,
    pub curvature_max: f64,
    pub center_spread: f64,
    pub samples_per_client: usize,
    /// Standard deviation of per-sample center jitter (0 = noiseless).
    pub jitter_sd: f64,
    // blobs testbed
    pub classes: usize,
    pub per_class: usize,
    pub ridge: f64,
    /// "logistic" or "tiny_mlp" for classification datasets.
    pub model: String,
    pub hidden: usize,
    pub data_seed: u64,
    // idx ingestion
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: "quadratic".into(),
            dim: 2,
            curvature_min: 1.0,
            curvature_max: 1.0,
            center_spread: 1.0,
            samples_per_client: 8,
            jitter_sd: 0.0,
            classes: 5,
            per_class: 200,
            ridge: 1e-2,
            model: "logistic".into(),
            hidden: 16,
            data_seed: 1,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    /// "iid" or "shards".
    pub mode: String,
    pub shard_size: usize,
    pub client_dataset_size: usize,
    /// Pinned separately from run_seed so reseeding a run never moves data.
    pub seed: u64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            mode: "iid".into(),
            shard_size: 60,
            client_dataset_size: 200,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub strategy: StrategySection,
    pub lr: LrSection,
    pub data: DataSection,
    pub partition: PartitionSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.experiment.client_fraction - 1.0).abs() > 1e-12 {
            return Err(FedError::Config(
                "client_fraction must be 1 (full participation)".into(),
            ));
        }
        if self.experiment.n_clients == 0
            || self.experiment.local_epochs == 0
            || self.experiment.batch_size == 0
        {
            return Err(FedError::Config(
                "n_clients, local_epochs and batch_size must be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.experiment.test_fraction) {
            return Err(FedError::Config("test_fraction must lie in [0, 1)".into()));
        }
        match self.data.kind.as_str() {
            "quadratic" | "blobs" => {}
            "idx" => {
                if self.data.images.is_none() || self.data.labels.is_none() {
                    return Err(FedError::Config(
                        "idx data requires keys `images` and `labels`".into(),
                    ));
                }
            }
            other => {
                return Err(FedError::Config(format!(
                    "unknown data kind `{other}` (expected quadratic|blobs|idx)"
                )))
            }
        }
        match self.data.model.as_str() {
            "logistic" | "tiny_mlp" => {}
            other => {
                return Err(FedError::Config(format!(
                    "unknown model `{other}` (expected logistic|tiny_mlp)"
                )))
            }
        }
        match self.partition.mode.as_str() {
            "iid" | "shards" => {}
            other => {
                return Err(FedError::Config(format!(
                    "unknown partition mode `{other}` (expected iid|shards)"
                )))
            }
        }
        match self.lr.kind.as_str() {
            "exponential" | "theoretical" => {}
            other => {
                return Err(FedError::Config(format!(
                    "unknown lr kind `{other}` (expected exponential|theoretical)"
                )))
            }
        }
        self.strategy.build()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse a config file; unknown keys are rejected, missing keys take the
/// defaults above.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| FedError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| FedError::Usage(format!("config parse error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_takes_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.experiment.n_clients, 50);
        assert_eq!(cfg.experiment.rounds, 50);
        assert_eq!(cfg.experiment.local_epochs, 2);
        assert_eq!(cfg.experiment.batch_size, 64);
        assert_eq!(cfg.experiment.client_fraction, 1.0);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config_str("[experiment]\nn_client = 3\n").unwrap_err();
        assert!(err.to_string().contains("n_client"), "{err}");
    }

    #[test]
    fn fedmax_k_without_k_rejected() {
        let err = parse_config_str("[strategy]\nname = \"fedmax_k\"\n").unwrap_err();
        assert!(err.to_string().contains('k'));
    }

    #[test]
    fn non_unit_client_fraction_rejected() {
        let err = parse_config_str("[experiment]\nclient_fraction = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("client_fraction"));
    }

    #[test]
    fn temperature_roundtrip() {
        let cfg = parse_config_str("[strategy]\nname = \"fedsoftmax\"\ntemperature = 15.0\n").unwrap();
        let again = parse_config_str(&cfg.to_toml()).unwrap();
        assert_eq!(again.strategy.temperature, Some(15.0));
        match again.strategy.build().unwrap() {
            Strategy::Fedsoftmax { temperature } => assert_eq!(temperature, 15.0),
            _ => panic!(),
        }
    }

    #[test]
    fn full_roundtrip_is_stable() {
        let cfg = parse_config_str(
            "[experiment]\nrounds = 7\nrun_seed = 3\n[strategy]\nname = \"fedmax_k\"\nk = 4\n[data]\nkind = \"blobs\"\n[partition]\nmode = \"shards\"\n",
        )
        .unwrap();
        let text = cfg.to_toml();
        let cfg2 = parse_config_str(&text).unwrap();
        assert_eq!(text, cfg2.to_toml());
    }
}

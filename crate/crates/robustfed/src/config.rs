//! Experiment configuration files.
//!
//! Experiments are described by a TOML file with one section per subsystem.
//! Unknown keys are rejected rather than silently ignored, and every
//! default lives in this module so the schema reference in the README can
//! state them all. `--set key=value` overrides are applied to the parsed
//! TOML tree before the typed config is built, so an override of a
//! misspelled key fails the same way a misspelled file key does.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{AggregatorSpec, BaseRule, Variant, DEFAULT_BULYAN_M};
use crate::attacks::{AttackKind, AttackSpec};
use crate::data::{FederationPlan, PartitionScheme, DEFAULT_MIN_SAMPLES};
use crate::error::{Error, Result};
use crate::learning::{ModelArch, OptimizerKind, OptimizerSpec};
use crate::params::{LayerPartition, ParamVector};
use crate::resilience::{ByzantineGenerator, ResilienceScenario};
use crate::simulator::FederatedConfig;

/// Parsed experiment file. Sections not needed by a given subcommand may be
/// omitted; the builders below check for what they need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregator: Option<AggregatorSection>,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resilience: Option<ResilienceSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub input_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training examples generated per class.
    pub per_class: usize,
    /// Held-out test examples per class.
    pub test_per_class: usize,
    /// Norm of the class centers; cluster noise scales with it.
    pub spread: f64,
    /// Import training data from a delimited text file instead of
    /// generating blobs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_file: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            per_class: 200,
            test_per_class: 100,
            spread: 6.0,
            train_file: None,
            test_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub num_clients: usize,
    pub scheme: String,
    /// Dirichlet concentration for the label-skew scheme.
    pub alpha: f64,
    pub min_samples_per_client: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            num_clients: 10,
            scheme: "iid".into(),
            alpha: 0.5,
            min_samples_per_client: DEFAULT_MIN_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub kind: String,
    pub learning_rate: f64,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerSpec::adam_default();
        Self {
            kind: "adam".into(),
            learning_rate: d.learning_rate,
            epochs_per_round: d.epochs_per_round,
            batch_size: d.batch_size,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_epsilon: d.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorSection {
    pub base: String,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default)]
    pub f: usize,
    #[serde(default = "default_bulyan_m")]
    pub bulyan_m: usize,
    #[serde(default)]
    pub bulyan_trimmed: bool,
}

fn default_variant() -> String {
    "original".into()
}

fn default_bulyan_m() -> usize {
    DEFAULT_BULYAN_M
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kind: String,
    pub flip_fraction: f64,
    pub gaussian_sigma: f64,
    pub boost: bool,
    pub byzantine_fraction: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: "none".into(),
            flip_fraction: 1.0,
            gaussian_sigma: 1.0,
            boost: false,
            byzantine_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub server_eta: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            rounds: 20,
            clients_per_round: 5,
            server_eta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResilienceSection {
    pub n: usize,
    pub f: usize,
    pub d: usize,
    pub sigma: f64,
    pub g_norm: f64,
    pub byz_kind: String,
    pub byz_sigma: f64,
    pub byz_factor: f64,
    pub trials: usize,
    /// Split `d` into this many equal blocks for layerwise specs.
    pub layer_blocks: usize,
}

impl Default for ResilienceSection {
    fn default() -> Self {
        Self {
            n: 25,
            f: 5,
            d: 8,
            sigma: 0.5,
            g_norm: 1.0,
            byz_kind: "random_gaussian".into(),
            byz_sigma: 10.0,
            byz_factor: 2.0,
            trials: 2000,
            layer_blocks: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub report_json: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            metrics_csv: "metrics.csv".into(),
            summary_json: "summary.json".into(),
            report_json: "report.json".into(),
        }
    }
}

impl ExperimentFile {
    /// Parse a TOML string. Syntax errors and unknown keys surface with the
    /// line and column reported by the parser.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a config file and apply `key=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_with_overrides(&text, overrides)
    }

    /// Parse, then apply overrides to the TOML tree before building the
    /// typed config, so overridden keys get the same validation as file keys.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for entry in overrides {
            apply_override(&mut tree, entry)?;
        }
        tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Canonical serialized form; the basis of `config_hash`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, as lowercase hex.
    pub fn config_hash(&self) -> Result<String> {
        let canonical = self.to_toml()?;
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            write!(hex, "{byte:02x}").expect("writing to String cannot fail");
        }
        Ok(hex)
    }

    pub fn model_arch(&self) -> Result<ModelArch> {
        let section = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("missing [model] section".into()))?;
        match section.kind.as_str() {
            "softmax" => Ok(ModelArch::Softmax {
                input_dim: section.input_dim,
                num_classes: section.num_classes,
            }),
            "mlp1" => Ok(ModelArch::Mlp1 {
                input_dim: section.input_dim,
                hidden_dim: section.hidden_dim.ok_or_else(|| {
                    Error::Config("model.hidden_dim is required for kind = \"mlp1\"".into())
                })?,
                num_classes: section.num_classes,
            }),
            other => Err(Error::Config(format!(
                "unknown model.kind {other:?}: expected \"softmax\" or \"mlp1\""
            ))),
        }
    }

    pub fn federation_plan(&self) -> Result<FederationPlan> {
        let scheme = match self.federation.scheme.as_str() {
            "iid" => PartitionScheme::Iid,
            "label_dirichlet" => PartitionScheme::LabelDirichlet {
                alpha: self.federation.alpha,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown federation.scheme {other:?}: expected \"iid\" or \"label_dirichlet\""
                )))
            }
        };
        Ok(FederationPlan {
            num_clients: self.federation.num_clients,
            scheme,
            min_samples_per_client: self.federation.min_samples_per_client,
        })
    }

    pub fn optimizer_spec(&self) -> Result<OptimizerSpec> {
        let kind = match self.optimizer.kind.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => {
                return Err(Error::Config(format!(
                    "unknown optimizer.kind {other:?}: expected \"sgd\" or \"adam\""
                )))
            }
        };
        Ok(OptimizerSpec {
            kind,
            learning_rate: self.optimizer.learning_rate,
            epochs_per_round: self.optimizer.epochs_per_round,
            batch_size: self.optimizer.batch_size,
            adam_beta1: self.optimizer.adam_beta1,
            adam_beta2: self.optimizer.adam_beta2,
            adam_epsilon: self.optimizer.adam_epsilon,
        })
    }

    pub fn aggregator_spec(&self) -> Result<AggregatorSpec> {
        let section = self
            .aggregator
            .as_ref()
            .ok_or_else(|| Error::Config("missing [aggregator] section".into()))?;
        let base = match section.base.as_str() {
            "fedavg" => BaseRule::FedAvg,
            "krum" => BaseRule::Krum,
            "bulyan" => BaseRule::Bulyan,
            "geomed" => BaseRule::GeoMed,
            other => {
                return Err(Error::Config(format!(
                    "unknown aggregator.base {other:?}"
                )))
            }
        };
        let variant = match section.variant.as_str() {
            "original" => Variant::Original,
            "layerwise" => Variant::Layerwise,
            "cosine" => Variant::Cosine,
            "layerwise_cosine" => Variant::LayerwiseCosine,
            other => {
                return Err(Error::Config(format!(
                    "unknown aggregator.variant {other:?}"
                )))
            }
        };
        let mut spec = AggregatorSpec::variant(base, variant, section.f);
        spec.bulyan_m = section.bulyan_m;
        spec.bulyan_trimmed = section.bulyan_trimmed;
        spec.validate()?;
        Ok(spec)
    }

    pub fn attack_spec(&self) -> Result<AttackSpec> {
        let kind = match self.attack.kind.as_str() {
            "none" => AttackKind::None,
            "label_flip" => AttackKind::LabelFlip {
                fraction: self.attack.flip_fraction,
            },
            "random_gaussian" => AttackKind::RandomGaussian {
                sigma: self.attack.gaussian_sigma,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown attack.kind {other:?}"
                )))
            }
        };
        let spec = AttackSpec {
            kind,
            boost: self.attack.boost,
            byzantine_fraction: if matches!(kind, AttackKind::None) {
                0.0
            } else {
                self.attack.byzantine_fraction
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Assemble the full simulation config.
    pub fn federated_config(&self) -> Result<FederatedConfig> {
        let config = FederatedConfig {
            arch: self.model_arch()?,
            plan: self.federation_plan()?,
            opt: self.optimizer_spec()?,
            agg: self.aggregator_spec()?,
            attack: self.attack_spec()?,
            rounds: self.run.rounds,
            clients_per_round: self.run.clients_per_round,
            server_eta: self.run.server_eta,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }

    /// Assemble the resilience scenario and its layer partition. The true
    /// gradient is the uniform direction scaled to `g_norm`.
    pub fn resilience_scenario(&self) -> Result<(ResilienceScenario, LayerPartition)> {
        let section = self.resilience.clone().unwrap_or_default();
        let byz = match section.byz_kind.as_str() {
            "random_gaussian" => ByzantineGenerator::RandomGaussian {
                sigma: section.byz_sigma,
            },
            "scaled_opposite" => ByzantineGenerator::ScaledOpposite {
                factor: section.byz_factor,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown resilience.byz_kind {other:?}"
                )))
            }
        };
        if section.d == 0 {
            return Err(Error::Config("resilience.d must be positive".into()));
        }
        let coord = section.g_norm / (section.d as f64).sqrt();
        let scenario = ResilienceScenario {
            n: section.n,
            f: section.f,
            d: section.d,
            g: ParamVector::new(vec![coord; section.d])
                .map_err(|e| Error::Config(e.to_string()))?,
            sigma: section.sigma,
            byz,
            trials: section.trials,
        };
        scenario.validate().map_err(|e| Error::Config(e.to_string()))?;
        if section.layer_blocks == 0 || section.d % section.layer_blocks != 0 {
            return Err(Error::Config(format!(
                "resilience.layer_blocks = {} must evenly divide d = {}",
                section.layer_blocks, section.d
            )));
        }
        let block = section.d / section.layer_blocks;
        let partition = LayerPartition::new(vec![block; section.layer_blocks])
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok((scenario, partition))
    }
}

/// Apply a single `dotted.path=value` override to a parsed TOML tree.
///
/// The value is coerced to the type of the existing leaf when there is one;
/// otherwise booleans, integers and floats are inferred from the literal and
/// anything else becomes a string. Missing intermediate tables are created,
/// since a config may legitimately omit a defaulted section; a misspelled
/// key still fails when the tree is deserialized into the typed config.
fn apply_override(tree: &mut toml::Value, entry: &str) -> Result<()> {
    let (path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {entry:?} is not of the form key=value")))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} has an empty segment")));
    }
    let mut node = tree;
    for segment in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} does not lead to a table")))?;
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path {path:?} does not lead to a table")))?;
    let leaf = segments[segments.len() - 1];
    let existing = table.get(leaf);
    let value = coerce_value(raw_value, existing);
    table.insert(leaf.to_string(), value);
    Ok(())
}

fn coerce_value(raw: &str, existing: Option<&toml::Value>) -> toml::Value {
    match existing {
        Some(toml::Value::String(_)) => return toml::Value::String(raw.to_string()),
        Some(toml::Value::Float(_)) => {
            if let Ok(f) = raw.parse::<f64>() {
                return toml::Value::Float(f);
            }
        }
        Some(toml::Value::Integer(_)) => {
            if let Ok(i) = raw.parse::<i64>() {
                return toml::Value::Integer(i);
            }
        }
        Some(toml::Value::Boolean(_)) => {
            if let Ok(b) = raw.parse::<bool>() {
                return toml::Value::Boolean(b);
            }
        }
        _ => {}
    }
    if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else {
        toml::Value::String(raw.to_string())
    }
}

//! Multi-round synchronous federated training: client sampling, local
//! training, attack injection, robust aggregation, global update and
//! per-round evaluation.
//!
//! Aggregation operates on deltas `V_i - V_G`, the form in which boosted
//! updates are transmitted; selection rules behave identically on raw
//! parameters when every client starts from the same global model, so the
//! delta form is canonical here. Everything is driven by per-purpose seed
//! streams derived from `(run seed, round, client id)`, which makes runs
//! reproducible regardless of scheduling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationOutcome, AggregatorSpec, UpdateSet};
use crate::attacks::{boost_update, flip_labels, random_byzantine, AttackKind, AttackSpec};
use crate::data::{federate, FederationPlan};
use crate::error::{Error, Result};
use crate::learning::{evaluate, init_params, train_local, Dataset, ModelArch, OptimizerSpec};
use crate::params::ParamVector;
use crate::seeding::{derive_seed, rng_for};

use rand::Rng;

// Tags for the independent seed streams of a run.
const STREAM_INIT: u64 = 1;
const STREAM_ADVERSARIES: u64 = 2;
const STREAM_SAMPLING: u64 = 3;
const STREAM_TRAINING: u64 = 4;
const STREAM_FLIP: u64 = 5;
const STREAM_BYZANTINE: u64 = 6;

/// Full description of a federated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedConfig {
    pub arch: ModelArch,
    pub plan: FederationPlan,
    pub opt: OptimizerSpec,
    pub agg: AggregatorSpec,
    pub attack: AttackSpec,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub server_eta: f64,
    pub seed: u64,
}

impl FederatedConfig {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.agg.validate()?;
        if self.server_eta <= 0.0 {
            return Err(Error::InvalidSpec("server_eta must be positive".into()));
        }
        if self.clients_per_round == 0 {
            return Err(Error::InvalidSpec("clients_per_round must be positive".into()));
        }
        Ok(())
    }
}

/// One client in the roster.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub adversarial: bool,
}

/// Per-round evaluation metrics and aggregation diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Client ids whose updates the operator selected (empty for FedAvg).
    pub selected_indices: Vec<usize>,
    /// Global clip threshold, when a single one exists (not layerwise).
    pub clip_threshold: Option<f64>,
    /// Measured wall time of the round. Excluded from persisted outputs so
    /// an identical run reproduces its files byte-for-byte.
    pub wallclock_ms: f64,
}

/// Summary statistics over the recorded rounds, mirroring the table columns
/// used to report runs: final / last-10-average / minimum test loss and
/// last-10-average / maximum accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_loss: f64,
    pub avg_last10_loss: f64,
    pub min_loss: f64,
    pub avg_last10_accuracy: f64,
    pub max_accuracy: f64,
}

/// Build the client roster: federate the training data, pick the seeded
/// adversarial subset (`floor(byzantine_fraction * roster)` clients, fixed
/// for the whole run) and flip labels on adversarial shards where the
/// attack calls for it.
pub fn build_roster(
    train: &Dataset,
    plan: &FederationPlan,
    attack: &AttackSpec,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<ClientState>> {
    let shards = federate(train, plan, derive_seed(seed, STREAM_SAMPLING, 0))?;
    let roster_size = shards.len();
    let adversary_count = (attack.byzantine_fraction * roster_size as f64).floor() as usize;
    let mut ids: Vec<usize> = (0..roster_size).collect();
    let mut rng = rng_for(seed, STREAM_ADVERSARIES, 0);
    for i in 0..adversary_count {
        let j = rng.gen_range(i..ids.len());
        ids.swap(i, j);
    }
    let adversaries: Vec<usize> = ids[..adversary_count].to_vec();

    let mut roster = Vec::with_capacity(roster_size);
    for (id, shard) in shards.into_iter().enumerate() {
        let adversarial = adversaries.contains(&id);
        let data = if adversarial {
            match attack.kind {
                AttackKind::LabelFlip { fraction } => {
                    flip_labels(&shard, fraction, num_classes, derive_seed(seed, STREAM_FLIP, id as u64))?
                }
                _ => shard,
            }
        } else {
            shard
        };
        roster.push(ClientState {
            id,
            data,
            adversarial,
        });
    }
    Ok(roster)
}

/// One server step: aggregate the submitted deltas and apply
/// `V_G <- V_G + eta * aggregate`.
pub fn server_step(
    global: &ParamVector,
    deltas: &UpdateSet,
    spec: &AggregatorSpec,
    partition: &crate::params::LayerPartition,
    eta: f64,
) -> Result<(ParamVector, AggregationOutcome)> {
    let outcome = aggregate(spec, partition, deltas)?;
    let next = global.add(&outcome.aggregate.scale(eta)?)?;
    Ok((next, outcome))
}

/// Run the full federated experiment and return the per-round metrics and
/// their summary. With `rounds = 0` the summary describes the evaluated
/// initial model.
pub fn run(
    config: &FederatedConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Vec<RoundMetrics>, RunSummary)> {
    config.validate()?;
    let roster = build_roster(
        train,
        &config.plan,
        &config.attack,
        config.arch.num_classes(),
        config.seed,
    )?;
    if config.clients_per_round > roster.len() {
        return Err(Error::InvalidSpec(format!(
            "clients_per_round = {} exceeds roster size {}",
            config.clients_per_round,
            roster.len()
        )));
    }
    let partition = config.arch.canonical_partition();
    let mut global = init_params(&config.arch, derive_seed(config.seed, STREAM_INIT, 0))?;
    let (initial_loss, initial_accuracy) = evaluate(&config.arch, &global, test)?;

    let mut metrics = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let started = Instant::now();
        let sampled = sample_clients(roster.len(), config.clients_per_round, config.seed, round);

        let mut deltas = Vec::with_capacity(sampled.len());
        for &client_id in &sampled {
            let client = &roster[client_id];
            let delta = client_delta(config, client, &global, round)?;
            deltas.push(delta);
        }
        let updates = UpdateSet::new(deltas).map_err(|source| Error::RoundFailed {
            round,
            source: Box::new(source),
        })?;
        let (next_global, outcome) =
            server_step(&global, &updates, &config.agg, &partition, config.server_eta).map_err(
                |source| Error::RoundFailed {
                    round,
                    source: Box::new(source),
                },
            )?;
        global = next_global;

        let (test_loss, test_accuracy) = evaluate(&config.arch, &global, test)?;
        metrics.push(RoundMetrics {
            round,
            test_loss,
            test_accuracy,
            selected_indices: outcome.selected_indices.iter().map(|&i| sampled[i]).collect(),
            clip_threshold: outcome.diagnostics.get("clip_threshold").copied(),
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let summary = if metrics.is_empty() {
        RunSummary {
            final_loss: initial_loss,
            avg_last10_loss: initial_loss,
            min_loss: initial_loss,
            avg_last10_accuracy: initial_accuracy,
            max_accuracy: initial_accuracy,
        }
    } else {
        summarize(&metrics)?
    };
    Ok((metrics, summary))
}

/// Uniform sample of `count` distinct client ids, returned in ascending id
/// order so the update set ordering never depends on scheduling.
fn sample_clients(roster: usize, count: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..roster).collect();
    let mut rng = rng_for(seed, STREAM_SAMPLING, round as u64);
    for i in 0..count {
        let j = rng.gen_range(i..ids.len());
        ids.swap(i, j);
    }
    let mut sampled = ids[..count].to_vec();
    sampled.sort_unstable();
    sampled
}

/// The delta a single client submits for this round.
fn client_delta(
    config: &FederatedConfig,
    client: &ClientState,
    global: &ParamVector,
    round: usize,
) -> Result<ParamVector> {
    let train_seed = derive_seed(
        derive_seed(config.seed, STREAM_TRAINING, round as u64),
        client.id as u64,
        0,
    );
    if client.adversarial {
        match config.attack.kind {
            AttackKind::RandomGaussian { sigma } => {
                let raw = random_byzantine(
                    global.dim(),
                    sigma,
                    derive_seed(
                        derive_seed(config.seed, STREAM_BYZANTINE, round as u64),
                        client.id as u64,
                        0,
                    ),
                )?;
                if config.attack.boost {
                    // The random vector plays the role of the delta in the
                    // boosting identity, so the boost is a plain rescale.
                    raw.scale(config.clients_per_round as f64 / config.server_eta)
                } else {
                    Ok(raw)
                }
            }
            AttackKind::LabelFlip { .. } | AttackKind::None => {
                let local = train_local(&config.arch, global, &client.data, &config.opt, train_seed)?;
                if config.attack.boost {
                    boost_update(&local, global, config.clients_per_round, config.server_eta)
                } else {
                    local.sub(global)
                }
            }
        }
    } else {
        let local = train_local(&config.arch, global, &client.data, &config.opt, train_seed)?;
        local.sub(global)
    }
}

/// The five summary statistics over recorded rounds. Last-10 windows
/// truncate when fewer than ten rounds exist.
pub fn summarize(metrics: &[RoundMetrics]) -> Result<RunSummary> {
    if metrics.is_empty() {
        return Err(Error::EmptyMetrics);
    }
    let window = metrics.len().min(10);
    let tail = &metrics[metrics.len() - window..];
    let avg_last10_loss = tail.iter().map(|m| m.test_loss).sum::<f64>() / window as f64;
    let avg_last10_accuracy = tail.iter().map(|m| m.test_accuracy).sum::<f64>() / window as f64;
    Ok(RunSummary {
        final_loss: metrics.last().unwrap().test_loss,
        avg_last10_loss,
        min_loss: metrics.iter().map(|m| m.test_loss).fold(f64::INFINITY, f64::min),
        avg_last10_accuracy,
        max_accuracy: metrics
            .iter()
            .map(|m| m.test_accuracy)
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{BaseRule, Variant};
    use crate::data::make_blobs;
    use crate::params::LayerPartition;

    fn small_config() -> FederatedConfig {
        let mut opt = OptimizerSpec::adam_default();
        opt.epochs_per_round = 2;
        opt.batch_size = 16;
        FederatedConfig {
            arch: ModelArch::Softmax {
                input_dim: 4,
                num_classes: 2,
            },
            plan: FederationPlan {
                num_clients: 6,
                scheme: crate::data::PartitionScheme::Iid,
                min_samples_per_client: 0,
            },
            opt,
            agg: AggregatorSpec::variant(BaseRule::FedAvg, Variant::Original, 0),
            attack: AttackSpec::none(),
            rounds: 3,
            clients_per_round: 4,
            server_eta: 1.0,
            seed: 5,
        }
    }

    fn blob_pair(seed: u64) -> (Dataset, Dataset) {
        (
            make_blobs(2, 4, 60, 5.0, seed).unwrap(),
            make_blobs(2, 4, 40, 5.0, seed + 1000).unwrap(),
        )
    }

    #[test]
    fn zero_rounds_reports_initial_model() {
        let mut config = small_config();
        config.rounds = 0;
        let (train, test) = blob_pair(1);
        let (metrics, summary) = run(&config, &train, &test).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(summary.final_loss, summary.min_loss);
        assert_eq!(summary.final_loss, summary.avg_last10_loss);
        assert_eq!(summary.max_accuracy, summary.avg_last10_accuracy);
    }

    #[test]
    fn symmetric_deltas_cancel_under_fedavg() {
        let global = ParamVector::new(vec![0.5, -0.25, 1.0]).unwrap();
        let u = ParamVector::new(vec![0.125, 2.0, -4.0]).unwrap();
        let deltas = UpdateSet::new(vec![u.clone(), u.scale(-1.0).unwrap()]).unwrap();
        let spec = AggregatorSpec::variant(BaseRule::FedAvg, Variant::Original, 0);
        let partition = LayerPartition::single(3).unwrap();
        let (next, _) = server_step(&global, &deltas, &spec, &partition, 1.0).unwrap();
        assert_eq!(next, global);
    }

    #[test]
    fn runs_are_deterministic_up_to_wallclock() {
        let config = small_config();
        let (train, test) = blob_pair(2);
        let (m1, s1) = run(&config, &train, &test).unwrap();
        let (m2, s2) = run(&config, &train, &test).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(m1.len(), m2.len());
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(a.round, b.round);
            assert_eq!(a.test_loss.to_bits(), b.test_loss.to_bits());
            assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
            assert_eq!(a.selected_indices, b.selected_indices);
            assert_eq!(a.clip_threshold, b.clip_threshold);
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut config = small_config();
        let (train, test) = blob_pair(3);
        let (m1, _) = run(&config, &train, &test).unwrap();
        config.seed = 6;
        let (m2, _) = run(&config, &train, &test).unwrap();
        assert_ne!(
            m1.iter().map(|m| m.test_loss.to_bits()).collect::<Vec<_>>(),
            m2.iter().map(|m| m.test_loss.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn selection_rules_report_sampled_client_ids() {
        let mut config = small_config();
        config.agg = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 1);
        config.clients_per_round = 5;
        let (train, test) = blob_pair(4);
        let (metrics, _) = run(&config, &train, &test).unwrap();
        for m in &metrics {
            assert_eq!(m.selected_indices.len(), 1);
            assert!(m.selected_indices[0] < 6);
        }
    }

    #[test]
    fn krum_with_too_few_clients_fails_with_round_context() {
        let mut config = small_config();
        config.agg = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 2);
        config.clients_per_round = 4; // needs f + 3 = 5
        let (train, test) = blob_pair(5);
        let err = run(&config, &train, &test).unwrap_err();
        assert!(matches!(err, Error::RoundFailed { round: 1, .. }), "{err}");
    }

    #[test]
    fn summarize_examples() {
        let rm = |round, loss, acc| RoundMetrics {
            round,
            test_loss: loss,
            test_accuracy: acc,
            selected_indices: vec![],
            clip_threshold: None,
            wallclock_ms: 0.0,
        };
        let single = summarize(&[rm(1, 0.5, 0.8)]).unwrap();
        assert_eq!(single.final_loss, 0.5);
        assert_eq!(single.avg_last10_loss, 0.5);
        assert_eq!(single.min_loss, 0.5);
        assert_eq!(single.avg_last10_accuracy, 0.8);
        assert_eq!(single.max_accuracy, 0.8);

        let three = summarize(&[rm(1, 3.0, 0.1), rm(2, 2.0, 0.2), rm(3, 1.0, 0.3)]).unwrap();
        assert_eq!(three.final_loss, 1.0);
        assert_eq!(three.min_loss, 1.0);
        assert_eq!(three.avg_last10_loss, 2.0);

        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn monotone_losses_make_min_equal_final() {
        let rm = |round, loss| RoundMetrics {
            round,
            test_loss: loss,
            test_accuracy: 0.5,
            selected_indices: vec![],
            clip_threshold: None,
            wallclock_ms: 0.0,
        };
        let metrics: Vec<RoundMetrics> = (1..=12).map(|r| rm(r, 5.0 / r as f64)).collect();
        let summary = summarize(&metrics).unwrap();
        assert_eq!(summary.min_loss, summary.final_loss);
    }

    #[test]
    fn clip_threshold_is_recorded_for_cosine_variants() {
        let mut config = small_config();
        config.agg = AggregatorSpec::variant(BaseRule::GeoMed, Variant::Cosine, 0);
        let (train, test) = blob_pair(6);
        let (metrics, _) = run(&config, &train, &test).unwrap();
        assert!(metrics.iter().all(|m| m.clip_threshold.is_some()));
        // Layerwise clips per block: no single global threshold.
        config.agg = AggregatorSpec::variant(BaseRule::GeoMed, Variant::LayerwiseCosine, 0);
        let (metrics, _) = run(&config, &train, &test).unwrap();
        assert!(metrics.iter().all(|m| m.clip_threshold.is_none()));
    }
}

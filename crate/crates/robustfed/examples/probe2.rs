//! Focused grid for the end-to-end scenario margins.

use robustfed::aggregation::{AggregatorSpec, BaseRule, Variant};
use robustfed::attacks::{flip_labels, AttackKind, AttackSpec};
use robustfed::data::{make_blobs_split, FederationPlan, PartitionScheme};
use robustfed::learning::{ModelArch, OptimizerKind, OptimizerSpec};
use robustfed::simulator::{run, FederatedConfig};

fn config(base: BaseRule, variant: Variant, seed: u64, rounds: usize) -> FederatedConfig {
    let m: usize = std::env::var("BULYAN_M").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let h: usize = std::env::var("HIDDEN").ok().and_then(|v| v.parse().ok()).unwrap_or(64);
    let mut agg = AggregatorSpec::variant(base, variant, 1);
    agg.bulyan_m = m;
    FederatedConfig {
        arch: ModelArch::Mlp1 {
            input_dim: 16,
            hidden_dim: h,
            num_classes: 4,
        },
        plan: FederationPlan {
            num_clients: 5,
            scheme: PartitionScheme::Iid,
            min_samples_per_client: 0,
        },
        opt: OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: 0.002,
            epochs_per_round: 2,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        },
        agg,
        attack: AttackSpec {
            kind: AttackKind::LabelFlip { fraction: 1.0 },
            boost: true,
            byzantine_fraction: 0.2,
        },
        rounds,
        clients_per_round: 5,
        server_eta: 0.5,
        seed,
    }
}

fn main() {
    for rounds in [20usize] {
        for noise in [0.1f64] {
            println!("== rounds={rounds} noise={noise}");
            for (lo, hi) in [(0u64, 5u64), (5, 10)] {
                for attack_on in [false, true] {
                    let mut cells = Vec::new();
                    let mut fedavg_final = 0.0;
                    for base in [BaseRule::FedAvg, BaseRule::Krum, BaseRule::Bulyan, BaseRule::GeoMed] {
                        let mut per_variant = Vec::new();
                        for variant in [Variant::Original, Variant::LayerwiseCosine] {
                            if base == BaseRule::FedAvg && variant != Variant::Original {
                                continue;
                            }
                            let mut loss = 0.0;
                            let mut final_acc = 0.0;
                            for seed in lo..hi {
                                let mut c = config(base, variant, seed, rounds);
                                if !attack_on {
                                    c.attack = AttackSpec::none();
                                }
                                let (mut train, test) =
                                    make_blobs_split(4, 16, 100, 50, 6.0, 500 + seed).unwrap();
                                train = flip_labels(&train, noise, 4, 99).unwrap();
                                let (metrics, summary) = run(&c, &train, &test).unwrap();
                                loss += summary.avg_last10_loss / 5.0;
                                final_acc +=
                                    metrics.last().map(|m| m.test_accuracy).unwrap_or(0.0) / 5.0;
                            }
                            per_variant.push(loss);
                            if base == BaseRule::FedAvg {
                                fedavg_final = final_acc;
                            }
                        }
                        if per_variant.len() == 2 {
                            cells.push(format!(
                                "{:?} O={:.4} LC={:.4} d={:+.4}",
                                base,
                                per_variant[0],
                                per_variant[1],
                                per_variant[1] - per_variant[0]
                            ));
                        }
                    }
                    println!(
                        "seeds {lo}..{hi} attack={attack_on}: fedavg_final={fedavg_final:.3} | {}",
                        cells.join(" | ")
                    );
                }
            }
        }
    }
}

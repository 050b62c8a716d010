//! Temporary measurement harness used while pinning test expectations.

use robustfed::aggregation::{AggregatorSpec, BaseRule, Variant};
use robustfed::attacks::{AttackKind, AttackSpec};
use robustfed::data::{make_blobs, make_blobs_split, FederationPlan, PartitionScheme};
use robustfed::learning::{ModelArch, OptimizerKind, OptimizerSpec};
use robustfed::params::{LayerPartition, ParamVector};
use robustfed::resilience::{estimate, ByzantineGenerator, ResilienceScenario};
use robustfed::simulator::{run, FederatedConfig};

fn unit_g(d: usize) -> ParamVector {
    ParamVector::new(vec![1.0 / (d as f64).sqrt(); d]).unwrap()
}

fn scenario(n: usize, f: usize, d: usize, trials: usize) -> ResilienceScenario {
    ResilienceScenario {
        n,
        f,
        d,
        g: unit_g(d),
        sigma: 0.5,
        byz: ByzantineGenerator::RandomGaussian { sigma: 10.0 },
        trials,
    }
}

fn probe_condition_i() {
    println!("== criterion 7 probe: benchmark n=25 f=5 d=8 trials=2000");
    for seed in 0..6u64 {
        let s = scenario(25, 5, 8, 2000);
        let p = LayerPartition::single(8).unwrap();
        let krum = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 5);
        let avg = AggregatorSpec::variant(BaseRule::FedAvg, Variant::Original, 5);
        let ek = estimate(&s, &krum, &p, seed).unwrap();
        let ea = estimate(&s, &avg, &p, seed).unwrap();
        let sep = (ea.alpha_hat - ek.alpha_hat)
            / (ea.alpha_hat_stderr.powi(2) + ek.alpha_hat_stderr.powi(2)).sqrt();
        println!(
            "seed {seed}: krum a={:.4} se={:.4} ip={:.4} cond_i={} | fedavg a={:.4} se={:.4} | sep={:.2} sigma",
            ek.alpha_hat,
            ek.alpha_hat_stderr,
            ek.inner_product,
            ek.condition_i_holds(&s.g),
            ea.alpha_hat,
            ea.alpha_hat_stderr,
            sep
        );
    }
}

fn probe_dimension_trend() {
    println!("== criterion 8 probe: d trend, trials=2000/4000");
    for trials in [2000usize, 4000] {
        let mut alphas = Vec::new();
        for d in [4usize, 16, 64, 256] {
            let s = scenario(25, 5, d, trials);
            let p = LayerPartition::single(d).unwrap();
            let krum = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 5);
            let e = estimate(&s, &krum, &p, 42).unwrap();
            println!(
                "trials {trials} d={d}: alpha={:.4} se={:.4}",
                e.alpha_hat, e.alpha_hat_stderr
            );
            alphas.push((e.alpha_hat, e.alpha_hat_stderr));
        }
        let (a4, s4) = alphas[0];
        let (a256, s256) = alphas[3];
        println!(
            "  d-trend separation: {:.2} sigma",
            (a256 - a4) / (s4 * s4 + s256 * s256).sqrt()
        );
        // layerwise at d=256, k=8, paired on common random numbers
        let _ = s256;
        let s = scenario(25, 5, 256, trials);
        let single = LayerPartition::single(256).unwrap();
        let blocks = LayerPartition::new(vec![32; 8]).unwrap();
        let orig = AggregatorSpec::variant(BaseRule::Krum, Variant::Original, 5);
        let lw = AggregatorSpec::variant(BaseRule::Krum, Variant::Layerwise, 5);
        let mut diffs = Vec::new();
        for seed in 0..8u64 {
            let cmp = robustfed::resilience::compare_alphas(
                &s, &orig, &single, &lw, &blocks, seed, 20,
            )
            .unwrap();
            diffs.push(cmp.diff);
        }
        let r = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / r;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (r - 1.0);
        let se = (var / r).sqrt();
        println!(
            "trials {trials} replicates R=8: mean diff={mean:.4} se={se:.5} sep={:.2} sigma | diffs {:?}",
            mean / se,
            diffs.iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    }
}

fn task_config(base: BaseRule, variant: Variant, seed: u64) -> FederatedConfig {
    FederatedConfig {
        arch: ModelArch::Mlp1 {
            input_dim: 10,
            hidden_dim: 100,
            num_classes: 2,
        },
        plan: FederationPlan {
            num_clients: 10,
            scheme: PartitionScheme::Iid,
            min_samples_per_client: 0,
        },
        opt: OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: 0.01,
            epochs_per_round: 5,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        },
        agg: AggregatorSpec::variant(base, variant, 2),
        attack: AttackSpec {
            kind: AttackKind::LabelFlip { fraction: 1.0 },
            boost: true,
            byzantine_fraction: 0.2,
        },
        rounds: 20,
        clients_per_round: 10,
        server_eta: 1.0,
        seed,
    }
}

fn probe_end_to_end() {
    println!("== criterion 9 probe: imbalanced MLP under label-flip + boost");
    let started = std::time::Instant::now();
    let ops = [BaseRule::FedAvg, BaseRule::Krum, BaseRule::Bulyan, BaseRule::GeoMed];
    for base in ops {
        for variant in [Variant::Original, Variant::LayerwiseCosine] {
            if base == BaseRule::FedAvg && variant != Variant::Original {
                continue;
            }
            let mut accs = Vec::new();
            let mut losses = Vec::new();
            for seed in 0..5u64 {
                let config = task_config(base, variant, seed);
                let (train, test) = make_blobs_split(2, 10, 200, 100, 6.0, 1000 + seed).unwrap();
                let (_, summary) = run(&config, &train, &test).unwrap();
                accs.push(summary.avg_last10_accuracy);
                losses.push(summary.avg_last10_loss);
            }
            let acc = accs.iter().sum::<f64>() / 5.0;
            let loss = losses.iter().sum::<f64>() / 5.0;
            println!(
                "{:8} {:18} acc={:.4} loss={:.4} (per-seed acc {:?})",
                format!("{base:?}"),
                format!("{variant:?}"),
                acc,
                loss,
                accs.iter().map(|a| (a * 1e3).round() / 1e3).collect::<Vec<_>>()
            );
        }
    }
    println!("elapsed: {:.1}s", started.elapsed().as_secs_f64());
}

fn probe_fedavg_norm_ratio() {
    println!("== simulator invariant probe: fedavg round-1 norm ratio vs beta/4");
    // Reproduce round 1 manually: train every roster client from the same
    // initial model, then compare the fedavg aggregate norm to the benign
    // median delta norm.
    use robustfed::learning::{init_params, train_local};
    for seed in 0..5u64 {
        let config = task_config(BaseRule::FedAvg, Variant::Original, seed);
        let (train, test) = make_blobs_split(2, 10, 200, 100, 6.0, 1000 + seed).unwrap();
        let (metrics, _) = run(&config, &train, &test).unwrap();
        let _ = (metrics, test);
        // quick manual norm study
        let global = init_params(&config.arch, 12345).unwrap();
        let benign = train_local(&config.arch, &global, &train, &config.opt, 7).unwrap();
        let delta = benign.sub(&global).unwrap();
        println!("seed {seed}: typical full-data delta norm {:.4}", delta.norm());
    }
}

fn probe_task_designs() {
    use robustfed::attacks::flip_labels;
    let ops = [BaseRule::Krum, BaseRule::Bulyan, BaseRule::GeoMed];
    for (design, dirichlet, label_noise, attack_on) in [
        ("dirichlet-noattack", true, 0.0, false),
        ("dirichlet-attack", true, 0.0, true),
        ("labelnoise-noattack", false, 0.15, false),
        ("labelnoise-attack", false, 0.15, true),
    ] {
        println!("== task design {design}");
        for base in ops {
            let mut report = String::new();
            let mut ok = true;
            for variant in [Variant::Original, Variant::LayerwiseCosine] {
                let mut losses = Vec::new();
                let mut accs = Vec::new();
                for seed in 0..5u64 {
                    let mut config = task_config(base, variant, seed);
                    if dirichlet {
                        config.plan = FederationPlan {
                            num_clients: 12,
                            scheme: PartitionScheme::LabelDirichlet { alpha: 0.5 },
                            min_samples_per_client: 5,
                        };
                    }
                    config.opt.epochs_per_round = 2;
                    if !attack_on {
                        config.attack = AttackSpec::none();
                    }
                    let (mut train, test) =
                        make_blobs_split(2, 10, 200, 100, 6.0, 1000 + seed).unwrap();
                    if label_noise > 0.0 {
                        train = flip_labels(&train, label_noise, 2, 99).unwrap();
                    }
                    match run(&config, &train, &test) {
                        Ok((_, summary)) => {
                            losses.push(summary.avg_last10_loss);
                            accs.push(summary.avg_last10_accuracy);
                        }
                        Err(e) => {
                            report.push_str(&format!(" {variant:?} seed {seed}: ERR {e}"));
                            ok = false;
                        }
                    }
                }
                if !losses.is_empty() {
                    report.push_str(&format!(
                        " {:?}: loss={:.4} acc={:.4} |",
                        variant,
                        losses.iter().sum::<f64>() / losses.len() as f64,
                        accs.iter().sum::<f64>() / accs.len() as f64
                    ));
                }
            }
            println!("{base:?}: {report} ok={ok}");
        }
    }
}

fn hard_task_config(base: BaseRule, variant: Variant, seed: u64, lr: f64, epochs: usize) -> FederatedConfig {
    FederatedConfig {
        arch: ModelArch::Mlp1 {
            input_dim: 16,
            hidden_dim: 64,
            num_classes: 4,
        },
        plan: FederationPlan {
            num_clients: 10,
            scheme: PartitionScheme::Iid,
            min_samples_per_client: 0,
        },
        opt: OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: lr,
            epochs_per_round: epochs,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        },
        agg: AggregatorSpec::variant(base, variant, 2),
        attack: AttackSpec {
            kind: AttackKind::LabelFlip { fraction: 1.0 },
            boost: true,
            byzantine_fraction: 0.2,
        },
        rounds: 20,
        clients_per_round: 10,
        server_eta: 1.0,
        seed,
    }
}

fn probe_hard_task() {
    use robustfed::attacks::flip_labels;
    use robustfed::simulator::build_roster;
    for (lr, epochs, noise) in [(0.001, 2usize, 0.1), (0.003, 2, 0.1), (0.001, 5, 0.1)] {
        println!("== hard task lr={lr} epochs={epochs} noise={noise}");
        for attack_on in [false, true] {
            println!("-- attack={attack_on}");
            for base in [BaseRule::FedAvg, BaseRule::Krum, BaseRule::Bulyan, BaseRule::GeoMed] {
                for variant in [Variant::Original, Variant::LayerwiseCosine] {
                    if base == BaseRule::FedAvg && variant != Variant::Original {
                        continue;
                    }
                    let mut losses = Vec::new();
                    let mut accs = Vec::new();
                    let mut finals = Vec::new();
                    let mut adv_rounds = 0;
                    for seed in 0..5u64 {
                        let mut config = hard_task_config(base, variant, seed, lr, epochs);
                        if !attack_on {
                            config.attack = AttackSpec::none();
                        }
                        let (mut train, test) =
                            make_blobs_split(4, 16, 100, 50, 6.0, 500 + seed).unwrap();
                        if noise > 0.0 {
                            train = flip_labels(&train, noise, 4, 99).unwrap();
                        }
                        let roster = build_roster(&train, &config.plan, &config.attack, 4, config.seed)
                            .unwrap();
                        let advs: Vec<usize> =
                            roster.iter().filter(|c| c.adversarial).map(|c| c.id).collect();
                        let (metrics, summary) = run(&config, &train, &test).unwrap();
                        adv_rounds += metrics
                            .iter()
                            .filter(|m| m.selected_indices.iter().any(|i| advs.contains(i)))
                            .count();
                        losses.push(summary.avg_last10_loss);
                        accs.push(summary.avg_last10_accuracy);
                        finals.push(metrics.last().map(|m| m.test_accuracy).unwrap_or(0.0));
                    }
                    println!(
                        "{:7}{:17} loss={:.4} acc={:.4} final_acc={:.4} adv_sel={}/100",
                        format!("{base:?}"),
                        format!("{variant:?}"),
                        losses.iter().sum::<f64>() / 5.0,
                        accs.iter().sum::<f64>() / 5.0,
                        finals.iter().sum::<f64>() / 5.0,
                        adv_rounds
                    );
                }
            }
        }
    }
}

fn probe_bulyan_m() {
    use robustfed::attacks::flip_labels;
    for (m, rounds) in [(3usize, 20usize), (4, 20), (5, 20), (3, 30), (4, 30)] {
        println!("== bulyan_m={m} rounds={rounds} lr=0.001 epochs=2 noise=0.1");
        for attack_on in [false, true] {
            let mut line = format!("attack={attack_on}: ");
            for variant in [Variant::Original, Variant::LayerwiseCosine] {
                let mut losses = Vec::new();
                let mut accs = Vec::new();
                for seed in 0..5u64 {
                    let mut config = hard_task_config(BaseRule::Bulyan, variant, seed, 0.001, 2);
                    config.agg.bulyan_m = m;
                    config.rounds = rounds;
                    if !attack_on {
                        config.attack = AttackSpec::none();
                    }
                    let (mut train, test) =
                        make_blobs_split(4, 16, 100, 50, 6.0, 500 + seed).unwrap();
                    train = flip_labels(&train, 0.1, 4, 99).unwrap();
                    let (_, summary) = run(&config, &train, &test).unwrap();
                    losses.push(summary.avg_last10_loss);
                    accs.push(summary.avg_last10_accuracy);
                }
                line.push_str(&format!(
                    "{:?} loss={:.4} acc={:.4} | ",
                    variant,
                    losses.iter().sum::<f64>() / 5.0,
                    accs.iter().sum::<f64>() / 5.0
                ));
            }
            println!("{line}");
        }
    }
}

fn single_adv_config(base: BaseRule, variant: Variant, seed: u64) -> FederatedConfig {
    let mut config = hard_task_config(base, variant, seed, 0.001, 2);
    config.plan.num_clients = 5;
    config.clients_per_round = 5;
    config.agg.f = 1;
    config.agg.bulyan_m = 3;
    config
}

fn probe_single_adv() {
    use robustfed::attacks::flip_labels;
    use robustfed::simulator::build_roster;
    for rounds in [20usize, 30] {
        println!("== single-adversary task rounds={rounds}");
        for attack_on in [false, true] {
            println!("-- attack={attack_on}");
            for base in [BaseRule::FedAvg, BaseRule::Krum, BaseRule::Bulyan, BaseRule::GeoMed] {
                for variant in [Variant::Original, Variant::LayerwiseCosine] {
                    if base == BaseRule::FedAvg && variant != Variant::Original {
                        continue;
                    }
                    let mut losses = Vec::new();
                    let mut finals = Vec::new();
                    let mut adv_sel = 0usize;
                    for seed in 0..5u64 {
                        let mut config = single_adv_config(base, variant, seed);
                        config.rounds = rounds;
                        if !attack_on {
                            config.attack = AttackSpec::none();
                        }
                        let (mut train, test) =
                            make_blobs_split(4, 16, 100, 50, 6.0, 500 + seed).unwrap();
                        train = flip_labels(&train, 0.1, 4, 99).unwrap();
                        let roster =
                            build_roster(&train, &config.plan, &config.attack, 4, config.seed)
                                .unwrap();
                        let advs: Vec<usize> =
                            roster.iter().filter(|c| c.adversarial).map(|c| c.id).collect();
                        let (metrics, summary) = run(&config, &train, &test).unwrap();
                        adv_sel += metrics
                            .iter()
                            .filter(|m| m.selected_indices.iter().any(|i| advs.contains(i)))
                            .count();
                        losses.push(summary.avg_last10_loss);
                        finals.push(metrics.last().map(|m| m.test_accuracy).unwrap_or(0.0));
                    }
                    println!(
                        "{:7}{:17} loss={:.4} final_acc={:.4} adv_sel={}/{}",
                        format!("{base:?}"),
                        format!("{variant:?}"),
                        losses.iter().sum::<f64>() / 10.0,
                        finals.iter().sum::<f64>() / 10.0,
                        adv_sel,
                        5 * rounds
                    );
                }
            }
        }
    }
}

fn probe_intensity() {
    use robustfed::attacks::flip_labels;
    use robustfed::simulator::build_roster;
    for (lr, epochs, eta) in [(0.001, 2usize, 1.5), (0.001, 2, 2.0), (0.0005, 2, 2.0)] {
        println!("== single-adv lr={lr} epochs={epochs} eta={eta} rounds=20");
        for attack_on in [false, true] {
            let mut lines = Vec::new();
            for base in [BaseRule::FedAvg, BaseRule::Krum, BaseRule::Bulyan, BaseRule::GeoMed] {
                for variant in [Variant::Original, Variant::LayerwiseCosine] {
                    if base == BaseRule::FedAvg && variant != Variant::Original {
                        continue;
                    }
                    let mut losses = Vec::new();
                    let mut finals = Vec::new();
                    let mut adv_sel = 0usize;
                    for seed in 0..10u64 {
                        let mut config = single_adv_config(base, variant, seed);
                        config.opt.learning_rate = lr;
                        config.opt.epochs_per_round = epochs;
                        config.server_eta = eta;
                        if !attack_on {
                            config.attack = AttackSpec::none();
                        }
                        let (mut train, test) =
                            make_blobs_split(4, 16, 100, 50, 6.0, 500 + seed).unwrap();
                        train = flip_labels(&train, 0.1, 4, 99).unwrap();
                        let roster =
                            build_roster(&train, &config.plan, &config.attack, 4, config.seed)
                                .unwrap();
                        let advs: Vec<usize> =
                            roster.iter().filter(|c| c.adversarial).map(|c| c.id).collect();
                        let (metrics, summary) = run(&config, &train, &test).unwrap();
                        adv_sel += metrics
                            .iter()
                            .filter(|m| m.selected_indices.iter().any(|i| advs.contains(i)))
                            .count();
                        losses.push(summary.avg_last10_loss);
                        finals.push(metrics.last().map(|m| m.test_accuracy).unwrap_or(0.0));
                    }
                    lines.push(format!(
                        "  {:7}{:17} loss={:.4} final_acc={:.4} adv={}",
                        format!("{base:?}"),
                        format!("{variant:?}"),
                        losses.iter().sum::<f64>() / 10.0,
                        finals.iter().sum::<f64>() / 10.0,
                        adv_sel
                    ));
                }
            }
            println!("-- attack={attack_on} (seeds 5..10)\n{}", lines.join("\n"));
        }
    }
}

fn probe_adv_selection() {
    use robustfed::attacks::flip_labels;
    use robustfed::simulator::build_roster;
    println!("== who wins blocks under labelnoise-attack (LC-Krum) and dirichlet-attack");
    for (design, dirichlet, label_noise) in
        [("labelnoise", false, 0.15), ("dirichlet", true, 0.0)]
    {
        for variant in [Variant::Original, Variant::Cosine, Variant::Layerwise, Variant::LayerwiseCosine] {
            let mut adv_rounds = 0usize;
            let mut total_rounds = 0usize;
            let mut loss_sum = 0.0;
            for seed in 0..5u64 {
                let mut config = task_config(BaseRule::Krum, variant, seed);
                if dirichlet {
                    config.plan = FederationPlan {
                        num_clients: 12,
                        scheme: PartitionScheme::LabelDirichlet { alpha: 0.5 },
                        min_samples_per_client: 5,
                    };
                }
                config.opt.epochs_per_round = 2;
                let (mut train, test) = make_blobs_split(2, 10, 200, 100, 6.0, 1000 + seed).unwrap();
                if label_noise > 0.0 {
                    train = flip_labels(&train, label_noise, 2, 99).unwrap();
                }
                let roster =
                    build_roster(&train, &config.plan, &config.attack, 2, config.seed).unwrap();
                let advs: Vec<usize> =
                    roster.iter().filter(|c| c.adversarial).map(|c| c.id).collect();
                let (metrics, summary) = run(&config, &train, &test).unwrap();
                for m in &metrics {
                    total_rounds += 1;
                    if m.selected_indices.iter().any(|i| advs.contains(i)) {
                        adv_rounds += 1;
                    }
                }
                loss_sum += summary.avg_last10_loss;
            }
            println!(
                "{design} {variant:?}: adversarial selection in {adv_rounds}/{total_rounds} rounds, mean avg10 loss {:.6}",
                loss_sum / 5.0
            );
        }
    }
}

fn probe_diag() {
    use robustfed::simulator::build_roster;
    // No-attack sanity: does the federated task learn at all?
    for (label, attack) in [
        ("no-attack", AttackSpec::none()),
        (
            "flip+boost",
            AttackSpec {
                kind: AttackKind::LabelFlip { fraction: 1.0 },
                boost: true,
                byzantine_fraction: 0.2,
            },
        ),
    ] {
        let mut config = task_config(BaseRule::Krum, Variant::Original, 3);
        config.attack = attack;
        let (train, test) = make_blobs_split(2, 10, 200, 100, 6.0, 1003).unwrap();
        let roster = build_roster(&train, &config.plan, &config.attack, 2, config.seed).unwrap();
        let advs: Vec<usize> = roster.iter().filter(|c| c.adversarial).map(|c| c.id).collect();
        println!("== diag {label}: adversaries {advs:?}");
        let (metrics, summary) = run(&config, &train, &test).unwrap();
        for m in &metrics {
            let adv_selected = m
                .selected_indices
                .iter()
                .filter(|i| advs.contains(i))
                .count();
            println!(
                "round {:2}: loss={:8.4} acc={:.3} selected={:?} adversarial_selected={}",
                m.round, m.test_loss, m.test_accuracy, m.selected_indices, adv_selected
            );
        }
        println!("summary: {summary:?}");
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    match which.as_str() {
        "cond" => probe_condition_i(),
        "trend" => probe_dimension_trend(),
        "e2e" => probe_end_to_end(),
        "norms" => probe_fedavg_norm_ratio(),
        "diag" => probe_diag(),
        "designs" => probe_task_designs(),
        "advsel" => probe_adv_selection(),
        "hard" => probe_hard_task(),
        "bulyan" => probe_bulyan_m(),
        "single" => probe_single_adv(),
        "intensity" => probe_intensity(),
        _ => {
            probe_condition_i();
            probe_dimension_trend();
            probe_end_to_end();
            probe_fedavg_norm_ratio();
        }
    }
}

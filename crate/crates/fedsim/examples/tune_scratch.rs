//! Scratch harness for calibrating the acceptance benchmark (temporary).

use fedsim::data::{generate_synthetic, SyntheticSpec};
use fedsim::federation::{
    Federation, FederationConfig, MuMode, SelectionStrategy,
};
use fedsim::loss::LossConfig;
use fedsim::model::ModelConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let shift: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.5);
    let sep: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let rounds: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(30);
    let trials: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(10);

    let model = ModelConfig {
        num_features: 21,
        embed_dim: 6,
        num_heads: 3,
        ff_hidden: 12,
        head_hidden: 8,
        num_classes: 2,
    };

    let mut pbcs_wins = 0;
    let started = Instant::now();
    for seed in 0..trials {
        let spec = SyntheticSpec {
            shift_magnitude: shift,
            class_separation: sep,
            seed,
            ..SyntheticSpec::default()
        };
        let (clients, test) = generate_synthetic(&spec).unwrap();

        let base = FederationConfig {
            selection_ratio: 0.5,
            rounds,
            local_epochs: epochs,
            batch_size: 64,
            learning_rate: lr,
            seed,
            ..FederationConfig::default()
        };
        let pbcs_cfg = FederationConfig {
            selection_strategy: SelectionStrategy::Pbcs,
            mu_mode: MuMode::Varying,
            ..base.clone()
        };
        let rand_cfg = FederationConfig {
            selection_strategy: SelectionStrategy::Random,
            mu_mode: MuMode::Fixed,
            ..base
        };

        let t0 = Instant::now();
        let mut fed = Federation::new(model, LossConfig::default(), pbcs_cfg, &clients, test.clone()).unwrap();
        let pbcs_run = fed.run_training().unwrap();
        if std::env::var("VERBOSE").is_ok() {
            for r in &pbcs_run.records {
                println!(
                    "  round {:>2} mu {:.4} sel {:?} f1s {:?} -> P {:.3} R {:.3} F1 {:.3}",
                    r.round,
                    r.mu,
                    r.selected,
                    r.client_f1.iter().map(|f| (f * 100.0).round() / 100.0).collect::<Vec<_>>(),
                    r.test_precision,
                    r.test_recall,
                    r.test_f1
                );
            }
        }
        let mut fed = Federation::new(model, LossConfig::default(), rand_cfg, &clients, test).unwrap();
        let rand_run = fed.run_training().unwrap();
        let pb = pbcs_run.best_round.unwrap();
        let rb = rand_run.best_round.unwrap();
        let win = pb <= rb;
        if win {
            pbcs_wins += 1;
        }
        println!(
            "seed {seed}: pbcs best round {pb} (F1 {:.4}) vs random {rb} (F1 {:.4}) -> {} [{:.1}s]",
            pbcs_run.best_test_f1,
            rand_run.best_test_f1,
            if win { "WIN" } else { "loss" },
            t0.elapsed().as_secs_f64()
        );
    }
    println!(
        "pbcs wins {pbcs_wins}/{trials}  total {:.1}s",
        started.elapsed().as_secs_f64()
    );
}

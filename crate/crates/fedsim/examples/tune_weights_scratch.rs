//! Scratch harness for the class-weighting recall comparison (temporary).

use fedsim::data::{generate_synthetic, SyntheticSpec};
use fedsim::federation::{Federation, FederationConfig};
use fedsim::loss::LossConfig;
use fedsim::model::ModelConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let shift: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.7);
    let sep: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let rounds: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(12);
    let trials: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(10);

    let model = ModelConfig {
        num_features: 21,
        embed_dim: 6,
        num_heads: 3,
        ff_hidden: 12,
        head_hidden: 8,
        num_classes: 2,
    };

    let mut wins = 0;
    let started = Instant::now();
    for seed in 0..trials {
        let spec = SyntheticSpec {
            shift_magnitude: shift,
            class_separation: sep,
            seed,
            ..SyntheticSpec::default()
        };
        let (clients, test) = generate_synthetic(&spec).unwrap();
        let fed_cfg = FederationConfig {
            selection_ratio: 0.5,
            rounds,
            local_epochs: epochs,
            batch_size: 64,
            learning_rate: lr,
            seed,
            ..FederationConfig::default()
        };
        let best_recall = |weights: [f64; 2]| -> f64 {
            let lc = LossConfig {
                class_weights: weights,
                ..LossConfig::default()
            };
            let mut fed =
                Federation::new(model, lc, fed_cfg.clone(), &clients, test.clone()).unwrap();
            let run = fed.run_training().unwrap();
            run.records
                .iter()
                .map(|r| r.test_recall)
                .fold(0.0, f64::max)
        };
        let weighted = best_recall([0.25, 0.75]);
        let balanced = best_recall([0.5, 0.5]);
        let win = weighted > balanced;
        if win {
            wins += 1;
        }
        println!(
            "seed {seed}: recall weighted {weighted:.4} vs balanced {balanced:.4} -> {}",
            if win { "WIN" } else { "loss" }
        );
    }
    println!(
        "weighted wins {wins}/{trials}  total {:.1}s",
        started.elapsed().as_secs_f64()
    );
}

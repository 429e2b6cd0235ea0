//! Diagnostic: IG completeness vs fine-Riemann agreement across training
//! lengths (temporary).

use fedsim::data::{generate_synthetic, SyntheticSpec};
use fedsim::explain::{integrated_gradients, value_and_input_gradient, IgConfig};
use fedsim::federation::{Federation, FederationConfig};
use fedsim::loss::LossConfig;
use fedsim::model::{ModelConfig, ModelParams};
use fedsim::seeding;
use rand::seq::SliceRandom;

fn main() {
    let rounds: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(6);
    let lr: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.3);
    let oracle_m: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20_000);

    let config = ModelConfig {
        num_features: 21,
        embed_dim: 6,
        num_heads: 3,
        ff_hidden: 12,
        head_hidden: 8,
        num_classes: 2,
    };
    let sep: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1.5);
    let epochs: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(3);
    let rate: f64 = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(0.13);
    let spec = SyntheticSpec {
        shift_magnitude: 0.7,
        class_separation: sep,
        minority_rates: vec![rate; 4],
        seed: 4,
        ..SyntheticSpec::default()
    };
    let (clients, test) = generate_synthetic(&spec).unwrap();
    let fed_config = FederationConfig {
        selection_ratio: 0.5,
        rounds,
        local_epochs: epochs,
        batch_size: 64,
        learning_rate: lr,
        seed: 4,
        ..FederationConfig::default()
    };
    let mut fed = Federation::new(
        config,
        LossConfig::default(),
        fed_config,
        &clients,
        test.clone(),
    )
    .unwrap();
    let run = fed.run_training().unwrap();
    println!("trained {} rounds, best F1 {:.3}", rounds, run.best_test_f1);
    let params = ModelParams::unflatten(config, &run.best_params).unwrap();

    let mut rng = seeding::stream_rng(34, &[seeding::DOMAIN_EXPLAIN]);
    let mut inputs: Vec<usize> = (0..test.len()).collect();
    inputs.shuffle(&mut rng);

    let ig256 = IgConfig {
        steps: 256,
        ..Default::default()
    };
    let mut worst_rel = 0.0f64;
    let mut min_df = f64::INFINITY;
    for &i in inputs.iter().take(20) {
        let r = integrated_gradients(&config, &params, test.row(i), &ig256).unwrap();
        let df = (r.f_input - r.f_baseline).abs();
        min_df = min_df.min(df);
        worst_rel = worst_rel.max(r.completeness_gap / df.max(1e-12));
    }
    println!("completeness: worst {:.4}% of |dF|, min |dF| {min_df:.4}", 100.0 * worst_rel);

    let ig64 = IgConfig {
        steps: 64,
        ..Default::default()
    };
    let mut worst_gap = 0.0f64;
    for &i in inputs.iter().skip(20).take(5) {
        let x = test.row(i);
        let coarse = integrated_gradients(&config, &params, x, &ig64)
            .unwrap()
            .attributions;
        let d = x.len();
        let mut grad_sum = vec![0.0; d];
        for k in 1..=oracle_m {
            let alpha = k as f64 / oracle_m as f64;
            let point: Vec<f64> = x.iter().map(|v| alpha * v).collect();
            let (_, grad) = value_and_input_gradient(&config, &params, &point, 1).unwrap();
            for (acc, g) in grad_sum.iter_mut().zip(&grad) {
                *acc += g;
            }
        }
        let mut worst_i = 0.0f64;
        for j in 0..d {
            let fine = x[j] * grad_sum[j] / oracle_m as f64;
            worst_i = worst_i.max((coarse[j] - fine).abs());
        }
        println!("  input {i}: worst per-feature gap {worst_i:.2e}");
        worst_gap = worst_gap.max(worst_i);
    }
    println!("fine-Riemann agreement: worst {worst_gap:.2e}");
}

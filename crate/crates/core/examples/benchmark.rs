//! Trains each mode on a synthetic dataset and reports held-out metrics
//! against the latent true score.
//!
//! Usage: `cargo run --release --example benchmark -- [seed] [epochs] [lr_max] [modes] [feature_noise] [kl_mode]`

use std::time::Instant;

use uol::bt::REFERENCE_CAP;
use uol::losses::KlMode;
use uol::synth::{generate_dataset, train_test_split, SyntheticConfig, BIN_WIDTH};
use uol::trainer::{self, EvalConfig, ScoreTarget, TrainConfig, TrainMode};

fn main() -> uol::error::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map_or(0, |s| s.parse().expect("seed"));
    let epochs: usize = args.get(1).map_or(50, |s| s.parse().expect("epochs"));
    let lr_max: f64 = args.get(2).map_or(1e-4, |s| s.parse().expect("lr_max"));
    let modes = args.get(3).map_or("uol,order_point,regression", String::as_str);
    let feature_noise: f64 = args.get(4).map_or(0.05, |s| s.parse().expect("feature_noise"));
    let kl_mode = match args.get(5).map(String::as_str) {
        Some("normalized") => KlMode::Normalized,
        _ => KlMode::Verbatim,
    };

    let data = generate_dataset(&SyntheticConfig { n: 2000, feature_dim: 16, seed, feature_noise, ..Default::default() })?;
    let (train, test) = train_test_split(&data, 0.2, seed)?;
    for mode in modes.split(',') {
        let mode: TrainMode = mode.parse()?;
        let cfg = TrainConfig { mode, epochs, lr_max, seed, kl_mode, ..Default::default() };
        let start = Instant::now();
        let out = trainer::train(&train, &cfg)?;
        let trained = start.elapsed();
        let refset = trainer::model_reference_set(&out.checkpoint.model, &train, REFERENCE_CAP, BIN_WIDTH, seed)?;
        let eval = EvalConfig { seed, target: ScoreTarget::TrueScore, ..Default::default() };
        let report = trainer::evaluate(&out.checkpoint, &test, Some(&refset), &eval)?;
        let last = out.trace.last().expect("at least one epoch");
        let mean_dispersion = test
            .iter()
            .map(|d| {
                let z = out.checkpoint.model.encoder.encode(&d.features).expect("encode");
                z.var_diag.iter().sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / test.len() as f64;
        println!(
            "seed {seed} {mode:?}: pc {:.4} mae {:.4} rmse {:.4} acc {:.4} | final loss {:.4} | dispersion {:.3} | train {:.1}s total {:.1}s",
            report.pc,
            report.mae,
            report.rmse,
            report.pairwise_acc,
            last.total,
            mean_dispersion,
            trained.as_secs_f64(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

//! Train the adversarial-regression counterfactual generator on a tiny
//! synthetic dataset and print the per-epoch training history.
//!
//! The generator learns an additive map delta so that x' = x + delta looks
//! to the regressor like a sample with the requested target y'. Each batch
//! alternates one regressor update with one generator update on the same
//! counterfactual target draw.
//!
//! Run with: cargo run --release --example train_counterfactual

use vrgan::models::{GeneratorSpec, RegressorSpec};
use vrgan::toydata::{gen_toy_dataset, ToyConfig};
use vrgan::train::{history_csv, train_vrgan, TrainConfig, TrainData};

fn main() -> vrgan::Result<()> {
    let toy = ToyConfig {
        image_size: 32,
        side_scale: 26.0,
        noise_sigma_px: 1.5,
        n_train: 48,
        n_val_pairs: 8,
        n_test_pairs: 8,
        seed: 3,
        ..ToyConfig::default()
    };
    let ds = gen_toy_dataset(&toy)?;
    let data = TrainData::from_toy(&ds);

    let gen_spec = GeneratorSpec {
        depth: 4,
        base_channels: 8,
        image_size: 32,
        conditioned: true,
    };
    let reg_spec = RegressorSpec {
        base_channels: 8,
        stem_stride: 2,
        bn_frozen: true,
    };
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 3,
        seed: 1,
        ..TrainConfig::default()
    };

    let outcome = train_vrgan(&cfg, gen_spec, reg_spec, &data)?;
    println!("{}", history_csv(&outcome.history).trim_end());
    println!(
        "best epoch {} with validation NCC {:.4}",
        outcome.best_epoch, outcome.best_val_ncc
    );
    Ok(())
}

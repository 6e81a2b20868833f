//! Train the WGAN-GP additive-map baseline on a tiny synthetic dataset.
//!
//! The baseline generator maps class-1 images (y above the threshold) toward
//! the class-0 distribution via an additive map, judged by a critic trained
//! with a gradient penalty. Unlike the adversarial-regression method, it
//! receives no target value, so its map is the same for every requested y'.
//!
//! Run with: cargo run --release --example train_wgan_baseline

use vrgan::baseline::{baseline_history_csv, train_baseline, BaselineConfig};
use vrgan::models::{CriticSpec, GeneratorSpec};
use vrgan::toydata::{gen_toy_dataset, ToyConfig};
use vrgan::train::TrainData;

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
        conditioned: false,
    };
    let critic_spec = CriticSpec {
        base_channels: 8,
        stem_stride: 2,
    };
    let cfg = BaselineConfig {
        batch_size: 8,
        max_epochs: 2,
        critic_steps: 2,
        seed: 1,
        ..BaselineConfig::default()
    };

    let outcome = train_baseline(&cfg, gen_spec, critic_spec, &data)?;
    println!("{}", baseline_history_csv(&outcome.history).trim_end());
    println!(
        "best epoch {} with validation NCC {:.4}",
        outcome.best_epoch, outcome.best_val_ncc
    );
    Ok(())
}

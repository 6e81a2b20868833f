//! Sweep the counterfactual target y' over a grid for one input image and
//! save a two-row montage: difference maps on top, the input and each
//! counterfactual below.
//!
//! With a trained generator the squares grow monotonically with y'; here an
//! untrained generator produces near-zero maps, which is the expected
//! starting point (the output head is zero-initialized).
//!
//! Run with: cargo run --release --example target_sweep

use vrgan::eval::sweep_panel;
use vrgan::models::{ConditioningStats, GeneratorSpec, UNet};
use vrgan::toydata::{gen_toy_dataset, substream, ToyConfig};

fn main() -> vrgan::Result<()> {
    let toy = ToyConfig {
        image_size: 32,
        side_scale: 26.0,
        noise_sigma_px: 1.5,
        n_train: 16,
        n_val_pairs: 4,
        n_test_pairs: 4,
        seed: 5,
        ..ToyConfig::default()
    };
    let ds = gen_toy_dataset(&toy)?;
    let ys: Vec<f64> = ds.train.iter().map(|s| s.y).collect();
    let stats = ConditioningStats::from_targets(&ys)?;
    let spec = GeneratorSpec {
        depth: 4,
        base_channels: 8,
        image_size: 32,
        conditioned: true,
    };
    let unet = UNet::init(spec, &mut substream(0, 0x10))?;

    let pair = &ds.test[0];
    let y_primes = [0.3, 0.5, 0.7, 0.9];
    let result = sweep_panel(&unet, &pair.sample.image.data, pair.sample.y, &y_primes, &stats);

    for (yp, delta) in result.y_prime_list.iter().zip(&result.deltas) {
        let l1: f32 = delta.iter().map(|v| v.abs()).sum::<f32>() / delta.len() as f32;
        println!("y' = {yp:.2}: mean |delta| = {l1:.5}");
    }

    let dir = std::path::Path::new("target/example-out/target_sweep");
    result.save(dir)?;
    println!(
        "montage ({}x{}) and per-column maps written to {}",
        result.montage.width(),
        result.montage.height(),
        dir.display()
    );
    Ok(())
}

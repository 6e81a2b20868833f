//! Score predicted difference maps against ground truth with normalized
//! cross-correlation (NCC).
//!
//! NCC is invariant to affine intensity rescaling of either map, so it
//! measures whether the *shape* of the predicted change matches the ground
//! truth, not its absolute magnitude. A freshly initialized generator starts
//! from the identity counterfactual (all-zero map), which scores 0 by the
//! degenerate-input convention.
//!
//! Run with: cargo run --release --example evaluate_maps

use vrgan::eval::{evaluate_pairs, ncc, EvalPair, MapModel};
use vrgan::models::{ConditioningStats, GeneratorSpec, UNet};
use vrgan::toydata::{gen_toy_dataset, substream, ToyConfig};
use vrgan::ImageRaster;

fn main() -> vrgan::Result<()> {
    // NCC on hand-made rasters: identical shape scores 1, sign flip scores -1.
    let a = ImageRaster::new(ndarray::array![[1.0, 0.0], [0.0, -1.0]]);
    let b = ImageRaster::new(a.data.mapv(|v| 3.0 * v + 0.5));
    let c = ImageRaster::new(a.data.mapv(|v| -v));
    println!("ncc(a, 3a + 0.5) = {:+.4}", ncc(&a, &b)?);
    println!("ncc(a, -a)       = {:+.4}", ncc(&a, &c)?);

    // Evaluate an untrained generator over a batch of synthetic pairs.
    let toy = ToyConfig {
        image_size: 32,
        side_scale: 26.0,
        noise_sigma_px: 1.5,
        n_train: 16,
        n_val_pairs: 4,
        n_test_pairs: 8,
        seed: 11,
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
    let model = MapModel::Vrgan { unet: &unet, stats };

    let pairs: Vec<EvalPair> = ds.test.iter().map(EvalPair::from_toy).collect();
    let frag = evaluate_pairs(&model, &pairs)?;
    println!(
        "untrained {} model: mean NCC over {} test pairs = {:.4}",
        model.method(),
        frag.per_sample_ncc.len(),
        frag.mean_ncc
    );
    Ok(())
}

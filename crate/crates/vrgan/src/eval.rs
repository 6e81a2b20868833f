//! Normalized cross-correlation scoring, multi-seed aggregation and the
//! y'-sweep montage emitter.

use crate::error::{Error, Result};
use crate::models::{condition_batch, ConditioningStats, UNet};
use crate::nn::Bound;
use crate::autodiff::Tape;
use crate::raster::ImageRaster;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Zero-mean Pearson correlation of the flattened pixels. Returns 0 when
/// either raster is constant, so degenerate (e.g. zero-map) predictors score
/// 0 instead of failing the protocol.
pub fn ncc(a: &ImageRaster, b: &ImageRaster) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.data.dim()),
            got: format!("{:?}", b.data.dim()),
        });
    }
    let n = a.data.len() as f64;
    let ma = a.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Deterministic pairwise summation in index order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

/// One evaluation pair: preprocessed input, its target, the stored
/// counterfactual target and the expected effect map.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub image: Array2<f32>,
    pub y: f64,
    pub y_prime: f64,
    pub gt: Array2<f32>,
}

impl EvalPair {
    pub fn from_toy(p: &crate::toydata::ToyPair) -> Self {
        EvalPair {
            image: p.sample.image.data.clone(),
            y: p.sample.y,
            y_prime: p.y_prime,
            gt: p.gt_map.data.clone(),
        }
    }
}

/// A trained map producer: the conditioned VR generator or the unconditioned
/// baseline map generator.
pub enum MapModel<'a> {
    Vrgan {
        unet: &'a UNet,
        stats: ConditioningStats,
    },
    Baseline {
        unet: &'a UNet,
    },
}

impl<'a> MapModel<'a> {
    pub fn method(&self) -> &'static str {
        match self {
            MapModel::Vrgan { .. } => "vrgan",
            MapModel::Baseline { .. } => "vagan",
        }
    }

    /// Inference-mode difference map for one image. The baseline ignores the
    /// requested y/y' by construction (it has no conditioning pathway).
    pub fn delta_map(&self, image: &Array2<f32>, y: f64, y_prime: f64) -> Array2<f32> {
        let (h, w) = image.dim();
        let tape = Tape::new();
        let x = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, h, w]), image.iter().cloned().collect())
                .expect("image reshape"),
        );
        let delta = match self {
            MapModel::Vrgan { unet, stats } => {
                let b: Bound = unet.params.bind(&tape);
                let cond = condition_batch(&tape, &[y], &[y_prime], stats);
                unet.forward(&b, &x, Some(&cond))
            }
            MapModel::Baseline { unet } => {
                let b: Bound = unet.params.bind(&tape);
                unet.forward(&b, &x, None)
            }
        };
        let data = delta.value();
        Array2::from_shape_vec((h, w), data.iter().cloned().collect()).expect("delta reshape")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalFragment {
    pub per_sample_ncc: Vec<f64>,
    pub mean_ncc: f64,
}

/// Score a model over counterfactual pairs. Deterministic: inference mode,
/// stored y', pairwise index-order reduction.
pub fn evaluate_pairs(model: &MapModel, pairs: &[EvalPair]) -> Result<EvalFragment> {
    let mut per_sample = Vec::with_capacity(pairs.len());
    for p in pairs {
        let delta = model.delta_map(&p.image, p.y, p.y_prime);
        let score = ncc(
            &ImageRaster::new(delta),
            &ImageRaster::new(p.gt.clone()),
        )?;
        per_sample.push(score);
    }
    let mean = pairwise_mean(&per_sample);
    Ok(EvalFragment {
        per_sample_ncc: per_sample,
        mean_ncc: mean,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed_mean_ncc: Vec<f64>,
    pub failed_seeds: Vec<u64>,
    pub aggregate_mean: f64,
    pub aggregate_std: f64,
    /// Set when any seed failed and the aggregate covers a subset.
    pub partial: bool,
    pub per_sample_ncc: Vec<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("index,ncc\n");
        for (i, v) in self.per_sample_ncc.iter().enumerate() {
            out.push_str(&format!("{},{:.6}\n", i, v));
        }
        out
    }
}

/// Derive per-seed training seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z ^ (z >> 33)
}

/// Train-and-evaluate over `n_seeds` independently seeded runs; aggregate
/// mean and standard deviation of the per-seed mean NCC. Failed seeds are
/// recorded and excluded from the aggregate with a warning flag.
pub fn multi_seed<FSeed>(
    method: &str,
    config_hash: &str,
    master_seed: u64,
    n_seeds: usize,
    mut run: FSeed,
) -> Result<EvalReport>
where
    FSeed: FnMut(u64) -> Result<EvalFragment>,
{
    if n_seeds < 2 {
        return Err(Error::InvalidArgument(
            "multi-seed protocol requires n_seeds >= 2".into(),
        ));
    }
    let mut seeds = Vec::new();
    let mut means = Vec::new();
    let mut failed = Vec::new();
    let mut last_fragment: Option<EvalFragment> = None;
    for i in 0..n_seeds as u64 {
        let seed = derive_seed(master_seed, i);
        seeds.push(seed);
        match run(seed) {
            Ok(frag) => {
                means.push(frag.mean_ncc);
                last_fragment = Some(frag);
            }
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                failed.push(seed);
            }
        }
    }
    let mean = pairwise_mean(&means);
    let std = if means.len() > 1 {
        (means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / means.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        method: method.to_string(),
        config_hash: config_hash.to_string(),
        seeds,
        per_seed_mean_ncc: means,
        partial: !failed.is_empty(),
        failed_seeds: failed,
        aggregate_mean: mean,
        aggregate_std: std,
        per_sample_ncc: last_fragment.map(|f| f.per_sample_ncc).unwrap_or_default(),
    })
}

// ---------------------------------------------------------------------------
// Sweep panel
// ---------------------------------------------------------------------------

/// Raw per-column output of a y' sweep.
pub struct SweepResult {
    pub y_prime_list: Vec<f64>,
    pub deltas: Vec<Array2<f32>>,
    pub x_primes: Vec<Array2<f32>>,
    pub montage: image::GrayImage,
}

fn to_u8(v: f32, lo: f32, hi: f32) -> u8 {
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Two-row montage: top row difference maps on a fixed [-2,2] gray code
/// (gray = 0, white = +, black = -), bottom row x then each x'. The left
/// column is the original (top cell neutral gray).
pub fn sweep_panel(
    unet: &UNet,
    x: &Array2<f32>,
    y: f64,
    y_prime_list: &[f64],
    stats: &ConditioningStats,
) -> SweepResult {
    let (h, w) = x.dim();
    let cols = 1 + y_prime_list.len();
    let mut montage = image::GrayImage::new((cols * w) as u32, (2 * h) as u32);
    // left column: neutral top, original bottom
    for i in 0..h {
        for j in 0..w {
            montage.put_pixel(j as u32, i as u32, image::Luma([to_u8(0.0, -2.0, 2.0)]));
            montage.put_pixel(
                j as u32,
                (h + i) as u32,
                image::Luma([to_u8(x[(i, j)], -1.0, 1.0)]),
            );
        }
    }
    let model = MapModel::Vrgan {
        unet,
        stats: *stats,
    };
    let mut deltas = Vec::new();
    let mut x_primes = Vec::new();
    for (k, &yp) in y_prime_list.iter().enumerate() {
        let delta = model.delta_map(x, y, yp);
        let x_prime = x + &delta;
        let x_off = ((k + 1) * w) as u32;
        for i in 0..h {
            for j in 0..w {
                montage.put_pixel(
                    x_off + j as u32,
                    i as u32,
                    image::Luma([to_u8(delta[(i, j)], -2.0, 2.0)]),
                );
                montage.put_pixel(
                    x_off + j as u32,
                    (h + i) as u32,
                    image::Luma([to_u8(x_prime[(i, j)], -1.0, 1.0)]),
                );
            }
        }
        deltas.push(delta);
        x_primes.push(x_prime);
    }
    SweepResult {
        y_prime_list: y_prime_list.to_vec(),
        deltas,
        x_primes,
        montage,
    }
}

impl SweepResult {
    /// Montage PNG plus one raw raster per column.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let montage_path = dir.join("montage.png");
        self.montage
            .save_with_format(&montage_path, image::ImageFormat::Png)?;
        for (k, d) in self.deltas.iter().enumerate() {
            ImageRaster::new(d.clone()).save_png(&dir.join(format!("delta_{:02}.png", k)))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn r(data: Array2<f32>) -> ImageRaster {
        ImageRaster::new(data)
    }

    #[test]
    fn ncc_examples() {
        let a = r(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = r(array![[-1.0, 0.0], [0.0, -1.0]]);
        assert!((ncc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // hand Pearson: (1,0,0,1) vs (1,1,0,0) -> 0
        let b = r(array![[1.0, 1.0], [0.0, 0.0]]);
        assert!(ncc(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ncc_degenerate_and_mismatch() {
        let a = r(array![[1.0, 0.0], [0.0, 1.0]]);
        let flat = r(array![[0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(ncc(&a, &flat).unwrap(), 0.0);
        assert_eq!(ncc(&flat, &a).unwrap(), 0.0);
        let wrong = r(Array2::zeros((3, 2)));
        assert!(ncc(&a, &wrong).is_err());
    }

    #[test]
    fn ncc_affine_invariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = r(Array2::from_shape_fn((5, 5), |_| rng.gen::<f32>()));
            let b = r(Array2::from_shape_fn((5, 5), |_| rng.gen::<f32>()));
            let base = ncc(&a, &b).unwrap();
            let alpha = rng.gen::<f32>() + 0.1;
            let beta = rng.gen::<f32>() - 0.5;
            let scaled = r(a.data.mapv(|v| alpha * v + beta));
            assert!((ncc(&scaled, &b).unwrap() - base).abs() < 1e-6);
            let flipped = r(a.data.mapv(|v| -alpha * v + beta));
            assert!((ncc(&flipped, &b).unwrap() + base).abs() < 1e-6);
            // symmetry
            assert!((ncc(&b, &a).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_mean_is_order_stable() {
        let vals: Vec<f64> = (0..101).map(|i| (i as f64).sin()).collect();
        let m1 = pairwise_mean(&vals);
        let m2 = pairwise_mean(&vals);
        assert_eq!(m1, m2);
        let plain: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((m1 - plain).abs() < 1e-12);
    }

    #[test]
    fn derive_seed_distinct_and_stable() {
        let a = derive_seed(42, 0);
        assert_eq!(a, derive_seed(42, 0));
        assert_ne!(a, derive_seed(42, 1));
        assert_ne!(a, derive_seed(43, 0));
    }

    #[test]
    fn multi_seed_degenerate_repetition() {
        // identical per-seed results -> std 0
        let report = multi_seed("vrgan", "h", 1, 3, |_seed| {
            Ok(EvalFragment {
                per_sample_ncc: vec![0.5, 0.7],
                mean_ncc: 0.6,
            })
        })
        .unwrap();
        assert_eq!(report.aggregate_std, 0.0);
        assert!((report.aggregate_mean - 0.6).abs() < 1e-12);
        assert!(!report.partial);
        assert!(multi_seed("vrgan", "h", 1, 1, |_| unreachable!("not called")).is_err());
    }

    #[test]
    fn multi_seed_tolerates_failed_seed() {
        let mut calls = 0;
        let report = multi_seed("vrgan", "h", 7, 3, |_seed| {
            calls += 1;
            if calls == 2 {
                Err(crate::error::Error::Numerical("boom".into()))
            } else {
                Ok(EvalFragment {
                    per_sample_ncc: vec![0.4],
                    mean_ncc: 0.4,
                })
            }
        })
        .unwrap();
        assert_eq!(report.failed_seeds.len(), 1);
        assert_eq!(report.per_seed_mean_ncc.len(), 2);
        assert!(report.partial);
    }

    #[test]
    fn report_serialization_roundtrip() {
        let report = EvalReport {
            method: "vrgan".into(),
            config_hash: "abc".into(),
            seeds: vec![1, 2],
            per_seed_mean_ncc: vec![0.8, 0.9],
            failed_seeds: vec![],
            aggregate_mean: 0.85,
            aggregate_std: 0.05,
            partial: false,
            per_sample_ncc: vec![0.81, 0.89],
        };
        let json = report.to_json().unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.aggregate_mean, report.aggregate_mean);
        assert_eq!(back.seeds, report.seeds);
        assert_eq!(back.per_sample_ncc, report.per_sample_ncc);
    }
}

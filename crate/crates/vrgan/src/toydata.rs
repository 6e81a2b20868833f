//! Synthetic-squares benchmark: centered squares whose side length is
//! proportional to a Weibull-distributed target, superimposed with
//! Gaussian-filtered white noise, with exact analytic ground-truth effect
//! maps for counterfactual pairs.

use crate::error::{Error, Result};
use crate::raster::ImageRaster;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const REJECTION_CAP: u64 = 1_000_000;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ToyConfig {
    pub image_size: usize,
    pub weibull_shape: f64,
    pub weibull_scale: f64,
    /// Pixels of square side per unit of y.
    pub side_scale: f64,
    pub noise_sigma_px: f64,
    pub noise_amplitude: f64,
    pub class_threshold: f64,
    pub n_train: usize,
    pub n_val_pairs: usize,
    pub n_test_pairs: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            image_size: 224,
            weibull_shape: 7.0,
            weibull_scale: 0.75,
            side_scale: 200.0,
            noise_sigma_px: 4.0,
            noise_amplitude: 0.3,
            class_threshold: 0.7,
            n_train: 10_000,
            n_val_pairs: 5_325,
            n_test_pairs: 5_424,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be >= 16".into()));
        }
        if self.weibull_shape <= 0.0 || self.weibull_scale <= 0.0 {
            return Err(Error::Config("weibull parameters must be positive".into()));
        }
        // Clamped rendering stays inside the frame up to y_max = 1.1.
        if self.side_scale * 1.1 > (self.image_size - 2) as f64 {
            return Err(Error::Config(format!(
                "side_scale {} too large for image_size {}",
                self.side_scale, self.image_size
            )));
        }
        if self.class_threshold <= 0.0 || self.class_threshold >= self.weibull_scale * 1.5 {
            return Err(Error::Config(
                "class_threshold out of the usable range".into(),
            ));
        }
        if self.noise_sigma_px < 0.0 || self.noise_amplitude < 0.0 {
            return Err(Error::Config("noise parameters must be non-negative".into()));
        }
        Ok(())
    }

    /// Analytic CDF of the configured Weibull target distribution.
    pub fn weibull_cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            0.0
        } else {
            1.0 - (-(y / self.weibull_scale).powf(self.weibull_shape)).exp()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToySample {
    pub image: ImageRaster,
    pub y: f64,
    /// The content realization z; absent for datasets reloaded from disk.
    pub noise: Option<ImageRaster>,
    pub side_px: usize,
    pub seed_index: u64,
}

#[derive(Clone, Debug)]
pub struct ToyPair {
    pub sample: ToySample,
    pub y_prime: f64,
    pub gt_map: ImageRaster,
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub config: ToyConfig,
    pub train: Vec<ToySample>,
    pub val: Vec<ToyPair>,
    pub test: Vec<ToyPair>,
}

/// Inverse-CDF sample of Weibull(shape, scale): `scale * (-ln(1-u))^(1/shape)`.
pub fn sample_weibull(u: f64, shape: f64, scale: f64) -> Result<f64> {
    if !u.is_finite() || !(0.0..1.0).contains(&u) {
        return Err(Error::InvalidArgument(format!(
            "weibull variate u must be in [0,1), got {u}"
        )));
    }
    if shape <= 0.0 || scale <= 0.0 {
        return Err(Error::InvalidArgument(
            "weibull shape and scale must be positive".into(),
        ));
    }
    Ok(scale * (-(1.0 - u).ln()).powf(1.0 / shape))
}

/// Side length in pixels after proportional scaling and clamping.
pub fn side_px(y: f64, cfg: &ToyConfig) -> usize {
    let raw = (y * cfg.side_scale).round() as i64;
    raw.clamp(4, cfg.image_size as i64 - 2) as usize
}

/// Background -1, centered filled square of +1.
pub fn render_square(y: f64, cfg: &ToyConfig) -> Result<ImageRaster> {
    if y <= 0.0 || !y.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "square side target must be positive, got {y}"
        )));
    }
    let size = cfg.image_size;
    let side = side_px(y, cfg);
    let start = (size - side) / 2;
    let mut data = Array2::from_elem((size, size), -1.0f32);
    data.slice_mut(ndarray::s![start..start + side, start..start + side])
        .fill(1.0);
    Ok(ImageRaster::new(data))
}

/// Separable Gaussian blur with reflect padding.
fn gaussian_blur(field: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return field.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let ksum: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|v| v / ksum).collect();
    let (h, w) = field.dim();

    let reflect = |i: i64, n: i64| -> usize {
        let mut i = i;
        // reflect without repeating the edge sample (a b c -> b| a b c |b)
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * n - 2 - i;
            }
        }
        i as usize
    };

    let mut tmp = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let jj = reflect(j as i64 + ki as i64 - radius, w as i64);
                acc += field[(i, jj)] * kv;
            }
            tmp[(i, j)] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for j in 0..w {
        for i in 0..h {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let ii = reflect(i as i64 + ki as i64 - radius, h as i64);
                acc += tmp[(ii, j)] * kv;
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Gaussian-filtered white noise, recentred to zero mean and rescaled so the
/// empirical standard deviation equals `noise_amplitude` exactly.
pub fn make_noise(cfg: &ToyConfig, rng: &mut impl Rng) -> ImageRaster {
    let size = cfg.image_size;
    if cfg.noise_amplitude == 0.0 {
        // still consume the stream so sample content is seed-stable
        for _ in 0..size * size {
            let _: f32 = rng.sample(StandardNormal);
        }
        return ImageRaster::zeros(size, size);
    }
    let white = Array2::from_shape_fn((size, size), |_| rng.sample::<f32, _>(StandardNormal));
    let blurred = gaussian_blur(&white, cfg.noise_sigma_px);
    let mean = blurred.mean().unwrap();
    let centered = blurred.mapv(|v| v - mean);
    let std = (centered.iter().map(|v| v * v).sum::<f32>() / centered.len() as f32).sqrt();
    if std == 0.0 {
        return ImageRaster::zeros(size, size);
    }
    let scale = cfg.noise_amplitude as f32 / std;
    ImageRaster::new(centered.mapv(|v| v * scale))
}

/// Analytic expected effect map: `render(y') - render(y)`, values in
/// {-2, 0, +2}. The noise realization cancels by construction.
pub fn gt_effect_map(y: f64, y_prime: f64, cfg: &ToyConfig) -> Result<ImageRaster> {
    let a = render_square(y_prime, cfg)?;
    let b = render_square(y, cfg)?;
    Ok(ImageRaster::new(&a.data - &b.data))
}

/// Independent random substream for one (seed, domain, index) triple, so
/// generation order and parallelism cannot change the content.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    // splitmix64 of the combined key
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

fn gen_sample(cfg: &ToyConfig, seed_index: u64, rng: &mut ChaCha8Rng) -> Result<ToySample> {
    let y = sample_weibull(rng.gen::<f64>(), cfg.weibull_shape, cfg.weibull_scale)?;
    gen_sample_with_y(cfg, seed_index, y, rng)
}

fn gen_sample_with_y(
    cfg: &ToyConfig,
    seed_index: u64,
    y: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ToySample> {
    let clean = render_square(y, cfg)?;
    let noise = make_noise(cfg, rng);
    let image = ImageRaster::new(&clean.data + &noise.data);
    Ok(ToySample {
        image,
        y,
        noise: Some(noise),
        side_px: side_px(y, cfg),
        seed_index,
    })
}

fn draw_conditioned(
    rng: &mut ChaCha8Rng,
    cfg: &ToyConfig,
    keep_above: bool,
) -> Result<f64> {
    for _ in 0..REJECTION_CAP {
        let y = sample_weibull(rng.gen::<f64>(), cfg.weibull_shape, cfg.weibull_scale)?;
        if (y >= cfg.class_threshold) == keep_above {
            return Ok(y);
        }
    }
    Err(Error::Config(format!(
        "rejection sampling exceeded {REJECTION_CAP} draws; class_threshold {} is incompatible with Weibull({}, {})",
        cfg.class_threshold, cfg.weibull_shape, cfg.weibull_scale
    )))
}

fn gen_pair(cfg: &ToyConfig, seed_index: u64) -> Result<ToyPair> {
    let mut rng = substream(cfg.seed, seed_index);
    let y = draw_conditioned(&mut rng, cfg, true)?;
    let sample = gen_sample_with_y(cfg, seed_index, y, &mut rng)?;
    let y_prime = draw_conditioned(&mut rng, cfg, false)?;
    let gt_map = gt_effect_map(y, y_prime, cfg)?;
    Ok(ToyPair {
        sample,
        y_prime,
        gt_map,
    })
}

/// Generate the full benchmark: unconditioned training samples plus
/// validation/test counterfactual pairs with stored y' and analytic ground
/// truth. Deterministic given `cfg.seed`.
pub fn gen_toy_dataset(cfg: &ToyConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    let mut train = Vec::with_capacity(cfg.n_train);
    for i in 0..cfg.n_train as u64 {
        let mut rng = substream(cfg.seed, i);
        train.push(gen_sample(cfg, i, &mut rng)?);
    }
    let val_base = cfg.n_train as u64;
    let mut val = Vec::with_capacity(cfg.n_val_pairs);
    for i in 0..cfg.n_val_pairs as u64 {
        val.push(gen_pair(cfg, val_base + i)?);
    }
    let test_base = val_base + cfg.n_val_pairs as u64;
    let mut test = Vec::with_capacity(cfg.n_test_pairs);
    for i in 0..cfg.n_test_pairs as u64 {
        test.push(gen_pair(cfg, test_base + i)?);
    }
    Ok(ToyDataset {
        config: cfg.clone(),
        train,
        val,
        test,
    })
}

// ---------------------------------------------------------------------------
// On-disk layout: one directory per split, 16-bit PNGs plus a metadata CSV
// (filename, y, y_prime, gt_filename, seed_index), and a dataset manifest
// recording the full config.
// ---------------------------------------------------------------------------

pub const DATASET_MANIFEST: &str = "dataset_manifest.json";
const META_HEADER: &str = "filename,y,y_prime,gt_filename,seed_index";

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    config: ToyConfig,
    config_sha256: String,
}

pub fn config_hash(cfg: &ToyConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("config serializes");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

fn write_split(
    dir: &Path,
    samples: &[(&ToySample, Option<(f64, &ImageRaster)>)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = String::from(META_HEADER);
    meta.push('\n');
    for (i, (sample, pair_info)) in samples.iter().enumerate() {
        let fname = format!("{:06}.png", i);
        sample.image.save_png(&dir.join(&fname))?;
        match pair_info {
            Some((y_prime, gt)) => {
                let gt_name = format!("gt_{:06}.png", i);
                gt.save_png(&dir.join(&gt_name))?;
                meta.push_str(&format!(
                    "{},{},{},{},{}\n",
                    fname, sample.y, y_prime, gt_name, sample.seed_index
                ));
            }
            None => {
                meta.push_str(&format!("{},{},,,{}\n", fname, sample.y, sample.seed_index));
            }
        }
    }
    let meta_path = dir.join("meta.csv");
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

fn read_split(dir: &Path, cfg: &ToyConfig, want_pairs: bool) -> Result<Vec<(ToySample, Option<(f64, ImageRaster)>)>> {
    let meta_path = dir.join("meta.csv");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut out = Vec::new();
    for line in meta.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::InvalidInput(format!(
                "malformed metadata row in {}: {line}",
                meta_path.display()
            )));
        }
        let image = ImageRaster::load_png(&dir.join(cols[0]))?;
        let y: f64 = cols[1]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad y value: {}", cols[1])))?;
        let seed_index: u64 = cols[4]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad seed_index: {}", cols[4])))?;
        let sample = ToySample {
            image,
            y,
            noise: None,
            side_px: side_px(y, cfg),
            seed_index,
        };
        let pair = if want_pairs {
            let y_prime: f64 = cols[2]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad y_prime value: {}", cols[2])))?;
            let gt = ImageRaster::load_png(&dir.join(cols[3]))?;
            Some((y_prime, gt))
        } else {
            None
        };
        out.push((sample, pair));
    }
    Ok(out)
}

impl ToyDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = DatasetManifest {
            config: self.config.clone(),
            config_sha256: config_hash(&self.config),
        };
        let manifest_path = dir.join(DATASET_MANIFEST);
        fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest)? + "\n",
        )
        .map_err(|e| Error::io(&manifest_path, e))?;

        let train_rows: Vec<_> = self.train.iter().map(|s| (s, None)).collect();
        write_split(&dir.join("train"), &train_rows)?;
        let val_rows: Vec<_> = self
            .val
            .iter()
            .map(|p| (&p.sample, Some((p.y_prime, &p.gt_map))))
            .collect();
        write_split(&dir.join("val"), &val_rows)?;
        let test_rows: Vec<_> = self
            .test
            .iter()
            .map(|p| (&p.sample, Some((p.y_prime, &p.gt_map))))
            .collect();
        write_split(&dir.join("test"), &test_rows)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ToyDataset> {
        let manifest_path = dir.join(DATASET_MANIFEST);
        let manifest: DatasetManifest = serde_json::from_str(
            &fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        )?;
        if config_hash(&manifest.config) != manifest.config_sha256 {
            return Err(Error::CheckpointMismatch(format!(
                "dataset manifest hash mismatch in {}",
                manifest_path.display()
            )));
        }
        let cfg = manifest.config;
        let train = read_split(&dir.join("train"), &cfg, false)?
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        let to_pairs = |rows: Vec<(ToySample, Option<(f64, ImageRaster)>)>| -> Result<Vec<ToyPair>> {
            rows.into_iter()
                .map(|(sample, info)| {
                    let (y_prime, gt_map) = info.ok_or_else(|| {
                        Error::InvalidInput("pair split row without y_prime".into())
                    })?;
                    Ok(ToyPair {
                        sample,
                        y_prime,
                        gt_map,
                    })
                })
                .collect()
        };
        let val = to_pairs(read_split(&dir.join("val"), &cfg, true)?)?;
        let test = to_pairs(read_split(&dir.join("test"), &cfg, true)?)?;
        Ok(ToyDataset {
            config: cfg,
            train,
            val,
            test,
        })
    }

    pub fn manifest_hash(dir: &Path) -> Result<String> {
        let manifest_path = dir.join(DATASET_MANIFEST);
        let manifest: DatasetManifest = serde_json::from_str(
            &fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        )?;
        Ok(manifest.config_sha256)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ToyConfig {
        ToyConfig {
            image_size: 64,
            side_scale: 56.0,
            noise_sigma_px: 2.0,
            n_train: 8,
            n_val_pairs: 3,
            n_test_pairs: 3,
            seed: 11,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn weibull_fixed_point() {
        // u = 1 - 1/e is the inverse-CDF fixed point: y = scale
        let u = 1.0 - (-1.0f64).exp();
        let y = sample_weibull(u, 7.0, 0.75).unwrap();
        assert!((y - 0.75).abs() < 1e-12);
        assert_eq!(sample_weibull(0.0, 7.0, 0.75).unwrap(), 0.0);
        // median: 0.75 * (ln 2)^(1/7)
        let y = sample_weibull(0.5, 7.0, 0.75).unwrap();
        let oracle = 0.75 * (2.0f64.ln()).powf(1.0 / 7.0);
        assert!((y - oracle).abs() < 1e-12);
        assert!((y - 0.7117).abs() < 5e-4);
    }

    #[test]
    fn weibull_rejects_bad_u() {
        assert!(sample_weibull(1.0, 7.0, 0.75).is_err());
        assert!(sample_weibull(-0.1, 7.0, 0.75).is_err());
        assert!(sample_weibull(f64::NAN, 7.0, 0.75).is_err());
    }

    #[test]
    fn weibull_monotone_in_u() {
        let mut last = -1.0;
        for k in 0..100 {
            let y = sample_weibull(k as f64 / 100.0, 7.0, 0.75).unwrap();
            assert!(y > last || (k == 0 && y == 0.0));
            last = y;
        }
    }

    #[test]
    fn render_square_placement() {
        let cfg = ToyConfig::default();
        let img = render_square(0.75, &cfg).unwrap();
        // side 150 at rows/cols [37, 187)
        assert_eq!(side_px(0.75, &cfg), 150);
        assert_eq!(img.data[(36, 112)], -1.0);
        assert_eq!(img.data[(37, 37)], 1.0);
        assert_eq!(img.data[(186, 186)], 1.0);
        assert_eq!(img.data[(187, 112)], -1.0);
        let fg = img.data.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(fg, 150 * 150);
    }

    #[test]
    fn render_square_clamps_and_errors() {
        let cfg = ToyConfig::default();
        assert_eq!(side_px(0.001, &cfg), 4);
        assert_eq!(side_px(5.0, &cfg), cfg.image_size - 2);
        assert!(render_square(0.0, &cfg).is_err());
        assert!(render_square(-1.0, &cfg).is_err());
    }

    #[test]
    fn foreground_count_matches_side() {
        let cfg = small_cfg();
        for y in [0.3, 0.55, 0.7, 0.9, 1.05] {
            let img = render_square(y, &cfg).unwrap();
            let fg = img.data.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(fg, side_px(y, &cfg).pow(2));
        }
    }

    #[test]
    fn noise_is_normalized() {
        let cfg = small_cfg();
        let mut rng = substream(3, 0);
        let noise = make_noise(&cfg, &mut rng);
        assert!((noise.std() - cfg.noise_amplitude as f32).abs() < 1e-6);
        assert!(noise.mean().abs() < 0.01);
    }

    #[test]
    fn zero_amplitude_noise_is_zero() {
        let cfg = ToyConfig {
            noise_amplitude: 0.0,
            ..small_cfg()
        };
        let mut rng = substream(3, 0);
        let noise = make_noise(&cfg, &mut rng);
        assert!(noise.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blur_raises_lag1_autocorrelation() {
        // filtered noise must be smoother than white noise
        let cfg = small_cfg();
        let lag1 = |img: &ImageRaster| {
            let d = &img.data;
            let mut acc = 0.0;
            let mut n = 0usize;
            for i in 0..d.nrows() {
                for j in 0..d.ncols() - 1 {
                    acc += d[(i, j)] * d[(i, j + 1)];
                    n += 1;
                }
            }
            acc / n as f32 / (img.std() * img.std())
        };
        let mut filtered_mean = 0.0;
        let mut white_mean = 0.0;
        for s in 0..10u64 {
            let mut rng = substream(77, s);
            filtered_mean += lag1(&make_noise(&cfg, &mut rng));
            let white_cfg = ToyConfig {
                noise_sigma_px: 0.0,
                ..cfg.clone()
            };
            let mut rng = substream(78, s);
            white_mean += lag1(&make_noise(&white_cfg, &mut rng));
        }
        assert!(filtered_mean / 10.0 > white_mean / 10.0 + 0.5);
    }

    #[test]
    fn gt_map_values_and_antisymmetry() {
        let cfg = small_cfg();
        let m = gt_effect_map(0.6, 0.9, &cfg).unwrap();
        for &v in m.data.iter() {
            assert!(v == 0.0 || v == 2.0 || v == -2.0);
        }
        // growing square: +2 frame between the two squares
        assert!(m.data.iter().any(|&v| v == 2.0));
        assert!(!m.data.iter().any(|&v| v == -2.0));
        let rev = gt_effect_map(0.9, 0.6, &cfg).unwrap();
        assert_eq!(m.data, rev.data.mapv(|v| -v));
        let same = gt_effect_map(0.8, 0.8, &cfg).unwrap();
        assert!(same.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sample_decomposition_is_exact() {
        let cfg = small_cfg();
        let ds = gen_toy_dataset(&cfg).unwrap();
        for s in &ds.train {
            let clean = render_square(s.y, &cfg).unwrap();
            // image is bitwise clean + noise; subtracting noise again only
            // reintroduces one f32 rounding per pixel
            let sum = &clean.data + &s.noise.as_ref().unwrap().data;
            assert_eq!(s.image.data, sum);
            let recon = &s.image.data - &s.noise.as_ref().unwrap().data;
            for (r, c) in recon.iter().zip(clean.data.iter()) {
                assert!((r - c).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pairs_respect_threshold_protocol() {
        let cfg = small_cfg();
        let ds = gen_toy_dataset(&cfg).unwrap();
        for p in ds.val.iter().chain(ds.test.iter()) {
            assert!(p.sample.y >= cfg.class_threshold);
            assert!(p.y_prime < cfg.class_threshold);
            let expect = gt_effect_map(p.sample.y, p.y_prime, &cfg).unwrap();
            assert_eq!(p.gt_map.data, expect.data);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = gen_toy_dataset(&cfg).unwrap();
        let b = gen_toy_dataset(&cfg).unwrap();
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.y, y.y);
            assert_eq!(x.image.data, y.image.data);
        }
        for (x, y) in a.test.iter().zip(b.test.iter()) {
            assert_eq!(x.y_prime, y.y_prime);
        }
    }

    #[test]
    fn split_seed_indices_are_disjoint() {
        let cfg = small_cfg();
        let ds = gen_toy_dataset(&cfg).unwrap();
        let mut seen = std::collections::HashSet::new();
        for idx in ds
            .train
            .iter()
            .map(|s| s.seed_index)
            .chain(ds.val.iter().map(|p| p.sample.seed_index))
            .chain(ds.test.iter().map(|p| p.sample.seed_index))
        {
            assert!(seen.insert(idx), "duplicate seed_index {idx}");
        }
    }

    #[test]
    fn weibull_tail_mass_above_threshold() {
        // P(y >= 0.7) = exp(-(0.7/0.75)^7) ~ 0.5396
        let cfg = ToyConfig::default();
        let analytic = 1.0 - cfg.weibull_cdf(0.7);
        assert!((analytic - 0.5396).abs() < 0.001);
        let mut rng = substream(5, 0);
        let mut above = 0usize;
        let n = 20_000;
        for _ in 0..n {
            let y = sample_weibull(rng.gen::<f64>(), cfg.weibull_shape, cfg.weibull_scale).unwrap();
            assert!(y > 0.0);
            if y >= 0.7 {
                above += 1;
            }
        }
        let frac = above as f64 / n as f64;
        assert!((0.4..0.7).contains(&frac));
        assert!((frac - analytic).abs() < 0.02);
    }

    #[test]
    fn weibull_ks_statistic_small() {
        let cfg = ToyConfig::default();
        let n = 100_000;
        let mut rng = substream(6, 0);
        let mut ys: Vec<f64> = (0..n)
            .map(|_| {
                sample_weibull(rng.gen::<f64>(), cfg.weibull_shape, cfg.weibull_scale).unwrap()
            })
            .collect();
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0f64;
        for (i, y) in ys.iter().enumerate() {
            let f = cfg.weibull_cdf(*y);
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            ks = ks.max((f - lo).abs()).max((f - hi).abs());
        }
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn save_load_roundtrip() {
        let cfg = small_cfg();
        let ds = gen_toy_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = ToyDataset::load(dir.path()).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.val.len(), ds.val.len());
        for (a, b) in ds.test.iter().zip(back.test.iter()) {
            assert_eq!(a.y_prime, b.y_prime);
            // PNG code quantizes to 4/65535 steps; rare noise tails past
            // |v| = 2 are clamped by the fixed encoding range
            for (x, y) in a.sample.image.data.iter().zip(b.sample.image.data.iter()) {
                assert!((x - y).abs() < 4.0 / 65535.0 || x.abs() > 1.99);
            }
        }
    }
}

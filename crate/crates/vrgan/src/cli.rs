//! Command-line front end: dataset generation, training, evaluation,
//! multi-seed protocols, y'-sweep panels and standalone registration, all
//! recorded through run manifests.

use crate::baseline::{train_baseline, BaselineOutcome};
use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, multi_seed, sweep_panel, EvalPair, EvalReport, MapModel};
use crate::manifest::{claim_out_dir, RunManifest};
use crate::models::{ConditioningStats, Critic, Regressor, UNet};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::raster::ImageRaster;
use crate::toydata::{gen_toy_dataset, ToyDataset};
use crate::train::{history_csv, train_vrgan, TrainData, TrainOutcome};
use crate::xraydata::register_affine;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "vrgan",
    version,
    about = "Adversarial regression training for visual effect maps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic-squares benchmark dataset.
    GenToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Dataset directory produced by gen-toy.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// vrgan or vagan.
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Record that the run used the deterministic execution mode (all
        /// computation here is deterministic by construction).
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        force: bool,
    },
    /// Score a trained checkpoint against a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// val or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate across independently seeded runs.
    MultiSeed {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Existing dataset directory; generated from the config when
        /// omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        n_seeds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Render the y'-sweep montage for one input image.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image PNG (the dataset's 16-bit encoding).
        #[arg(long)]
        image: PathBuf,
        /// The image's observed target value.
        #[arg(long)]
        y: f64,
        /// Comma list ("0.3,0.5") or range syntax "start:end:count".
        #[arg(long)]
        y_prime: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Affine-register one grayscale image onto another.
    Register {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// Only the CPU backend exists; reject requests for anything else up front.
pub fn check_device_env() -> Result<()> {
    match std::env::var("VRGAN_DEVICE") {
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(v) => Err(Error::UnsupportedMethod(format!(
            "VRGAN_DEVICE={v} is not available in this build; only cpu is supported"
        ))),
        Err(_) => Ok(()),
    }
}

fn resolve_config(config: &Option<PathBuf>, preset: &Option<String>) -> Result<RunConfig> {
    match (config, preset) {
        (Some(path), _) => RunConfig::load(path),
        (None, Some(name)) => RunConfig::from_preset(name),
        (None, None) => Ok(RunConfig::toy_paper()),
    }
}

/// Expand "a,b,c" or "start:end:count" into a target list.
pub fn parse_y_prime_list(text: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::InvalidArgument(format!("bad y' list {text:?}: {m}"));
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("range syntax is start:end:count"));
        }
        let start: f64 = parts[0].parse().map_err(|_| bad("bad start"))?;
        let end: f64 = parts[1].parse().map_err(|_| bad("bad end"))?;
        let count: usize = parts[2].parse().map_err(|_| bad("bad count"))?;
        if count < 2 {
            return Err(bad("count must be at least 2"));
        }
        let step = (end - start) / (count - 1) as f64;
        return Ok((0..count).map(|k| start + step * k as f64).collect());
    }
    let vals: Result<Vec<f64>> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad("bad value")))
        .collect();
    let vals = vals?;
    if vals.is_empty() {
        return Err(bad("empty"));
    }
    Ok(vals)
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

/// A checkpoint read back into live models.
pub enum TrainedModel {
    Vrgan {
        gen: UNet,
        reg: Regressor,
        stats: ConditioningStats,
    },
    Vagan {
        gen: UNet,
        critic: Critic,
    },
}

impl TrainedModel {
    pub fn method(&self) -> Method {
        match self {
            TrainedModel::Vrgan { .. } => Method::Vrgan,
            TrainedModel::Vagan { .. } => Method::Vagan,
        }
    }

    pub fn map_model(&self) -> MapModel<'_> {
        match self {
            TrainedModel::Vrgan { gen, stats, .. } => MapModel::Vrgan {
                unet: gen,
                stats: *stats,
            },
            TrainedModel::Vagan { gen, .. } => MapModel::Baseline { unet: gen },
        }
    }
}

pub fn save_vrgan_checkpoint(
    path: &Path,
    outcome_state: &crate::train::VrganState,
    extra: serde_json::Value,
) -> Result<()> {
    let spec = serde_json::json!({
        "generator": outcome_state.gen.spec,
        "regressor": outcome_state.reg.spec,
        "stats": outcome_state.stats,
    });
    save_checkpoint(
        path,
        "vrgan",
        spec,
        extra,
        &[
            ("gen", &outcome_state.gen.params),
            ("reg", &outcome_state.reg.backbone.params),
            ("reg_buf", &outcome_state.reg.backbone.buffers),
        ],
    )
}

pub fn save_vagan_checkpoint(
    path: &Path,
    state: &crate::baseline::BaselineState,
    extra: serde_json::Value,
) -> Result<()> {
    let spec = serde_json::json!({
        "generator": state.map_gen.spec,
        "critic": state.critic.spec,
    });
    save_checkpoint(
        path,
        "vagan",
        spec,
        extra,
        &[
            ("gen", &state.map_gen.params),
            ("critic", &state.critic.backbone.params),
            ("critic_buf", &state.critic.backbone.buffers),
        ],
    )
}

pub fn load_trained_model(path: &Path) -> Result<TrainedModel> {
    let (header, mut groups) = load_checkpoint(path)?;
    if crate::nn::spec_hash(&header.spec) != header.spec_sha256 {
        return Err(Error::CheckpointMismatch(
            "checkpoint spec hash does not match its content".into(),
        ));
    }
    let mut take = |name: &str| groups.shift_remove(name).unwrap_or_default();
    // weights initialized per spec, then replaced wholesale from the archive
    let mut rng = crate::toydata::substream(0, 0);
    match header.method.as_str() {
        "vrgan" => {
            let gen_spec = serde_json::from_value(header.spec["generator"].clone())?;
            let reg_spec = serde_json::from_value(header.spec["regressor"].clone())?;
            let stats: ConditioningStats = serde_json::from_value(header.spec["stats"].clone())?;
            let mut gen = UNet::init(gen_spec, &mut rng)?;
            gen.params.load_from(take("gen"))?;
            let mut reg = Regressor::init(reg_spec, &mut rng);
            reg.backbone.params.load_from(take("reg"))?;
            reg.backbone.buffers.load_from(take("reg_buf"))?;
            Ok(TrainedModel::Vrgan { gen, reg, stats })
        }
        "vagan" => {
            let gen_spec = serde_json::from_value(header.spec["generator"].clone())?;
            let critic_spec = serde_json::from_value(header.spec["critic"].clone())?;
            let mut gen = UNet::init(gen_spec, &mut rng)?;
            gen.params.load_from(take("gen"))?;
            let mut critic = Critic::init(critic_spec, &mut rng);
            critic.backbone.params.load_from(take("critic"))?;
            critic.backbone.buffers.load_from(take("critic_buf"))?;
            Ok(TrainedModel::Vagan { gen, critic })
        }
        other => Err(Error::UnsupportedMethod(format!(
            "unknown checkpoint method {other}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn cmd_gen_toy(
    config: &Option<PathBuf>,
    preset: &Option<String>,
    out: &Path,
    seed: Option<u64>,
    n_train: Option<usize>,
    force: bool,
) -> Result<()> {
    let mut cfg = resolve_config(config, preset)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = n_train {
        cfg.toy.n_train = n;
    }
    cfg.validate()?;
    claim_out_dir(out, force)?;
    let ds = gen_toy_dataset(&cfg.toy)?;
    ds.save(out)?;
    let mut manifest = RunManifest::new(
        &format!("gen-toy --out {}", out.display()),
        &cfg,
        Some(ToyDataset::manifest_hash(out)?),
        true,
    )?;
    manifest.push_artifact("dataset_manifest.json");
    manifest.save(out)?;
    log::info!(
        "wrote {} train / {} val / {} test to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

/// Train either method and write best/last checkpoints plus the history CSV.
pub fn cmd_train(
    config: &Option<PathBuf>,
    preset: &Option<String>,
    data: &Path,
    out: &Path,
    method: Option<Method>,
    seed: Option<u64>,
    max_epochs: Option<usize>,
    deterministic: bool,
    force: bool,
) -> Result<()> {
    let mut cfg = resolve_config(config, preset)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(e) = max_epochs {
        cfg.train.max_epochs = e;
        cfg.baseline.max_epochs = e;
    }
    cfg.validate()?;
    let ds = ToyDataset::load(data)?;
    let dataset_hash = ToyDataset::manifest_hash(data)?;
    claim_out_dir(out, force)?;
    let train_data = TrainData::from_toy(&ds);
    let mut manifest = RunManifest::new(
        &format!(
            "train --data {} --out {} --method {}",
            data.display(),
            out.display(),
            cfg.method
        ),
        &cfg,
        Some(dataset_hash),
        deterministic,
    )?;
    match cfg.method {
        Method::Vrgan => {
            let TrainOutcome {
                state,
                history,
                best_epoch,
                best_val_ncc,
            } = train_vrgan(
                &cfg.train,
                cfg.model.generator.clone(),
                cfg.model.regressor.clone(),
                &train_data,
            )?;
            std::fs::write(out.join("history.csv"), history_csv(&history))
                .map_err(|e| Error::io(out, e))?;
            let extra = serde_json::json!({
                "best_epoch": best_epoch,
                "best_val_ncc": best_val_ncc,
            });
            save_vrgan_checkpoint(&out.join("best.ckpt"), &state, extra.clone())?;
            save_vrgan_checkpoint(&out.join("last.ckpt"), &state, extra)?;
        }
        Method::Vagan => {
            let BaselineOutcome {
                state,
                history,
                best_epoch,
                best_val_ncc,
            } = train_baseline(
                &cfg.baseline,
                cfg.model.generator.clone(),
                cfg.model.critic.clone(),
                &train_data,
            )?;
            std::fs::write(
                out.join("history.csv"),
                crate::baseline::baseline_history_csv(&history),
            )
            .map_err(|e| Error::io(out, e))?;
            let extra = serde_json::json!({
                "best_epoch": best_epoch,
                "best_val_ncc": best_val_ncc,
            });
            save_vagan_checkpoint(&out.join("best.ckpt"), &state, extra.clone())?;
            save_vagan_checkpoint(&out.join("last.ckpt"), &state, extra)?;
        }
    }
    for artifact in ["history.csv", "best.ckpt", "last.ckpt"] {
        manifest.push_artifact(artifact);
    }
    manifest.save(out)?;
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    split: &str,
    force: bool,
) -> Result<()> {
    let model = load_trained_model(checkpoint)?;
    let ds = ToyDataset::load(data)?;
    let pairs: Vec<EvalPair> = match split {
        "val" => ds.val.iter().map(EvalPair::from_toy).collect(),
        "test" => ds.test.iter().map(EvalPair::from_toy).collect(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split {other}; expected val or test"
            )))
        }
    };
    claim_out_dir(out, force)?;
    let frag = evaluate_pairs(&model.map_model(), &pairs)?;
    let report = EvalReport {
        method: model.method().to_string(),
        config_hash: ToyDataset::manifest_hash(data)?,
        seeds: vec![],
        per_seed_mean_ncc: vec![frag.mean_ncc],
        failed_seeds: vec![],
        aggregate_mean: frag.mean_ncc,
        aggregate_std: 0.0,
        partial: false,
        per_sample_ncc: frag.per_sample_ncc,
    };
    std::fs::write(out.join("report.json"), report.to_json()?)
        .map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("per_sample.csv"), report.per_sample_csv())
        .map_err(|e| Error::io(out, e))?;
    let cfg = RunConfig::toy_paper(); // manifests embed a config; eval has none beyond the dataset
    let mut manifest = RunManifest::new(
        &format!(
            "eval --checkpoint {} --data {} --split {split}",
            checkpoint.display(),
            data.display()
        ),
        &cfg,
        Some(report.config_hash.clone()),
        true,
    )?;
    manifest.push_artifact("report.json");
    manifest.push_artifact("per_sample.csv");
    manifest.save(out)?;
    log::info!("mean NCC over {split}: {:.4}", report.aggregate_mean);
    Ok(())
}

/// Train-and-evaluate one method on one dataset across derived seeds.
pub fn run_multi_seed(
    cfg: &RunConfig,
    ds: &ToyDataset,
    n_seeds: usize,
    master_seed: u64,
) -> Result<EvalReport> {
    let test_pairs: Vec<EvalPair> = ds.test.iter().map(EvalPair::from_toy).collect();
    let train_data = TrainData::from_toy(ds);
    let config_hash = cfg.content_hash()?;
    multi_seed(
        &cfg.method.to_string(),
        &config_hash,
        master_seed,
        n_seeds,
        |seed| match cfg.method {
            Method::Vrgan => {
                let mut tc = cfg.train.clone();
                tc.seed = seed;
                let outcome = train_vrgan(
                    &tc,
                    cfg.model.generator.clone(),
                    cfg.model.regressor.clone(),
                    &train_data,
                )?;
                let model = MapModel::Vrgan {
                    unet: &outcome.state.gen,
                    stats: outcome.state.stats,
                };
                evaluate_pairs(&model, &test_pairs)
            }
            Method::Vagan => {
                let mut bc = cfg.baseline.clone();
                bc.seed = seed;
                let outcome = train_baseline(
                    &bc,
                    cfg.model.generator.clone(),
                    cfg.model.critic.clone(),
                    &train_data,
                )?;
                let model = MapModel::Baseline {
                    unet: &outcome.state.map_gen,
                };
                evaluate_pairs(&model, &test_pairs)
            }
        },
    )
}

pub fn cmd_multi_seed(
    config: &Option<PathBuf>,
    preset: &Option<String>,
    data: &Option<PathBuf>,
    out: &Path,
    method: Option<Method>,
    n_seeds: Option<usize>,
    seed: Option<u64>,
    force: bool,
) -> Result<()> {
    let mut cfg = resolve_config(config, preset)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    cfg.validate()?;
    let master_seed = seed.unwrap_or(cfg.train.seed);
    let n = n_seeds.unwrap_or(cfg.eval.n_seeds);
    let (ds, dataset_hash) = match data {
        Some(dir) => (ToyDataset::load(dir)?, Some(ToyDataset::manifest_hash(dir)?)),
        None => (gen_toy_dataset(&cfg.toy)?, None),
    };
    claim_out_dir(out, force)?;
    let report = run_multi_seed(&cfg, &ds, n, master_seed)?;
    std::fs::write(out.join("report.json"), report.to_json()?)
        .map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("per_sample.csv"), report.per_sample_csv())
        .map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::new(
        &format!(
            "multi-seed --out {} --n-seeds {n} --seed {master_seed}",
            out.display()
        ),
        &cfg,
        dataset_hash,
        true,
    )?;
    manifest.push_artifact("report.json");
    manifest.push_artifact("per_sample.csv");
    manifest.save(out)?;
    log::info!(
        "{} over {n} seeds: {:.4} +/- {:.4}",
        report.method,
        report.aggregate_mean,
        report.aggregate_std
    );
    Ok(())
}

pub fn cmd_sweep(
    checkpoint: &Path,
    image: &Path,
    y: f64,
    y_prime: &str,
    out: &Path,
    force: bool,
) -> Result<()> {
    let model = load_trained_model(checkpoint)?;
    let TrainedModel::Vrgan { gen, stats, .. } = model else {
        return Err(Error::UnsupportedMethod(
            "sweep requires a conditioned checkpoint; the baseline generator \
             has no target input and produces one fixed map per image"
                .into(),
        ));
    };
    let targets = parse_y_prime_list(y_prime)?;
    let raster = ImageRaster::load_png(image)?;
    claim_out_dir(out, force)?;
    let result = sweep_panel(&gen, &raster.data, y, &targets, &stats);
    result.save(out)?;
    let cfg = RunConfig::toy_paper();
    let mut manifest = RunManifest::new(
        &format!(
            "sweep --checkpoint {} --image {} --y {y} --y-prime {y_prime}",
            checkpoint.display(),
            image.display()
        ),
        &cfg,
        None,
        true,
    )?;
    manifest.push_artifact("montage.png");
    for k in 0..targets.len() {
        manifest.push_artifact(&format!("delta_{:02}.png", k));
    }
    manifest.save(out)?;
    Ok(())
}

pub fn cmd_register(reference: &Path, moving: &Path, out: &Path, force: bool) -> Result<()> {
    let reference_img = ImageRaster::load_png_raw01(reference)?;
    let moving_img = ImageRaster::load_png_raw01(moving)?;
    let reg = register_affine(&reference_img, &moving_img, 4)?;
    claim_out_dir(out, force)?;
    let diff = ImageRaster::new(&reg.aligned.data - &reference_img.data);
    reg.aligned.save_png(&out.join("aligned.png"))?;
    diff.save_png(&out.join("difference.png"))?;
    let transform_json = serde_json::json!({
        "parameters": reg.transform.p,
        "final_mse": reg.final_mse,
        "converged": reg.converged,
    });
    std::fs::write(
        out.join("transform.json"),
        serde_json::to_string_pretty(&transform_json)? + "\n",
    )
    .map_err(|e| Error::io(out, e))?;
    let cfg = RunConfig::toy_paper();
    let mut manifest = RunManifest::new(
        &format!(
            "register --reference {} --moving {} (converged: {})",
            reference.display(),
            moving.display(),
            reg.converged
        ),
        &cfg,
        None,
        true,
    )?;
    for artifact in ["aligned.png", "difference.png", "transform.json"] {
        manifest.push_artifact(artifact);
    }
    manifest.save(out)?;
    if !reg.converged {
        log::warn!("registration did not converge; outputs written anyway");
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    check_device_env()?;
    match &cli.command {
        Command::GenToy {
            config,
            preset,
            out,
            seed,
            n_train,
            force,
        } => cmd_gen_toy(config, preset, out, *seed, *n_train, *force),
        Command::Train {
            config,
            preset,
            data,
            out,
            method,
            seed,
            max_epochs,
            deterministic,
            force,
        } => cmd_train(
            config,
            preset,
            data,
            out,
            *method,
            *seed,
            *max_epochs,
            *deterministic,
            *force,
        ),
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
            force,
        } => cmd_eval(checkpoint, data, out, split, *force),
        Command::MultiSeed {
            config,
            preset,
            data,
            out,
            method,
            n_seeds,
            seed,
            force,
        } => cmd_multi_seed(config, preset, data, out, *method, *n_seeds, *seed, *force),
        Command::Sweep {
            checkpoint,
            image,
            y,
            y_prime,
            out,
            force,
        } => cmd_sweep(checkpoint, image, *y, y_prime, out, *force),
        Command::Register {
            reference,
            moving,
            out,
            force,
        } => cmd_register(reference, moving, out, *force),
    }
}

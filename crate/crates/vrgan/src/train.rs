//! The four loss terms and the alternating two-player training loop:
//! a regressor step that learns to undo the generator's edits, then a
//! generator step that learns edits the regressor accepts as real changes.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, pairwise_mean, EvalPair, MapModel};
use crate::models::{
    condition_batch, counterfactual, ConditioningStats, GeneratorSpec, Regressor, RegressorSpec,
    UNet,
};
use crate::nn::{gradients, Adam, AdamConfig, ParamSet};
use crate::toydata::{sample_weibull, ToyDataset};
use ndarray::{Array2, ArrayD, IxDyn, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Loss kernels
// ---------------------------------------------------------------------------

/// Mean absolute difference over a batch of predictions and targets.
pub fn l1_mean<F: NdFloat>(pred: &Var<F>, target: &Var<F>) -> Result<Var<F>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", target.shape()),
            got: format!("{:?}", pred.shape()),
        });
    }
    if pred.data().is_empty() {
        return Err(Error::InvalidArgument(
            "loss over an empty batch is undefined".into(),
        ));
    }
    Ok(pred.sub(target).abs().mean_all())
}

/// Regression fidelity on real inputs: |R(x) - y|.
pub fn loss_rx<F: NdFloat>(pred_x: &Var<F>, y: &Var<F>) -> Result<Var<F>> {
    l1_mean(pred_x, y)
}

/// Adversarial recovery on edited inputs: |R(x') - y|. Drives the regressor
/// to see through the generator's edit.
pub fn loss_rxp<F: NdFloat>(pred_x_prime: &Var<F>, y: &Var<F>) -> Result<Var<F>> {
    l1_mean(pred_x_prime, y)
}

/// Counterfactual target loss: |R(x') - y'|. Drives the generator to make
/// edits that read as the requested target value.
pub fn loss_gxp<F: NdFloat>(pred_x_prime: &Var<F>, y_prime: &Var<F>) -> Result<Var<F>> {
    l1_mean(pred_x_prime, y_prime)
}

/// Map magnitude regularizer: mean |delta x| over batch and pixels, keeping
/// edits minimal.
pub fn loss_reg<F: NdFloat>(delta: &Var<F>) -> Result<Var<F>> {
    if delta.data().is_empty() {
        return Err(Error::InvalidArgument(
            "loss over an empty batch is undefined".into(),
        ));
    }
    Ok(delta.abs().mean_all())
}

// ---------------------------------------------------------------------------
// Counterfactual target sampling
// ---------------------------------------------------------------------------

/// Where counterfactual targets y' come from: the analytic benchmark
/// distribution, or resampling of the observed training targets.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum TargetDistribution {
    Weibull { shape: f64, scale: f64 },
    Empirical(Vec<f64>),
}

impl TargetDistribution {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        match self {
            TargetDistribution::Weibull { shape, scale } => {
                sample_weibull(rng.gen::<f64>(), *shape, *scale)
            }
            TargetDistribution::Empirical(values) => {
                if values.is_empty() {
                    return Err(Error::InvalidArgument(
                        "empirical target distribution has no values".into(),
                    ));
                }
                Ok(values[rng.gen_range(0..values.len())])
            }
        }
    }

    pub fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

// ---------------------------------------------------------------------------
// Configuration and state
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct VrganLambdas {
    #[serde(rename = "lambda_gx")]
    pub gx: f64,
    #[serde(rename = "lambda_reg")]
    pub reg: f64,
    #[serde(rename = "lambda_rx")]
    pub rx: f64,
    #[serde(rename = "lambda_rxp")]
    pub rxp: f64,
}

impl Default for VrganLambdas {
    fn default() -> Self {
        VrganLambdas {
            gx: 0.3,
            reg: 0.03,
            rx: 1.0,
            rxp: 0.3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambdas: VrganLambdas,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation NCC.
    pub early_stop_patience: usize,
    /// Regressor steps per generator step.
    pub alternation: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: VrganLambdas::default(),
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 60,
            early_stop_patience: 10,
            alternation: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.early_stop_patience < 1 || self.alternation < 1 || self.batch_size < 1 {
            return Err(Error::Config(
                "early_stop_patience, alternation and batch_size must be at least 1".into(),
            ));
        }
        let l = &self.lambdas;
        if l.gx < 0.0 || l.reg < 0.0 || l.rx < 0.0 || l.rxp < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generator, regressor and their optimizers.
pub struct VrganState {
    pub gen: UNet,
    pub reg: Regressor,
    pub stats: ConditioningStats,
    pub opt_g: Adam,
    pub opt_r: Adam,
}

impl VrganState {
    pub fn init(
        gen_spec: GeneratorSpec,
        reg_spec: RegressorSpec,
        stats: ConditioningStats,
        adam: &AdamConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(VrganState {
            gen: UNet::init(gen_spec, rng)?,
            reg: Regressor::init(reg_spec, rng),
            stats,
            opt_g: Adam::new(adam.clone()),
            opt_r: Adam::new(adam.clone()),
        })
    }
}

/// Stack H x W images into an [N,1,H,W] batch tensor.
pub fn stack_images(images: &[&Array2<f32>]) -> Result<ArrayD<f32>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    let (h, w) = images[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), 1, h, w]));
    for (n, img) in images.iter().enumerate() {
        if img.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", (h, w)),
                got: format!("{:?}", img.dim()),
            });
        }
        for i in 0..h {
            for j in 0..w {
                out[[n, 0, i, j]] = img[(i, j)];
            }
        }
    }
    Ok(out)
}

fn targets_leaf(tape: &Tape<f32>, ys: &[f64]) -> Var<f32> {
    tape.leaf(ArrayD::from_shape_vec(IxDyn(&[ys.len()]), ys.iter().map(|&y| y as f32).collect())
        .expect("target leaf"))
}

fn finite_scalar(v: &Var<f32>, what: &str, epoch: usize, batch: usize) -> Result<f64> {
    let s = v.scalar_value() as f64;
    if !s.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite {what} at epoch {epoch}, batch {batch}"
        )));
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RStepMetrics {
    pub loss_rx: f64,
    pub loss_rxp: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GStepMetrics {
    pub loss_gxp: f64,
    pub loss_reg: f64,
}

/// One regressor update. The counterfactual is detached, so the generator
/// acts as a fixed data augmenter here; only regressor weights move.
pub fn r_step(
    state: &mut VrganState,
    x_batch: &ArrayD<f32>,
    ys: &[f64],
    y_primes: &[f64],
    lambdas: &VrganLambdas,
    epoch: usize,
    batch: usize,
) -> Result<RStepMetrics> {
    let tape = Tape::new();
    let gb = state.gen.params.bind(&tape);
    let rpb = state.reg.backbone.params.bind(&tape);
    let rbb = state.reg.backbone.buffers.bind(&tape);
    let x = tape.leaf(x_batch.clone());
    let cond = condition_batch(&tape, ys, y_primes, &state.stats);
    let (_, x_prime) = counterfactual(&state.gen, &gb, &x, Some(&cond));
    let x_prime = x_prime.detach();
    let pred_x = state.reg.forward(&rpb, &rbb, &x)?;
    let pred_xp = state.reg.forward(&rpb, &rbb, &x_prime)?;
    let y = targets_leaf(&tape, ys);
    let l_rx = loss_rx(&pred_x, &y)?;
    let l_rxp = loss_rxp(&pred_xp, &y)?;
    let total = l_rx.scale(lambdas.rx).add(&l_rxp.scale(lambdas.rxp));
    let metrics = RStepMetrics {
        loss_rx: finite_scalar(&l_rx, "regressor fidelity loss", epoch, batch)?,
        loss_rxp: finite_scalar(&l_rxp, "regressor recovery loss", epoch, batch)?,
    };
    let grads = gradients(&total, &rpb);
    state.opt_r.step(&mut state.reg.backbone.params, &grads);
    Ok(metrics)
}

/// One generator update. The regressor is differentiated through but left
/// untouched; only generator weights move.
pub fn g_step(
    state: &mut VrganState,
    x_batch: &ArrayD<f32>,
    ys: &[f64],
    y_primes: &[f64],
    lambdas: &VrganLambdas,
    epoch: usize,
    batch: usize,
) -> Result<GStepMetrics> {
    let tape = Tape::new();
    let gb = state.gen.params.bind(&tape);
    let rpb = state.reg.backbone.params.bind(&tape);
    let rbb = state.reg.backbone.buffers.bind(&tape);
    let x = tape.leaf(x_batch.clone());
    let cond = condition_batch(&tape, ys, y_primes, &state.stats);
    let (delta, x_prime) = counterfactual(&state.gen, &gb, &x, Some(&cond));
    let pred_xp = state.reg.forward(&rpb, &rbb, &x_prime)?;
    let yp = targets_leaf(&tape, y_primes);
    let l_gxp = loss_gxp(&pred_xp, &yp)?;
    let l_reg = loss_reg(&delta)?;
    let total = l_gxp.scale(lambdas.gx).add(&l_reg.scale(lambdas.reg));
    let metrics = GStepMetrics {
        loss_gxp: finite_scalar(&l_gxp, "counterfactual target loss", epoch, batch)?,
        loss_reg: finite_scalar(&l_reg, "map regularizer", epoch, batch)?,
    };
    let grads = gradients(&total, &gb);
    state.opt_g.step(&mut state.gen.params, &grads);
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Training inputs decoupled from their source dataset.
pub struct TrainData {
    pub train_images: Vec<Array2<f32>>,
    pub train_ys: Vec<f64>,
    pub val_pairs: Vec<EvalPair>,
    pub target_dist: TargetDistribution,
}

impl TrainData {
    pub fn from_toy(ds: &ToyDataset) -> Self {
        TrainData {
            train_images: ds.train.iter().map(|s| s.image.data.clone()).collect(),
            train_ys: ds.train.iter().map(|s| s.y).collect(),
            val_pairs: ds
                .val
                .iter()
                .map(|p| EvalPair {
                    image: p.sample.image.data.clone(),
                    y: p.sample.y,
                    y_prime: p.y_prime,
                    gt: p.gt_map.data.clone(),
                })
                .collect(),
            target_dist: TargetDistribution::Weibull {
                shape: ds.config.weibull_shape,
                scale: ds.config.weibull_scale,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_rx: f64,
    pub loss_rxp: f64,
    pub loss_gxp: f64,
    pub loss_reg: f64,
    pub val_ncc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss_rx,loss_rxp,loss_gxp,loss_reg,val_ncc\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.loss_rx, r.loss_rxp, r.loss_gxp, r.loss_reg, r.val_ncc
        ));
    }
    out
}

pub struct TrainOutcome {
    /// Final state with the best-validation weights restored.
    pub state: VrganState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ncc: f64,
}

/// Alternating training with early stopping on validation NCC. One regressor
/// step then one generator step per batch, both on the same counterfactual
/// target draw, so the two players see the same game.
pub fn train_vrgan(
    cfg: &TrainConfig,
    gen_spec: GeneratorSpec,
    reg_spec: RegressorSpec,
    data: &TrainData,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train_images.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let stats = ConditioningStats::from_targets(&data.train_ys)?;
    let mut rng_init = crate::toydata::substream(cfg.seed, 0x10);
    let mut rng_shuffle = crate::toydata::substream(cfg.seed, 0x11);
    let mut rng_targets = crate::toydata::substream(cfg.seed, 0x12);
    let mut state = VrganState::init(gen_spec, reg_spec, stats, &cfg.adam, &mut rng_init)?;

    let n = data.train_images.len();
    let mut history = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_gen: Option<ParamSet> = None;
    let mut best_reg: Option<ParamSet> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        // Fisher-Yates with the epoch's shuffle stream
        for i in (1..n).rev() {
            let j = rng_shuffle.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut rx = Vec::new();
        let mut rxp = Vec::new();
        let mut gxp = Vec::new();
        let mut reg = Vec::new();
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&Array2<f32>> =
                chunk.iter().map(|&i| &data.train_images[i]).collect();
            let x = stack_images(&images)?;
            let ys: Vec<f64> = chunk.iter().map(|&i| data.train_ys[i]).collect();
            let yps = data.target_dist.sample_batch(chunk.len(), &mut rng_targets)?;
            let mut rm = RStepMetrics::default();
            for _ in 0..cfg.alternation {
                rm = r_step(&mut state, &x, &ys, &yps, &cfg.lambdas, epoch, batch_idx)?;
            }
            let gm = g_step(&mut state, &x, &ys, &yps, &cfg.lambdas, epoch, batch_idx)?;
            rx.push(rm.loss_rx);
            rxp.push(rm.loss_rxp);
            gxp.push(gm.loss_gxp);
            reg.push(gm.loss_reg);
        }
        let model = MapModel::Vrgan {
            unet: &state.gen,
            stats: state.stats,
        };
        let val_ncc = if data.val_pairs.is_empty() {
            0.0
        } else {
            evaluate_pairs(&model, &data.val_pairs)?.mean_ncc
        };
        let record = EpochRecord {
            epoch,
            loss_rx: pairwise_mean(&rx),
            loss_rxp: pairwise_mean(&rxp),
            loss_gxp: pairwise_mean(&gxp),
            loss_reg: pairwise_mean(&reg),
            val_ncc,
        };
        log::info!(
            "epoch {}: rx {:.4} rxp {:.4} gxp {:.4} reg {:.4} val_ncc {:.4}",
            record.epoch,
            record.loss_rx,
            record.loss_rxp,
            record.loss_gxp,
            record.loss_reg,
            record.val_ncc
        );
        history.push(record);
        if val_ncc > best_val {
            best_val = val_ncc;
            best_epoch = epoch;
            best_gen = Some(state.gen.params.clone());
            best_reg = Some(state.reg.backbone.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    if let (Some(g), Some(r)) = (best_gen, best_reg) {
        state.gen.params = g;
        state.reg.backbone.params = r;
    }
    Ok(TrainOutcome {
        state,
        history,
        best_epoch,
        best_val_ncc: best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use crate::toydata::{gt_effect_map, render_square, ToyConfig};

    fn scalar_pair(tape: &Tape<f32>, pred: &[f32], target: &[f32]) -> (Var<f32>, Var<f32>) {
        let p = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[pred.len()]), pred.to_vec()).unwrap(),
        );
        let t = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[target.len()]), target.to_vec()).unwrap(),
        );
        (p, t)
    }

    #[test]
    fn l1_hand_examples() {
        let tape = Tape::new();
        // |0.5-0.7| and |0.9-0.7| average to 0.2
        let (p, t) = scalar_pair(&tape, &[0.5, 0.9], &[0.7, 0.7]);
        assert!((l1_mean(&p, &t).unwrap().scalar_value() - 0.2).abs() < 1e-7);
        // perfect prediction
        let (p, t) = scalar_pair(&tape, &[0.3, 0.8], &[0.3, 0.8]);
        assert_eq!(l1_mean(&p, &t).unwrap().scalar_value(), 0.0);
    }

    #[test]
    fn loss_reg_examples() {
        let tape = Tape::new();
        let flat = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 1, 4, 4]), 0.5f32));
        assert!((loss_reg(&flat).unwrap().scalar_value() - 0.5).abs() < 1e-7);
        let zero = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1, 4, 4])));
        assert_eq!(loss_reg(&zero).unwrap().scalar_value(), 0.0);
        let mixed = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 4]), vec![1.0f32, -1.0, 2.0, 0.0]).unwrap(),
        );
        assert!((loss_reg(&mixed).unwrap().scalar_value() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn l1_properties() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        for _ in 0..100 {
            let n = rng.gen_range(1..8);
            let a: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
            let b: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect();
            let (pa, pb) = scalar_pair(&tape, &a, &b);
            let fwd = l1_mean(&pa, &pb).unwrap().scalar_value();
            let rev = l1_mean(&pb, &pa).unwrap().scalar_value();
            assert!(fwd >= 0.0);
            assert_eq!(fwd, rev);
            // shifting both by a constant leaves the loss unchanged
            let c = rng.gen::<f32>();
            let (sa, sb) = scalar_pair(
                &tape,
                &a.iter().map(|v| v + c).collect::<Vec<_>>(),
                &b.iter().map(|v| v + c).collect::<Vec<_>>(),
            );
            assert!((l1_mean(&sa, &sb).unwrap().scalar_value() - fwd).abs() < 1e-5);
        }
    }

    #[test]
    fn l1_rejects_mismatch_and_empty() {
        let tape = Tape::new();
        let (p, _) = scalar_pair(&tape, &[0.5, 0.9], &[0.7, 0.7]);
        let (short, _) = scalar_pair(&tape, &[0.5], &[0.5]);
        assert!(l1_mean(&p, &short).is_err());
        let empty = tape.leaf(ArrayD::zeros(IxDyn(&[0])));
        assert!(l1_mean(&empty, &empty).is_err());
        assert!(loss_reg(&empty).is_err());
    }

    #[test]
    fn target_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dist = TargetDistribution::Weibull {
            shape: 7.0,
            scale: 0.75,
        };
        let draws = dist.sample_batch(2000, &mut rng).unwrap();
        assert!(draws.iter().all(|&y| y > 0.0 && y.is_finite()));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        // Weibull(7, 0.75) mean = 0.75 * Gamma(1 + 1/7) ~ 0.7014
        assert!((mean - 0.7014).abs() < 0.02, "mean {mean}");

        let emp = TargetDistribution::Empirical(vec![0.4, 0.9]);
        for _ in 0..50 {
            let v = emp.sample(&mut rng).unwrap();
            assert!(v == 0.4 || v == 0.9);
        }
        assert!(TargetDistribution::Empirical(vec![]).sample(&mut rng).is_err());

        // identical seeds give identical streams
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(
            dist.sample_batch(10, &mut r1).unwrap(),
            dist.sample_batch(10, &mut r2).unwrap()
        );
    }

    fn tiny_setup(seed: u64) -> (VrganState, ArrayD<f32>, Vec<f64>, Vec<f64>) {
        let gen_spec = GeneratorSpec {
            depth: 2,
            base_channels: 4,
            image_size: 16,
            conditioned: true,
        };
        let reg_spec = RegressorSpec {
            base_channels: 4,
            stem_stride: 1,
            bn_frozen: true,
        };
        let stats = ConditioningStats {
            mean_y: 0.7,
            std_y: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = VrganState::init(gen_spec, reg_spec, stats, &AdamConfig::default(), &mut rng)
            .unwrap();
        let cfg = ToyConfig {
            image_size: 16,
            side_scale: 12.0,
            ..ToyConfig::default()
        };
        let a = render_square(0.6, &cfg).unwrap().data;
        let b = render_square(0.9, &cfg).unwrap().data;
        let x = stack_images(&[&a, &b]).unwrap();
        (state, x, vec![0.6, 0.9], vec![0.8, 0.7])
    }

    #[test]
    fn r_step_touches_only_the_regressor() {
        let (mut state, x, ys, yps) = tiny_setup(1);
        let gen_before = state.gen.params.content_hash();
        let reg_before = state.reg.backbone.params.content_hash();
        let buf_before = state.reg.backbone.buffers.content_hash();
        let m = r_step(&mut state, &x, &ys, &yps, &VrganLambdas::default(), 0, 0).unwrap();
        assert!(m.loss_rx.is_finite() && m.loss_rxp.is_finite());
        assert_eq!(state.gen.params.content_hash(), gen_before);
        assert_ne!(state.reg.backbone.params.content_hash(), reg_before);
        assert_eq!(state.reg.backbone.buffers.content_hash(), buf_before);
    }

    #[test]
    fn g_step_touches_only_the_generator() {
        let (mut state, x, ys, yps) = tiny_setup(2);
        let gen_before = state.gen.params.content_hash();
        let reg_before = state.reg.backbone.params.content_hash();
        let m = g_step(&mut state, &x, &ys, &yps, &VrganLambdas::default(), 0, 0).unwrap();
        assert!(m.loss_gxp.is_finite() && m.loss_reg.is_finite());
        assert_ne!(state.gen.params.content_hash(), gen_before);
        assert_eq!(state.reg.backbone.params.content_hash(), reg_before);
    }

    #[test]
    fn alternating_steps_reduce_regressor_loss() {
        // a few R-only updates on a fixed two-sample batch must reduce |R(x)-y|
        let (mut state, x, ys, yps) = tiny_setup(3);
        let lambdas = VrganLambdas::default();
        let first = r_step(&mut state, &x, &ys, &yps, &lambdas, 0, 0).unwrap();
        let mut last = first;
        for i in 1..40 {
            last = r_step(&mut state, &x, &ys, &yps, &lambdas, 0, i).unwrap();
        }
        assert!(
            last.loss_rx < first.loss_rx,
            "loss_rx {} -> {}",
            first.loss_rx,
            last.loss_rx
        );
    }

    #[test]
    fn history_csv_format() {
        let rows = vec![EpochRecord {
            epoch: 0,
            loss_rx: 0.5,
            loss_rxp: 0.25,
            loss_gxp: 0.125,
            loss_reg: 0.0625,
            val_ncc: 0.875,
        }];
        let csv = history_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,loss_rx,loss_rxp,loss_gxp,loss_reg,val_ncc"
        );
        assert_eq!(
            lines.next().unwrap(),
            "0,0.500000,0.250000,0.125000,0.062500,0.875000"
        );
    }

    #[test]
    fn train_smoke_is_deterministic() {
        let cfg = ToyConfig {
            image_size: 16,
            side_scale: 12.0,
            noise_sigma_px: 2.0,
            n_train: 6,
            n_val_pairs: 2,
            n_test_pairs: 0,
            seed: 5,
            ..ToyConfig::default()
        };
        let ds = crate::toydata::gen_toy_dataset(&cfg).unwrap();
        let data = TrainData::from_toy(&ds);
        let tc = TrainConfig {
            batch_size: 3,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let gen_spec = GeneratorSpec {
            depth: 2,
            base_channels: 4,
            image_size: 16,
            conditioned: true,
        };
        let reg_spec = RegressorSpec {
            base_channels: 4,
            stem_stride: 1,
            bn_frozen: true,
        };
        let o1 = train_vrgan(&tc, gen_spec.clone(), reg_spec.clone(), &data).unwrap();
        let o2 = train_vrgan(&tc, gen_spec, reg_spec, &data).unwrap();
        assert_eq!(o1.history.len(), 2);
        assert_eq!(
            o1.state.gen.params.content_hash(),
            o2.state.gen.params.content_hash()
        );
        assert_eq!(
            o1.state.reg.backbone.params.content_hash(),
            o2.state.reg.backbone.params.content_hash()
        );
        assert_eq!(history_csv(&o1.history), history_csv(&o2.history));
        // ground truth maps line up with the data the trainer saw
        let p = &ds.val[0];
        let expect = gt_effect_map(p.sample.y, p.y_prime, &cfg).unwrap();
        assert_eq!(p.gt_map.data, expect.data);
    }
}

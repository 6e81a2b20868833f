//! The classification-conditioned baseline: an unconditioned map generator
//! trained against a gradient-penalty Wasserstein critic to move class-1
//! inputs (y >= threshold) toward class 0.

use crate::autodiff::{grad, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, pairwise_mean, MapModel};
use crate::models::{Critic, CriticSpec, GeneratorSpec, UNet};
use crate::nn::{gradients, Adam, AdamConfig, ParamSet};
use crate::train::{stack_images, TrainData};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// L1 weight on the produced map.
    pub map_lambda: f64,
    /// Gradient-penalty weight.
    pub gp_factor: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    /// Class boundary on y.
    pub threshold: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            map_lambda: 100.0,
            gp_factor: 10.0,
            critic_steps: 5,
            threshold: 0.7,
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 60,
            early_stop_patience: 10,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.map_lambda < 0.0 || self.gp_factor < 0.0 {
            return Err(Error::Config(
                "map_lambda and gp_factor must be non-negative".into(),
            ));
        }
        if self.critic_steps < 1 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Unconditioned map generator M and critic D with their optimizers.
pub struct BaselineState {
    pub map_gen: UNet,
    pub critic: Critic,
    pub opt_m: Adam,
    pub opt_d: Adam,
}

impl BaselineState {
    pub fn init(
        mut gen_spec: GeneratorSpec,
        critic_spec: CriticSpec,
        adam: &AdamConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // M has no target pathway: that is the structural difference under test
        gen_spec.conditioned = false;
        Ok(BaselineState {
            map_gen: UNet::init(gen_spec, rng)?,
            critic: Critic::init(critic_spec, rng),
            opt_m: Adam::new(adam.clone()),
            opt_d: Adam::new(adam.clone()),
        })
    }
}

/// Gradient penalty on per-pair interpolates: for eps ~ U(0,1) per pair,
/// x_hat = eps * x_real + (1 - eps) * x_fake, returns
/// mean((||d D/d x_hat||_2 - 1)^2). Built from tape nodes end to end, so it
/// stays differentiable w.r.t. the critic's weights.
pub fn gradient_penalty<D>(
    tape: &Tape<f32>,
    d: D,
    x_real: &Var<f32>,
    x_fake: &Var<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<Var<f32>>
where
    D: Fn(&Var<f32>) -> Var<f32>,
{
    let shape = x_real.shape();
    if shape != x_fake.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", shape),
            got: format!("{:?}", x_fake.shape()),
        });
    }
    let n = shape[0];
    if n == 0 {
        return Err(Error::InvalidArgument("empty gradient-penalty batch".into()));
    }
    let eps: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
    let eps = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[n]), eps).expect("eps leaf"));
    let one_minus = eps.neg().add_scalar(1.0);
    let x_hat = x_real
        .mul_per_sample(&eps)
        .add(&x_fake.mul_per_sample(&one_minus));
    let scores = d(&x_hat);
    let g = grad(&scores.sum_all(), &[&x_hat]).remove(0);
    if g.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "non-finite critic gradient in the penalty term".into(),
        ));
    }
    let norm = g
        .sqr()
        .sum_per_sample()
        .add_scalar(1e-12)
        .powf_const(0.5);
    Ok(norm.add_scalar(-1.0).sqr().mean_all())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CriticMetrics {
    /// D(real class 0) - D(edited class 1); the Wasserstein estimate.
    pub wasserstein: f64,
    pub penalty: f64,
    /// Minimized loss: -wasserstein + gp_factor * penalty.
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GeneratorMetrics {
    pub d_fake: f64,
    pub map_l1: f64,
    /// Minimized loss: -d_fake + map_lambda * map_l1.
    pub total: f64,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::Numerical(format!("non-finite {what}")));
    }
    Ok(v)
}

/// One critic update; the map generator is run detached and left untouched.
pub fn baseline_critic_step(
    state: &mut BaselineState,
    x_class1: &ArrayD<f32>,
    x_class0: &ArrayD<f32>,
    cfg: &BaselineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CriticMetrics> {
    if x_class1.shape()[0] == 0 || x_class0.shape()[0] == 0 {
        return Err(Error::InvalidArgument("empty class batch".into()));
    }
    if x_class1.shape() != x_class0.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x_class0.shape()),
            got: format!("{:?}", x_class1.shape()),
        });
    }
    let tape = Tape::new();
    let mb = state.map_gen.params.bind(&tape);
    let dpb = state.critic.backbone.params.bind(&tape);
    let dbb = state.critic.backbone.buffers.bind(&tape);
    let x1 = tape.leaf(x_class1.clone());
    let x0 = tape.leaf(x_class0.clone());
    let fake = x1.add(&state.map_gen.forward(&mb, &x1, None)).detach();
    let d_real = state.critic.forward(&dpb, &dbb, &x0).mean_all();
    let d_fake = state.critic.forward(&dpb, &dbb, &fake).mean_all();
    let penalty = gradient_penalty(
        &tape,
        |x| state.critic.forward(&dpb, &dbb, x),
        &x0,
        &fake,
        rng,
    )?;
    let wasserstein = d_real.sub(&d_fake);
    let loss = wasserstein.neg().add(&penalty.scale(cfg.gp_factor));
    let metrics = CriticMetrics {
        wasserstein: finite(wasserstein.scalar_value() as f64, "Wasserstein estimate")?,
        penalty: finite(penalty.scalar_value() as f64, "gradient penalty")?,
        total: finite(loss.scalar_value() as f64, "critic loss")?,
    };
    let grads = gradients(&loss, &dpb);
    state.opt_d.step(&mut state.critic.backbone.params, &grads);
    Ok(metrics)
}

/// One map-generator update; the critic is differentiated through but left
/// untouched.
pub fn baseline_generator_step(
    state: &mut BaselineState,
    x_class1: &ArrayD<f32>,
    cfg: &BaselineConfig,
) -> Result<GeneratorMetrics> {
    if x_class1.shape()[0] == 0 {
        return Err(Error::InvalidArgument("empty class batch".into()));
    }
    let tape = Tape::new();
    let mb = state.map_gen.params.bind(&tape);
    let dpb = state.critic.backbone.params.bind(&tape);
    let dbb = state.critic.backbone.buffers.bind(&tape);
    let x1 = tape.leaf(x_class1.clone());
    let map = state.map_gen.forward(&mb, &x1, None);
    let fake = x1.add(&map);
    let d_fake = state.critic.forward(&dpb, &dbb, &fake).mean_all();
    let map_l1 = map.abs().mean_all();
    let loss = d_fake.neg().add(&map_l1.scale(cfg.map_lambda));
    let metrics = GeneratorMetrics {
        d_fake: finite(d_fake.scalar_value() as f64, "critic score on edits")?,
        map_l1: finite(map_l1.scalar_value() as f64, "map L1")?,
        total: finite(loss.scalar_value() as f64, "generator loss")?,
    };
    let grads = gradients(&loss, &mb);
    state.opt_m.step(&mut state.map_gen.params, &grads);
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Endless shuffled cycling over an index pool.
struct PoolSampler {
    pool: Vec<usize>,
    cursor: usize,
}

impl PoolSampler {
    fn new(pool: Vec<usize>) -> Self {
        PoolSampler { pool, cursor: 0 }
    }

    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == 0 {
                for i in (1..self.pool.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    self.pool.swap(i, j);
                }
            }
            out.push(self.pool[self.cursor]);
            self.cursor = (self.cursor + 1) % self.pool.len();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BaselineEpochRecord {
    pub epoch: usize,
    pub loss_critic: f64,
    pub wasserstein: f64,
    pub loss_gen: f64,
    pub map_l1: f64,
    pub val_ncc: f64,
}

pub fn baseline_history_csv(history: &[BaselineEpochRecord]) -> String {
    let mut out = String::from("epoch,loss_critic,wasserstein,loss_gen,map_l1,val_ncc\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.loss_critic, r.wasserstein, r.loss_gen, r.map_l1, r.val_ncc
        ));
    }
    out
}

pub struct BaselineOutcome {
    pub state: BaselineState,
    pub history: Vec<BaselineEpochRecord>,
    pub best_epoch: usize,
    pub best_val_ncc: f64,
}

/// Partition, then alternate critic_steps critic updates per generator
/// update, with early stopping on validation NCC of M's maps.
pub fn train_baseline(
    cfg: &BaselineConfig,
    gen_spec: GeneratorSpec,
    critic_spec: CriticSpec,
    data: &TrainData,
) -> Result<BaselineOutcome> {
    cfg.validate()?;
    let class1: Vec<usize> = (0..data.train_ys.len())
        .filter(|&i| data.train_ys[i] >= cfg.threshold)
        .collect();
    let class0: Vec<usize> = (0..data.train_ys.len())
        .filter(|&i| data.train_ys[i] < cfg.threshold)
        .collect();
    if class1.is_empty() || class0.is_empty() {
        return Err(Error::Config(format!(
            "class pools are {} / {} at threshold {}; both must be non-empty",
            class1.len(),
            class0.len(),
            cfg.threshold
        )));
    }
    let updates_per_epoch = (class1.len() + cfg.batch_size - 1) / cfg.batch_size;
    let mut rng_init = crate::toydata::substream(cfg.seed, 0x20);
    let mut rng_pool = crate::toydata::substream(cfg.seed, 0x21);
    let mut rng_eps = crate::toydata::substream(cfg.seed, 0x22);
    let mut state = BaselineState::init(gen_spec, critic_spec, &cfg.adam, &mut rng_init)?;
    let mut pool1 = PoolSampler::new(class1);
    let mut pool0 = PoolSampler::new(class0);

    let batch = |idx: &[usize]| -> Result<ArrayD<f32>> {
        let images: Vec<&Array2<f32>> = idx.iter().map(|&i| &data.train_images[i]).collect();
        stack_images(&images)
    };

    let mut history = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_m: Option<ParamSet> = None;
    let mut best_d: Option<ParamSet> = None;
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut d_loss = Vec::new();
        let mut wass = Vec::new();
        let mut g_loss = Vec::new();
        let mut map_l1 = Vec::new();
        for _ in 0..updates_per_epoch {
            for _ in 0..cfg.critic_steps {
                let x1 = batch(&pool1.next_batch(cfg.batch_size, &mut rng_pool))?;
                let x0 = batch(&pool0.next_batch(cfg.batch_size, &mut rng_pool))?;
                let m = baseline_critic_step(&mut state, &x1, &x0, cfg, &mut rng_eps)?;
                d_loss.push(m.total);
                wass.push(m.wasserstein);
            }
            let x1 = batch(&pool1.next_batch(cfg.batch_size, &mut rng_pool))?;
            let m = baseline_generator_step(&mut state, &x1, cfg)?;
            g_loss.push(m.total);
            map_l1.push(m.map_l1);
        }
        let model = MapModel::Baseline {
            unet: &state.map_gen,
        };
        let val_ncc = if data.val_pairs.is_empty() {
            0.0
        } else {
            evaluate_pairs(&model, &data.val_pairs)?.mean_ncc
        };
        let record = BaselineEpochRecord {
            epoch,
            loss_critic: pairwise_mean(&d_loss),
            wasserstein: pairwise_mean(&wass),
            loss_gen: pairwise_mean(&g_loss),
            map_l1: pairwise_mean(&map_l1),
            val_ncc,
        };
        log::info!(
            "baseline epoch {}: d {:.4} w {:.4} g {:.4} l1 {:.4} val_ncc {:.4}",
            record.epoch,
            record.loss_critic,
            record.wasserstein,
            record.loss_gen,
            record.map_l1,
            record.val_ncc
        );
        history.push(record);
        if val_ncc > best_val {
            best_val = val_ncc;
            best_epoch = epoch;
            best_m = Some(state.map_gen.params.clone());
            best_d = Some(state.critic.backbone.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    if let (Some(m), Some(d)) = (best_m, best_d) {
        state.map_gen.params = m;
        state.critic.backbone.params = d;
    }
    Ok(BaselineOutcome {
        state,
        history,
        best_epoch,
        best_val_ncc: best_val,
    })
}

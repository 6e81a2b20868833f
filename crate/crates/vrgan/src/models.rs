//! Architecture specifications and forward contracts: the conditional U-Net
//! generator G, the residual regressor R and the baseline critic D.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{he_normal, zeros, Bound, ParamSet};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;

/// Conditioning normalization statistics, computed from the training split
/// only.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConditioningStats {
    pub mean_y: f64,
    pub std_y: f64,
}

impl ConditioningStats {
    pub fn from_targets(ys: &[f64]) -> Result<Self> {
        if ys.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot compute conditioning stats from an empty target list".into(),
            ));
        }
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 0.0 {
            return Err(Error::InvalidArgument(
                "conditioning std must be positive (degenerate target distribution)".into(),
            ));
        }
        Ok(ConditioningStats {
            mean_y: mean,
            std_y: std,
        })
    }
}

/// ((y - mean)/std, (y' - mean)/std, (y' - y)/std)
pub fn normalize_condition(y: f64, y_prime: f64, stats: &ConditioningStats) -> [f64; 3] {
    let s = stats.std_y;
    [
        (y - stats.mean_y) / s,
        (y_prime - stats.mean_y) / s,
        (y_prime - y) / s,
    ]
}

/// Batch of normalized condition rows as an [N,3] tape leaf.
pub fn condition_batch(
    tape: &Tape<f32>,
    ys: &[f64],
    y_primes: &[f64],
    stats: &ConditioningStats,
) -> Var<f32> {
    assert_eq!(ys.len(), y_primes.len());
    let mut data = ArrayD::zeros(IxDyn(&[ys.len(), 3]));
    for (i, (&y, &yp)) in ys.iter().zip(y_primes.iter()).enumerate() {
        let c = normalize_condition(y, yp, stats);
        for k in 0..3 {
            data[[i, k]] = c[k] as f32;
        }
    }
    tape.leaf(data)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorSpec {
    /// Encoder levels; input size must be divisible by 2^depth.
    pub depth: usize,
    pub base_channels: usize,
    pub image_size: usize,
    /// Three scalar channels broadcast at the bottleneck when true.
    pub conditioned: bool,
}

impl GeneratorSpec {
    pub fn for_input(image_size: usize) -> Self {
        GeneratorSpec {
            depth: if image_size >= 224 { 5 } else { 4 },
            base_channels: 32,
            image_size,
            conditioned: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.image_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 2^depth (depth {})",
                self.image_size, self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(256)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RegressorSpec {
    pub base_channels: usize,
    pub stem_stride: usize,
    /// Normalization affine parameters and running statistics excluded from
    /// training; statistics always run in inference mode.
    pub bn_frozen: bool,
}

impl Default for RegressorSpec {
    fn default() -> Self {
        RegressorSpec {
            base_channels: 64,
            stem_stride: 2,
            bn_frozen: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CriticSpec {
    pub base_channels: usize,
    pub stem_stride: usize,
}

impl Default for CriticSpec {
    fn default() -> Self {
        CriticSpec {
            base_channels: 64,
            stem_stride: 2,
        }
    }
}

// ---------------------------------------------------------------------------
// U-Net generator
// ---------------------------------------------------------------------------

/// U-Net with skip connections, bottleneck conditioning and a zero-initialized
/// 1x1 output head behind tanh x 2, so training starts from the identity
/// counterfactual.
#[derive(Clone, Debug)]
pub struct UNet {
    pub spec: GeneratorSpec,
    pub params: ParamSet,
}

fn conv_init(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    params.insert(&format!("{name}.w"), he_normal(rng, &[cout, cin, k, k], cin * k * k));
    params.insert(&format!("{name}.b"), zeros(&[cout]));
}

fn conv_fwd(b: &Bound, name: &str, x: &Var<f32>, stride: usize, pad: usize) -> Var<f32> {
    x.conv2d(&b.var(&format!("{name}.w")), stride, pad)
        .add_chan_bias(&b.var(&format!("{name}.b")))
}

impl UNet {
    pub fn init(spec: GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut cin = 1;
        for lvl in 0..spec.depth {
            let c = spec.level_channels(lvl);
            conv_init(&mut params, rng, &format!("enc{lvl}"), cin, c, 3);
            cin = c;
        }
        let cb = spec.level_channels(spec.depth);
        conv_init(&mut params, rng, "bottleneck_in", cin, cb, 3);
        let cond_extra = if spec.conditioned { 3 } else { 0 };
        conv_init(&mut params, rng, "bottleneck_out", cb + cond_extra, cb, 3);
        let mut cup = cb;
        for lvl in (0..spec.depth).rev() {
            let c = spec.level_channels(lvl);
            conv_init(&mut params, rng, &format!("dec{lvl}"), cup + c, c, 3);
            cup = c;
        }
        // identity start: zero-initialized output head
        let mut out = ParamSet::new();
        out.insert("head.w", zeros(&[1, cup, 1, 1]));
        out.insert("head.b", zeros(&[1]));
        for (name, arr) in out.iter() {
            params.insert(name, arr.clone());
        }
        Ok(UNet { spec, params })
    }

    /// Difference-map forward: x [N,1,H,W] (+ cond [N,3] when conditioned)
    /// -> delta x in (-2, 2), same shape as x.
    pub fn forward(&self, b: &Bound, x: &Var<f32>, cond: Option<&Var<f32>>) -> Var<f32> {
        let shape = x.shape();
        assert_eq!(shape[1], 1, "generator expects one input channel");
        assert_eq!(shape[2], self.spec.image_size, "generator input size mismatch");
        assert_eq!(
            self.spec.conditioned,
            cond.is_some(),
            "conditioning input presence must match the spec"
        );
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(self.spec.depth);
        for lvl in 0..self.spec.depth {
            h = conv_fwd(b, &format!("enc{lvl}"), &h, 1, 1).relu();
            skips.push(h.clone());
            h = h.avg_pool2();
        }
        h = conv_fwd(b, "bottleneck_in", &h, 1, 1).relu();
        if let Some(c) = cond {
            let hs = h.shape();
            let cmap = c.broadcast_spatial(hs[2], hs[3]);
            h = h.concat_chan(&cmap);
        }
        h = conv_fwd(b, "bottleneck_out", &h, 1, 1).relu();
        for lvl in (0..self.spec.depth).rev() {
            h = h.upsample2();
            h = skips[lvl].concat_chan(&h);
            h = conv_fwd(b, &format!("dec{lvl}"), &h, 1, 1).relu();
        }
        conv_fwd(b, "head", &h, 1, 0).tanh().scale(2.0)
    }
}

// ---------------------------------------------------------------------------
// Residual regressor (18 weight layers) and critic
// ---------------------------------------------------------------------------

const STAGE_BLOCKS: usize = 2;
const STAGES: usize = 4;

#[derive(Clone, Copy, PartialEq)]
enum Norm {
    Frozen,
    TrainableAffine,
    None,
}

/// Shared 18-layer residual backbone: stem conv, 4 stages of 2 basic blocks
/// (stride-2 entry from stage 1 on), global average pooling, linear head.
#[derive(Clone, Debug)]
pub struct ResNetBackbone {
    base_channels: usize,
    stem_stride: usize,
    norm_kind: u8,
    pub params: ParamSet,
    pub buffers: ParamSet,
}

fn bn_init(params: &mut ParamSet, buffers: &mut ParamSet, name: &str, c: usize, norm: Norm) {
    match norm {
        Norm::None => {}
        Norm::Frozen => {
            buffers.insert(&format!("{name}.gamma"), crate::nn::ones(&[c]));
            buffers.insert(&format!("{name}.beta"), zeros(&[c]));
            buffers.insert(&format!("{name}.mean"), zeros(&[c]));
            buffers.insert(&format!("{name}.var"), crate::nn::ones(&[c]));
        }
        Norm::TrainableAffine => {
            params.insert(&format!("{name}.gamma"), crate::nn::ones(&[c]));
            params.insert(&format!("{name}.beta"), zeros(&[c]));
            buffers.insert(&format!("{name}.mean"), zeros(&[c]));
            buffers.insert(&format!("{name}.var"), crate::nn::ones(&[c]));
        }
    }
}

impl ResNetBackbone {
    fn norm(&self) -> Norm {
        match self.norm_kind {
            0 => Norm::Frozen,
            1 => Norm::TrainableAffine,
            _ => Norm::None,
        }
    }

    fn init(
        base_channels: usize,
        stem_stride: usize,
        norm: Norm,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let c0 = base_channels;
        conv_init(&mut params, rng, "stem", 1, c0, 3);
        bn_init(&mut params, &mut buffers, "stem.bn", c0, norm);
        let mut cin = c0;
        for stage in 0..STAGES {
            let cout = c0 << stage;
            for block in 0..STAGE_BLOCKS {
                let name = format!("s{stage}b{block}");
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                let bin = if block == 0 { cin } else { cout };
                conv_init(&mut params, rng, &format!("{name}.conv1"), bin, cout, 3);
                bn_init(&mut params, &mut buffers, &format!("{name}.bn1"), cout, norm);
                conv_init(&mut params, rng, &format!("{name}.conv2"), cout, cout, 3);
                bn_init(&mut params, &mut buffers, &format!("{name}.bn2"), cout, norm);
                if stride != 1 || bin != cout {
                    conv_init(&mut params, rng, &format!("{name}.down"), bin, cout, 1);
                }
            }
            cin = cout;
        }
        let cf = c0 << (STAGES - 1);
        params.insert("fc.w", he_normal(rng, &[cf, 1], cf));
        params.insert("fc.b", zeros(&[1]));
        ResNetBackbone {
            base_channels,
            stem_stride,
            norm_kind: match norm {
                Norm::Frozen => 0,
                Norm::TrainableAffine => 1,
                Norm::None => 2,
            },
            params,
            buffers,
        }
    }

    /// Inference-mode normalization: a fixed per-channel affine computed from
    /// stored statistics. Never couples samples across the batch.
    fn apply_norm(&self, pb: &Bound, bb: &Bound, name: &str, x: &Var<f32>) -> Var<f32> {
        if self.norm() == Norm::None {
            return x.clone();
        }
        let affine_bound = match self.norm() {
            Norm::TrainableAffine => pb,
            _ => bb,
        };
        let gamma = affine_bound.var(&format!("{name}.gamma"));
        let beta = affine_bound.var(&format!("{name}.beta"));
        let mean = bb.var(&format!("{name}.mean"));
        let var = bb.var(&format!("{name}.var"));
        let inv_std = var.add_scalar(BN_EPS).powf_const(-0.5);
        let scale = gamma.mul(&inv_std);
        let shift = beta.sub(&mean.mul(&scale));
        let xs = x.shape();
        let scale_map = scale.broadcast_chan(xs[0], xs[2], xs[3]);
        let shift_map = shift.broadcast_chan(xs[0], xs[2], xs[3]);
        x.mul(&scale_map).add(&shift_map)
    }

    fn act(&self, x: &Var<f32>) -> Var<f32> {
        // the critic (no normalization) uses a leaky slope, standard for
        // gradient-penalty training
        if self.norm() == Norm::None {
            x.leaky_relu(0.2)
        } else {
            x.relu()
        }
    }

    /// Scalar batch output [N].
    pub fn forward(&self, pb: &Bound, bb: &Bound, x: &Var<f32>) -> Var<f32> {
        let mut h = conv_fwd(pb, "stem", x, self.stem_stride, 1);
        h = self.apply_norm(pb, bb, "stem.bn", &h);
        h = self.act(&h);
        let c0 = self.base_channels;
        let mut cin = c0;
        for stage in 0..STAGES {
            let cout = c0 << stage;
            for block in 0..STAGE_BLOCKS {
                let name = format!("s{stage}b{block}");
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                let bin = if block == 0 { cin } else { cout };
                let mut y = conv_fwd(pb, &format!("{name}.conv1"), &h, stride, 1);
                y = self.apply_norm(pb, bb, &format!("{name}.bn1"), &y);
                y = self.act(&y);
                y = conv_fwd(pb, &format!("{name}.conv2"), &y, 1, 1);
                y = self.apply_norm(pb, bb, &format!("{name}.bn2"), &y);
                let shortcut = if stride != 1 || bin != cout {
                    conv_fwd(pb, &format!("{name}.down"), &h, stride, 0)
                } else {
                    h.clone()
                };
                h = self.act(&y.add(&shortcut));
            }
            cin = cout;
        }
        let hs = h.shape();
        let pooled = h.sum_spatial().scale(1.0 / (hs[2] * hs[3]) as f64);
        pooled
            .matmul(&pb.var("fc.w"))
            .add_row_bias(&pb.var("fc.b"))
            .reshape(&[hs[0]])
    }
}

#[derive(Clone, Debug)]
pub struct Regressor {
    pub spec: RegressorSpec,
    pub backbone: ResNetBackbone,
}

impl Regressor {
    pub fn init(spec: RegressorSpec, rng: &mut ChaCha8Rng) -> Self {
        let norm = if spec.bn_frozen {
            Norm::Frozen
        } else {
            Norm::TrainableAffine
        };
        let backbone = ResNetBackbone::init(spec.base_channels, spec.stem_stride, norm, rng);
        Regressor { spec, backbone }
    }

    /// One finite scalar per image; surfaces the offending batch index on
    /// numerical failure.
    pub fn forward(&self, pb: &Bound, bb: &Bound, x: &Var<f32>) -> Result<Var<f32>> {
        let out = self.backbone.forward(pb, bb, x);
        {
            let data = out.data();
            for (i, v) in data.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite regressor output at batch index {i}"
                    )));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub spec: CriticSpec,
    pub backbone: ResNetBackbone,
}

impl Critic {
    pub fn init(spec: CriticSpec, rng: &mut ChaCha8Rng) -> Self {
        // no batch-dependent normalization: gradient-penalty validity
        let backbone = ResNetBackbone::init(spec.base_channels, spec.stem_stride, Norm::None, rng);
        Critic { spec, backbone }
    }

    pub fn forward(&self, pb: &Bound, bb: &Bound, x: &Var<f32>) -> Var<f32> {
        self.backbone.forward(pb, bb, x)
    }
}

/// x' = x + G(x, y', y); the additive counterfactual.
pub fn counterfactual(
    unet: &UNet,
    b: &Bound,
    x: &Var<f32>,
    cond: Option<&Var<f32>>,
) -> (Var<f32>, Var<f32>) {
    let delta = unet.forward(b, x, cond);
    let x_prime = x.add(&delta);
    (delta, x_prime)
}

//! A small trainable convolutional epsilon-predictor with hand-written
//! backpropagation — no ML framework underneath.
//!
//! Architecture (shape-preserving for inputs whose height and width divide
//! by 4), a minimal U-Net: two strided downsampling convs, two residual
//! blocks conditioned on the timestep, and two upsampling convs whose inputs
//! concatenate the matching encoder activation so per-pixel detail survives
//! the spatial bottleneck:
//!
//! ```text
//! x (3,H,W) -> conv/2 + silu ----------------> d1 (c1,H/2,W/2)
//! d1        -> conv/2 + silu ----------------> d2 (c2,H/4,W/4)
//! d2        -> 2 x resblock(t-embedding) ----> r  (c2,H/4,W/4)
//! [up2x(r) | d1] -> conv + silu -------------> u1 (c1,H/2,W/2)
//! [up2x(u1) | x] -> conv --------------------> eps_hat (3,H,W)
//! ```
//!
//! The final conv is zero-initialized so an untrained model predicts zero
//! noise and the initial loss sits near 1. All forward/backward code is
//! pure; training owns the only RNG and is bit-reproducible under a fixed
//! seed.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use layers::{timestep_embedding, Conv2d, Linear};

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffusion::{q_sample, standard_normal, DiffusionError, DiffusionSchedule, Scalar, Tensor};
use layers::{
    conv2d_backward, conv2d_forward, silu, silu_grad, upsample2, upsample2_backward, ConvGrads,
};

/// Base channel widths before the multiplier: (4, 8) scaled by
/// `width_mult`, so the default multiplier 4 gives the 16/32 stack.
const BASE_CHANNELS: (usize, usize) = (4, 8);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub width_mult: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            width_mult: 4,
            embed_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn channels(&self) -> (usize, usize) {
        (
            BASE_CHANNELS.0 * self.width_mult,
            BASE_CHANNELS.1 * self.width_mult,
        )
    }

    fn validate(&self) -> Result<(), DenoiserError> {
        if self.width_mult == 0 {
            return Err(DenoiserError::BadConfig("width_mult must be >= 1"));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(DenoiserError::BadConfig("embed_dim must be even and >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DenoiserError {
    #[error("bad denoiser config: {0}")]
    BadConfig(&'static str),
    #[error("input shape {0:?} unsupported: need (3, h, w) with h and w divisible by 4")]
    BadShape((usize, usize, usize)),
    #[error("timestep must be >= 1")]
    BadTimestep,
    #[error("upstream gradient shape {got:?} does not match the output shape {expected:?}")]
    UpstreamShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("dataset tensors have mixed shapes: {0:?} vs {1:?}")]
    MixedShapes((usize, usize, usize), (usize, usize, usize)),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("non-finite gradient in {tensor} at step {step}")]
    NonFiniteGradient { tensor: &'static str, step: usize },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// One residual block: conv, add projected timestep embedding per channel,
/// SiLU, conv, skip connection.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<F> {
    pub conv1: Conv2d<F>,
    pub emb: Linear<F>,
    pub conv2: Conv2d<F>,
}

/// Every trainable tensor of the network. The same struct doubles as the
/// gradient container, so the optimizer walks parameters and gradients in
/// lockstep through [`DenoiserParams::flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F> {
    pub config: DenoiserConfig,
    pub down1: Conv2d<F>,
    pub down2: Conv2d<F>,
    pub res1: ResBlock<F>,
    pub res2: ResBlock<F>,
    pub up1: Conv2d<F>,
    pub up2: Conv2d<F>,
}

impl<F: Scalar> DenoiserParams<F> {
    /// All tensors zeroed; the gradient container and the checkpoint
    /// loading target.
    pub fn zeros(config: DenoiserConfig) -> Result<Self, DenoiserError> {
        config.validate()?;
        let (c1, c2) = config.channels();
        let res = || ResBlock {
            conv1: Conv2d::zeros(c2, c2, 1),
            emb: Linear::zeros(c2, config.embed_dim),
            conv2: Conv2d::zeros(c2, c2, 1),
        };
        Ok(DenoiserParams {
            config,
            down1: Conv2d::zeros(c1, 3, 2),
            down2: Conv2d::zeros(c2, c1, 2),
            res1: res(),
            res2: res(),
            // decoder convs see the skip concatenation, hence the wider input
            up1: Conv2d::zeros(c1, c2 + c1, 1),
            up2: Conv2d::zeros(3, c1 + 3, 1),
        })
    }

    /// Kaiming-uniform (fan-in) weights, zero biases, and a zero-initialized
    /// output layer.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self, DenoiserError> {
        let mut params = Self::zeros(config)?;
        let init_conv = |conv: &mut Conv2d<F>, rng: &mut R| {
            let fan_in = conv.weight.dim().1 * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            conv.weight
                .mapv_inplace(|_| F::cast(rng.random_range(-bound..bound)));
        };
        init_conv(&mut params.down1, rng);
        init_conv(&mut params.down2, rng);
        for res in [&mut params.res1, &mut params.res2] {
            init_conv(&mut res.conv1, rng);
            init_conv(&mut res.conv2, rng);
            let bound = (6.0 / res.emb.weight.dim().1 as f64).sqrt();
            res.emb
                .weight
                .mapv_inplace(|_| F::cast(rng.random_range(-bound..bound)));
        }
        init_conv(&mut params.up1, rng);
        // up2 stays zero so the untrained prediction is zero noise
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("existing config already validated")
    }

    /// Parameter tensors as named flat slices, in a fixed serialization
    /// order shared by the optimizer, checkpoints and gradient checks.
    pub fn flat(&self) -> Vec<(&'static str, &[F])> {
        fn conv<'a, F>(names: [&'static str; 2], c: &'a Conv2d<F>) -> [(&'static str, &'a [F]); 2] {
            [
                (names[0], c.weight.as_slice().expect("standard layout")),
                (names[1], c.bias.as_slice().expect("standard layout")),
            ]
        }
        let mut out = Vec::with_capacity(20);
        out.extend(conv(["down1.weight", "down1.bias"], &self.down1));
        out.extend(conv(["down2.weight", "down2.bias"], &self.down2));
        for (res, names) in [(&self.res1, RES1_NAMES), (&self.res2, RES2_NAMES)] {
            out.extend(conv([names[0], names[1]], &res.conv1));
            out.push((names[2], res.emb.weight.as_slice().expect("standard layout")));
            out.push((names[3], res.emb.bias.as_slice().expect("standard layout")));
            out.extend(conv([names[4], names[5]], &res.conv2));
        }
        out.extend(conv(["up1.weight", "up1.bias"], &self.up1));
        out.extend(conv(["up2.weight", "up2.bias"], &self.up2));
        out
    }

    pub fn flat_mut(&mut self) -> Vec<(&'static str, &mut [F])> {
        fn conv<'a, F>(
            names: [&'static str; 2],
            c: &'a mut Conv2d<F>,
        ) -> [(&'static str, &'a mut [F]); 2] {
            let Conv2d { weight, bias, .. } = c;
            [
                (names[0], weight.as_slice_mut().expect("standard layout")),
                (names[1], bias.as_slice_mut().expect("standard layout")),
            ]
        }
        let mut out: Vec<(&'static str, &mut [F])> = Vec::with_capacity(20);
        out.extend(conv(["down1.weight", "down1.bias"], &mut self.down1));
        out.extend(conv(["down2.weight", "down2.bias"], &mut self.down2));
        for (res, names) in [(&mut self.res1, RES1_NAMES), (&mut self.res2, RES2_NAMES)] {
            let ResBlock { conv1, emb, conv2 } = res;
            out.extend(conv([names[0], names[1]], conv1));
            out.push((names[2], emb.weight.as_slice_mut().expect("standard layout")));
            out.push((names[3], emb.bias.as_slice_mut().expect("standard layout")));
            out.extend(conv([names[4], names[5]], conv2));
        }
        out.extend(conv(["up1.weight", "up1.bias"], &mut self.up1));
        out.extend(conv(["up2.weight", "up2.bias"], &mut self.up2));
        out
    }

    /// Deterministic total parameter count.
    pub fn param_count(&self) -> usize {
        self.flat().iter().map(|(_, s)| s.len()).sum()
    }

    /// Read one parameter by its global flat index.
    pub fn get_flat(&self, index: usize) -> F {
        let mut rest = index;
        for (_, slice) in self.flat() {
            if rest < slice.len() {
                return slice[rest];
            }
            rest -= slice.len();
        }
        panic!("flat index {index} out of range");
    }

    /// Add `delta` to one parameter by its global flat index.
    pub fn add_flat(&mut self, index: usize, delta: F) {
        let mut rest = index;
        for (_, slice) in self.flat_mut() {
            if rest < slice.len() {
                slice[rest] = slice[rest] + delta;
                return;
            }
            rest -= slice.len();
        }
        panic!("flat index {index} out of range");
    }
}

const RES1_NAMES: [&str; 6] = [
    "res1.conv1.weight",
    "res1.conv1.bias",
    "res1.emb.weight",
    "res1.emb.bias",
    "res1.conv2.weight",
    "res1.conv2.bias",
];
const RES2_NAMES: [&str; 6] = [
    "res2.conv1.weight",
    "res2.conv1.bias",
    "res2.emb.weight",
    "res2.emb.bias",
    "res2.conv2.weight",
    "res2.conv2.bias",
];

struct ResCache<F> {
    input: Tensor<F>,
    /// conv1 output plus the per-channel embedding, pre-activation.
    h1c: Tensor<F>,
    /// silu(h1c), the input of conv2.
    activated: Tensor<F>,
}

struct ForwardCache<F> {
    input: Tensor<F>,
    embedding: Array1<F>,
    d1_pre: Tensor<F>,
    d1: Tensor<F>,
    d2_pre: Tensor<F>,
    res1: ResCache<F>,
    res2: ResCache<F>,
    /// `[up2x(res2_out) | d1]`, input of the first decoder conv.
    u1_in: Tensor<F>,
    u1_pre: Tensor<F>,
    /// `[up2x(u1) | x]`, input of the output conv.
    u2_in: Tensor<F>,
    output: Tensor<F>,
}

/// Stack `a` over `b` along the channel axis.
fn concat_channels<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()])
        .expect("spatial dims match by construction")
}

/// Undo [`concat_channels`] on a gradient.
fn split_channels<F: Scalar>(t: &Tensor<F>, first: usize) -> (Tensor<F>, Tensor<F>) {
    let (a, b) = t.view().split_at(ndarray::Axis(0), first);
    (a.to_owned(), b.to_owned())
}

fn check_input<F: Scalar>(x: &Tensor<F>, t: usize) -> Result<(), DenoiserError> {
    let dim = x.dim();
    if dim.0 != 3 || dim.1 < 4 || dim.2 < 4 || dim.1 % 4 != 0 || dim.2 % 4 != 0 {
        return Err(DenoiserError::BadShape(dim));
    }
    if t < 1 {
        return Err(DenoiserError::BadTimestep);
    }
    Ok(())
}

fn res_forward<F: Scalar>(
    block: &ResBlock<F>,
    input: Tensor<F>,
    embedding: &Array1<F>,
) -> (ResCache<F>, Tensor<F>) {
    let h1 = conv2d_forward(&input, &block.conv1);
    let proj = block.emb.forward(embedding);
    let mut h1c = h1;
    for (c, mut plane) in h1c.outer_iter_mut().enumerate() {
        let add = proj[c];
        plane.mapv_inplace(|v| v + add);
    }
    let activated = silu(&h1c);
    let h2 = conv2d_forward(&activated, &block.conv2);
    let out = &input + &h2;
    (
        ResCache {
            input,
            h1c,
            activated,
        },
        out,
    )
}

fn forward_cached<F: Scalar>(
    params: &DenoiserParams<F>,
    x_t: &Tensor<F>,
    t: usize,
) -> Result<ForwardCache<F>, DenoiserError> {
    check_input(x_t, t)?;
    let embedding = timestep_embedding(t, params.config.embed_dim);

    let d1_pre = conv2d_forward(x_t, &params.down1);
    let d1 = silu(&d1_pre);
    let d2_pre = conv2d_forward(&d1, &params.down2);
    let d2 = silu(&d2_pre);

    let (res1, res1_out) = res_forward(&params.res1, d2, &embedding);
    let (res2, res2_out) = res_forward(&params.res2, res1_out, &embedding);

    let u1_in = concat_channels(&upsample2(&res2_out), &d1);
    let u1_pre = conv2d_forward(&u1_in, &params.up1);
    let u1 = silu(&u1_pre);
    let u2_in = concat_channels(&upsample2(&u1), x_t);
    let output = conv2d_forward(&u2_in, &params.up2);

    Ok(ForwardCache {
        input: x_t.clone(),
        embedding,
        d1_pre,
        d1,
        d2_pre,
        res1,
        res2,
        u1_in,
        u1_pre,
        u2_in,
        output,
    })
}

fn res_backward<F: Scalar>(
    block: &ResBlock<F>,
    cache: &ResCache<F>,
    d_out: &Tensor<F>,
    embedding: &Array1<F>,
    grads: &mut ResBlock<F>,
) -> Tensor<F> {
    // out = input + conv2(silu(conv1(input) + proj))
    let g2: ConvGrads<F> = conv2d_backward(&cache.activated, &block.conv2, d_out);
    grads.conv2.weight = g2.weight;
    grads.conv2.bias = g2.bias;

    let d_h1c = &g2.input * &silu_grad(&cache.h1c);

    // per-channel sums feed the embedding projection
    let channels = d_h1c.dim().0;
    let mut d_proj = Array1::zeros(channels);
    for (c, plane) in d_h1c.outer_iter().enumerate() {
        d_proj[c] = plane.sum();
    }
    for c in 0..channels {
        for (j, &e) in embedding.iter().enumerate() {
            grads.emb.weight[[c, j]] = d_proj[c] * e;
        }
    }
    grads.emb.bias = d_proj;

    let g1 = conv2d_backward(&cache.input, &block.conv1, &d_h1c);
    grads.conv1.weight = g1.weight;
    grads.conv1.bias = g1.bias;

    // skip connection adds the upstream gradient straight through
    g1.input + d_out
}

fn backward_cached<F: Scalar>(
    params: &DenoiserParams<F>,
    cache: &ForwardCache<F>,
    upstream: &Tensor<F>,
) -> Result<DenoiserParams<F>, DenoiserError> {
    if upstream.dim() != cache.output.dim() {
        return Err(DenoiserError::UpstreamShape {
            expected: cache.output.dim(),
            got: upstream.dim(),
        });
    }
    let mut grads = params.zeros_like();

    let g_up2 = conv2d_backward(&cache.u2_up, &params.up2, upstream);
    grads.up2.weight = g_up2.weight;
    grads.up2.bias = g_up2.bias;

    let d_u1 = upsample2_backward(&g_up2.input);
    let d_u1_pre = &d_u1 * &silu_grad(&cache.u1_pre);
    let g_up1 = conv2d_backward(&cache.u1_up, &params.up1, &d_u1_pre);
    grads.up1.weight = g_up1.weight;
    grads.up1.bias = g_up1.bias;

    let d_res2_out = upsample2_backward(&g_up1.input);
    let d_res1_out = res_backward(
        &params.res2,
        &cache.res2,
        &d_res2_out,
        &cache.embedding,
        &mut grads.res2,
    );
    let d_d2 = res_backward(
        &params.res1,
        &cache.res1,
        &d_res1_out,
        &cache.embedding,
        &mut grads.res1,
    );

    let d_d2_pre = &d_d2 * &silu_grad(&cache.d2_pre);
    let g_down2 = conv2d_backward(&cache.d1, &params.down2, &d_d2_pre);
    grads.down2.weight = g_down2.weight;
    grads.down2.bias = g_down2.bias;

    let d_d1 = g_down2.input;
    let d_d1_pre = &d_d1 * &silu_grad(&cache.d1_pre);
    let g_down1 = conv2d_backward(&cache.input, &params.down1, &d_d1_pre);
    grads.down1.weight = g_down1.weight;
    grads.down1.bias = g_down1.bias;

    Ok(grads)
}

/// Predict the noise in `x_t` at timestep `t`. Output shape equals input
/// shape; deterministic in all arguments.
pub fn forward<F: Scalar>(
    params: &DenoiserParams<F>,
    x_t: &Tensor<F>,
    t: usize,
) -> Result<Tensor<F>, DenoiserError> {
    Ok(forward_cached(params, x_t, t)?.output)
}

/// Exact reverse-mode gradients of [`forward`] with respect to every
/// parameter, contracted against `upstream_grad`.
pub fn backward<F: Scalar>(
    params: &DenoiserParams<F>,
    x_t: &Tensor<F>,
    t: usize,
    upstream_grad: &Tensor<F>,
) -> Result<DenoiserParams<F>, DenoiserError> {
    let cache = forward_cached(params, x_t, t)?;
    backward_cached(params, &cache, upstream_grad)
}

/// Plain elementwise SGD: `p <- p - lr * g`. Rejects non-finite gradients
/// with the offending tensor named.
pub fn sgd_step<F: Scalar>(
    params: &mut DenoiserParams<F>,
    grads: &DenoiserParams<F>,
    learning_rate: f64,
) -> Result<(), TrainError> {
    for (name, slice) in grads.flat() {
        if slice.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                tensor: name,
                step: 0,
            });
        }
    }
    let lr = F::cast(learning_rate);
    for ((_, p), (_, g)) in params.flat_mut().into_iter().zip(grads.flat()) {
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv = *pv - lr * *gv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// 0 disables the velocity buffer entirely.
    pub momentum: f64,
    pub seed: u64,
    pub denoiser: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch: 4,
            lr: 0.05,
            momentum: 0.0,
            seed: 0,
            denoiser: DenoiserConfig::default(),
        }
    }
}

pub struct TrainOutcome<F> {
    pub params: DenoiserParams<F>,
    /// One mean batch loss per optimizer step.
    pub losses: Vec<f64>,
}

/// Train an epsilon predictor on normalized roll tensors.
///
/// Every step draws a timestep uniformly from `1..=T` and fresh noise per
/// batch element, accumulates gradients in dataset order, and applies one
/// (momentum-)SGD update. All randomness comes from one ChaCha stream, so a
/// fixed seed reproduces the parameter bytes exactly. `progress` is invoked
/// once per step with the step index and batch loss.
pub fn train<F: Scalar>(
    dataset: &[Tensor<F>],
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome<F>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let shape = dataset[0].dim();
    for x in dataset {
        if x.dim() != shape {
            return Err(TrainError::MixedShapes(shape, x.dim()));
        }
    }
    check_input(&dataset[0], 1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = DenoiserParams::init(config.denoiser, &mut rng)?;
    let mut velocity: Vec<Vec<F>> = params
        .flat()
        .iter()
        .map(|(_, s)| vec![F::zero(); s.len()])
        .collect();

    let element_count = F::cast((shape.0 * shape.1 * shape.2) as f64);
    let mut losses = Vec::new();
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        for batch in indices.chunks(config.batch.max(1)) {
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0f64;
            for &idx in batch {
                let t = rng.random_range(1..=schedule.steps());
                let eps = standard_normal::<F, _>(shape, &mut rng);
                let x_t = q_sample(&dataset[idx], t, &eps, schedule)?;
                let cache = forward_cached(&params, &x_t, t)?;

                let diff = &cache.output - &eps;
                let loss = diff.iter().map(|d| (*d * *d).to_f64().unwrap()).sum::<f64>()
                    / diff.len() as f64;
                batch_loss += loss;

                let upstream = diff.mapv(|d| d + d) / element_count;
                let sample_grads = backward_cached(&params, &cache, &upstream)?;
                for ((_, acc), (_, g)) in grads.flat_mut().into_iter().zip(sample_grads.flat()) {
                    for (a, gv) in acc.iter_mut().zip(g) {
                        *a = *a + *gv;
                    }
                }
            }

            let scale = F::cast(1.0 / batch.len() as f64);
            for (_, g) in grads.flat_mut() {
                for gv in g.iter_mut() {
                    *gv = *gv * scale;
                }
            }
            batch_loss /= batch.len() as f64;

            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    loss: batch_loss,
                });
            }

            apply_update(&mut params, &grads, &mut velocity, config, step)?;
            losses.push(batch_loss);
            progress(step, batch_loss);
            step += 1;
        }
    }

    Ok(TrainOutcome { params, losses })
}

fn apply_update<F: Scalar>(
    params: &mut DenoiserParams<F>,
    grads: &DenoiserParams<F>,
    velocity: &mut [Vec<F>],
    config: &TrainConfig,
    step: usize,
) -> Result<(), TrainError> {
    for (name, slice) in grads.flat() {
        if slice.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { tensor: name, step });
        }
    }
    let lr = F::cast(config.lr);
    if config.momentum == 0.0 {
        for ((_, p), (_, g)) in params.flat_mut().into_iter().zip(grads.flat()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv = *pv - lr * *gv;
            }
        }
    } else {
        let mu = F::cast(config.momentum);
        for (((_, p), (_, g)), v) in params
            .flat_mut()
            .into_iter()
            .zip(grads.flat())
            .zip(velocity.iter_mut())
        {
            for ((pv, gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = mu * *vv + *gv;
                *pv = *pv - lr * *vv;
            }
        }
    }
    Ok(())
}

/// Mean of a loss window, for the "smoothed loss" convergence criterion.
pub fn smoothed(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.max(1).min(losses.len());
    let head = losses[..w].iter().sum::<f64>() / w as f64;
    let tail = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    (head, tail)
}

//! Conditional U-Net noise predictor `f(x, y_t, gamma)`.
//!
//! The low-resolution condition is bicubic-upsampled to the target size and
//! concatenated with `y_t` on the channel axis. The noise level enters as a
//! sinusoidal embedding of `1000 * gamma`, passed through a two-layer MLP and
//! projected per residual block into a per-channel offset added right after
//! the block's second normalization.
//!
//! Residual blocks follow the BigGAN layout: norm, SiLU, optional 2x
//! resample, conv, norm, embedding offset, SiLU, dropout, conv, with the
//! skip path resampled alongside and the sum scaled by `1/sqrt(2)`.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError};
use crate::diffusion::{per_item_gammas, Denoiser, DiffusionError};
use crate::numerics::{Activation, Element, NumericsError, Padding, Resample, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;
const GAMMA_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("input shape: {0}")]
    Shape(String),
    #[error("gamma = {0} outside (0, 1]")]
    Gamma(f64),
    #[error("non-finite denoiser output at element {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<DenoiserError> for DiffusionError {
    fn from(e: DenoiserError) -> Self {
        match e {
            DenoiserError::Numerics(n) => DiffusionError::Numerics(n),
            other => DiffusionError::Denoiser(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, DenoiserError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth_multipliers: Vec<usize>,
    pub res_blocks_per_depth: usize,
    pub groups: usize,
    pub dropout_rate: f64,
    pub gamma_embed_dim: usize,
    /// Channels of the low-resolution condition; 0 gives an unconditional model.
    pub condition_channels: usize,
    /// Channels of the target image `y`.
    pub channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth_multipliers: vec![1, 2, 4],
            res_blocks_per_depth: 1,
            groups: 4,
            dropout_rate: 0.0,
            gamma_embed_dim: 64,
            condition_channels: 1,
            channels: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DenoiserError::InvalidConfig(m));
        if self.base_channels == 0 || self.channels == 0 || self.res_blocks_per_depth == 0 {
            return bad("base_channels, channels and res_blocks_per_depth must be positive".into());
        }
        if self.depth_multipliers.is_empty() || self.depth_multipliers.contains(&0) {
            return bad(format!("depth_multipliers must be non-empty and positive, got {:?}", self.depth_multipliers));
        }
        if self.gamma_embed_dim == 0 || self.gamma_embed_dim % 2 != 0 {
            return bad(format!("gamma_embed_dim must be positive and even, got {}", self.gamma_embed_dim));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.groups == 0 || self.level_channels().any(|c| c % self.groups != 0) {
            return bad(format!("groups={} must divide every level width", self.groups));
        }
        Ok(())
    }

    fn level_channels(&self) -> impl Iterator<Item = usize> + '_ {
        self.depth_multipliers.iter().map(|m| m * self.base_channels)
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth_multipliers.len() - 1)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        self.validate()?;
        Ok(Plan::build(self).specs.iter().map(|s| s.shape.iter().product::<usize>()).sum())
    }

    /// `(name, shape)` of every parameter in storage order.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        Ok(Plan::build(self).specs.into_iter().map(|s| (s.name, s.shape)).collect())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with variance `gain / fan_in`.
    FanIn { fan_in: usize, gain: f64 },
    Zero,
    One,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone)]
struct BlockPlan {
    in_c: usize,
    out_c: usize,
    resample: Option<Resample>,
    norm1: (usize, usize),
    conv1: usize,
    norm2: (usize, usize),
    embed: (usize, usize),
    conv2: (usize, usize),
    skip: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Plan {
    specs: Vec<ParamSpec>,
    mlp: [(usize, usize); 2],
    input: (usize, usize),
    encoder: Vec<Vec<BlockPlan>>,
    mid: BlockPlan,
    /// Deepest level first.
    decoder: Vec<Vec<BlockPlan>>,
    out_norm: (usize, usize),
    output: (usize, usize),
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool, zero: bool) -> (usize, usize) {
        let init = if zero { Init::Zero } else { Init::FanIn { fan_in: cin * k * k, gain: 2.0 } };
        let w = self.add(format!("{name}.weight"), vec![cout, cin, k, k], init);
        let b = if bias { self.add(format!("{name}.bias"), vec![cout], Init::Zero) } else { usize::MAX };
        (w, b)
    }

    fn norm(&mut self, name: &str, c: usize) -> (usize, usize) {
        let s = self.add(format!("{name}.scale"), vec![c], Init::One);
        let b = self.add(format!("{name}.shift"), vec![c], Init::Zero);
        (s, b)
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> (usize, usize) {
        let w = self.add(format!("{name}.weight"), vec![fin, fout], Init::FanIn { fan_in: fin, gain: 1.0 });
        let b = self.add(format!("{name}.bias"), vec![fout], Init::Zero);
        (w, b)
    }

    fn block(&mut self, name: &str, in_c: usize, out_c: usize, resample: Option<Resample>, embed: usize) -> BlockPlan {
        BlockPlan {
            in_c,
            out_c,
            resample,
            norm1: self.norm(&format!("{name}.norm1"), in_c),
            conv1: self.conv(&format!("{name}.conv1"), in_c, out_c, 3, false, false).0,
            norm2: self.norm(&format!("{name}.norm2"), out_c),
            embed: self.linear(&format!("{name}.embed"), embed, out_c),
            conv2: self.conv(&format!("{name}.conv2"), out_c, out_c, 3, true, false),
            skip: (in_c != out_c).then(|| self.conv(&format!("{name}.skip"), in_c, out_c, 1, true, false)),
        }
    }
}

impl Plan {
    fn build(cfg: &DenoiserConfig) -> Self {
        let e = cfg.gamma_embed_dim;
        let widths: Vec<usize> = cfg.level_channels().collect();
        let mut b = Builder { specs: Vec::new() };
        let mlp = [b.linear("embed.mlp0", e, e), b.linear("embed.mlp1", e, e)];
        let input = b.conv("input", cfg.channels + cfg.condition_channels, widths[0], 3, true, false);

        let mut encoder = Vec::new();
        let mut c = widths[0];
        for (level, &w) in widths.iter().enumerate() {
            let blocks = (0..cfg.res_blocks_per_depth)
                .map(|i| {
                    let down = (level > 0 && i == 0).then_some(Resample::Down);
                    let blk = b.block(&format!("down{level}.{i}"), c, w, down, e);
                    c = w;
                    blk
                })
                .collect();
            encoder.push(blocks);
        }
        let mid = b.block("mid", c, c, None, e);

        let mut decoder = Vec::new();
        for (level, &w) in widths.iter().enumerate().rev() {
            let blocks = (0..cfg.res_blocks_per_depth)
                .map(|i| {
                    let in_c = if i == 0 { c + w } else { w };
                    let blk = b.block(&format!("up{level}.{i}"), in_c, w, None, e);
                    c = w;
                    blk
                })
                .collect();
            decoder.push(blocks);
        }
        let out_norm = b.norm("out_norm", c);
        let output = b.conv("output", c, cfg.channels, 3, true, true);
        Plan { specs: b.specs, mlp, input, encoder, mid, decoder, out_norm, output }
    }
}

/// Sinusoidal features `[sin(s/w_j)..., cos(s/w_j)...]` of `s = 1000 gamma`,
/// with `w_j` log-spaced over `[1, 1e4]`.
pub fn gamma_embedding(gamma: f64, dim: usize) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(DenoiserError::Gamma(gamma));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(DenoiserError::InvalidConfig(format!("embedding dim must be positive and even, got {dim}")));
    }
    let half = dim / 2;
    let s = GAMMA_SCALE * gamma;
    let periods = (0..half).map(|j| if half == 1 { 1.0 } else { MAX_PERIOD.powf(j as f64 / (half - 1) as f64) });
    let (sin, cos): (Vec<f64>, Vec<f64>) = periods.map(|w| ((s / w).sin(), (s / w).cos())).unzip();
    Ok(sin.into_iter().chain(cos).collect())
}

fn as_batch<T: Element>(t: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    match t.rank() {
        4 => Ok(t.clone()),
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            Ok(t.reshape(&s)?)
        }
        _ => Err(DenoiserError::Shape(format!("{what} must be [C,H,W] or [N,C,H,W], got {:?}", t.shape()))),
    }
}

/// Bicubic upsampling of a `[N,C,h,w]` condition to `[N,C,height,width]`.
pub fn upsample_condition<T: Element>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let x = as_batch(x, "condition")?;
    let &[n, c, h, w] = x.shape() else { unreachable!() };
    if (h, w) == (height, width) {
        return Ok(x);
    }
    let per = c * h * w;
    let mut out = Vec::with_capacity(n * c * height * width);
    for i in 0..n {
        let img = data::Image::new(c, h, w, x.data()[i * per..(i + 1) * per].iter().map(|v| v.f64()).collect())?;
        let up = data::bicubic_resize(&img, height, width, false)?;
        out.extend(up.data().iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::new(&[n, c, height, width], out)?)
}

/// Concatenates the upsampled condition with `y_t` on the channel axis;
/// returns `y_t` unchanged when `condition_channels == 0`.
pub fn condition_input<T: Element>(x: &Tensor<T>, y_t: &Tensor<T>, condition_channels: usize) -> Result<Tensor<T>> {
    if condition_channels == 0 {
        return Ok(y_t.clone());
    }
    let y = as_batch(y_t, "y_t")?;
    let &[n, cy, h, w] = y.shape() else { unreachable!() };
    let up = upsample_condition(x, h, w)?;
    if up.shape()[0] != n || up.shape()[1] != condition_channels {
        return Err(DenoiserError::Shape(format!(
            "condition {:?} does not match {condition_channels} channels and batch {n}",
            x.shape()
        )));
    }
    let (pc, py) = (condition_channels * h * w, cy * h * w);
    let mut out = Vec::with_capacity(up.numel() + y.numel());
    for i in 0..n {
        out.extend_from_slice(&up.data()[i * pc..(i + 1) * pc]);
        out.extend_from_slice(&y.data()[i * py..(i + 1) * py]);
    }
    let mut shape = vec![n, condition_channels + cy, h, w];
    if y_t.rank() == 3 {
        shape.remove(0);
    }
    Ok(Tensor::new(&shape, out)?)
}

/// Trainable parameters of a [`DenoiserConfig`], in [`DenoiserConfig::parameter_shapes`] order.
#[derive(Debug, Clone)]
pub struct DenoiserModel<T: Element = f32> {
    config: DenoiserConfig,
    plan: Plan,
    params: Vec<Tensor<T>>,
}

/// Fan-in scaled normal kernels, zero biases, identity norm affines and a
/// zero output convolution.
pub fn init_model<T: Element, R: Rng + ?Sized>(config: &DenoiserConfig, rng: &mut R) -> Result<DenoiserModel<T>> {
    config.validate()?;
    let plan = Plan::build(config);
    let params = plan
        .specs
        .iter()
        .map(|s| match s.init {
            Init::Zero => Tensor::zeros(&s.shape),
            Init::One => Tensor::ones(&s.shape),
            Init::FanIn { fan_in, gain } => {
                let sd = (gain / fan_in as f64).sqrt();
                let n: usize = s.shape.iter().product();
                let data = (0..n).map(|_| T::of(sd * rng.sample::<f64, _>(StandardNormal))).collect();
                Tensor::new(&s.shape, data).expect("spec shape")
            }
        })
        .collect();
    Ok(DenoiserModel { config: config.clone(), plan, params })
}

struct Ctx<'p, 'r> {
    params: &'p [Var],
    groups: usize,
    dropout: Option<(&'r mut dyn RngCore, f64)>,
}

impl<T: Element> DenoiserModel<T> {
    /// Rebuilds a model from stored tensors, checking every shape against `config`.
    pub fn from_parts(config: DenoiserConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let plan = Plan::build(&config);
        if params.len() != plan.specs.len() {
            return Err(DenoiserError::Shape(format!(
                "expected {} parameter tensors, got {}",
                plan.specs.len(),
                params.len()
            )));
        }
        for (spec, p) in plan.specs.iter().zip(&params) {
            if p.shape() != spec.shape.as_slice() {
                return Err(DenoiserError::Shape(format!("{} has shape {:?}, expected {:?}", spec.name, p.shape(), spec.shape)));
            }
            p.check_finite(&spec.name)?;
        }
        Ok(Self { config, plan, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.plan.specs.iter().map(|s| s.name.as_str())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Pairs the model with parameter leaves already on a tape.
    pub fn bound<'a>(&'a self, params: &'a [Var], train_mode: bool) -> BoundDenoiser<'a, T> {
        BoundDenoiser { model: self, params, train_mode }
    }

    fn check_inputs(&self, y_t: &Tensor<T>) -> Result<()> {
        let y = as_batch(y_t, "y_t")?;
        let &[_, c, h, w] = y.shape() else { unreachable!() };
        let d = self.config.spatial_divisor();
        if c != self.config.channels {
            return Err(DenoiserError::Shape(format!("y_t has {c} channels, model expects {}", self.config.channels)));
        }
        if h % d != 0 || w % d != 0 {
            return Err(DenoiserError::Shape(format!("{h}x{w} is not divisible by {d}")));
        }
        Ok(())
    }

    /// Records `f(x, y_t, gamma)` on `tape` using `params` as the weights.
    /// Dropout is applied iff `dropout_rng` is given and the rate is positive.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: &Tensor<T>,
        y_t: &Tensor<T>,
        gammas: &[f64],
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.check_inputs(y_t)?;
        if params.len() != self.params.len() {
            return Err(DenoiserError::Shape(format!("{} parameter vars for {} tensors", params.len(), self.params.len())));
        }
        let input = as_batch(&condition_input(x, y_t, self.config.condition_channels)?, "input")?;
        let n = input.shape()[0];
        let gammas = per_item_gammas(input.shape(), gammas).map_err(|e| DenoiserError::Shape(e.to_string()))?;
        let e = self.config.gamma_embed_dim;
        let mut emb = Vec::with_capacity(n * e);
        for &g in &gammas {
            emb.extend(gamma_embedding(g, e)?.into_iter().map(T::of));
        }
        let rate = self.config.dropout_rate;
        let mut ctx = Ctx {
            params,
            groups: self.config.groups,
            dropout: dropout_rng.filter(|_| rate > 0.0).map(|r| (r, rate)),
        };
        let p = |i: usize| params[i];
        let plan = &self.plan;

        let mut emb = tape.constant(Tensor::new(&[n, e], emb)?);
        for &(w, b) in &plan.mlp {
            let h = tape.matmul(emb, p(w))?;
            let h = tape.add_channel(h, p(b))?;
            emb = tape.silu(h);
        }

        let x = tape.constant(input);
        let mut h = tape.conv2d(x, p(plan.input.0), Some(p(plan.input.1)), Padding::Same)?;
        let mut skips = Vec::with_capacity(plan.encoder.len());
        for level in &plan.encoder {
            for blk in level {
                h = res_block(tape, &mut ctx, blk, h, emb)?;
            }
            skips.push(h);
        }
        h = res_block(tape, &mut ctx, &plan.mid, h, emb)?;
        for (i, level) in plan.decoder.iter().enumerate() {
            if i > 0 {
                h = tape.resample2x(h, Resample::Up)?;
            }
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat_channels(h, skip)?;
            for blk in level {
                h = res_block(tape, &mut ctx, blk, h, emb)?;
            }
        }
        let (scale, shift) = (p(plan.out_norm.0), p(plan.out_norm.1));
        let h = tape.group_norm_act(h, ctx.groups, NORM_EPS, scale, shift, None, Some(Activation::Silu))?;
        let out = tape.conv2d(h, p(plan.output.0), Some(p(plan.output.1)), Padding::Same)?;
        let out = if y_t.rank() == 3 { tape.reshape(out, y_t.shape())? } else { out };
        if let Some(i) = tape.value(out).data().iter().position(|v| !v.is_finite()) {
            return Err(DenoiserError::NonFinite(i));
        }
        Ok(out)
    }

    /// Predicted noise with the same shape as `y_t`.
    pub fn predict_eps(
        &self,
        x: &Tensor<T>,
        y_t: &Tensor<T>,
        gammas: &[f64],
        train_mode: bool,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let rng = if train_mode { rng } else { None };
        let out = self.forward_on_tape(&mut tape, &params, x, y_t, gammas, rng)?;
        Ok(tape.value(out).clone())
    }
}

fn res_block<T: Element>(tape: &mut Tape<T>, ctx: &mut Ctx<'_, '_>, b: &BlockPlan, x: Var, emb: Var) -> Result<Var> {
    let p = |i: usize| ctx.params[i];
    debug_assert_eq!(tape.shape(x)[1], b.in_c);
    let silu = Some(Activation::Silu);
    let mut h = tape.group_norm_act(x, ctx.groups, NORM_EPS, p(b.norm1.0), p(b.norm1.1), None, silu)?;
    let mut skip = x;
    if let Some(dir) = b.resample {
        h = tape.resample2x(h, dir)?;
        skip = tape.resample2x(x, dir)?;
    }
    let h = tape.conv2d(h, p(b.conv1), None, Padding::Same)?;
    let offset = tape.matmul(emb, p(b.embed.0))?;
    let offset = tape.add_channel(offset, p(b.embed.1))?;
    let mut h = tape.group_norm_act(h, ctx.groups, NORM_EPS, p(b.norm2.0), p(b.norm2.1), Some(offset), silu)?;
    if let Some((rng, rate)) = ctx.dropout.as_mut() {
        let keep = 1.0 - *rate;
        let shape = tape.shape(h).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n).map(|_| if rng.random::<f64>() < keep { T::of(1.0 / keep) } else { T::zero() }).collect();
        let mask = tape.constant(Tensor::new(&shape, mask)?);
        h = tape.mul(h, mask)?;
    }
    let h = tape.conv2d(h, p(b.conv2.0), Some(p(b.conv2.1)), Padding::Same)?;
    if let Some((w, bias)) = b.skip {
        skip = tape.conv2d(skip, p(w), Some(p(bias)), Padding::Same)?;
    }
    debug_assert_eq!(tape.shape(h)[1], b.out_c);
    let sum = tape.add(h, skip)?;
    Ok(tape.scale(sum, FRAC_1_SQRT_2))
}

impl<T: Element> Denoiser<T> for DenoiserModel<T> {
    fn predict(&self, x: &Tensor<T>, y_t: &Tensor<T>, gammas: &[f64]) -> std::result::Result<Tensor<T>, DiffusionError> {
        Ok(self.predict_eps(x, y_t, gammas, false, None)?)
    }
}

/// A model whose weights are leaves on a training tape.
pub struct BoundDenoiser<'a, T: Element> {
    model: &'a DenoiserModel<T>,
    params: &'a [Var],
    train_mode: bool,
}

impl<T: Element> Denoiser<T> for BoundDenoiser<'_, T> {
    fn predict(&self, x: &Tensor<T>, y_t: &Tensor<T>, gammas: &[f64]) -> std::result::Result<Tensor<T>, DiffusionError> {
        self.model.predict(x, y_t, gammas)
    }

    fn predict_on_tape(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        y_t: &Tensor<T>,
        gammas: &[f64],
        rng: &mut dyn RngCore,
    ) -> std::result::Result<Var, DiffusionError> {
        let rng = if self.train_mode { Some(rng) } else { None };
        Ok(self.model.forward_on_tape(tape, self.params, x, y_t, gammas, rng)?)
    }
}

/// Analytic and central-difference gradients of a random linear functional
/// of the output, at randomly perturbed 64-bit parameters.
#[derive(Debug, Clone)]
pub struct GradientAudit {
    pub names: Vec<String>,
    /// Index into `names` for every scalar parameter.
    pub owners: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradientAudit {
    /// `max |a - fd| / (|fd| + 1e-12)`.
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors().fold(0.0, f64::max)
    }

    fn relative_errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.analytic.iter().zip(&self.numeric).map(|(a, fd)| (a - fd).abs() / (fd.abs() + 1e-12))
    }

    /// `(name, analytic, numeric)` of the largest relative error.
    pub fn worst(&self) -> Option<(&str, f64, f64)> {
        let (i, _) = self.relative_errors().enumerate().max_by(|a, b| a.1.total_cmp(&b.1))?;
        Some((&self.names[self.owners[i]], self.analytic[i], self.numeric[i]))
    }
}

pub fn gradient_audit(config: &DenoiserConfig, seed: u64, h: f64) -> Result<GradientAudit> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut model: DenoiserModel<f64> = init_model(config, &mut rng)?;
    for p in model.params_mut() {
        let noise = Tensor::randn(p.shape(), &mut rng);
        *p = p.zip_map(&noise, "perturb", |a, b| a + 0.3 * b)?;
    }
    let side = 4 * config.spatial_divisor();
    let y = Tensor::randn(&[2, config.channels, side, side], &mut rng);
    let x = Tensor::randn(&[2, config.condition_channels.max(1), side / 2, side / 2], &mut rng);
    let weights = Tensor::randn(y.shape(), &mut rng);
    let gammas = [0.3, 0.8];
    let loss_of = |m: &DenoiserModel<f64>, tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let out = m.forward_on_tape(tape, vars, &x, &y, &gammas, None)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let loss = loss_of(&model, &mut tape, &vars)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    let mut owners = Vec::new();
    for (i, (v, p)) in vars.iter().zip(model.params()).enumerate() {
        let g = tape.grad(*v)?.unwrap_or_else(|| Tensor::zeros(p.shape()));
        analytic.extend_from_slice(g.data());
        owners.extend(std::iter::repeat_n(i, p.numel()));
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = model.clone();
    for (i, p) in model.params().iter().enumerate() {
        for j in 0..p.numel() {
            let mut at = |delta: f64| -> Result<f64> {
                probe.params[i].data_mut()[j] = p.data()[j] + delta;
                let mut tape = Tape::new();
                let vars: Vec<Var> = probe.params.iter().map(|q| tape.constant(q.clone())).collect();
                let l = loss_of(&probe, &mut tape, &vars)?;
                Ok(tape.value(l).item()?)
            };
            let (up, down) = (at(h)?, at(-h)?);
            probe.params[i].data_mut()[j] = p.data()[j];
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(GradientAudit { names: model.names().map(String::from).collect(), owners, analytic, numeric })
}

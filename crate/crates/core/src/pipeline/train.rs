use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;

use super::{stream_rng, Checkpoint, PipelineError, Resolution, Result, TrainConfig, TrainMode};
use crate::data::{batch_tensor, gaussian_blur, Image, ImagePair};
use crate::denoiser::{init_model, DenoiserModel};
use crate::diffusion::{training_loss, DiffusionError};
use crate::numerics::{Tape, Tensor};

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Columns of the loss log, one row per step.
pub const LOSS_LOG_HEADER: &str = "step,loss,learning_rate,grad_norm";

/// Adam with bias correction; moments are kept per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0f32; p.numel()]).collect();
        Adam { beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / c1) as f32;
        let (rc2, eps) = ((1.0 / c2.sqrt()) as f32, self.eps as f32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() * rc2 + eps);
            }
        }
    }
}

/// Linear ramp to `learning_rate` over `warmup_steps`, constant afterwards;
/// `step` counts from 1.
pub fn learning_rate_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.learning_rate
    } else {
        cfg.learning_rate * step as f64 / cfg.warmup_steps as f64
    }
}

/// Trailing mean over at most `window` values ending at each index.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// CSV loss log destination.
    pub log: Option<PathBuf>,
    /// Directory for `checkpoint.irckpt`, rewritten every `checkpoint_every` steps.
    pub checkpoint_dir: Option<PathBuf>,
    pub progress: Option<&'a dyn Fn(usize, f64)>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

fn check_pairs(pairs: &[ImagePair]) -> Result<Resolution> {
    let first = pairs.first().ok_or_else(|| PipelineError::Usage("training set is empty".into()))?;
    let (xd, yd) = (first.x.dims(), first.y0.dims());
    if let Some(i) = pairs.iter().position(|p| p.x.dims() != xd || p.y0.dims() != yd) {
        return Err(PipelineError::Resolution(format!(
            "pair {i} has dims {:?}/{:?}, pair 0 has {xd:?}/{yd:?}",
            pairs[i].x.dims(),
            pairs[i].y0.dims()
        )));
    }
    Ok(Resolution { condition: Some((xd.1, xd.2)), output: (yd.1, yd.2) })
}

fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Runs Adam on the configured objective and returns the final checkpoint.
pub fn train(cfg: &TrainConfig, pairs: &[ImagePair], opts: &TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut resolution = check_pairs(pairs)?;
    let model_cfg = cfg.denoiser_config();
    let (c, ..) = pairs[0].y0.dims();
    if c != model_cfg.channels || (model_cfg.condition_channels != 0 && pairs[0].x.channels() != model_cfg.condition_channels) {
        return Err(PipelineError::Resolution(format!(
            "data has {c} target / {} condition channels, model expects {} / {}",
            pairs[0].x.channels(),
            model_cfg.channels,
            model_cfg.condition_channels
        )));
    }
    if model_cfg.condition_channels == 0 {
        resolution.condition = None;
    }
    let schedule = cfg.noise_schedule()?;
    let mut model: DenoiserModel<f32> = init_model(&model_cfg, &mut stream_rng(cfg.seed, INIT_STREAM))?;
    let mut adam = Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut batch_rng = stream_rng(cfg.seed, BATCH_STREAM);
    let mut noise_rng = stream_rng(cfg.seed, NOISE_STREAM);

    let inputs: Vec<Image> = pairs.iter().map(|p| gaussian_blur(&p.x, cfg.input_blur_sigma)).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();

    let mut log = match &opts.log {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
            }
            let f = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
            let mut w = std::io::BufWriter::new(f);
            writeln!(w, "{LOSS_LOG_HEADER}").map_err(|e| PipelineError::io(path, e))?;
            Some((path.clone(), w))
        }
        None => None,
    };
    let save = |model: &DenoiserModel<f32>, step: usize| -> Result<Option<Checkpoint>> {
        let ckpt = Checkpoint {
            model: model.clone(),
            schedule: schedule.clone(),
            train: cfg.clone(),
            resolution,
            step: step as u64,
        };
        if let Some(dir) = &opts.checkpoint_dir {
            ckpt.save(&dir.join("checkpoint.irckpt"))?;
        }
        Ok(Some(ckpt))
    };

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut last = None;
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let xs: Vec<&Image> = idx.iter().map(|&i| &inputs[i]).collect();
        let ys: Vec<&Image> = idx.iter().map(|&i| &pairs[i].y0).collect();
        let x: Tensor<f32> = batch_tensor(&xs)?;
        let y0: Tensor<f32> = batch_tensor(&ys)?;

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let loss = match cfg.mode {
            TrainMode::Diffusion => {
                let bound = model.bound(&vars, true);
                match training_loss(&bound, &mut tape, &x, &y0, &schedule, cfg.p_norm, &mut noise_rng) {
                    Err(DiffusionError::NonFinite(_)) => return Err(PipelineError::NonFiniteLoss { step }),
                    other => other?,
                }
            }
            TrainMode::Regression => {
                let zeros = Tensor::zeros(y0.shape());
                let pred = model.forward_on_tape(&mut tape, &vars, &x, &zeros, &[1.0], Some(&mut noise_rng))?;
                let target = tape.constant(y0);
                let diff = tape.sub(pred, target)?;
                let sq = tape.square(diff);
                tape.mean(sq)
            }
        };
        let loss_value = tape.value(loss).item()? as f64;
        if !loss_value.is_finite() {
            return Err(PipelineError::NonFiniteLoss { step });
        }
        tape.backward(loss)?;
        let mut grads = Vec::with_capacity(vars.len());
        for (v, p) in vars.iter().zip(model.params()) {
            grads.push(tape.grad(*v)?.unwrap_or_else(|| Tensor::zeros(p.shape())));
        }
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(PipelineError::NonFiniteLoss { step });
        }
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                let s = (clip / norm) as f32;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        let lr = learning_rate_at(cfg, step);
        adam.update(model.params_mut(), &grads, lr);
        losses.push(loss_value);
        if let Some((path, w)) = log.as_mut() {
            writeln!(w, "{step},{loss_value:.9e},{lr:.9e},{norm:.9e}").map_err(|e| PipelineError::io(&*path, e))?;
        }
        if let Some(p) = opts.progress {
            p(step, loss_value);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save(&model, step)?;
        }
        if step == cfg.steps {
            last = save(&model, step)?;
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| PipelineError::io(path, e))?;
    }
    Ok(TrainOutcome { checkpoint: last.expect("at least one step"), losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    #[test]
    fn warmup_is_linear_then_flat() {
        let cfg = TrainConfig { warmup_steps: 10, learning_rate: 1e-3, ..TrainConfig::default() };
        assert!((learning_rate_at(&cfg, 1) - 1e-4).abs() < 1e-18);
        assert!((learning_rate_at(&cfg, 5) - 5e-4).abs() < 1e-18);
        assert_eq!(learning_rate_at(&cfg, 10), 1e-3);
        assert_eq!(learning_rate_at(&cfg, 5000), 1e-3);
        let flat = TrainConfig { warmup_steps: 0, ..cfg };
        assert_eq!(learning_rate_at(&flat, 1), 1e-3);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smoothed(&[2.0, 4.0], 10), vec![2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::from_slice(&[2], &[1.0f32, -1.0]).unwrap()];
        let g = vec![Tensor::from_slice(&[2], &[0.5f32, -3.0]).unwrap()];
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.update(&mut p, &g, 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    fn tiny_config(mode: TrainMode, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            warmup_steps: 0,
            learning_rate: 3e-3,
            timesteps: 100,
            mode,
            checkpoint_every: 0,
            model: DenoiserConfig {
                base_channels: 4,
                depth_multipliers: vec![1],
                groups: 2,
                gamma_embed_dim: 8,
                ..DenoiserConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn constant_pairs() -> Vec<ImagePair> {
        let hi = Image::filled(1, 8, 8, 0.5).unwrap();
        (0..8).map(|_| crate::data::make_pair(&hi, 2).unwrap()).collect()
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = tiny_config(TrainMode::Diffusion, 5);
        let pairs = constant_pairs();
        let a = train(&cfg, &pairs, &TrainOptions::default()).unwrap();
        let b = train(&cfg, &pairs, &TrainOptions::default()).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoint.step, 5);
        for (p, q) in a.checkpoint.model.params().iter().zip(b.checkpoint.model.params()) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn regression_fits_a_constant_target() {
        let out = train(&tiny_config(TrainMode::Regression, 300), &constant_pairs(), &TrainOptions::default()).unwrap();
        let tail = smoothed(&out.losses, 20);
        assert!(*tail.last().unwrap() < 1e-3, "{}", tail.last().unwrap());
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let mut pairs = constant_pairs();
        pairs[3].y0.data_mut()[0] = f64::NAN;
        let cfg = TrainConfig { batch_size: 8, ..tiny_config(TrainMode::Regression, 3) };
        match train(&cfg, &pairs, &TrainOptions::default()) {
            Err(PipelineError::NonFiniteLoss { step }) => assert_eq!(step, 1),
            other => panic!("unexpected {:?}", other.map(|o| o.losses)),
        }
    }
}

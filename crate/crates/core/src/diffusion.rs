//! Gaussian diffusion: forward corruption, the closed-form posterior,
//! the epsilon-regression objective, ancestral sampling, and the
//! per-step variational terms used to audit a trained model.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Element, NumericsError, Tape, Tensor, Var};
use crate::schedule::{Chain, NoiseSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("{what} = {value} is out of range ({expected})")]
    OutOfRange { what: &'static str, value: f64, expected: &'static str },
    #[error("step t={t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("model variance is zero while the posterior variance is {0}")]
    ZeroModelVariance(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("denoiser failed: {0}")]
    Denoiser(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, DiffusionError>;

/// Which variance the reverse conditional uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `sigma_t^2 = 1 - alpha_t`.
    #[default]
    ForwardDefault,
    /// The exact posterior variance `(1 - gamma_{t-1})(1 - alpha_t) / (1 - gamma_t)`.
    Posterior,
}

impl std::str::FromStr for VarianceMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "forward_default" | "forward" => Ok(Self::ForwardDefault),
            "posterior" => Ok(Self::Posterior),
            other => Err(format!("unknown variance mode `{other}` (forward_default | posterior)")),
        }
    }
}

/// Exponent of the training objective `|| f - eps ||_p^p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PNorm {
    #[serde(rename = "1")]
    L1,
    #[default]
    #[serde(rename = "2")]
    L2,
}

impl TryFrom<u8> for PNorm {
    type Error = String;

    fn try_from(p: u8) -> std::result::Result<Self, String> {
        match p {
            1 => Ok(PNorm::L1),
            2 => Ok(PNorm::L2),
            other => Err(format!("p-norm must be 1 or 2, got {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub p_norm: PNorm,
    pub variance_mode: VarianceMode,
}

/// Conditional noise predictor `f(x, y_t, gamma)`.
///
/// Tensors are batched along the leading axis; `gammas` holds either one
/// level shared by every item or one level per item.
pub trait Denoiser<T: Element> {
    fn predict(&self, x: &Tensor<T>, y_t: &Tensor<T>, gammas: &[f64]) -> Result<Tensor<T>>;

    /// Records the prediction on `tape`. Models with parameters override this
    /// so gradients reach them; the default treats the output as a constant.
    fn predict_on_tape(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        y_t: &Tensor<T>,
        gammas: &[f64],
        _rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let out = self.predict(x, y_t, gammas)?;
        Ok(tape.constant(out))
    }
}

impl<T: Element, D: Denoiser<T> + ?Sized> Denoiser<T> for &D {
    fn predict(&self, x: &Tensor<T>, y_t: &Tensor<T>, gammas: &[f64]) -> Result<Tensor<T>> {
        (**self).predict(x, y_t, gammas)
    }

    fn predict_on_tape(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        y_t: &Tensor<T>,
        gammas: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        (**self).predict_on_tape(tape, x, y_t, gammas, rng)
    }
}

/// `f == 0`, the prediction of an untrained model with a zeroed output layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl<T: Element> Denoiser<T> for ZeroDenoiser {
    fn predict(&self, _x: &Tensor<T>, y_t: &Tensor<T>, _gammas: &[f64]) -> Result<Tensor<T>> {
        Ok(Tensor::zeros(y_t.shape()))
    }
}

/// Expands `gammas` to one level per leading-axis item.
pub fn per_item_gammas(y: &[usize], gammas: &[f64]) -> Result<Vec<f64>> {
    let n = if y.len() > 1 { y[0] } else { 1 };
    match gammas.len() {
        1 => Ok(vec![gammas[0]; n]),
        len if len == n => Ok(gammas.to_vec()),
        len => Err(NumericsError::ShapeMismatch { op: "gammas", lhs: y.to_vec(), rhs: vec![len] }.into()),
    }
}

fn check_unit_open(what: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(DiffusionError::OutOfRange { what, value: v, expected: "0 < v < 1" })
    }
}

fn check_unit_half_open(what: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(DiffusionError::OutOfRange { what, value: v, expected: "0 < v <= 1" })
    }
}

fn affine<T: Element>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64, op: &'static str) -> Result<Tensor<T>> {
    let (ca, cb) = (T::of(ca), T::of(cb));
    Ok(a.zip_map(b, op, |x, y| ca * x + cb * y)?)
}

/// One forward transition: `sqrt(alpha) y_{t-1} + sqrt(1 - alpha) eps`.
pub fn forward_step_sample<T: Element>(y_prev: &Tensor<T>, alpha: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    check_unit_open("alpha", alpha)?;
    affine(y_prev, alpha.sqrt(), eps, (1.0 - alpha).sqrt(), "forward_step_sample")
}

/// Marginal corruption: `sqrt(gamma) y_0 + sqrt(1 - gamma) eps`.
pub fn forward_marginal_sample<T: Element>(y0: &Tensor<T>, gamma: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    check_unit_half_open("gamma", gamma)?;
    affine(y0, gamma.sqrt(), eps, (1.0 - gamma).sqrt(), "forward_marginal_sample")
}

/// Mean and variance of `q(y_{t-1} | y_0, y_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams<T: Element = f64> {
    pub mu: Tensor<T>,
    pub sigma2: f64,
}

/// Posterior coefficients `(c_y0, c_yt, sigma2)` from `gamma_{t-1}` and `alpha_t`.
pub fn posterior_coefficients(gamma_prev: f64, alpha: f64) -> (f64, f64, f64) {
    let gamma = gamma_prev * alpha;
    let denom = 1.0 - gamma;
    let c_y0 = gamma_prev.sqrt() * (1.0 - alpha) / denom;
    let c_yt = alpha.sqrt() * (1.0 - gamma_prev) / denom;
    let sigma2 = ((1.0 - gamma_prev) * (1.0 - alpha) / denom).max(0.0);
    (c_y0, c_yt, sigma2)
}

pub fn posterior_params<T: Element>(
    y0: &Tensor<T>,
    y_t: &Tensor<T>,
    schedule: &impl Chain,
    t: usize,
) -> Result<PosteriorParams<T>> {
    if t == 0 || t > schedule.steps() {
        return Err(DiffusionError::StepOutOfRange { t, steps: schedule.steps() });
    }
    let (c_y0, c_yt, sigma2) = posterior_coefficients(schedule.gamma(t - 1), schedule.alpha(t));
    Ok(PosteriorParams { mu: affine(y0, c_y0, y_t, c_yt, "posterior_params")?, sigma2 })
}

/// Inverts the marginal corruption given a noise estimate.
pub fn estimate_y0<T: Element>(y_t: &Tensor<T>, eps_hat: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
    check_unit_half_open("gamma", gamma)?;
    let s = gamma.sqrt();
    affine(y_t, 1.0 / s, eps_hat, -(1.0 - gamma).sqrt() / s, "estimate_y0")
}

/// `grad_y log q(y | y_0, gamma)` recovered from the noise that produced `y`.
pub fn score_from_eps<T: Element>(eps_hat: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
    check_unit_open("gamma", gamma)?;
    let c = T::of(-1.0 / (1.0 - gamma).sqrt());
    Ok(eps_hat.map(|e| c * e))
}

/// Mean of the learned reverse conditional given a noise prediction.
pub fn reverse_mean<T: Element>(y_t: &Tensor<T>, eps_hat: &Tensor<T>, gamma: f64, alpha: f64) -> Result<Tensor<T>> {
    let inv = 1.0 / alpha.sqrt();
    affine(y_t, inv, eps_hat, -inv * (1.0 - alpha) / (1.0 - gamma).sqrt(), "reverse_mean")
}

/// Standard deviation of the reverse conditional at a step.
pub fn reverse_sigma2(gamma: f64, alpha: f64, mode: VarianceMode) -> f64 {
    match mode {
        VarianceMode::ForwardDefault => 1.0 - alpha,
        VarianceMode::Posterior => {
            let gamma_prev = (gamma / alpha).min(1.0);
            posterior_coefficients(gamma_prev, alpha).2
        }
    }
}

/// One ancestral step `y_t -> y_{t-1}`. `z = None` adds no noise.
pub fn reverse_step<T: Element>(
    f: &impl Denoiser<T>,
    x: &Tensor<T>,
    y_t: &Tensor<T>,
    gamma: f64,
    alpha: f64,
    z: Option<&Tensor<T>>,
    mode: VarianceMode,
) -> Result<Tensor<T>> {
    check_unit_open("gamma", gamma)?;
    check_unit_open("alpha", alpha)?;
    let eps_hat = f.predict(x, y_t, &[gamma])?;
    if !eps_hat.is_finite() {
        return Err(DiffusionError::NonFinite("denoiser output".into()));
    }
    let mean = reverse_mean(y_t, &eps_hat, gamma, alpha)?;
    match z {
        Some(z) => {
            let sigma = reverse_sigma2(gamma, alpha, mode).sqrt();
            affine(&mean, 1.0, z, sigma, "reverse_step noise")
        }
        None => Ok(mean),
    }
}

/// Ancestral sampling over `schedule` starting from `y_K ~ N(0, I)` of
/// shape `shape`; the final step adds no noise.
pub fn sample<T: Element, R: Rng + ?Sized>(
    f: &impl Denoiser<T>,
    x: &Tensor<T>,
    shape: &[usize],
    schedule: &impl Chain,
    rng: &mut R,
    mode: VarianceMode,
) -> Result<Tensor<T>> {
    let mut y = Tensor::randn(shape, rng);
    for k in (1..=schedule.steps()).rev() {
        let z = (k > 1).then(|| Tensor::randn(shape, rng));
        y = reverse_step(f, x, &y, schedule.gamma(k), schedule.alpha(k), z.as_ref(), mode)?;
        if !y.is_finite() {
            return Err(DiffusionError::NonFinite(format!("sample at step {k}")));
        }
    }
    Ok(y)
}

/// Records the batch-mean objective `mean |f(x, y~, gamma) - eps|^p` on `tape`.
///
/// Each item draws its own `(gamma, t)` from the piecewise prior and its own
/// standard-normal `eps`, in item order, so the loss is reproducible from `rng`.
pub fn training_loss<T: Element, R: Rng>(
    f: &impl Denoiser<T>,
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    y0: &Tensor<T>,
    schedule: &NoiseSchedule,
    p_norm: PNorm,
    rng: &mut R,
) -> Result<Var> {
    if y0.rank() < 2 {
        return Err(DiffusionError::EmptyBatch);
    }
    let n = y0.shape()[0];
    let mut gammas = Vec::with_capacity(n);
    let mut noisy = Vec::with_capacity(n);
    let mut noises = Vec::with_capacity(n);
    for i in 0..n {
        let (gamma, _t) = schedule.sample_gamma(rng);
        let item = y0.batch_item(i)?;
        let eps = Tensor::randn(item.shape(), rng);
        noisy.push(forward_marginal_sample(&item, gamma, &eps)?);
        noises.push(eps);
        gammas.push(gamma);
    }
    let noisy = Tensor::stack(&noisy)?;
    let eps = Tensor::stack(&noises)?;
    let pred = f.predict_on_tape(tape, x, &noisy, &gammas, rng)?;
    let target = tape.constant(eps);
    let diff = tape.sub(pred, target)?;
    let per_elem = match p_norm {
        PNorm::L2 => tape.square(diff),
        PNorm::L1 => tape.abs(diff),
    };
    let loss = tape.mean(per_elem);
    if !tape.value(loss).is_finite() {
        return Err(DiffusionError::NonFinite("training loss".into()));
    }
    Ok(loss)
}

/// Condition-to-mean map of an [`AnalyticGaussianTask`].
#[derive(Debug, Clone, PartialEq)]
pub enum MeanMap {
    /// `m(x) = c` in every coordinate.
    Constant(f64),
    /// `m(x) = scale * x + offset`, coordinate-wise.
    Affine { scale: f64, offset: f64 },
}

/// Conditional Gaussian data `y_0 | x ~ N(m(x), s2 I)` in `dim` dimensions,
/// for which the Bayes-optimal noise predictor is known in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianTask {
    pub mean: MeanMap,
    pub variance: f64,
    pub dim: usize,
}

impl AnalyticGaussianTask {
    pub fn new(mean: MeanMap, variance: f64, dim: usize) -> Result<Self> {
        if !(variance >= 0.0) || dim == 0 {
            return Err(DiffusionError::OutOfRange { what: "variance", value: variance, expected: "s2 >= 0, dim >= 1" });
        }
        Ok(Self { mean, variance, dim })
    }

    fn mean_at(&self, x: f64) -> f64 {
        match self.mean {
            MeanMap::Constant(c) => c,
            MeanMap::Affine { scale, offset } => scale * x + offset,
        }
    }

    /// `m(x)` broadcast to the shape of `y` (the condition is ignored by constant maps).
    pub fn mean_like<T: Element>(&self, x: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
        match self.mean {
            MeanMap::Constant(c) => Tensor::full(y.shape(), T::of(c)),
            MeanMap::Affine { .. } => {
                let data = (0..y.numel()).map(|i| T::of(self.mean_at(x.data()[i % x.numel()].f64()))).collect();
                Tensor::new(y.shape(), data).expect("shape preserved")
            }
        }
    }

    /// Draws targets for `n` items given per-item conditions `x` (shape `[n, dim]`).
    pub fn sample_targets<T: Element, R: Rng + ?Sized>(&self, x: &Tensor<T>, n: usize, rng: &mut R) -> Tensor<T> {
        let sd = self.variance.sqrt();
        let shape = [n, self.dim];
        let template = Tensor::<T>::zeros(&shape);
        let mean = self.mean_like(x, &template);
        let data = mean
            .data()
            .iter()
            .map(|&m| m + T::of(sd * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::new(&shape, data).expect("shape preserved")
    }
}

/// Posterior-mean noise predictor `E[eps | y~, x, gamma]` for an analytic task.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticOracle {
    task: AnalyticGaussianTask,
}

pub fn analytic_oracle_denoiser(task: &AnalyticGaussianTask) -> AnalyticOracle {
    AnalyticOracle { task: task.clone() }
}

impl AnalyticOracle {
    pub fn task(&self) -> &AnalyticGaussianTask {
        &self.task
    }
}

impl<T: Element> Denoiser<T> for AnalyticOracle {
    fn predict(&self, x: &Tensor<T>, y_t: &Tensor<T>, gammas: &[f64]) -> Result<Tensor<T>> {
        let gammas = per_item_gammas(y_t.shape(), gammas)?;
        let mean = self.task.mean_like(x, y_t);
        let per_item = y_t.numel() / gammas.len();
        let s2 = self.task.variance;
        let data = y_t
            .data()
            .iter()
            .zip(mean.data())
            .enumerate()
            .map(|(i, (&y, &m))| {
                let g = gammas[i / per_item];
                let c = (1.0 - g).sqrt() / (g * s2 + 1.0 - g);
                T::of(c * (y.f64() - g.sqrt() * m.f64()))
            })
            .collect();
        Ok(Tensor::new(y_t.shape(), data)?)
    }
}

/// Closed-form `KL(q(y_{t-1} | y_0, y_t) || p(y_{t-1} | y_t, x))` summed over
/// coordinates, for `1 < t <= T`.
///
/// At `t = 1` the variational bound has a reconstruction term instead of a
/// KL; this returns the surrogate `0.5 * ||mu_theta - y_0||^2` there.
#[allow(clippy::too_many_arguments)]
pub fn kl_term<T: Element>(
    schedule: &impl Chain,
    t: usize,
    y0: &Tensor<T>,
    y_t: &Tensor<T>,
    f: &impl Denoiser<T>,
    x: &Tensor<T>,
    mode: VarianceMode,
) -> Result<f64> {
    if t == 0 || t > schedule.steps() {
        return Err(DiffusionError::StepOutOfRange { t, steps: schedule.steps() });
    }
    let (gamma, alpha) = (schedule.gamma(t), schedule.alpha(t));
    let eps_hat = f.predict(x, y_t, &[gamma])?;
    let mu_theta = reverse_mean(y_t, &eps_hat, gamma, alpha)?;
    if t == 1 {
        return Ok(0.5 * mu_theta.data().iter().zip(y0.data()).map(|(&a, &b)| (a.f64() - b.f64()).powi(2)).sum::<f64>());
    }
    let q = posterior_params(y0, y_t, schedule, t)?;
    let p_var = match mode {
        VarianceMode::ForwardDefault => 1.0 - alpha,
        VarianceMode::Posterior => q.sigma2,
    };
    if p_var <= 0.0 {
        return Err(DiffusionError::ZeroModelVariance(q.sigma2));
    }
    let d = y0.numel() as f64;
    let sq: f64 = q.mu.data().iter().zip(mu_theta.data()).map(|(&a, &b)| (a.f64() - b.f64()).powi(2)).sum();
    let per_coord = 0.5 * ((p_var / q.sigma2).ln() + q.sigma2 / p_var - 1.0);
    Ok((d * per_coord + sq / (2.0 * p_var)).max(0.0))
}

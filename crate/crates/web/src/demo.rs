use irf_core::data::{pixel_to_unit, unit_to_pixel};
use irf_core::diffusion::{analytic_oracle_denoiser, forward_marginal_sample, sample, AnalyticGaussianTask, MeanMap, VarianceMode};
use irf_core::numerics::Tensor;
use irf_core::pipeline::stream_rng;
use irf_core::schedule::{build_schedule, make_inference_schedule, InferenceStrategy, NoiseSchedule, ScheduleFamily};

/// Largest chain count the sampler accepts in one call.
pub const MAX_CHAINS: usize = 200_000;

pub fn schedule_curve(steps: usize, family: &str) -> Result<Vec<f64>, String> {
    let family = match family {
        "linear_beta" => ScheduleFamily::default_for(steps),
        "cosine" => ScheduleFamily::Cosine { offset: 0.008 },
        "geometric_gamma" => ScheduleFamily::GeometricGamma { gamma_end: NoiseSchedule::default().terminal_gamma() },
        other => return Err(format!("unknown schedule family `{other}`")),
    };
    Ok(build_schedule(family, steps).map_err(|e| e.to_string())?.gammas().to_vec())
}

pub fn inference_curve(k: usize, strategy: &str) -> Result<Vec<f64>, String> {
    let strategy: InferenceStrategy = strategy.parse()?;
    let sched = make_inference_schedule(&NoiseSchedule::default(), k, &strategy).map_err(|e| e.to_string())?;
    Ok(sched.gammas().to_vec())
}

pub fn noisy_image(pixels: &[u8], gamma: f64, seed: u64) -> Result<Vec<u8>, String> {
    let n = pixels.len();
    if n == 0 {
        return Err("empty image".into());
    }
    let y0 = Tensor::<f64>::new(&[1, n], pixels.iter().map(|&p| pixel_to_unit(p)).collect()).map_err(|e| e.to_string())?;
    let eps = Tensor::randn(&[1, n], &mut stream_rng(seed, 0));
    let y = forward_marginal_sample(&y0, gamma, &eps).map_err(|e| e.to_string())?;
    Ok(y.data().iter().map(|&v| unit_to_pixel(v)).collect())
}

/// Density histogram over `mean ± 5 sd` plus the sample moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub density: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl Histogram {
    /// `[lo, hi, mean, variance, density...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![self.lo, self.hi, self.mean, self.variance];
        out.extend_from_slice(&self.density);
        out
    }
}

/// Samples `y ~ N(mean, variance)` by ancestral sampling with the exact
/// noise predictor over a `k`-step inference schedule.
#[allow(clippy::too_many_arguments)]
pub fn analytic_histogram(
    mean: f64,
    variance: f64,
    k: usize,
    strategy: &str,
    variance_mode: &str,
    chains: usize,
    seed: u64,
    bins: usize,
) -> Result<Histogram, String> {
    if !(2..=MAX_CHAINS).contains(&chains) || bins == 0 {
        return Err(format!("need 2..={MAX_CHAINS} chains and at least one bin"));
    }
    let mode: VarianceMode = variance_mode.parse()?;
    let strategy: InferenceStrategy = strategy.parse()?;
    let sched = make_inference_schedule(&NoiseSchedule::default(), k, &strategy).map_err(|e| e.to_string())?;
    let task = AnalyticGaussianTask::new(MeanMap::Constant(mean), variance, 1).map_err(|e| e.to_string())?;
    let x = Tensor::<f64>::zeros(&[chains, 1]);
    let y = sample(&analytic_oracle_denoiser(&task), &x, &[chains, 1], &sched, &mut stream_rng(seed, 1), mode)
        .map_err(|e| e.to_string())?;
    let v = y.data();
    let m = v.iter().sum::<f64>() / chains as f64;
    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (chains - 1) as f64;
    let half = 5.0 * variance.sqrt().max(0.05);
    let (lo, hi) = (mean - half, mean + half);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for &a in v {
        if (lo..hi).contains(&a) {
            counts[((a - lo) / width) as usize] += 1.0;
        }
    }
    let density = counts.iter().map(|c| c / (chains as f64 * width)).collect();
    Ok(Histogram { lo, hi, density, mean: m, variance: var })
}

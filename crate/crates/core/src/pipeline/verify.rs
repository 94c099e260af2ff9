//! Self-checks of the diffusion and schedule math against closed forms and
//! brute-force oracles, reported as pass/fail lines.

use rand::Rng;
use rand_distr::StandardNormal;

use super::stream_rng;
use crate::diffusion::{
    analytic_oracle_denoiser, estimate_y0, forward_marginal_sample, kl_term, posterior_params, reverse_step, sample,
    score_from_eps, training_loss, AnalyticGaussianTask, Denoiser, DiffusionError, MeanMap, PNorm, VarianceMode,
    ZeroDenoiser,
};
use crate::numerics::{Tape, Tensor};
use crate::schedule::{build_schedule, make_inference_schedule, InferenceStrategy, NoiseSchedule, ScheduleFamily};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn scalar(v: f64) -> Tensor<f64> {
    Tensor::from_slice(&[1], &[v]).expect("one element")
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Mean and variance of `p(a) N(b; sqrt(alpha) a, 1 - alpha)` with
/// `p(a) = N(mean_a, var_a)`, by trapezoid quadrature on a dense grid.
pub fn grid_posterior(mean_a: f64, var_a: f64, alpha: f64, b: f64, points: usize) -> (f64, f64) {
    let sd = var_a.sqrt();
    let (lo, hi) = (mean_a - 12.0 * sd, mean_a + 12.0 * sd);
    let h = (hi - lo) / (points - 1) as f64;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..points {
        let a = lo + i as f64 * h;
        let w = if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
        let log_p = -0.5 * (a - mean_a).powi(2) / var_a - 0.5 * (b - alpha.sqrt() * a).powi(2) / (1.0 - alpha);
        let p = w * log_p.exp();
        z += p;
        m1 += p * a;
        m2 += p * a * a;
    }
    let mean = m1 / z;
    (mean, m2 / z - mean * mean)
}

fn posterior_vs_grid(seed: u64, configs: usize) -> Check {
    let mut rng = stream_rng(seed, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let steps = rng.random_range(2..=50);
        let family = ScheduleFamily::LinearBeta { beta_start: rng.random_range(1e-3..0.05), beta_end: rng.random_range(0.05..0.5) };
        let sched = match build_schedule(family, steps) {
            Ok(s) => s,
            Err(e) => return check("posterior_vs_grid_bayes", false, e.to_string()),
        };
        let t = rng.random_range(2..=steps);
        let y0 = rng.random_range(-1.5..1.5);
        let gp = sched.gamma(t - 1);
        let y_t = sched.gamma(t).sqrt() * y0 + (1.0 - sched.gamma(t)).sqrt() * normal(&mut rng);
        let q = posterior_params(&scalar(y0), &scalar(y_t), &sched, t).expect("valid step");
        let (gm, gv) = grid_posterior(gp.sqrt() * y0, 1.0 - gp, sched.alpha(t), y_t, 40_001);
        worst = worst.max((q.mu.data()[0] - gm).abs()).max((q.sigma2 - gv).abs());
    }
    check("posterior_vs_grid_bayes", worst < 1e-6, format!("{configs} configs, max error {worst:.2e}"))
}

fn marginal_recursion(sched: &NoiseSchedule) -> Check {
    let (mut m, mut v) = (1.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for t in 1..=sched.steps() {
        let a = sched.alpha(t);
        m *= a.sqrt();
        v = a * v + (1.0 - a);
        let g = sched.gamma(t);
        worst = worst.max((m - g.sqrt()).abs()).max((v - (1.0 - g)).abs());
    }
    check("marginal_recursion", worst < 1e-12, format!("T={}, max error {worst:.2e}", sched.steps()))
}

/// Noise predictor that returns a fixed tensor.
struct Fixed(Tensor<f64>);

impl Denoiser<f64> for Fixed {
    fn predict(&self, _x: &Tensor<f64>, _y: &Tensor<f64>, _g: &[f64]) -> Result<Tensor<f64>, DiffusionError> {
        Ok(self.0.clone())
    }
}

fn mean_identity_and_round_trip(sched: &NoiseSchedule, seed: u64, draws: usize) -> [Check; 2] {
    let mut rng = stream_rng(seed, 3);
    let (mut worst_mu, mut worst_rt): (f64, f64) = (0.0, 0.0);
    for _ in 0..draws {
        let t = rng.random_range(2..=sched.steps());
        let y0 = Tensor::from_f64(&[4], &[normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng)]).unwrap();
        let eps = Tensor::randn(&[4], &mut rng);
        let y_t = forward_marginal_sample(&y0, sched.gamma(t), &eps).expect("valid gamma");
        let step = reverse_step(&Fixed(eps.clone()), &y0, &y_t, sched.gamma(t), sched.alpha(t), None, VarianceMode::Posterior)
            .expect("finite");
        let q = posterior_params(&y0, &y_t, sched, t).expect("valid step");
        worst_mu = worst_mu.max(step.max_abs_diff(&q.mu));
        let back = estimate_y0(&y_t, &eps, sched.gamma(t)).expect("valid gamma");
        worst_rt = worst_rt.max(back.max_abs_diff(&y0));
    }
    [
        check("reverse_mean_identity", worst_mu < 1e-9, format!("{draws} draws, max error {worst_mu:.2e}")),
        check("estimate_y0_round_trip", worst_rt < 1e-10, format!("{draws} draws, max error {worst_rt:.2e}")),
    ]
}

fn analytic_end_to_end(sched: &NoiseSchedule, seed: u64, chains: usize, k: usize) -> Check {
    let (m, s2, d) = (3.0, 0.25, 16);
    let task = AnalyticGaussianTask::new(MeanMap::Constant(m), s2, d).expect("valid task");
    let oracle = analytic_oracle_denoiser(&task);
    let inf = match make_inference_schedule(sched, k, &InferenceStrategy::SubsampleIndex) {
        Ok(s) => s,
        Err(e) => return check("analytic_sampling", false, e.to_string()),
    };
    let mut rng = stream_rng(seed, 4);
    let x = Tensor::zeros(&[chains, d]);
    let out = match sample(&oracle, &x, &[chains, d], &inf, &mut rng, VarianceMode::Posterior) {
        Ok(o) => o,
        Err(e) => return check("analytic_sampling", false, e.to_string()),
    };
    let n = out.numel() as f64;
    let mean = out.data().iter().sum::<f64>() / n;
    let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let ok = (mean - m).abs() < 0.02 && ((var - s2) / s2).abs() < 0.05;
    check("analytic_sampling", ok, format!("K={k}, {chains} chains: mean {mean:.4} (target {m}), variance {var:.4} (target {s2})"))
}

fn score_identity(seed: u64, points: usize) -> Check {
    let mut rng = stream_rng(seed, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let gamma: f64 = rng.random_range(0.01..0.99);
        let (y0, eps) = (normal(&mut rng), normal(&mut rng));
        let y = gamma.sqrt() * y0 + (1.0 - gamma).sqrt() * eps;
        let log_q = |v: f64| -0.5 * (v - gamma.sqrt() * y0).powi(2) / (1.0 - gamma);
        let h = 1e-5;
        let fd = (log_q(y + h) - log_q(y - h)) / (2.0 * h);
        let score = score_from_eps(&scalar(eps), gamma).expect("valid gamma").data()[0];
        worst = worst.max((score - fd).abs() / fd.abs().max(1.0));
    }
    check("score_identity", worst < 1e-6, format!("{points} points, max error {worst:.2e}"))
}

/// Adds a constant to another predictor's output.
struct Shifted<'a, D>(&'a D, f64);

impl<D: Denoiser<f64>> Denoiser<f64> for Shifted<'_, D> {
    fn predict(&self, x: &Tensor<f64>, y: &Tensor<f64>, g: &[f64]) -> Result<Tensor<f64>, DiffusionError> {
        Ok(self.0.predict(x, y, g)?.map(|v| v + self.1))
    }
}

fn elbo_audit(sched: &NoiseSchedule, seed: u64) -> Check {
    let mut rng = stream_rng(seed, 6);
    let m = 0.7;
    let task = AnalyticGaussianTask::new(MeanMap::Constant(m), 0.0, 3).expect("valid task");
    let oracle = analytic_oracle_denoiser(&task);
    let y0 = Tensor::full(&[3], m);
    let x = Tensor::zeros(&[3]);
    let (mut worst_zero, mut min_pos) = (0.0f64, f64::INFINITY);
    for t in 2..=sched.steps() {
        let eps = Tensor::randn(&[3], &mut rng);
        let y_t = forward_marginal_sample(&y0, sched.gamma(t), &eps).expect("valid gamma");
        let kl = kl_term(sched, t, &y0, &y_t, &oracle, &x, VarianceMode::Posterior).expect("finite");
        worst_zero = worst_zero.max(kl.abs());
        let (a, g) = (sched.alpha(t), sched.gamma(t));
        for delta in [1e-3, -1e-3, 0.1] {
            let shift = -delta * a.sqrt() * (1.0 - g).sqrt() / (1.0 - a);
            let kl = kl_term(sched, t, &y0, &y_t, &Shifted(&oracle, shift), &x, VarianceMode::Posterior).expect("finite");
            min_pos = min_pos.min(kl);
        }
    }
    let ok = worst_zero < 1e-10 && min_pos > 0.0;
    check("elbo_audit", ok, format!("max |KL| at optimum {worst_zero:.2e}, min KL under perturbation {min_pos:.2e}"))
}

fn loss_calibration(sched: &NoiseSchedule, seed: u64, elements: usize) -> Check {
    let mut rng = stream_rng(seed, 7);
    let items = 100;
    let per = elements / items;
    let y0 = Tensor::<f64>::randn(&[items, per], &mut rng);
    let x = Tensor::zeros(&[items, 1]);
    let mut results = Vec::new();
    for (p, target) in [(PNorm::L2, 1.0), (PNorm::L1, (2.0 / std::f64::consts::PI).sqrt())] {
        let mut tape = Tape::new();
        let loss = training_loss(&ZeroDenoiser, &mut tape, &x, &y0, sched, p, &mut rng).expect("finite");
        results.push((tape.value(loss).data()[0], target));
    }
    let ok = results.iter().all(|(v, t)| ((v - t) / t).abs() < 0.01);
    check(
        "loss_calibration",
        ok,
        format!("L2 {:.4} (target 1), L1 {:.4} (target {:.4})", results[0].0, results[1].0, results[1].1),
    )
}

fn schedule_checks(sched: &NoiseSchedule) -> Vec<Check> {
    let g = sched.gammas();
    let monotone = g[0] == 1.0 && g.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0);
    let round_trip = NoiseSchedule::from_text(&sched.to_text())
        .map(|s| s.alphas() == sched.alphas() && s.gammas() == sched.gammas())
        .unwrap_or(false);
    let mut inference_ok = true;
    for k in [1, 2, 16, 64, 100] {
        for strategy in [InferenceStrategy::SubsampleIndex, InferenceStrategy::GeometricGamma] {
            match make_inference_schedule(sched, k, &strategy) {
                Ok(s) => inference_ok &= s.steps() == k && s.gamma(k) <= sched.terminal_gamma(),
                Err(_) => inference_ok = false,
            }
        }
    }
    vec![
        check("schedule_monotone", monotone, format!("T={}, gamma_T={:.3e}", sched.steps(), sched.terminal_gamma())),
        check("schedule_text_round_trip", round_trip, "alphas and gammas survive the text dump bit-exactly".into()),
        check("inference_schedules", inference_ok, "K in {1,2,16,64,100}, both strategies".into()),
    ]
}

/// Runs every check; `quick` shrinks the sampled workloads.
pub fn run(seed: u64, quick: bool) -> Vec<Check> {
    let sched = NoiseSchedule::default();
    let mut out = vec![posterior_vs_grid(seed, if quick { 20 } else { 100 }), marginal_recursion(&sched)];
    out.extend(mean_identity_and_round_trip(&sched, seed, 1000));
    out.push(analytic_end_to_end(&sched, seed, if quick { 2000 } else { 20_000 }, 1000));
    out.push(score_identity(seed, 100));
    out.push(elbo_audit(&sched, seed));
    out.push(loss_calibration(&sched, seed, 100_000));
    out.extend(schedule_checks(&sched));
    out
}

use irf_core::data::{bicubic_resize, Image};
use irf_core::diffusion::{
    estimate_y0, forward_marginal_sample, posterior_coefficients, reverse_sigma2, reverse_step, score_from_eps,
    Denoiser, DiffusionError, VarianceMode,
};
use irf_core::metrics::{frechet, psnr, FeatureStats};
use irf_core::numerics::{Activation, NumericsError, Padding, Resample, Tape, Tensor, Var};
use irf_core::schedule::{build_schedule, make_inference_schedule, InferenceStrategy, NoiseSchedule, ScheduleFamily};
use proptest::prelude::*;

fn linear_family() -> impl Strategy<Value = (ScheduleFamily, usize)> {
    (1e-5f64..1e-3, 1e-3f64..5e-2, 2usize..400)
        .prop_map(|(beta_start, beta_end, t)| (ScheduleFamily::LinearBeta { beta_start, beta_end }, t))
}

fn any_family() -> impl Strategy<Value = (ScheduleFamily, usize)> {
    prop_oneof![
        linear_family(),
        (1e-3f64..0.05, 2usize..400).prop_map(|(offset, t)| (ScheduleFamily::Cosine { offset }, t)),
        (1e-6f64..0.5, 2usize..400).prop_map(|(gamma_end, t)| (ScheduleFamily::GeometricGamma { gamma_end }, t)),
    ]
}

struct TrueNoise(Tensor<f64>);

impl Denoiser<f64> for TrueNoise {
    fn predict(&self, _x: &Tensor<f64>, _y: &Tensor<f64>, _g: &[f64]) -> Result<Tensor<f64>, DiffusionError> {
        Ok(self.0.clone())
    }
}

fn vec_tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Product-of-Gaussians posterior in precision form.
    #[test]
    fn posterior_is_the_conjugate_update(gp in 1e-4f64..0.9999, alpha in 1e-3f64..0.9999, y0 in -3.0f64..3.0, yt in -3.0f64..3.0) {
        let (c0, ct, s2) = posterior_coefficients(gp, alpha);
        let prec = 1.0 / (1.0 - gp) + alpha / (1.0 - alpha);
        let mean = (gp.sqrt() * y0 / (1.0 - gp) + alpha.sqrt() * yt / (1.0 - alpha)) / prec;
        prop_assert!((c0 * y0 + ct * yt - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        prop_assert!((s2 - 1.0 / prec).abs() <= 1e-9 / prec);
    }

    #[test]
    fn gamma_is_the_running_product((family, t) in any_family()) {
        let s = build_schedule(family, t).unwrap();
        let mut g = 1.0f64;
        prop_assert_eq!(s.gamma(0), 1.0);
        for i in 1..=t {
            let a = s.alpha(i);
            prop_assert!(a > 0.0 && a < 1.0);
            g *= a;
            prop_assert!((s.gamma(i) - g).abs() <= 1e-15 * g.max(1e-300) * i as f64 + 1e-300);
            prop_assert!(s.gamma(i) < s.gamma(i - 1));
        }
    }

    #[test]
    fn text_dump_round_trips((family, t) in any_family()) {
        let s = build_schedule(family, t).unwrap();
        let back = NoiseSchedule::from_text(&s.to_text()).unwrap();
        prop_assert_eq!(back.alphas(), s.alphas());
        prop_assert_eq!(back.gammas(), s.gammas());
    }

    #[test]
    fn inference_schedules_are_valid(k in 1usize..=100, geometric in any::<bool>()) {
        let train = NoiseSchedule::default();
        let strategy = if geometric { InferenceStrategy::GeometricGamma } else { InferenceStrategy::SubsampleIndex };
        let s = make_inference_schedule(&train, k, &strategy).unwrap();
        prop_assert_eq!(s.steps(), k);
        prop_assert_eq!(s.gamma(0), 1.0);
        prop_assert!(s.gamma(k) <= train.terminal_gamma());
        for i in 1..=k {
            prop_assert!(s.gamma(i) < s.gamma(i - 1));
            prop_assert!(s.alpha(i) > 0.0 && s.alpha(i) < 1.0);
        }
    }

    #[test]
    fn y0_estimate_inverts_the_marginal(g in 1e-6f64..0.999_999, y0 in prop::collection::vec(-3.0f64..3.0, 1..16), seed in any::<u64>()) {
        let y0 = vec_tensor(&y0);
        let eps = Tensor::randn(y0.shape(), &mut irf_core::pipeline::stream_rng(seed, 0));
        let yt = forward_marginal_sample(&y0, g, &eps).unwrap();
        let back = estimate_y0(&yt, &eps, g).unwrap();
        for (a, b) in back.data().iter().zip(y0.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reverse_mean_with_true_noise_is_the_posterior_mean(gp in 1e-4f64..0.9999, alpha in 1e-3f64..0.9999, y0 in -2.0f64..2.0, e in -3.0f64..3.0) {
        let g = gp * alpha;
        let yt = g.sqrt() * y0 + (1.0 - g).sqrt() * e;
        let x = Tensor::zeros(&[1, 1]);
        let out = reverse_step(&TrueNoise(vec_tensor(&[e])), &x, &vec_tensor(&[yt]), g, alpha, None, VarianceMode::Posterior).unwrap();
        let (c0, ct, _) = posterior_coefficients(gp, alpha);
        prop_assert!((out.data()[0] - (c0 * y0 + ct * yt)).abs() < 1e-8 * (1.0 + yt.abs() / alpha.sqrt()));
    }

    #[test]
    fn posterior_variance_never_exceeds_forward_variance(gp in 1e-4f64..0.9999, alpha in 1e-3f64..0.9999) {
        let g = gp * alpha;
        let post = reverse_sigma2(g, alpha, VarianceMode::Posterior);
        let fwd = reverse_sigma2(g, alpha, VarianceMode::ForwardDefault);
        prop_assert!(post >= 0.0 && post <= fwd * (1.0 + 1e-12));
    }

    #[test]
    fn score_is_the_log_density_gradient(g in 1e-4f64..0.9999, y0 in -2.0f64..2.0, e in -3.0f64..3.0) {
        let sd = (1.0 - g).sqrt();
        let y = g.sqrt() * y0 + sd * e;
        let logq = |u: f64| -(u - g.sqrt() * y0).powi(2) / (2.0 * (1.0 - g));
        let h = 1e-4 * sd;
        let fd = (logq(y + h) - logq(y - h)) / (2.0 * h);
        let s = score_from_eps(&vec_tensor(&[e]), g).unwrap().data()[0];
        prop_assert!((s - fd).abs() <= 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn conv_resample_norm_gradients(c in 1usize..3, side in 1usize..3, up in any::<bool>(), seed in any::<u64>()) {
        let mut rng = irf_core::pipeline::stream_rng(seed, 1);
        let hw = 4 * side;
        let x = Tensor::randn(&[2, 2 * c, hw, hw], &mut rng);
        let k = Tensor::randn(&[2 * c, 2 * c, 3, 3], &mut rng);
        let b = Tensor::randn(&[2 * c], &mut rng);
        let scale = Tensor::randn(&[2 * c], &mut rng);
        let shift = Tensor::randn(&[2 * c], &mut rng);
        let dir = if up { Resample::Up } else { Resample::Down };
        let build = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var, NumericsError> {
            let h = tape.conv2d(v[0], v[1], Some(v[2]), Padding::Same)?;
            let h = tape.resample2x(h, dir)?;
            let h = tape.group_norm_act(h, c, 1e-5, v[3], v[4], None, Some(Activation::Silu))?;
            let sq = tape.square(h);
            Ok(tape.mean(sq))
        };
        let inputs = [x, k, b, scale, shift];
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.backward(loss).unwrap();
        let analytic: Vec<f64> = vars.iter().flat_map(|v| tape.grad(*v).unwrap().unwrap().data().to_vec()).collect();
        let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let eval = |flat: &[f64]| {
            let mut tape = Tape::new();
            let mut at = 0;
            let vars: Vec<Var> = inputs
                .iter()
                .map(|t| {
                    let n = t.numel();
                    at += n;
                    tape.constant(Tensor::from_slice(t.shape(), &flat[at - n..at]).unwrap())
                })
                .collect();
            let l = build(&mut tape, &vars).unwrap();
            tape.value(l).item().unwrap()
        };
        let h = 1e-5;
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut probe = point.clone();
        for i in 0..point.len() {
            probe[i] = point[i] + h;
            let up = eval(&probe);
            probe[i] = point[i] - h;
            let down = eval(&probe);
            probe[i] = point[i];
            let fd = (up - down) / (2.0 * h);
            prop_assert!((analytic[i] - fd).abs() <= 1e-5 * fd.abs().max(scale), "entry {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn resizing_preserves_constants(v in -1.0f64..1.0, h in 1usize..12, w in 1usize..12, oh in 1usize..12, ow in 1usize..12, aa in any::<bool>()) {
        let img = Image::filled(1, h, w, v).unwrap();
        let out = bicubic_resize(&img, oh, ow, aa).unwrap();
        prop_assert!(out.data().iter().all(|&p| (p - v).abs() < 1e-12));
    }

    #[test]
    fn psnr_is_symmetric(a in prop::collection::vec(-1.0f64..1.0, 16), b in prop::collection::vec(-1.0f64..1.0, 16)) {
        let a = Image::new(1, 4, 4, a).unwrap();
        let b = Image::new(1, 4, 4, b).unwrap();
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn frechet_is_zero_on_itself_and_symmetric(rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..20), shift in -1.0f64..1.0) {
        let a = FeatureStats::from_vectors(&rows).unwrap();
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let b = FeatureStats::from_vectors(&moved).unwrap();
        prop_assert!(frechet(&a, &a).unwrap().abs() < 1e-8);
        let (ab, ba) = (frechet(&a, &b).unwrap(), frechet(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        prop_assert!((ab - 3.0 * shift * shift).abs() < 1e-7 * (1.0 + ab));
    }
}

use irf_web::demo::{analytic_histogram, inference_curve, noisy_image, schedule_curve};

#[test]
fn schedule_curves_start_at_one_and_decrease() {
    for family in ["linear_beta", "cosine", "geometric_gamma"] {
        let g = schedule_curve(500, family).unwrap();
        assert_eq!(g.len(), 501);
        assert_eq!(g[0], 1.0);
        assert!(g.windows(2).all(|w| w[1] < w[0]), "{family}");
    }
    assert!(schedule_curve(10, "sigmoid").is_err());
}

#[test]
fn inference_curve_has_k_steps() {
    let g = inference_curve(16, "geometric_gamma").unwrap();
    assert_eq!(g.len(), 17);
    assert!(inference_curve(16, "random").is_err());
}

#[test]
fn noise_level_one_keeps_pixels() {
    let px: Vec<u8> = (0..=255).collect();
    let g = schedule_curve(2000, "linear_beta").unwrap();
    assert_eq!(noisy_image(&px, 1.0 - 1e-15, 3).unwrap(), px);
    let noisy = noisy_image(&px, g[2000], 3).unwrap();
    assert_eq!(noisy.len(), px.len());
    assert_ne!(noisy, px);
    assert!(noisy_image(&[], 0.5, 0).is_err());
}

#[test]
fn exact_sampler_matches_target_moments() {
    let h = analytic_histogram(1.0, 0.5, 200, "subsample_index", "posterior", 20_000, 4, 40).unwrap();
    assert!((h.mean - 1.0).abs() < 0.03, "{}", h.mean);
    assert!((h.variance - 0.5).abs() < 0.05, "{}", h.variance);
    let width = (h.hi - h.lo) / 40.0;
    let mass: f64 = h.density.iter().map(|d| d * width).sum();
    assert!(mass > 0.99 && mass <= 1.0);
    assert_eq!(h.to_flat().len(), 44);
}

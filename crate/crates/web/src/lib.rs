//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function wraps a plain Rust function of the same name in
//! [`demo`], which is what the native tests exercise.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// `gamma_0..=gamma_T` of a training schedule family.
#[wasm_bindgen]
pub fn schedule_curve(steps: usize, family: &str) -> Result<Vec<f64>, JsValue> {
    demo::schedule_curve(steps, family).map_err(js)
}

/// `gamma'_0..=gamma'_K` of an inference schedule over the default training schedule.
#[wasm_bindgen]
pub fn inference_curve(k: usize, strategy: &str) -> Result<Vec<f64>, JsValue> {
    demo::inference_curve(k, strategy).map_err(js)
}

/// Grayscale bytes corrupted to noise level `gamma`.
#[wasm_bindgen]
pub fn noisy_image(pixels: &[u8], gamma: f64, seed: u64) -> Result<Vec<u8>, JsValue> {
    demo::noisy_image(pixels, gamma, seed).map_err(js)
}

/// Histogram of scalar samples drawn with the exact denoiser; see [`demo::analytic_histogram`].
#[wasm_bindgen]
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
) -> Result<Vec<f64>, JsValue> {
    demo::analytic_histogram(mean, variance, k, strategy, variance_mode, chains, seed, bins)
        .map(|h| h.to_flat())
        .map_err(js)
}

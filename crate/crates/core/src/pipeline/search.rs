use std::path::Path;

use rand::Rng;

use super::sample::sample_batch;
use super::{stream_rng, Checkpoint, PipelineError, Result};
use crate::data::{self, make_pair, Image, NamedPair};
use crate::diffusion::{analytic_oracle_denoiser, sample, AnalyticGaussianTask, Denoiser, MeanMap, VarianceMode};
use crate::metrics::{evaluate_set, features, fit_stats, frechet, EvalItem, FeatureKind, FeatureStats, Report};
use crate::numerics::{Element, Tensor};
use crate::schedule::{search_inference_schedule, Candidate, NoiseSchedule, SearchOutcome};

/// Pairs every reference `<stem>.png` in `reference_dir` with
/// `<stem>_sr.png` (or `<stem>.png`) in `outputs_dir` and scores them.
pub fn evaluate_dirs(outputs_dir: &Path, reference_dir: &Path, scale: usize, kind: FeatureKind) -> Result<Report> {
    let refs = data::load_pairs(reference_dir, scale)?;
    let mut outputs = Vec::with_capacity(refs.len());
    for r in &refs {
        let candidates = [outputs_dir.join(format!("{}_sr.png", r.name)), outputs_dir.join(format!("{}.png", r.name))];
        let path = candidates
            .iter()
            .find(|p| p.is_file())
            .ok_or_else(|| PipelineError::MissingCounterpart(candidates[0].clone()))?;
        outputs.push(data::load_image(path)?);
    }
    let items: Vec<EvalItem> = refs
        .iter()
        .zip(&outputs)
        .map(|(r, o)| EvalItem { name: &r.name, output: o, reference: &r.pair.y0, input: &r.pair.x })
        .collect();
    Ok(evaluate_set(&items, scale, kind)?)
}

/// Scores each candidate by the Fréchet distance between features of its
/// samples and `reference`; candidate `i` samples from stream `i` of `seed`.
///
/// `featurize` maps a batch of samples to one feature vector per item.
pub fn search_with<T, D, F>(
    f: &D,
    train: &NoiseSchedule,
    grid: &[Candidate],
    x: &Tensor<T>,
    sample_shape: &[usize],
    reference: &FeatureStats,
    featurize: F,
    seed: u64,
    mode: VarianceMode,
) -> Result<SearchOutcome>
where
    T: Element,
    D: Denoiser<T>,
    F: Fn(&Tensor<T>) -> Vec<Vec<f64>>,
{
    Ok(search_inference_schedule(train, grid, |i, sched| -> Result<f64> {
        let mut rng = stream_rng(seed, i as u64);
        let out = sample(f, x, sample_shape, sched, &mut rng, mode)?;
        let stats = FeatureStats::from_vectors(&featurize(&out))?;
        Ok(frechet(&stats, reference)?)
    })?)
}

/// The analytic search harness: `y_0 ~ N(m 1, s2 I)` in `dim` dimensions,
/// sampled with the exact noise predictor and scored against the exact
/// Gaussian statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticHarness {
    pub mean: f64,
    pub variance: f64,
    pub dim: usize,
    pub chains: usize,
}

impl Default for AnalyticHarness {
    fn default() -> Self {
        AnalyticHarness { mean: 3.0, variance: 0.25, dim: 16, chains: 2000 }
    }
}

impl AnalyticHarness {
    pub fn search(&self, train: &NoiseSchedule, grid: &[Candidate], seed: u64, mode: VarianceMode) -> Result<SearchOutcome> {
        if self.chains < 2 {
            return Err(PipelineError::Usage("the analytic harness needs at least 2 chains".into()));
        }
        let task = AnalyticGaussianTask::new(MeanMap::Constant(self.mean), self.variance, self.dim)?;
        let oracle = analytic_oracle_denoiser(&task);
        let cov = nalgebra::DMatrix::from_diagonal_element(self.dim, self.dim, self.variance);
        let reference = FeatureStats::new(vec![self.mean; self.dim], cov, usize::MAX)?;
        let x = Tensor::<f64>::zeros(&[self.chains, self.dim]);
        search_with(&oracle, train, grid, &x, &[self.chains, self.dim], &reference, item_vectors, seed, mode)
    }
}

/// Schedule search for an image model on held-out pairs.
pub fn search_cmd(
    ckpt: &Checkpoint,
    pairs: &[NamedPair],
    grid: &[Candidate],
    seed: u64,
    mode: VarianceMode,
    kind: FeatureKind,
    batch_size: usize,
) -> Result<SearchOutcome> {
    if pairs.len() < 2 {
        return Err(PipelineError::Usage("schedule search needs at least 2 evaluation pairs".into()));
    }
    let refs: Vec<Image> = pairs.iter().map(|p| p.pair.y0.clone()).collect();
    let reference = fit_stats(&refs, kind)?;
    let conditional = ckpt.resolution.condition.is_some();
    let inputs: Vec<Image> = pairs.iter().map(|p| p.pair.x.clone()).collect();
    let (c, h, w) = refs[0].dims();
    Ok(search_inference_schedule(&ckpt.schedule, grid, |i, sched| -> Result<f64> {
        let out = sample_batch(
            &ckpt.model,
            conditional.then_some(inputs.as_slice()),
            refs.len(),
            (c, h, w),
            sched,
            mode,
            seed,
            (i as u64) << 32,
            batch_size,
        )?;
        Ok(frechet(&fit_stats(&out.images, kind)?, &reference)?)
    })?)
}

/// CSV with one row per candidate and a final `winner` row.
pub fn write_search_table(outcome: &SearchOutcome, path: &Path) -> Result<()> {
    let err = |e: csv::Error| PipelineError::io(path, e);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["candidate", "k", "strategy", "frechet", "error"]).map_err(err)?;
    for (i, row) in outcome.table.iter().enumerate() {
        w.write_record([
            i.to_string(),
            row.candidate.steps.to_string(),
            row.candidate.strategy.name().to_string(),
            format!("{:.9e}", row.score),
            row.error.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    let win = outcome.winner();
    w.write_record([
        "winner".to_string(),
        win.candidate.steps.to_string(),
        win.candidate.strategy.name().to_string(),
        format!("{:.9e}", win.score),
        String::new(),
    ])
    .map_err(err)?;
    w.flush().map_err(|e| PipelineError::io(path, e))
}

/// Held-out pairs drawn like training data but from a distinct stream.
pub fn held_out_pairs<R: Rng + ?Sized>(
    kind: data::SynthKind,
    n: usize,
    size: usize,
    scale: usize,
    rng: &mut R,
) -> Result<Vec<NamedPair>> {
    Ok(data::synth_dataset(kind, n, size, scale, rng)?
        .into_iter()
        .enumerate()
        .map(|(i, pair)| NamedPair { name: format!("heldout_{i:04}"), pair })
        .collect())
}

/// Pairs derived from named high-resolution images.
pub fn pairs_from_images(images: &[(String, Image)], scale: usize) -> Result<Vec<NamedPair>> {
    images
        .iter()
        .map(|(name, img)| Ok(NamedPair { name: name.clone(), pair: make_pair(img, scale)? }))
        .collect()
}

/// Identity features of each batch item.
pub fn item_vectors<T: Element>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    let per = t.numel() / n;
    t.data().chunks(per).map(|c| c.iter().map(|v| v.f64()).collect()).collect()
}

/// Feature vectors of decoded images.
pub fn image_features(images: &[Image], kind: FeatureKind) -> Vec<Vec<f64>> {
    images.iter().map(|i| features(i, kind)).collect()
}

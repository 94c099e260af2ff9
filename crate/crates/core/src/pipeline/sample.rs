use std::cell::Cell;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{stream_rng, Checkpoint, PipelineError, Result};
use crate::data::{self, bicubic_resize, Image};
use crate::diffusion::{reverse_step, Denoiser, DiffusionError, VarianceMode};
use crate::numerics::{Tape, Tensor, Var};
use crate::schedule::{make_inference_schedule, InferenceSchedule, InferenceStrategy, NoiseSchedule};

/// Inference budget enforced unless explicitly overridden.
pub const MAX_INFERENCE_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSettings {
    pub k: usize,
    pub strategy: InferenceStrategy,
    pub variance_mode: VarianceMode,
    pub seed: u64,
    pub override_budget: bool,
    /// Chains advanced together per denoiser call.
    pub batch_size: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings {
            k: MAX_INFERENCE_STEPS,
            strategy: InferenceStrategy::SubsampleIndex,
            variance_mode: VarianceMode::ForwardDefault,
            seed: 0,
            override_budget: false,
            batch_size: 16,
        }
    }
}

impl SampleSettings {
    pub fn inference_schedule(&self, train: &NoiseSchedule) -> Result<InferenceSchedule> {
        if self.k > MAX_INFERENCE_STEPS && !self.override_budget {
            return Err(PipelineError::Usage(format!(
                "K={} exceeds the inference budget of {MAX_INFERENCE_STEPS} steps (pass --override-budget to allow it)",
                self.k
            )));
        }
        Ok(make_inference_schedule(train, self.k, &self.strategy)?)
    }
}

/// Counts per-chain denoiser evaluations.
struct Counting<'a, D> {
    inner: &'a D,
    evaluations: Cell<usize>,
}

impl<D: Denoiser<f32>> Denoiser<f32> for Counting<'_, D> {
    fn predict(&self, x: &Tensor<f32>, y_t: &Tensor<f32>, gammas: &[f64]) -> std::result::Result<Tensor<f32>, DiffusionError> {
        self.evaluations.set(self.evaluations.get() + y_t.shape()[0]);
        self.inner.predict(x, y_t, gammas)
    }

    fn predict_on_tape(
        &self,
        tape: &mut Tape<f32>,
        x: &Tensor<f32>,
        y_t: &Tensor<f32>,
        gammas: &[f64],
        rng: &mut dyn rand::RngCore,
    ) -> std::result::Result<Var, DiffusionError> {
        self.evaluations.set(self.evaluations.get() + y_t.shape()[0]);
        self.inner.predict_on_tape(tape, x, y_t, gammas, rng)
    }
}

/// Result of [`sample_batch`]: outputs in condition order.
pub struct BatchSamples {
    pub images: Vec<Image>,
    /// Wall time per output, its batch's time split evenly.
    pub seconds: Vec<f64>,
    /// Total per-chain denoiser evaluations.
    pub evaluations: usize,
}

/// Runs one ancestral chain per output, `batch_size` chains per call.
///
/// Chain `i` draws all its noise from stream `stream_base + i` of `seed`, so
/// outputs do not depend on the batch size. `conditions` of `None` samples
/// `count` unconditional outputs.
pub fn sample_batch<D: Denoiser<f32>>(
    f: &D,
    conditions: Option<&[Image]>,
    count: usize,
    output: (usize, usize, usize),
    schedule: &InferenceSchedule,
    mode: VarianceMode,
    seed: u64,
    stream_base: u64,
    batch_size: usize,
) -> Result<BatchSamples> {
    let n = conditions.map_or(count, <[Image]>::len);
    let counter = Counting { inner: f, evaluations: Cell::new(0) };
    let (c, h, w) = output;
    let item = [c, h, w];
    let mut images = Vec::with_capacity(n);
    let mut seconds = Vec::with_capacity(n);
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(n);
        let clock = Instant::now();
        let mut rngs: Vec<_> = (start..end).map(|i| stream_rng(seed, stream_base + i as u64)).collect();
        let x: Tensor<f32> = match conditions {
            Some(cs) => data::batch_tensor(&cs[start..end].iter().collect::<Vec<_>>())?,
            None => Tensor::zeros(&[end - start, 1, 1, 1]),
        };
        let draw = |rngs: &mut Vec<rand_chacha::ChaCha8Rng>| -> Result<Tensor<f32>> {
            let parts: Vec<Tensor<f32>> = rngs.iter_mut().map(|r| Tensor::randn(&item, r)).collect();
            Ok(Tensor::stack(&parts)?)
        };
        let mut y = draw(&mut rngs)?;
        for k in (1..=schedule.steps()).rev() {
            let z = if k > 1 { Some(draw(&mut rngs)?) } else { None };
            y = reverse_step(&counter, &x, &y, schedule.gamma(k), schedule.alpha(k), z.as_ref(), mode)?;
            if !y.is_finite() {
                return Err(DiffusionError::NonFinite(format!("sample at step {k}")).into());
            }
        }
        for out in data::unbatch_tensor(&y)? {
            images.push(out.clipped());
        }
        let per = clock.elapsed().as_secs_f64() / (end - start) as f64;
        seconds.extend(std::iter::repeat_n(per, end - start));
    }
    Ok(BatchSamples { images, seconds, evaluations: counter.evaluations.get() })
}

/// What to condition on.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleInputs {
    /// Every PNG in the directory is one low-resolution input.
    Dir(PathBuf),
    /// Number of unconditional samples.
    Unconditional(usize),
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub files: Vec<PathBuf>,
    pub seconds: Vec<f64>,
    /// Per-chain denoiser evaluations.
    pub evaluations_per_image: usize,
}

struct Named {
    names: Vec<String>,
    images: Option<Vec<Image>>,
    count: usize,
}

fn load_inputs(inputs: &SampleInputs) -> Result<Named> {
    match inputs {
        SampleInputs::Dir(dir) => {
            let paths = data::list_pngs(dir)?;
            let images = paths.iter().map(|p| data::load_image(p)).collect::<std::result::Result<Vec<_>, _>>()?;
            let names = paths.iter().map(|p| format!("{}_sr", data::file_stem(p))).collect();
            Ok(Named { names, count: images.len(), images: Some(images) })
        }
        SampleInputs::Unconditional(n) => {
            if *n == 0 {
                return Err(PipelineError::Usage("unconditional sampling needs a positive count".into()));
            }
            Ok(Named { names: (0..*n).map(|i| format!("uncond_{i}")).collect(), images: None, count: *n })
        }
    }
}

fn check_conditions(ckpt: &Checkpoint, images: Option<&[Image]>, label: &str) -> Result<()> {
    let cfg = ckpt.model.config();
    match (ckpt.resolution.condition, images) {
        (Some((h, w)), Some(imgs)) => {
            for img in imgs {
                let (c, ih, iw) = img.dims();
                if (c, ih, iw) != (cfg.condition_channels, h, w) {
                    return Err(PipelineError::Resolution(format!(
                        "{label}: input is {c}x{ih}x{iw} but the checkpoint expects {}x{h}x{w}",
                        cfg.condition_channels
                    )));
                }
            }
            Ok(())
        }
        (Some(_), None) => Err(PipelineError::Usage(format!("{label}: conditional model needs input images"))),
        (None, Some(_)) => Err(PipelineError::Usage(format!("{label}: unconditional model takes a count, not inputs"))),
        (None, None) => Ok(()),
    }
}

fn output_dims(ckpt: &Checkpoint) -> (usize, usize, usize) {
    (ckpt.model.config().channels, ckpt.resolution.output.0, ckpt.resolution.output.1)
}

fn write_images(dir: &Path, names: &[String], images: &[Image]) -> Result<Vec<PathBuf>> {
    names
        .iter()
        .zip(images)
        .map(|(name, img)| {
            let path = dir.join(format!("{name}.png"));
            data::save_image(&path, img)?;
            Ok(path)
        })
        .collect()
}

/// Samples one output per input (or `count` unconditional outputs) and
/// writes `<stem>_sr.png` / `uncond_<i>.png` into `out_dir`.
pub fn sample_cmd(ckpt: &Checkpoint, inputs: &SampleInputs, settings: &SampleSettings, out_dir: &Path) -> Result<SampleOutcome> {
    let schedule = settings.inference_schedule(&ckpt.schedule)?;
    let named = load_inputs(inputs)?;
    check_conditions(ckpt, named.images.as_deref(), "sample")?;
    let out = sample_batch(
        &ckpt.model,
        named.images.as_deref(),
        named.count,
        output_dims(ckpt),
        &schedule,
        settings.variance_mode,
        settings.seed,
        0,
        settings.batch_size,
    )?;
    let files = write_images(out_dir, &named.names, &out.images)?;
    Ok(SampleOutcome { files, seconds: out.seconds, evaluations_per_image: out.evaluations / named.count })
}

fn default_strategy() -> InferenceStrategy {
    InferenceStrategy::SubsampleIndex
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeStage {
    pub checkpoint: PathBuf,
    pub k: usize,
    #[serde(default = "default_strategy")]
    pub strategy: InferenceStrategy,
    #[serde(default)]
    pub variance_mode: VarianceMode,
    /// Declared condition resolution; checked against the checkpoint when present.
    #[serde(default)]
    pub input: Option<(usize, usize)>,
    /// Declared output resolution; checked against the checkpoint when present.
    #[serde(default)]
    pub output: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSpec {
    pub stages: Vec<CascadeStage>,
    #[serde(default)]
    pub save_intermediate: bool,
}

impl CascadeSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }
}

/// Checks declared resolutions and that each stage's output feeds the next
/// stage's condition.
pub fn validate_cascade(spec: &CascadeSpec, ckpts: &[Checkpoint]) -> Result<()> {
    if spec.stages.is_empty() {
        return Err(PipelineError::Usage("cascade has no stages".into()));
    }
    for (i, (stage, ckpt)) in spec.stages.iter().zip(ckpts).enumerate() {
        let res = ckpt.resolution;
        if stage.input.is_some() && stage.input != res.condition {
            return Err(PipelineError::Resolution(format!(
                "stage {}: declared input {:?} but checkpoint conditions on {:?}",
                i + 1,
                stage.input,
                res.condition
            )));
        }
        if let Some(out) = stage.output.filter(|o| *o != res.output) {
            return Err(PipelineError::Resolution(format!(
                "stage {}: declared output {out:?} but checkpoint produces {:?}",
                i + 1,
                res.output
            )));
        }
        if i > 0 && res.condition.is_none() {
            return Err(PipelineError::Chain { from: i, to: i + 1, msg: "only the first stage may be unconditional".into() });
        }
    }
    for (i, pair) in ckpts.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if Some(a.resolution.output) != b.resolution.condition {
            return Err(PipelineError::Chain {
                from: i + 1,
                to: i + 2,
                msg: format!("output {:?} does not match next condition {:?}", a.resolution.output, b.resolution.condition),
            });
        }
        if a.model.config().channels != b.model.config().condition_channels {
            return Err(PipelineError::Chain {
                from: i + 1,
                to: i + 2,
                msg: format!(
                    "{} output channels feed a {}-channel condition",
                    a.model.config().channels,
                    b.model.config().condition_channels
                ),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CascadeOutcome {
    pub files: Vec<PathBuf>,
    pub seconds: Vec<f64>,
    /// Per-chain denoiser evaluations summed over stages.
    pub evaluations_per_image: usize,
    pub stage_steps: Vec<usize>,
}

/// Runs the stages in order, feeding each stage's outputs to the next.
///
/// Stage `j` draws chain `i` from stream `(j << 32) + i`, so a one-stage
/// cascade reproduces [`sample_cmd`] for the same seed.
pub fn cascade(
    spec: &CascadeSpec,
    inputs: &SampleInputs,
    seed: u64,
    batch_size: usize,
    override_budget: bool,
    out_dir: &Path,
) -> Result<CascadeOutcome> {
    let ckpts = spec.stages.iter().map(|s| Checkpoint::load(&s.checkpoint)).collect::<Result<Vec<_>>>()?;
    validate_cascade(spec, &ckpts)?;
    let named = load_inputs(inputs)?;
    check_conditions(&ckpts[0], named.images.as_deref(), "cascade stage 1")?;
    let mut current = named.images;
    let mut seconds = vec![0.0; named.count];
    let mut evaluations = 0;
    let mut stage_steps = Vec::with_capacity(spec.stages.len());
    let last = spec.stages.len() - 1;
    for (j, (stage, ckpt)) in spec.stages.iter().zip(&ckpts).enumerate() {
        let settings = SampleSettings {
            k: stage.k,
            strategy: stage.strategy.clone(),
            variance_mode: stage.variance_mode,
            seed,
            override_budget,
            batch_size,
        };
        let schedule = settings.inference_schedule(&ckpt.schedule)?;
        let out = sample_batch(
            &ckpt.model,
            current.as_deref(),
            named.count,
            output_dims(ckpt),
            &schedule,
            stage.variance_mode,
            seed,
            (j as u64) << 32,
            batch_size,
        )?;
        seconds.iter_mut().zip(&out.seconds).for_each(|(a, b)| *a += b);
        evaluations += out.evaluations;
        stage_steps.push(stage.k);
        if spec.save_intermediate && j < last {
            let names: Vec<String> = named.names.iter().map(|n| format!("{n}_stage{}", j + 1)).collect();
            write_images(out_dir, &names, &out.images)?;
        }
        current = Some(out.images);
    }
    let files = write_images(out_dir, &named.names, current.as_deref().expect("at least one stage"))?;
    Ok(CascadeOutcome { files, seconds, evaluations_per_image: evaluations / named.count, stage_steps })
}

/// Bicubic upsampling of `x` by `scale`, the comparison floor for outputs.
pub fn bicubic_baseline(x: &Image, scale: usize) -> Result<Image> {
    let (_, h, w) = x.dims();
    Ok(bicubic_resize(x, h * scale, w * scale, false)?)
}

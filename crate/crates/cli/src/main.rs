//! `irf`: train, sample and evaluate iterative-refinement super-resolution models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irf_core::data::{self, SynthKind};
use irf_core::diffusion::{PNorm, VarianceMode};
use irf_core::metrics::{evaluate_set, EvalItem, FeatureKind, Report};
use irf_core::pipeline::{
    self, bicubic_baseline, AnalyticHarness, CascadeSpec, Checkpoint, DataSpec, PipelineError, SampleInputs,
    SampleSettings, TrainConfig, TrainMode, TrainOptions,
};
use irf_core::schedule::{Candidate, InferenceStrategy};

#[derive(Parser)]
#[command(name = "irf", version, about = "Conditional diffusion super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser (or the regression baseline) and write a checkpoint.
    ///
    /// The output directory receives config.json, loss.csv
    /// (step,loss,learning_rate,grad_norm), schedule.txt and checkpoint.irckpt.
    Train(TrainArgs),
    /// Super-resolve every PNG in a directory, or draw unconditional samples.
    Sample(SampleArgs),
    /// Run a chain of checkpoints described by a JSON cascade spec.
    Cascade(CascadeArgs),
    /// Score outputs against references.
    ///
    /// Report columns: image,psnr_db,ssim,consistency_mse,consistency_x1e5,frechet.
    /// One row per image, then a `mean` row; frechet is set on the mean row only.
    Evaluate(EvaluateArgs),
    /// Pick the inference schedule with the lowest Fréchet distance.
    SearchSchedule(SearchArgs),
    /// Run the built-in numerical checks and print a pass/fail report.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SamplingFlags {
    /// Inference steps.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// subsample_index | geometric_gamma
    #[arg(long, default_value = "subsample_index")]
    strategy: InferenceStrategy,
    /// forward_default | posterior
    #[arg(long, default_value = "forward_default")]
    variance_mode: VarianceMode,
    /// Allow more than 100 inference steps.
    #[arg(long)]
    override_budget: bool,
    /// Chains advanced per denoiser call.
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

impl SamplingFlags {
    fn settings(&self, seed: u64) -> SampleSettings {
        SampleSettings {
            k: self.k,
            strategy: self.strategy.clone(),
            variance_mode: self.variance_mode,
            seed,
            override_budget: self.override_budget,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// diffusion | regression
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// 1 or 2.
    #[arg(long)]
    p_norm: Option<u8>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Train on the high-resolution PNGs in this directory.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Train on procedural images: gradients | shapes | gaussians.
    #[arg(long)]
    synthetic: Option<SynthKind>,
    /// Number of synthetic pairs.
    #[arg(long)]
    count: Option<usize>,
    /// Synthetic high-resolution side length.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    /// Disable gradient-norm clipping.
    #[arg(long)]
    no_grad_clip: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of low-resolution PNG inputs.
    #[arg(long, conflicts_with = "count", required_unless_present = "count")]
    input: Option<PathBuf>,
    /// Number of unconditional samples.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Args)]
struct CascadeArgs {
    /// JSON cascade spec: {"stages": [{"checkpoint", "k", "strategy", "variance_mode"}], "save_intermediate"}.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, conflicts_with = "count", required_unless_present = "count")]
    input: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "cascade")]
    out: PathBuf,
    #[arg(long)]
    override_budget: bool,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// High-resolution reference PNGs; inputs are derived by downsampling.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    scale: usize,
    /// Directory holding `<stem>_sr.png` or `<stem>.png` per reference.
    #[arg(long, required_unless_present_any = ["checkpoint", "bicubic"])]
    outputs: Option<PathBuf>,
    /// Sample outputs from this checkpoint instead of reading them.
    #[arg(long, conflicts_with_all = ["outputs", "bicubic"])]
    checkpoint: Option<PathBuf>,
    /// Score bicubic upsampling of the derived inputs.
    #[arg(long, conflicts_with = "outputs")]
    bicubic: bool,
    /// identity | patch_moments
    #[arg(long, default_value = "patch_moments")]
    features: FeatureKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV path.
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Args)]
struct SearchArgs {
    /// Model to tune; omit to use the analytic Gaussian harness.
    #[arg(long, requires = "reference")]
    checkpoint: Option<PathBuf>,
    /// High-resolution held-out PNGs.
    #[arg(long, requires = "scale")]
    reference: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    /// Candidate step counts.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 16, 64])]
    k: Vec<usize>,
    #[arg(long, default_value = "geometric_gamma")]
    strategy: InferenceStrategy,
    #[arg(long, default_value = "posterior")]
    variance_mode: VarianceMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    override_budget: bool,
    #[arg(long, default_value = "patch_moments")]
    features: FeatureKind,
    /// Chains of the analytic harness.
    #[arg(long, default_value_t = 2000)]
    chains: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Results table CSV.
    #[arg(long, default_value = "search.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smaller sampled workloads.
    #[arg(long)]
    quick: bool,
    /// Also write the default training schedule as text.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn configure_threads() -> Result<(), PipelineError> {
    let Ok(raw) = std::env::var("IRF_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| PipelineError::Usage(format!("IRF_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PipelineError::Usage(format!("IRF_THREADS: {e}")))
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, PipelineError> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.mode {
        cfg.mode = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(p) = a.p_norm {
        cfg.p_norm = PNorm::try_from(p).map_err(PipelineError::Usage)?;
    }
    if let Some(v) = a.dropout {
        cfg.dropout = v;
    }
    if a.no_grad_clip {
        cfg.grad_clip = None;
    }
    if let Some(dir) = &a.data {
        let scale = a.scale.unwrap_or(cfg.data.scale());
        cfg.data = DataSpec::Directory { path: dir.clone(), scale };
    } else if let DataSpec::Synthetic { kind, count, size, scale } = &mut cfg.data {
        *kind = a.synthetic.unwrap_or(*kind);
        *count = a.count.unwrap_or(*count);
        *size = a.size.unwrap_or(*size);
        *scale = a.scale.unwrap_or(*scale);
    } else if a.synthetic.is_some() {
        let d = DataSpec::default();
        let DataSpec::Synthetic { count, size, scale, .. } = d else { unreachable!() };
        cfg.data = DataSpec::Synthetic {
            kind: a.synthetic.expect("checked"),
            count: a.count.unwrap_or(count),
            size: a.size.unwrap_or(size),
            scale: a.scale.unwrap_or(scale),
        };
    } else if let (Some(scale), DataSpec::Directory { scale: s, .. }) = (a.scale, &mut cfg.data) {
        *s = scale;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(a: TrainArgs) -> Result<(), PipelineError> {
    let cfg = train_config(&a)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("config.json"), &cfg.to_json())?;
    write_file(&a.out.join("schedule.txt"), &cfg.noise_schedule()?.to_text())?;
    let pairs = cfg.data.load(cfg.seed)?;
    let total = cfg.steps;
    let progress = |step: usize, loss: f64| {
        if step == 1 || step % 100 == 0 || step == total {
            eprintln!("step {step}/{total} loss {loss:.6}");
        }
    };
    let opts = TrainOptions {
        log: Some(a.out.join("loss.csv")),
        checkpoint_dir: Some(a.out.clone()),
        progress: (!a.quiet).then_some(&progress as &dyn Fn(usize, f64)),
    };
    let started = std::time::Instant::now();
    let outcome = pipeline::train(&cfg, &pairs, &opts)?;
    println!(
        "trained {} steps in {:.1} s; final loss {:.6}; checkpoint {}",
        outcome.checkpoint.step,
        started.elapsed().as_secs_f64(),
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        a.out.join("checkpoint.irckpt").display()
    );
    Ok(())
}

fn inputs(input: &Option<PathBuf>, count: Option<usize>) -> SampleInputs {
    match input {
        Some(dir) => SampleInputs::Dir(dir.clone()),
        None => SampleInputs::Unconditional(count.unwrap_or(1)),
    }
}

fn print_timings(files: &[PathBuf], seconds: &[f64], evaluations: usize) {
    for (f, s) in files.iter().zip(seconds) {
        println!("{}\t{:.1} ms", f.display(), s * 1e3);
    }
    println!("{} images, {evaluations} denoiser evaluations each", files.len());
}

fn run_sample(a: SampleArgs) -> Result<(), PipelineError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    create_dir(&a.out)?;
    let out = pipeline::sample_cmd(&ckpt, &inputs(&a.input, a.count), &a.sampling.settings(a.seed), &a.out)?;
    print_timings(&out.files, &out.seconds, out.evaluations_per_image);
    Ok(())
}

fn run_cascade(a: CascadeArgs) -> Result<(), PipelineError> {
    let spec = CascadeSpec::load(&a.config)?;
    create_dir(&a.out)?;
    let out = pipeline::cascade(&spec, &inputs(&a.input, a.count), a.seed, a.batch_size, a.override_budget, &a.out)?;
    print_timings(&out.files, &out.seconds, out.evaluations_per_image);
    println!("stage steps: {:?}", out.stage_steps);
    Ok(())
}

fn print_report(r: &Report, path: &Path) {
    println!(
        "{} images: PSNR {:.3} dB, SSIM {:.4}, consistency {:.3}e-5{}",
        r.rows.len(),
        r.mean_psnr_db,
        r.mean_ssim,
        r.mean_consistency * 1e5,
        r.frechet.map(|f| format!(", Fréchet {f:.4}")).unwrap_or_default()
    );
    println!("report: {}", path.display());
}

fn run_evaluate(a: EvaluateArgs) -> Result<(), PipelineError> {
    let report = if let Some(dir) = &a.outputs {
        pipeline::evaluate_dirs(dir, &a.reference, a.scale, a.features)?
    } else {
        let refs = data::load_pairs(&a.reference, a.scale)?;
        let outputs = match &a.checkpoint {
            Some(path) => {
                let ckpt = Checkpoint::load(path)?;
                let settings = a.sampling.settings(a.seed);
                let schedule = settings.inference_schedule(&ckpt.schedule)?;
                let xs: Vec<_> = refs.iter().map(|r| r.pair.x.clone()).collect();
                let (c, h, w) = refs[0].pair.y0.dims();
                pipeline::sample_batch(
                    &ckpt.model,
                    ckpt.resolution.condition.is_some().then_some(xs.as_slice()),
                    refs.len(),
                    (c, h, w),
                    &schedule,
                    settings.variance_mode,
                    a.seed,
                    0,
                    settings.batch_size,
                )?
                .images
            }
            None => refs.iter().map(|r| bicubic_baseline(&r.pair.x, a.scale)).collect::<Result<_, _>>()?,
        };
        let items: Vec<EvalItem> = refs
            .iter()
            .zip(&outputs)
            .map(|(r, o)| EvalItem { name: &r.name, output: o, reference: &r.pair.y0, input: &r.pair.x })
            .collect();
        evaluate_set(&items, a.scale, a.features)?
    };
    report.save(&a.out)?;
    print_report(&report, &a.out);
    Ok(())
}

fn run_search(a: SearchArgs) -> Result<(), PipelineError> {
    if let Some(&k) = a.k.iter().find(|&&k| k > pipeline::MAX_INFERENCE_STEPS) {
        if !a.override_budget {
            return Err(PipelineError::Usage(format!(
                "K={k} exceeds the inference budget of {} steps (pass --override-budget to allow it)",
                pipeline::MAX_INFERENCE_STEPS
            )));
        }
    }
    let grid: Vec<Candidate> = a.k.iter().map(|&steps| Candidate { steps, strategy: a.strategy.clone() }).collect();
    let outcome = match &a.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let reference = a.reference.as_ref().expect("clap enforces --reference");
            let pairs = data::load_pairs(reference, a.scale.expect("clap enforces --scale"))?;
            pipeline::search_cmd(&ckpt, &pairs, &grid, a.seed, a.variance_mode, a.features, a.batch_size)?
        }
        None => {
            let harness = AnalyticHarness { chains: a.chains, ..AnalyticHarness::default() };
            harness.search(&Default::default(), &grid, a.seed, a.variance_mode)?
        }
    };
    pipeline::write_search_table(&outcome, &a.out)?;
    for row in &outcome.table {
        let note = row.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default();
        println!("K={:<4} {:<16} frechet {:.6}{note}", row.candidate.steps, row.candidate.strategy.name(), row.score);
    }
    let w = outcome.winner();
    println!("selected K={} {}", w.candidate.steps, w.candidate.strategy.name());
    Ok(())
}

fn run_verify(a: VerifyArgs) -> Result<bool, PipelineError> {
    if let Some(path) = &a.out {
        write_file(path, &irf_core::schedule::NoiseSchedule::default().to_text())?;
    }
    let checks = pipeline::verify::run(a.seed, a.quick);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} passed, {failed} failed", checks.len() - failed);
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(a) => run_train(a).map(|()| true),
        Command::Sample(a) => run_sample(a).map(|()| true),
        Command::Cascade(a) => run_cascade(a).map(|()| true),
        Command::Evaluate(a) => run_evaluate(a).map(|()| true),
        Command::SearchSchedule(a) => run_search(a).map(|()| true),
        Command::Verify(a) => run_verify(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Training noise schedules, the piecewise-uniform noise-level prior used
//! during training, and the shorter inference schedules used for sampling.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule needs at least one step")]
    ZeroSteps,
    #[error("invalid schedule parameters: {0}")]
    InvalidParams(String),
    #[error("alpha_{t} = {value} is outside (0, 1)")]
    AlphaOutOfRange { t: usize, value: f64 },
    #[error("inference steps K={k} outside 1..={max}")]
    StepsOutOfRange { k: usize, max: usize },
    #[error("inference gammas must start at 1 and strictly decrease (violated at index {0})")]
    NotDecreasing(usize),
    #[error("terminal inference gamma {terminal} is weaker than the training terminal {train}")]
    WeakTerminal { terminal: f64, train: f64 },
    #[error("schedule text, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScheduleFamily {
    /// `alpha_t = 1 - beta_t` with beta linearly spaced from `beta_start` to `beta_end`.
    LinearBeta { beta_start: f64, beta_end: f64 },
    /// Squared-cosine cumulative schedule with a small offset near t = 0.
    Cosine { offset: f64 },
    /// Constant alpha, so gamma decays geometrically to `gamma_end`.
    GeometricGamma { gamma_end: f64 },
}

impl ScheduleFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleFamily::LinearBeta { .. } => "linear_beta",
            ScheduleFamily::Cosine { .. } => "cosine",
            ScheduleFamily::GeometricGamma { .. } => "geometric_gamma",
        }
    }

    /// Linear betas from 1e-4 to 2e-2 rescaled by `1000 / T`, which keeps
    /// `gamma_T` roughly independent of the step count.
    pub fn default_for(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        ScheduleFamily::LinearBeta {
            beta_start: (1e-4 * scale).min(0.999),
            beta_end: (2e-2 * scale).min(0.999),
        }
    }
}

/// Read access shared by training and inference chains.
pub trait Chain {
    /// Number of steps in the chain.
    fn steps(&self) -> usize;
    /// Per-step retention for `t` in `1..=steps`.
    fn alpha(&self, t: usize) -> f64;
    /// Cumulative retention for `t` in `0..=steps`, with `gamma(0) == 1`.
    fn gamma(&self, t: usize) -> f64;
}

impl Chain for NoiseSchedule {
    fn steps(&self) -> usize {
        self.alpha.len()
    }
    fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }
    fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }
}

impl Chain for InferenceSchedule {
    fn steps(&self) -> usize {
        self.alpha.len()
    }
    fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }
    fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }
}

/// Per-step `alpha_t` (t = 1..=T) and cumulative `gamma_t` (t = 0..=T, gamma_0 = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    family: ScheduleFamily,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
}

pub const DEFAULT_TRAIN_STEPS: usize = 2000;

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(ScheduleFamily::default_for(DEFAULT_TRAIN_STEPS), DEFAULT_TRAIN_STEPS)
            .expect("default schedule is valid")
    }
}

pub fn build_schedule(family: ScheduleFamily, steps: usize) -> Result<NoiseSchedule, ScheduleError> {
    if steps == 0 {
        return Err(ScheduleError::ZeroSteps);
    }
    let alpha: Vec<f64> = match family {
        ScheduleFamily::LinearBeta { beta_start, beta_end } => {
            if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                return Err(ScheduleError::InvalidParams(format!(
                    "linear_beta needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
                )));
            }
            (0..steps)
                .map(|i| {
                    let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                    1.0 - (beta_start + (beta_end - beta_start) * frac)
                })
                .collect()
        }
        ScheduleFamily::Cosine { offset } => {
            if !(offset > 0.0 && offset < 1.0) {
                return Err(ScheduleError::InvalidParams(format!("cosine offset {offset} outside (0, 1)")));
            }
            let f = |t: f64| (((t / steps as f64) + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps)
                .map(|t| {
                    let beta = 1.0 - f(t as f64) / f(t as f64 - 1.0);
                    1.0 - beta.clamp(1e-8, 0.999)
                })
                .collect()
        }
        ScheduleFamily::GeometricGamma { gamma_end } => {
            if !(gamma_end > 0.0 && gamma_end < 1.0) {
                return Err(ScheduleError::InvalidParams(format!("gamma_end {gamma_end} outside (0, 1)")));
            }
            vec![gamma_end.powf(1.0 / steps as f64); steps]
        }
    };
    from_alphas(family, alpha)
}

/// Validates explicit `alpha_1..=alpha_T` and accumulates the gammas.
pub fn from_alphas(family: ScheduleFamily, alpha: Vec<f64>) -> Result<NoiseSchedule, ScheduleError> {
    if alpha.is_empty() {
        return Err(ScheduleError::ZeroSteps);
    }
    let mut gamma = Vec::with_capacity(alpha.len() + 1);
    gamma.push(1.0);
    for (i, &a) in alpha.iter().enumerate() {
        if !(a > 0.0 && a < 1.0) {
            return Err(ScheduleError::AlphaOutOfRange { t: i + 1, value: a });
        }
        let next = gamma[i] * a;
        if !(next > 0.0) {
            return Err(ScheduleError::InvalidParams(format!("gamma underflows to zero at t={}", i + 1)));
        }
        gamma.push(next);
    }
    Ok(NoiseSchedule { family, alpha, gamma })
}

impl NoiseSchedule {
    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    /// Number of training steps T.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `gamma_t` for `t` in `0..=T`.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn terminal_gamma(&self) -> f64 {
        self.gamma[self.steps()]
    }

    /// Draws `t ~ U{1..T}` then `gamma ~ U(gamma_t, gamma_{t-1})` on the open interval.
    pub fn sample_gamma<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, usize) {
        let t = rng.random_range(1..=self.steps());
        let (lo, hi) = (self.gamma[t], self.gamma[t - 1]);
        loop {
            let g = lo + rng.random::<f64>() * (hi - lo);
            if g > lo && g < hi {
                return (g, t);
            }
        }
    }

    /// Human-readable dump: header `T=<n> family=<f>` then `t alpha gamma`
    /// rows with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("T={} family={}\n", self.steps(), self.family.name());
        for t in 1..=self.steps() {
            writeln!(out, "{} {:.16e} {:.16e}", t, self.alpha(t), self.gamma(t)).expect("string write");
        }
        out
    }

    /// Parses [`NoiseSchedule::to_text`] output. Family parameters are
    /// recovered from the rows where the family determines them.
    pub fn from_text(text: &str) -> Result<Self, ScheduleError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(ScheduleError::Parse { line: 1, msg: "empty input".into() })?;
        let perr = |line: usize, msg: String| ScheduleError::Parse { line: line + 1, msg };
        let mut steps = None;
        let mut family_name = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("T", v)) => steps = Some(v.parse::<usize>().map_err(|e| perr(0, e.to_string()))?),
                Some(("family", v)) => family_name = Some(v.to_string()),
                _ => return Err(perr(0, format!("unexpected header field `{field}`"))),
            }
        }
        let steps = steps.ok_or_else(|| perr(0, "missing T=".into()))?;
        let family_name = family_name.ok_or_else(|| perr(0, "missing family=".into()))?;
        let mut alpha = Vec::with_capacity(steps);
        let mut gamma_rows = Vec::with_capacity(steps);
        for (ln, line) in lines {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 3 {
                return Err(perr(ln, format!("expected 3 columns, got {}", cols.len())));
            }
            let t: usize = cols[0].parse().map_err(|e: std::num::ParseIntError| perr(ln, e.to_string()))?;
            if t != alpha.len() + 1 {
                return Err(perr(ln, format!("expected t={}, got {t}", alpha.len() + 1)));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| perr(ln, e.to_string()));
            alpha.push(parse(cols[1])?);
            gamma_rows.push(parse(cols[2])?);
        }
        if alpha.len() != steps {
            return Err(perr(0, format!("header says T={steps} but {} rows follow", alpha.len())));
        }
        let family = match family_name.as_str() {
            "linear_beta" => ScheduleFamily::LinearBeta { beta_start: 1.0 - alpha[0], beta_end: 1.0 - alpha[steps - 1] },
            "cosine" => ScheduleFamily::Cosine { offset: 0.008 },
            "geometric_gamma" => ScheduleFamily::GeometricGamma { gamma_end: gamma_rows[steps - 1] },
            other => return Err(perr(0, format!("unknown family `{other}`"))),
        };
        let schedule = from_alphas(family, alpha)?;
        // The stored gammas are the running product, so they must agree bit-for-bit.
        if let Some(t) = (1..=steps).find(|&t| schedule.gamma(t) != gamma_rows[t - 1]) {
            return Err(perr(t, "gamma column disagrees with the running product of alphas".into()));
        }
        Ok(schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceStrategy {
    /// K training indices spread evenly over 1..=T, always ending at T.
    SubsampleIndex,
    /// Gammas spaced geometrically from 1 down to the training gamma_T.
    GeometricGamma,
    /// Explicit `gamma'_1..=gamma'_K`.
    Custom(Vec<f64>),
}

impl InferenceStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            InferenceStrategy::SubsampleIndex => "subsample_index",
            InferenceStrategy::GeometricGamma => "geometric_gamma",
            InferenceStrategy::Custom(_) => "custom",
        }
    }
}

impl std::str::FromStr for InferenceStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subsample_index" | "subsample" => Ok(Self::SubsampleIndex),
            "geometric_gamma" | "geometric" => Ok(Self::GeometricGamma),
            other => Err(format!("unknown inference strategy `{other}` (subsample_index | geometric_gamma)")),
        }
    }
}

/// Shorter sampling chain: `gamma'_0 = 1 > gamma'_1 > ... > gamma'_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSchedule {
    gamma: Vec<f64>,
    alpha: Vec<f64>,
}

impl InferenceSchedule {
    /// Validates explicit gammas `gamma'_1..=gamma'_K` against a training terminal level.
    pub fn from_gammas(gammas: &[f64], train_terminal: f64) -> Result<Self, ScheduleError> {
        if gammas.is_empty() {
            return Err(ScheduleError::StepsOutOfRange { k: 0, max: usize::MAX });
        }
        let mut gamma = Vec::with_capacity(gammas.len() + 1);
        gamma.push(1.0);
        gamma.extend_from_slice(gammas);
        for k in 1..gamma.len() {
            if !(gamma[k] > 0.0 && gamma[k] < gamma[k - 1]) {
                return Err(ScheduleError::NotDecreasing(k));
            }
        }
        let terminal = *gamma.last().expect("non-empty");
        if terminal > train_terminal {
            return Err(ScheduleError::WeakTerminal { terminal, train: train_terminal });
        }
        let alpha = gamma.windows(2).map(|w| w[1] / w[0]).collect();
        Ok(Self { gamma, alpha })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `gamma'_k` for `k` in `0..=K`.
    pub fn gamma(&self, k: usize) -> f64 {
        self.gamma[k]
    }

    /// `alpha'_k = gamma'_k / gamma'_{k-1}` for `k` in `1..=K`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }
}

pub fn make_inference_schedule(
    train: &NoiseSchedule,
    steps: usize,
    strategy: &InferenceStrategy,
) -> Result<InferenceSchedule, ScheduleError> {
    let t_max = train.steps();
    let terminal = train.terminal_gamma();
    let gammas: Vec<f64> = match strategy {
        InferenceStrategy::SubsampleIndex => {
            if steps == 0 || steps > t_max {
                return Err(ScheduleError::StepsOutOfRange { k: steps, max: t_max });
            }
            (1..=steps).map(|k| train.gamma((k * t_max).div_ceil(steps))).collect()
        }
        InferenceStrategy::GeometricGamma => {
            if steps == 0 || steps > t_max {
                return Err(ScheduleError::StepsOutOfRange { k: steps, max: t_max });
            }
            let log_end = terminal.ln();
            (1..=steps)
                .map(|k| if k == steps { terminal } else { (log_end * k as f64 / steps as f64).exp() })
                .collect()
        }
        InferenceStrategy::Custom(g) => {
            if g.len() != steps {
                return Err(ScheduleError::InvalidParams(format!(
                    "custom schedule lists {} gammas for K={steps}",
                    g.len()
                )));
            }
            g.clone()
        }
    };
    InferenceSchedule::from_gammas(&gammas, terminal)
}

/// One entry of a schedule search grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub steps: usize,
    pub strategy: InferenceStrategy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    /// `f64::INFINITY` when the candidate could not be built or sampled.
    pub score: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: usize,
    pub table: Vec<ScoredCandidate>,
}

impl SearchOutcome {
    pub fn winner(&self) -> &ScoredCandidate {
        &self.table[self.best]
    }
}

/// Scores every candidate with `evaluate` (lower is better) and returns the
/// argmin, breaking ties by fewer steps and then list order.
///
/// `evaluate` receives the candidate's position so callers can derive an
/// independent, reproducible RNG stream per candidate.
pub fn search_inference_schedule<F, E>(
    train: &NoiseSchedule,
    candidates: &[Candidate],
    mut evaluate: F,
) -> Result<SearchOutcome, ScheduleError>
where
    F: FnMut(usize, &InferenceSchedule) -> Result<f64, E>,
    E: std::fmt::Display,
{
    if candidates.is_empty() {
        return Err(ScheduleError::InvalidParams("empty candidate list".into()));
    }
    let table: Vec<ScoredCandidate> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let outcome = make_inference_schedule(train, c.steps, &c.strategy)
                .map_err(|e| e.to_string())
                .and_then(|s| evaluate(i, &s).map_err(|e| e.to_string()));
            match outcome {
                Ok(score) if score.is_nan() => ScoredCandidate {
                    candidate: c.clone(),
                    score: f64::INFINITY,
                    error: Some("score is NaN".into()),
                },
                Ok(score) => ScoredCandidate { candidate: c.clone(), score, error: None },
                Err(e) => ScoredCandidate { candidate: c.clone(), score: f64::INFINITY, error: Some(e) },
            }
        })
        .collect();
    let best = (0..table.len())
        .min_by(|&a, &b| {
            table[a]
                .score
                .total_cmp(&table[b].score)
                .then(table[a].candidate.steps.cmp(&table[b].candidate.steps))
                .then(a.cmp(&b))
        })
        .expect("non-empty");
    Ok(SearchOutcome { best, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(b0: f64, b1: f64, t: usize) -> NoiseSchedule {
        build_schedule(ScheduleFamily::LinearBeta { beta_start: b0, beta_end: b1 }, t).unwrap()
    }

    #[test]
    fn constant_beta_two_steps() {
        let s = linear(0.1, 0.1, 2);
        assert_eq!(s.alphas(), &[0.9, 0.9]);
        assert_eq!(s.gamma(0), 1.0);
        assert!((s.gamma(1) - 0.9).abs() < 1e-15);
        assert!((s.gamma(2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn single_step_gamma_is_alpha() {
        for fam in [
            ScheduleFamily::LinearBeta { beta_start: 0.3, beta_end: 0.3 },
            ScheduleFamily::Cosine { offset: 0.008 },
            ScheduleFamily::GeometricGamma { gamma_end: 0.2 },
        ] {
            let s = build_schedule(fam, 1).unwrap();
            assert_eq!(s.gamma(1), s.alpha(1));
        }
    }

    #[test]
    fn unscaled_linear_default_reaches_near_pure_noise() {
        let s = linear(1e-4, 0.02, 2000);
        // independent log-sum: sum of ln(1 - beta_i)
        let log_gamma: f64 = (0..2000).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 1999.0)).ln()).sum();
        assert!((s.terminal_gamma().ln() - log_gamma).abs() < 1e-9);
        assert!(s.terminal_gamma() < 1e-3);
        assert!(NoiseSchedule::default().terminal_gamma() < 1e-3);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(build_schedule(ScheduleFamily::default_for(10), 0), Err(ScheduleError::ZeroSteps));
        assert!(build_schedule(ScheduleFamily::LinearBeta { beta_start: 0.2, beta_end: 0.1 }, 5).is_err());
        assert!(build_schedule(ScheduleFamily::LinearBeta { beta_start: 0.0, beta_end: 0.1 }, 5).is_err());
        assert!(build_schedule(ScheduleFamily::GeometricGamma { gamma_end: 1.0 }, 5).is_err());
    }

    #[test]
    fn gamma_draws_stay_inside_support() {
        let s = build_schedule(ScheduleFamily::GeometricGamma { gamma_end: 0.5 }, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let (g, t) = s.sample_gamma(&mut rng);
            assert_eq!(t, 1);
            assert!(g > 0.5 && g < 1.0);
        }
    }

    fn four_step() -> NoiseSchedule {
        build_schedule(ScheduleFamily::GeometricGamma { gamma_end: 0.9f64.powi(4) }, 4).unwrap()
    }

    #[test]
    fn subsample_examples() {
        let s = four_step();
        let inf = make_inference_schedule(&s, 2, &InferenceStrategy::SubsampleIndex).unwrap();
        assert_eq!(inf.gammas(), &[1.0, s.gamma(2), s.gamma(4)]);
        assert!((inf.gamma(1) - 0.81).abs() < 1e-12 && (inf.gamma(2) - 0.6561).abs() < 1e-12);
        assert!((inf.alpha(1) - 0.81).abs() < 1e-12 && (inf.alpha(2) - 0.81).abs() < 1e-12);

        let full = make_inference_schedule(&s, 4, &InferenceStrategy::SubsampleIndex).unwrap();
        assert_eq!(full.gammas(), s.gammas());

        for strat in [InferenceStrategy::SubsampleIndex, InferenceStrategy::GeometricGamma] {
            let one = make_inference_schedule(&s, 1, &strat).unwrap();
            assert_eq!(one.gammas(), &[1.0, s.terminal_gamma()]);
            assert_eq!(one.alpha(1), s.terminal_gamma());
        }
        assert!(make_inference_schedule(&s, 5, &InferenceStrategy::SubsampleIndex).is_err());
        assert!(make_inference_schedule(&s, 0, &InferenceStrategy::GeometricGamma).is_err());
    }

    #[test]
    fn endpoint_is_preserved_exactly() {
        let s = NoiseSchedule::default();
        for k in [1, 2, 7, 50, 100, 2000] {
            for strat in [InferenceStrategy::SubsampleIndex, InferenceStrategy::GeometricGamma] {
                let inf = make_inference_schedule(&s, k, &strat).unwrap();
                assert_eq!(inf.gamma(k), s.terminal_gamma());
                assert!(inf.alphas().iter().all(|&a| a > 0.0 && a < 1.0));
            }
        }
    }

    #[test]
    fn custom_schedule_validation() {
        let s = four_step();
        let bad = InferenceStrategy::Custom(vec![0.8, 0.9, 0.6561]);
        assert_eq!(make_inference_schedule(&s, 3, &bad), Err(ScheduleError::NotDecreasing(2)));
        let weak = InferenceStrategy::Custom(vec![0.8, 0.7]);
        assert!(matches!(make_inference_schedule(&s, 2, &weak), Err(ScheduleError::WeakTerminal { .. })));
    }

    #[test]
    fn text_round_trip_is_exact() {
        for fam in [ScheduleFamily::default_for(300), ScheduleFamily::Cosine { offset: 0.008 }] {
            let s = build_schedule(fam, 300).unwrap();
            let text = s.to_text();
            assert!(text.starts_with(&format!("T=300 family={}\n", fam.name())));
            let back = NoiseSchedule::from_text(&text).unwrap();
            assert_eq!(back.alphas(), s.alphas());
            assert_eq!(back.gammas(), s.gammas());
        }
        assert!(NoiseSchedule::from_text("T=2 family=linear_beta\n1 0.9 0.9\n").is_err());
    }

    #[test]
    fn search_prefers_lowest_then_fewer_steps() {
        let s = four_step();
        let grid = vec![
            Candidate { steps: 4, strategy: InferenceStrategy::SubsampleIndex },
            Candidate { steps: 2, strategy: InferenceStrategy::SubsampleIndex },
            Candidate { steps: 3, strategy: InferenceStrategy::Custom(vec![0.9, 0.95, 0.6]) },
        ];
        let out = search_inference_schedule(&s, &grid, |_, _| Ok::<_, String>(1.0)).unwrap();
        assert_eq!(out.best, 1);
        assert!(out.table[2].score.is_infinite());
        assert!(out.table[2].error.is_some());

        let single = search_inference_schedule(&s, &grid[..1], |_, _| Ok::<_, String>(7.5)).unwrap();
        assert_eq!(single.best, 0);
        assert_eq!(single.winner().score, 7.5);

        let failing = search_inference_schedule(&s, &grid[..2], |i, _| if i == 0 { Err("boom") } else { Ok(3.0) }).unwrap();
        assert_eq!(failing.best, 1);
    }
}

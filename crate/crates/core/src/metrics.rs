//! Image quality metrics and Gaussian feature statistics.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{bicubic_resize, DataError, Image};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("feature statistics need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("feature dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("matrix square root failed: eigenvalue {0:e} below tolerance")]
    NegativeEigenvalue(f64),
    #[error("empty evaluation set")]
    Empty,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("report: {0}")]
    Report(String),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Peak-to-peak extent of the `[-1, 1]` working range.
pub const DYNAMIC_RANGE: f64 = 2.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Display multiplier for consistency values.
pub const CONSISTENCY_DISPLAY: f64 = 1e5;
/// Eigenvalues of the square-root argument above `-tol * max(1, |largest|)` are clipped to 0.
pub const SQRT_EIGEN_TOL: f64 = 1e-10;

fn same_dims(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricsError::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b, "psnr")?;
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean local structural similarity over all valid window positions,
/// averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b, "ssim")?;
    let (c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { height: h, width: w, window: SSIM_WINDOW });
    }
    let taps = ssim_taps();
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        let prod = |f: &dyn Fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
        let mu_a = filter_valid(pa, h, w, &taps);
        let mu_b = filter_valid(pb, h, w, &taps);
        let aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
        let bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
        let ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
        let local: f64 = (0..mu_a.len())
            .map(|i| {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let (va, vb, cov) = (aa[i] - ma * ma, bb[i] - mb * mb, ab[i] - ma * mb);
                ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
            })
            .sum();
        total += local / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub mse: f64,
}

impl Consistency {
    pub fn display(&self) -> f64 {
        self.mse * CONSISTENCY_DISPLAY
    }
}

/// MSE between the anti-aliased bicubic downsampling of `output_hi` and `input_lo`.
pub fn consistency_mse(output_hi: &Image, input_lo: &Image, scale: usize) -> Result<Consistency> {
    let (c, h, w) = output_hi.dims();
    let (cl, hl, wl) = input_lo.dims();
    if scale == 0 || c != cl || h != hl * scale || w != wl * scale {
        return Err(MetricsError::Shape(format!(
            "consistency: output {c}x{h}x{w} is not input {cl}x{hl}x{wl} at scale {scale}"
        )));
    }
    let down = bicubic_resize(output_hi, hl, wl, true)?;
    Ok(Consistency { mse: down.mse(input_lo)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Raw pixel values.
    IdentityPixels,
    /// Per channel: mean and standard deviation, across all 3x3 patches, of
    /// the patch mean, patch variance and patch gradient energy.
    #[default]
    PatchMoments,
}

impl std::str::FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "identity_pixels" | "pixels" => Ok(Self::IdentityPixels),
            "patch_moments" => Ok(Self::PatchMoments),
            other => Err(format!("unknown feature kind `{other}` (identity_pixels | patch_moments)")),
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn features(img: &Image, kind: FeatureKind) -> Vec<f64> {
    match kind {
        FeatureKind::IdentityPixels => img.data().to_vec(),
        FeatureKind::PatchMoments => {
            let (c, h, w) = img.dims();
            let mut out = Vec::with_capacity(6 * c);
            for ch in 0..c {
                let p = img.plane(ch);
                let (ph, pw) = (h.saturating_sub(2), w.saturating_sub(2));
                let mut means = Vec::with_capacity(ph * pw);
                let mut vars = Vec::with_capacity(ph * pw);
                let mut energies = Vec::with_capacity(ph * pw);
                for y in 0..ph {
                    for x in 0..pw {
                        let at = |dy: usize, dx: usize| p[(y + dy) * w + x + dx];
                        let mut s = 0.0;
                        let mut s2 = 0.0;
                        let mut e = 0.0;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let v = at(dy, dx);
                                s += v;
                                s2 += v * v;
                                if dx < 2 {
                                    e += (at(dy, dx + 1) - v).powi(2);
                                }
                                if dy < 2 {
                                    e += (at(dy + 1, dx) - v).powi(2);
                                }
                            }
                        }
                        let m = s / 9.0;
                        means.push(m);
                        vars.push((s2 / 9.0 - m * m).max(0.0));
                        energies.push(e / 12.0);
                    }
                }
                for v in [&means, &vars, &energies] {
                    let (m, sd) = if v.is_empty() { (0.0, 0.0) } else { mean_std(v) };
                    out.push(m);
                    out.push(sd);
                }
            }
            out
        }
    }
}

/// Gaussian fit of a feature set: mean, unbiased covariance and sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    count: usize,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(MetricsError::Dimension(d, cov.nrows()));
        }
        let asym = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).fold(0.0f64, |m, (i, j)| {
            m.max((cov[(i, j)] - cov[(j, i)]).abs())
        });
        if asym > 1e-10 {
            return Err(MetricsError::Asymmetric(asym));
        }
        Ok(Self { mean: DVector::from_vec(mean), cov, count })
    }

    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let n = vectors.len();
        if n < 2 {
            return Err(MetricsError::TooFewSamples(n));
        }
        let d = vectors[0].len();
        if let Some(v) = vectors.iter().find(|v| v.len() != d) {
            return Err(MetricsError::Dimension(d, v.len()));
        }
        let mut mean = vec![0.0; d];
        for v in vectors {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |r, c| vectors[r][c] - mean[c]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

pub fn fit_stats(images: &[Image], kind: FeatureKind) -> Result<FeatureStats> {
    let vectors: Vec<Vec<f64>> = images.par_iter().map(|img| features(img, kind)).collect();
    FeatureStats::from_vectors(&vectors)
}

/// Symmetric PSD square root; small negative eigenvalues are clipped to 0.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let largest = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = SQRT_EIGEN_TOL * largest.max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -tol {
            return Err(MetricsError::NegativeEigenvalue(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|m1 - m2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2))`, clamped at 0.
///
/// `tr (C1 C2)^(1/2)` is evaluated as `tr (S C2 S)^(1/2)` with `S = C1^(1/2)`,
/// which has the same spectrum and stays symmetric.
pub fn frechet(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Dimension(a.dim(), b.dim()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let s = sqrt_psd(&a.cov)?;
    let mut inner = &s * &b.cov * &s;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrt_psd(&inner)?.trace();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Metrics of one output against its reference and low-resolution input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub consistency: Consistency,
}

pub fn image_metrics(name: &str, output: &Image, reference: &Image, input_lo: &Image, scale: usize) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        name: name.to_string(),
        psnr_db: psnr(output, reference)?,
        ssim: ssim(output, reference)?,
        consistency: consistency_mse(output, input_lo, scale)?,
    })
}

/// One evaluation triple: output, reference, low-resolution input.
pub struct EvalItem<'a> {
    pub name: &'a str,
    pub output: &'a Image,
    pub reference: &'a Image,
    pub input: &'a Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_consistency: f64,
    pub frechet: Option<f64>,
}

/// Per-image metrics plus means; the Fréchet proxy compares the output and
/// reference sets when there are at least two images.
pub fn evaluate_set(items: &[EvalItem<'_>], scale: usize, kind: FeatureKind) -> Result<Report> {
    if items.is_empty() {
        return Err(MetricsError::Empty);
    }
    let rows = items
        .par_iter()
        .map(|it| image_metrics(it.name, it.output, it.reference, it.input, scale))
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let frechet = if items.len() >= 2 {
        let outs: Vec<Image> = items.iter().map(|it| it.output.clone()).collect();
        let refs: Vec<Image> = items.iter().map(|it| it.reference.clone()).collect();
        Some(frechet(&fit_stats(&outs, kind)?, &fit_stats(&refs, kind)?)?)
    } else {
        None
    };
    Ok(Report {
        mean_psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_consistency: rows.iter().map(|r| r.consistency.mse).sum::<f64>() / n,
        rows,
        frechet,
    })
}

/// Column set of the metrics CSV; the final row is named `mean`.
pub const REPORT_HEADER: [&str; 6] = ["image", "psnr_db", "ssim", "consistency_mse", "consistency_x1e5", "frechet"];

impl Report {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let err = |e: csv::Error| MetricsError::Report(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                format!("{:.6}", r.psnr_db),
                format!("{:.6}", r.ssim),
                format!("{:.9e}", r.consistency.mse),
                format!("{:.6}", r.consistency.display()),
                String::new(),
            ])
            .map_err(err)?;
        }
        w.write_record([
            "mean".to_string(),
            format!("{:.6}", self.mean_psnr_db),
            format!("{:.6}", self.mean_ssim),
            format!("{:.9e}", self.mean_consistency),
            format!("{:.6}", self.mean_consistency * CONSISTENCY_DISPLAY),
            self.frechet.map(|f| format!("{f:.9e}")).unwrap_or_default(),
        ])
        .map_err(err)?;
        w.flush().map_err(|e| MetricsError::Report(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| MetricsError::Report(format!("{}: {e}", dir.display())))?;
        }
        let file = std::fs::File::create(path).map_err(|e| MetricsError::Report(format!("{}: {e}", path.display())))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_pair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise_image(c: usize, h: usize, w: usize, seed: u64, amp: f64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); (amp * z).clamp(-1.0, 1.0) }).collect();
        Image::new(c, h, w, data).unwrap()
    }

    fn structured(h: usize, w: usize) -> Image {
        Image::from_fn(1, h, w, |_, y, x| 0.6 * ((y as f64 * 0.7).sin() * (x as f64 * 0.4).cos())).unwrap()
    }

    #[test]
    fn psnr_values() {
        let a = structured(8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 0.2);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = noise_image(1, 8, 8, 3, 0.3);
        assert_eq!(psnr(&a, &c).unwrap(), psnr(&c, &a).unwrap());
        assert!(matches!(psnr(&a, &structured(8, 9)), Err(MetricsError::Shape(_))));
    }

    /// Direct per-window evaluation with two-pass moments.
    fn ssim_naive(a: &Image, b: &Image) -> f64 {
        let (c, h, w) = a.dims();
        let half = (SSIM_WINDOW / 2) as f64;
        let mut win = vec![vec![0.0; SSIM_WINDOW]; SSIM_WINDOW];
        let mut total = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - half, j as f64 - half);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let c1 = (0.01f64 * 2.0).powi(2);
        let c2 = (0.03f64 * 2.0).powi(2);
        let mut acc = 0.0;
        for ch in 0..c {
            let mut sum = 0.0;
            let mut count = 0;
            for y in 0..=h - SSIM_WINDOW {
                for x in 0..=w - SSIM_WINDOW {
                    let px = |img: &Image, i: usize, j: usize| img.get(ch, y + i, x + j);
                    let mut ma = 0.0;
                    let mut mb = 0.0;
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            ma += win[i][j] / total * px(a, i, j);
                            mb += win[i][j] / total * px(b, i, j);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = win[i][j] / total;
                            let (da, db) = (px(a, i, j) - ma, px(b, i, j) - mb);
                            va += wt * da * da;
                            vb += wt * db * db;
                            cov += wt * da * db;
                        }
                    }
                    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            acc += sum / count as f64;
        }
        acc / c as f64
    }

    #[test]
    fn ssim_matches_naive_reference() {
        for (seed, (c, h, w)) in [(1u64, (1, 11, 11)), (2, (2, 16, 13)), (3, (3, 20, 24))] {
            let a = noise_image(c, h, w, seed, 0.5);
            let b = Image::new(c, h, w, a.data().iter().zip(noise_image(c, h, w, seed + 10, 0.2).data()).map(|(x, y)| x + y).collect()).unwrap();
            let fast = ssim(&a, &b).unwrap();
            assert!((fast - ssim_naive(&a, &b)).abs() < 1e-8, "{fast}");
        }
    }

    #[test]
    fn ssim_identity_and_sign() {
        let a = structured(16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let checker = Image::from_fn(1, 16, 16, |_, y, x| if (x + y) % 2 == 0 { 0.5 } else { -0.5 }).unwrap();
        assert!(ssim(&checker, &checker.map(|v| -v)).unwrap() < 0.0);
        assert!(matches!(ssim(&structured(10, 16), &structured(10, 16)), Err(MetricsError::TooSmall { .. })));
    }

    #[test]
    fn consistency_examples() {
        let hi = structured(16, 16);
        let pair = make_pair(&hi, 4).unwrap();
        assert_eq!(consistency_mse(&pair.y0, &pair.x, 4).unwrap().mse, 0.0);
        let shifted = consistency_mse(&hi.map(|v| v + 0.01), &pair.x, 4).unwrap();
        assert!((shifted.mse - 1e-4).abs() < 1e-12);
        assert!((shifted.display() - 10.0).abs() < 1e-7);
        let r = consistency_mse(&noise_image(1, 16, 16, 5, 0.5), &noise_image(1, 4, 4, 6, 0.5), 4).unwrap();
        assert!(r.mse > 0.0);
        assert!(consistency_mse(&hi, &pair.x, 2).is_err());
    }

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats::new(vec![mean], DMatrix::from_element(1, 1, var), 10).unwrap()
    }

    #[test]
    fn frechet_examples() {
        let s = stats_1d(0.0, 1.0);
        assert!(frechet(&s, &s).unwrap().abs() < 1e-12);
        assert!((frechet(&s, &stats_1d(1.0, 4.0)).unwrap() - 2.0).abs() < 1e-12);
        let bad = FeatureStats::new(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]), 3);
        assert!(matches!(bad, Err(MetricsError::Asymmetric(_))));
        assert!(matches!(frechet(&s, &FeatureStats::new(vec![0.0; 2], DMatrix::identity(2, 2), 3).unwrap()), Err(MetricsError::Dimension(1, 2))));
        assert!(matches!(FeatureStats::from_vectors(&[vec![1.0]]), Err(MetricsError::TooFewSamples(1))));
    }

    #[test]
    fn frechet_of_fitted_sets() {
        let imgs: Vec<Image> = (0..6).map(|i| noise_image(1, 6, 6, i, 0.4)).collect();
        for kind in [FeatureKind::IdentityPixels, FeatureKind::PatchMoments] {
            let s = fit_stats(&imgs, kind).unwrap();
            assert!(frechet(&s, &s).unwrap() < 1e-8);
        }
        assert_eq!(fit_stats(&imgs, FeatureKind::PatchMoments).unwrap().dim(), 6);
    }

    #[test]
    fn report_has_row_per_image_and_summary() {
        let refs: Vec<Image> = (0..3).map(|i| structured(12, 12).map(|v| v * (0.5 + 0.1 * i as f64))).collect();
        let pairs: Vec<_> = refs.iter().map(|r| make_pair(r, 2).unwrap()).collect();
        let names = ["a", "b", "c"];
        let items: Vec<EvalItem> = (0..3)
            .map(|i| EvalItem { name: names[i], output: &refs[i], reference: &refs[i], input: &pairs[i].x })
            .collect();
        let report = evaluate_set(&items, 2, FeatureKind::PatchMoments).unwrap();
        assert_eq!(report.mean_psnr_db, PSNR_CAP_DB);
        assert!((report.mean_ssim - 1.0).abs() < 1e-12);
        assert_eq!(report.mean_consistency, 0.0);
        assert!(report.frechet.unwrap() < 1e-10);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], REPORT_HEADER.join(","));
        assert!(lines[4].starts_with("mean,"));
    }
}

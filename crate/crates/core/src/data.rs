//! Images in the `[-1, 1]` working range, bicubic resampling, the
//! low-resolution degradation, synthetic datasets and PNG I/O.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Element, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("image dimensions must be positive, got {channels}x{height}x{width}")]
    ZeroSize { channels: usize, height: usize, width: usize },
    #[error("pixel buffer has {len} values, expected {expected}")]
    BufferLength { len: usize, expected: usize },
    #[error("{context}: {height}x{width} is not divisible by scale {scale}")]
    Indivisible { context: String, height: usize, width: usize, scale: usize },
    #[error("{0}")]
    Mismatch(String),
    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },
    #[error("no PNG files found in {0}")]
    EmptyDir(PathBuf),
}

type Result<T> = std::result::Result<T, DataError>;

/// Planar `channels x height x width` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(DataError::ZeroSize { channels, height, width });
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(DataError::BufferLength { len: data.len(), expected });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn clipped(&self) -> Self {
        self.map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v)).collect();
        Tensor::new(&[self.channels, self.height, self.width], data).expect("image dims are positive")
    }

    /// Accepts `[C, H, W]` or `[1, C, H, W]`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let dims = match *t.shape() {
            [c, h, w] | [1, c, h, w] => (c, h, w),
            _ => return Err(DataError::Mismatch(format!("expected a [C,H,W] tensor, got {:?}", t.shape()))),
        };
        Self::new(dims.0, dims.1, dims.2, t.to_f64_vec())
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(DataError::Mismatch(format!(
                "image shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// Stacks same-shaped images into a `[N, C, H, W]` tensor.
pub fn batch_tensor<T: Element>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| DataError::Mismatch("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.dims() != first.dims() {
            return Err(DataError::Mismatch(format!("batch mixes {:?} and {:?}", first.dims(), img.dims())));
        }
        data.extend(img.data.iter().map(|&v| T::of(v)));
    }
    let (c, h, w) = first.dims();
    Ok(Tensor::new(&[images.len(), c, h, w], data).expect("dims checked"))
}

/// Splits a `[N, C, H, W]` tensor into images.
pub fn unbatch_tensor<T: Element>(t: &Tensor<T>) -> Result<Vec<Image>> {
    let [n, c, h, w] = *t.shape() else {
        return Err(DataError::Mismatch(format!("expected a [N,C,H,W] tensor, got {:?}", t.shape())));
    };
    let per = c * h * w;
    (0..n)
        .map(|i| Image::new(c, h, w, t.data()[i * per..(i + 1) * per].iter().map(|v| v.f64()).collect()))
        .collect()
}

/// Low/high resolution training pair with `y0 = x * scale` in each spatial dim.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub x: Image,
    pub y0: Image,
    pub scale: usize,
}

/// Catmull-Rom cubic, `a = -0.5`.
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Sparse resampling taps for one output coordinate.
#[derive(Debug, Clone)]
struct Taps {
    start: usize,
    weights: Vec<f64>,
}

/// Per-output-index taps over clamped source indices; weights sum to one.
fn axis_taps(input: usize, output: usize, antialias: bool) -> Vec<Taps> {
    let ratio = input as f64 / output as f64;
    let stretch = if antialias && ratio > 1.0 { ratio } else { 1.0 };
    let support = 2.0 * stretch;
    (0..output)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).floor() as isize + 1;
            let hi = (center + support).ceil() as isize - 1;
            let mut dense = Vec::new();
            let mut first = usize::MAX;
            let mut total = 0.0;
            for j in lo..=hi {
                let w = cubic_kernel((j as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, input as isize - 1) as usize;
                if first == usize::MAX {
                    first = idx;
                }
                let slot = idx - first;
                if dense.len() <= slot {
                    dense.resize(slot + 1, 0.0);
                }
                dense[slot] += w;
                total += w;
            }
            dense.iter_mut().for_each(|w| *w /= total);
            Taps { start: first, weights: dense }
        })
        .collect()
}

/// Separable bicubic resize; when `antialias` and shrinking, the kernel is
/// widened by the scale factor. Output is clipped to `[-1, 1]`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize, antialias: bool) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::ZeroSize { channels: img.channels, height: out_h, width: out_w });
    }
    let (c, h, w) = img.dims();
    if (out_h, out_w) == (h, w) {
        return Ok(img.clipped());
    }
    let rows = axis_taps(h, out_h, antialias);
    let cols = axis_taps(w, out_w, antialias);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut tmp = vec![0.0; out_h * w];
    for ch in 0..c {
        let plane = img.plane(ch);
        for (oy, tap) in rows.iter().enumerate() {
            let dst = &mut tmp[oy * w..(oy + 1) * w];
            dst.fill(0.0);
            for (k, &wt) in tap.weights.iter().enumerate() {
                let src = &plane[(tap.start + k) * w..(tap.start + k + 1) * w];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += wt * s);
            }
        }
        for oy in 0..out_h {
            let row = &tmp[oy * w..(oy + 1) * w];
            for tap in &cols {
                let v: f64 = tap.weights.iter().zip(&row[tap.start..]).map(|(wt, s)| wt * s).sum();
                out.push(v.clamp(-1.0, 1.0));
            }
        }
    }
    Image::new(c, out_h, out_w, out)
}

/// Largest centred crop with `height : width = aspect_h : aspect_w`; odd
/// remainders drop the extra row or column at the bottom or right.
pub fn center_crop_largest(img: &Image, aspect_h: usize, aspect_w: usize) -> Result<Image> {
    if aspect_h == 0 || aspect_w == 0 {
        return Err(DataError::Mismatch(format!("aspect {aspect_h}:{aspect_w} must be positive")));
    }
    let (c, h, w) = img.dims();
    let (ch, cw) = if w * aspect_h >= h * aspect_w {
        (h, (h * aspect_w / aspect_h).max(1))
    } else {
        ((w * aspect_h / aspect_w).max(1), w)
    };
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    Image::from_fn(c, ch, cw, |k, y, x| img.get(k, top + y, left + x))
}

/// Degrades `hi` by anti-aliased bicubic downsampling.
pub fn make_pair(hi: &Image, scale: usize) -> Result<ImagePair> {
    let (_, h, w) = hi.dims();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(DataError::Indivisible { context: "make_pair".into(), height: h, width: w, scale });
    }
    let x = bicubic_resize(hi, h / scale, w / scale, true)?;
    Ok(ImagePair { x, y0: hi.clone(), scale })
}

/// Separable Gaussian blur with clamped edges; `sigma <= 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if !(sigma > 0.0) {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (c, h, w) = img.dims();
    let blur_axis = |src: &Image, horizontal: bool| {
        Image::from_fn(c, h, w, |k, y, x| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, wt)| {
                    let off = i as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y, (x as isize + off).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((y as isize + off).clamp(0, h as isize - 1) as usize, x)
                    };
                    wt * src.get(k, yy, xx)
                })
                .sum()
        })
        .expect("dims preserved")
    };
    blur_axis(&blur_axis(img, true), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Gradients,
    Shapes,
    Gaussians,
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gradients" => Ok(Self::Gradients),
            "shapes" => Ok(Self::Shapes),
            "gaussians" => Ok(Self::Gaussians),
            other => Err(format!("unknown dataset kind `{other}` (gradients | shapes | gaussians)")),
        }
    }
}

const SUPERSAMPLE: usize = 4;

fn synth_gradient<R: Rng + ?Sized>(hw: usize, rng: &mut R) -> Image {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (a, b) = (rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9));
    let (dx, dy) = (theta.cos(), theta.sin());
    let half = (hw as f64 - 1.0) / 2.0;
    let reach = half * (dx.abs() + dy.abs()).max(1e-9);
    Image::from_fn(1, hw, hw, |_, y, x| {
        let s = ((x as f64 - half) * dx + (y as f64 - half) * dy) / reach;
        (0.5 * (a + b) + 0.5 * (b - a) * s).clamp(-1.0, 1.0)
    })
    .expect("positive dims")
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, cos: f64, sin: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, cos, sin } => {
                let (u, v) = (x - cx, y - cy);
                let (p, q) = (u * cos + v * sin, -u * sin + v * cos);
                (p / rx).powi(2) + (q / ry).powi(2) <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

fn synth_shapes<R: Rng + ?Sized>(hw: usize, rng: &mut R) -> Image {
    let n = hw as f64;
    let background = rng.random_range(-0.8..0.0);
    let count = rng.random_range(1..=3);
    let shapes: Vec<(Shape, f64)> = (0..count)
        .map(|_| {
            let level = rng.random_range(0.0..0.9);
            let shape = if rng.random_bool(0.5) {
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Ellipse {
                    cx: rng.random_range(0.2 * n..0.8 * n),
                    cy: rng.random_range(0.2 * n..0.8 * n),
                    rx: rng.random_range(0.1 * n..0.3 * n),
                    ry: rng.random_range(0.1 * n..0.3 * n),
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            } else {
                let (w, h) = (rng.random_range(0.2 * n..0.5 * n), rng.random_range(0.2 * n..0.5 * n));
                let (x0, y0) = (rng.random_range(0.0..n - w), rng.random_range(0.0..n - h));
                Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
            };
            (shape, level)
        })
        .collect();
    let step = 1.0 / SUPERSAMPLE as f64;
    Image::from_fn(1, hw, hw, |_, y, x| {
        let mut acc = 0.0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let (px, py) = (x as f64 + (sx as f64 + 0.5) * step, y as f64 + (sy as f64 + 0.5) * step);
                let v = shapes
                    .iter()
                    .rev()
                    .find(|(s, _)| s.contains(px, py))
                    .map_or(background, |(_, level)| *level);
                acc += v;
            }
        }
        acc / (SUPERSAMPLE * SUPERSAMPLE) as f64
    })
    .expect("positive dims")
}

fn synth_gaussians<R: Rng + ?Sized>(hw: usize, rng: &mut R) -> Image {
    let n = hw as f64;
    let count = rng.random_range(1..=4);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(0.0..n),
                rng.random_range(0.0..n),
                rng.random_range(0.08 * n..0.25 * n),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let base = 0.2 * rng.sample::<f64, _>(StandardNormal);
    Image::from_fn(1, hw, hw, |_, y, x| {
        let v: f64 = bumps
            .iter()
            .map(|&(cx, cy, s, amp)| {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                amp * (-d2 / (2.0 * s * s)).exp()
            })
            .sum();
        (base + v).clamp(-1.0, 1.0)
    })
    .expect("positive dims")
}

/// Procedural single-channel `hw x hw` images paired at `scale`.
pub fn synth_dataset<R: Rng + ?Sized>(
    kind: SynthKind,
    n: usize,
    hw: usize,
    scale: usize,
    rng: &mut R,
) -> Result<Vec<ImagePair>> {
    if n == 0 {
        return Err(DataError::Mismatch("dataset size must be at least 1".into()));
    }
    (0..n)
        .map(|_| {
            let hi = match kind {
                SynthKind::Gradients => synth_gradient(hw, rng),
                SynthKind::Shapes => synth_shapes(hw, rng),
                SynthKind::Gaussians => synth_gaussians(hw, rng),
            };
            make_pair(&hi, scale)
        })
        .collect()
}

/// Fraction of pixels whose forward-difference gradient magnitude exceeds `threshold`.
pub fn edge_density(img: &Image, threshold: f64) -> f64 {
    let (c, h, w) = img.dims();
    let mut hits = 0usize;
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = img.get(k, y, x);
                let gx = img.get(k, y, (x + 1).min(w - 1)) - v;
                let gy = img.get(k, (y + 1).min(h - 1), x) - v;
                if (gx * gx + gy * gy).sqrt() > threshold {
                    hits += 1;
                }
            }
        }
    }
    hits as f64 / (c * h * w) as f64
}

pub fn pixel_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`pixel_to_unit`], rounding half up and clamping to `0..=255`.
pub fn unit_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn file_err(path: &Path, msg: impl ToString) -> DataError {
    DataError::File { path: path.to_path_buf(), msg: msg.to_string() }
}

/// Reads an 8-bit grayscale or RGB PNG (alpha is discarded).
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::ImageReader::open(path)
        .map_err(|e| file_err(path, e))?
        .with_guessed_format()
        .map_err(|e| file_err(path, e))?
        .decode()
        .map_err(|e| file_err(path, e))?;
    use image::DynamicImage as D;
    let (channels, raw, w, h) = match decoded {
        D::ImageLuma8(b) => (1, b.as_raw().clone(), b.width(), b.height()),
        D::ImageLumaA8(_) => {
            let b = decoded.to_luma8();
            (1, b.as_raw().clone(), b.width(), b.height())
        }
        D::ImageRgb8(b) => (3, b.as_raw().clone(), b.width(), b.height()),
        D::ImageRgba8(_) => {
            let b = decoded.to_rgb8();
            (3, b.as_raw().clone(), b.width(), b.height())
        }
        other => return Err(file_err(path, format!("unsupported pixel format {:?}, expected 8-bit gray or RGB", other.color()))),
    };
    let (h, w) = (h as usize, w as usize);
    let mut data = vec![0.0; channels * h * w];
    for (i, &v) in raw.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * h * w + pix] = pixel_to_unit(v);
    }
    Image::new(channels, h, w, data).map_err(|e| file_err(path, e))
}

/// Writes a 1- or 3-channel image as an 8-bit PNG.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.dims();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        other => return Err(file_err(path, format!("cannot save a {other}-channel image"))),
    };
    let mut raw = vec![0u8; c * h * w];
    for ch in 0..c {
        for (pix, &v) in img.plane(ch).iter().enumerate() {
            raw[pix * c + ch] = unit_to_pixel(v);
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| file_err(parent, e))?;
    }
    image::save_buffer_with_format(path, &raw, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|e| file_err(path, e))
}

/// Sorted `*.png` files in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| file_err(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::EmptyDir(dir.to_path_buf()));
    }
    Ok(paths)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// A pair derived from `<dir>/<name>.png`.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedPair {
    pub name: String,
    pub pair: ImagePair,
}

/// Loads every high-resolution PNG in `dir` and derives its low-resolution input.
pub fn load_pairs(dir: &Path, scale: usize) -> Result<Vec<NamedPair>> {
    list_pngs(dir)?
        .into_iter()
        .map(|path| {
            let hi = load_image(&path)?;
            let pair = make_pair(&hi, scale).map_err(|e| file_err(&path, e))?;
            Ok(NamedPair { name: file_stem(&path), pair })
        })
        .collect()
}

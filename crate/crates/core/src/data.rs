//! Dataset layout, sample loading with geometric augmentation, and the
//! synthetic shape dataset.
//!
//! A dataset root holds `images/` (RGB PNG or JPEG) and `GT/` (grayscale PNG)
//! whose files pair up by stem.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];
/// Mask pixels at or above this 8-bit level are foreground.
pub const MASK_THRESHOLD: u8 = 128;

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePaths {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    /// Sorted by stem.
    pub samples: Vec<SamplePaths>,
}

fn stems(dir: &Path, exts: &[&str]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| exts.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Pairs files of two directories by stem; every unmatched or duplicated stem is reported.
pub fn pair_by_stem(a_dir: &Path, a_exts: &[&str], b_dir: &Path, b_exts: &[&str]) -> Result<Vec<SamplePaths>> {
    let mut problems = Vec::new();
    for d in [a_dir, b_dir] {
        if !d.is_dir() {
            problems.push(format!("missing directory {}", d.display()));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Ingestion(problems));
    }
    let a = stems(a_dir, a_exts)?;
    let b = stems(b_dir, b_exts)?;
    for list in [&a, &b] {
        for w in list.windows(2) {
            if w[0].0 == w[1].0 {
                problems.push(format!("stem `{}` appears twice ({} and {})", w[0].0, w[0].1.display(), w[1].1.display()));
            }
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) if x.0 == y.0 => {
                pairs.push(SamplePaths {
                    stem: x.0.clone(),
                    image: x.1.clone(),
                    mask: y.1.clone(),
                });
                i += 1;
                j += 1;
            }
            (Some(x), y) if y.is_none_or(|y| x.0 < y.0) => {
                problems.push(format!("{} has no counterpart in {}", x.1.display(), b_dir.display()));
                i += 1;
            }
            (_, Some(y)) => {
                problems.push(format!("{} has no counterpart in {}", y.1.display(), a_dir.display()));
                j += 1;
            }
            _ => unreachable!("loop runs while either list has items"),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Ingestion(problems));
    }
    Ok(pairs)
}

impl DatasetSpec {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let samples = pair_by_stem(&root.join("images"), &IMAGE_EXTS, &root.join("GT"), &["png"])?;
        if samples.is_empty() {
            return Err(Error::Ingestion(vec![format!("no image/mask pairs under {}", root.display())]));
        }
        Ok(DatasetSpec { root, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Augmentation ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            scale_min: 0.75,
            scale_max: 1.25,
        }
    }
}

/// Geometric transform shared by an image and its mask: optional horizontal
/// flip, then zoom by `scale` about the center, then a translation of the
/// (zoomed) content by `(shift_x, shift_y)` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub flip: bool,
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        flip: false,
        scale: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };

    /// Draws a transform for an `size × size` output. Zooming in crops a random
    /// window of the enlarged content; zooming out keeps it centered.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, size: usize, rng: &mut R) -> Self {
        let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.gen_range(cfg.scale_min..cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let slack = (scale - 1.0).max(0.0) * size as f64 / 2.0;
        let (shift_x, shift_y) = if slack > 0.0 {
            (rng.gen_range(-slack..=slack), rng.gen_range(-slack..=slack))
        } else {
            (0.0, 0.0)
        };
        Affine { flip, scale, shift_x, shift_y }
    }

    /// Where output pixel `(x, y)` reads from in the source (pixel-center coordinates).
    pub fn source(&self, x: f64, y: f64, size: usize) -> (f64, f64) {
        let c = (size as f64 - 1.0) / 2.0;
        let sx = (x - c - self.shift_x) / self.scale + c;
        let sy = (y - c - self.shift_y) / self.scale + c;
        let sx = if self.flip { size as f64 - 1.0 - sx } else { sx };
        (sx, sy)
    }

    /// Where source pixel `(x, y)` lands in the output.
    pub fn target(&self, x: f64, y: f64, size: usize) -> (f64, f64) {
        let c = (size as f64 - 1.0) / 2.0;
        let x = if self.flip { size as f64 - 1.0 - x } else { x };
        ((x - c) * self.scale + c + self.shift_x, (y - c) * self.scale + c + self.shift_y)
    }
}

/// Resamples `[C, S, S]` planes through `t`; out-of-range reads yield zero.
pub fn warp(planes: &[f32], channels: usize, size: usize, t: &Affine, bilinear: bool) -> Vec<f32> {
    let mut out = vec![0.0f32; planes.len()];
    let n = size as isize;
    let at = |c: usize, y: isize, x: isize| -> f32 {
        if (0..n).contains(&x) && (0..n).contains(&y) {
            planes[(c * size + y as usize) * size + x as usize]
        } else {
            0.0
        }
    };
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = t.source(x as f64, y as f64, size);
            for c in 0..channels {
                out[(c * size + y) * size + x] = if bilinear {
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    let top = at(c, y0, x0) * (1.0 - fx) + at(c, y0, x0 + 1) * fx;
                    let bot = at(c, y0 + 1, x0) * (1.0 - fx) + at(c, y0 + 1, x0 + 1) * fx;
                    top * (1.0 - fy) + bot * fy
                } else {
                    at(c, sy.round() as isize, sx.round() as isize)
                };
            }
        }
    }
    out
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

/// Normalized `[3, S, S]` planes of an RGB image resized to `size`.
pub fn image_planes(img: &RgbImage, size: usize) -> Vec<f32> {
    let s = size as u32;
    let img = if img.dimensions() == (s, s) {
        img.clone()
    } else {
        imageops::resize(img, s, s, imageops::FilterType::Triangle)
    };
    let mut out = vec![0.0f32; 3 * size * size];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f32 / 255.0;
            out[(c * size + y as usize) * size + x as usize] = (v - MEAN[c]) / STD[c];
        }
    }
    out
}

/// Binary `[1, S, S]` plane of a mask resized (nearest) to `size`.
pub fn mask_plane(mask: &GrayImage, size: usize) -> Vec<f32> {
    let s = size as u32;
    let mask = if mask.dimensions() == (s, s) {
        mask.clone()
    } else {
        imageops::resize(mask, s, s, imageops::FilterType::Nearest)
    };
    mask.pixels().map(|p| if p.0[0] >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect()
}

/// Normalized image planes `[3, S, S]` and binary mask plane `[1, S, S]` of one pair.
pub fn load_planes(paths: &SamplePaths, size: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    Ok((image_planes(&read_rgb(&paths.image)?, size), mask_plane(&read_gray(&paths.mask)?, size)))
}

/// Applies one random transform, drawn from `seed`, to both planes.
pub fn augment_planes(image: &[f32], mask: &[f32], size: usize, cfg: &AugmentConfig, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let t = Affine::sample(cfg, size, &mut ChaCha8Rng::seed_from_u64(seed));
    (warp(image, 3, size, &t, true), warp(mask, 1, size, &t, false))
}

/// Loads one pair as `([3, S, S], [1, S, S])`. With `augment`, the transform is
/// drawn from a generator seeded by the given per-sample seed.
pub fn load_sample(paths: &SamplePaths, size: usize, augment: Option<(&AugmentConfig, u64)>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (mut x, mut m) = load_planes(paths, size)?;
    if let Some((cfg, seed)) = augment {
        (x, m) = augment_planes(&x, &m, size, cfg, seed);
    }
    Ok((Tensor::new(&[3, size, size], x)?, Tensor::new(&[1, size, size], m)?))
}

/// Deterministic per-sample seed from the run seed, epoch and position.
pub fn sample_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ epoch) ^ index)
}

/// Foreground primitive of the synthetic generator, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// An `w × h` box with the `(w - t) × (h - t)` top-right part removed.
    LShape { x0: f64, y0: f64, w: f64, h: f64, t: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::LShape { x0, y0, w, h, t } => {
                let inside = x >= x0 && x < x0 + w && y >= y0 && y < y0 + h;
                let notch = x >= x0 + t && y < y0 + h - t;
                inside && !notch
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Ellipse { rx, ry, .. } => PI * rx * ry,
            Shape::Rect { x0, y0, x1, y1 } => (x1 - x0) * (y1 - y0),
            Shape::LShape { w, h, t, .. } => w * h - (w - t) * (h - t),
        }
    }

    pub fn perimeter(&self) -> f64 {
        match *self {
            // Ramanujan's approximation
            Shape::Ellipse { rx, ry, .. } => PI * (3.0 * (rx + ry) - ((3.0 * rx + ry) * (rx + 3.0 * ry)).sqrt()),
            Shape::Rect { x0, y0, x1, y1 } => 2.0 * ((x1 - x0) + (y1 - y0)),
            Shape::LShape { w, h, .. } => 2.0 * (w + h),
        }
    }

    /// Pixels of an `size × size` raster whose centers fall inside.
    pub fn raster_area(&self, size: usize) -> usize {
        (0..size * size)
            .filter(|i| self.contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
            .count()
    }

    fn random<R: Rng + ?Sized>(size: f64, rng: &mut R) -> Self {
        let lo = 0.12 * size;
        let hi = 0.3 * size;
        match rng.gen_range(0..3) {
            0 => {
                let (rx, ry) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
                Shape::Ellipse {
                    cx: rng.gen_range(0.25 * size..0.75 * size),
                    cy: rng.gen_range(0.25 * size..0.75 * size),
                    rx,
                    ry,
                    angle: rng.gen_range(0.0..PI),
                }
            }
            1 => {
                let (w, h) = (rng.gen_range(2.0 * lo..2.0 * hi), rng.gen_range(2.0 * lo..2.0 * hi));
                let x0 = rng.gen_range(0.0..(size - w).max(1.0));
                let y0 = rng.gen_range(0.0..(size - h).max(1.0));
                Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
            }
            _ => {
                let (w, h) = (rng.gen_range(2.0 * lo..2.0 * hi), rng.gen_range(2.0 * lo..2.0 * hi));
                let t = rng.gen_range(0.35..0.6) * w.min(h);
                Shape::LShape {
                    x0: rng.gen_range(0.0..(size - w).max(1.0)),
                    y0: rng.gen_range(0.0..(size - h).max(1.0)),
                    w,
                    h,
                    t,
                }
            }
        }
    }
}

/// One generated image with its exact mask and the shapes that produced it.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: RgbImage,
    pub mask: GrayImage,
    pub shapes: Vec<Shape>,
}

/// Smooth low-contrast texture from a few random plane waves.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn random<R: Rng + ?Sized>(rng: &mut R, size: f64, amp: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let theta = rng.gen_range(0.0..PI);
                let freq = rng.gen_range(1.0..6.0) * 2.0 * PI / size;
                (freq * theta.cos(), freq * theta.sin(), rng.gen_range(0.0..2.0 * PI), amp * rng.gen_range(0.3..1.0))
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum::<f64>() / 2.0
    }
}

pub fn synth_sample<R: Rng + ?Sized>(size: usize, rng: &mut R) -> SynthSample {
    let s = size as f64;
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.6));
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let contrast = rng.gen_range(0.18..0.32);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
    let fg: [f64; 3] = std::array::from_fn(|c| (bg[c] + sign * contrast + tint[c]).clamp(0.05, 0.95));
    let bg_tex = Texture::random(rng, s, 0.08);
    let fg_tex = Texture::random(rng, s, 0.05);
    let count = rng.gen_range(1..=3);
    let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(s, rng)).collect();
    let noise: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-0.03..0.03)).collect();
    let mut image = ImageBuffer::new(size as u32, size as u32);
    let mut mask = ImageBuffer::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = shapes.iter().any(|sh| sh.contains(px, py));
            let (base, tex) = if inside { (&fg, &fg_tex) } else { (&bg, &bg_tex) };
            let t = tex.at(px, py) + noise[y * size + x];
            let rgb: [u8; 3] = std::array::from_fn(|c| ((base[c] + t).clamp(0.0, 1.0) * 255.0).round() as u8);
            image.put_pixel(x as u32, y as u32, Rgb(rgb));
            mask.put_pixel(x as u32, y as u32, Luma([if inside { 255u8 } else { 0 }]));
        }
    }
    SynthSample { image, mask, shapes }
}

/// Writes `n` synthetic pairs under `out/images` and `out/GT`.
pub fn synth_dataset(n: usize, size: usize, seed: u64, out: impl AsRef<Path>) -> Result<DatasetSpec> {
    if n == 0 || size == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n >= 1 and size >= 1".into()));
    }
    let out = out.as_ref();
    let (img_dir, gt_dir) = (out.join("images"), out.join("GT"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&gt_dir)?;
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 0, i as u64));
        let s = synth_sample(size, &mut rng);
        let name = format!("{i:04}.png");
        let save_err = |path: PathBuf| move |source| Error::Image { path, source };
        s.image.save(img_dir.join(&name)).map_err(save_err(img_dir.join(&name)))?;
        s.mask.save(gt_dir.join(&name)).map_err(save_err(gt_dir.join(&name)))?;
    }
    DatasetSpec::open(out)
}

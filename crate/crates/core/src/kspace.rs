//! k-space simulation: centred orthonormal FFT, Cartesian sampling masks,
//! synthetic phantoms and paired dataset generation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Image,
    Kspace,
}

/// Row-major complex plane tagged with the domain it lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Complex64>,
    pub domain: Domain,
}

impl ComplexImage {
    pub fn from_real(h: usize, w: usize, values: &[f64]) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Shape(format!("complex image {h}x{w} needs {} values, got {}", h * w, values.len())));
        }
        Ok(Self {
            h,
            w,
            data: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            domain: Domain::Image,
        })
    }

    /// Image-domain plane from a `(1, 1, h, w)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Shape(format!("expected a single-plane tensor (1, 1, h, w), got {s}")));
        }
        Self::from_real(s.h, s.w, t.data())
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }
}

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("fft2: dimensions must be powers of two, got {h}x{w}")));
    }
    Ok(())
}

/// `exp(sign * 2 pi i k / n)` for `k < n / 2`, each computed directly to keep error flat.
fn twiddles(n: usize, sign: f64) -> Vec<Complex64> {
    (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect()
}

/// In-place iterative radix-2 transform, unnormalised. `tw` comes from
/// [`twiddles`] for `buf.len()`; its sign picks forward or inverse.
fn fft1d(buf: &mut [Complex64], tw: &[Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * tw[k * stride];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Swap halves along both axes. For even sizes this is its own inverse.
fn fftshift(data: &mut [Complex64], h: usize, w: usize) {
    let (hh, hw) = (h / 2, w / 2);
    let src = data.to_vec();
    for r in 0..h {
        for c in 0..w {
            data[((r + hh) % h) * w + (c + hw) % w] = src[r * w + c];
        }
    }
}

fn transform(img: &ComplexImage, sign: f64) -> ComplexImage {
    let (h, w) = (img.h, img.w);
    let mut data = img.data.clone();
    fftshift(&mut data, h, w);
    let (tw_w, tw_h) = (twiddles(w, sign), twiddles(h, sign));
    for row in data.chunks_exact_mut(w) {
        fft1d(row, &tw_w);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        fft1d(&mut col, &tw_h);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
    fftshift(&mut data, h, w);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    data.iter_mut().for_each(|z| *z *= scale);
    ComplexImage {
        h,
        w,
        data,
        domain: match img.domain {
            Domain::Image => Domain::Kspace,
            Domain::Kspace => Domain::Image,
        },
    }
}

/// Centred orthonormal 2-D DFT; DC lands at `(h/2, w/2)`.
pub fn fft2(img: &ComplexImage) -> Result<ComplexImage> {
    check_pow2(img.h, img.w)?;
    if img.domain != Domain::Image {
        return Err(Error::InvalidArgument("fft2: input is already in k-space".into()));
    }
    Ok(transform(img, -1.0))
}

pub fn ifft2(k: &ComplexImage) -> Result<ComplexImage> {
    check_pow2(k.h, k.w)?;
    if k.domain != Domain::Kspace {
        return Err(Error::InvalidArgument("ifft2: input is not in k-space".into()));
    }
    Ok(transform(k, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    Equispaced,
    Random,
}

/// Which phase-encode rows (first spatial axis) are acquired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    pub height: usize,
    pub keep: Vec<bool>,
    pub accel: f64,
    pub acs_lines: usize,
    pub pattern: MaskPattern,
}

impl SamplingMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn effective_accel(&self) -> f64 {
        self.height as f64 / self.kept() as f64
    }

    pub fn acs_range(&self) -> std::ops::Range<usize> {
        acs_range(self.height, self.acs_lines)
    }
}

fn acs_range(h: usize, acs: usize) -> std::ops::Range<usize> {
    let start = h / 2 - acs / 2;
    start..start + acs
}

/// Equispaced: rows `0, ⌈R⌉, 2⌈R⌉, ...` plus the central ACS band.
/// Random: the ACS band plus uniformly chosen rows up to `round(h / R)` in total.
pub fn make_mask(h: usize, accel: f64, acs_lines: usize, rng: &mut RngStream, pattern: MaskPattern) -> Result<SamplingMask> {
    if !(accel >= 1.0) || !accel.is_finite() {
        return Err(Error::InvalidArgument(format!("make_mask: acceleration must be >= 1, got {accel}")));
    }
    if h == 0 || acs_lines >= h {
        return Err(Error::InvalidArgument(format!(
            "make_mask: acs_lines ({acs_lines}) must be smaller than the height ({h})"
        )));
    }
    let mut keep = vec![false; h];
    for i in acs_range(h, acs_lines) {
        keep[i] = true;
    }
    match pattern {
        MaskPattern::Equispaced => {
            let step = accel.ceil() as usize;
            for i in (0..h).step_by(step) {
                keep[i] = true;
            }
        }
        MaskPattern::Random => {
            let target = ((h as f64 / accel).round() as usize).clamp(1, h);
            let mut free: Vec<usize> = (0..h).filter(|&i| !keep[i]).collect();
            rng.shuffle(&mut free);
            let have = acs_lines;
            for &i in free.iter().take(target.saturating_sub(have)) {
                keep[i] = true;
            }
        }
    }
    Ok(SamplingMask {
        height: h,
        keep,
        accel,
        acs_lines,
        pattern,
    })
}

/// Zero the rows the mask drops; kept rows are copied untouched.
pub fn undersample(k: &ComplexImage, mask: &SamplingMask) -> Result<ComplexImage> {
    if k.domain != Domain::Kspace {
        return Err(Error::InvalidArgument("undersample: input is not in k-space".into()));
    }
    if mask.height != k.h {
        return Err(Error::Shape(format!("undersample: mask height {} vs k-space height {}", mask.height, k.h)));
    }
    let mut out = k.clone();
    for (r, row) in out.data.chunks_exact_mut(k.w).enumerate() {
        if !mask.keep[r] {
            row.fill(Complex64::new(0.0, 0.0));
        }
    }
    Ok(out)
}

/// Divide by the maximum, then stretch linearly onto `[0, 1]`.
pub fn normalize_intensity(values: &[f64]) -> Result<Vec<f64>> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::InvalidArgument(format!("normalize: maximum intensity must be positive and finite, got {max}")));
    }
    let scaled: Vec<f64> = values.iter().map(|v| v / max).collect();
    let min = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= 1.0 {
        return Ok(vec![1.0; values.len()]);
    }
    Ok(scaled.iter().map(|v| ((v - min) / (1.0 - min)).clamp(0.0, 1.0)).collect())
}

/// Magnitude of the inverse transform, normalised to `[0, 1]`, as a `(1, 1, h, w)` tensor.
pub fn zero_filled_recon(k_us: &ComplexImage) -> Result<Tensor> {
    let img = ifft2(k_us)?;
    let values = normalize_intensity(&img.magnitude())?;
    Tensor::from_vec(Shape::new(1, 1, img.h, img.w), values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: usize,
    /// Inclusive range for the number of ellipse layers. The first layer is the
    /// body, the next two are the cardiac chambers, the rest are small lesions.
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            min_ellipses: 5,
            max_ellipses: 9,
            seed: 0,
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64, (s, c): (f64, f64)) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

const SUPERSAMPLE: usize = 4;

fn draw_ellipses(rng: &mut RngStream, count: usize) -> Vec<Ellipse> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let e = match i {
            // Torso: large, dim.
            0 => Ellipse {
                cx: rng.uniform_range(-0.05, 0.05),
                cy: rng.uniform_range(-0.05, 0.05),
                a: rng.uniform_range(0.7, 0.9),
                b: rng.uniform_range(0.55, 0.75),
                theta: rng.uniform_range(-0.3, 0.3),
                value: rng.uniform_range(0.25, 0.4),
            },
            // Ventricle and atrium blood pools.
            1 | 2 => Ellipse {
                cx: rng.uniform_range(-0.3, 0.3),
                cy: rng.uniform_range(-0.3, 0.3),
                a: rng.uniform_range(0.15, 0.3),
                b: rng.uniform_range(0.1, 0.25),
                theta: rng.uniform_range(0.0, PI),
                value: rng.uniform_range(0.3, 0.55),
            },
            _ => Ellipse {
                cx: rng.uniform_range(-0.5, 0.5),
                cy: rng.uniform_range(-0.5, 0.5),
                a: rng.uniform_range(0.03, 0.1),
                b: rng.uniform_range(0.03, 0.1),
                theta: rng.uniform_range(0.0, PI),
                value: if rng.uniform() < 0.5 {
                    rng.uniform_range(0.1, 0.3)
                } else {
                    -rng.uniform_range(0.1, 0.3)
                },
            },
        };
        out.push(e);
    }
    out
}

/// Sum of randomised, 4x4-supersampled ellipse layers clamped to `[0, 1]`.
pub fn phantom(spec: &PhantomSpec) -> Result<Tensor> {
    let n = spec.size;
    if !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("phantom: size must be a power of two, got {n}")));
    }
    if spec.min_ellipses > spec.max_ellipses {
        return Err(Error::InvalidArgument("phantom: min_ellipses exceeds max_ellipses".into()));
    }
    let mut rng = RngStream::new(spec.seed, "phantom");
    let count = rng.int_inclusive(spec.min_ellipses, spec.max_ellipses);
    let ellipses = draw_ellipses(&mut rng, count);
    let rot: Vec<(f64, f64)> = ellipses.iter().map(|e| e.theta.sin_cos()).collect();
    let mut out = vec![0.0; n * n];
    let sub = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    // Pixel grid spans [-1, 1] in both directions.
                    let y = -1.0 + 2.0 * (r as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / n as f64;
                    let x = -1.0 + 2.0 * (c as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / n as f64;
                    let v: f64 = ellipses.iter().zip(&rot).filter(|(e, &r)| e.contains(x, y, r)).map(|(e, _)| e.value).sum();
                    acc += v.clamp(0.0, 1.0);
                }
            }
            out[r * n + c] = (acc * sub).clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(Shape::new(1, 1, n, n), out)
}

/// Bilinear resize with corner-aligned sampling, applied to every plane.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize_bilinear: target {out_h}x{out_w} must be positive")));
    }
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(x.clone());
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for plane in x.data().chunks_exact(s.plane()) {
        for i in 0..out_h {
            let (r0, r1, fy) = coord(i, out_h, s.h);
            for j in 0..out_w {
                let (c0, c1, fx) = coord(j, out_w, s.w);
                let top = plane[r0 * s.w + c0] * (1.0 - fx) + plane[r0 * s.w + c1] * fx;
                let bot = plane[r1 * s.w + c0] * (1.0 - fx) + plane[r1 * s.w + c1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, s.c, out_h, out_w), out)
}

/// Everything needed to regenerate a dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of training pairs.
    pub count: usize,
    /// Number of held-out pairs, written with the `test` prefix.
    pub test_count: usize,
    pub size: usize,
    pub accel: f64,
    pub acs: usize,
    pub pattern: MaskPattern,
    pub seed: u64,
    pub min_ellipses: usize,
    pub max_ellipses: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 200,
            test_count: 50,
            size: 64,
            accel: 4.0,
            acs: 16,
            pattern: MaskPattern::Equispaced,
            seed: 0,
            min_ellipses: 5,
            max_ellipses: 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub split: String,
    pub index: usize,
    pub input: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub test_count: usize,
    pub size: usize,
    pub accel: f64,
    pub acs: usize,
    pub pattern: MaskPattern,
    pub seed: u64,
    /// Mean effective acceleration of the masks actually used.
    pub effective_accel: f64,
    pub items: Vec<ManifestItem>,
}

/// One simulated acquisition: `(zero-filled input, normalised target, mask)`.
pub fn simulate_pair(cfg: &DataConfig, split: &str, index: usize) -> Result<(Tensor, Tensor, SamplingMask)> {
    let root = RngStream::new(cfg.seed, "dataset").fork(split).fork(&index.to_string());
    let spec = PhantomSpec {
        size: cfg.size,
        min_ellipses: cfg.min_ellipses,
        max_ellipses: cfg.max_ellipses,
        seed: root.fork("phantom").next_u64(),
    };
    let raw = phantom(&spec)?;
    let target = Tensor::from_vec(raw.shape(), normalize_intensity(raw.data())?)?;
    let k = fft2(&ComplexImage::from_tensor(&target)?)?;
    let mask = make_mask(cfg.size, cfg.accel, cfg.acs, &mut root.fork("mask"), cfg.pattern)?;
    let input = zero_filled_recon(&undersample(&k, &mask)?)?;
    Ok((input, target, mask))
}

/// Write `{split}_{index}_input.ten` / `_target.ten` pairs and `manifest.json`.
pub fn gen_dataset(cfg: &DataConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.count == 0 {
        return Err(Error::Config("data: count must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut items = Vec::new();
    let mut accel_sum = 0.0;
    for (split, n) in [("train", cfg.count), ("test", cfg.test_count)] {
        for index in 0..n {
            let (input, target, mask) = simulate_pair(cfg, split, index)?;
            accel_sum += mask.effective_accel();
            let item = ManifestItem {
                split: split.to_string(),
                index,
                input: format!("{split}_{index}_input.ten"),
                target: format!("{split}_{index}_target.ten"),
            };
            write_tensor(&out_dir.join(&item.input), &input)?;
            write_tensor(&out_dir.join(&item.target), &target)?;
            items.push(item);
        }
    }
    let manifest = Manifest {
        count: cfg.count,
        test_count: cfg.test_count,
        size: cfg.size,
        accel: cfg.accel,
        acs: cfg.acs,
        pattern: cfg.pattern,
        seed: cfg.seed,
        effective_accel: accel_sum / items.len() as f64,
        items,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// In-memory image pairs, each tensor `(1, 1, h, w)`.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, id: String, input: Tensor, target: Tensor) -> Result<()> {
        if input.shape() != target.shape() {
            return Err(Error::Shape(format!("pair {id}: input {} vs target {}", input.shape(), target.shape())));
        }
        let s = input.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Shape(format!("pair {id}: expected (1, 1, h, w), got {s}")));
        }
        if let Some(first) = self.inputs.first() {
            if first.shape() != s {
                return Err(Error::Shape(format!("pair {id}: shape {s} differs from {}", first.shape())));
            }
        }
        self.ids.push(id);
        self.inputs.push(input);
        self.targets.push(target);
        Ok(())
    }

    /// Stack the listed items into `(inputs, targets)` batches.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let xs: Vec<Tensor> = indices.iter().map(|&i| self.inputs[i].clone()).collect();
        let ys: Vec<Tensor> = indices.iter().map(|&i| self.targets[i].clone()).collect();
        Ok((Tensor::stack_batch(&xs)?, Tensor::stack_batch(&ys)?))
    }

    /// `(h, w)` of the images, if any.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.inputs.first().map(|t| (t.shape().h, t.shape().w))
    }
}

/// Load one split of a directory written by [`gen_dataset`] (or any converter
/// producing the same layout).
pub fn load_dataset(dir: &Path, split: &str) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let mut data = Dataset::default();
    for item in manifest.items.iter().filter(|i| i.split == split) {
        let input = read_tensor(&dir.join(&item.input))?;
        let target = read_tensor(&dir.join(&item.target))?;
        data.push(format!("{}_{}", item.split, item.index), input, target)?;
    }
    if data.is_empty() {
        return Err(Error::Config(format!("dataset {}: no '{split}' items in the manifest", dir.display())));
    }
    Ok(data)
}

/// Generate a split in memory without touching the filesystem.
pub fn simulate_dataset(cfg: &DataConfig, split: &str, count: usize) -> Result<Dataset> {
    let mut data = Dataset::default();
    for index in 0..count {
        let (input, target, _) = simulate_pair(cfg, split, index)?;
        data.push(format!("{split}_{index}"), input, target)?;
    }
    Ok(data)
}

pub fn dataset_files(dir: &Path, manifest: &Manifest) -> Vec<PathBuf> {
    manifest
        .items
        .iter()
        .flat_map(|i| [dir.join(&i.input), dir.join(&i.target)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = RngStream::new(seed, "img");
        ComplexImage {
            h,
            w,
            data: (0..h * w).map(|_| Complex64::new(rng.normal(), rng.normal())).collect(),
            domain: Domain::Image,
        }
    }

    #[test]
    fn constant_image_has_single_centred_coefficient() {
        let img = ComplexImage::from_real(64, 64, &vec![1.0; 64 * 64]).unwrap();
        let k = fft2(&img).unwrap();
        assert_eq!(k.domain, Domain::Kspace);
        for (i, z) in k.data.iter().enumerate() {
            if i == 32 * 64 + 32 {
                assert!((z.norm() - 64.0).abs() < 1e-10);
            } else {
                assert!(z.norm() < 1e-10);
            }
        }
    }

    #[test]
    fn fft_matches_direct_dft() {
        let img = random_image(8, 4, 1);
        let k = fft2(&img).unwrap();
        let (h, w) = (8usize, 4usize);
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for x in 0..h {
                    for y in 0..w {
                        // Centred indices on both sides.
                        let (xc, yc) = (x as f64 - (h / 2) as f64, y as f64 - (w / 2) as f64);
                        let (uc, vc) = (u as f64 - (h / 2) as f64, v as f64 - (w / 2) as f64);
                        let ang = -2.0 * PI * (uc * xc / h as f64 + vc * yc / w as f64);
                        acc += img.data[x * w + y] * Complex64::from_polar(1.0, ang);
                    }
                }
                acc /= ((h * w) as f64).sqrt();
                assert!((acc - k.data[u * w + v]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn transforms_reject_bad_input() {
        let img = ComplexImage::from_real(6, 8, &vec![0.0; 48]).unwrap();
        assert!(fft2(&img).is_err());
        let img = ComplexImage::from_real(8, 8, &vec![0.0; 64]).unwrap();
        assert!(ifft2(&img).is_err());
        assert!(fft2(&fft2(&img).unwrap()).is_err());
    }

    #[test]
    fn mask_counts() {
        let mut rng = RngStream::new(0, "mask");
        let full = make_mask(64, 1.0, 16, &mut rng, MaskPattern::Equispaced).unwrap();
        assert_eq!(full.kept(), 64);
        // Rows 0, 10, ..., 250 (26 rows) plus 120..136, which already holds 120 and 130.
        let m = make_mask(256, 10.0, 16, &mut rng, MaskPattern::Equispaced).unwrap();
        assert_eq!(m.kept(), 26 + 16 - 2);
        assert!(m.acs_range().all(|i| m.keep[i]));
        let r = make_mask(256, 10.0, 16, &mut RngStream::new(3, "m"), MaskPattern::Random).unwrap();
        assert_eq!(r.kept(), 26);
        assert_eq!(r, make_mask(256, 10.0, 16, &mut RngStream::new(3, "m"), MaskPattern::Random).unwrap());
        assert!(make_mask(16, 4.0, 16, &mut rng, MaskPattern::Equispaced).is_err());
        assert!(make_mask(16, 0.5, 4, &mut rng, MaskPattern::Equispaced).is_err());
    }

    #[test]
    fn undersampling_zeroes_dropped_rows_only() {
        let k = fft2(&random_image(16, 16, 2)).unwrap();
        let mut rng = RngStream::new(0, "mask");
        let mask = make_mask(16, 4.0, 4, &mut rng, MaskPattern::Equispaced).unwrap();
        let us = undersample(&k, &mask).unwrap();
        for r in 0..16 {
            let row = &us.data[r * 16..(r + 1) * 16];
            if mask.keep[r] {
                assert_eq!(row, &k.data[r * 16..(r + 1) * 16]);
            } else {
                assert!(row.iter().all(|z| z.norm() == 0.0));
            }
        }
        assert!(us.energy() <= k.energy());
        assert!(undersample(&random_image(16, 16, 2), &mask).is_err());
    }

    #[test]
    fn zero_filled_needs_signal() {
        let k = ComplexImage {
            h: 8,
            w: 8,
            data: vec![Complex64::new(0.0, 0.0); 64],
            domain: Domain::Kspace,
        };
        assert!(zero_filled_recon(&k).is_err());
    }

    #[test]
    fn fully_sampled_recon_recovers_phantom() {
        let p = phantom(&PhantomSpec { seed: 5, ..Default::default() }).unwrap();
        let target = normalize_intensity(p.data()).unwrap();
        let k = fft2(&ComplexImage::from_tensor(&p).unwrap()).unwrap();
        let rec = zero_filled_recon(&k).unwrap();
        let err = rec.data().iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn phantom_contract() {
        let spec = PhantomSpec { min_ellipses: 0, max_ellipses: 0, ..Default::default() };
        assert!(phantom(&spec).unwrap().data().iter().all(|&v| v == 0.0));
        let spec = PhantomSpec { seed: 11, ..Default::default() };
        let a = phantom(&spec).unwrap();
        assert_eq!(a, phantom(&spec).unwrap());
        assert!(a.data().iter().any(|&v| v > 0.0));
        assert!(phantom(&PhantomSpec { size: 48, ..Default::default() }).is_err());
    }

    #[test]
    fn resize_cases() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let y = resize_bilinear(&x, 3, 3).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 0.5);
        assert_eq!(y.get(0, 0, 0, 0), 0.0);
        assert_eq!(y.get(0, 0, 0, 2), 1.0);
        assert_eq!(resize_bilinear(&x, 2, 2).unwrap(), x);
        let c = Tensor::full(Shape::new(1, 2, 5, 3), 0.7);
        assert!(resize_bilinear(&c, 8, 11).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(resize_bilinear(&c, 0, 3).is_err());
    }

    #[test]
    fn accel_one_input_equals_target() {
        let cfg = DataConfig { accel: 1.0, size: 32, ..Default::default() };
        let (input, target, _) = simulate_pair(&cfg, "train", 0).unwrap();
        assert!(input.max_abs_diff(&target) < 1e-8);
    }
}

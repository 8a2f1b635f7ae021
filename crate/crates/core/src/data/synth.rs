//! Procedural stereo-distortion dataset with known quality ordering.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::image::write_ppm;
use super::manifest::{write_manifest, Distortion, ManifestRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLUR_SIGMAS: [f32; 4] = [0.8, 1.6, 2.4, 3.2];
pub const NOISE_SIGMAS: [f32; 4] = [0.02, 0.05, 0.09, 0.14];
pub const JPEG_STEPS: [f32; 4] = [8.0, 16.0, 32.0, 64.0];
pub const DISTORTIONS: [Distortion; 3] = [Distortion::Blur, Distortion::Wn, Distortion::Jpeg];
pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub scenes: usize,
    /// Distortion levels per family, at most 4.
    pub levels: usize,
    pub seed: u64,
    /// Also emit pairs whose eyes differ by one level.
    pub asymmetric: bool,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { scenes: 24, levels: 4, seed: 0, asymmetric: false, height: 40, width: 40 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::config("scene count must be positive"));
        }
        if !(1..=4).contains(&self.levels) {
            return Err(Error::config(format!("levels must be 1..=4, got {}", self.levels)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("images must be at least 8×8"));
        }
        Ok(())
    }
}

/// Score of a pair whose better eye sits at `level`, with a half-level
/// penalty when the eyes differ.
pub fn synthetic_score(level: u32, asymmetric: bool) -> f64 {
    let penalty = if asymmetric { 0.5 } else { 0.0 };
    (100.0 - 20.0 * (level as f64 + penalty)).clamp(0.0, 100.0)
}

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub distorted: usize,
    pub pristine: usize,
}

/// Renders the dataset into `out_dir` and writes its manifest.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let per_scene: Vec<Vec<ManifestRecord>> =
        (0..spec.scenes).into_par_iter().map(|s| render_scene_set(spec, s, out_dir)).collect::<Result<_>>()?;
    let records: Vec<ManifestRecord> = per_scene.into_iter().flatten().collect();
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &records, out_dir)?;
    let pristine = records.iter().filter(|r| r.distortion == Distortion::None).count();
    Ok(SynthSummary { manifest, distorted: records.len() - pristine, pristine, records })
}

fn render_scene_set(spec: &SynthSpec, scene: usize, out: &Path) -> Result<Vec<ManifestRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(scene as u64);
    let left = render_scene(&mut rng, spec.height, spec.width);
    let disparity = rng.random_range(2..=6);
    let right = shift_wrap(&left, disparity);
    let scene_id = format!("scene{scene:03}");

    let mut records = Vec::new();
    let mut emit = |name: String, l: &Tensor<f32>, r: &Tensor<f32>, distortion, level, score| -> Result<()> {
        let lp = out.join(format!("{name}_L.ppm"));
        let rp = out.join(format!("{name}_R.ppm"));
        write_ppm(&lp, l)?;
        write_ppm(&rp, r)?;
        records.push(ManifestRecord { left_path: lp, right_path: rp, score, scene_id: scene_id.clone(), distortion, level });
        Ok(())
    };
    emit(format!("{scene_id}_ref"), &left, &right, Distortion::None, 0, synthetic_score(0, false))?;
    for (d, &dist) in DISTORTIONS.iter().enumerate() {
        for level in 1..=spec.levels {
            let l = distort(&left, dist, level, &mut rng);
            let r = distort(&right, dist, level, &mut rng);
            emit(format!("{scene_id}_{dist}{level}"), &l, &r, dist, level as u32, synthetic_score(level as u32, false))?;
            if spec.asymmetric {
                // The milder eye sits one level lower; which eye alternates.
                let mild_left = distort(&left, dist, level - 1, &mut rng);
                let mild_right = distort(&right, dist, level - 1, &mut rng);
                let (al, ar) = if (scene + level + d) % 2 == 0 { (&l, &mild_right) } else { (&mild_left, &r) };
                let score = synthetic_score(level as u32 - 1, true);
                emit(format!("{scene_id}_{dist}{level}a"), al, ar, dist, level as u32, score)?;
            }
        }
    }
    Ok(records)
}

/// Gradient background, hard-edged shapes and a sinusoidal texture.
pub fn render_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let mut img = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    let c0: [f32; 3] = rng.random();
    let c1: [f32; 3] = rng.random();
    let angle: f32 = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let diag = ((h * h + w * w) as f32).sqrt();
    {
        let d = img.data_mut();
        for y in 0..h {
            for x in 0..w {
                let t = ((x as f32 * dx + y as f32 * dy) / diag + 1.0) * 0.5;
                for c in 0..3 {
                    d[c * plane + y * w + x] = c0[c] * (1.0 - t) + c1[c] * t;
                }
            }
        }
    }
    let shapes = rng.random_range(5..=9);
    for _ in 0..shapes {
        let color: [f32; 3] = rng.random();
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let rx = rng.random_range(0.1..0.35) * w as f32;
        let ry = rng.random_range(0.1..0.35) * h as f32;
        let disc = rng.random_bool(0.5);
        let d = img.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = if disc { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        d[c * plane + y * w + x] = color[c];
                    }
                }
            }
        }
    }
    let freq = rng.random_range(0.3..1.2);
    let theta: f32 = rng.random_range(0.0..PI);
    let amp = rng.random_range(0.05..0.12);
    let d = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            let s = amp * (freq * (x as f32 * theta.cos() + y as f32 * theta.sin())).sin();
            for c in 0..3 {
                let v = &mut d[c * plane + y * w + x];
                *v = (*v + s).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// `out(x) = img((x + shift) mod W)`.
pub fn shift_wrap(img: &Tensor<f32>, shift: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let src = img.data();
    Tensor::from_fn(img.shape(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        src[c * h * w + y * w + (x + shift) % w]
    })
}

/// Applies `level` (1-based, 0 = untouched) of a distortion family.
pub fn distort(img: &Tensor<f32>, kind: Distortion, level: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    if level == 0 {
        return img.clone();
    }
    match kind {
        Distortion::Blur => gaussian_blur(img, BLUR_SIGMAS[level - 1]),
        Distortion::Wn => {
            let normal = Normal::new(0.0f32, NOISE_SIGMAS[level - 1]).expect("positive sigma");
            let mut out = img.clone();
            for v in out.data_mut() {
                *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
            }
            out
        }
        Distortion::Jpeg => block_dct_quantize(img, JPEG_STEPS[level - 1] / 255.0),
        other => unreachable!("synthetic data has no {other} distortion"),
    }
}

/// Separable Gaussian blur with edge clamping and a `⌈3σ⌉` radius.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f32) -> Tensor<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = img.data();
    let mut tmp = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * src[ch * h * w + y * w + clamp(x as isize + k as isize - radius, w)];
                }
                tmp[ch * h * w + y * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[ch * h * w + clamp(y as isize + k as isize - radius, h) * w + x];
                }
                out[ch * h * w + y * w + x] = acc;
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same size")
}

fn dct_basis() -> [[f32; 8]; 8] {
    let mut b = [[0.0f32; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f32 / 8.0).sqrt() } else { (2.0f32 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * n + 1) as f32 * k as f32 * PI / 16.0).cos();
        }
    }
    b
}

/// Per channel and 8×8 block: orthonormal DCT, uniform quantization of every
/// coefficient with `step`, inverse DCT. Edge blocks are padded by replication.
pub fn block_dct_quantize(img: &Tensor<f32>, step: f32) -> Tensor<f32> {
    let basis = dct_basis();
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = img.clone();
    let dst = out.data_mut();
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0f32; 8]; 8];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = src[ch * h * w + (by + i).min(h - 1) * w + (bx + j).min(w - 1)];
                    }
                }
                let mut coef = [[0.0f32; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for i in 0..8 {
                            for j in 0..8 {
                                s += basis[u][i] * basis[v][j] * block[i][j];
                            }
                        }
                        coef[u][v] = (s / step).round() * step;
                    }
                }
                for i in 0..8.min(h - by) {
                    for j in 0..8.min(w - bx) {
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += basis[u][i] * basis[v][j] * coef[u][v];
                            }
                        }
                        dst[ch * h * w + (by + i) * w + bx + j] = s.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    out
}

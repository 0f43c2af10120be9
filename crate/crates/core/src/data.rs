//! Synthetic scenes and image folder loading. A scene is a continuous
//! function on the unit square, drawn deterministically from (seed, index);
//! rendering at resolution R samples pixel centers. The same index therefore
//! yields the same underlying scene at every resolution, with the mixed kind
//! adding finer noise octaves as resolution grows.

use crate::error::{data_err, Result};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::prelude::IndexedRandom;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// splitmix64 finalizer; stable across platforms and runs.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in [-1, 1) from a hash.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Gradients,
    Checkerboard,
    Blobs,
    Mixed,
}

pub const SCENE_KINDS: [&str; 4] = ["gradients", "checkerboard", "blobs", "mixed"];

impl FromStr for SceneKind {
    type Err = crate::DcaeError;
    fn from_str(s: &str) -> Result<SceneKind> {
        match s {
            "gradients" => Ok(SceneKind::Gradients),
            "checkerboard" => Ok(SceneKind::Checkerboard),
            "blobs" => Ok(SceneKind::Blobs),
            "mixed" => Ok(SceneKind::Mixed),
            other => Err(data_err(format!(
                "unknown scene kind '{other}' (known: {})",
                SCENE_KINDS.join(", ")
            ))),
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SceneKind::Gradients => "gradients",
            SceneKind::Checkerboard => "checkerboard",
            SceneKind::Blobs => "blobs",
            SceneKind::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

struct Gradient {
    base: [f64; 3],
    du: [f64; 3],
    dv: [f64; 3],
}

struct Blob {
    cu: f64,
    cv: f64,
    inv2s2: f64,
    amp: [f64; 3],
}

enum Scene {
    Gradient(Gradient),
    Checker { cells: usize, c0: [f64; 3], c1: [f64; 3] },
    Blobs(Vec<Blob>),
    Mixed { grad: Gradient, blobs: Vec<Blob>, noise_seed: u64 },
}

fn draw_gradient(r: &mut ChaCha8Rng, amp: f64) -> Gradient {
    let ch = |r: &mut ChaCha8Rng| {
        let theta: f64 = r.random::<f64>() * std::f64::consts::TAU;
        let slope = amp * (0.3 + 0.7 * r.random::<f64>());
        (slope * theta.cos(), slope * theta.sin())
    };
    let base = [
        (r.random::<f64>() - 0.5) * amp,
        (r.random::<f64>() - 0.5) * amp,
        (r.random::<f64>() - 0.5) * amp,
    ];
    let (du0, dv0) = ch(r);
    let (du1, dv1) = ch(r);
    let (du2, dv2) = ch(r);
    Gradient { base, du: [du0, du1, du2], dv: [dv0, dv1, dv2] }
}

fn draw_blobs(r: &mut ChaCha8Rng, count: usize, amp: f64) -> Vec<Blob> {
    (0..count)
        .map(|_| {
            let cu = r.random::<f64>();
            let cv = r.random::<f64>();
            let sigma = 0.05 + 0.2 * r.random::<f64>();
            let amp = [
                (r.random::<f64>() * 2.0 - 1.0) * amp,
                (r.random::<f64>() * 2.0 - 1.0) * amp,
                (r.random::<f64>() * 2.0 - 1.0) * amp,
            ];
            Blob { cu, cv, inv2s2: 1.0 / (2.0 * sigma * sigma), amp }
        })
        .collect()
}

fn draw_scene(kind: SceneKind, seed: u64, index: usize) -> Scene {
    let mut r = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(index as u64)));
    match kind {
        SceneKind::Gradients => Scene::Gradient(draw_gradient(&mut r, 0.9)),
        SceneKind::Checkerboard => {
            let cells = *[4usize, 8, 16].choose(&mut r).expect("nonempty");
            let color = |r: &mut ChaCha8Rng| {
                [
                    r.random::<f64>() * 2.0 - 1.0,
                    r.random::<f64>() * 2.0 - 1.0,
                    r.random::<f64>() * 2.0 - 1.0,
                ]
            };
            Scene::Checker { cells, c0: color(&mut r), c1: color(&mut r) }
        }
        SceneKind::Blobs => {
            let count = r.random_range(2..=5);
            Scene::Blobs(draw_blobs(&mut r, count, 0.8))
        }
        SceneKind::Mixed => {
            let grad = draw_gradient(&mut r, 0.5);
            let count = r.random_range(1..=3);
            let blobs = draw_blobs(&mut r, count, 0.5);
            let noise_seed = r.random::<u64>();
            Scene::Mixed { grad, blobs, noise_seed }
        }
    }
}

/// Bilinearly interpolated lattice noise at 2^octave cells across the unit
/// square; lattice values come from a hash so no storage is needed.
fn value_noise(noise_seed: u64, octave: u32, u: f64, v: f64) -> f64 {
    let n = 1u64 << octave;
    let x = u * n as f64;
    let y = v * n as f64;
    let xi = (x.floor() as u64).min(n - 1);
    let yi = (y.floor() as u64).min(n - 1);
    let fx = x - xi as f64;
    let fy = y - yi as f64;
    let at = |i: u64, j: u64| {
        unit(mix64(noise_seed ^ mix64((octave as u64) << 48 ^ i << 24 ^ j)))
    };
    let a = at(xi, yi);
    let b = at(xi + 1, yi);
    let c = at(xi, yi + 1);
    let d = at(xi + 1, yi + 1);
    a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
}

fn eval_gradient(g: &Gradient, u: f64, v: f64, out: &mut [f64; 3]) {
    for ch in 0..3 {
        out[ch] += g.base[ch] + g.du[ch] * (u - 0.5) + g.dv[ch] * (v - 0.5);
    }
}

fn eval_blobs(blobs: &[Blob], u: f64, v: f64, out: &mut [f64; 3]) {
    for b in blobs {
        let d2 = (u - b.cu) * (u - b.cu) + (v - b.cv) * (v - b.cv);
        let w = (-d2 * b.inv2s2).exp();
        for ch in 0..3 {
            out[ch] += b.amp[ch] * w;
        }
    }
}

/// Octaves rendered at resolution R: 2 ..= log2(R) - 1. Higher resolutions
/// therefore contain structure that simply does not exist at lower ones.
fn max_octave(resolution: usize) -> u32 {
    (resolution.max(8).ilog2()).saturating_sub(1)
}

fn eval_scene(scene: &Scene, u: f64, v: f64, top_octave: u32) -> [f64; 3] {
    let mut out = [0.0; 3];
    match scene {
        Scene::Gradient(g) => eval_gradient(g, u, v, &mut out),
        Scene::Checker { cells, c0, c1 } => {
            let pu = (u * *cells as f64).floor() as i64;
            let pv = (v * *cells as f64).floor() as i64;
            out = if (pu + pv) % 2 == 0 { *c0 } else { *c1 };
        }
        Scene::Blobs(blobs) => eval_blobs(blobs, u, v, &mut out),
        Scene::Mixed { grad, blobs, noise_seed } => {
            eval_gradient(grad, u, v, &mut out);
            eval_blobs(blobs, u, v, &mut out);
            let mut amp = 0.3;
            for o in 2..=top_octave {
                let n = value_noise(*noise_seed, o, u, v);
                for val in &mut out {
                    *val += amp * n;
                }
                amp *= 0.7;
            }
        }
    }
    for val in &mut out {
        *val = val.clamp(-1.0, 1.0);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub kind: SceneKind,
    pub seed: u64,
    pub len: usize,
}

impl SyntheticDataset {
    pub fn new(kind: SceneKind, seed: u64, len: usize) -> SyntheticDataset {
        SyntheticDataset { kind, seed, len }
    }

    /// Renders scene `index` at the given square resolution, values in [-1, 1].
    pub fn image(&self, index: usize, resolution: usize) -> Array3<f64> {
        let scene = draw_scene(self.kind, self.seed, index);
        let top = max_octave(resolution);
        let mut img = Array3::zeros((3, resolution, resolution));
        for i in 0..resolution {
            let v = (i as f64 + 0.5) / resolution as f64;
            for j in 0..resolution {
                let u = (j as f64 + 0.5) / resolution as f64;
                let px = eval_scene(&scene, u, v, top);
                for ch in 0..3 {
                    img[(ch, i, j)] = px[ch];
                }
            }
        }
        img
    }

    pub fn batch(&self, indices: &[usize], resolution: usize) -> ArrayD<f64> {
        let mut out = ArrayD::zeros(IxDyn(&[indices.len(), 3, resolution, resolution]));
        for (n, &idx) in indices.iter().enumerate() {
            let img = self.image(idx, resolution);
            out.slice_mut(ndarray::s![n, .., .., ..]).assign(&img);
        }
        out
    }

    /// Deterministic batch for a global step: per-epoch shuffled order,
    /// consumed sequentially.
    pub fn indices_for_step(&self, step: usize, batch_size: usize) -> Vec<usize> {
        let start = step * batch_size;
        let epoch = start / self.len.max(1);
        let mut order: Vec<usize> = (0..self.len).collect();
        let mut r = ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(0xE70C ^ epoch as u64)));
        order.shuffle(&mut r);
        (0..batch_size).map(|j| order[(start + j) % self.len]).collect()
    }

    pub fn batch_for_step(&self, step: usize, batch_size: usize, resolution: usize) -> ArrayD<f64> {
        self.batch(&self.indices_for_step(step, batch_size), resolution)
    }
}

/// Loads every decodable image under `dir` (sorted by filename), center-crops
/// to square, and resizes to the requested resolution. Files that fail to
/// decode are skipped with a warning on stderr.
pub fn load_image_dir(dir: &Path, resolution: usize) -> Result<Vec<Array3<f64>>> {
    let mut names: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| data_err(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut out = Vec::new();
    for path in &names {
        match image::open(path) {
            Ok(img) => out.push(to_array(&center_crop_resize(img, resolution))),
            Err(e) => eprintln!("warning: skipping {}: {e}", path.display()),
        }
    }
    if out.is_empty() {
        return Err(data_err(format!("no decodable images in {}", dir.display())));
    }
    Ok(out)
}

fn center_crop_resize(img: image::DynamicImage, resolution: usize) -> image::RgbImage {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    image::imageops::resize(
        &cropped.to_rgb8(),
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::CatmullRom,
    )
}

fn to_array(img: &image::RgbImage) -> Array3<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch, y as usize, x as usize)] = px.0[ch] as f64 / 127.5 - 1.0;
        }
    }
    out
}

pub fn stack_images(images: &[Array3<f64>]) -> ArrayD<f64> {
    assert!(!images.is_empty());
    let (c, h, w) = images[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (n, img) in images.iter().enumerate() {
        out.slice_mut(ndarray::s![n, .., .., ..]).assign(img);
    }
    out
}

/// Writes a batch [N, 3, H, W] in [-1, 1] as one PNG grid with `cols` columns.
pub fn save_image_grid(path: &Path, batch: &ArrayD<f64>, cols: usize) -> Result<()> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(data_err(format!("image grid wants [N, 3, H, W], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let cols = cols.max(1).min(n);
    let rows = n.div_ceil(cols);
    let mut img = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    let v = batch[IxDyn(&[i, ch, y, x])];
                    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                };
                img.put_pixel(
                    (gx * w + x) as u32,
                    (gy * h + y) as u32,
                    image::Rgb([px(0), px(1), px(2)]),
                );
            }
        }
    }
    img.save(path).map_err(|e| data_err(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

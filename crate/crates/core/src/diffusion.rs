//! Latent diffusion harness: a small transformer denoiser trained on
//! autoencoder latents with DDPM noising and sampled with deterministic
//! DDIM. Latents are patchified into tokens; patch embedding is equivalent
//! to space_to_channel plus a 1x1 conv up to a fixed row permutation of the
//! weight, which keeps token count a pure function of (resolution, f, p).

use crate::checkpoint::{sha_hex, tensor_bytes, write_atomic, TensorEntry};
use crate::error::{config_err, shape_err, CheckpointError, DcaeError, Result};
use crate::tensor::{Embedding, LayerNorm, Linear, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub time_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub num_classes: usize,
    /// Probability of replacing the class with the null class in training,
    /// which is what makes classifier-free guidance possible at sampling.
    pub class_drop_prob: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            time_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            patch_size: 1,
            width: 256,
            depth: 6,
            heads: 4,
            sample_steps: 50,
            cfg_scale: 1.5,
            num_classes: 4,
            class_drop_prob: 0.1,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.time_steps < 2 {
            bad.push(format!("time_steps={} must be at least 2", self.time_steps));
        }
        if !(self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start < self.beta_end) {
            bad.push(format!(
                "betas must satisfy 0 < start < end < 1, got {} .. {}",
                self.beta_start, self.beta_end
            ));
        }
        if self.patch_size == 0 {
            bad.push("patch_size must be positive".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            bad.push(format!("heads={} must divide width={}", self.heads, self.width));
        }
        if self.width % 2 != 0 {
            bad.push(format!("width={} must be even for the sinusoidal embedding", self.width));
        }
        if self.depth == 0 {
            bad.push("depth must be positive".into());
        }
        if self.sample_steps == 0 || self.sample_steps > self.time_steps {
            bad.push(format!(
                "sample_steps={} must be in 1..={}",
                self.sample_steps, self.time_steps
            ));
        }
        if self.cfg_scale <= 0.0 {
            bad.push(format!("cfg_scale={} must be positive", self.cfg_scale));
        }
        if !(0.0..=1.0).contains(&self.class_drop_prob) {
            bad.push(format!("class_drop_prob={} must be in [0, 1]", self.class_drop_prob));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(config_err(bad.join("; ")))
        }
    }

    /// Index of the unconditional (null) class.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

/// Tokens a diffusion model sees for an image of side `resolution` through
/// compression f and patch size p: (resolution / (f * p))^2.
pub fn token_count(resolution: usize, f: usize, patch: usize) -> Result<usize> {
    if f == 0 || patch == 0 {
        return Err(config_err("f and patch size must be positive"));
    }
    if resolution % (f * patch) != 0 {
        return Err(config_err(format!(
            "resolution {resolution} must be divisible by f*p = {}",
            f * patch
        )));
    }
    let side = resolution / (f * patch);
    Ok(side * side)
}

/// Linear beta schedule with precomputed cumulative signal fractions.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(time_steps: usize, beta_start: f64, beta_end: f64) -> NoiseSchedule {
        let mut betas = Vec::with_capacity(time_steps);
        let mut alpha_bar = Vec::with_capacity(time_steps);
        let mut prod = 1.0;
        for i in 0..time_steps {
            let frac = if time_steps == 1 { 0.0 } else { i as f64 / (time_steps - 1) as f64 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bar.push(prod);
        }
        NoiseSchedule { betas, alpha_bar }
    }

    pub fn for_config(cfg: &DiffusionConfig) -> NoiseSchedule {
        Self::linear(cfg.time_steps, cfg.beta_start, cfg.beta_end)
    }

    /// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, elementwise per sample.
    pub fn noised(&self, z0: &ArrayD<f64>, t: &[usize], noise: &ArrayD<f64>) -> ArrayD<f64> {
        assert_eq!(z0.shape(), noise.shape());
        assert_eq!(z0.shape()[0], t.len());
        let mut out = z0.clone();
        let per = z0.len() / t.len();
        let flat_z = z0.as_slice().expect("standard layout");
        let flat_n = noise.as_slice().expect("standard layout");
        let flat_o = out.as_slice_mut().expect("standard layout");
        for (i, &ti) in t.iter().enumerate() {
            let ab = self.alpha_bar[ti];
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in i * per..(i + 1) * per {
                flat_o[j] = sa * flat_z[j] + sn * flat_n[j];
            }
        }
        out
    }
}

/// [N, c, h, w] -> [N, (h/p)(w/p), p*p*c] tokens; features within a token
/// are ordered (dy, dx, channel).
pub fn patchify(z: &Tensor, p: usize) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 4 {
        return Err(shape_err(format!("patchify expects rank 4, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err(format!("patchify: {h}x{w} not divisible by p={p}")));
    }
    let (hp, wp) = (h / p, w / p);
    let tokens = z
        .reshape(&[n, c, hp, p, wp, p])
        .permute(&[0, 2, 4, 3, 5, 1])
        .reshape(&[n, hp * wp, p * p * c]);
    Ok(tokens)
}

/// Inverse of patchify.
pub fn unpatchify(tokens: &Tensor, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 3 {
        return Err(shape_err(format!("unpatchify expects rank 3, got {s:?}")));
    }
    let (n, t, feat) = (s[0], s[1], s[2]);
    if p == 0 || h % p != 0 || w % p != 0 || t != (h / p) * (w / p) || feat != p * p * c {
        return Err(shape_err(format!(
            "unpatchify: tokens {s:?} incompatible with p={p}, c={c}, {h}x{w}"
        )));
    }
    let (hp, wp) = (h / p, w / p);
    let z = tokens
        .reshape(&[n, hp, wp, p, p, c])
        .permute(&[0, 5, 1, 3, 2, 4])
        .reshape(&[n, c, h, w]);
    Ok(z)
}

struct TransformerBlock {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    fn new(rng: &mut ChaCha8Rng, d: usize) -> TransformerBlock {
        TransformerBlock {
            norm1: LayerNorm::new(d),
            q: Linear::new(rng, d, d),
            k: Linear::new(rng, d, d),
            v: Linear::new(rng, d, d),
            proj: Linear::new(rng, d, d),
            norm2: LayerNorm::new(d),
            fc1: Linear::new(rng, d, 4 * d),
            fc2: Linear::new(rng, 4 * d, d),
        }
    }

    fn forward(&self, x: &Tensor, heads: usize) -> Tensor {
        let s = x.shape();
        let (n, t, d) = (s[0], s[1], s[2]);
        let hd = d / heads;
        let split = |l: &Linear| {
            l.forward(&self.norm1.forward(x))
                .reshape(&[n, t, heads, hd])
                .permute(&[0, 2, 1, 3])
                .reshape(&[n * heads, t, hd])
        };
        let q = split(&self.q);
        let k = split(&self.k);
        let v = split(&self.v);
        let scores = q.bmm(&k.permute(&[0, 2, 1])).scale(1.0 / (hd as f64).sqrt());
        let ctx = scores
            .softmax_last()
            .bmm(&v)
            .reshape(&[n, heads, t, hd])
            .permute(&[0, 2, 1, 3])
            .reshape(&[n, t, d]);
        let x = x.add(&self.proj.forward(&ctx));
        let mlp = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)).silu());
        x.add(&mlp)
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.named_params(&format!("{prefix}.norm1"), out);
        self.q.named_params(&format!("{prefix}.q"), out);
        self.k.named_params(&format!("{prefix}.k"), out);
        self.v.named_params(&format!("{prefix}.v"), out);
        self.proj.named_params(&format!("{prefix}.proj"), out);
        self.norm2.named_params(&format!("{prefix}.norm2"), out);
        self.fc1.named_params(&format!("{prefix}.fc1"), out);
        self.fc2.named_params(&format!("{prefix}.fc2"), out);
    }
}

/// Noise predictor over latent tokens. The output projection starts zeroed,
/// so a fresh model predicts zero noise everywhere.
pub struct DiffusionTransformer {
    pub config: DiffusionConfig,
    pub latent_c: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub tokens: usize,
    embed: Linear,
    pos: Tensor,
    time_fc1: Linear,
    time_fc2: Linear,
    class_table: Embedding,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    out: Linear,
}

impl DiffusionTransformer {
    pub fn build(
        config: &DiffusionConfig,
        latent: (usize, usize, usize),
        seed: u64,
    ) -> Result<DiffusionTransformer> {
        config.validate()?;
        let (c, h, w) = latent;
        let p = config.patch_size;
        if c == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(config_err(format!(
                "latent {c}x{h}x{w} must be positive and divisible by patch_size={p}"
            )));
        }
        let tokens = (h / p) * (w / p);
        let d = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Linear::new(&mut rng, p * p * c, d);
        let pos = Tensor::param(crate::tensor::normal_fill(&mut rng, &[tokens, d], 0.02));
        let time_fc1 = Linear::new(&mut rng, d, d);
        let time_fc2 = Linear::new(&mut rng, d, d);
        let class_table = Embedding::new(&mut rng, config.num_classes + 1, d);
        let blocks = (0..config.depth).map(|_| TransformerBlock::new(&mut rng, d)).collect();
        Ok(DiffusionTransformer {
            config: config.clone(),
            latent_c: c,
            latent_h: h,
            latent_w: w,
            tokens,
            embed,
            pos,
            time_fc1,
            time_fc2,
            class_table,
            blocks,
            final_norm: LayerNorm::new(d),
            out: Linear::new_zeroed(d, p * p * c),
        })
    }

    fn sinusoidal(&self, t: &[usize]) -> ArrayD<f64> {
        let d = self.config.width;
        let half = d / 2;
        let mut out = ArrayD::zeros(IxDyn(&[t.len(), d]));
        for (i, &ti) in t.iter().enumerate() {
            for j in 0..half {
                let freq = (-(j as f64) * (10_000.0_f64).ln() / half as f64).exp();
                let angle = ti as f64 * freq;
                out[IxDyn(&[i, j])] = angle.sin();
                out[IxDyn(&[i, half + j])] = angle.cos();
            }
        }
        out
    }

    /// Predicts the noise in z_t given timesteps and class ids (the value
    /// `num_classes` is the null class).
    pub fn forward(&self, z_t: &Tensor, t: &[usize], class_ids: &[usize]) -> Result<Tensor> {
        let s = z_t.shape();
        if s != vec![t.len(), self.latent_c, self.latent_h, self.latent_w] {
            return Err(shape_err(format!(
                "diffusion forward: latent {s:?} does not match model ({}, {}, {}) with batch {}",
                self.latent_c,
                self.latent_h,
                self.latent_w,
                t.len()
            )));
        }
        if class_ids.len() != t.len() {
            return Err(shape_err("class_ids and timesteps must have the batch length"));
        }
        for &ti in t {
            if ti >= self.config.time_steps {
                return Err(shape_err(format!("timestep {ti} out of range {}", self.config.time_steps)));
            }
        }
        for &id in class_ids {
            if id > self.config.num_classes {
                return Err(shape_err(format!(
                    "class id {id} out of range (null class is {})",
                    self.config.num_classes
                )));
            }
        }
        let p = self.config.patch_size;
        let mut h = self.embed.forward(&patchify(z_t, p)?).add_row_broadcast(&self.pos);
        let t_emb = self
            .time_fc2
            .forward(&self.time_fc1.forward(&Tensor::constant(self.sinusoidal(t))).silu());
        let c_emb = Tensor::embedding(&self.class_table.table, class_ids);
        h = h.add_col_broadcast(&t_emb.add(&c_emb));
        for block in &self.blocks {
            h = block.forward(&h, self.config.heads);
        }
        let tokens = self.out.forward(&self.final_norm.forward(&h));
        unpatchify(&tokens, p, self.latent_c, self.latent_h, self.latent_w)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.embed.named_params("embed", &mut out);
        out.push(("pos".to_string(), self.pos.clone()));
        self.time_fc1.named_params("time.fc1", &mut out);
        self.time_fc2.named_params("time.fc2", &mut out);
        self.class_table.named_params("class", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_params(&format!("block{i}"), &mut out);
        }
        self.final_norm.named_params("final_norm", &mut out);
        self.out.named_params("out", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }
}

/// Noise-prediction MSE at explicit (t, noise, class) draws; deterministic
/// so gradient checks can replay it.
pub fn diffusion_loss(
    model: &DiffusionTransformer,
    schedule: &NoiseSchedule,
    z0: &ArrayD<f64>,
    t: &[usize],
    noise: &ArrayD<f64>,
    class_ids: &[usize],
) -> Result<Tensor> {
    if z0.shape() != noise.shape() {
        return Err(shape_err(format!(
            "noise shape {:?} must match latents {:?}",
            noise.shape(),
            z0.shape()
        )));
    }
    let z_t = schedule.noised(z0, t, noise);
    let eps_hat = model.forward(&Tensor::constant(z_t), t, class_ids)?;
    Ok(eps_hat.sub(&Tensor::constant(noise.clone())).square().mean_all())
}

pub fn sample_timesteps(rng: &mut ChaCha8Rng, n: usize, time_steps: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..time_steps)).collect()
}

/// Replaces each id with the null class with probability `drop_prob`.
pub fn apply_class_dropout(
    rng: &mut ChaCha8Rng,
    ids: &[usize],
    null_class: usize,
    drop_prob: f64,
) -> Vec<usize> {
    ids.iter()
        .map(|&id| if rng.random::<f64>() < drop_prob { null_class } else { id })
        .collect()
}

/// Deterministic DDIM sampler. With cfg_scale == 1 the unconditional branch
/// is skipped entirely, so the result is bit-identical to an unguided
/// sampler; otherwise eps = eps_null + scale * (eps_cond - eps_null).
pub fn ddim_sample(
    model: &DiffusionTransformer,
    schedule: &NoiseSchedule,
    class_ids: &[usize],
    cfg_scale: f64,
    seed: u64,
) -> Result<ArrayD<f64>> {
    let n = class_ids.len();
    if n == 0 {
        return Err(shape_err("ddim_sample: empty batch"));
    }
    let shape = [n, model.latent_c, model.latent_h, model.latent_w];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = crate::tensor::normal_fill(&mut rng, &shape, 1.0);

    let steps = model.config.sample_steps;
    let times: Vec<usize> =
        (0..steps).map(|i| i * model.config.time_steps / steps).collect();
    let null_ids = vec![model.config.null_class(); n];

    for (i, &ti) in times.iter().enumerate().rev() {
        let tvec = vec![ti; n];
        let zt = Tensor::constant(z.clone());
        let eps = if cfg_scale == 1.0 {
            model.forward(&zt, &tvec, class_ids)?.data().clone()
        } else {
            let cond = model.forward(&zt, &tvec, class_ids)?.data().clone();
            let uncond = model.forward(&zt, &tvec, &null_ids)?.data().clone();
            &uncond + &(&cond - &uncond) * cfg_scale
        };
        let ab_t = schedule.alpha_bar[ti];
        let ab_prev = if i == 0 { 1.0 } else { schedule.alpha_bar[times[i - 1]] };
        let z0_hat = (&z - &(&eps * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
        z = &(&z0_hat * ab_prev.sqrt()) + &(&eps * (1.0 - ab_prev).sqrt());
    }
    Ok(z)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionManifest {
    pub format_version: u32,
    pub config: DiffusionConfig,
    pub latent: (usize, usize, usize),
    pub tensors: Vec<TensorEntry>,
}

pub const DIFFUSION_MANIFEST_NAME: &str = "diffusion_manifest.json";
pub const DIFFUSION_TENSORS_NAME: &str = "diffusion_tensors.bin";

pub fn save_diffusion(dir: &std::path::Path, model: &DiffusionTransformer) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CheckpointError::Io)?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, tensor) in model.named_params() {
        let data = tensor.data();
        let bytes = tensor_bytes(&data);
        entries.push(TensorEntry {
            name,
            shape: data.shape().to_vec(),
            offset: blob.len() as u64,
            sha256: sha_hex(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = DiffusionManifest {
        format_version: crate::checkpoint::FORMAT_VERSION,
        config: model.config.clone(),
        latent: (model.latent_c, model.latent_h, model.latent_w),
        tensors: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
    write_atomic(&dir.join(DIFFUSION_TENSORS_NAME), &blob).map_err(CheckpointError::Io)?;
    write_atomic(&dir.join(DIFFUSION_MANIFEST_NAME), &json).map_err(CheckpointError::Io)?;
    Ok(())
}

pub fn load_diffusion(dir: &std::path::Path) -> Result<DiffusionTransformer> {
    let bytes = std::fs::read(dir.join(DIFFUSION_MANIFEST_NAME)).map_err(CheckpointError::Io)?;
    let manifest: DiffusionManifest = serde_json::from_slice(&bytes)
        .map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
    if manifest.format_version != crate::checkpoint::FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: manifest.format_version,
            supported: crate::checkpoint::FORMAT_VERSION,
        }
        .into());
    }
    let blob = std::fs::read(dir.join(DIFFUSION_TENSORS_NAME)).map_err(CheckpointError::Io)?;
    let model = DiffusionTransformer::build(&manifest.config, manifest.latent, 0)?;
    let named = model.named_params();
    if named.len() != manifest.tensors.len() {
        return Err(DcaeError::from(CheckpointError::ConfigMismatch(format!(
            "stored {} tensors, model expects {}",
            manifest.tensors.len(),
            named.len()
        ))));
    }
    let by_name: std::collections::HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    for (name, tensor) in named {
        let entry = by_name.get(name.as_str()).ok_or_else(|| {
            DcaeError::from(CheckpointError::ConfigMismatch(format!("missing tensor '{name}'")))
        })?;
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel as u64 * 8;
        if end > blob.len() as u64 {
            return Err(CheckpointError::TruncatedBlob { expected: end, found: blob.len() as u64 }.into());
        }
        let bytes = &blob[entry.offset as usize..end as usize];
        if sha_hex(bytes) != entry.sha256 {
            return Err(CheckpointError::ChecksumMismatch { name }.into());
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| CheckpointError::CorruptManifest(format!("bad shape for {name}: {e}")))?;
        if arr.shape() != tensor.data().shape() {
            return Err(CheckpointError::ConfigMismatch(format!("shape mismatch for '{name}'")).into());
        }
        tensor.set_data(arr);
    }
    Ok(model)
}

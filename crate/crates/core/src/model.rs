//! The autoencoder: a stack of residual stages around a low-channel latent.
//! Spatial compression factor f halves resolution log2(f) times; the latent
//! has `latent_channels` channels at (H/f, W/f). With shortcuts enabled a
//! freshly built model is bitwise equal to the pure shuffle cascade, because
//! every learnable branch ends in a zero-initialized conv.

use crate::blocks::{
    AttentionBlock, LatentProjectionPair, ResConvBlock, ResidualDownsampleBlock, ResidualHead,
    ResidualStem, ResidualUpsampleBlock,
};
use crate::error::{config_err, shape_err, Result};
use crate::shuffle;
use crate::tensor::Tensor;
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How many stages count as the "head" ends of the network when parameters
/// are split into groups for phase-wise training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupBoundaries {
    /// Stages (from the latent end) in encoder_head and decoder_input.
    pub adapt_stages: usize,
    /// Stages (from the image end) in decoder_head.
    pub head_stages: usize,
}

impl Default for GroupBoundaries {
    fn default() -> Self {
        GroupBoundaries { adapt_stages: 1, head_stages: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// Spatial compression factor, a power of two.
    pub f: usize,
    pub latent_channels: usize,
    /// Widths s_0..s_k with k = log2(f); stage i sits at resolution H/2^i.
    pub stage_widths: Vec<usize>,
    /// Extra residual blocks per stage, same length as stage_widths.
    pub blocks_per_stage: Vec<usize>,
    pub in_channels: usize,
    pub use_shortcuts: bool,
    pub use_attention: bool,
    pub boundaries: GroupBoundaries,
}

impl AutoencoderConfig {
    /// Desk-scale default: f=32 with a 32-channel latent.
    pub fn f32c32() -> Self {
        AutoencoderConfig {
            f: 32,
            latent_channels: 32,
            stage_widths: vec![48, 96, 192, 192, 192, 384],
            blocks_per_stage: vec![1; 6],
            in_channels: 3,
            use_shortcuts: true,
            use_attention: false,
            boundaries: GroupBoundaries::default(),
        }
    }

    pub fn f64c128() -> Self {
        AutoencoderConfig {
            f: 64,
            latent_channels: 128,
            stage_widths: vec![48, 96, 192, 192, 192, 384, 384],
            blocks_per_stage: vec![1; 7],
            ..Self::f32c32()
        }
    }

    pub fn f128c512() -> Self {
        AutoencoderConfig {
            f: 128,
            latent_channels: 512,
            stage_widths: vec![48, 96, 192, 192, 192, 384, 384, 512],
            blocks_per_stage: vec![1; 8],
            ..Self::f32c32()
        }
    }

    /// Number of down/up sampling blocks.
    pub fn depth(&self) -> usize {
        self.stage_widths.len().saturating_sub(1)
    }

    /// Latent elements per image for an H x H input: (H/f)^2 * c.
    pub fn latent_budget(&self, h: usize) -> usize {
        (h / self.f) * (h / self.f) * self.latent_channels
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let w = &self.stage_widths;
        if self.in_channels == 0 {
            bad.push("in_channels must be positive".into());
        }
        if self.latent_channels == 0 {
            bad.push("latent_channels must be positive".into());
        }
        if !self.f.is_power_of_two() || self.f < 2 {
            bad.push(format!("f={} must be a power of two >= 2", self.f));
        }
        if w.len() < 2 {
            bad.push(format!("stage_widths needs at least 2 entries, got {}", w.len()));
        } else {
            let k = w.len() - 1;
            if self.f != 1usize << k {
                bad.push(format!(
                    "stage_widths has {} entries so f must be 2^{}={}, got {}",
                    w.len(),
                    k,
                    1usize << k,
                    self.f
                ));
            }
            if self.in_channels > 0 && w[0] % self.in_channels != 0 {
                bad.push(format!(
                    "stage_widths[0]={} must be a multiple of in_channels={}",
                    w[0], self.in_channels
                ));
            }
            for i in 1..=k {
                if w[i] % 4 != 0 {
                    bad.push(format!("stage_widths[{i}]={} must be divisible by 4", w[i]));
                }
            }
            for i in 0..k {
                if w[i + 1] != 0 && 4 * w[i] % w[i + 1] != 0 {
                    bad.push(format!(
                        "downsample {i}: stage_widths[{}]={} must divide 4*stage_widths[{i}]={}",
                        i + 1,
                        w[i + 1],
                        4 * w[i]
                    ));
                }
                if w[i + 1] % 4 == 0 && w[i + 1] >= 4 && w[i] % (w[i + 1] / 4) != 0 {
                    bad.push(format!(
                        "upsample {i}: stage_widths[{}]/4={} must divide stage_widths[{i}]={}",
                        i + 1,
                        w[i + 1] / 4,
                        w[i]
                    ));
                }
            }
            if self.latent_channels > 0 && w[k] % self.latent_channels != 0 {
                bad.push(format!(
                    "latent_channels={} must divide stage_widths[{k}]={}",
                    self.latent_channels, w[k]
                ));
            }
            if self.boundaries.adapt_stages == 0 || self.boundaries.head_stages == 0 {
                bad.push("group boundaries must cover at least one stage each".into());
            } else if self.boundaries.adapt_stages + self.boundaries.head_stages > k {
                bad.push(format!(
                    "adapt_stages={} + head_stages={} must not exceed depth {k}",
                    self.boundaries.adapt_stages, self.boundaries.head_stages
                ));
            }
        }
        if self.blocks_per_stage.len() != w.len() {
            bad.push(format!(
                "blocks_per_stage has {} entries, stage_widths has {}",
                self.blocks_per_stage.len(),
                w.len()
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(config_err(bad.join("; ")))
        }
    }
}

pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub stem: ResidualStem,
    pub enc_stages: Vec<Vec<ResConvBlock>>,
    pub downs: Vec<ResidualDownsampleBlock>,
    pub enc_attn: Option<AttentionBlock>,
    pub latent: LatentProjectionPair,
    pub dec_attn: Option<AttentionBlock>,
    pub dec_stages: Vec<Vec<ResConvBlock>>,
    pub ups: Vec<ResidualUpsampleBlock>,
    pub head: ResidualHead,
}

impl Autoencoder {
    pub fn build(config: &AutoencoderConfig, seed: u64) -> Result<Autoencoder> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = &config.stage_widths;
        let k = config.depth();
        let sc = config.use_shortcuts;

        let stem = ResidualStem::new(&mut rng, config.in_channels, w[0], sc)?;
        let mut enc_stages = Vec::with_capacity(k + 1);
        let mut downs = Vec::with_capacity(k);
        for i in 0..=k {
            let blocks = (0..config.blocks_per_stage[i])
                .map(|_| ResConvBlock::new(&mut rng, w[i]))
                .collect();
            enc_stages.push(blocks);
            if i < k {
                downs.push(ResidualDownsampleBlock::new(&mut rng, w[i], w[i + 1], sc)?);
            }
        }
        let enc_attn = config.use_attention.then(|| AttentionBlock::new(&mut rng, w[k]));
        let latent = LatentProjectionPair::new(&mut rng, w[k], config.latent_channels, w[k], sc)?;
        let dec_attn = config.use_attention.then(|| AttentionBlock::new(&mut rng, w[k]));
        let mut dec_stages = Vec::with_capacity(k + 1);
        let mut ups = Vec::with_capacity(k);
        for i in 0..=k {
            let blocks = (0..config.blocks_per_stage[i])
                .map(|_| ResConvBlock::new(&mut rng, w[i]))
                .collect();
            dec_stages.push(blocks);
            if i < k {
                ups.push(ResidualUpsampleBlock::new(&mut rng, w[i + 1], w[i], sc)?);
            }
        }
        let head = ResidualHead::new(&mut rng, w[0], config.in_channels, sc)?;

        Ok(Autoencoder {
            config: config.clone(),
            stem,
            enc_stages,
            downs,
            enc_attn,
            latent,
            dec_attn,
            dec_stages,
            ups,
            head,
        })
    }

    fn k(&self) -> usize {
        self.config.depth()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(shape_err(format!(
                "encode expects [N, {}, H, W], got {s:?}",
                self.config.in_channels
            )));
        }
        let f = self.config.f;
        if s[2] == 0 || s[3] == 0 || s[2] % f != 0 || s[3] % f != 0 {
            return Err(shape_err(format!(
                "encode input is {}x{} but both sides must be positive multiples of f={f}",
                s[2], s[3]
            )));
        }
        let mut h = self.stem.forward(x);
        for i in 0..=self.k() {
            for b in &self.enc_stages[i] {
                h = b.forward(&h);
            }
            if i < self.k() {
                h = self.downs[i].forward(&h);
            }
        }
        if let Some(a) = &self.enc_attn {
            h = a.forward(&h);
        }
        Ok(self.latent.project_in(&h))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.config.latent_channels || s[2] == 0 || s[3] == 0 {
            return Err(shape_err(format!(
                "decode expects [N, {}, h, w], got {s:?}",
                self.config.latent_channels
            )));
        }
        let mut h = self.latent.project_out(z);
        if let Some(a) = &self.dec_attn {
            h = a.forward(&h);
        }
        for i in (0..=self.k()).rev() {
            for b in &self.dec_stages[i] {
                h = b.forward(&h);
            }
            if i > 0 {
                h = self.ups[i - 1].forward(&h);
            }
        }
        Ok(self.head.forward(&h))
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (_, group) in self.parameter_groups() {
            out.extend(group);
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Disjoint split of all parameters into the four phase-training groups:
    /// other, encoder_head, decoder_input, decoder_head.
    pub fn parameter_groups(&self) -> Vec<(String, Vec<(String, Tensor)>)> {
        let k = self.k();
        let a = self.config.boundaries.adapt_stages;
        let hd = self.config.boundaries.head_stages;
        let enc_head_stage = |i: usize| i + a > k;
        let dec_input_stage = |i: usize| i + a > k;
        let dec_head_stage = |i: usize| i < hd;

        let mut other = Vec::new();
        let mut encoder_head = Vec::new();
        let mut decoder_input = Vec::new();
        let mut decoder_head = Vec::new();

        self.stem.named_params("stem", &mut other);
        for i in 0..=k {
            let dst: &mut Vec<_> = if enc_head_stage(i) { &mut encoder_head } else { &mut other };
            for (j, b) in self.enc_stages[i].iter().enumerate() {
                b.named_params(&format!("enc.stage{i}.block{j}"), dst);
            }
            if i < k {
                // the down block entering stage i+1 travels with stage i+1
                let dst: &mut Vec<_> =
                    if enc_head_stage(i + 1) { &mut encoder_head } else { &mut other };
                self.downs[i].named_params(&format!("enc.down{i}"), dst);
            }
        }
        if let Some(attn) = &self.enc_attn {
            attn.named_params("enc.attn", &mut encoder_head);
        }
        self.latent.named_in_params("latent.in", &mut encoder_head);
        self.latent.named_out_params("latent.out", &mut decoder_input);
        if let Some(attn) = &self.dec_attn {
            attn.named_params("dec.attn", &mut decoder_input);
        }
        for i in 0..=k {
            let dst: &mut Vec<_> = if dec_input_stage(i) {
                &mut decoder_input
            } else if dec_head_stage(i) {
                &mut decoder_head
            } else {
                &mut other
            };
            for (j, b) in self.dec_stages[i].iter().enumerate() {
                b.named_params(&format!("dec.stage{i}.block{j}"), dst);
            }
            if i < k {
                // the up block out of stage i+1 travels with its source stage
                // unless it lands in the head stages
                let dst: &mut Vec<_> = if dec_input_stage(i + 1) {
                    &mut decoder_input
                } else if dec_head_stage(i) {
                    &mut decoder_head
                } else {
                    &mut other
                };
                self.ups[i].named_params(&format!("dec.up{i}"), dst);
            }
        }
        self.head.named_params("head", &mut decoder_head);

        vec![
            ("other".to_string(), other),
            ("encoder_head".to_string(), encoder_head),
            ("decoder_input".to_string(), decoder_input),
            ("decoder_head".to_string(), decoder_head),
        ]
    }

    /// Marks exactly the listed groups trainable and freezes the rest.
    pub fn set_trainable_groups(&self, groups: &[&str]) -> Result<()> {
        let all = self.parameter_groups();
        for g in groups {
            if !all.iter().any(|(name, _)| name == g) {
                return Err(config_err(format!(
                    "unknown parameter group '{g}' (known: other, encoder_head, decoder_input, decoder_head)"
                )));
            }
        }
        for (name, params) in &all {
            let on = groups.contains(&name.as_str());
            for (_, p) in params {
                p.set_trainable(on);
            }
        }
        Ok(())
    }

    pub fn set_all_trainable(&self, on: bool) {
        for p in self.params() {
            p.set_trainable(on);
        }
    }

    pub fn trainable_params(&self) -> Vec<Tensor> {
        self.params().into_iter().filter(|p| p.is_trainable()).collect()
    }

    /// Per-channel latent statistics over a set of encoded batches.
    pub fn calibrate_latents(&self, batches: &[ArrayD<f64>]) -> Result<LatentStats> {
        let c = self.config.latent_channels;
        let mut sum = vec![0.0; c];
        let mut sumsq = vec![0.0; c];
        let mut count = vec![0usize; c];
        for batch in batches {
            let z = self.encode(&Tensor::constant(batch.clone()))?;
            let zd = z.data();
            let v4 = zd.view().into_dimensionality::<ndarray::Ix4>().expect("latent is rank 4");
            for n in 0..v4.shape()[0] {
                for ch in 0..c {
                    for val in v4.index_axis(ndarray::Axis(0), n).index_axis(ndarray::Axis(0), ch) {
                        sum[ch] += val;
                        sumsq[ch] += val * val;
                        count[ch] += 1;
                    }
                }
            }
        }
        if count.iter().any(|&n| n == 0) {
            return Err(shape_err("latent calibration needs at least one image"));
        }
        let mut shift = vec![0.0; c];
        let mut scale = vec![0.0; c];
        for ch in 0..c {
            let n = count[ch] as f64;
            let mean = sum[ch] / n;
            let var = (sumsq[ch] / n - mean * mean).max(0.0);
            shift[ch] = mean;
            scale[ch] = var.sqrt().max(1e-6);
        }
        Ok(LatentStats { shift, scale })
    }
}

/// What the pure shortcut path computes: only shuffle ops, no parameters.
/// Serves as an independent reference for the fresh-model transparency check.
pub fn shortcut_cascade_encode(cfg: &AutoencoderConfig, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let w = &cfg.stage_widths;
    let k = cfg.depth();
    let mut h = shuffle::channel_duplicate(x, w[0] / cfg.in_channels)?;
    for i in 0..k {
        h = shuffle::channel_average(&shuffle::space_to_channel(&h, 2)?, 4 * w[i] / w[i + 1])?;
    }
    shuffle::channel_average(&h, w[k] / cfg.latent_channels)
}

pub fn shortcut_cascade_decode(cfg: &AutoencoderConfig, z: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let w = &cfg.stage_widths;
    let k = cfg.depth();
    let mut h = shuffle::channel_duplicate(z, w[k] / cfg.latent_channels)?;
    for i in (0..k).rev() {
        h = shuffle::channel_duplicate(&shuffle::channel_to_space(&h, 2)?, w[i] / (w[i + 1] / 4))?;
    }
    shuffle::channel_average(&h, w[0] / cfg.in_channels)
}

/// Per-channel affine normalization of latents, calibrated on data so the
/// diffusion model sees roughly unit-scale inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LatentStats {
    pub fn identity(c: usize) -> Self {
        LatentStats { shift: vec![0.0; c], scale: vec![1.0; c] }
    }

    pub fn normalize(&self, z: &ArrayD<f64>) -> ArrayD<f64> {
        let mut out = z.clone();
        let mut v = out.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4 latent");
        for ch in 0..self.shift.len() {
            for val in v.index_axis_mut(ndarray::Axis(1), ch) {
                *val = (*val - self.shift[ch]) / self.scale[ch];
            }
        }
        out
    }

    pub fn denormalize(&self, z: &ArrayD<f64>) -> ArrayD<f64> {
        let mut out = z.clone();
        let mut v = out.view_mut().into_dimensionality::<ndarray::Ix4>().expect("rank 4 latent");
        for ch in 0..self.shift.len() {
            for val in v.index_axis_mut(ndarray::Axis(1), ch) {
                *val = *val * self.scale[ch] + self.shift[ch];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::normal_fill;

    /// Small config exercising every block kind: f=4, three stages.
    pub fn tiny_config() -> AutoencoderConfig {
        AutoencoderConfig {
            f: 4,
            latent_channels: 8,
            stage_widths: vec![6, 12, 24],
            blocks_per_stage: vec![1, 1, 1],
            in_channels: 3,
            use_shortcuts: true,
            use_attention: false,
            boundaries: GroupBoundaries::default(),
        }
    }

    fn rand_image(seed: u64, n: usize, c: usize, h: usize, w: usize) -> ArrayD<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        normal_fill(&mut r, &[n, c, h, w], 1.0)
    }

    #[test]
    fn presets_validate() {
        AutoencoderConfig::f32c32().validate().unwrap();
        AutoencoderConfig::f64c128().validate().unwrap();
        AutoencoderConfig::f128c512().validate().unwrap();
        tiny_config().validate().unwrap();
    }

    #[test]
    fn validate_reports_all_violations() {
        let mut cfg = tiny_config();
        cfg.f = 12;
        cfg.stage_widths = vec![5, 10, 24];
        cfg.blocks_per_stage = vec![1, 1];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("power of two"), "{msg}");
        assert!(msg.contains("stage_widths[0]=5"), "{msg}");
        assert!(msg.contains("stage_widths[1]=10"), "{msg}");
        assert!(msg.contains("blocks_per_stage"), "{msg}");
    }

    #[test]
    fn boundaries_must_fit_depth() {
        let mut cfg = tiny_config();
        cfg.boundaries = GroupBoundaries { adapt_stages: 1, head_stages: 2 };
        assert!(cfg.validate().is_err());
        cfg.boundaries = GroupBoundaries { adapt_stages: 1, head_stages: 1 };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn encode_decode_shapes() {
        let model = Autoencoder::build(&tiny_config(), 7).unwrap();
        let x = Tensor::constant(rand_image(1, 2, 3, 16, 8));
        let z = model.encode(&x).unwrap();
        assert_eq!(z.shape(), vec![2, 8, 4, 2]);
        let y = model.decode(&z).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 16, 8]);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let model = Autoencoder::build(&tiny_config(), 7).unwrap();
        let wrong_c = Tensor::constant(rand_image(1, 1, 4, 8, 8));
        assert!(model.encode(&wrong_c).is_err());
        let not_divisible = Tensor::constant(rand_image(1, 1, 3, 10, 8));
        assert!(model.encode(&not_divisible).is_err());
        let wrong_latent = Tensor::constant(rand_image(1, 1, 4, 2, 2));
        assert!(model.decode(&wrong_latent).is_err());
    }

    #[test]
    fn fresh_model_matches_shuffle_cascade_bitwise() {
        let cfg = tiny_config();
        let model = Autoencoder::build(&cfg, 3).unwrap();
        let x = rand_image(2, 1, 3, 8, 8);
        let z = model.encode(&Tensor::constant(x.clone())).unwrap();
        let z_ref = shortcut_cascade_encode(&cfg, &x).unwrap();
        assert_eq!(z.data().shape(), z_ref.shape());
        for (a, b) in z.data().iter().zip(z_ref.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let y = model.decode(&Tensor::constant(z_ref.clone())).unwrap();
        let y_ref = shortcut_cascade_decode(&cfg, &z_ref).unwrap();
        for (a, b) in y.data().iter().zip(y_ref.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fresh_model_with_attention_is_still_transparent() {
        let mut cfg = tiny_config();
        cfg.use_attention = true;
        let model = Autoencoder::build(&cfg, 3).unwrap();
        let x = rand_image(2, 1, 3, 8, 8);
        let z = model.encode(&Tensor::constant(x.clone())).unwrap();
        let z_ref = shortcut_cascade_encode(&cfg, &x).unwrap();
        for (a, b) in z.data().iter().zip(z_ref.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn cascade_round_trip_preserves_shape_and_mass() {
        // encode averages what decode duplicated, so cascade decode then
        // encode is the identity on latents
        let cfg = tiny_config();
        let z = rand_image(5, 1, 8, 2, 2);
        let y = shortcut_cascade_decode(&cfg, &z).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 8]);
        let z2 = shortcut_cascade_encode(&cfg, &y).unwrap();
        for (a, b) in z.iter().zip(z2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_groups_partition_all_params() {
        let model = Autoencoder::build(&tiny_config(), 1).unwrap();
        let groups = model.parameter_groups();
        assert_eq!(groups.len(), 4);
        let mut ids = std::collections::HashSet::new();
        let mut total = 0;
        for (_, params) in &groups {
            for (_, p) in params {
                assert!(ids.insert(p.id()), "tensor appears in two groups");
                total += 1;
            }
        }
        assert_eq!(total, model.named_params().len());
        // every component contributes somewhere
        let names: Vec<String> =
            model.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n.starts_with("stem.")));
        assert!(names.iter().any(|n| n.starts_with("head.")));
        assert!(names.iter().any(|n| n.starts_with("latent.in.")));
        assert!(names.iter().any(|n| n.starts_with("latent.out.")));
    }

    #[test]
    fn group_assignment_follows_boundaries() {
        let model = Autoencoder::build(&tiny_config(), 1).unwrap();
        let groups: std::collections::HashMap<String, Vec<String>> = model
            .parameter_groups()
            .into_iter()
            .map(|(g, ps)| (g, ps.into_iter().map(|(n, _)| n).collect()))
            .collect();
        // k=2, adapt=1: stage 2 and down1/up1 sit at the latent end
        assert!(groups["encoder_head"].iter().any(|n| n.starts_with("enc.stage2.")));
        assert!(groups["encoder_head"].iter().any(|n| n.starts_with("enc.down1.")));
        assert!(groups["encoder_head"].iter().any(|n| n.starts_with("latent.in.")));
        assert!(groups["decoder_input"].iter().any(|n| n.starts_with("latent.out.")));
        assert!(groups["decoder_input"].iter().any(|n| n.starts_with("dec.stage2.")));
        assert!(groups["decoder_input"].iter().any(|n| n.starts_with("dec.up1.")));
        assert!(groups["decoder_head"].iter().any(|n| n.starts_with("head.")));
        assert!(groups["decoder_head"].iter().any(|n| n.starts_with("dec.stage0.")));
        assert!(groups["decoder_head"].iter().any(|n| n.starts_with("dec.up0.")));
        assert!(groups["other"].iter().any(|n| n.starts_with("stem.")));
        assert!(groups["other"].iter().any(|n| n.starts_with("enc.stage0.")));
    }

    #[test]
    fn set_trainable_groups_freezes_the_rest() {
        let model = Autoencoder::build(&tiny_config(), 1).unwrap();
        model.set_trainable_groups(&["encoder_head", "decoder_input"]).unwrap();
        let groups = model.parameter_groups();
        for (name, params) in &groups {
            let expect = name == "encoder_head" || name == "decoder_input";
            for (pname, p) in params {
                assert_eq!(p.is_trainable(), expect, "{pname}");
            }
        }
        assert!(model.set_trainable_groups(&["nope"]).is_err());
        model.set_all_trainable(true);
        assert_eq!(model.trainable_params().len(), model.params().len());
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let cfg = tiny_config();
        let a = Autoencoder::build(&cfg, 42).unwrap();
        let b = Autoencoder::build(&cfg, 42).unwrap();
        let c = Autoencoder::build(&cfg, 43).unwrap();
        let pa = a.named_params();
        let pb = b.named_params();
        let pc = c.named_params();
        assert_eq!(pa.len(), pb.len());
        let mut any_diff = false;
        for (((na, ta), (nb, tb)), (_, tc)) in pa.iter().zip(&pb).zip(&pc) {
            assert_eq!(na, nb);
            let da = ta.data();
            let db = tb.data();
            let dc = tc.data();
            for (x, y) in da.iter().zip(db.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            if da.iter().zip(dc.iter()).any(|(x, y)| x != y) {
                any_diff = true;
            }
        }
        assert!(any_diff, "different seeds should differ somewhere");
    }

    #[test]
    fn expected_parameter_tensor_count() {
        // per ResConvBlock: 2 norms (2) + 2 convs (2 each) = 8 tensors
        // stem 2, head 4, latent pair 8, down 8+2, up 8+2
        // tiny: stem + 3 enc blocks + 2 downs + latent + 3 dec blocks + 2 ups + head
        let model = Autoencoder::build(&tiny_config(), 1).unwrap();
        let expect = 2 + 3 * 8 + 2 * 10 + 8 + 3 * 8 + 2 * 10 + 4;
        assert_eq!(model.named_params().len(), expect);
    }

    #[test]
    fn latent_budget_is_resolution_over_f_squared_times_c() {
        let cfg = AutoencoderConfig::f32c32();
        assert_eq!(cfg.latent_budget(512), 16 * 16 * 32);
        let cfg = AutoencoderConfig::f64c128();
        assert_eq!(cfg.latent_budget(512), 8 * 8 * 128);
    }

    #[test]
    fn latent_stats_normalize_round_trip() {
        let model = Autoencoder::build(&tiny_config(), 9).unwrap();
        let imgs = rand_image(11, 2, 3, 8, 8);
        let stats = model.calibrate_latents(&[imgs.clone()]).unwrap();
        assert_eq!(stats.shift.len(), 8);
        let z = model.encode(&Tensor::constant(imgs)).unwrap();
        let zd = z.data().clone();
        let zn = stats.normalize(&zd);
        let back = stats.denormalize(&zn);
        for (a, b) in zd.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // normalized latents have near zero mean per channel
        let v = zn.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for ch in 0..8 {
            let lane = v.index_axis(ndarray::Axis(1), ch);
            let mean: f64 = lane.iter().sum::<f64>() / lane.len() as f64;
            assert!(mean.abs() < 1e-9, "channel {ch} mean {mean}");
        }
    }
}

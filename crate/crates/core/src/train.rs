//! Three-phase training. Phase 1 trains everything on low-res
//! reconstruction; phase 2 adapts only the groups around the latent
//! (encoder_head, decoder_input) at a higher resolution; phase 3 trains only
//! decoder_head, adding an adversarial term, back at low resolution.
//! Frozen parameters are hash-checked before and after each phase.

use crate::error::{config_err, numeric_err, shape_err, DcaeError, Result};
use crate::model::Autoencoder;
use crate::tensor::{AdamW, Conv2d, Tensor};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Instant;

pub const PHASE_COUNT: u8 = 3;

/// Parameter groups trained in each phase.
pub fn groups_for_phase(phase: u8) -> &'static [&'static str] {
    match phase {
        1 => &["other", "encoder_head", "decoder_input", "decoder_head"],
        2 => &["encoder_head", "decoder_input"],
        3 => &["decoder_head"],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub phase: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub resolution: usize,
    pub lr: f64,
    /// Weight on the adversarial generator term; phase 3 only.
    pub gan_weight: f64,
    pub disc_lr: f64,
}

impl PhaseSpec {
    pub fn new(phase: u8, steps: usize, batch_size: usize, resolution: usize) -> PhaseSpec {
        PhaseSpec {
            phase,
            steps,
            batch_size,
            resolution,
            lr: 1e-3,
            gan_weight: 0.1,
            disc_lr: 1e-3,
        }
    }

    pub fn validate(&self, f: usize) -> Result<()> {
        if !(1..=PHASE_COUNT).contains(&self.phase) {
            return Err(config_err(format!("phase must be 1..=3, got {}", self.phase)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(config_err("steps and batch_size must be positive"));
        }
        if self.resolution == 0 || self.resolution % f != 0 {
            return Err(config_err(format!(
                "phase {} resolution {} must be a positive multiple of f={f}",
                self.phase, self.resolution
            )));
        }
        if self.lr <= 0.0 || (self.phase == 3 && self.disc_lr <= 0.0) {
            return Err(config_err("learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: u8,
    pub resolution: usize,
    pub trainable_tensors: usize,
    pub total_tensors: usize,
    /// AdamW keeps two state tensors per trained parameter tensor.
    pub optimizer_state_tensors: usize,
    pub wall_secs: f64,
    pub records: Vec<StepRecord>,
}

impl PhaseReport {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    /// Mean loss over the last quarter of steps; steadier than a single step.
    pub fn tail_mean_loss(&self) -> f64 {
        let n = self.records.len();
        if n == 0 {
            return f64::NAN;
        }
        let tail = &self.records[n - n.div_ceil(4)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }
}

/// Mean absolute error; the reconstruction objective in every phase.
pub fn reconstruction_loss(recon: &Tensor, target: &Tensor) -> Result<Tensor> {
    if recon.shape() != target.shape() {
        return Err(shape_err(format!(
            "reconstruction loss: shapes {:?} vs {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    Ok(recon.sub(target).abs().mean_all())
}

/// Hinge loss for the discriminator given its scores on real and fake
/// batches. At scores identically zero this is exactly 2.
pub fn hinge_d_loss(d_real: &Tensor, d_fake: &Tensor) -> Tensor {
    let real_term = d_real.neg().add_scalar(1.0).relu().mean_all();
    let fake_term = d_fake.add_scalar(1.0).relu().mean_all();
    real_term.add(&fake_term)
}

/// Hinge generator loss: the generator pushes scores on fakes up.
pub fn hinge_g_loss(d_fake: &Tensor) -> Tensor {
    d_fake.mean_all().neg()
}

/// Patch discriminator: four stride-2 convs, SiLU between, one-channel
/// score map out. The final conv starts zeroed, so a fresh discriminator
/// scores everything 0 and the hinge loss starts at exactly 2.
pub struct Discriminator {
    pub layers: Vec<Conv2d>,
    pub final_conv: Conv2d,
}

impl Discriminator {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, base_width: usize) -> Discriminator {
        let widths = [base_width, 2 * base_width, 4 * base_width, 4 * base_width];
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for w in widths {
            layers.push(Conv2d::new(rng, cin, w, 4, 1).strided(2));
            cin = w;
        }
        Discriminator { layers, final_conv: Conv2d::new_zeroed(cin, 1, 3, 1) }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h).silu();
        }
        self.final_conv.forward(&h)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named_params(&format!("{prefix}.layer{i}"), out);
        }
        self.final_conv.named_params(&format!("{prefix}.final"), out);
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut named = Vec::new();
        self.named_params("disc", &mut named);
        named.into_iter().map(|(_, t)| t).collect()
    }
}

fn params_digest(params: &[(String, Tensor)]) -> Vec<u8> {
    let mut hasher = Sha256::new();
    for (name, t) in params {
        hasher.update(name.as_bytes());
        for v in t.data().iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().to_vec()
}

/// Runs one phase. `data` maps a step index to a batch [N, 3, R, R].
/// Returns an error if the loss goes non-finite or a frozen parameter
/// changes.
pub fn run_phase(
    model: &Autoencoder,
    spec: &PhaseSpec,
    disc: Option<&Discriminator>,
    data: &mut dyn FnMut(usize) -> ArrayD<f64>,
) -> Result<PhaseReport> {
    spec.validate(model.config.f)?;
    if spec.phase == 3 && disc.is_none() {
        return Err(config_err("phase 3 needs a discriminator"));
    }
    model.set_trainable_groups(groups_for_phase(spec.phase))?;

    let frozen: Vec<(String, Tensor)> = model
        .named_params()
        .into_iter()
        .filter(|(_, t)| !t.is_trainable())
        .collect();
    let frozen_before = params_digest(&frozen);

    let trainable = model.trainable_params();
    let trainable_tensors = trainable.len();
    let total_tensors = model.params().len();
    let mut opt = AdamW::new(trainable, spec.lr, 0.0);
    let mut d_opt = disc.map(|d| {
        for p in d.params() {
            p.set_trainable(true);
        }
        AdamW::new(d.params(), spec.disc_lr, 0.0)
    });

    let phase_start = Instant::now();
    let mut records = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let t0 = Instant::now();
        let batch = data(step);
        let x = Tensor::constant(batch);
        let recon = model.reconstruct(&x)?;
        let recon_loss = reconstruction_loss(&recon, &x)?;

        let (mut gan_g, mut gan_d) = (0.0, 0.0);
        let loss = if spec.phase == 3 {
            let d = disc.expect("checked above");
            let g_loss = hinge_g_loss(&d.forward(&recon));
            gan_g = g_loss.item();
            recon_loss.add(&g_loss.scale(spec.gan_weight))
        } else {
            recon_loss.clone()
        };

        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(numeric_err(format!(
                "phase {} loss became {loss_val} at step {step}",
                spec.phase
            )));
        }
        // generator update first: backward closures read live weights, so the
        // discriminator must not move until this tape is consumed
        opt.zero_grads();
        loss.backward();
        opt.step();

        if spec.phase == 3 {
            let d = disc.expect("checked above");
            let d_loss = hinge_d_loss(&d.forward(&x), &d.forward(&recon.detach()));
            gan_d = d_loss.item();
            let d_opt = d_opt.as_mut().expect("built above");
            d_opt.zero_grads();
            d_loss.backward();
            d_opt.step();
        }

        records.push(StepRecord {
            step,
            loss: loss_val,
            recon: recon_loss.item(),
            gan_g,
            gan_d,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }

    if params_digest(&frozen) != frozen_before {
        return Err(DcaeError::Pipeline(format!(
            "phase {} modified a frozen parameter",
            spec.phase
        )));
    }

    Ok(PhaseReport {
        phase: spec.phase,
        resolution: spec.resolution,
        trainable_tensors,
        total_tensors,
        optimizer_state_tensors: opt.state_tensor_count(),
        wall_secs: phase_start.elapsed().as_secs_f64(),
        records,
    })
}

/// Checks that running `phases` after `prior` keeps the overall history a
/// prefix of [1, 2, 3].
pub fn validate_phase_order(prior: &[u8], phases: &[u8], allow_out_of_order: bool) -> Result<()> {
    if allow_out_of_order {
        return Ok(());
    }
    let mut history = prior.to_vec();
    history.extend_from_slice(phases);
    let expected: Vec<u8> = (1..=history.len().min(3) as u8).collect();
    if history != expected {
        return Err(DcaeError::Pipeline(format!(
            "phases must run in order 1, 2, 3; history {prior:?} then {phases:?} is invalid \
             (use the out-of-order override to proceed anyway)"
        )));
    }
    Ok(())
}

/// Cross-phase resolution rules: adaptation is high-res, phases 1 and 3 are
/// low-res.
pub fn validate_resolution_schedule(specs: &[PhaseSpec]) -> Result<()> {
    let res = |p: u8| specs.iter().find(|s| s.phase == p).map(|s| s.resolution);
    if let (Some(r1), Some(r2)) = (res(1), res(2)) {
        if r2 <= r1 {
            return Err(config_err(format!(
                "phase 2 resolution {r2} must exceed phase 1 resolution {r1}"
            )));
        }
    }
    if let (Some(r2), Some(r3)) = (res(2), res(3)) {
        if r3 >= r2 {
            return Err(config_err(format!(
                "phase 3 resolution {r3} must be below phase 2 resolution {r2}"
            )));
        }
    }
    Ok(())
}

//! Trains the latent denoiser on top of a trained autoencoder. The output
//! directory's ckpt/ holds both models plus the latent statistics, so
//! `sample` needs only that one path.

use crate::config::FileConfig;
use crate::util::{config_err, run_dir, write_resolved, DataSource, JsonlWriter};
use dcae::data::SCENE_KINDS;
use dcae::diffusion::{
    apply_class_dropout, diffusion_loss, sample_timesteps, save_diffusion, DiffusionTransformer,
    NoiseSchedule,
};
use dcae::tensor::{normal_fill, AdamW, Tensor};
use dcae::{DcaeError, Result};
use ndarray::{concatenate, ArrayD, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;

pub fn run(ae_checkpoint: &Path, config_path: &Path, out_flag: Option<&str>) -> Result<()> {
    let cfg = FileConfig::load(config_path)?;
    let dcfg = cfg.diffusion.resolve()?;
    let tr = cfg.diffusion_train.clone();
    let (model, manifest) = dcae::checkpoint::load_model(ae_checkpoint)?;

    let resolution = cfg.phase_spec(1).resolution;
    if resolution % model.config.f != 0 {
        return Err(config_err(format!(
            "phase1.resolution {resolution} is not a multiple of the checkpoint's f={}",
            model.config.f
        )));
    }
    let latent_hw = resolution / model.config.f;
    let latent_c = model.config.latent_channels;

    // class conditioning: one class per synthetic scene kind, or a single
    // unconditional class
    let mut sources: Vec<DataSource> = if cfg.run.data_dir.is_some() {
        if dcfg.num_classes != 1 {
            return Err(config_err(format!(
                "folder data carries no labels; diffusion.num_classes must be 1, got {}",
                dcfg.num_classes
            )));
        }
        vec![DataSource::from_run(&cfg.run)?]
    } else {
        match dcfg.num_classes {
            1 => vec![DataSource::from_run(&cfg.run)?],
            4 => SCENE_KINDS
                .iter()
                .enumerate()
                .map(|(i, kind)| DataSource::synthetic(kind, cfg.run.seed + i as u64))
                .collect::<Result<Vec<_>>>()?,
            n => {
                return Err(config_err(format!(
                    "synthetic classes are the {} scene kinds or a single class; \
                     diffusion.num_classes must be 1 or 4, got {n}",
                    SCENE_KINDS.len()
                )))
            }
        }
    };

    let dir = run_dir(out_flag, cfg.run.output_dir.as_deref(), "train-diffusion")?;
    std::fs::write(dir.join("resolved.toml"), cfg.to_toml()?)?;

    let chunk = 8usize;
    let n_sources = sources.len();
    let calib: Vec<ArrayD<f64>> = (0..n_sources.max(2))
        .map(|i| sources[i % n_sources].batch_for_step(1000 + i, chunk, resolution))
        .collect::<Result<Vec<_>>>()?;
    let stats = model.calibrate_latents(&calib)?;

    let mut latents: Vec<ArrayD<f64>> = Vec::new();
    let mut class_ids: Vec<usize> = Vec::new();
    let mut done = 0usize;
    let mut step = 0usize;
    while done < tr.latent_images {
        let class = step % sources.len();
        let n = chunk.min(tr.latent_images - done);
        let batch = sources[class].batch_for_step(step, n, resolution)?;
        let z = model.encode(&Tensor::constant(batch))?.data().clone();
        latents.push(stats.normalize(&z));
        class_ids.extend(std::iter::repeat_n(class, n));
        done += n;
        step += 1;
    }
    let views: Vec<_> = latents.iter().map(|a| a.view()).collect();
    let latent_set = concatenate(Axis(0), &views).expect("same latent shapes");
    let n_latents = latent_set.shape()[0];

    let denoiser =
        DiffusionTransformer::build(&dcfg, (latent_c, latent_hw, latent_hw), cfg.run.seed)?;
    let schedule = NoiseSchedule::for_config(&dcfg);
    let mut opt = AdamW::new(denoiser.params(), tr.lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0xD1FF);
    let mut log = JsonlWriter::create(&dir.join("steps-diffusion.jsonl"))?;

    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for s in 0..tr.steps {
        let t0 = Instant::now();
        let idx: Vec<usize> = (0..tr.batch_size).map(|j| (s * tr.batch_size + j) % n_latents).collect();
        let z0 = latent_set.select(Axis(0), &idx);
        let t = sample_timesteps(&mut rng, tr.batch_size, dcfg.time_steps);
        let noise = normal_fill(&mut rng, z0.shape(), 1.0);
        let ids: Vec<usize> = idx.iter().map(|&i| class_ids[i]).collect();
        let ids = apply_class_dropout(&mut rng, &ids, dcfg.null_class(), dcfg.class_drop_prob);
        let loss = diffusion_loss(&denoiser, &schedule, &z0, &t, &noise, &ids)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(DcaeError::Numeric(format!(
                "diffusion loss became {loss_val} at step {s}"
            )));
        }
        opt.zero_grads();
        loss.backward();
        opt.step();
        if s == 0 {
            first_loss = loss_val;
        }
        last_loss = loss_val;
        log.write(&serde_json::json!({
            "step": s,
            "loss": loss_val,
            "wall_ms": t0.elapsed().as_secs_f64() * 1e3,
        }))?;
    }
    log.finish()?;

    let ckpt = dir.join("ckpt");
    dcae::checkpoint::save(&ckpt, &model, &manifest.phase_history, Some(&stats))?;
    save_diffusion(&ckpt, &denoiser)?;
    write_resolved(
        &dir,
        "summary.json",
        &serde_json::json!({
            "steps": tr.steps,
            "latents": n_latents,
            "latent_shape": [latent_c, latent_hw, latent_hw],
            "first_loss": first_loss,
            "last_loss": last_loss,
            "checkpoint": ckpt.display().to_string(),
        }),
    )?;
    println!(
        "train-diffusion: {} steps on {} latents ({}x{}x{}), loss {:.4} -> {:.4}, checkpoint {}",
        tr.steps, n_latents, latent_c, latent_hw, latent_hw, first_loss, last_loss, ckpt.display()
    );
    Ok(())
}

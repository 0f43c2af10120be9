//! Draws DDIM samples from a train-diffusion checkpoint directory and
//! decodes them to an image grid.

use crate::util::{config_err, run_dir, write_resolved};
use dcae::data::save_image_grid;
use dcae::diffusion::{ddim_sample, load_diffusion, NoiseSchedule};
use dcae::tensor::Tensor;
use dcae::{DcaeError, Result};
use std::path::Path;

pub fn run(
    checkpoint: &Path,
    n: usize,
    cfg_flag: Option<f64>,
    class_flag: Option<usize>,
    seed: u64,
    out_flag: Option<&str>,
) -> Result<()> {
    if n == 0 {
        return Err(config_err("--n must be positive"));
    }
    let (model, manifest) = dcae::checkpoint::load_model(checkpoint)?;
    let stats = manifest.latent_stats.ok_or_else(|| {
        DcaeError::Pipeline(
            "checkpoint has no latent statistics; point --checkpoint at a train-diffusion \
             ckpt directory"
                .into(),
        )
    })?;
    let denoiser = load_diffusion(checkpoint)?;
    let cfg_scale = cfg_flag.unwrap_or(denoiser.config.cfg_scale);

    let classes = denoiser.config.num_classes;
    if let Some(c) = class_flag {
        if c >= classes {
            return Err(config_err(format!(
                "--class {c} out of range; checkpoint has {classes} classes"
            )));
        }
    }
    let ids: Vec<usize> = match class_flag {
        Some(c) => vec![c; n],
        None => (0..n).map(|i| i % classes).collect(),
    };

    let schedule = NoiseSchedule::for_config(&denoiser.config);
    let z = ddim_sample(&denoiser, &schedule, &ids, cfg_scale, seed)?;
    let images = model.decode(&Tensor::constant(stats.denormalize(&z)))?.data().clone();

    let dir = run_dir(out_flag, None, "sample")?;
    write_resolved(
        &dir,
        "resolved.json",
        &serde_json::json!({
            "checkpoint": checkpoint.display().to_string(),
            "n": n,
            "cfg_scale": cfg_scale,
            "seed": seed,
            "class_ids": ids,
        }),
    )?;
    let grid_path = dir.join("samples.png");
    save_image_grid(&grid_path, &images, n.min(8))?;
    println!(
        "sample: {n} samples at cfg {cfg_scale} (seed {seed}) -> {}",
        grid_path.display()
    );
    Ok(())
}

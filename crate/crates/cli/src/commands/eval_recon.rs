//! Reconstruction evaluation: per-image PSNR/SSIM records, a Fréchet score
//! between original and reconstructed image statistics, and a side-by-side
//! grid (originals in the left column, reconstructions in the right).

use crate::util::{config_err, run_dir, write_resolved, DataSource, JsonlWriter};
use dcae::data::save_image_grid;
use dcae::metrics::{frechet_distance, psnr, ssim, GaussianStats, RandomConvEmbedder};
use dcae::tensor::Tensor;
use dcae::Result;
use ndarray::{concatenate, Array2, ArrayD, Axis};
use std::path::Path;

/// Fixed seed of the Fréchet embedding network; part of the protocol.
pub const EMBEDDER_SEED: u64 = 7;

pub fn run(
    checkpoint: &Path,
    data_spec: &str,
    resolution: usize,
    images: usize,
    grid_images: usize,
    seed: u64,
    out_flag: Option<&str>,
) -> Result<()> {
    let (model, _manifest) = dcae::checkpoint::load_model(checkpoint)?;
    if resolution % model.config.f != 0 {
        return Err(config_err(format!(
            "resolution {resolution} is not a multiple of the checkpoint's f={}",
            model.config.f
        )));
    }
    if images < 2 {
        return Err(config_err("need at least 2 images for distribution statistics"));
    }
    let dir = run_dir(out_flag, None, "eval-recon")?;
    write_resolved(
        &dir,
        "resolved.json",
        &serde_json::json!({
            "checkpoint": checkpoint.display().to_string(),
            "data": data_spec,
            "resolution": resolution,
            "images": images,
            "grid_images": grid_images,
            "seed": seed,
            "embedder_seed": EMBEDDER_SEED,
        }),
    )?;

    let mut data = DataSource::parse(data_spec, seed)?;
    let embedder = RandomConvEmbedder::new(EMBEDDER_SEED);
    let mut log = JsonlWriter::create(&dir.join("records.jsonl"))?;

    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut orig_rows: Vec<Array2<f64>> = Vec::new();
    let mut recon_rows: Vec<Array2<f64>> = Vec::new();
    let mut grid_pairs: Vec<ArrayD<f64>> = Vec::new();

    let chunk = 8usize;
    let mut done = 0usize;
    let mut step = 0usize;
    while done < images {
        let n = chunk.min(images - done);
        let orig = data.batch_for_step(step, n, resolution)?;
        let recon = model.reconstruct(&Tensor::constant(orig.clone()))?.data().clone();
        for j in 0..n {
            let o = orig.index_axis(Axis(0), j).to_owned().insert_axis(Axis(0)).into_dyn();
            let r = recon.index_axis(Axis(0), j).to_owned().insert_axis(Axis(0)).into_dyn();
            let p = psnr(&o, &r)?;
            let s = ssim(&o, &r)?;
            psnr_sum += p;
            ssim_sum += s;
            log.write(&serde_json::json!({"index": done + j, "psnr": p, "ssim": s}))?;
            if grid_pairs.len() < 2 * grid_images {
                grid_pairs.push(o);
                grid_pairs.push(r);
            }
        }
        orig_rows.push(embedder.embed(&orig)?);
        recon_rows.push(embedder.embed(&recon)?);
        done += n;
        step += 1;
    }
    log.finish()?;

    let stack = |rows: &[Array2<f64>]| {
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        concatenate(Axis(0), &views).expect("row widths match")
    };
    let frechet = frechet_distance(
        &GaussianStats::from_rows(&stack(&orig_rows).view())?,
        &GaussianStats::from_rows(&stack(&recon_rows).view())?,
    )?;

    if !grid_pairs.is_empty() {
        let views: Vec<_> = grid_pairs.iter().map(|a| a.view()).collect();
        let grid = concatenate(Axis(0), &views).expect("same image shapes");
        save_image_grid(&dir.join("grid.png"), &grid, 2)?;
    }

    let psnr_mean = psnr_sum / images as f64;
    let ssim_mean = ssim_sum / images as f64;
    write_resolved(
        &dir,
        "metrics.json",
        &serde_json::json!({
            "resolution": resolution,
            "images": images,
            "psnr_mean": psnr_mean,
            "ssim_mean": ssim_mean,
            "frechet": frechet,
        }),
    )?;
    println!(
        "eval-recon: {images} images at {resolution}x{resolution}: \
         psnr {psnr_mean:.2} dB, ssim {ssim_mean:.4}, frechet {frechet:.4} -> {}",
        dir.display()
    );
    Ok(())
}

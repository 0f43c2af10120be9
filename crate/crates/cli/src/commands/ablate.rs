//! The two controlled comparisons: shortcut vs no-shortcut twins, and
//! high-resolution evaluation with vs without the adaptation phase.

use crate::config::FileConfig;
use crate::util::{config_err, run_dir, write_resolved, DataSource, JsonlWriter};
use dcae::metrics::psnr;
use dcae::model::Autoencoder;
use dcae::tensor::Tensor;
use dcae::train::{reconstruction_loss, run_phase, PhaseSpec};
use dcae::Result;
use ndarray::ArrayD;
use std::path::Path;

fn recon_loss_on(model: &Autoencoder, batch: &ArrayD<f64>) -> Result<f64> {
    let x = Tensor::constant(batch.clone());
    let r = model.reconstruct(&x)?;
    Ok(reconstruction_loss(&r, &x)?.item())
}

fn psnr_on(model: &Autoencoder, batch: &ArrayD<f64>) -> Result<f64> {
    let x = Tensor::constant(batch.clone());
    let r = model.reconstruct(&x)?;
    let rd = r.data();
    psnr(batch, &rd)
}

/// Evenly spaced step indices ending at the last step, shared by both rows.
fn step_grid(steps: usize, points: usize) -> Vec<usize> {
    let points = points.min(steps).max(1);
    (1..=points).map(|i| i * steps / points - 1).collect()
}

pub fn residual(config_path: &Path, out_flag: Option<&str>) -> Result<()> {
    let cfg = FileConfig::load(config_path)?;
    let dir = run_dir(out_flag, cfg.run.output_dir.as_deref(), "ablate-residual")?;
    std::fs::write(dir.join("resolved.toml"), cfg.to_toml()?)?;

    let spec = cfg.phase_spec(1);
    let grid = step_grid(spec.steps, 8);
    let mut csv = String::from("variant,val_loss");
    for s in &grid {
        csv.push_str(&format!(",loss_step_{}", s + 1));
    }
    csv.push('\n');

    let mut summary = serde_json::Map::new();
    for shortcuts in [true, false] {
        let label = if shortcuts { "with_shortcuts" } else { "without_shortcuts" };
        let mut model_cfg = cfg.model.resolve()?;
        model_cfg.use_shortcuts = shortcuts;
        let model = Autoencoder::build(&model_cfg, cfg.run.seed)?;

        let mut data = DataSource::from_run(&cfg.run)?;
        data.batch_for_step(0, spec.batch_size, spec.resolution)?;
        let report = run_phase(&model, &spec, None, &mut |s| {
            data.batch_for_step(s, spec.batch_size, spec.resolution)
                .expect("data source was primed")
        })?;

        let mut log = JsonlWriter::create(&dir.join(format!("steps-{label}.jsonl")))?;
        for r in &report.records {
            log.write(r)?;
        }
        log.finish()?;

        let val_batch = data.eval_batch(8, spec.resolution)?;
        let val = recon_loss_on(&model, &val_batch)?;
        csv.push_str(&format!("{label},{val:.6}"));
        for &s in &grid {
            csv.push_str(&format!(",{:.6}", report.records[s].recon));
        }
        csv.push('\n');
        summary.insert(label.into(), serde_json::json!(val));
        println!("{label}: val loss {val:.4} after {} steps", spec.steps);
    }

    std::fs::write(dir.join("residual.csv"), csv)?;
    write_resolved(&dir, "summary.json", &summary)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn generalization(
    checkpoint: &Path,
    train_resolution: usize,
    adapt_resolution: usize,
    steps: usize,
    batch_size: usize,
    lr: f64,
    data_spec: &str,
    eval_images: usize,
    seed: u64,
    out_flag: Option<&str>,
) -> Result<()> {
    if adapt_resolution <= train_resolution {
        return Err(config_err(format!(
            "adaptation resolution {adapt_resolution} must exceed the train resolution \
             {train_resolution}"
        )));
    }
    let (model, _manifest) = dcae::checkpoint::load_model(checkpoint)?;
    let hi = 4 * train_resolution;
    for r in [train_resolution, adapt_resolution, hi] {
        if r % model.config.f != 0 {
            return Err(config_err(format!(
                "resolution {r} is not a multiple of the checkpoint's f={}",
                model.config.f
            )));
        }
    }
    let dir = run_dir(out_flag, None, "ablate-generalization")?;
    write_resolved(
        &dir,
        "resolved.json",
        &serde_json::json!({
            "checkpoint": checkpoint.display().to_string(),
            "train_resolution": train_resolution,
            "adapt_resolution": adapt_resolution,
            "steps": steps,
            "batch_size": batch_size,
            "lr": lr,
            "data": data_spec,
            "eval_images": eval_images,
            "seed": seed,
        }),
    )?;

    let mut data = DataSource::parse(data_spec, seed)?;
    let eval_lo = data.eval_batch(eval_images, train_resolution)?;
    let eval_hi = data.eval_batch(eval_images, hi)?;

    let mut csv = format!(
        "row,loss_{train_resolution}px,psnr_{train_resolution}px,loss_{hi}px,psnr_{hi}px\n"
    );
    let measure = |model: &Autoencoder, row: &str, csv: &mut String| -> Result<(f64, f64)> {
        let (lo, hi_loss) = (recon_loss_on(model, &eval_lo)?, recon_loss_on(model, &eval_hi)?);
        let (plo, phi) = (psnr_on(model, &eval_lo)?, psnr_on(model, &eval_hi)?);
        csv.push_str(&format!("{row},{lo:.6},{plo:.3},{hi_loss:.6},{phi:.3}\n"));
        println!("{row}: loss {lo:.4} at {train_resolution}px, {hi_loss:.4} at {hi}px");
        Ok((lo, hi_loss))
    };
    let before = measure(&model, "before_phase2", &mut csv)?;

    let spec = PhaseSpec { lr, ..PhaseSpec::new(2, steps, batch_size, adapt_resolution) };
    data.batch_for_step(0, batch_size, adapt_resolution)?;
    run_phase(&model, &spec, None, &mut |s| {
        data.batch_for_step(s, batch_size, adapt_resolution).expect("data source was primed")
    })?;
    let after = measure(&model, "after_phase2", &mut csv)?;

    std::fs::write(dir.join("generalization.csv"), csv)?;
    write_resolved(
        &dir,
        "summary.json",
        &serde_json::json!({
            "high_res_loss_before": before.1,
            "high_res_loss_after": after.1,
            "high_res_improved": after.1 < before.1,
        }),
    )?;
    Ok(())
}

//! Phase training driver. Each phase writes its own checkpoint directory
//! (ae-phase1..3) plus a per-step JSONL log; later phases resume from the
//! previous phase's checkpoint in the same run directory.

use crate::config::FileConfig;
use crate::util::{config_err, run_dir, write_resolved, DataSource, JsonlWriter};
use dcae::model::Autoencoder;
use dcae::train::{
    run_phase, validate_phase_order, validate_resolution_schedule, Discriminator, PhaseSpec,
};
use dcae::{DcaeError, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn phase_list(flag: &str) -> Result<Vec<u8>> {
    match flag {
        "all" => Ok(vec![1, 2, 3]),
        "1" => Ok(vec![1]),
        "2" => Ok(vec![2]),
        "3" => Ok(vec![3]),
        other => Err(config_err(format!("--phase must be 1, 2, 3, or all; got '{other}'"))),
    }
}

pub fn run(
    config_path: &Path,
    phase_flag: &str,
    allow_out_of_order: bool,
    out_flag: Option<&str>,
) -> Result<()> {
    let cfg = FileConfig::load(config_path)?;
    let model_cfg = cfg.model.resolve()?;
    let phases = phase_list(phase_flag)?;
    let dir = run_dir(out_flag, cfg.run.output_dir.as_deref(), "train-ae")?;
    std::fs::write(dir.join("resolved.toml"), cfg.to_toml()?)?;

    let all_specs: Vec<PhaseSpec> = (1..=3).map(|p| cfg.phase_spec(p)).collect();
    validate_resolution_schedule(&all_specs)?;

    let first = phases[0];
    let (model, mut history) = if first == 1 {
        (Autoencoder::build(&model_cfg, cfg.run.seed)?, Vec::new())
    } else {
        let prev = dir.join(format!("ae-phase{}", first - 1));
        if !prev.is_dir() {
            return Err(DcaeError::Pipeline(format!(
                "phase {first} resumes from {}; run the earlier phases first",
                prev.display()
            )));
        }
        let (m, manifest) = dcae::checkpoint::load_model_expecting(&prev, &model_cfg)?;
        (m, manifest.phase_history)
    };
    validate_phase_order(&history, &phases, allow_out_of_order)?;

    let mut data = DataSource::from_run(&cfg.run)?;
    for &p in &phases {
        let spec = cfg.phase_spec(p);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0xD15C);
        let disc = (p == 3).then(|| Discriminator::new(&mut rng, model_cfg.in_channels, 16));
        // prime the source so folder problems surface before training
        data.batch_for_step(0, spec.batch_size, spec.resolution)?;
        let offset = 1_000_000 * (p as usize - 1);
        let report = run_phase(&model, &spec, disc.as_ref(), &mut |s| {
            data.batch_for_step(offset + s, spec.batch_size, spec.resolution)
                .expect("data source was primed")
        })?;

        let mut log = JsonlWriter::create(&dir.join(format!("steps-phase{p}.jsonl")))?;
        for r in &report.records {
            log.write(r)?;
        }
        log.finish()?;

        history.push(p);
        let ckpt = dir.join(format!("ae-phase{p}"));
        dcae::checkpoint::save(&ckpt, &model, &history, None)?;
        println!(
            "phase {p}: {} steps at {}x{}, loss {:.4} -> {:.4}, {}/{} tensors trained, \
             {:.1} s, checkpoint {}",
            spec.steps,
            spec.resolution,
            spec.resolution,
            report.records.first().map_or(f64::NAN, |r| r.loss),
            report.tail_mean_loss(),
            report.trainable_tensors,
            report.total_tensors,
            report.wall_secs,
            ckpt.display()
        );
    }
    Ok(())
}

/// Writes an untrained checkpoint; with shortcuts on, its reconstructions
/// equal the parameter-free shuffle cascade.
pub fn init(config_path: &Path, out_flag: Option<&str>) -> Result<()> {
    let cfg = FileConfig::load(config_path)?;
    let model_cfg = cfg.model.resolve()?;
    let dir = run_dir(out_flag, cfg.run.output_dir.as_deref(), "init-ae")?;
    std::fs::write(dir.join("resolved.toml"), cfg.to_toml()?)?;
    let model = Autoencoder::build(&model_cfg, cfg.run.seed)?;
    let ckpt = dir.join("ae-init");
    dcae::checkpoint::save(&ckpt, &model, &[], None)?;
    write_resolved(
        &dir,
        "summary.json",
        &serde_json::json!({
            "tensors": model.params().len(),
            "parameters": model.params().iter().map(|t| t.numel()).sum::<usize>(),
            "checkpoint": ckpt.display().to_string(),
        }),
    )?;
    println!("initialized checkpoint at {}", ckpt.display());
    Ok(())
}

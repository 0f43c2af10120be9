//! Static and timed accounting for a configuration: parameter totals per
//! group, per-phase trainable counts, one-batch forward/backward wall time
//! at the phase-1 settings, and token counts at the profile resolution.

use crate::config::FileConfig;
use crate::util::{run_dir, write_resolved, DataSource};
use dcae::diffusion::token_count;
use dcae::model::Autoencoder;
use dcae::train::{groups_for_phase, reconstruction_loss};
use dcae::tensor::Tensor;
use dcae::Result;
use std::path::Path;
use std::time::Instant;

pub fn run(config_path: &Path, out_flag: Option<&str>) -> Result<()> {
    let cfg = FileConfig::load(config_path)?;
    let model_cfg = cfg.model.resolve()?;
    let dir = run_dir(out_flag, cfg.run.output_dir.as_deref(), "profile")?;
    std::fs::write(dir.join("resolved.toml"), cfg.to_toml()?)?;

    let model = Autoencoder::build(&model_cfg, cfg.run.seed)?;
    let groups = model.parameter_groups();
    let count = |ps: &[(String, Tensor)]| {
        (ps.len(), ps.iter().map(|(_, t)| t.numel()).sum::<usize>())
    };
    let mut group_counts = serde_json::Map::new();
    let mut total_tensors = 0;
    let mut total_params = 0;
    for (name, ps) in &groups {
        let (t, v) = count(ps);
        total_tensors += t;
        total_params += v;
        group_counts.insert(name.clone(), serde_json::json!({"tensors": t, "parameters": v}));
        println!("group {name}: {t} tensors, {v} parameters");
    }
    println!("total: {total_tensors} tensors, {total_params} parameters");

    let mut phase_counts = serde_json::Map::new();
    for phase in 1u8..=3 {
        let trained = groups_for_phase(phase);
        let (t, v) = groups
            .iter()
            .filter(|(name, _)| trained.contains(&name.as_str()))
            .fold((0usize, 0usize), |(at, av), (_, ps)| {
                let (t, v) = count(ps);
                (at + t, av + v)
            });
        phase_counts.insert(
            format!("phase{phase}"),
            serde_json::json!({"trainable_tensors": t, "trainable_parameters": v}),
        );
        println!("phase {phase} trains {t} tensors ({v} parameters)");
    }

    let spec = cfg.phase_spec(1);
    let mut data = DataSource::from_run(&cfg.run)?;
    let batch = data.batch_for_step(0, spec.batch_size, spec.resolution)?;
    let runs = cfg.profile.timing_batches.max(1);
    let (mut fwd_ms, mut bwd_ms) = (0.0, 0.0);
    for _ in 0..runs {
        for p in model.params() {
            p.zero_grad();
        }
        let x = Tensor::constant(batch.clone());
        let t0 = Instant::now();
        let recon = model.reconstruct(&x)?;
        let loss = reconstruction_loss(&recon, &x)?;
        fwd_ms += t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        loss.backward();
        bwd_ms += t1.elapsed().as_secs_f64() * 1e3;
    }
    fwd_ms /= runs as f64;
    bwd_ms /= runs as f64;
    println!(
        "forward {fwd_ms:.1} ms, backward {bwd_ms:.1} ms per batch of {} at {}x{}",
        spec.batch_size, spec.resolution, spec.resolution
    );

    let res = cfg.profile.resolution;
    let mut tokens = Vec::new();
    for p in [1usize, 2, 4] {
        match token_count(res, model_cfg.f, p) {
            Ok(t) => {
                tokens.push(serde_json::json!({"patch_size": p, "tokens": t}));
                println!("tokens at {res}px, p={p}: {t}");
            }
            Err(_) => println!("tokens at {res}px, p={p}: not divisible"),
        }
    }
    let latent_hw = res / model_cfg.f;
    println!(
        "latent at {res}px: {}x{latent_hw}x{latent_hw} ({} values)",
        model_cfg.latent_channels,
        model_cfg.latent_budget(res)
    );

    write_resolved(
        &dir,
        "profile.json",
        &serde_json::json!({
            "total_tensors": total_tensors,
            "total_parameters": total_params,
            "groups": group_counts,
            "phases": phase_counts,
            "timing": {
                "forward_ms": fwd_ms,
                "backward_ms": bwd_ms,
                "batch_size": spec.batch_size,
                "resolution": spec.resolution,
            },
            "tokens": tokens,
            "latent": {
                "resolution": res,
                "channels": model_cfg.latent_channels,
                "spatial": latent_hw,
                "budget": model_cfg.latent_budget(res),
            },
        }),
    )?;
    Ok(())
}

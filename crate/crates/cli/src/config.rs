//! TOML run configuration. The schema is closed: unknown keys anywhere are
//! config errors naming the offending key. Every section is optional;
//! `fill_defaults` makes all values concrete so the resolved config written
//! next to the outputs is complete and re-runnable.

use crate::util::config_err;
use dcae::diffusion::DiffusionConfig;
use dcae::model::{AutoencoderConfig, GroupBoundaries};
use dcae::train::PhaseSpec;
use dcae::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub phase1: PhaseSection,
    pub phase2: PhaseSection,
    pub phase3: PhaseSection,
    pub diffusion: DiffusionSection,
    pub diffusion_train: DiffusionTrainSection,
    pub eval: EvalSection,
    pub profile: ProfileSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Root for run outputs; relative paths are prefixed with $DCAE_OUT.
    pub output_dir: Option<String>,
    /// Synthetic scene kind used when no data_dir is given.
    pub scene: String,
    /// Folder of images to train/evaluate on instead of synthetic scenes.
    pub data_dir: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, output_dir: None, scene: "mixed".into(), data_dir: None }
    }
}

/// Mirrors AutoencoderConfig field for field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub f: usize,
    pub latent_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub in_channels: usize,
    pub use_shortcuts: bool,
    pub use_attention: bool,
    pub boundaries: BoundariesSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundariesSection {
    pub adapt_stages: usize,
    pub head_stages: usize,
}

impl Default for BoundariesSection {
    fn default() -> Self {
        BoundariesSection { adapt_stages: 1, head_stages: 1 }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = AutoencoderConfig::f32c32();
        ModelSection {
            f: p.f,
            latent_channels: p.latent_channels,
            stage_widths: p.stage_widths,
            blocks_per_stage: p.blocks_per_stage,
            in_channels: p.in_channels,
            use_shortcuts: p.use_shortcuts,
            use_attention: p.use_attention,
            boundaries: BoundariesSection::default(),
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<AutoencoderConfig> {
        let cfg = AutoencoderConfig {
            f: self.f,
            latent_channels: self.latent_channels,
            stage_widths: self.stage_widths.clone(),
            blocks_per_stage: self.blocks_per_stage.clone(),
            in_channels: self.in_channels,
            use_shortcuts: self.use_shortcuts,
            use_attention: self.use_attention,
            boundaries: GroupBoundaries {
                adapt_stages: self.boundaries.adapt_stages,
                head_stages: self.boundaries.head_stages,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mirrors PhaseSpec; the phase number comes from the section name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub resolution: Option<usize>,
    pub lr: Option<f64>,
    pub gan_weight: Option<f64>,
    pub disc_lr: Option<f64>,
}

impl PhaseSection {
    fn defaults_for(phase: u8) -> PhaseSpec {
        match phase {
            1 => PhaseSpec { lr: 1e-3, ..PhaseSpec::new(1, 2000, 4, 64) },
            2 => PhaseSpec { lr: 1e-3, ..PhaseSpec::new(2, 500, 2, 128) },
            _ => PhaseSpec { lr: 1e-4, ..PhaseSpec::new(3, 500, 4, 64) },
        }
    }

    fn fill(&mut self, phase: u8) {
        let d = Self::defaults_for(phase);
        self.steps.get_or_insert(d.steps);
        self.batch_size.get_or_insert(d.batch_size);
        self.resolution.get_or_insert(d.resolution);
        self.lr.get_or_insert(d.lr);
        self.gan_weight.get_or_insert(d.gan_weight);
        self.disc_lr.get_or_insert(d.disc_lr);
    }

    pub fn resolve(&self, phase: u8) -> PhaseSpec {
        let d = Self::defaults_for(phase);
        PhaseSpec {
            phase,
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            resolution: self.resolution.unwrap_or(d.resolution),
            lr: self.lr.unwrap_or(d.lr),
            gan_weight: self.gan_weight.unwrap_or(d.gan_weight),
            disc_lr: self.disc_lr.unwrap_or(d.disc_lr),
        }
    }
}

/// Mirrors DiffusionConfig field for field.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub time_steps: Option<usize>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub patch_size: Option<usize>,
    pub width: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub sample_steps: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub num_classes: Option<usize>,
    pub class_drop_prob: Option<f64>,
}

impl DiffusionSection {
    fn fill(&mut self) {
        let d = DiffusionConfig::default();
        self.time_steps.get_or_insert(d.time_steps);
        self.beta_start.get_or_insert(d.beta_start);
        self.beta_end.get_or_insert(d.beta_end);
        self.patch_size.get_or_insert(d.patch_size);
        self.width.get_or_insert(d.width);
        self.depth.get_or_insert(d.depth);
        self.heads.get_or_insert(d.heads);
        self.sample_steps.get_or_insert(d.sample_steps);
        self.cfg_scale.get_or_insert(d.cfg_scale);
        self.num_classes.get_or_insert(d.num_classes);
        self.class_drop_prob.get_or_insert(d.class_drop_prob);
    }

    pub fn resolve(&self) -> Result<DiffusionConfig> {
        let d = DiffusionConfig::default();
        let cfg = DiffusionConfig {
            time_steps: self.time_steps.unwrap_or(d.time_steps),
            beta_start: self.beta_start.unwrap_or(d.beta_start),
            beta_end: self.beta_end.unwrap_or(d.beta_end),
            patch_size: self.patch_size.unwrap_or(d.patch_size),
            width: self.width.unwrap_or(d.width),
            depth: self.depth.unwrap_or(d.depth),
            heads: self.heads.unwrap_or(d.heads),
            sample_steps: self.sample_steps.unwrap_or(d.sample_steps),
            cfg_scale: self.cfg_scale.unwrap_or(d.cfg_scale),
            num_classes: self.num_classes.unwrap_or(d.num_classes),
            class_drop_prob: self.class_drop_prob.unwrap_or(d.class_drop_prob),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// How many images are encoded into the latent training set.
    pub latent_images: usize,
}

impl Default for DiffusionTrainSection {
    fn default() -> Self {
        DiffusionTrainSection { steps: 300, batch_size: 8, lr: 1e-3, latent_images: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Images in the side-by-side reconstruction grid.
    pub grid_images: usize,
    /// Images behind the Fréchet score; the reference protocol uses 1024.
    pub frechet_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { grid_images: 8, frechet_images: 1024 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    /// Input resolution for token accounting.
    pub resolution: usize,
    /// Batches averaged for the wall-time figures.
    pub timing_batches: usize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection { resolution: 512, timing_batches: 1 }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| config_err(format!("{}: {}", path.display(), e.message())))?;
        if cfg.run.data_dir.is_some() && cfg.run.scene != RunSection::default().scene {
            return Err(config_err("set either run.scene or run.data_dir, not both"));
        }
        cfg.fill_defaults();
        Ok(cfg)
    }

    pub fn fill_defaults(&mut self) {
        self.phase1.fill(1);
        self.phase2.fill(2);
        self.phase3.fill(3);
        self.diffusion.fill();
    }

    pub fn phase_spec(&self, phase: u8) -> PhaseSpec {
        match phase {
            1 => self.phase1.resolve(1),
            2 => self.phase2.resolve(2),
            _ => self.phase3.resolve(3),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| config_err(format!("cannot serialize resolved config: {e}")))
    }
}

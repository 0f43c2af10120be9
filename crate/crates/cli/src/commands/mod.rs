pub mod ablate;
pub mod eval_recon;
pub mod profile;
pub mod sample;
pub mod train_ae;
pub mod train_diffusion;

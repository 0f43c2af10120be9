//! Learnable blocks with non-parametric shortcuts. Every block computes
//! branch(x) + shortcut(x); the branch's final conv is zero-initialized when
//! shortcuts are enabled, so a fresh block reproduces its shortcut exactly.
//! Constructors validate channel divisibility so forward can never mismatch.

use crate::error::{config_err, Result};
use crate::tensor::{Conv2d, GroupNorm, Tensor};
use rand_chacha::ChaCha8Rng;

/// Group count for channel normalization: largest divisor of C up to 32.
pub fn norm_groups(c: usize) -> usize {
    let mut g = 32usize.min(c);
    while c % g != 0 {
        g -= 1;
    }
    g
}

fn final_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, pad: usize, zero: bool) -> Conv2d {
    if zero {
        Conv2d::new_zeroed(cin, cout, k, pad)
    } else {
        Conv2d::new(rng, cin, cout, k, pad)
    }
}

/// Plain pre-activation residual conv block at constant width. Its final conv
/// is zero-initialized, so a fresh block is an exact identity.
pub struct ResConvBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
}

impl ResConvBlock {
    pub fn new(rng: &mut ChaCha8Rng, c: usize) -> ResConvBlock {
        ResConvBlock {
            norm1: GroupNorm::new(c, norm_groups(c)),
            conv1: Conv2d::new(rng, c, c, 3, 1),
            norm2: GroupNorm::new(c, norm_groups(c)),
            conv2: Conv2d::new_zeroed(c, c, 3, 1),
        }
    }

    pub fn branch(&self, x: &Tensor) -> Tensor {
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        self.conv2.forward(&self.norm2.forward(&h).silu())
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.branch(x).add(x)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.named_params(&format!("{prefix}.norm1"), out);
        self.conv1.named_params(&format!("{prefix}.conv1"), out);
        self.norm2.named_params(&format!("{prefix}.norm2"), out);
        self.conv2.named_params(&format!("{prefix}.conv2"), out);
    }
}

/// Halves spatial dims, maps C -> C_out. Branch: residual conv block then a
/// stride-2 conv. Shortcut: space_to_channel(2) then channel_average with
/// g = 4C / C_out.
pub struct ResidualDownsampleBlock {
    pub res: ResConvBlock,
    pub down: Conv2d,
    pub g: usize,
    pub use_shortcut: bool,
}

impl ResidualDownsampleBlock {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, use_shortcut: bool) -> Result<Self> {
        if 4 * c_in % c_out != 0 {
            return Err(config_err(format!(
                "downsample block: C_out={c_out} must divide 4*C_in={} for the channel_average shortcut",
                4 * c_in
            )));
        }
        Ok(ResidualDownsampleBlock {
            res: ResConvBlock::new(rng, c_in),
            down: final_conv(rng, c_in, c_out, 3, 1, use_shortcut).strided(2),
            g: 4 * c_in / c_out,
            use_shortcut,
        })
    }

    pub fn branch(&self, x: &Tensor) -> Tensor {
        self.down.forward(&self.res.forward(x))
    }

    pub fn shortcut(&self, x: &Tensor) -> Tensor {
        x.space_to_channel(2).channel_average(self.g)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = self.branch(x);
        if self.use_shortcut {
            b.add(&self.shortcut(x))
        } else {
            b
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.res.named_params(&format!("{prefix}.res"), out);
        self.down.named_params(&format!("{prefix}.down"), out);
    }
}

/// Doubles spatial dims, maps C -> C_out. Branch: residual conv block,
/// nearest-neighbor 2x, conv. Shortcut: channel_to_space(2) then
/// channel_duplicate with g = C_out / (C/4).
pub struct ResidualUpsampleBlock {
    pub res: ResConvBlock,
    pub conv: Conv2d,
    pub g: usize,
    pub use_shortcut: bool,
}

impl ResidualUpsampleBlock {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, use_shortcut: bool) -> Result<Self> {
        if c_in % 4 != 0 {
            return Err(config_err(format!(
                "upsample block: C_in={c_in} must be divisible by 4 for channel_to_space"
            )));
        }
        if c_out % (c_in / 4) != 0 {
            return Err(config_err(format!(
                "upsample block: C_in/4={} must divide C_out={c_out} for the channel_duplicate shortcut",
                c_in / 4
            )));
        }
        Ok(ResidualUpsampleBlock {
            res: ResConvBlock::new(rng, c_in),
            conv: final_conv(rng, c_in, c_out, 3, 1, use_shortcut),
            g: c_out / (c_in / 4),
            use_shortcut,
        })
    }

    pub fn branch(&self, x: &Tensor) -> Tensor {
        self.conv.forward(&self.res.forward(x).upsample_nearest_2x())
    }

    pub fn shortcut(&self, x: &Tensor) -> Tensor {
        x.channel_to_space(2).channel_duplicate(self.g)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = self.branch(x);
        if self.use_shortcut {
            b.add(&self.shortcut(x))
        } else {
            b
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.res.named_params(&format!("{prefix}.res"), out);
        self.conv.named_params(&format!("{prefix}.conv"), out);
    }
}

/// Middle-stage projections between encoder width and the latent, with
/// averaging into the latent and duplication out of it.
pub struct LatentProjectionPair {
    pub norm_in: GroupNorm,
    pub conv_in: Conv2d,
    pub norm_out: GroupNorm,
    pub conv_out: Conv2d,
    pub g_in: usize,
    pub g_out: usize,
    pub use_shortcut: bool,
}

impl LatentProjectionPair {
    pub fn new(rng: &mut ChaCha8Rng, c_enc: usize, c: usize, c_dec: usize, use_shortcut: bool) -> Result<Self> {
        if c_enc % c != 0 {
            return Err(config_err(format!(
                "latent projection: latent channels c={c} must divide encoder width C_enc={c_enc}"
            )));
        }
        if c_dec % c != 0 {
            return Err(config_err(format!(
                "latent projection: latent channels c={c} must divide decoder width C_dec={c_dec}"
            )));
        }
        Ok(LatentProjectionPair {
            norm_in: GroupNorm::new(c_enc, norm_groups(c_enc)),
            conv_in: final_conv(rng, c_enc, c, 3, 1, use_shortcut),
            norm_out: GroupNorm::new(c, norm_groups(c)),
            conv_out: final_conv(rng, c, c_dec, 3, 1, use_shortcut),
            g_in: c_enc / c,
            g_out: c_dec / c,
            use_shortcut,
        })
    }

    pub fn in_branch(&self, x: &Tensor) -> Tensor {
        self.conv_in.forward(&self.norm_in.forward(x).silu())
    }

    pub fn out_branch(&self, z: &Tensor) -> Tensor {
        self.conv_out.forward(&self.norm_out.forward(z).silu())
    }

    pub fn project_in(&self, x: &Tensor) -> Tensor {
        let b = self.in_branch(x);
        if self.use_shortcut {
            b.add(&x.channel_average(self.g_in))
        } else {
            b
        }
    }

    pub fn project_out(&self, z: &Tensor) -> Tensor {
        let b = self.out_branch(z);
        if self.use_shortcut {
            b.add(&z.channel_duplicate(self.g_out))
        } else {
            b
        }
    }

    pub fn named_in_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm_in.named_params(&format!("{prefix}.norm"), out);
        self.conv_in.named_params(&format!("{prefix}.conv"), out);
    }

    pub fn named_out_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm_out.named_params(&format!("{prefix}.norm"), out);
        self.conv_out.named_params(&format!("{prefix}.conv"), out);
    }
}

/// Image-to-feature entry: conv branch plus a channel_duplicate shortcut,
/// so a fresh stem is pure duplication of the input channels.
pub struct ResidualStem {
    pub conv: Conv2d,
    pub g: usize,
    pub use_shortcut: bool,
}

impl ResidualStem {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, width: usize, use_shortcut: bool) -> Result<Self> {
        if width % c_in != 0 {
            return Err(config_err(format!(
                "stem: first stage width {width} must be a multiple of in_channels {c_in}"
            )));
        }
        Ok(ResidualStem {
            conv: final_conv(rng, c_in, width, 3, 1, use_shortcut),
            g: width / c_in,
            use_shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = self.conv.forward(x);
        if self.use_shortcut {
            b.add(&x.channel_duplicate(self.g))
        } else {
            b
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.named_params(&format!("{prefix}.conv"), out);
    }
}

/// Feature-to-image exit: conv branch plus a channel_average shortcut.
pub struct ResidualHead {
    pub norm: GroupNorm,
    pub conv: Conv2d,
    pub g: usize,
    pub use_shortcut: bool,
}

impl ResidualHead {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, c_out: usize, use_shortcut: bool) -> Result<Self> {
        if width % c_out != 0 {
            return Err(config_err(format!(
                "head: first stage width {width} must be a multiple of out_channels {c_out}"
            )));
        }
        Ok(ResidualHead {
            norm: GroupNorm::new(width, norm_groups(width)),
            conv: final_conv(rng, width, c_out, 3, 1, use_shortcut),
            g: width / c_out,
            use_shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = self.conv.forward(&self.norm.forward(x).silu());
        if self.use_shortcut {
            b.add(&x.channel_average(self.g))
        } else {
            b
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm.named_params(&format!("{prefix}.norm"), out);
        self.conv.named_params(&format!("{prefix}.conv"), out);
    }
}

/// Single-head self-attention over spatial positions, used optionally at the
/// lowest resolution. The output projection is zero-initialized, so a fresh
/// attention block is an exact identity.
pub struct AttentionBlock {
    pub norm: GroupNorm,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub proj: Conv2d,
    c: usize,
}

impl AttentionBlock {
    pub fn new(rng: &mut ChaCha8Rng, c: usize) -> AttentionBlock {
        AttentionBlock {
            norm: GroupNorm::new(c, norm_groups(c)),
            q: Conv2d::new(rng, c, c, 1, 0),
            k: Conv2d::new(rng, c, c, 1, 0),
            v: Conv2d::new(rng, c, c, 1, 0),
            proj: Conv2d::new_zeroed(c, c, 1, 0),
            c,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let xn = self.norm.forward(x);
        let to_tokens = |t: &Tensor| t.reshape(&[n, self.c, h * w]).permute(&[0, 2, 1]);
        let q = to_tokens(&self.q.forward(&xn));
        let k = to_tokens(&self.k.forward(&xn));
        let v = to_tokens(&self.v.forward(&xn));
        let scores = q.bmm(&k.permute(&[0, 2, 1])).scale(1.0 / (self.c as f64).sqrt());
        let ctx = scores.softmax_last().bmm(&v);
        let spatial = ctx.permute(&[0, 2, 1]).reshape(&[n, self.c, h, w]);
        self.proj.forward(&spatial).add(x)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm.named_params(&format!("{prefix}.norm"), out);
        self.q.named_params(&format!("{prefix}.q"), out);
        self.k.named_params(&format!("{prefix}.k"), out);
        self.v.named_params(&format!("{prefix}.v"), out);
        self.proj.named_params(&format!("{prefix}.proj"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, normal_fill, Tensor};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn down_block_zero_init_equals_shortcut_bitwise() {
        let mut r = rng(1);
        let blk = ResidualDownsampleBlock::new(&mut r, 4, 8, true).unwrap();
        let x = Tensor::constant(normal_fill(&mut r, &[1, 4, 8, 8], 1.0));
        assert_eq!(blk.g, 2);
        assert_eq!(bits(&blk.forward(&x)), bits(&blk.shortcut(&x)));
    }

    #[test]
    fn up_block_zero_init_equals_shortcut_bitwise() {
        let mut r = rng(2);
        let blk = ResidualUpsampleBlock::new(&mut r, 8, 4, true).unwrap();
        let x = Tensor::constant(normal_fill(&mut r, &[1, 8, 4, 4], 1.0));
        assert_eq!(blk.g, 2);
        let y = blk.forward(&x);
        assert_eq!(y.shape(), vec![1, 4, 8, 8]);
        assert_eq!(bits(&y), bits(&blk.shortcut(&x)));
    }

    #[test]
    fn latent_pair_zero_init_equals_shortcuts() {
        let mut r = rng(3);
        let pair = LatentProjectionPair::new(&mut r, 128, 32, 128, true).unwrap();
        assert_eq!(pair.g_in, 4);
        let x = Tensor::constant(normal_fill(&mut r, &[1, 128, 2, 2], 1.0));
        assert_eq!(bits(&pair.project_in(&x)), bits(&x.channel_average(4)));
        let z = Tensor::constant(normal_fill(&mut r, &[1, 32, 2, 2], 1.0));
        assert_eq!(bits(&pair.project_out(&z)), bits(&z.channel_duplicate(4)));
    }

    #[test]
    fn forward_is_branch_plus_shortcut_bitwise() {
        // holds for arbitrary parameter values, not just zero init
        let mut r = rng(4);
        let blk = ResidualDownsampleBlock::new(&mut r, 4, 8, true).unwrap();
        blk.down.w.set_data(normal_fill(&mut r, &[8, 4, 3, 3], 0.5));
        blk.down.b.set_data(normal_fill(&mut r, &[8], 0.5));
        let x = Tensor::constant(normal_fill(&mut r, &[2, 4, 6, 6], 1.0));
        let composed = blk.branch(&x).add(&blk.shortcut(&x));
        assert_eq!(bits(&blk.forward(&x)), bits(&composed));
    }

    #[test]
    fn down_then_up_restores_shape() {
        let mut r = rng(5);
        let down = ResidualDownsampleBlock::new(&mut r, 4, 8, true).unwrap();
        let up = ResidualUpsampleBlock::new(&mut r, 8, 4, true).unwrap();
        let x = Tensor::constant(normal_fill(&mut r, &[1, 4, 8, 8], 1.0));
        let y = up.forward(&down.forward(&x));
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn divisibility_violations_are_config_errors() {
        let mut r = rng(6);
        assert!(ResidualDownsampleBlock::new(&mut r, 4, 7, true).is_err());
        assert!(ResidualUpsampleBlock::new(&mut r, 6, 4, true).is_err());
        assert!(ResidualUpsampleBlock::new(&mut r, 8, 3, true).is_err());
        assert!(LatentProjectionPair::new(&mut r, 100, 32, 128, true).is_err());
        assert!(ResidualStem::new(&mut r, 3, 64, true).is_err());
        assert!(ResidualStem::new(&mut r, 3, 48, true).is_ok());
    }

    fn randomize(params: &[(String, Tensor)], r: &mut ChaCha8Rng) {
        // gradient checks need nonzero weights everywhere
        for (_, p) in params {
            let shape = p.shape();
            p.set_data(normal_fill(r, &shape, 0.4));
        }
    }

    /// Random linear probe keeps the loss O(1) so central differences are
    /// not drowned by roundoff on a large quadratic loss.
    fn probe_for(y: &Tensor, r: &mut ChaCha8Rng) -> Tensor {
        let shape = y.shape();
        Tensor::constant(normal_fill(r, &shape, 1.0))
    }

    #[test]
    fn fd_down_block_all_params_and_input() {
        let mut r = rng(7);
        let blk = ResidualDownsampleBlock::new(&mut r, 4, 8, true).unwrap();
        let mut named = Vec::new();
        blk.named_params("down", &mut named);
        randomize(&named, &mut r);
        let x = Tensor::param(normal_fill(&mut r, &[1, 4, 4, 4], 1.0));
        let probe = probe_for(&blk.forward(&x), &mut r);
        let mut params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
        params.push(x.clone());
        let rep = finite_diff_check(|| blk.forward(&x).mul(&probe).mean_all(), &params, 1e-5, 48);
        assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn fd_up_block_all_params_and_input() {
        let mut r = rng(8);
        let blk = ResidualUpsampleBlock::new(&mut r, 8, 4, true).unwrap();
        let mut named = Vec::new();
        blk.named_params("up", &mut named);
        randomize(&named, &mut r);
        let x = Tensor::param(normal_fill(&mut r, &[1, 8, 4, 4], 1.0));
        let probe = probe_for(&blk.forward(&x), &mut r);
        let mut params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
        params.push(x.clone());
        let rep = finite_diff_check(|| blk.forward(&x).mul(&probe).mean_all(), &params, 1e-5, 48);
        assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn fd_latent_pair_round_trip() {
        let mut r = rng(9);
        let pair = LatentProjectionPair::new(&mut r, 8, 4, 8, true).unwrap();
        let mut named = Vec::new();
        pair.named_in_params("in", &mut named);
        pair.named_out_params("out", &mut named);
        randomize(&named, &mut r);
        let x = Tensor::param(normal_fill(&mut r, &[1, 8, 3, 3], 1.0));
        let probe = probe_for(&pair.project_out(&pair.project_in(&x)), &mut r);
        let mut params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
        params.push(x.clone());
        let rep = finite_diff_check(
            || pair.project_out(&pair.project_in(&x)).mul(&probe).mean_all(),
            &params,
            1e-5,
            48,
        );
        assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn attention_block_is_identity_at_init_and_differentiable() {
        let mut r = rng(10);
        let attn = AttentionBlock::new(&mut r, 8);
        let x = Tensor::constant(normal_fill(&mut r, &[1, 8, 3, 3], 1.0));
        assert_eq!(bits(&attn.forward(&x)), bits(&x));

        let mut named = Vec::new();
        attn.named_params("attn", &mut named);
        randomize(&named, &mut r);
        let xp = Tensor::param(normal_fill(&mut r, &[1, 8, 2, 2], 1.0));
        let probe = probe_for(&attn.forward(&xp), &mut r);
        let mut params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
        params.push(xp.clone());
        let rep = finite_diff_check(|| attn.forward(&xp).mul(&probe).mean_all(), &params, 1e-5, 32);
        assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn no_shortcut_twin_outputs_branch_only() {
        let mut r = rng(11);
        let blk = ResidualDownsampleBlock::new(&mut r, 4, 8, false).unwrap();
        let x = Tensor::constant(normal_fill(&mut r, &[1, 4, 4, 4], 1.0));
        assert_eq!(bits(&blk.forward(&x)), bits(&blk.branch(&x)));
        // twin keeps a live (non-zero) final conv so training is not dead
        let wsum: f64 = blk.down.w.data().iter().map(|v| v.abs()).sum();
        assert!(wsum > 0.0);
    }
}

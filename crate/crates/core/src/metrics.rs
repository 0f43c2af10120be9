//! Reconstruction and distribution metrics. Image values are assumed to
//! live in [-1, 1], so the dynamic range is 2.0 for PSNR and SSIM.

use crate::error::{data_err, numeric_err, shape_err, Result};
use crate::tensor::{Conv2d, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayD, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Peak-to-peak value range of image data.
pub const DATA_RANGE: f64 = 2.0;

/// PSNR in dB. Identical inputs return f64::INFINITY.
pub fn psnr(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("psnr: shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(shape_err("psnr: empty input"));
    }
    let mse: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM over batch and channels with an 11x11 Gaussian window applied
/// to the valid region (no padding).
pub fn ssim(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("ssim: shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s = a.shape();
    if s.len() != 4 {
        return Err(shape_err(format!("ssim expects [N, C, H, W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * DATA_RANGE) * (SSIM_K1 * DATA_RANGE);
    let c2 = (SSIM_K2 * DATA_RANGE) * (SSIM_K2 * DATA_RANGE);
    let a4 = a.view().into_dimensionality::<ndarray::Ix4>().expect("rank checked");
    let b4 = b.view().into_dimensionality::<ndarray::Ix4>().expect("rank checked");

    // separable weighted sums: rows first, then columns
    let blur = |img: &ArrayView2<f64>| -> Array2<f64> {
        let (h, w) = img.dim();
        let wo = w - SSIM_WINDOW + 1;
        let ho = h - SSIM_WINDOW + 1;
        let mut rows = Array2::<f64>::zeros((h, wo));
        for i in 0..h {
            for j in 0..wo {
                let mut acc = 0.0;
                for (t, wt) in win.iter().enumerate() {
                    acc += wt * img[(i, j + t)];
                }
                rows[(i, j)] = acc;
            }
        }
        let mut out = Array2::<f64>::zeros((ho, wo));
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for (t, wt) in win.iter().enumerate() {
                    acc += wt * rows[(i + t, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let xa = a4.index_axis(Axis(0), ni);
            let xa = xa.index_axis(Axis(0), ci);
            let xb = b4.index_axis(Axis(0), ni);
            let xb = xb.index_axis(Axis(0), ci);
            let mu_a = blur(&xa);
            let mu_b = blur(&xb);
            let aa = blur(&(&xa * &xa).view());
            let bb = blur(&(&xb * &xb).view());
            let ab = blur(&(&xa * &xb).view());
            for ((i, j), ma) in mu_a.indexed_iter() {
                let mb = mu_b[(i, j)];
                let va = aa[(i, j)] - ma * ma;
                let vb = bb[(i, j)] - mb * mb;
                let cov = ab[(i, j)] - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Sample mean and unbiased covariance of row vectors.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Array2<f64>,
}

impl GaussianStats {
    pub fn from_rows(x: &ArrayView2<f64>) -> Result<GaussianStats> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(data_err(format!("need at least 2 samples to estimate statistics, got {n}")));
        }
        let mut mean = vec![0.0; d];
        for row in x.rows() {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = Array2::<f64>::zeros((d, d));
        for row in x.rows() {
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in i..d {
                    cov[(i, j)] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] /= (n - 1) as f64;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        Ok(GaussianStats { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_row_iterator(r, c, a.iter().cloned())
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > 1e-8 {
        return Err(numeric_err(format!("{what} is not symmetric (max asymmetry {worst:.3e})")));
    }
    Ok(())
}

/// Eigendecomposition square root. Eigenvalues in [-1e-6, 0) are treated as
/// rounding noise and clamped; anything more negative is a hard error.
fn sym_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-6 {
            return Err(numeric_err(format!("{what} is not positive semidefinite (eigenvalue {v:.3e})")));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&vals);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Squared 2-Wasserstein distance between Gaussians:
/// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2).
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!("frechet: dimensions {} vs {}", a.dim(), b.dim())));
    }
    let s1 = to_dmatrix(&a.cov);
    let s2 = to_dmatrix(&b.cov);
    check_symmetric(&s1, "first covariance")?;
    check_symmetric(&s2, "second covariance")?;
    let s1h = sym_sqrt(&s1, "first covariance")?;
    let inner = &s1h * &s2 * &s1h;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sym_sqrt(&inner, "cross term")?;

    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m[(i, i)]).sum::<f64>();
    let d2 = mean_term + trace(&s1) + trace(&s2) - 2.0 * trace(&cross);
    Ok(d2.max(0.0))
}

pub const EMBED_DIM: usize = 64;

/// Fixed random conv network mapping images to 64-d features by global
/// average pooling. Never trained; the fixed seed makes scores reproducible.
pub struct RandomConvEmbedder {
    layers: Vec<Conv2d>,
}

impl RandomConvEmbedder {
    pub fn new(seed: u64) -> RandomConvEmbedder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [16, 32, EMBED_DIM];
        let mut layers = Vec::new();
        let mut cin = 3;
        for w in widths {
            layers.push(Conv2d::new(&mut rng, cin, w, 4, 1).strided(2));
            cin = w;
        }
        for layer in &layers {
            layer.w.set_trainable(false);
            layer.b.set_trainable(false);
        }
        RandomConvEmbedder { layers }
    }

    /// [N, 3, H, W] -> [N, 64]; needs H, W >= 8 for the three stride-2 convs.
    pub fn embed(&self, images: &ArrayD<f64>) -> Result<Array2<f64>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err(format!("embedder expects [N, 3, H, W], got {s:?}")));
        }
        if s[2] < 8 || s[3] < 8 {
            return Err(shape_err(format!("embedder needs at least 8x8 images, got {}x{}", s[2], s[3])));
        }
        let mut h = Tensor::constant(images.clone());
        for layer in &self.layers {
            h = layer.forward(&h).silu();
        }
        let hs = h.shape();
        let (n, c, sp) = (hs[0], hs[1], hs[2] * hs[3]);
        let hd = h.data();
        let mut out = Array2::<f64>::zeros((n, c));
        let v = hd.view().into_dimensionality::<ndarray::Ix4>().expect("conv output rank 4");
        for ni in 0..n {
            for ci in 0..c {
                out[(ni, ci)] =
                    v.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() / sp as f64;
            }
        }
        Ok(out)
    }
}

/// Fréchet distance between the embedding statistics of two image sets.
pub fn embed_and_score(
    embedder: &RandomConvEmbedder,
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
) -> Result<f64> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    let sa = GaussianStats::from_rows(&ea.view())?;
    let sb = GaussianStats::from_rows(&eb.view())?;
    frechet_distance(&sa, &sb)
}

/// Extension point for learned perceptual metrics; nothing in the core
/// pipeline requires one.
pub trait PerceptualMetric {
    fn distance(&self, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64>;
}

/// L2 in the fixed random embedding space; a stand-in with the right shape
/// for plugging in a learned metric later.
impl PerceptualMetric for RandomConvEmbedder {
    fn distance(&self, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
        let ea = self.embed(a)?;
        let eb = self.embed(b)?;
        if ea.dim() != eb.dim() {
            return Err(shape_err("perceptual distance: batch sizes differ"));
        }
        let n = ea.nrows() as f64;
        Ok(ea
            .rows()
            .into_iter()
            .zip(eb.rows())
            .map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n)
    }
}

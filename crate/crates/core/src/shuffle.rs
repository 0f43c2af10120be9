//! The four non-parametric ops every residual shortcut is assembled from:
//! space_to_channel / channel_to_space (pure permutations) and
//! channel_average / channel_duplicate (channel-count adapters).
//!
//! Layout convention: the offset within a p×p block is the minor index, so
//! space_to_channel writes out[n, c*p*p + dy*p + dx, i, j] = x[n, c, i*p+dy, j*p+dx].
//! Averaging groups contiguous chunks along the channel axis, which makes
//! channel_average the exact left inverse of channel_duplicate.

use crate::error::{shape_err, Result};
use ndarray::{Array4, ArrayD, ArrayView4, Ix4};

fn as_rank4<'a>(x: &'a ArrayD<f64>, op: &str) -> Result<ArrayView4<'a, f64>> {
    x.view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| shape_err(format!("{op}: expected rank-4 [N,C,H,W] tensor, got rank {}", x.ndim())))
}

/// [N,C,H,W] -> [N, p²C, H/p, W/p]. Pure permutation of elements.
pub fn space_to_channel(x: &ArrayD<f64>, p: usize) -> Result<ArrayD<f64>> {
    let x = as_rank4(x, "space_to_channel")?;
    let (n, c, h, w) = x.dim();
    if p == 0 {
        return Err(shape_err("space_to_channel: p must be positive"));
    }
    if h % p != 0 {
        return Err(shape_err(format!("space_to_channel: H={h} not divisible by p={p} (axis H)")));
    }
    if w % p != 0 {
        return Err(shape_err(format!("space_to_channel: W={w} not divisible by p={p} (axis W)")));
    }
    let (ho, wo) = (h / p, w / p);
    let mut out = Array4::<f64>::zeros((n, c * p * p, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    let oc = ci * p * p + dy * p + dx;
                    for i in 0..ho {
                        for j in 0..wo {
                            out[[ni, oc, i, j]] = x[[ni, ci, i * p + dy, j * p + dx]];
                        }
                    }
                }
            }
        }
    }
    Ok(out.into_dyn())
}

/// [N,C,H,W] -> [N, C/p², pH, pW]. Exact inverse permutation of space_to_channel.
pub fn channel_to_space(x: &ArrayD<f64>, p: usize) -> Result<ArrayD<f64>> {
    let x = as_rank4(x, "channel_to_space")?;
    let (n, c, h, w) = x.dim();
    if p == 0 {
        return Err(shape_err("channel_to_space: p must be positive"));
    }
    if c % (p * p) != 0 {
        return Err(shape_err(format!("channel_to_space: C={c} not divisible by p²={} (axis C)", p * p)));
    }
    let co = c / (p * p);
    let mut out = Array4::<f64>::zeros((n, co, h * p, w * p));
    for ni in 0..n {
        for ci in 0..co {
            for dy in 0..p {
                for dx in 0..p {
                    let ic = ci * p * p + dy * p + dx;
                    for i in 0..h {
                        for j in 0..w {
                            out[[ni, ci, i * p + dy, j * p + dx]] = x[[ni, ic, i, j]];
                        }
                    }
                }
            }
        }
    }
    Ok(out.into_dyn())
}

/// [N, g·C', H, W] -> [N, C', H, W]: elementwise mean of g contiguous channel chunks.
///
/// Computed as chunk₀ + mean(chunkₖ − chunk₀) so averaging identical chunks
/// returns them unchanged for every g, not just powers of two.
pub fn channel_average(x: &ArrayD<f64>, g: usize) -> Result<ArrayD<f64>> {
    let xv = as_rank4(x, "channel_average")?;
    let (_, c, _, _) = xv.dim();
    if g == 0 {
        return Err(shape_err("channel_average: g must be positive"));
    }
    if c % g != 0 {
        return Err(shape_err(format!("channel_average: C={c} not divisible by g={g} (axis C)")));
    }
    if g == 1 {
        return Ok(x.clone());
    }
    let cp = c / g;
    let chunk = |k: usize| xv.slice(ndarray::s![.., k * cp..(k + 1) * cp, .., ..]);
    let c0 = chunk(0).to_owned();
    let mut dev = Array4::<f64>::zeros(c0.dim());
    for k in 1..g {
        dev += &(&chunk(k) - &c0);
    }
    dev.mapv_inplace(|v| v / g as f64);
    Ok((c0 + dev).into_dyn())
}

/// [N, C', H, W] -> [N, g·C', H, W]: g copies concatenated along the channel axis.
pub fn channel_duplicate(x: &ArrayD<f64>, g: usize) -> Result<ArrayD<f64>> {
    let xv = as_rank4(x, "channel_duplicate")?;
    let (n, c, h, w) = xv.dim();
    if g == 0 {
        return Err(shape_err("channel_duplicate: g must be positive"));
    }
    let mut out = Array4::<f64>::zeros((n, c * g, h, w));
    for k in 0..g {
        out.slice_mut(ndarray::s![.., k * c..(k + 1) * c, .., ..]).assign(&xv);
    }
    Ok(out.into_dyn())
}

/// Adjoint of channel_duplicate: sums the g chunks instead of averaging them.
/// Used by the backward passes; equals g · channel_average in exact arithmetic.
pub fn channel_chunk_sum(x: &ArrayD<f64>, g: usize) -> Result<ArrayD<f64>> {
    let xv = as_rank4(x, "channel_chunk_sum")?;
    let (_, c, _, _) = xv.dim();
    if g == 0 || c % g != 0 {
        return Err(shape_err(format!("channel_chunk_sum: C={c} not divisible by g={g} (axis C)")));
    }
    let cp = c / g;
    let mut out = xv.slice(ndarray::s![.., 0..cp, .., ..]).to_owned();
    for k in 1..g {
        out += &xv.slice(ndarray::s![.., k * cp..(k + 1) * cp, .., ..]);
    }
    Ok(out.into_dyn())
}

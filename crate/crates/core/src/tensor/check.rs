//! Central finite-difference gradient checking against the tape.

use super::Tensor;

pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `loss_fn` w.r.t. `params` against central
/// finite differences with the given step. Tensors larger than
/// `max_per_tensor` are probed on an evenly strided subset of elements.
///
/// Relative error uses max(|analytic|, |fd|, 1e-6) as the denominator so
/// near-zero gradients compare absolutely.
pub fn finite_diff_check(
    mut loss_fn: impl FnMut() -> Tensor,
    params: &[Tensor],
    step: f64,
    max_per_tensor: usize,
) -> FdReport {
    for p in params {
        p.zero_grad();
    }
    let loss = loss_fn();
    loss.backward();
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| match p.grad() {
            Some(g) => g.as_standard_layout().iter().cloned().collect(),
            None => vec![0.0; p.numel()],
        })
        .collect();

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0usize;
    for (p, ga) in params.iter().zip(&grads) {
        let n = p.numel();
        let stride = n.div_ceil(max_per_tensor).max(1);
        let mut idx = 0;
        while idx < n {
            let orig = p.data().as_slice().expect("params must be standard layout")[idx];
            set_flat(p, idx, orig + step);
            let lp = loss_fn().item();
            set_flat(p, idx, orig - step);
            let lm = loss_fn().item();
            set_flat(p, idx, orig);
            let fd = (lp - lm) / (2.0 * step);
            let a = ga[idx];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            max_rel_err = max_rel_err.max((a - fd).abs() / denom);
            checked += 1;
            idx += stride;
        }
    }
    FdReport { max_rel_err, checked }
}

fn set_flat(p: &Tensor, idx: usize, v: f64) {
    p.update_data(|d| {
        d.as_slice_mut().expect("params must be standard layout")[idx] = v;
    });
}

//! AdamW with decoupled weight decay. Optimizer state exists only for the
//! tensors handed in at construction; phase freezing is expressed by
//! constructing the optimizer over the trainable subset.

use super::Tensor;
use ndarray::ArrayD;

pub struct AdamW {
    params: Vec<Tensor>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, lr: f64, weight_decay: f64) -> AdamW {
        let m = params.iter().map(|p| ArrayD::zeros(p.data().raw_dim())).collect();
        let v = params.iter().map(|p| ArrayD::zeros(p.data().raw_dim())).collect();
        AdamW {
            params,
            m,
            v,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Moment buffers held: two (m and v) per tracked parameter tensor.
    pub fn state_tensor_count(&self) -> usize {
        self.m.len() + self.v.len()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let (b1, b2) = (self.beta1, self.beta2);
            ndarray::Zip::from(&mut self.m[i]).and(&g).for_each(|m, &gv| {
                *m = b1 * *m + (1.0 - b1) * gv;
            });
            ndarray::Zip::from(&mut self.v[i]).and(&g).for_each(|v, &gv| {
                *v = b2 * *v + (1.0 - b2) * gv * gv;
            });
            let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
            let (m, v) = (&self.m[i], &self.v[i]);
            p.update_data(|d| {
                ndarray::Zip::from(d).and(m).and(v).for_each(|dv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *dv -= lr * (mhat / (vhat.sqrt() + eps) + wd * *dv);
                });
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adamw_first_step_moves_against_gradient() {
        let p = Tensor::param(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut opt = AdamW::new(vec![p.clone()], 0.1, 0.0);
        let loss = p.square().sum_all();
        opt.zero_grads();
        loss.backward();
        opt.step();
        // grad = 2, first Adam step has magnitude ~lr regardless of scale
        let d = p.data();
        assert!(d[IxDyn(&[0])] < 1.0 && d[IxDyn(&[0])] > 0.85);
    }

    #[test]
    fn state_count_tracks_param_list() {
        let a = Tensor::param(ArrayD::zeros(IxDyn(&[3])));
        let b = Tensor::param(ArrayD::zeros(IxDyn(&[4, 2])));
        let opt = AdamW::new(vec![a, b], 1e-4, 0.0);
        assert_eq!(opt.param_count(), 2);
        assert_eq!(opt.state_tensor_count(), 4);
    }

    #[test]
    fn weight_decay_shrinks_params_without_grad_signal() {
        let p = Tensor::param(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let mut opt = AdamW::new(vec![p.clone()], 0.1, 0.5);
        // zero loss gradient: loss = 0 * p
        let loss = p.scale(0.0).sum_all();
        opt.zero_grads();
        loss.backward();
        opt.step();
        let v = p.data()[IxDyn(&[0])];
        assert!(v < 2.0, "decay should shrink the weight, got {v}");
        assert!((v - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}

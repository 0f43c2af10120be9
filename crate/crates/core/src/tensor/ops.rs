//! Differentiable op constructors. Each computes its value eagerly and hands
//! Tensor::from_op a closure producing per-parent grads. Shape violations are
//! bugs in calling code, so ops assert rather than return Result; model
//! construction validates configs before any forward pass runs.

use super::Tensor;
use crate::shuffle;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView3, Axis, Ix2, Ix3, Ix4, IxDyn, Zip};

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reshape_arr(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let owned = a.as_standard_layout().to_owned();
    owned
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch")
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = &*self.data() + &*other.data();
        let (na, nb) = (self.is_tracked(), other.is_tracked());
        Tensor::from_op(data, vec![self.clone(), other.clone()], Box::new(move |go| {
            vec![na.then(|| go.clone()), nb.then(|| go.clone())]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = &*self.data() - &*other.data();
        let (na, nb) = (self.is_tracked(), other.is_tracked());
        Tensor::from_op(data, vec![self.clone(), other.clone()], Box::new(move |go| {
            vec![na.then(|| go.clone()), nb.then(|| -go)]
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data = &*self.data() * &*other.data();
        let (na, nb) = (self.is_tracked(), other.is_tracked());
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, vec![self.clone(), other.clone()], Box::new(move |go| {
            vec![na.then(|| go * &*b.data()), nb.then(|| go * &*a.data())]
        }))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = &*self.data() * s;
        let na = self.is_tracked();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| vec![na.then(|| go * s)]))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = &*self.data() + s;
        let na = self.is_tracked();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| vec![na.then(|| go.clone())]))
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data().mapv(f64::abs);
        let na = self.is_tracked();
        let a = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| {
                let sign = a.data().mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                go * &sign
            })]
        }))
    }

    pub fn square(&self) -> Tensor {
        let data = self.data().mapv(|v| v * v);
        let na = self.is_tracked();
        let a = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| go * &(&*a.data() * 2.0))]
        }))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().mapv(|v| v.max(0.0));
        let na = self.is_tracked();
        let a = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| {
                let mask = a.data().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                go * &mask
            })]
        }))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().mapv(stable_sigmoid);
        let na = self.is_tracked();
        let a = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| {
                let d = a.data().mapv(|v| {
                    let s = stable_sigmoid(v);
                    s * (1.0 - s)
                });
                go * &d
            })]
        }))
    }

    pub fn silu(&self) -> Tensor {
        let data = self.data().mapv(|v| v * stable_sigmoid(v));
        let na = self.is_tracked();
        let a = self.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| {
                let d = a.data().mapv(|v| {
                    let s = stable_sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                });
                go * &d
            })]
        }))
    }

    pub fn sum_all(&self) -> Tensor {
        let data = ArrayD::from_elem(IxDyn(&[]), self.data().sum());
        let na = self.is_tracked();
        let shape = self.shape();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            let g = go[IxDyn(&[])];
            vec![na.then(|| ArrayD::from_elem(IxDyn(&shape), g))]
        }))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let data = ArrayD::from_elem(IxDyn(&[]), self.data().sum() / n);
        let na = self.is_tracked();
        let shape = self.shape();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            let g = go[IxDyn(&[])] / n;
            vec![na.then(|| ArrayD::from_elem(IxDyn(&shape), g))]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let data = reshape_arr(&self.data(), shape);
        let na = self.is_tracked();
        let old = self.shape();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| reshape_arr(go, &old))]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let data = {
            let d = self.data();
            d.view().permuted_axes(axes).as_standard_layout().to_owned().into_dyn()
        };
        let na = self.is_tracked();
        let mut inv = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| go.view().permuted_axes(inv.as_slice()).as_standard_layout().to_owned().into_dyn())]
        }))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let (shape, mut y) = {
            let x = self.data();
            let d = *x.shape().last().expect("softmax_last: rank >= 1");
            let rows = x.len() / d;
            let flat = reshape_arr(&x, &[rows, d]).into_dimensionality::<Ix2>().unwrap();
            (x.shape().to_vec(), flat)
        };
        for mut row in y.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let y_keep = y.clone();
        let data = reshape_arr(&y.into_dyn(), &shape);
        let na = self.is_tracked();
        let shape_b = shape.clone();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| {
                let rows = y_keep.nrows();
                let d = y_keep.ncols();
                let gof = reshape_arr(go, &[rows, d]).into_dimensionality::<Ix2>().unwrap();
                let mut out = Array2::<f64>::zeros((rows, d));
                for r in 0..rows {
                    let yr = y_keep.row(r);
                    let gr = gof.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        out[[r, c]] = yr[c] * (gr[c] - dot);
                    }
                }
                reshape_arr(&out.into_dyn(), &shape_b)
            })]
        }))
    }

    /// [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let c = {
            let ad = self.data();
            let bd = other.data();
            let a = ad.view().into_dimensionality::<Ix2>().expect("matmul: lhs rank 2");
            let b = bd.view().into_dimensionality::<Ix2>().expect("matmul: rhs rank 2");
            assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims differ");
            let mut c = Array2::<f64>::zeros((a.nrows(), b.ncols()));
            general_mat_mul(1.0, &a, &b, 0.0, &mut c);
            c
        };
        let (na, nb) = (self.is_tracked(), other.is_tracked());
        let (at, bt) = (self.clone(), other.clone());
        Tensor::from_op(c.into_dyn(), vec![self.clone(), other.clone()], Box::new(move |go| {
            let go2 = go.view().into_dimensionality::<Ix2>().unwrap();
            let ga = na.then(|| {
                let bd = bt.data();
                let b2 = bd.view().into_dimensionality::<Ix2>().unwrap();
                let mut g = Array2::<f64>::zeros((go2.nrows(), b2.nrows()));
                general_mat_mul(1.0, &go2, &b2.t(), 0.0, &mut g);
                g.into_dyn()
            });
            let gb = nb.then(|| {
                let ad = at.data();
                let a2 = ad.view().into_dimensionality::<Ix2>().unwrap();
                let mut g = Array2::<f64>::zeros((a2.ncols(), go2.ncols()));
                general_mat_mul(1.0, &a2.t(), &go2, 0.0, &mut g);
                g.into_dyn()
            });
            vec![ga, gb]
        }))
    }

    /// [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        let (c, bs, m, k, n) = {
            let ad = self.data();
            let bd = other.data();
            let a = ad.view().into_dimensionality::<Ix3>().expect("bmm: lhs rank 3");
            let b = bd.view().into_dimensionality::<Ix3>().expect("bmm: rhs rank 3");
            let (bs, m, k) = a.dim();
            let (bs2, k2, n) = b.dim();
            assert!(bs == bs2 && k == k2, "bmm: shape mismatch {:?} x {:?}", a.dim(), b.dim());
            let mut c = Array3::<f64>::zeros((bs, m, n));
            for i in 0..bs {
                let (ai, bi) = (a.index_axis(Axis(0), i), b.index_axis(Axis(0), i));
                let mut ci = c.index_axis_mut(Axis(0), i);
                general_mat_mul(1.0, &ai, &bi, 0.0, &mut ci);
            }
            (c, bs, m, k, n)
        };
        let (na, nb) = (self.is_tracked(), other.is_tracked());
        let (at, bt) = (self.clone(), other.clone());
        Tensor::from_op(c.into_dyn(), vec![self.clone(), other.clone()], Box::new(move |go| {
            let go3 = go.view().into_dimensionality::<Ix3>().unwrap();
            let ga = na.then(|| {
                let bd = bt.data();
                let b3 = bd.view().into_dimensionality::<Ix3>().unwrap();
                let mut g = Array3::<f64>::zeros((bs, m, k));
                for i in 0..bs {
                    let mut gi = g.index_axis_mut(Axis(0), i);
                    general_mat_mul(1.0, &go3.index_axis(Axis(0), i), &b3.index_axis(Axis(0), i).t(), 0.0, &mut gi);
                }
                g.into_dyn()
            });
            let gb = nb.then(|| {
                let ad = at.data();
                let a3 = ad.view().into_dimensionality::<Ix3>().unwrap();
                let mut g = Array3::<f64>::zeros((bs, k, n));
                for i in 0..bs {
                    let mut gi = g.index_axis_mut(Axis(0), i);
                    general_mat_mul(1.0, &a3.index_axis(Axis(0), i).t(), &go3.index_axis(Axis(0), i), 0.0, &mut gi);
                }
                g.into_dyn()
            });
            vec![ga, gb]
        }))
    }

    // Shuffle ops; backward passes are the linear adjoints.

    pub fn space_to_channel(&self, p: usize) -> Tensor {
        let data = shuffle::space_to_channel(&self.data(), p).expect("space_to_channel");
        let na = self.is_tracked();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| shuffle::channel_to_space(go, p).unwrap())]
        }))
    }

    pub fn channel_to_space(&self, p: usize) -> Tensor {
        let data = shuffle::channel_to_space(&self.data(), p).expect("channel_to_space");
        let na = self.is_tracked();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| shuffle::space_to_channel(go, p).unwrap())]
        }))
    }

    pub fn channel_average(&self, g: usize) -> Tensor {
        let data = shuffle::channel_average(&self.data(), g).expect("channel_average");
        let na = self.is_tracked();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| {
                let dup = shuffle::channel_duplicate(go, g).unwrap();
                dup / g as f64
            })]
        }))
    }

    pub fn channel_duplicate(&self, g: usize) -> Tensor {
        let data = shuffle::channel_duplicate(&self.data(), g).expect("channel_duplicate");
        let na = self.is_tracked();
        Tensor::from_op(data, vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| shuffle::channel_chunk_sum(go, g).unwrap())]
        }))
    }

    /// Adds a per-channel bias to an NCHW tensor.
    pub fn add_bias_c(&self, bias: &Tensor) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "add_bias_c: rank 4 expected");
        let c = shape[1];
        assert_eq!(bias.numel(), c, "add_bias_c: bias length != C");
        let mut out = self.data().clone().into_dimensionality::<Ix4>().unwrap();
        {
            let b = bias.data();
            for ci in 0..c {
                let bv = b[IxDyn(&[ci])];
                out.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v + bv);
            }
        }
        let (na, nb) = (self.is_tracked(), bias.is_tracked());
        Tensor::from_op(out.into_dyn(), vec![self.clone(), bias.clone()], Box::new(move |go| {
            let gb = nb.then(|| {
                let go4 = go.view().into_dimensionality::<Ix4>().unwrap();
                let mut g = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    g[ci] = go4.slice(s![.., ci, .., ..]).sum();
                }
                g.into_dyn()
            });
            vec![na.then(|| go.clone()), gb]
        }))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias_last(&self, bias: &Tensor) -> Tensor {
        let shape = self.shape();
        let d = *shape.last().expect("add_bias_last: rank >= 1");
        assert_eq!(bias.numel(), d, "add_bias_last: bias length mismatch");
        let rows = self.numel() / d;
        let mut out = reshape_arr(&self.data(), &[rows, d]).into_dimensionality::<Ix2>().unwrap();
        {
            let b = bias.data();
            for mut row in out.rows_mut() {
                for (i, v) in row.iter_mut().enumerate() {
                    *v += b[IxDyn(&[i])];
                }
            }
        }
        let (na, nb) = (self.is_tracked(), bias.is_tracked());
        Tensor::from_op(reshape_arr(&out.into_dyn(), &shape), vec![self.clone(), bias.clone()], Box::new(move |go| {
            let gb = nb.then(|| {
                let gof = reshape_arr(go, &[rows, d]).into_dimensionality::<Ix2>().unwrap();
                gof.sum_axis(Axis(0)).into_dyn()
            });
            vec![na.then(|| go.clone()), gb]
        }))
    }

    /// [N,T,D] + [T,D] broadcast over the batch axis.
    pub fn add_row_broadcast(&self, rows: &Tensor) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "add_row_broadcast: rank 3 expected");
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(rows.shape(), vec![t, d], "add_row_broadcast: table shape mismatch");
        let mut out = self.data().clone().into_dimensionality::<Ix3>().unwrap();
        {
            let r = rows.data();
            let r2 = r.view().into_dimensionality::<Ix2>().unwrap();
            for ni in 0..n {
                let mut sl = out.index_axis_mut(Axis(0), ni);
                sl += &r2;
            }
        }
        let (na, nb) = (self.is_tracked(), rows.is_tracked());
        Tensor::from_op(out.into_dyn(), vec![self.clone(), rows.clone()], Box::new(move |go| {
            let gb = nb.then(|| {
                let go3 = go.view().into_dimensionality::<Ix3>().unwrap();
                go3.sum_axis(Axis(0)).into_dyn()
            });
            vec![na.then(|| go.clone()), gb]
        }))
    }

    /// [N,T,D] + [N,D] broadcast over the token axis.
    pub fn add_col_broadcast(&self, vecs: &Tensor) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "add_col_broadcast: rank 3 expected");
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(vecs.shape(), vec![n, d], "add_col_broadcast: vector shape mismatch");
        let mut out = self.data().clone().into_dimensionality::<Ix3>().unwrap();
        {
            let v = vecs.data();
            let v2 = v.view().into_dimensionality::<Ix2>().unwrap();
            for ni in 0..n {
                for ti in 0..t {
                    for di in 0..d {
                        out[[ni, ti, di]] += v2[[ni, di]];
                    }
                }
            }
        }
        let (na, nb) = (self.is_tracked(), vecs.is_tracked());
        Tensor::from_op(out.into_dyn(), vec![self.clone(), vecs.clone()], Box::new(move |go| {
            let gb = nb.then(|| {
                let go3 = go.view().into_dimensionality::<Ix3>().unwrap();
                go3.sum_axis(Axis(1)).into_dyn()
            });
            vec![na.then(|| go.clone()), gb]
        }))
    }

    /// Row lookup: table [V,D] gathered by ids -> [len(ids), D].
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Tensor {
        let (out, v, d) = {
            let td = table.data();
            let t = td.view().into_dimensionality::<Ix2>().expect("embedding: table rank 2");
            let (v, d) = t.dim();
            for &id in ids {
                assert!(id < v, "embedding: id {id} out of range {v}");
            }
            let mut out = Array2::<f64>::zeros((ids.len(), d));
            for (i, &id) in ids.iter().enumerate() {
                out.row_mut(i).assign(&t.row(id));
            }
            (out, v, d)
        };
        let nb = table.is_tracked();
        let ids_b = ids.to_vec();
        Tensor::from_op(out.into_dyn(), vec![table.clone()], Box::new(move |go| {
            vec![nb.then(|| {
                let go2 = go.view().into_dimensionality::<Ix2>().unwrap();
                let mut g = Array2::<f64>::zeros((v, d));
                for (i, &id) in ids_b.iter().enumerate() {
                    let mut row = g.row_mut(id);
                    row += &go2.row(i);
                }
                g.into_dyn()
            })]
        }))
    }

    /// 2-D convolution with symmetric zero padding, via im2col + gemm.
    pub fn conv2d(&self, w: &Tensor, bias: Option<&Tensor>, pad: usize, stride: usize) -> Tensor {
        let xshape = self.shape();
        let wshape = w.shape();
        assert_eq!(xshape.len(), 4, "conv2d: input rank 4 expected");
        assert_eq!(wshape.len(), 4, "conv2d: weight rank 4 expected");
        assert!(stride >= 1, "conv2d: stride must be positive");
        let (n, c, h, wi) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let (cout, cin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(c, cin, "conv2d: channel mismatch");
        assert!(h + 2 * pad >= kh && wi + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wi + 2 * pad - kw) / stride + 1;
        let ckk = cin * kh * kw;

        let out = {
            let xd = self.data();
            let x = xd.view().into_dimensionality::<Ix4>().unwrap();
            let wd = w.data();
            let w4 = wd.view().into_dimensionality::<Ix4>().unwrap();
            let wmat = w4.to_shape((cout, ckk)).unwrap();
            let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
            let mut cols = Array2::<f64>::zeros((ckk, ho * wo));
            let mut scratch = Array2::<f64>::zeros((cout, ho * wo));
            for ni in 0..n {
                let xp = pad_chw(&x.index_axis(Axis(0), ni), pad);
                im2col(&xp.view(), kh, kw, ho, wo, stride, &mut cols);
                general_mat_mul(1.0, &wmat.view(), &cols.view(), 0.0, &mut scratch);
                out.index_axis_mut(Axis(0), ni)
                    .assign(&scratch.view().into_shape_with_order((cout, ho, wo)).unwrap());
            }
            out
        };

        let (nx, nw) = (self.is_tracked(), w.is_tracked());
        let (xc, wc) = (self.clone(), w.clone());
        let core = Tensor::from_op(out.into_dyn(), vec![self.clone(), w.clone()], Box::new(move |go| {
            let go4 = go.view().into_dimensionality::<Ix4>().unwrap();
            let mut gw = nw.then(|| Array2::<f64>::zeros((cout, ckk)));
            let mut gx = nx.then(|| Array4::<f64>::zeros((n, cin, h, wi)));
            let mut cols = Array2::<f64>::zeros((ckk, ho * wo));
            let wd = wc.data();
            let w4 = wd.view().into_dimensionality::<Ix4>().unwrap();
            let wmat = w4.to_shape((cout, ckk)).unwrap();
            let xd = xc.data();
            let x4 = xd.view().into_dimensionality::<Ix4>().unwrap();
            for ni in 0..n {
                let gon = go4.index_axis(Axis(0), ni);
                let gomat = gon.to_shape((cout, ho * wo)).unwrap();
                if let Some(gw) = gw.as_mut() {
                    let xp = pad_chw(&x4.index_axis(Axis(0), ni), pad);
                    im2col(&xp.view(), kh, kw, ho, wo, stride, &mut cols);
                    general_mat_mul(1.0, &gomat.view(), &cols.view().reversed_axes(), 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let mut dcols = Array2::<f64>::zeros((ckk, ho * wo));
                    general_mat_mul(1.0, &wmat.view().reversed_axes(), &gomat.view(), 0.0, &mut dcols);
                    col2im_accum(&dcols, kh, kw, ho, wo, pad, stride, &mut gx.index_axis_mut(Axis(0), ni));
                }
            }
            vec![
                gx.map(|g| g.into_dyn()),
                gw.map(|g| g.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn()),
            ]
        }));
        match bias {
            Some(b) => core.add_bias_c(b),
            None => core,
        }
    }

    /// Nearest-neighbor 2x spatial upsampling of an NCHW tensor.
    pub fn upsample_nearest_2x(&self) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "upsample_nearest_2x: rank 4 expected");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let out = {
            let xd = self.data();
            let x = xd.view().into_dimensionality::<Ix4>().unwrap();
            let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
            for ni in 0..n {
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let v = x[[ni, ci, i, j]];
                            out[[ni, ci, 2 * i, 2 * j]] = v;
                            out[[ni, ci, 2 * i, 2 * j + 1]] = v;
                            out[[ni, ci, 2 * i + 1, 2 * j]] = v;
                            out[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                        }
                    }
                }
            }
            out
        };
        let na = self.is_tracked();
        Tensor::from_op(out.into_dyn(), vec![self.clone()], Box::new(move |go| {
            vec![na.then(|| {
                let go4 = go.view().into_dimensionality::<Ix4>().unwrap();
                let mut g = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                g[[ni, ci, i, j]] = go4[[ni, ci, 2 * i, 2 * j]]
                                    + go4[[ni, ci, 2 * i, 2 * j + 1]]
                                    + go4[[ni, ci, 2 * i + 1, 2 * j]]
                                    + go4[[ni, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                g.into_dyn()
            })]
        }))
    }

    /// Group normalization over an NCHW tensor: statistics per (sample, group).
    pub fn group_norm(&self, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "group_norm: rank 4 expected");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(groups >= 1 && c % groups == 0, "group_norm: groups must divide C");
        assert_eq!(gamma.numel(), c, "group_norm: gamma length != C");
        assert_eq!(beta.numel(), c, "group_norm: beta length != C");
        let cg = c / groups;
        let m = (cg * h * w) as f64;

        let (xhat, sigmas) = {
            let xd = self.data();
            let x = xd.view().into_dimensionality::<Ix4>().unwrap();
            let mut xhat = Array4::<f64>::zeros((n, c, h, w));
            let mut sigmas = Array2::<f64>::zeros((n, groups));
            for ni in 0..n {
                for gi in 0..groups {
                    let v = x.slice(s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                    let mu = v.sum() / m;
                    let var = v.fold(0.0, |acc, &e| acc + (e - mu) * (e - mu)) / m;
                    let sigma = (var + eps).sqrt();
                    sigmas[[ni, gi]] = sigma;
                    let mut dst = xhat.slice_mut(s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                    dst.assign(&v);
                    dst.mapv_inplace(|e| (e - mu) / sigma);
                }
            }
            (xhat, sigmas)
        };
        let mut out = xhat.clone();
        {
            let gm = gamma.data();
            let bt = beta.data();
            for ci in 0..c {
                let (g, b) = (gm[IxDyn(&[ci])], bt[IxDyn(&[ci])]);
                out.slice_mut(s![.., ci, .., ..]).mapv_inplace(|e| e * g + b);
            }
        }

        let (nx, ng, nb) = (self.is_tracked(), gamma.is_tracked(), beta.is_tracked());
        let gc = gamma.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |go| {
                let go4 = go.view().into_dimensionality::<Ix4>().unwrap();
                let gbeta = nb.then(|| {
                    let mut g = Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        g[ci] = go4.slice(s![.., ci, .., ..]).sum();
                    }
                    g.into_dyn()
                });
                let ggamma = ng.then(|| {
                    let mut g = Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        let gs = go4.slice(s![.., ci, .., ..]);
                        let xs = xhat.slice(s![.., ci, .., ..]);
                        g[ci] = gs.iter().zip(xs.iter()).map(|(a, b)| a * b).sum();
                    }
                    g.into_dyn()
                });
                let gx = nx.then(|| {
                    let gmd = gc.data();
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for gi in 0..groups {
                            let sl = s![ni, gi * cg..(gi + 1) * cg, .., ..];
                            let xh = xhat.slice(sl);
                            let gos = go4.slice(sl);
                            let mut dxh = gos.to_owned();
                            for cc in 0..cg {
                                let g = gmd[IxDyn(&[gi * cg + cc])];
                                dxh.slice_mut(s![cc, .., ..]).mapv_inplace(|e| e * g);
                            }
                            let mean_dxh = dxh.sum() / m;
                            let mean_dxh_xh: f64 =
                                dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / m;
                            let sigma = sigmas[[ni, gi]];
                            let mut dst = dx.slice_mut(sl);
                            Zip::from(&mut dst).and(&dxh).and(&xh).for_each(|dv, &dh, &xv| {
                                *dv = (dh - mean_dxh - xv * mean_dxh_xh) / sigma;
                            });
                        }
                    }
                    dx.into_dyn()
                });
                vec![gx, ggamma, gbeta]
            }),
        )
    }

    /// Layer normalization along the last axis.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let shape = self.shape();
        let d = *shape.last().expect("layer_norm: rank >= 1");
        assert_eq!(gamma.numel(), d, "layer_norm: gamma length mismatch");
        assert_eq!(beta.numel(), d, "layer_norm: beta length mismatch");
        let rows = self.numel() / d;
        let md = d as f64;

        let x = reshape_arr(&self.data(), &[rows, d]).into_dimensionality::<Ix2>().unwrap();
        let mut xhat = Array2::<f64>::zeros((rows, d));
        let mut sigmas = vec![0.0f64; rows];
        for r in 0..rows {
            let row = x.row(r);
            let mu = row.sum() / md;
            let var = row.fold(0.0, |acc, &e| acc + (e - mu) * (e - mu)) / md;
            let sigma = (var + eps).sqrt();
            sigmas[r] = sigma;
            for (o, &i) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (i - mu) / sigma;
            }
        }
        let mut out = xhat.clone();
        {
            let gm = gamma.data();
            let bt = beta.data();
            for mut row in out.rows_mut() {
                for (i, v) in row.iter_mut().enumerate() {
                    *v = *v * gm[IxDyn(&[i])] + bt[IxDyn(&[i])];
                }
            }
        }

        let (nx, ng, nb) = (self.is_tracked(), gamma.is_tracked(), beta.is_tracked());
        let gc = gamma.clone();
        let shape_b = shape.clone();
        Tensor::from_op(
            reshape_arr(&out.into_dyn(), &shape),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |go| {
                let gof = reshape_arr(go, &[rows, d]).into_dimensionality::<Ix2>().unwrap();
                let gbeta = nb.then(|| gof.sum_axis(Axis(0)).into_dyn());
                let ggamma = ng.then(|| {
                    let mut g = Array1::<f64>::zeros(d);
                    for r in 0..rows {
                        for ci in 0..d {
                            g[ci] += gof[[r, ci]] * xhat[[r, ci]];
                        }
                    }
                    g.into_dyn()
                });
                let gx = nx.then(|| {
                    let gmd = gc.data();
                    let mut dx = Array2::<f64>::zeros((rows, d));
                    for r in 0..rows {
                        let mut dxh = vec![0.0f64; d];
                        for ci in 0..d {
                            dxh[ci] = gof[[r, ci]] * gmd[IxDyn(&[ci])];
                        }
                        let mean_dxh: f64 = dxh.iter().sum::<f64>() / md;
                        let mean_dxh_xh: f64 =
                            dxh.iter().enumerate().map(|(ci, v)| v * xhat[[r, ci]]).sum::<f64>() / md;
                        for ci in 0..d {
                            dx[[r, ci]] = (dxh[ci] - mean_dxh - xhat[[r, ci]] * mean_dxh_xh) / sigmas[r];
                        }
                    }
                    reshape_arr(&dx.into_dyn(), &shape_b)
                });
                vec![gx, ggamma, gbeta]
            }),
        )
    }
}

fn pad_chw(x: &ArrayView3<f64>, pad: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    if pad == 0 {
        return x.to_owned();
    }
    let mut out = Array3::<f64>::zeros((c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(x);
    out
}

/// Unrolls sliding kh×kw windows of a padded [C,Hp,Wp] input into
/// cols[(c·kh+ky)·kw+kx, i·wo+j].
fn im2col(xp: &ArrayView3<f64>, kh: usize, kw: usize, ho: usize, wo: usize, stride: usize, cols: &mut Array2<f64>) {
    let (c, _, _) = xp.dim();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                for i in 0..ho {
                    if stride == 1 {
                        let src = xp.slice(s![ci, ky + i, kx..kx + wo]);
                        cols.slice_mut(s![r, i * wo..(i + 1) * wo]).assign(&src);
                    } else {
                        let src = xp.slice(s![ci, ky + i * stride, kx..kx + (wo - 1) * stride + 1; stride]);
                        cols.slice_mut(s![r, i * wo..(i + 1) * wo]).assign(&src);
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatters column grads back onto the unpadded input.
fn col2im_accum(
    dcols: &Array2<f64>,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad: usize,
    stride: usize,
    dx: &mut ndarray::ArrayViewMut3<f64>,
) {
    let (c, h, w) = dx.dim();
    let mut dxp = Array3::<f64>::zeros((c, h + 2 * pad, w + 2 * pad));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                for i in 0..ho {
                    if stride == 1 {
                        let mut dst = dxp.slice_mut(s![ci, ky + i, kx..kx + wo]);
                        dst += &dcols.slice(s![r, i * wo..(i + 1) * wo]);
                    } else {
                        let mut dst =
                            dxp.slice_mut(s![ci, ky + i * stride, kx..kx + (wo - 1) * stride + 1; stride]);
                        dst += &dcols.slice(s![r, i * wo..(i + 1) * wo]);
                    }
                }
            }
        }
    }
    *dx += &dxp.slice(s![.., pad..pad + h, pad..pad + w]);
}


#[cfg(test)]
mod stride_tests {
    use super::super::{finite_diff_check, normal_fill, Tensor};
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strided_conv_halves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = Tensor::param(normal_fill(&mut rng, &[1, 3, 8, 8], 1.0));
        let w = Tensor::param(normal_fill(&mut rng, &[5, 3, 3, 3], 0.3));
        let y = x.conv2d(&w, None, 1, 2);
        assert_eq!(y.shape(), vec![1, 5, 4, 4]);
    }

    #[test]
    fn strided_conv_matches_stride1_subsampling() {
        // stride-2 output must equal every other pixel of the stride-1 output
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = Tensor::constant(normal_fill(&mut rng, &[1, 2, 6, 6], 1.0));
        let w = Tensor::constant(normal_fill(&mut rng, &[3, 2, 3, 3], 1.0));
        let full = x.conv2d(&w, None, 1, 1);
        let half = x.conv2d(&w, None, 1, 2);
        let (fd, hd) = (full.data(), half.data());
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let a = fd[IxDyn(&[0, c, 2 * i, 2 * j])];
                    let b = hd[IxDyn(&[0, c, i, j])];
                    assert!((a - b).abs() < 1e-14, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn fd_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = Tensor::param(normal_fill(&mut rng, &[1, 2, 6, 6], 1.0));
        let w = Tensor::param(normal_fill(&mut rng, &[4, 2, 3, 3], 0.5));
        let b = Tensor::param(normal_fill(&mut rng, &[4], 0.5));
        let params = [x.clone(), w.clone(), b.clone()];
        let rep = finite_diff_check(|| x.conv2d(&w, Some(&b), 1, 2).square().mean_all(), &params, 1e-5, 64);
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn fd_upsample_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = Tensor::param(normal_fill(&mut rng, &[1, 2, 3, 3], 1.0));
        let y = x.upsample_nearest_2x();
        assert_eq!(y.shape(), vec![1, 2, 6, 6]);
        assert_eq!(y.data()[IxDyn(&[0, 0, 1, 1])], x.data()[IxDyn(&[0, 0, 0, 0])]);
        let params = [x.clone()];
        let rep = finite_diff_check(|| x.upsample_nearest_2x().square().mean_all(), &params, 1e-5, 64);
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }
}

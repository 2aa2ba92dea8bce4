//! Layer implementations. Every layer exposes `forward(ps, x, tape)` and
//! `backward(ps, tape, grad)`; backward pops saved activations in exactly
//! the reverse order of forward's pushes and accumulates parameter
//! gradients into the store.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rayon::prelude::*;

use super::ops::{col2im_accumulate, gelu_with_grad, gemm, im2col, silu_with_grad};
use super::{ParamId, ParamStore, Scalar, Tape};

/// 2-D convolution, zero padding, square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<F: Scalar>(
        ps: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = ps.register(
            format!("{name}.weight"),
            super::kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let b = ps.register(format!("{name}.bias"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch])));
        Conv2d { w, b, in_ch, out_ch, kernel, stride, pad: kernel / 2 }
    }

    /// Zero both weight and bias (used for output heads).
    pub fn zero_init<F: Scalar>(&self, ps: &mut ParamStore<F>) {
        ps.value_mut(self.w).fill(F::zero());
        ps.value_mut(self.b).fill(F::zero());
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        tape: Option<&mut Tape<F>>,
    ) -> Array4<F> {
        let (bsz, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv in_ch");
        let (ho, wo) = self.out_hw(h, w);
        let wmat = ps
            .value(self.w)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .unwrap()
            .to_owned();
        let bias = ps.value(self.b);
        let items: Vec<Array2<F>> = (0..bsz)
            .into_par_iter()
            .map(|bi| {
                let xi = x.index_axis(Axis(0), bi);
                let col = im2col(&xi, self.kernel, self.kernel, self.pad, self.stride);
                let mut y = Array2::zeros((self.out_ch, ho * wo));
                gemm(&wmat.view(), &col.view(), &mut y.view_mut(), F::zero());
                y
            })
            .collect();
        let mut out = Array4::zeros((bsz, self.out_ch, ho, wo));
        for (bi, y) in items.into_iter().enumerate() {
            let y3 = y.into_shape_with_order((self.out_ch, ho, wo)).unwrap();
            out.index_axis_mut(Axis(0), bi).assign(&y3);
        }
        for co in 0..self.out_ch {
            let bv = bias[[co]];
            out.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + bv);
        }
        if let Some(t) = tape {
            t.push(x.clone().into_dyn());
        }
        out
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        grad_out: &Array4<F>,
    ) -> Array4<F> {
        let x = tape.pop().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (bsz, _, h, w) = x.dim();
        let (_, co, ho, wo) = grad_out.dim();
        assert_eq!(co, self.out_ch);
        let kk = self.in_ch * self.kernel * self.kernel;
        let wmat = ps
            .value(self.w)
            .view()
            .into_shape_with_order((self.out_ch, kk))
            .unwrap()
            .to_owned();

        // Per-item weight-gradient partials and input gradients, reduced in
        // deterministic batch order afterwards.
        let parts: Vec<(Array2<F>, Array3<F>)> = (0..bsz)
            .into_par_iter()
            .map(|bi| {
                let xi = x.index_axis(Axis(0), bi);
                let col = im2col(&xi, self.kernel, self.kernel, self.pad, self.stride);
                let gy = grad_out
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((self.out_ch, ho * wo))
                    .unwrap()
                    .to_owned();
                // dW_i = gy . col^T
                let mut dw = Array2::zeros((self.out_ch, kk));
                gemm(&gy.view(), &col.t().as_standard_layout().view(), &mut dw.view_mut(), F::zero());
                // dcol = W^T . gy ; scatter back to the input gradient
                let mut dcol = Array2::zeros((kk, ho * wo));
                gemm(&wmat.t().as_standard_layout().view(), &gy.view(), &mut dcol.view_mut(), F::zero());
                let mut dx = Array3::zeros((self.in_ch, h, w));
                col2im_accumulate(&dcol.view(), &mut dx.view_mut(), self.kernel, self.kernel, self.pad, self.stride);
                (dw, dx)
            })
            .collect();

        let mut grad_x = Array4::zeros(x.dim());
        {
            let mut dw_total = Array2::<F>::zeros((self.out_ch, kk));
            for (bi, (dw, dx)) in parts.into_iter().enumerate() {
                dw_total = dw_total + &dw;
                grad_x.index_axis_mut(Axis(0), bi).assign(&dx);
            }
            let gw = ps.grad_mut(self.w);
            let dw4 = dw_total
                .into_shape_with_order((self.out_ch, self.in_ch, self.kernel, self.kernel))
                .unwrap();
            gw.zip_mut_with(&dw4.into_dyn(), |g, d| *g = *g + *d);
        }
        {
            let gb = ps.grad_mut(self.b);
            for c in 0..self.out_ch {
                let sum = grad_out.slice(s![.., c, .., ..]).sum();
                gb[[c]] = gb[[c]] + sum;
            }
        }
        grad_x
    }
}

/// Depthwise convolution (one kernel per channel), stride 1, same padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub ch: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl DepthwiseConv2d {
    pub fn new<F: Scalar>(
        ps: &mut ParamStore<F>,
        name: &str,
        ch: usize,
        kernel: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let fan_in = kernel * kernel;
        let w = ps.register(
            format!("{name}.weight"),
            super::kaiming_uniform(&[ch, kernel, kernel], fan_in, rng),
        );
        let b = ps.register(format!("{name}.bias"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[ch])));
        DepthwiseConv2d { w, b, ch, kernel, pad: kernel / 2 }
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        tape: Option<&mut Tape<F>>,
    ) -> Array4<F> {
        let (bsz, c, h, w) = x.dim();
        assert_eq!(c, self.ch, "depthwise ch");
        let wt = ps.value(self.w);
        let bias = ps.value(self.b);
        let k = self.kernel;
        let p = self.pad as isize;
        let mut out = Array4::zeros((bsz, c, h, w));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(bi, mut ob)| {
                for ci in 0..c {
                    let xc = x.slice(s![bi, ci, .., ..]);
                    for i in 0..h {
                        for j in 0..w {
                            let mut acc = bias[[ci]];
                            for ki in 0..k {
                                let ii = i as isize + ki as isize - p;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let jj = j as isize + kj as isize - p;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + wt[[ci, ki, kj]] * xc[[ii as usize, jj as usize]];
                                }
                            }
                            ob[[ci, i, j]] = acc;
                        }
                    }
                }
            });
        if let Some(t) = tape {
            t.push(x.clone().into_dyn());
        }
        out
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        grad_out: &Array4<F>,
    ) -> Array4<F> {
        let x = tape.pop().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (bsz, c, h, w) = x.dim();
        let k = self.kernel;
        let p = self.pad as isize;
        let wt = ps.value(self.w).clone();

        let parts: Vec<(Array3<F>, Array1<F>, Array3<F>)> = (0..bsz)
            .into_par_iter()
            .map(|bi| {
                let mut dw = Array3::zeros((c, k, k));
                let mut db = Array1::zeros(c);
                let mut dx = Array3::zeros((c, h, w));
                for ci in 0..c {
                    let xc = x.slice(s![bi, ci, .., ..]);
                    let gc = grad_out.slice(s![bi, ci, .., ..]);
                    db[ci] = gc.sum();
                    for i in 0..h {
                        for j in 0..w {
                            let g = gc[[i, j]];
                            for ki in 0..k {
                                let ii = i as isize + ki as isize - p;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let jj = j as isize + kj as isize - p;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    let (iu, ju) = (ii as usize, jj as usize);
                                    dw[[ci, ki, kj]] = dw[[ci, ki, kj]] + g * xc[[iu, ju]];
                                    dx[[ci, iu, ju]] =
                                        dx[[ci, iu, ju]] + g * wt[[ci, ki, kj]];
                                }
                            }
                        }
                    }
                }
                (dw, db, dx)
            })
            .collect();

        let mut grad_x = Array4::zeros(x.dim());
        let mut dw_total = Array3::<F>::zeros((c, k, k));
        let mut db_total = Array1::<F>::zeros(c);
        for (bi, (dw, db, dx)) in parts.into_iter().enumerate() {
            dw_total = dw_total + &dw;
            db_total = db_total + &db;
            grad_x.index_axis_mut(Axis(0), bi).assign(&dx);
        }
        ps.grad_mut(self.w).zip_mut_with(&dw_total.into_dyn(), |g, d| *g = *g + *d);
        ps.grad_mut(self.b).zip_mut_with(&db_total.into_dyn(), |g, d| *g = *g + *d);
        grad_x
    }
}

/// Layer normalization across the channel axis at each (batch, y, x).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub ch: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Scalar>(ps: &mut ParamStore<F>, name: &str, ch: usize) -> Self {
        let gamma = ps.register(
            format!("{name}.gamma"),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[ch]), F::one()),
        );
        let beta = ps.register(format!("{name}.beta"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[ch])));
        LayerNorm { gamma, beta, ch, eps: 1e-5 }
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        tape: Option<&mut Tape<F>>,
    ) -> Array4<F> {
        let (bsz, c, h, w) = x.dim();
        assert_eq!(c, self.ch, "layernorm ch");
        let gamma = ps.value(self.gamma);
        let beta = ps.value(self.beta);
        let eps = F::from_f64(self.eps);
        let inv_c = F::one() / F::from_f64(c as f64);
        let mut xhat = Array4::zeros(x.dim());
        let mut inv_std = Array3::zeros((bsz, h, w));
        let mut out = Array4::zeros(x.dim());
        for bi in 0..bsz {
            for i in 0..h {
                for j in 0..w {
                    let mut mean = F::zero();
                    for ci in 0..c {
                        mean = mean + x[[bi, ci, i, j]];
                    }
                    mean = mean * inv_c;
                    let mut var = F::zero();
                    for ci in 0..c {
                        let d = x[[bi, ci, i, j]] - mean;
                        var = var + d * d;
                    }
                    var = var * inv_c;
                    let istd = F::one() / (var + eps).sqrt();
                    inv_std[[bi, i, j]] = istd;
                    for ci in 0..c {
                        let xh = (x[[bi, ci, i, j]] - mean) * istd;
                        xhat[[bi, ci, i, j]] = xh;
                        out[[bi, ci, i, j]] = gamma[[ci]] * xh + beta[[ci]];
                    }
                }
            }
        }
        if let Some(t) = tape {
            t.push(xhat.into_dyn());
            t.push(inv_std.into_dyn());
        }
        out
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        grad_out: &Array4<F>,
    ) -> Array4<F> {
        let inv_std = tape.pop().into_dimensionality::<ndarray::Ix3>().unwrap();
        let xhat = tape.pop().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (bsz, c, h, w) = xhat.dim();
        let gamma = ps.value(self.gamma).clone();
        let inv_c = F::one() / F::from_f64(c as f64);

        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        let mut grad_x = Array4::zeros(xhat.dim());
        for bi in 0..bsz {
            for i in 0..h {
                for j in 0..w {
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for ci in 0..c {
                        let dy = grad_out[[bi, ci, i, j]];
                        let xh = xhat[[bi, ci, i, j]];
                        dgamma[ci] = dgamma[ci] + dy * xh;
                        dbeta[ci] = dbeta[ci] + dy;
                        let dxh = dy * gamma[[ci]];
                        sum_dxhat = sum_dxhat + dxh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh;
                    }
                    let istd = inv_std[[bi, i, j]];
                    for ci in 0..c {
                        let dy = grad_out[[bi, ci, i, j]];
                        let dxh = dy * gamma[[ci]];
                        let xh = xhat[[bi, ci, i, j]];
                        grad_x[[bi, ci, i, j]] =
                            istd * (dxh - inv_c * (sum_dxhat + xh * sum_dxhat_xhat));
                    }
                }
            }
        }
        ps.grad_mut(self.gamma).zip_mut_with(&dgamma.into_dyn(), |g, d| *g = *g + *d);
        ps.grad_mut(self.beta).zip_mut_with(&dbeta.into_dyn(), |g, d| *g = *g + *d);
        grad_x
    }
}

/// Dense layer on (B, in) matrices.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        ps: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let w = ps.register(
            format!("{name}.weight"),
            super::kaiming_uniform(&[out_dim, in_dim], in_dim, rng),
        );
        let b = ps.register(format!("{name}.bias"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array2<F>,
        tape: Option<&mut Tape<F>>,
    ) -> Array2<F> {
        let wmat = ps
            .value(self.w)
            .view()
            .into_shape_with_order((self.out_dim, self.in_dim))
            .unwrap()
            .to_owned();
        let bias = ps.value(self.b);
        let mut y = Array2::zeros((x.dim().0, self.out_dim));
        gemm(&x.view(), &wmat.t().as_standard_layout().view(), &mut y.view_mut(), F::zero());
        for o in 0..self.out_dim {
            let bv = bias[[o]];
            y.column_mut(o).mapv_inplace(|v| v + bv);
        }
        if let Some(t) = tape {
            t.push(x.clone().into_dyn());
        }
        y
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        grad_out: &Array2<F>,
    ) -> Array2<F> {
        let x = tape.pop().into_dimensionality::<ndarray::Ix2>().unwrap();
        // dW = gy^T . x ; dx = gy . W
        let mut dw = Array2::zeros((self.out_dim, self.in_dim));
        gemm(
            &grad_out.t().as_standard_layout().view(),
            &x.view(),
            &mut dw.view_mut(),
            F::zero(),
        );
        ps.grad_mut(self.w).zip_mut_with(&dw.into_dyn(), |g, d| *g = *g + *d);
        let db = grad_out.sum_axis(Axis(0));
        ps.grad_mut(self.b).zip_mut_with(&db.into_dyn(), |g, d| *g = *g + *d);
        let wmat = ps
            .value(self.w)
            .view()
            .into_shape_with_order((self.out_dim, self.in_dim))
            .unwrap()
            .to_owned();
        let mut dx = Array2::zeros(x.dim());
        gemm(&grad_out.view(), &wmat.view(), &mut dx.view_mut(), F::zero());
        dx
    }
}

/// Elementwise GELU over a (B, C, H, W) tensor.
#[derive(Debug, Clone, Copy)]
pub struct Gelu;

impl Gelu {
    pub fn forward<F: Scalar>(&self, x: &Array4<F>, tape: Option<&mut Tape<F>>) -> Array4<F> {
        let y = x.mapv(|v| gelu_with_grad(v).0);
        if let Some(t) = tape {
            t.push(x.clone().into_dyn());
        }
        y
    }

    pub fn backward<F: Scalar>(&self, tape: &mut Tape<F>, grad_out: &Array4<F>) -> Array4<F> {
        let x = tape.pop().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut g = grad_out.clone();
        g.zip_mut_with(&x, |gv, xv| *gv = *gv * gelu_with_grad(*xv).1);
        g
    }
}

/// Single-head spatial self-attention with pre-norm and residual add.
#[derive(Debug, Clone)]
pub struct Attention {
    pub norm: LayerNorm,
    pub qkv: ParamId,
    pub proj: ParamId,
    pub ch: usize,
}

impl Attention {
    pub fn new<F: Scalar>(
        ps: &mut ParamStore<F>,
        name: &str,
        ch: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), ch);
        let qkv = ps.register(
            format!("{name}.qkv.weight"),
            super::kaiming_uniform(&[3 * ch, ch], ch, rng),
        );
        // Zero-init projection so the block starts as the identity.
        let proj = ps.register(
            format!("{name}.proj.weight"),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[ch, ch])),
        );
        Attention { norm, qkv, proj, ch }
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        mut tape: Option<&mut Tape<F>>,
    ) -> Array4<F> {
        let (bsz, c, h, w) = x.dim();
        let n = h * w;
        let xn = self.norm.forward(ps, x, tape.as_deref_mut());
        let wqkv = ps
            .value(self.qkv)
            .view()
            .into_shape_with_order((3 * c, c))
            .unwrap()
            .to_owned();
        let wproj = ps
            .value(self.proj)
            .view()
            .into_shape_with_order((c, c))
            .unwrap()
            .to_owned();
        let scale = F::from_f64(1.0 / (c as f64).sqrt());

        let mut out = x.clone();
        let mut saved: Vec<(Array2<F>, Array2<F>)> = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            let xi = xn
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c, n))
                .unwrap()
                .to_owned();
            let mut qkv = Array2::zeros((3 * c, n));
            gemm(&wqkv.view(), &xi.view(), &mut qkv.view_mut(), F::zero());
            let q = qkv.slice(s![..c, ..]).to_owned();
            let k = qkv.slice(s![c..2 * c, ..]).to_owned();
            let v = qkv.slice(s![2 * c.., ..]).to_owned();
            // scores[n_q, n_k] = (q^T k) * scale, softmax over n_k.
            let mut scores = Array2::zeros((n, n));
            gemm(&q.t().as_standard_layout().view(), &k.view(), &mut scores.view_mut(), F::zero());
            scores.mapv_inplace(|s| s * scale);
            for mut row in scores.rows_mut() {
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                let inv = F::one() / sum;
                for v in row.iter_mut() {
                    *v = *v * inv;
                }
            }
            // y = v . attn^T  (c, n)
            let mut y = Array2::zeros((c, n));
            gemm(&v.view(), &scores.t().as_standard_layout().view(), &mut y.view_mut(), F::zero());
            let mut proj = Array2::zeros((c, n));
            gemm(&wproj.view(), &y.view(), &mut proj.view_mut(), F::zero());
            let proj4 = proj.into_shape_with_order((c, h, w)).unwrap();
            let mut ob = out.index_axis_mut(Axis(0), bi);
            ob.zip_mut_with(&proj4, |o, p| *o = *o + *p);
            saved.push((qkv, scores));
        }
        if let Some(t) = tape.as_deref_mut() {
            for (qkv, scores) in saved {
                t.push(qkv.into_dyn());
                t.push(scores.into_dyn());
            }
            t.push(xn.into_dyn());
        }
        out
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        grad_out: &Array4<F>,
    ) -> Array4<F> {
        let (bsz, c, h, w) = grad_out.dim();
        let n = h * w;
        let xn = tape.pop().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut per_item: Vec<(Array2<F>, Array2<F>)> = Vec::with_capacity(bsz);
        for _ in 0..bsz {
            let scores = tape.pop().into_dimensionality::<ndarray::Ix2>().unwrap();
            let qkv = tape.pop().into_dimensionality::<ndarray::Ix2>().unwrap();
            per_item.push((qkv, scores));
        }
        per_item.reverse(); // popped in reverse batch order

        let wqkv = ps
            .value(self.qkv)
            .view()
            .into_shape_with_order((3 * c, c))
            .unwrap()
            .to_owned();
        let wproj = ps
            .value(self.proj)
            .view()
            .into_shape_with_order((c, c))
            .unwrap()
            .to_owned();
        let scale = F::from_f64(1.0 / (c as f64).sqrt());

        let mut dwqkv = Array2::<F>::zeros((3 * c, c));
        let mut dwproj = Array2::<F>::zeros((c, c));
        let mut grad_xn = Array4::zeros(xn.dim());
        for bi in 0..bsz {
            let (qkv, attn) = &per_item[bi];
            let q = qkv.slice(s![..c, ..]).to_owned();
            let k = qkv.slice(s![c..2 * c, ..]).to_owned();
            let v = qkv.slice(s![2 * c.., ..]).to_owned();
            let go = grad_out
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c, n))
                .unwrap()
                .to_owned();
            // y = v attn^T ; proj_out = wproj y
            // dwproj += go . y^T ; dy = wproj^T go
            let mut y = Array2::zeros((c, n));
            gemm(&v.view(), &attn.t().as_standard_layout().view(), &mut y.view_mut(), F::zero());
            let mut dp = Array2::zeros((c, c));
            gemm(&go.view(), &y.t().as_standard_layout().view(), &mut dp.view_mut(), F::zero());
            dwproj = dwproj + &dp;
            let mut dy = Array2::zeros((c, n));
            gemm(&wproj.t().as_standard_layout().view(), &go.view(), &mut dy.view_mut(), F::zero());
            // dv = dy . attn ; dattn = dy^T v -> (n_q, n_k) via v^T dy
            let mut dv = Array2::zeros((c, n));
            gemm(&dy.view(), &attn.view(), &mut dv.view_mut(), F::zero());
            let mut dattn = Array2::zeros((n, n));
            gemm(&dy.t().as_standard_layout().view(), &v.view(), &mut dattn.view_mut(), F::zero());
            // softmax backward per row: ds = a * (da - sum(da * a))
            let mut dscore = Array2::zeros((n, n));
            for r in 0..n {
                let arow = attn.row(r);
                let darow = dattn.row(r);
                let dot = arow
                    .iter()
                    .zip(darow.iter())
                    .fold(F::zero(), |acc, (&a, &d)| acc + a * d);
                for cidx in 0..n {
                    dscore[[r, cidx]] = arow[cidx] * (darow[cidx] - dot) * scale;
                }
            }
            // scores = q^T k: dq = k . dscore^T, dk = q . dscore
            let mut dq = Array2::zeros((c, n));
            gemm(&k.view(), &dscore.t().as_standard_layout().view(), &mut dq.view_mut(), F::zero());
            let mut dk = Array2::zeros((c, n));
            gemm(&q.view(), &dscore.view(), &mut dk.view_mut(), F::zero());
            // qkv = wqkv . xn : stack the three gradients
            let mut dqkv = Array2::zeros((3 * c, n));
            dqkv.slice_mut(s![..c, ..]).assign(&dq);
            dqkv.slice_mut(s![c..2 * c, ..]).assign(&dk);
            dqkv.slice_mut(s![2 * c.., ..]).assign(&dv);
            let xi = xn
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c, n))
                .unwrap()
                .to_owned();
            let mut dwq = Array2::zeros((3 * c, c));
            gemm(&dqkv.view(), &xi.t().as_standard_layout().view(), &mut dwq.view_mut(), F::zero());
            dwqkv = dwqkv + &dwq;
            let mut dxn = Array2::zeros((c, n));
            gemm(&wqkv.t().as_standard_layout().view(), &dqkv.view(), &mut dxn.view_mut(), F::zero());
            grad_xn
                .index_axis_mut(Axis(0), bi)
                .assign(&dxn.into_shape_with_order((c, h, w)).unwrap());
        }
        ps.grad_mut(self.qkv).zip_mut_with(&dwqkv.into_dyn(), |g, d| *g = *g + *d);
        ps.grad_mut(self.proj).zip_mut_with(&dwproj.into_dyn(), |g, d| *g = *g + *d);
        let grad_norm_in = self.norm.backward(ps, tape, &grad_xn);
        // Residual add.
        grad_norm_in + grad_out
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ci, i, j]];
                    out[[bi, ci, 2 * i, 2 * j]] = v;
                    out[[bi, ci, 2 * i + 1, 2 * j]] = v;
                    out[[bi, ci, 2 * i, 2 * j + 1]] = v;
                    out[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    out
}

/// Backward of [`upsample2`]: 2x2 sum pooling of the gradient.
pub fn upsample2_backward<F: Scalar>(grad: &Array4<F>) -> Array4<F> {
    let (b, c, h2, w2) = grad.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[bi, ci, i, j]] = grad[[bi, ci, 2 * i, 2 * j]]
                        + grad[[bi, ci, 2 * i + 1, 2 * j]]
                        + grad[[bi, ci, 2 * i, 2 * j + 1]]
                        + grad[[bi, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    out
}

/// Sinusoidal embedding of diffusion step indices.
pub fn sinusoidal_embedding<F: Scalar>(steps: &[usize], dim: usize) -> Array2<F> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array2::zeros((steps.len(), dim));
    for (bi, &t) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[[bi, 2 * i]] = F::from_f64(arg.sin());
            out[[bi, 2 * i + 1]] = F::from_f64(arg.cos());
        }
    }
    out
}

/// Two-layer MLP over the sinusoidal embedding with SiLU in between.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

impl TimeMlp {
    pub fn new<F: Scalar>(
        ps: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        TimeMlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, dim, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), dim, dim, rng),
            dim,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        steps: &[usize],
        mut tape: Option<&mut Tape<F>>,
    ) -> Array2<F> {
        let emb = sinusoidal_embedding::<F>(steps, self.dim);
        let h = self.fc1.forward(ps, &emb, tape.as_deref_mut());
        let act = h.mapv(|v| silu_with_grad(v).0);
        if let Some(t) = tape.as_deref_mut() {
            t.push(h.into_dyn());
        }
        self.fc2.forward(ps, &act, tape)
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        grad_out: &Array2<F>,
    ) -> Array2<F> {
        let dact = self.fc2.backward(ps, tape, grad_out);
        let h = tape.pop().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut dh = dact;
        dh.zip_mut_with(&h, |g, x| *g = *g * silu_with_grad(*x).1);
        self.fc1.backward(ps, tape, &dh)
    }
}

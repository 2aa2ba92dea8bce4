//! Denoiser network: a 2-D U-Net over merged time-channel inputs built from
//! ConvNeXt-style blocks with per-block diffusion-step conditioning and
//! single-head spatial self-attention at configurable levels.

use ndarray::{s, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    upsample2, upsample2_backward, Attention, Conv2d, DepthwiseConv2d, Gelu, LayerNorm, Linear,
    TimeMlp,
};
use super::ops::{concat_channels, gemm, silu_with_grad, split_channels};
use super::{ParamId, ParamStore, Scalar, Tape};
use crate::error::{CoreError, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// Number of resolution levels; level `l` runs at `H / 2^l` with
    /// `base_channels * 2^l` channels.
    pub n_resolutions: usize,
    pub blocks_per_level: usize,
    /// Level indices that get a self-attention module.
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub initial_kernel_size: usize,
}

impl UNetConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.base_channels < 8 {
            return Err(CoreError::config("base_channels must be >= 8"));
        }
        if self.initial_kernel_size % 2 == 0 {
            return Err(CoreError::config("initial_kernel_size must be odd"));
        }
        if self.n_resolutions == 0 {
            return Err(CoreError::config("n_resolutions must be >= 1"));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(CoreError::config("time_embed_dim must be even"));
        }
        let div = 1 << self.n_resolutions;
        if h % div != 0 || w % div != 0 {
            let pad_h = (div - h % div) % div;
            let pad_w = (div - w % div) % div;
            return Err(CoreError::config(format!(
                "spatial dims {h}x{w} not divisible by 2^{}; pad by {pad_h} rows and {pad_w} cols",
                self.n_resolutions
            )));
        }
        Ok(())
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// 1x1 convolution as a direct per-pixel gemm (no im2col copy).
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl PointwiseConv {
    pub fn new<F: Scalar>(
        ps: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.register(
            format!("{name}.weight"),
            super::kaiming_uniform(&[out_ch, in_ch], in_ch, rng),
        );
        let b = ps.register(format!("{name}.bias"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch])));
        PointwiseConv { w, b, in_ch, out_ch }
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        tape: Option<&mut Tape<F>>,
    ) -> Array4<F> {
        let (bsz, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "pointwise in_ch");
        let n = h * w;
        let wmat = ps
            .value(self.w)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch))
            .unwrap()
            .to_owned();
        let bias = ps.value(self.b);
        let mut out = Array4::zeros((bsz, self.out_ch, h, w));
        for bi in 0..bsz {
            let xi = x
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c, n))
                .unwrap()
                .to_owned();
            let mut y = Array2::zeros((self.out_ch, n));
            gemm(&wmat.view(), &xi.view(), &mut y.view_mut(), F::zero());
            out.index_axis_mut(Axis(0), bi)
                .assign(&y.into_shape_with_order((self.out_ch, h, w)).unwrap());
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
        let (bsz, c, h, w) = x.dim();
        let n = h * w;
        let wmat = ps
            .value(self.w)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch))
            .unwrap()
            .to_owned();
        let mut dw = Array2::<F>::zeros((self.out_ch, self.in_ch));
        let mut db = ndarray::Array1::<F>::zeros(self.out_ch);
        let mut grad_x = Array4::zeros(x.dim());
        for bi in 0..bsz {
            let xi = x
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c, n))
                .unwrap()
                .to_owned();
            let gy = grad_out
                .index_axis(Axis(0), bi)
                .into_shape_with_order((self.out_ch, n))
                .unwrap()
                .to_owned();
            let mut dwi = Array2::zeros((self.out_ch, self.in_ch));
            gemm(&gy.view(), &xi.t().as_standard_layout().view(), &mut dwi.view_mut(), F::zero());
            dw = dw + &dwi;
            for co in 0..self.out_ch {
                db[co] = db[co] + gy.row(co).sum();
            }
            let mut dxi = Array2::zeros((c, n));
            gemm(&wmat.t().as_standard_layout().view(), &gy.view(), &mut dxi.view_mut(), F::zero());
            grad_x
                .index_axis_mut(Axis(0), bi)
                .assign(&dxi.into_shape_with_order((c, h, w)).unwrap());
        }
        ps.grad_mut(self.w).zip_mut_with(&dw.into_dyn(), |g, d| *g = *g + *d);
        ps.grad_mut(self.b).zip_mut_with(&db.into_dyn(), |g, d| *g = *g + *d);
        grad_x
    }
}

/// ConvNeXt-style residual block with a per-channel diffusion-step bias:
/// depthwise 7x7 -> layer norm -> (+ step bias) -> 1x1 expand x4 -> GELU ->
/// 1x1 project, added back to the input.
#[derive(Debug, Clone)]
pub struct ConvNeXtBlock {
    pub dw: DepthwiseConv2d,
    pub norm: LayerNorm,
    pub time_proj: Linear,
    pub pw1: PointwiseConv,
    pub act: Gelu,
    pub pw2: PointwiseConv,
    pub ch: usize,
}

impl ConvNeXtBlock {
    pub fn new<F: Scalar>(
        ps: &mut ParamStore<F>,
        name: &str,
        ch: usize,
        time_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvNeXtBlock {
            dw: DepthwiseConv2d::new(ps, &format!("{name}.dw"), ch, 7, rng),
            norm: LayerNorm::new(ps, &format!("{name}.norm"), ch),
            time_proj: Linear::new(ps, &format!("{name}.time"), time_dim, ch, rng),
            pw1: PointwiseConv::new(ps, &format!("{name}.pw1"), ch, 4 * ch, rng),
            act: Gelu,
            pw2: PointwiseConv::new(ps, &format!("{name}.pw2"), 4 * ch, ch, rng),
            ch,
        }
    }

    /// `s` is the shared SiLU-activated time embedding, shape (B, E).
    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        s: &Array2<F>,
        mut tape: Option<&mut Tape<F>>,
    ) -> Array4<F> {
        let mut h = self.dw.forward(ps, x, tape.as_deref_mut());
        h = self.norm.forward(ps, &h, tape.as_deref_mut());
        let bias = self.time_proj.forward(ps, s, tape.as_deref_mut());
        let (bsz, c, _, _) = h.dim();
        for bi in 0..bsz {
            for ci in 0..c {
                let bv = bias[[bi, ci]];
                h.slice_mut(s![bi, ci, .., ..]).mapv_inplace(|v| v + bv);
            }
        }
        let h = self.pw1.forward(ps, &h, tape.as_deref_mut());
        let h = self.act.forward(&h, tape.as_deref_mut());
        let h = self.pw2.forward(ps, &h, tape.as_deref_mut());
        x + &h
    }

    /// Returns `(grad_x, grad_s)`.
    pub fn backward<F: Scalar>(
        &self,
        ps: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        grad_out: &Array4<F>,
    ) -> (Array4<F>, Array2<F>) {
        let g = self.pw2.backward(ps, tape, grad_out);
        let g = self.act.backward(tape, &g);
        let g = self.pw1.backward(ps, tape, &g);
        // Step-bias add: channel-wise sum feeds the time projection.
        let (bsz, c, _, _) = g.dim();
        let mut dbias = Array2::zeros((bsz, c));
        for bi in 0..bsz {
            for ci in 0..c {
                dbias[[bi, ci]] = g.slice(s![bi, ci, .., ..]).sum();
            }
        }
        let grad_s = self.time_proj.backward(ps, tape, &dbias);
        let g = self.norm.backward(ps, tape, &g);
        let g = self.dw.backward(ps, tape, &g);
        (g + grad_out, grad_s)
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    blocks: Vec<ConvNeXtBlock>,
    attn: Option<Attention>,
    down: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    merge: PointwiseConv,
    blocks: Vec<ConvNeXtBlock>,
    attn: Option<Attention>,
    /// Channel reduction applied after nearest upsampling into this level.
    up_into: Option<PointwiseConv>,
}

/// The denoiser U-Net. Parameters live in an external [`ParamStore`];
/// the struct itself only holds layer wiring.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    init_conv: Conv2d,
    time: TimeMlp,
    down: Vec<DownLevel>,
    mid1: ConvNeXtBlock,
    mid_attn: Attention,
    mid2: ConvNeXtBlock,
    up: Vec<UpLevel>,
    head_norm: LayerNorm,
    head: Conv2d,
}

impl UNet {
    /// Build the layer graph, registering parameters into `ps`.
    pub fn build<F: Scalar>(cfg: &UNetConfig, ps: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        // Shape-independent checks; spatial divisibility is re-checked per input.
        cfg.validate(1 << cfg.n_resolutions, 1 << cfg.n_resolutions)?;
        let rng = &mut crate::rng::stream(seed, "unet-init");
        let levels = cfg.n_resolutions;
        let init_conv = Conv2d::new(
            ps,
            "init",
            cfg.in_channels,
            cfg.base_channels,
            cfg.initial_kernel_size,
            1,
            rng,
        );
        let time = TimeMlp::new(ps, "time", cfg.time_embed_dim, rng);
        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            let ch = cfg.channels_at(l);
            let blocks = (0..cfg.blocks_per_level)
                .map(|b| ConvNeXtBlock::new(ps, &format!("down{l}.block{b}"), ch, cfg.time_embed_dim, rng))
                .collect();
            let attn = cfg
                .attention_levels
                .contains(&l)
                .then(|| Attention::new(ps, &format!("down{l}.attn"), ch, rng));
            let down_conv = (l + 1 < levels).then(|| {
                Conv2d::new(ps, &format!("down{l}.downsample"), ch, cfg.channels_at(l + 1), 3, 2, rng)
            });
            down.push(DownLevel { blocks, attn, down: down_conv });
        }
        let top = cfg.channels_at(levels - 1);
        let mid1 = ConvNeXtBlock::new(ps, "mid.block0", top, cfg.time_embed_dim, rng);
        let mid_attn = Attention::new(ps, "mid.attn", top, rng);
        let mid2 = ConvNeXtBlock::new(ps, "mid.block1", top, cfg.time_embed_dim, rng);
        let mut up = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let ch = cfg.channels_at(l);
            let merge = PointwiseConv::new(ps, &format!("up{l}.merge"), 2 * ch, ch, rng);
            let blocks = (0..cfg.blocks_per_level)
                .map(|b| ConvNeXtBlock::new(ps, &format!("up{l}.block{b}"), ch, cfg.time_embed_dim, rng))
                .collect();
            let attn = cfg
                .attention_levels
                .contains(&l)
                .then(|| Attention::new(ps, &format!("up{l}.attn"), ch, rng));
            let up_into = (l + 1 < levels).then(|| {
                PointwiseConv::new(ps, &format!("up{l}.reduce"), cfg.channels_at(l + 1), ch, rng)
            });
            up.push(UpLevel { merge, blocks, attn, up_into });
        }
        let head_norm = LayerNorm::new(ps, "head.norm", cfg.base_channels);
        let head = Conv2d::new(ps, "head.conv", cfg.base_channels, cfg.out_channels, 3, 1, rng);
        // Zero-init the output head: the denoiser starts by predicting zero
        // noise, which stabilizes early training.
        head.zero_init(ps);
        Ok(UNet { cfg: cfg.clone(), init_conv, time, down, mid1, mid_attn, mid2, up, head_norm, head })
    }

    /// Predict noise for the merged input at the given diffusion steps
    /// (one step index per batch element).
    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamStore<F>,
        x: &Array4<F>,
        steps: &[usize],
        mut tape: Option<&mut Tape<F>>,
    ) -> Result<Array4<F>> {
        let (bsz, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(CoreError::shape(format!(
                "input has {c} channels, config expects {}",
                self.cfg.in_channels
            )));
        }
        if steps.len() != bsz {
            return Err(CoreError::shape(format!("{} steps for batch {bsz}", steps.len())));
        }
        self.cfg.validate(h, w)?;

        let emb = self.time.forward(ps, steps, tape.as_deref_mut());
        let s_act = emb.mapv(|v| silu_with_grad(v).0);
        if let Some(t) = tape.as_deref_mut() {
            t.push(emb.clone().into_dyn());
        }

        let mut hcur = self.init_conv.forward(ps, x, tape.as_deref_mut());
        let mut skips: Vec<Array4<F>> = Vec::with_capacity(self.down.len());
        for level in &self.down {
            for block in &level.blocks {
                hcur = block.forward(ps, &hcur, &s_act, tape.as_deref_mut());
            }
            if let Some(attn) = &level.attn {
                hcur = attn.forward(ps, &hcur, tape.as_deref_mut());
            }
            skips.push(hcur.clone());
            if let Some(dc) = &level.down {
                hcur = dc.forward(ps, &hcur, tape.as_deref_mut());
            }
        }
        hcur = self.mid1.forward(ps, &hcur, &s_act, tape.as_deref_mut());
        hcur = self.mid_attn.forward(ps, &hcur, tape.as_deref_mut());
        hcur = self.mid2.forward(ps, &hcur, &s_act, tape.as_deref_mut());

        for (idx, level) in self.up.iter().enumerate() {
            let l = self.cfg.n_resolutions - 1 - idx;
            if let Some(reduce) = &level.up_into {
                hcur = upsample2(&hcur);
                hcur = reduce.forward(ps, &hcur, tape.as_deref_mut());
            }
            let skip = &skips[l];
            let cat = concat_channels(&hcur, skip);
            hcur = level.merge.forward(ps, &cat, tape.as_deref_mut());
            for block in &level.blocks {
                hcur = block.forward(ps, &hcur, &s_act, tape.as_deref_mut());
            }
            if let Some(attn) = &level.attn {
                hcur = attn.forward(ps, &hcur, tape.as_deref_mut());
            }
        }
        let hn = self.head_norm.forward(ps, &hcur, tape.as_deref_mut());
        let out = self.head.forward(ps, &hn, tape.as_deref_mut());
        if !out.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Divergence("non-finite denoiser output".into()));
        }
        Ok(out)
    }

    /// Backpropagate `grad_out` through the network, accumulating parameter
    /// gradients. Skip-connection gradients are combined where the forward
    /// pass branched.
    pub fn backward<F: Scalar>(
        &self,
        ps: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        grad_out: &Array4<F>,
    ) {
        let g = self.head.backward(ps, tape, grad_out);
        let mut g = self.head_norm.backward(ps, tape, &g);

        let bsz = grad_out.dim().0;
        let mut grad_s = Array2::<F>::zeros((bsz, self.cfg.time_embed_dim));
        let mut skip_grads: Vec<Option<Array4<F>>> = vec![None; self.down.len()];

        for (idx, level) in self.up.iter().enumerate().rev() {
            let l = self.cfg.n_resolutions - 1 - idx;
            if let Some(attn) = &level.attn {
                g = attn.backward(ps, tape, &g);
            }
            for block in level.blocks.iter().rev() {
                let (gx, gs) = block.backward(ps, tape, &g);
                g = gx;
                grad_s = grad_s + &gs;
            }
            let gcat = level.merge.backward(ps, tape, &g);
            let (gh, gskip) = split_channels(&gcat, self.cfg.channels_at(l));
            skip_grads[l] = Some(gskip);
            g = gh;
            if let Some(reduce) = &level.up_into {
                g = reduce.backward(ps, tape, &g);
                g = upsample2_backward(&g);
            }
        }

        {
            let (gx, gs) = self.mid2.backward(ps, tape, &g);
            g = gx;
            grad_s = grad_s + &gs;
            g = self.mid_attn.backward(ps, tape, &g);
            let (gx, gs) = self.mid1.backward(ps, tape, &g);
            g = gx;
            grad_s = grad_s + &gs;
        }

        for (l, level) in self.down.iter().enumerate().rev() {
            if let Some(dc) = &level.down {
                g = dc.backward(ps, tape, &g);
            }
            // Forward branched here: the skip saw the same activation.
            if let Some(gs) = skip_grads[l].take() {
                g = g + &gs;
            }
            if let Some(attn) = &level.attn {
                g = attn.backward(ps, tape, &g);
            }
            for block in level.blocks.iter().rev() {
                let (gx, gs) = block.backward(ps, tape, &g);
                g = gx;
                grad_s = grad_s + &gs;
            }
        }
        let _ = self.init_conv.backward(ps, tape, &g);

        // Shared SiLU on the time embedding, then the MLP.
        let emb = tape.pop().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut demb = grad_s;
        demb.zip_mut_with(&emb, |g, x| *g = *g * silu_with_grad(*x).1);
        let _ = self.time.backward(ps, tape, &demb);
        debug_assert!(tape.is_balanced(), "tape should be empty after full backward");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tiny_config() -> UNetConfig {
        UNetConfig {
            in_channels: 7,
            out_channels: 2,
            base_channels: 8,
            n_resolutions: 2,
            blocks_per_level: 1,
            attention_levels: vec![1],
            time_embed_dim: 16,
            initial_kernel_size: 5,
        }
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = tiny_config();
        let mut ps = ParamStore::<f32>::new();
        let net = UNet::build(&cfg, &mut ps, 1).unwrap();
        let x = Array4::from_elem((3, 7, 8, 8), 0.1f32);
        let y = net.forward(&ps, &x, &[1, 5, 9], None).unwrap();
        assert_eq!(y.dim(), (3, 2, 8, 8));
        assert!(ps.n_elements() > 0);
    }

    #[test]
    fn batch_repeat_gives_identical_outputs() {
        let cfg = tiny_config();
        let mut ps = ParamStore::<f32>::new();
        let net = UNet::build(&cfg, &mut ps, 2).unwrap();
        let mut rng = crate::rng::stream(3, "unet-batch");
        use rand::Rng;
        let one = Array4::from_shape_fn((1, 7, 8, 8), |_| rng.gen_range(-1.0f32..1.0));
        let two = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let y = net.forward(&ps, &two, &[4, 4], None).unwrap();
        let d = &y.index_axis(Axis(0), 0) - &y.index_axis(Axis(0), 1);
        assert!(d.iter().all(|v| v.abs() < 1e-6), "cross-batch coupling detected");
    }

    #[test]
    fn zero_head_returns_zeros() {
        let cfg = tiny_config();
        let mut ps = ParamStore::<f32>::new();
        let net = UNet::build(&cfg, &mut ps, 4).unwrap();
        // Head is zero-initialized by construction.
        let x = Array4::from_elem((2, 7, 8, 8), 0.7f32);
        let y = net.forward(&ps, &x, &[1, 2], None).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn indivisible_dims_name_required_padding() {
        let cfg = tiny_config();
        let mut ps = ParamStore::<f32>::new();
        let net = UNet::build(&cfg, &mut ps, 5).unwrap();
        let x = Array4::from_elem((1, 7, 10, 8), 0.0f32);
        let err = net.forward(&ps, &x, &[1], None).unwrap_err().to_string();
        assert!(err.contains("pad by 2 rows"), "{err}");
    }

    #[test]
    fn batch_permutation_equivariance() {
        let cfg = tiny_config();
        let mut ps = ParamStore::<f32>::new();
        let net = UNet::build(&cfg, &mut ps, 6).unwrap();
        use rand::Rng;
        let mut rng = crate::rng::stream(8, "unet-perm");
        let a = Array4::from_shape_fn((1, 7, 8, 8), |_| rng.gen_range(-1.0f32..1.0));
        let b = Array4::from_shape_fn((1, 7, 8, 8), |_| rng.gen_range(-1.0f32..1.0));
        let ab = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
        let ba = ndarray::concatenate(Axis(0), &[b.view(), a.view()]).unwrap();
        let y_ab = net.forward(&ps, &ab, &[3, 7], None).unwrap();
        let y_ba = net.forward(&ps, &ba, &[7, 3], None).unwrap();
        let d0 = &y_ab.index_axis(Axis(0), 0) - &y_ba.index_axis(Axis(0), 1);
        let d1 = &y_ab.index_axis(Axis(0), 1) - &y_ba.index_axis(Axis(0), 0);
        assert!(d0.iter().all(|v| v.abs() < 1e-6));
        assert!(d1.iter().all(|v| v.abs() < 1e-6));
    }
}

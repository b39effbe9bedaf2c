//! Text-conditioned denoiser: a small U-shaped encoder-decoder over
//! (H, W, C) images with cross-attention to continuous prompt tokens at the
//! two coarser resolutions, plus sinusoidal time conditioning.
//!
//! `forward` predicts the noise component of a diffused image. `backward`
//! propagates to the input image, the prompt tokens, and (optionally) the
//! parameters, which is what training, prompt tuning, and gradient-based
//! attacks respectively need.

use crate::nn::{
    c, concat_channels, silu1, silu1_backward, silu3, silu3_backward, split_channels, upsample2,
    upsample2_backward, Conv2d, Conv2dCache, CrossAttention, CrossAttentionCache, GroupNorm,
    GroupNormCache, Linear, LinearCache, ParamView, ParamViewMut, Scalar,
};
use crate::util::rng_for;
use ndarray::{Array1, Array2, Array3, Axis};

const TIME_IN: usize = 32;
const TIME_HIDDEN: usize = 64;

fn groups_for(channels: usize) -> usize {
    for g in [8usize, 4, 2, 1] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

/// Residual block: two 3x3 convolutions with group norm, SiLU, and an
/// additive per-channel time projection after the first convolution.
#[derive(Debug, Clone)]
struct ResBlock<F> {
    gn1: GroupNorm<F>,
    conv1: Conv2d<F>,
    tproj: Linear<F>,
    gn2: GroupNorm<F>,
    conv2: Conv2d<F>,
    skip: Option<Conv2d<F>>,
}

#[derive(Debug, Clone)]
struct ResBlockCache<F> {
    gn1: GroupNormCache<F>,
    act1: Array3<F>,
    conv1: Conv2dCache<F>,
    tproj: LinearCache<F>,
    gn2: GroupNormCache<F>,
    act2: Array3<F>,
    conv2: Conv2dCache<F>,
    skip: Option<Conv2dCache<F>>,
}

impl<F: Scalar> ResBlock<F> {
    fn new(rng: &mut rand_chacha::ChaCha12Rng, cin: usize, cout: usize) -> Self {
        ResBlock {
            gn1: GroupNorm::new(cin, groups_for(cin)),
            conv1: Conv2d::new(rng, cin, cout, 3, 1),
            tproj: Linear::new(rng, TIME_HIDDEN, cout),
            gn2: GroupNorm::new(cout, groups_for(cout)),
            conv2: Conv2d::new(rng, cout, cout, 3, 1),
            skip: if cin != cout {
                Some(Conv2d::new(rng, cin, cout, 1, 1))
            } else {
                None
            },
        }
    }

    fn forward(&self, x: &Array3<F>, temb: &Array2<F>) -> (Array3<F>, ResBlockCache<F>) {
        let (n1, gn1c) = self.gn1.forward(x);
        let (a1, a1c) = silu3(&n1);
        let (mut h, conv1c) = self.conv1.forward(&a1);
        let (tp, tprojc) = self.tproj.forward(temb);
        let tp_row = tp.row(0);
        for mut lane in h.lanes_mut(Axis(2)) {
            for (v, &t) in lane.iter_mut().zip(tp_row.iter()) {
                *v = *v + t;
            }
        }
        let (n2, gn2c) = self.gn2.forward(&h);
        let (a2, a2c) = silu3(&n2);
        let (h2, conv2c) = self.conv2.forward(&a2);
        let (res, skipc) = match &self.skip {
            Some(conv) => {
                let (s, sc) = conv.forward(x);
                (s, Some(sc))
            }
            None => (x.clone(), None),
        };
        let y = &h2 + &res;
        (
            y,
            ResBlockCache {
                gn1: gn1c,
                act1: a1c,
                conv1: conv1c,
                tproj: tprojc,
                gn2: gn2c,
                act2: a2c,
                conv2: conv2c,
                skip: skipc,
            },
        )
    }

    /// Returns (dx, dtemb) for this block.
    fn backward(
        &self,
        cache: &ResBlockCache<F>,
        dy: &Array3<F>,
        mut grads: Option<&mut ResBlock<F>>,
    ) -> (Array3<F>, Array2<F>) {
        let da2 = self
            .conv2
            .backward(&cache.conv2, dy, grads.as_deref_mut().map(|g| &mut g.conv2));
        let dn2 = silu3_backward(&cache.act2, &da2);
        let dh = self
            .gn2
            .backward(&cache.gn2, &dn2, grads.as_deref_mut().map(|g| &mut g.gn2));
        // time projection gradient: sum over spatial positions
        let (_, _, cout) = dh.dim();
        let mut dtp = Array2::<F>::zeros((1, cout));
        for lane in dh.lanes(Axis(2)) {
            for (gi, &v) in lane.iter().enumerate() {
                dtp[[0, gi]] = dtp[[0, gi]] + v;
            }
        }
        let dtemb =
            self.tproj
                .backward(&cache.tproj, &dtp, grads.as_deref_mut().map(|g| &mut g.tproj));
        let da1 = self
            .conv1
            .backward(&cache.conv1, &dh, grads.as_deref_mut().map(|g| &mut g.conv1));
        let dn1 = silu3_backward(&cache.act1, &da1);
        let mut dx = self
            .gn1
            .backward(&cache.gn1, &dn1, grads.as_deref_mut().map(|g| &mut g.gn1));
        match (&self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => {
                let ds = conv.backward(sc, dy, grads.as_deref_mut().map(|g| g.skip.as_mut().unwrap()));
                dx = &dx + &ds;
            }
            _ => {
                dx = &dx + dy;
            }
        }
        (dx, dtemb)
    }

    fn zero_grads(&self) -> Self {
        ResBlock {
            gn1: self.gn1.zero_grads(),
            conv1: self.conv1.zero_grads(),
            tproj: self.tproj.zero_grads(),
            gn2: self.gn2.zero_grads(),
            conv2: self.conv2.zero_grads(),
            skip: self.skip.as_ref().map(|s| s.zero_grads()),
        }
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamView<'a, F>)>) {
        out.push((format!("{prefix}.gn1.gamma"), ParamView::D1(&self.gn1.gamma)));
        out.push((format!("{prefix}.gn1.beta"), ParamView::D1(&self.gn1.beta)));
        out.push((format!("{prefix}.conv1.weight"), ParamView::D2(&self.conv1.weight)));
        out.push((format!("{prefix}.conv1.bias"), ParamView::D1(&self.conv1.bias)));
        out.push((format!("{prefix}.tproj.weight"), ParamView::D2(&self.tproj.weight)));
        out.push((format!("{prefix}.tproj.bias"), ParamView::D1(&self.tproj.bias)));
        out.push((format!("{prefix}.gn2.gamma"), ParamView::D1(&self.gn2.gamma)));
        out.push((format!("{prefix}.gn2.beta"), ParamView::D1(&self.gn2.beta)));
        out.push((format!("{prefix}.conv2.weight"), ParamView::D2(&self.conv2.weight)));
        out.push((format!("{prefix}.conv2.bias"), ParamView::D1(&self.conv2.bias)));
        if let Some(s) = &self.skip {
            out.push((format!("{prefix}.skip.weight"), ParamView::D2(&s.weight)));
            out.push((format!("{prefix}.skip.bias"), ParamView::D1(&s.bias)));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamViewMut<'a, F>)>) {
        out.push((format!("{prefix}.gn1.gamma"), ParamViewMut::D1(&mut self.gn1.gamma)));
        out.push((format!("{prefix}.gn1.beta"), ParamViewMut::D1(&mut self.gn1.beta)));
        out.push((format!("{prefix}.conv1.weight"), ParamViewMut::D2(&mut self.conv1.weight)));
        out.push((format!("{prefix}.conv1.bias"), ParamViewMut::D1(&mut self.conv1.bias)));
        out.push((format!("{prefix}.tproj.weight"), ParamViewMut::D2(&mut self.tproj.weight)));
        out.push((format!("{prefix}.tproj.bias"), ParamViewMut::D1(&mut self.tproj.bias)));
        out.push((format!("{prefix}.gn2.gamma"), ParamViewMut::D1(&mut self.gn2.gamma)));
        out.push((format!("{prefix}.gn2.beta"), ParamViewMut::D1(&mut self.gn2.beta)));
        out.push((format!("{prefix}.conv2.weight"), ParamViewMut::D2(&mut self.conv2.weight)));
        out.push((format!("{prefix}.conv2.bias"), ParamViewMut::D1(&mut self.conv2.bias)));
        if let Some(s) = &mut self.skip {
            out.push((format!("{prefix}.skip.weight"), ParamViewMut::D2(&mut s.weight)));
            out.push((format!("{prefix}.skip.bias"), ParamViewMut::D1(&mut s.bias)));
        }
    }
}

/// Architecture and conditioning dimensions for [`DenoiserModel`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    /// Prompt token dimensionality d.
    pub embed_dim: usize,
    /// Diffusion step count T (sets the time-embedding table size).
    pub time_steps: usize,
    /// Number of class-conditioning tokens learned during training.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            in_channels: 3,
            image_size: 32,
            base_channels: 16,
            embed_dim: 128,
            time_steps: 250,
            num_classes: 6,
            seed: 0,
        }
    }
}

/// Conditional noise-prediction network. Immutable during inference;
/// deterministic given (input, t, prompt).
#[derive(Debug, Clone)]
pub struct DenoiserModel<F> {
    pub cfg: DenoiserConfig,
    stem: Conv2d<F>,
    rb0: ResBlock<F>,
    down1: Conv2d<F>,
    rb1: ResBlock<F>,
    attn1: CrossAttention<F>,
    down2: Conv2d<F>,
    rb2: ResBlock<F>,
    attn2: CrossAttention<F>,
    rb_mid: ResBlock<F>,
    up1: Conv2d<F>,
    rbd1: ResBlock<F>,
    up0: Conv2d<F>,
    rbd0: ResBlock<F>,
    gn_out: GroupNorm<F>,
    conv_out: Conv2d<F>,
    t_lin1: Linear<F>,
    t_lin2: Linear<F>,
    /// Learned class-conditioning tokens, one row per class.
    pub class_tokens: Array2<F>,
    /// Fixed sinusoidal time-embedding table (not a parameter).
    t_table: Array2<F>,
}

/// All intermediate activations of one forward pass.
pub struct DenoiserCache<F> {
    tl1: LinearCache<F>,
    t_act: Array1<F>,
    tl2: LinearCache<F>,
    stem: Conv2dCache<F>,
    rb0: ResBlockCache<F>,
    down1: Conv2dCache<F>,
    rb1: ResBlockCache<F>,
    attn1: CrossAttentionCache<F>,
    down2: Conv2dCache<F>,
    rb2: ResBlockCache<F>,
    attn2: CrossAttentionCache<F>,
    rb_mid: ResBlockCache<F>,
    up1: Conv2dCache<F>,
    rbd1: ResBlockCache<F>,
    up0: Conv2dCache<F>,
    rbd0: ResBlockCache<F>,
    gn_out: GroupNormCache<F>,
    act_out: Array3<F>,
    conv_out: Conv2dCache<F>,
    ch_l0: usize,
    ch_l1: usize,
}

impl<F: Scalar> DenoiserModel<F> {
    pub fn new(cfg: DenoiserConfig) -> Self {
        assert!(cfg.image_size % 4 == 0, "image size must be divisible by 4");
        let mut rng = rng_for(cfg.seed, "denoiser-init");
        let b = cfg.base_channels;
        let (c0, c1, c2) = (b, 2 * b, 3 * b);
        let d = cfg.embed_dim;
        let mut t_table = Array2::<F>::zeros((cfg.time_steps, TIME_IN));
        let half = TIME_IN / 2;
        for t in 0..cfg.time_steps {
            for i in 0..half {
                let freq = (-(10000.0f64.ln()) * i as f64 / (half as f64 - 1.0)).exp();
                let arg = t as f64 * freq;
                t_table[[t, i]] = c(arg.sin());
                t_table[[t, half + i]] = c(arg.cos());
            }
        }
        let class_tokens = crate::nn::randn2(&mut rng, (cfg.num_classes.max(1), d), 0.2);
        DenoiserModel {
            stem: Conv2d::new(&mut rng, cfg.in_channels, c0, 3, 1),
            rb0: ResBlock::new(&mut rng, c0, c0),
            down1: Conv2d::new(&mut rng, c0, c1, 3, 2),
            rb1: ResBlock::new(&mut rng, c1, c1),
            attn1: CrossAttention::new(&mut rng, c1, d),
            down2: Conv2d::new(&mut rng, c1, c2, 3, 2),
            rb2: ResBlock::new(&mut rng, c2, c2),
            attn2: CrossAttention::new(&mut rng, c2, d),
            rb_mid: ResBlock::new(&mut rng, c2, c2),
            up1: Conv2d::new(&mut rng, c2, c1, 3, 1),
            rbd1: ResBlock::new(&mut rng, 2 * c1, c1),
            up0: Conv2d::new(&mut rng, c1, c0, 3, 1),
            rbd0: ResBlock::new(&mut rng, 2 * c0, c0),
            gn_out: GroupNorm::new(c0, groups_for(c0)),
            conv_out: Conv2d::new_zeroed(c0, cfg.in_channels, 3),
            t_lin1: Linear::new(&mut rng, TIME_IN, TIME_HIDDEN),
            t_lin2: Linear::new(&mut rng, TIME_HIDDEN, TIME_HIDDEN),
            class_tokens,
            t_table,
            cfg,
        }
    }

    /// The all-zeros token matrix used as the unconditional prompt.
    pub fn empty_prompt(&self) -> Array2<F> {
        Array2::zeros((1, self.cfg.embed_dim))
    }

    /// Zero out the prompt projections so the output ignores the prompt
    /// entirely (a test double for prompt-independence contracts).
    pub fn neutralize_prompt_conditioning(&mut self) {
        for attn in [&mut self.attn1, &mut self.attn2] {
            attn.wk.fill(F::zero());
            attn.bk.fill(F::zero());
            attn.wv.fill(F::zero());
            attn.bv.fill(F::zero());
        }
    }

    /// Predict the noise in `x` at step `t` under `prompt` (n x d tokens).
    pub fn forward(&self, x: &Array3<F>, t: usize, prompt: &Array2<F>) -> (Array3<F>, DenoiserCache<F>) {
        assert!(t < self.cfg.time_steps, "time step out of range");
        assert_eq!(prompt.ncols(), self.cfg.embed_dim, "prompt dim mismatch");
        let t_row = self
            .t_table
            .row(t)
            .to_owned()
            .into_shape_with_order((1, TIME_IN))
            .unwrap();
        let (th, tl1) = self.t_lin1.forward(&t_row);
        let th1 = th.row(0).to_owned();
        let (ta, t_act) = silu1(&th1);
        let ta2 = ta.into_shape_with_order((1, TIME_HIDDEN)).unwrap();
        let (temb, tl2) = self.t_lin2.forward(&ta2);

        let (h0, stemc) = self.stem.forward(x);
        let (e0, rb0c) = self.rb0.forward(&h0, &temb);
        let (d1, down1c) = self.down1.forward(&e0);
        let (e1, rb1c) = self.rb1.forward(&d1, &temb);
        let (a1, attn1c) = self.attn1.forward(&e1, prompt);
        let (d2, down2c) = self.down2.forward(&a1);
        let (e2, rb2c) = self.rb2.forward(&d2, &temb);
        let (a2, attn2c) = self.attn2.forward(&e2, prompt);
        let (m, rb_midc) = self.rb_mid.forward(&a2, &temb);
        let mu = upsample2(&m);
        let (u1, up1c) = self.up1.forward(&mu);
        let cat1 = concat_channels(&u1, &a1);
        let (o1, rbd1c) = self.rbd1.forward(&cat1, &temb);
        let ou = upsample2(&o1);
        let (u0, up0c) = self.up0.forward(&ou);
        let cat0 = concat_channels(&u0, &e0);
        let (o0, rbd0c) = self.rbd0.forward(&cat0, &temb);
        let (gno, gn_outc) = self.gn_out.forward(&o0);
        let (act, act_out) = silu3(&gno);
        let (eps, conv_outc) = self.conv_out.forward(&act);
        let ch_l0 = u1.dim().2;
        let ch_l1 = u0.dim().2;
        (
            eps,
            DenoiserCache {
                tl1,
                t_act,
                tl2,
                stem: stemc,
                rb0: rb0c,
                down1: down1c,
                rb1: rb1c,
                attn1: attn1c,
                down2: down2c,
                rb2: rb2c,
                attn2: attn2c,
                rb_mid: rb_midc,
                up1: up1c,
                rbd1: rbd1c,
                up0: up0c,
                rbd0: rbd0c,
                gn_out: gn_outc,
                act_out,
                conv_out: conv_outc,
                ch_l0,
                ch_l1,
            },
        )
    }

    /// Backpropagate `d_eps` to the input image and prompt tokens,
    /// accumulating parameter gradients into `grads` when provided.
    pub fn backward(
        &self,
        cache: &DenoiserCache<F>,
        d_eps: &Array3<F>,
        mut grads: Option<&mut DenoiserModel<F>>,
    ) -> (Array3<F>, Array2<F>) {
        let dact = self.conv_out.backward(
            &cache.conv_out,
            d_eps,
            grads.as_deref_mut().map(|g| &mut g.conv_out),
        );
        let dgno = silu3_backward(&cache.act_out, &dact);
        let do0 = self.gn_out.backward(
            &cache.gn_out,
            &dgno,
            grads.as_deref_mut().map(|g| &mut g.gn_out),
        );
        let (dcat0, dt_rbd0) =
            self.rbd0
                .backward(&cache.rbd0, &do0, grads.as_deref_mut().map(|g| &mut g.rbd0));
        let (du0, de0_skip) = split_channels(&dcat0, cache.ch_l1);
        let dou = self
            .up0
            .backward(&cache.up0, &du0, grads.as_deref_mut().map(|g| &mut g.up0));
        let do1 = upsample2_backward(&dou);
        let (dcat1, dt_rbd1) =
            self.rbd1
                .backward(&cache.rbd1, &do1, grads.as_deref_mut().map(|g| &mut g.rbd1));
        let (du1, da1_skip) = split_channels(&dcat1, cache.ch_l0);
        let dmu = self
            .up1
            .backward(&cache.up1, &du1, grads.as_deref_mut().map(|g| &mut g.up1));
        let dm = upsample2_backward(&dmu);
        let (da2, dt_mid) =
            self.rb_mid
                .backward(&cache.rb_mid, &dm, grads.as_deref_mut().map(|g| &mut g.rb_mid));
        let (de2, dprompt2) = self.attn2.backward(
            &cache.attn2,
            &da2,
            grads.as_deref_mut().map(|g| &mut g.attn2),
        );
        let (dd2, dt_rb2) =
            self.rb2
                .backward(&cache.rb2, &de2, grads.as_deref_mut().map(|g| &mut g.rb2));
        let mut da1 = self.down2.backward(
            &cache.down2,
            &dd2,
            grads.as_deref_mut().map(|g| &mut g.down2),
        );
        da1 = &da1 + &da1_skip;
        let (de1, dprompt1) = self.attn1.backward(
            &cache.attn1,
            &da1,
            grads.as_deref_mut().map(|g| &mut g.attn1),
        );
        let (dd1, dt_rb1) =
            self.rb1
                .backward(&cache.rb1, &de1, grads.as_deref_mut().map(|g| &mut g.rb1));
        let mut de0 = self.down1.backward(
            &cache.down1,
            &dd1,
            grads.as_deref_mut().map(|g| &mut g.down1),
        );
        de0 = &de0 + &de0_skip;
        let (dh0, dt_rb0) =
            self.rb0
                .backward(&cache.rb0, &de0, grads.as_deref_mut().map(|g| &mut g.rb0));
        let dx = self
            .stem
            .backward(&cache.stem, &dh0, grads.as_deref_mut().map(|g| &mut g.stem));

        // time MLP backward from all resblock contributions
        let dtemb = &(&dt_rbd0 + &dt_rbd1) + &(&(&dt_mid + &dt_rb2) + &(&dt_rb1 + &dt_rb0));
        let dta = self.t_lin2.backward(
            &cache.tl2,
            &dtemb,
            grads.as_deref_mut().map(|g| &mut g.t_lin2),
        );
        let dta1 = dta.row(0).to_owned();
        let dth = silu1_backward(&cache.t_act, &dta1);
        let dth2 = dth.into_shape_with_order((1, TIME_HIDDEN)).unwrap();
        let _ = self.t_lin1.backward(
            &cache.tl1,
            &dth2,
            grads.as_deref_mut().map(|g| &mut g.t_lin1),
        );

        let dprompt = &dprompt1 + &dprompt2;
        (dx, dprompt)
    }

    /// Zeroed shadow copy used as a parameter-gradient accumulator.
    pub fn zero_grads(&self) -> DenoiserModel<F> {
        DenoiserModel {
            cfg: self.cfg.clone(),
            stem: self.stem.zero_grads(),
            rb0: self.rb0.zero_grads(),
            down1: self.down1.zero_grads(),
            rb1: self.rb1.zero_grads(),
            attn1: self.attn1.zero_grads(),
            down2: self.down2.zero_grads(),
            rb2: self.rb2.zero_grads(),
            attn2: self.attn2.zero_grads(),
            rb_mid: self.rb_mid.zero_grads(),
            up1: self.up1.zero_grads(),
            rbd1: self.rbd1.zero_grads(),
            up0: self.up0.zero_grads(),
            rbd0: self.rbd0.zero_grads(),
            gn_out: self.gn_out.zero_grads(),
            conv_out: self.conv_out.zero_grads(),
            t_lin1: self.t_lin1.zero_grads(),
            t_lin2: self.t_lin2.zero_grads(),
            class_tokens: Array2::zeros(self.class_tokens.dim()),
            t_table: Array2::zeros((0, 0)),
        }
    }

    pub fn params(&self) -> Vec<(String, ParamView<'_, F>)> {
        let mut out = Vec::new();
        out.push(("stem.weight".into(), ParamView::D2(&self.stem.weight)));
        out.push(("stem.bias".into(), ParamView::D1(&self.stem.bias)));
        self.rb0.params("rb0", &mut out);
        out.push(("down1.weight".into(), ParamView::D2(&self.down1.weight)));
        out.push(("down1.bias".into(), ParamView::D1(&self.down1.bias)));
        self.rb1.params("rb1", &mut out);
        attn_params("attn1", &self.attn1, &mut out);
        out.push(("down2.weight".into(), ParamView::D2(&self.down2.weight)));
        out.push(("down2.bias".into(), ParamView::D1(&self.down2.bias)));
        self.rb2.params("rb2", &mut out);
        attn_params("attn2", &self.attn2, &mut out);
        self.rb_mid.params("rb_mid", &mut out);
        out.push(("up1.weight".into(), ParamView::D2(&self.up1.weight)));
        out.push(("up1.bias".into(), ParamView::D1(&self.up1.bias)));
        self.rbd1.params("rbd1", &mut out);
        out.push(("up0.weight".into(), ParamView::D2(&self.up0.weight)));
        out.push(("up0.bias".into(), ParamView::D1(&self.up0.bias)));
        self.rbd0.params("rbd0", &mut out);
        out.push(("gn_out.gamma".into(), ParamView::D1(&self.gn_out.gamma)));
        out.push(("gn_out.beta".into(), ParamView::D1(&self.gn_out.beta)));
        out.push(("conv_out.weight".into(), ParamView::D2(&self.conv_out.weight)));
        out.push(("conv_out.bias".into(), ParamView::D1(&self.conv_out.bias)));
        out.push(("t_lin1.weight".into(), ParamView::D2(&self.t_lin1.weight)));
        out.push(("t_lin1.bias".into(), ParamView::D1(&self.t_lin1.bias)));
        out.push(("t_lin2.weight".into(), ParamView::D2(&self.t_lin2.weight)));
        out.push(("t_lin2.bias".into(), ParamView::D1(&self.t_lin2.bias)));
        out.push(("class_tokens".into(), ParamView::D2(&self.class_tokens)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamViewMut<'_, F>)> {
        let mut out = Vec::new();
        out.push(("stem.weight".into(), ParamViewMut::D2(&mut self.stem.weight)));
        out.push(("stem.bias".into(), ParamViewMut::D1(&mut self.stem.bias)));
        self.rb0.params_mut("rb0", &mut out);
        out.push(("down1.weight".into(), ParamViewMut::D2(&mut self.down1.weight)));
        out.push(("down1.bias".into(), ParamViewMut::D1(&mut self.down1.bias)));
        self.rb1.params_mut("rb1", &mut out);
        attn_params_mut("attn1", &mut self.attn1, &mut out);
        out.push(("down2.weight".into(), ParamViewMut::D2(&mut self.down2.weight)));
        out.push(("down2.bias".into(), ParamViewMut::D1(&mut self.down2.bias)));
        self.rb2.params_mut("rb2", &mut out);
        attn_params_mut("attn2", &mut self.attn2, &mut out);
        self.rb_mid.params_mut("rb_mid", &mut out);
        out.push(("up1.weight".into(), ParamViewMut::D2(&mut self.up1.weight)));
        out.push(("up1.bias".into(), ParamViewMut::D1(&mut self.up1.bias)));
        self.rbd1.params_mut("rbd1", &mut out);
        out.push(("up0.weight".into(), ParamViewMut::D2(&mut self.up0.weight)));
        out.push(("up0.bias".into(), ParamViewMut::D1(&mut self.up0.bias)));
        self.rbd0.params_mut("rbd0", &mut out);
        out.push(("gn_out.gamma".into(), ParamViewMut::D1(&mut self.gn_out.gamma)));
        out.push(("gn_out.beta".into(), ParamViewMut::D1(&mut self.gn_out.beta)));
        out.push(("conv_out.weight".into(), ParamViewMut::D2(&mut self.conv_out.weight)));
        out.push(("conv_out.bias".into(), ParamViewMut::D1(&mut self.conv_out.bias)));
        out.push(("t_lin1.weight".into(), ParamViewMut::D2(&mut self.t_lin1.weight)));
        out.push(("t_lin1.bias".into(), ParamViewMut::D1(&mut self.t_lin1.bias)));
        out.push(("t_lin2.weight".into(), ParamViewMut::D2(&mut self.t_lin2.weight)));
        out.push(("t_lin2.bias".into(), ParamViewMut::D1(&mut self.t_lin2.bias)));
        out.push(("class_tokens".into(), ParamViewMut::D2(&mut self.class_tokens)));
        out
    }

    pub fn flat_params(&self) -> Vec<F> {
        crate::nn::flatten_params(&self.params())
    }

    pub fn assign_flat(&mut self, data: &[F]) {
        crate::nn::assign_from_flat(self.params_mut(), data);
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, v)| v.len()).sum()
    }
}

fn attn_params<'a, F: Scalar>(
    prefix: &str,
    a: &'a CrossAttention<F>,
    out: &mut Vec<(String, ParamView<'a, F>)>,
) {
    out.push((format!("{prefix}.wq"), ParamView::D2(&a.wq)));
    out.push((format!("{prefix}.bq"), ParamView::D1(&a.bq)));
    out.push((format!("{prefix}.wk"), ParamView::D2(&a.wk)));
    out.push((format!("{prefix}.bk"), ParamView::D1(&a.bk)));
    out.push((format!("{prefix}.wv"), ParamView::D2(&a.wv)));
    out.push((format!("{prefix}.bv"), ParamView::D1(&a.bv)));
    out.push((format!("{prefix}.wo"), ParamView::D2(&a.wo)));
    out.push((format!("{prefix}.bo"), ParamView::D1(&a.bo)));
}

fn attn_params_mut<'a, F: Scalar>(
    prefix: &str,
    a: &'a mut CrossAttention<F>,
    out: &mut Vec<(String, ParamViewMut<'a, F>)>,
) {
    out.push((format!("{prefix}.wq"), ParamViewMut::D2(&mut a.wq)));
    out.push((format!("{prefix}.bq"), ParamViewMut::D1(&mut a.bq)));
    out.push((format!("{prefix}.wk"), ParamViewMut::D2(&mut a.wk)));
    out.push((format!("{prefix}.bk"), ParamViewMut::D1(&mut a.bk)));
    out.push((format!("{prefix}.wv"), ParamViewMut::D2(&mut a.wv)));
    out.push((format!("{prefix}.bv"), ParamViewMut::D1(&mut a.bv)));
    out.push((format!("{prefix}.wo"), ParamViewMut::D2(&mut a.wo)));
    out.push((format!("{prefix}.bo"), ParamViewMut::D1(&mut a.bo)));
}

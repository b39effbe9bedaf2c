//! Few-shot prompt tuning and domain-token textual inversion. Prompt
//! matrices are the only trainable state; the diffusion model and the
//! classifier stay frozen throughout.

pub mod losses;

pub use losses::*;

use crate::data_io::{Checkpoint, CheckpointKind, Image, Mask};
use crate::diffusion::{
    forward_diffuse, gaussian_like, inpaint_backward_prompt, inpaint_traced, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::localizer::{
    aap_backward_prompt, aap_difference_traced, binarize, diff_p99, refine_mask, BinarizeMode,
    DiffMap, LocalizerConfig, Normalization,
};
use crate::nn::{Adam, Scalar};
use crate::unet::DenoiserModel;
use crate::util::{derive_seed, rng_for};
use crate::victims::Classifier;
use ndarray::{Array1, Array2, Array3};
use std::collections::BTreeMap;

/// Learnable localization and restoration prompts, with an optional frozen
/// domain token appended to both.
#[derive(Debug, Clone)]
pub struct LearnablePrompts {
    pub v_l: Array2<f32>,
    pub v_r: Array2<f32>,
    pub idc: Option<Array1<f32>>,
}

impl LearnablePrompts {
    /// Random initialization with the same scale as trained class tokens.
    pub fn new(n: usize, d: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "prompt-init");
        LearnablePrompts {
            v_l: crate::nn::randn2(&mut rng, (n, d), 0.2),
            v_r: crate::nn::randn2(&mut rng, (n, d), 0.2),
            idc: None,
        }
    }

    /// All-zero prompt matrices (the empty-prompt defense configuration).
    pub fn empty(n: usize, d: usize) -> Self {
        LearnablePrompts {
            v_l: Array2::zeros((n, d)),
            v_r: Array2::zeros((n, d)),
            idc: None,
        }
    }

    pub fn token_count(&self) -> usize {
        self.v_l.nrows() + usize::from(self.idc.is_some())
    }

    fn with_idc(&self, base: &Array2<f32>) -> Array2<f32> {
        match &self.idc {
            None => base.clone(),
            Some(tok) => {
                let (n, d) = base.dim();
                let mut out = Array2::<f32>::zeros((n + 1, d));
                out.slice_mut(ndarray::s![..n, ..]).assign(base);
                out.row_mut(n).assign(tok);
                out
            }
        }
    }

    /// Localization prompt fed to the model (IDC appended when present).
    pub fn prompt_l(&self) -> Array2<f32> {
        self.with_idc(&self.v_l)
    }

    pub fn prompt_r(&self) -> Array2<f32> {
        self.with_idc(&self.v_r)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct TuneConfig {
    pub shots: usize,
    pub steps: usize,
    pub learn_rate: f64,
    /// TNC and IE loss weights (infrared mode only).
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Uniformity window (odd).
    pub k: usize,
    pub infrared: bool,
    /// Reverse steps unrolled for restoration gradients.
    pub restore_unroll: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            shots: 8,
            steps: 200,
            learn_rate: 1e-2,
            alpha: 0.4,
            beta: 0.6,
            gamma: 0.7,
            delta: 0.3,
            k: 5,
            infrared: false,
            restore_unroll: 5,
            seed: 0,
        }
    }
}

impl TuneConfig {
    fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::contract("tune config needs shots >= 1"));
        }
        if self.k % 2 == 0 || self.k < 3 {
            return Err(Error::contract("uniformity window k must be odd >= 3"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.delta < 0.0 {
            return Err(Error::contract("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// One few-shot example: the clean image, its attacked version, and the
/// ground-truth patch mask. Images are in the evaluation domain (grayscale
/// for infrared mode).
pub type FewShotExample = (Image, Image, Mask);

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TuneReport {
    pub step_losses: Vec<f64>,
    pub initial_lpt: f64,
    pub final_lpt: f64,
}

/// Replicate a grayscale image across channels to match the model's input
/// width; identity when the widths already agree.
pub fn fit_channels(x: &Image, target: usize) -> Image {
    let (h, w, ch) = x.dim();
    if ch == target {
        return x.clone();
    }
    assert_eq!(ch, 1, "can only replicate single-channel images");
    let mut out = Array3::<f32>::zeros((h, w, target));
    for y in 0..h {
        for xx in 0..w {
            for ci in 0..target {
                out[[y, xx, ci]] = x[[y, xx, 0]];
            }
        }
    }
    out
}

fn rgb_to_gray_mean64(x: &Image) -> Array2<f64> {
    let (h, w, ch) = x.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for ci in 0..ch {
                s += x[[y, xx, ci]] as f64;
            }
            out[[y, xx]] = s / ch as f64;
        }
    }
    out
}

struct ShotLoss {
    lpt: f64,
    dv_l: Option<Array2<f32>>,
    dv_r: Option<Array2<f32>>,
}

/// Forward (and optionally backward) pass of the tuning objective on one
/// few-shot example.
#[allow(clippy::too_many_arguments)]
fn shot_objective(
    x_clean: &Image,
    x_adv: &Image,
    gt_mask: &Mask,
    prompts: &LearnablePrompts,
    cfg: &TuneConfig,
    loc: &LocalizerConfig,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    clf: &Classifier,
    seed: u64,
    want_grads: bool,
) -> Result<ShotLoss> {
    let n = prompts.v_l.nrows();
    let x_adv_model = fit_channels(x_adv, model.cfg.in_channels);
    let prompt_l = prompts.prompt_l();
    let prompt_r = prompts.prompt_r();

    // -- localization branch: soft mask vs ground truth --------------------
    let (raw, aap_trace) =
        aap_difference_traced(&x_adv_model, &prompt_l, loc, model, sched, seed)?;
    let p99 = diff_p99(&raw);
    let norm_vals = if p99 > 0.0 {
        raw.values.mapv(|v| (v / p99).clamp(0.0, 1.0))
    } else {
        raw.values.clone()
    };
    let m_soft32 = norm_vals.mapv(|v| 1.0 / (1.0 + (-(v - loc.theta) / loc.soft_tau).exp()));
    let m64 = gt_mask.mapv(|v| v as f64);
    let m_soft64 = m_soft32.mapv(|v| v as f64);
    let lce = losses::loss_ce(&m64, &m_soft64)?;

    let dv_l = if want_grads {
        let dmsoft = losses::loss_ce_grad(&m64, &m_soft64)?;
        // chain: sigmoid, then the stop-gradient percentile normalizer
        let mut draw = Array2::<f32>::zeros(raw.values.dim());
        if p99 > 0.0 {
            for ((d, &g), (&s, &rv)) in draw
                .iter_mut()
                .zip(dmsoft.iter())
                .zip(m_soft32.iter().zip(raw.values.iter()))
            {
                if rv < p99 {
                    *d = g as f32 * s * (1.0 - s) / loc.soft_tau / p99;
                }
            }
        }
        let dp = aap_backward_prompt(&aap_trace, &draw, model, sched);
        Some(dp.slice(ndarray::s![..n, ..]).to_owned())
    } else {
        None
    };

    // -- restoration branch: L1 + perceptual (+ infrared terms) ------------
    let norm_map = DiffMap {
        values: norm_vals,
        normalization: Normalization::Percentile,
    };
    let hard = binarize(&norm_map, loc.theta, BinarizeMode::Hard, loc.soft_tau)?;
    let refined = refine_mask(&hard, loc);
    let mask_empty = refined.iter().all(|&v| v == 0.0);

    let (x_r_model, inpaint_trace) = if mask_empty {
        (x_adv_model.clone(), None)
    } else {
        let (xr, tr) = inpaint_traced(
            &x_adv_model,
            &refined,
            &prompt_r,
            cfg.restore_unroll,
            model,
            sched,
            derive_seed(seed, "restore"),
        )?;
        (xr, Some(tr))
    };

    let mut lpt = lce;
    let mut dxr_model: Option<Image> = None;
    if cfg.infrared {
        let i_r = rgb_to_gray_mean64(&x_r_model);
        let i_c = {
            let (h, w, _) = x_clean.dim();
            let mut out = Array2::<f64>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    out[[y, x]] = x_clean[[y, x, 0]] as f64;
                }
            }
            out
        };
        let ir3 = {
            let (h, w) = i_r.dim();
            let mut a = Array3::<f64>::zeros((h, w, 1));
            for y in 0..h {
                for x in 0..w {
                    a[[y, x, 0]] = i_r[[y, x]];
                }
            }
            a
        };
        let ic3 = {
            let (h, w) = i_c.dim();
            let mut a = Array3::<f64>::zeros((h, w, 1));
            for y in 0..h {
                for x in 0..w {
                    a[[y, x, 0]] = i_c[[y, x]];
                }
            }
            a
        };
        let l1 = losses::loss_l1(&ir3, &ic3)?;
        let d = losses::perceptual_distance(&ir3, &ic3, clf)?;
        let tnc = losses::loss_tnc(&i_c, &i_r, cfg.alpha, cfg.beta, cfg.k)?;
        let ie = losses::loss_ie(&i_c, &i_r, cfg.gamma, cfg.delta)?;
        lpt += l1 + d + tnc + ie;
        if want_grads && !mask_empty {
            let mut dg = losses::loss_l1_grad(&ir3, &ic3)?
                .index_axis_move(ndarray::Axis(2), 0);
            let dp = losses::perceptual_distance_grad(&ir3, &ic3, clf)?
                .index_axis_move(ndarray::Axis(2), 0);
            dg = dg + dp;
            dg = dg + losses::loss_tnc_grad(&i_c, &i_r, cfg.alpha, cfg.beta, cfg.k)?;
            dg = dg + losses::loss_ie_grad(&i_c, &i_r, cfg.gamma, cfg.delta)?;
            // collapse was a channel mean: distribute the gradient equally
            let (h, w, ch) = x_r_model.dim();
            let mut dxr = Array3::<f32>::zeros((h, w, ch));
            for y in 0..h {
                for x in 0..w {
                    let g = (dg[[y, x]] / ch as f64) as f32;
                    for ci in 0..ch {
                        dxr[[y, x, ci]] = g;
                    }
                }
            }
            dxr_model = Some(dxr);
        }
    } else {
        let xr64 = x_r_model.mapv(|v| v as f64);
        let xc64 = x_clean.mapv(|v| v as f64);
        let l1 = losses::loss_l1(&xr64, &xc64)?;
        let d = losses::perceptual_distance(&xr64, &xc64, clf)?;
        lpt += l1 + d;
        if want_grads && !mask_empty {
            let g = losses::loss_l1_grad(&xr64, &xc64)?
                + losses::perceptual_distance_grad(&xr64, &xc64, clf)?;
            dxr_model = Some(g.mapv(|v| v as f32));
        }
    }

    let dv_r = match (want_grads, dxr_model, inpaint_trace) {
        (true, Some(dxr), Some(trace)) => {
            let dp = inpaint_backward_prompt(&trace, &dxr, model, sched);
            Some(dp.slice(ndarray::s![..n, ..]).to_owned())
        }
        (true, _, _) => Some(Array2::zeros(prompts.v_r.dim())),
        _ => None,
    };

    Ok(ShotLoss { lpt, dv_l, dv_r })
}

/// Mean tuning objective over the whole few-shot set (fixed seeds).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_lpt(
    fewshot: &[FewShotExample],
    prompts: &LearnablePrompts,
    cfg: &TuneConfig,
    loc: &LocalizerConfig,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    clf: &Classifier,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, (x_clean, x_adv, gt)) in fewshot.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &format!("lpt-eval-{i}"));
        let s = shot_objective(
            x_clean, x_adv, gt, prompts, cfg, loc, model, sched, clf, seed, false,
        )?;
        total += s.lpt;
    }
    Ok(total / fewshot.len() as f64)
}

/// Few-shot gradient descent over the two prompt matrices. The model,
/// classifier, and any IDC token stay frozen.
#[allow(clippy::too_many_arguments)]
pub fn tune_prompts(
    fewshot: &[FewShotExample],
    prompts: &LearnablePrompts,
    cfg: &TuneConfig,
    loc: &LocalizerConfig,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    clf: &Classifier,
) -> Result<(LearnablePrompts, TuneReport)> {
    cfg.validate()?;
    if fewshot.is_empty() {
        return Err(Error::contract("tune_prompts: empty few-shot set"));
    }
    if fewshot.len() != cfg.shots {
        return Err(Error::contract(format!(
            "tune_prompts: few-shot set has {} examples, config says {}",
            fewshot.len(),
            cfg.shots
        )));
    }
    let mut tuned = prompts.clone();
    let initial_lpt = evaluate_lpt(fewshot, &tuned, cfg, loc, model, sched, clf)?;
    let mut report = TuneReport {
        step_losses: Vec::with_capacity(cfg.steps),
        initial_lpt,
        final_lpt: initial_lpt,
    };
    if cfg.steps == 0 {
        return Ok((tuned, report));
    }
    let (n, d) = tuned.v_l.dim();
    let mut opt = Adam::<f32>::new(2 * n * d, cfg.learn_rate);
    for step in 0..cfg.steps {
        let shot = step % fewshot.len();
        let (x_clean, x_adv, gt) = &fewshot[shot];
        let seed = derive_seed(cfg.seed, &format!("tune-step-{step}"));
        let s = shot_objective(
            x_clean, x_adv, gt, &tuned, cfg, loc, model, sched, clf, seed, true,
        )?;
        report.step_losses.push(s.lpt);
        let dv_l = s.dv_l.expect("grads requested");
        let dv_r = s.dv_r.expect("grads requested");
        let mut flat: Vec<f32> = tuned.v_l.iter().cloned().chain(tuned.v_r.iter().cloned()).collect();
        let grads: Vec<f32> = dv_l.iter().cloned().chain(dv_r.iter().cloned()).collect();
        opt.step(&mut flat, &grads);
        for (dst, src) in tuned.v_l.iter_mut().zip(flat[..n * d].iter()) {
            *dst = *src;
        }
        for (dst, src) in tuned.v_r.iter_mut().zip(flat[n * d..].iter()) {
            *dst = *src;
        }
    }
    report.final_lpt = evaluate_lpt(fewshot, &tuned, cfg, loc, model, sched, clf)?;
    Ok((tuned, report))
}

// ---------------------------------------------------------------------------
// Domain-token textual inversion
// ---------------------------------------------------------------------------

/// A fixed token sequence with one learnable slot.
#[derive(Debug, Clone)]
pub struct TokenTemplate {
    pub tokens: Array2<f32>,
    pub slot_index: usize,
}

impl TokenTemplate {
    pub fn instantiate(&self, slot: &Array1<f32>) -> Array2<f32> {
        let mut out = self.tokens.clone();
        out.row_mut(self.slot_index).assign(slot);
        out
    }
}

/// Three fixed style-context templates ("... in the style of <slot>")
/// realized as seeded token sequences with the slot at the end.
pub fn default_templates(d: usize, seed: u64) -> Vec<TokenTemplate> {
    (0..3)
        .map(|i| {
            let mut rng = rng_for(seed, &format!("template-{i}"));
            let mut tokens = crate::nn::randn2::<f32>(&mut rng, (6, d), 0.2);
            tokens.row_mut(5).fill(0.0);
            TokenTemplate {
                tokens,
                slot_index: 5,
            }
        })
        .collect()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IdcReport {
    pub step_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Learn a domain-constraining token embedding by minimizing the frozen
/// model's noise-prediction objective on a handful of domain images.
pub fn learn_idc_token(
    infrared_images: &[Image],
    templates: &[TokenTemplate],
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<(Array1<f32>, IdcReport)> {
    if infrared_images.is_empty() {
        return Err(Error::contract("learn_idc_token: empty image list"));
    }
    if templates.is_empty() {
        return Err(Error::contract("learn_idc_token: no templates"));
    }
    let d = model.cfg.embed_dim;
    let mut rng = rng_for(seed, "idc-init");
    let mut v = Array1::<f32>::zeros(d);
    for x in v.iter_mut() {
        *x = 0.2 * f32::randn(&mut rng);
    }
    let rgb: Vec<Image> = infrared_images
        .iter()
        .map(|img| fit_channels(img, model.cfg.in_channels))
        .collect();

    let probe_loss = |tok: &Array1<f32>| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, img) in rgb.iter().enumerate() {
            for (j, frac) in [0.25f64, 0.5, 0.75].iter().enumerate() {
                let t = sched.step_for_ratio(*frac);
                let mut prng = rng_for(seed, &format!("idc-probe-{i}-{j}"));
                let noise = gaussian_like(img.dim(), &mut prng);
                let x_t = forward_diffuse(img, t, &noise, sched)?;
                let prompt = templates[0].instantiate(tok);
                let (eps_hat, _) = model.forward(&x_t, t, &prompt);
                total += (&eps_hat - &noise).mapv(|x| (x as f64).powi(2)).mean().unwrap();
                count += 1;
            }
        }
        Ok(total / count as f64)
    };

    let initial_loss = probe_loss(&v)?;
    let mut report = IdcReport {
        step_losses: Vec::with_capacity(steps),
        initial_loss,
        final_loss: initial_loss,
    };
    if steps == 0 {
        return Ok((v, report));
    }
    let mut opt = Adam::<f32>::new(d, 5e-3);
    use rand::Rng;
    let mut srng = rng_for(seed, "idc-train");
    for step in 0..steps {
        let img = &rgb[step % rgb.len()];
        let template = &templates[step % templates.len()];
        let t = srng.random_range(0..sched.steps);
        let noise = gaussian_like(img.dim(), &mut srng);
        let x_t = forward_diffuse(img, t, &noise, sched)?;
        let prompt = template.instantiate(&v);
        let (eps_hat, cache) = model.forward(&x_t, t, &prompt);
        let diff = &eps_hat - &noise;
        let numel = diff.len() as f64;
        report
            .step_losses
            .push(diff.mapv(|x| (x as f64).powi(2)).sum() / numel);
        let d_eps = diff.mapv(|x| x * (2.0 / numel) as f32);
        let (_, dprompt) = model.backward(&cache, &d_eps, None);
        let dv: Vec<f32> = dprompt.row(template.slot_index).iter().cloned().collect();
        let mut flat: Vec<f32> = v.iter().cloned().collect();
        opt.step(&mut flat, &dv);
        for (dst, src) in v.iter_mut().zip(flat.iter()) {
            *dst = *src;
        }
    }
    report.final_loss = probe_loss(&v)?;
    Ok((v, report))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn prompts_to_checkpoint(prompts: &LearnablePrompts) -> Checkpoint {
    let mut parameters = BTreeMap::new();
    parameters.insert("v_l".to_string(), prompts.v_l.mapv(|v| v as f64).into_dyn());
    parameters.insert("v_r".to_string(), prompts.v_r.mapv(|v| v as f64).into_dyn());
    if let Some(idc) = &prompts.idc {
        parameters.insert("idc".to_string(), idc.mapv(|v| v as f64).into_dyn());
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("tokens".into(), prompts.v_l.nrows().to_string());
    metadata.insert("dim".into(), prompts.v_l.ncols().to_string());
    Checkpoint {
        kind: CheckpointKind::Prompts,
        parameters,
        metadata,
    }
}

pub fn prompts_from_checkpoint(ckpt: &Checkpoint) -> Result<LearnablePrompts> {
    if ckpt.kind != CheckpointKind::Prompts {
        return Err(Error::format("checkpoint kind is not prompts"));
    }
    let get2 = |name: &str| -> Result<Array2<f32>> {
        let arr = ckpt
            .parameters
            .get(name)
            .ok_or_else(|| Error::format(format!("prompts checkpoint missing {name}")))?;
        let shape = (arr.shape()[0], arr.shape()[1]);
        Ok(Array2::from_shape_vec(shape, arr.iter().map(|&v| v as f32).collect()).unwrap())
    };
    let v_l = get2("v_l")?;
    let v_r = get2("v_r")?;
    let idc = ckpt.parameters.get("idc").map(|arr| {
        Array1::from_vec(arr.iter().map(|&v| v as f32).collect())
    });
    Ok(LearnablePrompts { v_l, v_r, idc })
}

pub fn idc_to_checkpoint(token: &Array1<f32>) -> Checkpoint {
    let mut parameters = BTreeMap::new();
    parameters.insert(
        "embedding".to_string(),
        token.mapv(|v| v as f64).into_dyn(),
    );
    Checkpoint {
        kind: CheckpointKind::IdcToken,
        parameters,
        metadata: BTreeMap::new(),
    }
}

pub fn idc_from_checkpoint(ckpt: &Checkpoint) -> Result<Array1<f32>> {
    if ckpt.kind != CheckpointKind::IdcToken {
        return Err(Error::format("checkpoint kind is not idc_token"));
    }
    let arr = ckpt
        .parameters
        .get("embedding")
        .ok_or_else(|| Error::format("idc checkpoint missing embedding"))?;
    Ok(Array1::from_vec(arr.iter().map(|&v| v as f32).collect()))
}

//! Patch localization: repeated prompt-vs-empty one-step denoising,
//! channel-summed absolute differencing, percentile normalization,
//! thresholding, and morphological mask refinement.

use crate::data_io::{Image, Mask};
use crate::diffusion::{forward_diffuse, gaussian_like, NoiseSchedule};
use crate::error::{Error, Result};
use crate::unet::{DenoiserCache, DenoiserModel};
use crate::util::{percentile, rng_for};
use ndarray::{Array2, Array3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    Percentile,
}

/// Nonnegative per-pixel anomaly map.
#[derive(Debug, Clone)]
pub struct DiffMap {
    pub values: Array2<f32>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizeMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct LocalizerConfig {
    /// Difference repeat count m.
    pub repeats: usize,
    /// Noising ratio t* in (0, 1).
    pub t_star: f64,
    /// Binarization threshold on the normalized map.
    pub theta: f32,
    pub gauss_size: usize,
    pub gauss_sigma: f32,
    pub dilate_radius: usize,
    pub dilate_iters: usize,
    /// Temperature of the soft threshold used during tuning and for
    /// straight-through gradients.
    pub soft_tau: f32,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            repeats: 3,
            t_star: 0.5,
            theta: 0.5,
            gauss_size: 5,
            gauss_sigma: 1.5,
            dilate_radius: 2,
            dilate_iters: 1,
            soft_tau: 0.1,
        }
    }
}

/// Per-repeat forward state kept for backpropagation.
pub struct AapRepeatTrace {
    pub cache_a: DenoiserCache<f32>,
    pub cache_b: DenoiserCache<f32>,
    /// Pre-clip x0 estimates (clip gates) and post-clip values (signs).
    pub x0a_raw: Image,
    pub x0b_raw: Image,
    pub x0a: Image,
    pub x0b: Image,
}

pub struct AapTrace {
    pub t: usize,
    pub repeats: Vec<AapRepeatTrace>,
}

/// Mean over m repeats of the channel-summed absolute difference between
/// prompt-guided and empty-prompt one-step x0 predictions from a shared
/// noisy image. Returned un-normalized.
pub fn aap_difference(
    x_adv: &Image,
    prompt_l: &Array2<f32>,
    cfg: &LocalizerConfig,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<DiffMap> {
    let (d, _) = aap_impl(x_adv, prompt_l, cfg, model, sched, seed, false)?;
    Ok(d)
}

/// As [`aap_difference`], keeping the forward state for gradients.
pub fn aap_difference_traced(
    x_adv: &Image,
    prompt_l: &Array2<f32>,
    cfg: &LocalizerConfig,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(DiffMap, AapTrace)> {
    let (d, t) = aap_impl(x_adv, prompt_l, cfg, model, sched, seed, true)?;
    Ok((d, t.expect("trace requested")))
}

#[allow(clippy::too_many_arguments)]
fn aap_impl(
    x_adv: &Image,
    prompt_l: &Array2<f32>,
    cfg: &LocalizerConfig,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    seed: u64,
    want_trace: bool,
) -> Result<(DiffMap, Option<AapTrace>)> {
    if cfg.repeats == 0 {
        return Err(Error::contract("aap_difference needs repeats >= 1"));
    }
    let (h, w, _) = x_adv.dim();
    let t = sched.step_for_ratio(cfg.t_star);
    let empty = Array2::<f32>::zeros(prompt_l.dim());
    let mut acc = Array2::<f32>::zeros((h, w));
    let mut rng = rng_for(seed, "aap");
    let (a, b) = sched.coeff32(t);
    let mut traces = Vec::new();
    for _ in 0..cfg.repeats {
        let noise = gaussian_like(x_adv.dim(), &mut rng);
        let x_t = forward_diffuse(x_adv, t, &noise, sched)?;
        let (eps_a, cache_a) = model.forward(&x_t, t, prompt_l);
        let (eps_b, cache_b) = model.forward(&x_t, t, &empty);
        let mut x0a_raw = Array3::<f32>::zeros(x_adv.dim());
        let mut x0b_raw = Array3::<f32>::zeros(x_adv.dim());
        ndarray::Zip::from(&mut x0a_raw)
            .and(&x_t)
            .and(&eps_a)
            .for_each(|o, &xt, &e| *o = (xt - b * e) / a);
        ndarray::Zip::from(&mut x0b_raw)
            .and(&x_t)
            .and(&eps_b)
            .for_each(|o, &xt, &e| *o = (xt - b * e) / a);
        let x0a = x0a_raw.mapv(|v| v.clamp(-0.5, 1.5));
        let x0b = x0b_raw.mapv(|v| v.clamp(-0.5, 1.5));
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0f32;
                for ci in 0..x_adv.dim().2 {
                    s += (x0a[[y, x, ci]] - x0b[[y, x, ci]]).abs();
                }
                acc[[y, x]] += s;
            }
        }
        if want_trace {
            traces.push(AapRepeatTrace {
                cache_a,
                cache_b,
                x0a_raw,
                x0b_raw,
                x0a,
                x0b,
            });
        }
    }
    acc.mapv_inplace(|v| v / cfg.repeats as f32);
    Ok((
        DiffMap {
            values: acc,
            normalization: Normalization::Raw,
        },
        want_trace.then(|| AapTrace { t, repeats: traces }),
    ))
}

/// Gradient of the raw difference map w.r.t. the localization prompt.
/// The empty-prompt branch is prompt-independent, so only the guided branch
/// contributes.
pub fn aap_backward_prompt(
    trace: &AapTrace,
    d_diff: &Array2<f32>,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
) -> Array2<f32> {
    let (a, b) = sched.coeff32(trace.t);
    let m = trace.repeats.len() as f32;
    let mut total: Option<Array2<f32>> = None;
    for rep in &trace.repeats {
        let mut dx0a = Array3::<f32>::zeros(rep.x0a.dim());
        let (h, w, ch) = dx0a.dim();
        for y in 0..h {
            for x in 0..w {
                let g = d_diff[[y, x]] / m;
                for ci in 0..ch {
                    let u = rep.x0a[[y, x, ci]] - rep.x0b[[y, x, ci]];
                    let sign = if u > 0.0 {
                        1.0
                    } else if u < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    let raw = rep.x0a_raw[[y, x, ci]];
                    let gate = if (-0.5..=1.5).contains(&raw) { 1.0 } else { 0.0 };
                    dx0a[[y, x, ci]] = g * sign * gate;
                }
            }
        }
        let d_eps = dx0a.mapv(|v| -b / a * v);
        let (_, dp) = model.backward(&rep.cache_a, &d_eps, None);
        total = Some(match total {
            Some(acc) => acc + &dp,
            None => dp,
        });
    }
    total.expect("aap trace has repeats")
}

/// Gradient of the raw difference map w.r.t. the input image (both branches
/// plus the shared noisy image), for adaptive attacks.
pub fn aap_backward_input(
    trace: &AapTrace,
    d_diff: &Array2<f32>,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
) -> Image {
    let (a, b) = sched.coeff32(trace.t);
    let m = trace.repeats.len() as f32;
    let first = &trace.repeats[0];
    let mut dx_adv = Array3::<f32>::zeros(first.x0a.dim());
    for rep in &trace.repeats {
        let (h, w, ch) = rep.x0a.dim();
        let mut dx0a = Array3::<f32>::zeros((h, w, ch));
        let mut dx0b = Array3::<f32>::zeros((h, w, ch));
        for y in 0..h {
            for x in 0..w {
                let g = d_diff[[y, x]] / m;
                for ci in 0..ch {
                    let u = rep.x0a[[y, x, ci]] - rep.x0b[[y, x, ci]];
                    let sign = if u > 0.0 {
                        1.0
                    } else if u < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    let gate_a = if (-0.5..=1.5).contains(&rep.x0a_raw[[y, x, ci]]) {
                        1.0
                    } else {
                        0.0
                    };
                    let gate_b = if (-0.5..=1.5).contains(&rep.x0b_raw[[y, x, ci]]) {
                        1.0
                    } else {
                        0.0
                    };
                    dx0a[[y, x, ci]] = g * sign * gate_a;
                    dx0b[[y, x, ci]] = -g * sign * gate_b;
                }
            }
        }
        // x0 = (x_t - b eps)/a: through eps and through x_t directly
        for (dx0, cache) in [(&dx0a, &rep.cache_a), (&dx0b, &rep.cache_b)] {
            let d_eps = dx0.mapv(|v| -b / a * v);
            let (mut dxt, _) = model.backward(cache, &d_eps, None);
            dxt.zip_mut_with(dx0, |d, &g| *d = *d + g / a);
            // x_t = a x_adv + b noise
            dx_adv.zip_mut_with(&dxt, |d, &g| *d = *d + a * g);
        }
    }
    dx_adv
}

/// Divide by the 99th-percentile value (when positive) and clip to [0, 1].
pub fn normalize_diff(d: &DiffMap) -> DiffMap {
    let vals: Vec<f32> = d.values.iter().cloned().collect();
    let p99 = percentile(&vals, 0.99);
    let values = if p99 > 0.0 {
        d.values.mapv(|v| (v / p99).clamp(0.0, 1.0))
    } else {
        d.values.clone()
    };
    DiffMap {
        values,
        normalization: Normalization::Percentile,
    }
}

/// 99th-percentile value of a raw map (the normalizer's stop-gradient
/// constant, exposed for surrogate backward passes).
pub fn diff_p99(d: &DiffMap) -> f32 {
    let vals: Vec<f32> = d.values.iter().cloned().collect();
    percentile(&vals, 0.99)
}

/// Hard or soft thresholding of a normalized map.
pub fn binarize(d: &DiffMap, theta: f32, mode: BinarizeMode, soft_tau: f32) -> Result<Mask> {
    if !(0.0 < theta && theta < 1.0) {
        return Err(Error::contract(format!("theta must be in (0,1), got {theta}")));
    }
    Ok(match mode {
        BinarizeMode::Hard => d.values.mapv(|v| if v > theta { 1.0 } else { 0.0 }),
        BinarizeMode::Soft => d
            .values
            .mapv(|v| 1.0 / (1.0 + (-(v - theta) / soft_tau).exp())),
    })
}

fn gaussian_kernel(size: usize, sigma: f32) -> Vec<f32> {
    let half = (size / 2) as isize;
    let mut k: Vec<f32> = (-half..=half)
        .map(|i| (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i - 1) as usize
    } else if i as usize >= n {
        2 * n - 1 - i as usize
    } else {
        i as usize
    }
}

/// Separable Gaussian blur with reflect borders.
pub fn gaussian_blur(mask: &Array2<f32>, size: usize, sigma: f32) -> Array2<f32> {
    let k = gaussian_kernel(size, sigma);
    let half = (size / 2) as isize;
    let (h, w) = mask.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let xx = reflect(x as isize + j as isize - half, w);
                acc += kv * mask[[y, xx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let yy = reflect(y as isize + j as isize - half, h);
                acc += kv * tmp[[yy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Binary dilation with a disk structuring element (dy^2 + dx^2 <= r^2).
pub fn dilate(mask: &Mask, radius: usize, iters: usize) -> Mask {
    let r2 = (radius * radius) as isize;
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r2 {
                offsets.push((dy, dx));
            }
        }
    }
    let (h, w) = mask.dim();
    let mut cur = mask.clone();
    for _ in 0..iters {
        let mut next = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                if cur[[y, x]] > 0.0 {
                    for &(dy, dx) in &offsets {
                        let yy = y as isize + dy;
                        let xx = x as isize + dx;
                        if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                            next[[yy as usize, xx as usize]] = 1.0;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Gaussian-smooth, re-threshold at 0.5, then dilate. The result is a
/// superset of the re-thresholded smoothed mask.
pub fn refine_mask(raw: &Mask, cfg: &LocalizerConfig) -> Mask {
    let blurred = gaussian_blur(raw, cfg.gauss_size, cfg.gauss_sigma);
    let rethresh = blurred.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
    dilate(&rethresh, cfg.dilate_radius, cfg.dilate_iters)
}

/// Full localization chain; returns the refined hard mask and its area
/// fraction.
pub fn localize(
    x_adv: &Image,
    prompt_l: &Array2<f32>,
    cfg: &LocalizerConfig,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(Mask, f64)> {
    let raw = aap_difference(x_adv, prompt_l, cfg, model, sched, seed)?;
    let norm = normalize_diff(&raw);
    let hard = binarize(&norm, cfg.theta, BinarizeMode::Hard, cfg.soft_tau)?;
    let refined = refine_mask(&hard, cfg);
    let area = refined.iter().map(|&v| v as f64).sum::<f64>() / refined.len() as f64;
    Ok((refined, area))
}

/// Intersection-over-union of two hard masks.
pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let xa = x > 0.5;
        let yb = y > 0.5;
        if xa && yb {
            inter += 1;
        }
        if xa || yb {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

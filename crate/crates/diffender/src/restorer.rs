//! Patch restoration and the end-to-end gated defense: localize, and only
//! when the detected area crosses the gate does the expensive restoration
//! run.

use crate::data_io::{Image, Mask};
use crate::diffusion::{inpaint, NoiseSchedule};
use crate::error::{Error, Result};
use crate::localizer::{
    aap_backward_input, aap_difference_traced, diff_p99, refine_mask, BinarizeMode, DiffMap,
    LocalizerConfig, Normalization,
};
use crate::tuner::{fit_channels, LearnablePrompts};
use crate::unet::DenoiserModel;
use crate::util::derive_seed;
use ndarray::Array2;
use std::collections::BTreeMap;
use std::time::Instant;

/// Outcome of one defense invocation.
#[derive(Debug, Clone)]
pub struct DefenseOutput {
    pub restored: Image,
    pub mask: Mask,
    /// Whether restoration ran; when false the output is the input, exactly.
    pub gated: bool,
    pub timings: BTreeMap<String, f64>,
}

/// Regenerate the masked region, conditioned on the restoration prompt.
/// Pixels outside the mask stay bit-equal to the input.
pub fn restore(
    x_adv: &Image,
    mask: &Mask,
    prompt_r: &ndarray::Array2<f32>,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    if steps == 0 {
        return Err(Error::contract("restore needs steps >= 1"));
    }
    inpaint(x_adv, mask, prompt_r, steps, model, sched, seed)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct DefenseConfig {
    pub localizer: LocalizerConfig,
    /// Reverse steps for restoration.
    pub steps: usize,
    /// Mask-area fraction below which restoration is skipped.
    pub gate_area: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            localizer: LocalizerConfig::default(),
            steps: 250,
            gate_area: 0.005,
        }
    }
}

/// Localize, gate on detected area, restore. Deterministic given the seed.
/// Inputs narrower than the model (grayscale against an RGB backbone) are
/// channel-replicated on the way in; the caller collapses on the way out.
pub fn defend(
    x: &Image,
    prompts: &LearnablePrompts,
    cfg: &DefenseConfig,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<DefenseOutput> {
    if !(0.0..1.0).contains(&cfg.gate_area) {
        return Err(Error::contract(format!(
            "gate_area must be in [0,1), got {}",
            cfg.gate_area
        )));
    }
    let x_model = fit_channels(x, model.cfg.in_channels);
    let t0 = Instant::now();
    let (mask, area) = crate::localizer::localize(
        &x_model,
        &prompts.prompt_l(),
        &cfg.localizer,
        model,
        sched,
        derive_seed(seed, "defend-localize"),
    )?;
    let t_loc = t0.elapsed().as_secs_f64();
    let mut timings = BTreeMap::new();
    timings.insert("localize".to_string(), t_loc);

    if area < cfg.gate_area {
        timings.insert("restore".to_string(), 0.0);
        return Ok(DefenseOutput {
            restored: x.clone(),
            mask,
            gated: false,
            timings,
        });
    }
    let t1 = Instant::now();
    let restored_model = restore(
        &x_model,
        &mask,
        &prompts.prompt_r(),
        model,
        sched,
        cfg.steps,
        derive_seed(seed, "defend-restore"),
    )?;
    timings.insert("restore".to_string(), t1.elapsed().as_secs_f64());
    let restored = if x.dim().2 == model.cfg.in_channels {
        restored_model
    } else {
        // collapse the replicated channels, then re-composite so pixels
        // outside the mask stay bit-equal to the input
        let mut collapsed = collapse_channels(&restored_model);
        let (h, w, ch) = x.dim();
        for y in 0..h {
            for xx in 0..w {
                if mask[[y, xx]] == 0.0 {
                    for ci in 0..ch {
                        collapsed[[y, xx, ci]] = x[[y, xx, ci]];
                    }
                }
            }
        }
        collapsed
    };
    Ok(DefenseOutput {
        restored,
        mask,
        gated: true,
        timings,
    })
}

/// Mean over channels, producing a single-channel image.
pub fn collapse_channels(x: &Image) -> Image {
    let (h, w, ch) = x.dim();
    let mut out = ndarray::Array3::<f32>::zeros((h, w, 1));
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0f32;
            for ci in 0..ch {
                s += x[[y, xx, ci]];
            }
            out[[y, xx, 0]] = s / ch as f32;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Adaptive-attack view of the defense
// ---------------------------------------------------------------------------

/// A defense the adaptive attack can differentiate through: a true forward
/// pass plus a surrogate vector-Jacobian product.
pub trait AdaptiveTarget {
    fn forward(&self, x: &Image, seed: u64) -> Result<Image>;
    /// Surrogate gradient of the defended output w.r.t. the input.
    fn vjp(&self, x: &Image, d_out: &Image, seed: u64) -> Result<Image>;
}

/// The trivial target: no defense at all (backward is exact).
pub struct IdentityDefense;

impl AdaptiveTarget for IdentityDefense {
    fn forward(&self, x: &Image, _seed: u64) -> Result<Image> {
        Ok(x.clone())
    }
    fn vjp(&self, _x: &Image, d_out: &Image, _seed: u64) -> Result<Image> {
        Ok(d_out.clone())
    }
}

/// A defense whose backward pass is approximated by the identity (the
/// classic smoothing/compression/purification surrogate).
pub struct IdentityBackward<F: Fn(&Image, u64) -> Result<Image>>(pub F);

impl<F: Fn(&Image, u64) -> Result<Image>> AdaptiveTarget for IdentityBackward<F> {
    fn forward(&self, x: &Image, seed: u64) -> Result<Image> {
        (self.0)(x, seed)
    }
    fn vjp(&self, _x: &Image, d_out: &Image, _seed: u64) -> Result<Image> {
        Ok(d_out.clone())
    }
}

/// The gated localize-restore defense as an adaptive target. Forward is the
/// true pipeline; backward treats restoration as the identity and the
/// binarize/refine chain as its soft straight-through surrogate.
pub struct DiffenderTarget<'a> {
    pub prompts: &'a LearnablePrompts,
    pub cfg: &'a DefenseConfig,
    pub model: &'a DenoiserModel<f32>,
    pub sched: &'a NoiseSchedule,
}

impl AdaptiveTarget for DiffenderTarget<'_> {
    fn forward(&self, x: &Image, seed: u64) -> Result<Image> {
        Ok(defend(x, self.prompts, self.cfg, self.model, self.sched, seed)?.restored)
    }

    fn vjp(&self, x: &Image, d_out: &Image, seed: u64) -> Result<Image> {
        let loc = &self.cfg.localizer;
        let x_model = fit_channels(x, self.model.cfg.in_channels);
        let (raw, trace) = aap_difference_traced(
            &x_model,
            &self.prompts.prompt_l(),
            loc,
            self.model,
            self.sched,
            derive_seed(seed, "defend-localize"),
        )?;
        let p99 = diff_p99(&raw);
        // replay the gating decision of the true forward pass
        let norm = DiffMap {
            values: if p99 > 0.0 {
                raw.values.mapv(|v| (v / p99).clamp(0.0, 1.0))
            } else {
                raw.values.clone()
            },
            normalization: Normalization::Percentile,
        };
        let hard = crate::localizer::binarize(&norm, loc.theta, BinarizeMode::Hard, loc.soft_tau)?;
        let refined = refine_mask(&hard, loc);
        let area = refined.iter().map(|&v| v as f64).sum::<f64>() / refined.len() as f64;
        let gated = area >= self.cfg.gate_area;

        // base term: restoration (or the identity path) backward = identity
        let d_out_model = fit_channels(d_out, self.model.cfg.in_channels);
        let mut dx = d_out_model.clone();

        if gated && p99 > 0.0 {
            let restored = restore(
                &x_model,
                &refined,
                &self.prompts.prompt_r(),
                self.model,
                self.sched,
                self.cfg.steps,
                derive_seed(seed, "defend-restore"),
            )?;
            // mask-path surrogate: out = m x_r + (1 - m) x with soft m
            let (h, w, ch) = x_model.dim();
            let mut d_diff = Array2::<f32>::zeros((h, w));
            for y in 0..h {
                for xx in 0..w {
                    let mut wsum = 0.0f32;
                    for ci in 0..ch {
                        wsum += d_out_model[[y, xx, ci]]
                            * (restored[[y, xx, ci]] - x_model[[y, xx, ci]]);
                    }
                    let nv = norm.values[[y, xx]];
                    let s = 1.0 / (1.0 + (-(nv - loc.theta) / loc.soft_tau).exp());
                    let gate = if raw.values[[y, xx]] < p99 { 1.0 } else { 0.0 };
                    d_diff[[y, xx]] = wsum * s * (1.0 - s) / loc.soft_tau / p99 * gate;
                }
            }
            let mask_term = aap_backward_input(&trace, &d_diff, self.model, self.sched);
            dx.zip_mut_with(&mask_term, |d, &g| *d = *d + g);
        }
        // collapse back to the caller's channel count if it was replicated
        if x.dim().2 != self.model.cfg.in_channels {
            let (h, w, _) = x.dim();
            let mut out = ndarray::Array3::<f32>::zeros((h, w, 1));
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0f32;
                    for ci in 0..dx.dim().2 {
                        s += dx[[y, xx, ci]];
                    }
                    out[[y, xx, 0]] = s;
                }
            }
            return Ok(out);
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::nn::Scalar;
    use crate::unet::DenoiserConfig;
    use crate::util::rng_for;

    fn tiny_world(seed: u64) -> (DenoiserModel<f32>, NoiseSchedule) {
        let cfg = DenoiserConfig {
            in_channels: 1,
            image_size: 16,
            base_channels: 8,
            embed_dim: 16,
            time_steps: 50,
            num_classes: 2,
            seed,
        };
        let mut model = DenoiserModel::<f32>::new(cfg);
        let mut rng = rng_for(seed, "restorer-world");
        let mut flat = model.flat_params();
        for v in flat.iter_mut() {
            *v += 0.05 * f32::randn(&mut rng);
        }
        model.assign_flat(&flat);
        (model, make_schedule(50, ScheduleKind::Linear).unwrap())
    }

    #[test]
    fn restore_mask_contracts() {
        let (model, sched) = tiny_world(1);
        let mut rng = rng_for(2, "restore-test");
        let x = crate::diffusion::gaussian_like((16, 16, 1), &mut rng)
            .mapv(|v| (v * 0.1 + 0.5).clamp(0.0, 1.0));
        let prompts = LearnablePrompts::new(4, 16, 3);
        // empty mask: unchanged
        let empty = Mask::zeros((16, 16));
        let out = restore(&x, &empty, &prompts.prompt_r(), &model, &sched, 4, 7).unwrap();
        assert_eq!(out, x);
        // full mask: equals a prompt-conditioned sample composited everywhere
        let full = Mask::from_elem((16, 16), 1.0);
        let out = restore(&x, &full, &prompts.prompt_r(), &model, &sched, 4, 7).unwrap();
        let direct =
            crate::diffusion::inpaint(&x, &full, &prompts.prompt_r(), 4, &model, &sched, 7)
                .unwrap();
        assert_eq!(out, direct);
        // partial mask: outside pixels bit-equal
        let mut m = Mask::zeros((16, 16));
        for y in 4..8 {
            for xx in 4..8 {
                m[[y, xx]] = 1.0;
            }
        }
        let out = restore(&x, &m, &prompts.prompt_r(), &model, &sched, 4, 9).unwrap();
        for y in 0..16 {
            for xx in 0..16 {
                if m[[y, xx]] == 0.0 {
                    assert_eq!(out[[y, xx, 0]], x[[y, xx, 0]]);
                }
            }
        }
        assert!(restore(&x, &m, &prompts.prompt_r(), &model, &sched, 0, 0).is_err());
    }

    #[test]
    fn prompt_agnostic_model_never_gates() {
        let (mut model, sched) = tiny_world(4);
        model.neutralize_prompt_conditioning();
        let prompts = LearnablePrompts::new(4, 16, 5);
        let cfg = DefenseConfig {
            steps: 3,
            ..Default::default()
        };
        let mut rng = rng_for(6, "nogate");
        let x = crate::diffusion::gaussian_like((16, 16, 1), &mut rng)
            .mapv(|v| (v * 0.1 + 0.5).clamp(0.0, 1.0));
        let out = defend(&x, &prompts, &cfg, &model, &sched, 11).unwrap();
        assert!(!out.gated);
        assert_eq!(out.restored, x, "ungated output is the input, exactly");
        assert!(out.mask.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_always_restores_and_determinism() {
        let (model, sched) = tiny_world(7);
        let prompts = LearnablePrompts::new(4, 16, 8);
        let cfg = DefenseConfig {
            steps: 3,
            gate_area: 0.0,
            ..Default::default()
        };
        let mut rng = rng_for(9, "gate0");
        let x = crate::diffusion::gaussian_like((16, 16, 1), &mut rng)
            .mapv(|v| (v * 0.1 + 0.5).clamp(0.0, 1.0));
        let a = defend(&x, &prompts, &cfg, &model, &sched, 13).unwrap();
        let b = defend(&x, &prompts, &cfg, &model, &sched, 13).unwrap();
        assert!(a.gated, "gate_area 0 always restores");
        assert_eq!(a.restored, b.restored);
        assert_eq!(a.mask, b.mask);
        // outside-mask pixels never modified
        for y in 0..16 {
            for xx in 0..16 {
                if a.mask[[y, xx]] == 0.0 {
                    assert_eq!(a.restored[[y, xx, 0]], x[[y, xx, 0]]);
                }
            }
        }
        let bad = DefenseConfig {
            gate_area: 1.0,
            ..Default::default()
        };
        assert!(defend(&x, &prompts, &bad, &model, &sched, 0).is_err());
    }

    #[test]
    fn identity_target_is_exact() {
        let t = IdentityDefense;
        let mut rng = rng_for(10, "ident");
        let x = crate::diffusion::gaussian_like((8, 8, 1), &mut rng);
        let g = crate::diffusion::gaussian_like((8, 8, 1), &mut rng);
        assert_eq!(t.forward(&x, 0).unwrap(), x);
        assert_eq!(t.vjp(&x, &g, 0).unwrap(), g);
    }

    #[test]
    fn diffender_target_forward_matches_defend() {
        let (model, sched) = tiny_world(11);
        let prompts = LearnablePrompts::new(4, 16, 12);
        let cfg = DefenseConfig {
            steps: 3,
            gate_area: 0.0,
            ..Default::default()
        };
        let target = DiffenderTarget {
            prompts: &prompts,
            cfg: &cfg,
            model: &model,
            sched: &sched,
        };
        let mut rng = rng_for(13, "dt");
        let x = crate::diffusion::gaussian_like((16, 16, 1), &mut rng)
            .mapv(|v| (v * 0.1 + 0.5).clamp(0.0, 1.0));
        let via_target = target.forward(&x, 21).unwrap();
        let via_defend = defend(&x, &prompts, &cfg, &model, &sched, 21).unwrap();
        assert_eq!(via_target, via_defend.restored, "surrogate changes only backward");
        // vjp runs and returns the right shape
        let g = crate::diffusion::gaussian_like((16, 16, 1), &mut rng);
        let dx = target.vjp(&x, &g, 21).unwrap();
        assert_eq!(dx.dim(), x.dim());
    }
}

//! Reference defenses: JPEG round-trip, median smoothing, and whole-image
//! diffusion purification.

use crate::data_io::Image;
use crate::diffusion::{
    forward_diffuse, gaussian_like, invert_x0, reverse_time_grid_from, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::unet::DenoiserModel;
use crate::util::rng_for;
use ndarray::Array3;

/// Encode-decode round trip at the given quality.
pub fn baseline_jpeg(x: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::contract(format!(
            "jpeg quality must be in [1,100], got {quality}"
        )));
    }
    let (h, w, ch) = x.dim();
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut encoded = Vec::new();
    {
        let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, quality);
        if ch == 1 {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for (px, py, p) in buf.enumerate_pixels_mut() {
                p.0[0] = to_u8(x[[py as usize, px as usize, 0]]);
            }
            enc.encode_image(&buf)?;
        } else {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (px, py, p) in buf.enumerate_pixels_mut() {
                for ci in 0..3 {
                    p.0[ci] = to_u8(x[[py as usize, px as usize, ci]]);
                }
            }
            enc.encode_image(&buf)?;
        }
    }
    let decoded = image::load_from_memory(&encoded)?;
    let mut out = Array3::<f32>::zeros((h, w, ch));
    if ch == 1 {
        let gray = decoded.to_luma8();
        for (px, py, p) in gray.enumerate_pixels() {
            out[[py as usize, px as usize, 0]] = p.0[0] as f32 / 255.0;
        }
    } else {
        let rgb = decoded.to_rgb8();
        for (px, py, p) in rgb.enumerate_pixels() {
            for ci in 0..3 {
                out[[py as usize, px as usize, ci]] = p.0[ci] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Per-channel median filter with reflect borders.
pub fn baseline_smoothing(x: &Image, window: usize) -> Result<Image> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::contract(format!(
            "smoothing window must be odd, got {window}"
        )));
    }
    let (h, w, ch) = x.dim();
    let half = (window / 2) as isize;
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i as usize >= n {
            2 * n - 1 - i as usize
        } else {
            i as usize
        }
    };
    let mut out = Array3::<f32>::zeros((h, w, ch));
    let mut vals = Vec::with_capacity(window * window);
    for y in 0..h {
        for xx in 0..w {
            for ci in 0..ch {
                vals.clear();
                for dy in -half..=half {
                    for dx in -half..=half {
                        vals.push(
                            x[[reflect(y as isize + dy, h), reflect(xx as isize + dx, w), ci]],
                        );
                    }
                }
                vals.sort_by(|a, b| a.total_cmp(b));
                out[[y, xx, ci]] = vals[vals.len() / 2];
            }
        }
    }
    Ok(out)
}

/// Whole-image purification: diffuse to the ratio t*, then reverse-denoise
/// with the empty prompt over a strided grid. No mask, no localization.
pub fn baseline_purify(
    x: &Image,
    t_star: f64,
    model: &DenoiserModel<f32>,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    if steps == 0 {
        return Err(Error::contract("purify needs steps >= 1"));
    }
    let x_model = crate::tuner::fit_channels(x, model.cfg.in_channels);
    let mut rng = rng_for(seed, "purify");
    let t0 = sched.step_for_ratio(t_star);
    let prompt = model.empty_prompt();
    let n0 = gaussian_like(x_model.dim(), &mut rng);
    let mut cur = forward_diffuse(&x_model, t0, &n0, sched)?;
    let grid = reverse_time_grid_from(t0, steps);
    let mut x0_hat = cur.clone();
    for (i, &t) in grid.iter().enumerate() {
        let (eps, _) = model.forward(&cur, t, &prompt);
        x0_hat = invert_x0(&cur, &eps, t, sched);
        if let Some(&tn) = grid.get(i + 1) {
            let xi = gaussian_like(x_model.dim(), &mut rng);
            cur = forward_diffuse(&x0_hat, tn, &xi, sched)?;
        }
    }
    let mut out = x0_hat.mapv(|v| v.clamp(0.0, 1.0));
    if x.dim().2 != model.cfg.in_channels {
        out = crate::restorer::collapse_channels(&out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::unet::DenoiserConfig;
    use crate::util::psnr;

    #[test]
    fn jpeg_quality_contracts() {
        // a smooth gradient compresses nearly losslessly at quality 100
        let x = Array3::from_shape_fn((32, 32, 3), |(y, xx, c)| {
            0.2 + 0.5 * (y as f32 / 32.0) + 0.1 * (xx as f32 / 32.0) + 0.05 * c as f32
        });
        let hi = baseline_jpeg(&x, 100).unwrap();
        assert_eq!(hi.dim(), x.dim());
        assert!(psnr(&hi, &x) >= 40.0, "psnr {}", psnr(&hi, &x));
        let lo = baseline_jpeg(&x, 10).unwrap();
        let hi90 = baseline_jpeg(&x, 90).unwrap();
        assert!(psnr(&lo, &x) < psnr(&hi90, &x), "monotone degradation");
        assert!(baseline_jpeg(&x, 0).is_err());
        assert!(baseline_jpeg(&x, 101).is_err());
    }

    #[test]
    fn smoothing_contracts() {
        let c = Array3::<f32>::from_elem((8, 8, 3), 0.5);
        assert_eq!(baseline_smoothing(&c, 3).unwrap(), c, "constant unchanged");
        // single salt pixel removed: median of 9 values with one outlier
        let mut salt = Array3::<f32>::from_elem((8, 8, 1), 0.2);
        salt[[4, 4, 0]] = 1.0;
        let sm = baseline_smoothing(&salt, 3).unwrap();
        assert_eq!(sm[[4, 4, 0]], 0.2);
        // idempotent on constant regions
        let twice = baseline_smoothing(&baseline_smoothing(&c, 3).unwrap(), 3).unwrap();
        assert_eq!(twice, c);
        assert!(baseline_smoothing(&c, 4).is_err());
    }

    #[test]
    fn purify_runs_and_is_deterministic() {
        let cfg = DenoiserConfig {
            in_channels: 1,
            image_size: 16,
            base_channels: 8,
            embed_dim: 16,
            time_steps: 50,
            num_classes: 2,
            seed: 3,
        };
        let model = DenoiserModel::<f32>::new(cfg);
        let sched = make_schedule(50, ScheduleKind::Linear).unwrap();
        let x = Array3::from_shape_fn((16, 16, 1), |(y, xx, _)| {
            0.3 + 0.4 * ((y + xx) as f32 / 32.0)
        });
        let a = baseline_purify(&x, 0.5, &model, &sched, 5, 7).unwrap();
        let b = baseline_purify(&x, 0.5, &model, &sched, 5, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(baseline_purify(&x, 0.5, &model, &sched, 0, 7).is_err());
    }
}

//! Tuning losses in f64 with hand-derived gradients: mask cross-entropy,
//! L1, channel-normalized perceptual distance, local-uniformity, SSIM,
//! Sobel edge maps, and Dice-based edge-aware losses.

use crate::error::{Error, Result};
use crate::victims::Classifier;
use ndarray::{Array2, Array3};

const CE_CLAMP: f64 = 1e-6;

fn check_same_shape2(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn check_same_shape3(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mask cross-entropy
// ---------------------------------------------------------------------------

/// Per-pixel binary cross-entropy between a hard target mask and a soft
/// estimate, mean-reduced. The estimate is clamped to [1e-6, 1 - 1e-6].
pub fn loss_ce(m: &Array2<f64>, m_soft: &Array2<f64>) -> Result<f64> {
    check_same_shape2(m, m_soft)?;
    let n = m.len() as f64;
    let mut total = 0.0;
    for (&t, &p) in m.iter().zip(m_soft.iter()) {
        let p = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(total / n)
}

/// Gradient of [`loss_ce`] w.r.t. the soft estimate (zero where the clamp
/// is active).
pub fn loss_ce_grad(m: &Array2<f64>, m_soft: &Array2<f64>) -> Result<Array2<f64>> {
    check_same_shape2(m, m_soft)?;
    let n = m.len() as f64;
    let mut g = Array2::<f64>::zeros(m.dim());
    for ((gv, &t), &p_raw) in g.iter_mut().zip(m.iter()).zip(m_soft.iter()) {
        if (CE_CLAMP..=1.0 - CE_CLAMP).contains(&p_raw) {
            *gv = (-t / p_raw + (1.0 - t) / (1.0 - p_raw)) / n;
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// L1
// ---------------------------------------------------------------------------

/// Mean absolute difference.
pub fn loss_l1(x_r: &Array3<f64>, x: &Array3<f64>) -> Result<f64> {
    check_same_shape3(x_r, x)?;
    Ok((x_r - x).mapv(f64::abs).mean().unwrap_or(0.0))
}

/// Gradient of [`loss_l1`] w.r.t. `x_r` (sign / N; zero at ties).
pub fn loss_l1_grad(x_r: &Array3<f64>, x: &Array3<f64>) -> Result<Array3<f64>> {
    check_same_shape3(x_r, x)?;
    let n = x.len() as f64;
    let mut g = Array3::<f64>::zeros(x.dim());
    for ((gv, &a), &b) in g.iter_mut().zip(x_r.iter()).zip(x.iter()) {
        *gv = if a > b {
            1.0 / n
        } else if a < b {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Perceptual distance
// ---------------------------------------------------------------------------

const NORM_EPS: f64 = 1e-10;

fn channel_normalize(feat: &Array3<f64>) -> Array3<f64> {
    let (h, w, ch) = feat.dim();
    let mut out = Array3::<f64>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            let mut ss = 0.0;
            for ci in 0..ch {
                ss += feat[[y, x, ci]] * feat[[y, x, ci]];
            }
            let norm = (ss + NORM_EPS).sqrt();
            for ci in 0..ch {
                out[[y, x, ci]] = feat[[y, x, ci]] / norm;
            }
        }
    }
    out
}

/// Sum over feature taps of the mean squared distance between channel-unit-
/// normalized activations (uniform layer weights).
pub fn perceptual_distance(
    x_r: &Array3<f64>,
    x: &Array3<f64>,
    clf: &Classifier,
) -> Result<f64> {
    check_same_shape3(x_r, x)?;
    let (_, cache_r) = clf.forward(x_r);
    let (_, cache_c) = clf.forward(x);
    let mut total = 0.0;
    for idx in 0..crate::victims::TAP_NAMES.len() {
        let yr = channel_normalize(clf.tap_output(&cache_r, idx));
        let yc = channel_normalize(clf.tap_output(&cache_c, idx));
        let (h, w, _) = yr.dim();
        total += (&yr - &yc).mapv(|v| v * v).sum() / (h * w) as f64;
    }
    Ok(total)
}

/// Gradient of [`perceptual_distance`] w.r.t. `x_r`.
pub fn perceptual_distance_grad(
    x_r: &Array3<f64>,
    x: &Array3<f64>,
    clf: &Classifier,
) -> Result<Array3<f64>> {
    check_same_shape3(x_r, x)?;
    let (_, cache_r) = clf.forward(x_r);
    let (_, cache_c) = clf.forward(x);
    let mut tap_grads = Vec::new();
    for idx in 0..crate::victims::TAP_NAMES.len() {
        let feat = clf.tap_output(&cache_r, idx);
        let yr = channel_normalize(feat);
        let yc = channel_normalize(clf.tap_output(&cache_c, idx));
        let (h, w, ch) = yr.dim();
        let scale = 2.0 / (h * w) as f64;
        // d loss / d yr_hat, then through the normalization
        let mut dfeat = Array3::<f64>::zeros((h, w, ch));
        for y in 0..h {
            for xx in 0..w {
                let mut ss = 0.0;
                for ci in 0..ch {
                    ss += feat[[y, xx, ci]] * feat[[y, xx, ci]];
                }
                let norm = (ss + NORM_EPS).sqrt();
                // g = d loss / d yhat; d yhat_j / d y_i = delta_ij / n - y_i y_j / n^3
                let mut g_dot_y = 0.0;
                for ci in 0..ch {
                    let g = scale * (yr[[y, xx, ci]] - yc[[y, xx, ci]]);
                    g_dot_y += g * feat[[y, xx, ci]];
                }
                for ci in 0..ch {
                    let g = scale * (yr[[y, xx, ci]] - yc[[y, xx, ci]]);
                    dfeat[[y, xx, ci]] =
                        g / norm - feat[[y, xx, ci]] * g_dot_y / (norm * norm * norm);
                }
            }
        }
        tap_grads.push((idx, dfeat));
    }
    let zero_logits = ndarray::Array1::<f64>::zeros(clf.cfg.num_classes);
    Ok(clf.backward(&cache_r, &zero_logits, Some(&tap_grads), None))
}

// ---------------------------------------------------------------------------
// Local uniformity
// ---------------------------------------------------------------------------

fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i - 1) as usize
    } else if i as usize >= n {
        2 * n - 1 - i as usize
    } else {
        i as usize
    }
}

fn reflect_pad(img: &Array2<f64>, pad: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut out = Array2::<f64>::zeros((h + 2 * pad, w + 2 * pad));
    for y in 0..h + 2 * pad {
        for x in 0..w + 2 * pad {
            out[[y, x]] = img[[
                reflect(y as isize - pad as isize, h),
                reflect(x as isize - pad as isize, w),
            ]];
        }
    }
    out
}

/// Mean over all pixels of the population standard deviation of the k x k
/// neighborhood (reflect-padded). Computed with summed-area tables.
pub fn local_uniformity(i_r: &Array2<f64>, k: usize) -> Result<f64> {
    if k % 2 == 0 || k < 3 {
        return Err(Error::contract(format!("window k must be odd >= 3, got {k}")));
    }
    let (h, w) = i_r.dim();
    let pad = k / 2;
    let p = reflect_pad(i_r, pad);
    let (ph, pw) = p.dim();
    // summed-area tables for values and squares
    let mut sat = Array2::<f64>::zeros((ph + 1, pw + 1));
    let mut sat2 = Array2::<f64>::zeros((ph + 1, pw + 1));
    for y in 0..ph {
        for x in 0..pw {
            let v = p[[y, x]];
            sat[[y + 1, x + 1]] = v + sat[[y, x + 1]] + sat[[y + 1, x]] - sat[[y, x]];
            sat2[[y + 1, x + 1]] = v * v + sat2[[y, x + 1]] + sat2[[y + 1, x]] - sat2[[y, x]];
        }
    }
    let area = (k * k) as f64;
    let window = |tbl: &Array2<f64>, y: usize, x: usize| -> f64 {
        tbl[[y + k, x + k]] + tbl[[y, x]] - tbl[[y, x + k]] - tbl[[y + k, x]]
    };
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let s = window(&sat, y, x);
            let s2 = window(&sat2, y, x);
            let mean = s / area;
            // cancellation in the table subtraction leaves ~1e-17 residue
            // on constant windows; snap those to an exact zero
            let var = s2 / area - mean * mean;
            let var = if var < 1e-12 { 0.0 } else { var };
            total += var.sqrt();
        }
    }
    Ok(total / (h * w) as f64)
}

/// Gradient of [`local_uniformity`] w.r.t. the image (zero for windows with
/// zero variance).
pub fn local_uniformity_grad(i_r: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    if k % 2 == 0 || k < 3 {
        return Err(Error::contract(format!("window k must be odd >= 3, got {k}")));
    }
    let (h, w) = i_r.dim();
    let pad = k / 2;
    let p = reflect_pad(i_r, pad);
    let area = (k * k) as f64;
    let n_pix = (h * w) as f64;
    let mut grad = Array2::<f64>::zeros((h, w));
    for wy in 0..h {
        for wx in 0..w {
            // window covers padded coords [wy, wy+k) x [wx, wx+k)
            let mut s = 0.0;
            let mut s2 = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    let v = p[[wy + dy, wx + dx]];
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / area;
            let var = s2 / area - mean * mean;
            if var < 1e-12 {
                continue;
            }
            let std = var.sqrt();
            // d std / d p_uv = (p_uv - mean) / (area * std)
            for dy in 0..k {
                for dx in 0..k {
                    let v = p[[wy + dy, wx + dx]];
                    let contrib = (v - mean) / (area * std) / n_pix;
                    let sy = reflect(wy as isize + dy as isize - pad as isize, h);
                    let sx = reflect(wx as isize + dx as isize - pad as isize, w);
                    grad[[sy, sx]] += contrib;
                }
            }
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

const SSIM_WIN: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> Vec<f64> {
    let half = (SSIM_WIN / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

struct SsimMoments {
    mu1: Array2<f64>,
    mu2: Array2<f64>,
    s11: Array2<f64>,
    s22: Array2<f64>,
    s12: Array2<f64>,
    oh: usize,
    ow: usize,
}

fn ssim_moments(i: &Array2<f64>, i_r: &Array2<f64>) -> SsimMoments {
    let k = ssim_kernel();
    let (h, w) = i.dim();
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut mu1 = Array2::<f64>::zeros((oh, ow));
    let mut mu2 = Array2::<f64>::zeros((oh, ow));
    let mut s11 = Array2::<f64>::zeros((oh, ow));
    let mut s22 = Array2::<f64>::zeros((oh, ow));
    let mut s12 = Array2::<f64>::zeros((oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            let mut p11 = 0.0;
            let mut p22 = 0.0;
            let mut p12 = 0.0;
            for dy in 0..SSIM_WIN {
                for dx in 0..SSIM_WIN {
                    let wgt = k[dy] * k[dx];
                    let a = i[[oy + dy, ox + dx]];
                    let b = i_r[[oy + dy, ox + dx]];
                    m1 += wgt * a;
                    m2 += wgt * b;
                    p11 += wgt * a * a;
                    p22 += wgt * b * b;
                    p12 += wgt * a * b;
                }
            }
            mu1[[oy, ox]] = m1;
            mu2[[oy, ox]] = m2;
            s11[[oy, ox]] = p11;
            s22[[oy, ox]] = p22;
            s12[[oy, ox]] = p12;
        }
    }
    SsimMoments {
        mu1,
        mu2,
        s11,
        s22,
        s12,
        oh,
        ow,
    }
}

/// Mean structural similarity over valid (un-padded) windows: 7x7 Gaussian
/// window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 on the [0, 1] range.
pub fn ssim(i: &Array2<f64>, i_r: &Array2<f64>) -> Result<f64> {
    check_same_shape2(i, i_r)?;
    let (h, w) = i.dim();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::contract(format!(
            "ssim needs images at least {SSIM_WIN}x{SSIM_WIN}"
        )));
    }
    let m = ssim_moments(i, i_r);
    let mut total = 0.0;
    for oy in 0..m.oh {
        for ox in 0..m.ow {
            let (mu1, mu2) = (m.mu1[[oy, ox]], m.mu2[[oy, ox]]);
            let var1 = m.s11[[oy, ox]] - mu1 * mu1;
            let var2 = m.s22[[oy, ox]] - mu2 * mu2;
            let cov = m.s12[[oy, ox]] - mu1 * mu2;
            let a1 = 2.0 * mu1 * mu2 + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1;
            let b2 = var1 + var2 + SSIM_C2;
            total += (a1 * a2) / (b1 * b2);
        }
    }
    Ok(total / (m.oh * m.ow) as f64)
}

/// Gradient of [`ssim`] w.r.t. its second argument.
pub fn ssim_grad(i: &Array2<f64>, i_r: &Array2<f64>) -> Result<Array2<f64>> {
    check_same_shape2(i, i_r)?;
    let (h, w) = i.dim();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::contract(format!(
            "ssim needs images at least {SSIM_WIN}x{SSIM_WIN}"
        )));
    }
    let m = ssim_moments(i, i_r);
    let k = ssim_kernel();
    let n_win = (m.oh * m.ow) as f64;
    // per-window coefficients for d ssim / d (mu2, s22, s12)
    let mut g_mu2 = Array2::<f64>::zeros((m.oh, m.ow));
    let mut g_s22 = Array2::<f64>::zeros((m.oh, m.ow));
    let mut g_s12 = Array2::<f64>::zeros((m.oh, m.ow));
    for oy in 0..m.oh {
        for ox in 0..m.ow {
            let (mu1, mu2) = (m.mu1[[oy, ox]], m.mu2[[oy, ox]]);
            let var1 = m.s11[[oy, ox]] - mu1 * mu1;
            let var2 = m.s22[[oy, ox]] - mu2 * mu2;
            let cov = m.s12[[oy, ox]] - mu1 * mu2;
            let a1 = 2.0 * mu1 * mu2 + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1;
            let b2 = var1 + var2 + SSIM_C2;
            let denom = b1 * b2;
            // s = a1 a2 / (b1 b2); s12 and s22 enter via a2 and b2,
            // mu2 enters all four terms
            g_s12[[oy, ox]] = 2.0 * a1 / denom / n_win;
            g_s22[[oy, ox]] = -a1 * a2 / (b1 * b2 * b2) / n_win;
            let d_mu2 = 2.0 * mu1 * a2 / denom - 2.0 * mu2 * a1 * a2 / (b1 * b1 * b2)
                - 2.0 * mu1 * a1 / denom
                + 2.0 * mu2 * a1 * a2 / (b1 * b2 * b2);
            g_mu2[[oy, ox]] = d_mu2 / n_win;
        }
    }
    // scatter back through the Gaussian window:
    // mu2 = sum w b, s22 = sum w b^2, s12 = sum w a b
    let mut grad = Array2::<f64>::zeros((h, w));
    for oy in 0..m.oh {
        for ox in 0..m.ow {
            for dy in 0..SSIM_WIN {
                for dx in 0..SSIM_WIN {
                    let wgt = k[dy] * k[dx];
                    let (py, px) = (oy + dy, ox + dx);
                    grad[[py, px]] += wgt
                        * (g_mu2[[oy, ox]]
                            + 2.0 * i_r[[py, px]] * g_s22[[oy, ox]]
                            + i[[py, px]] * g_s12[[oy, ox]]);
                }
            }
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Temperature non-uniformity correction
// ---------------------------------------------------------------------------

/// alpha * local_uniformity(I_r) + beta * (1 - ssim(I, I_r)).
pub fn loss_tnc(i: &Array2<f64>, i_r: &Array2<f64>, alpha: f64, beta: f64, k: usize) -> Result<f64> {
    Ok(alpha * local_uniformity(i_r, k)? + beta * (1.0 - ssim(i, i_r)?))
}

pub fn loss_tnc_grad(
    i: &Array2<f64>,
    i_r: &Array2<f64>,
    alpha: f64,
    beta: f64,
    k: usize,
) -> Result<Array2<f64>> {
    let gu = local_uniformity_grad(i_r, k)?;
    let gs = ssim_grad(i, i_r)?;
    Ok(gu.mapv(|v| alpha * v) - gs.mapv(|v| beta * v))
}

// ---------------------------------------------------------------------------
// Sobel edges, Dice, edge-aware loss
// ---------------------------------------------------------------------------

const EDGE_THRESH: f64 = 0.2;
const EDGE_TAU: f64 = 0.05;
const MAG_EPS: f64 = 1e-12;

fn sobel_magnitude(i: &Array2<f64>) -> Array2<f64> {
    let (h, w) = i.dim();
    let p = reflect_pad(i, 1);
    let mut mag = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let at = |dy: usize, dx: usize| p[[y + dy, x + dx]];
            let gx = -at(0, 0) + at(0, 2) - 2.0 * at(1, 0) + 2.0 * at(1, 2) - at(2, 0) + at(2, 2);
            let gy = -at(0, 0) - 2.0 * at(0, 1) - at(0, 2) + at(2, 0) + 2.0 * at(2, 1) + at(2, 2);
            mag[[y, x]] = (gx * gx + gy * gy + MAG_EPS).sqrt();
        }
    }
    mag
}

/// Binary Sobel edge map: gradient magnitude thresholded at 0.2 of its own
/// maximum. Constant images give an empty map.
pub fn sobel_edges(i: &Array2<f64>) -> Array2<f64> {
    let mag = sobel_magnitude(i);
    let maxm = mag.iter().cloned().fold(0.0f64, f64::max);
    if maxm <= MAG_EPS.sqrt() * 2.0 {
        return Array2::zeros(i.dim());
    }
    mag.mapv(|v| if v > EDGE_THRESH * maxm { 1.0 } else { 0.0 })
}

/// Soft edge map: sigmoid over the normalized gradient magnitude (the
/// maximum is treated as a constant).
pub fn sobel_edges_soft(i: &Array2<f64>) -> Array2<f64> {
    let mag = sobel_magnitude(i);
    let maxm = mag.iter().cloned().fold(0.0f64, f64::max);
    if maxm <= MAG_EPS.sqrt() * 2.0 {
        return Array2::zeros(i.dim());
    }
    mag.mapv(|v| 1.0 / (1.0 + (-(v / maxm - EDGE_THRESH) / EDGE_TAU).exp()))
}

/// 1 - (2 |A ∩ B| + eps) / (|A| + |B| + eps) with eps = 1e-6.
pub fn dice_loss(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_same_shape2(a, b)?;
    let eps = 1e-6;
    let inter: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum();
    let sums: f64 = a.sum() + b.sum();
    Ok(1.0 - (2.0 * inter + eps) / (sums + eps))
}

/// Gradient of [`dice_loss`] w.r.t. `b`.
pub fn dice_loss_grad(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    check_same_shape2(a, b)?;
    let eps = 1e-6;
    let inter: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum();
    let denom = a.sum() + b.sum() + eps;
    let numer = 2.0 * inter + eps;
    Ok(a.mapv(|av| -(2.0 * av * denom - numer) / (denom * denom)))
}

/// Edge-aware loss on hard Sobel maps:
/// gamma * dice(E(I), E(I_r)) + delta * dice(1 - E(I), 1 - E(I_r)).
pub fn loss_ie(i: &Array2<f64>, i_r: &Array2<f64>, gamma: f64, delta: f64) -> Result<f64> {
    check_same_shape2(i, i_r)?;
    let ei = sobel_edges(i);
    let er = sobel_edges(i_r);
    let ei_c = ei.mapv(|v| 1.0 - v);
    let er_c = er.mapv(|v| 1.0 - v);
    Ok(gamma * dice_loss(&ei, &er)? + delta * dice_loss(&ei_c, &er_c)?)
}

/// Differentiable surrogate of [`loss_ie`]: the restored image's edge map is
/// soft while the clean image's stays hard (and constant).
pub fn loss_ie_soft(i: &Array2<f64>, i_r: &Array2<f64>, gamma: f64, delta: f64) -> Result<f64> {
    check_same_shape2(i, i_r)?;
    let mag = sobel_magnitude(i_r);
    let maxm = mag.iter().cloned().fold(0.0f64, f64::max);
    loss_ie_soft_frozen(i, i_r, maxm, gamma, delta)
}

/// The soft surrogate with an explicit magnitude normalizer. This is the
/// exact function [`loss_ie_grad`] differentiates (the normalizer is a
/// straight-through constant).
pub fn loss_ie_soft_frozen(
    i: &Array2<f64>,
    i_r: &Array2<f64>,
    maxm: f64,
    gamma: f64,
    delta: f64,
) -> Result<f64> {
    check_same_shape2(i, i_r)?;
    let ei = sobel_edges(i);
    if maxm <= MAG_EPS.sqrt() * 2.0 {
        let er = Array2::<f64>::zeros(i.dim());
        let ei_c = ei.mapv(|v| 1.0 - v);
        let er_c = er.mapv(|v| 1.0 - v);
        return Ok(gamma * dice_loss(&ei, &er)? + delta * dice_loss(&ei_c, &er_c)?);
    }
    let mag = sobel_magnitude(i_r);
    let er = mag.mapv(|v| 1.0 / (1.0 + (-(v / maxm - EDGE_THRESH) / EDGE_TAU).exp()));
    let ei_c = ei.mapv(|v| 1.0 - v);
    let er_c = er.mapv(|v| 1.0 - v);
    Ok(gamma * dice_loss(&ei, &er)? + delta * dice_loss(&ei_c, &er_c)?)
}

/// Straight-through gradient for [`loss_ie`]: differentiate the soft
/// surrogate w.r.t. `i_r` (the normalization maximum is a constant).
pub fn loss_ie_grad(
    i: &Array2<f64>,
    i_r: &Array2<f64>,
    gamma: f64,
    delta: f64,
) -> Result<Array2<f64>> {
    check_same_shape2(i, i_r)?;
    let (h, w) = i.dim();
    let ei = sobel_edges(i);
    let mag = sobel_magnitude(i_r);
    let maxm = mag.iter().cloned().fold(0.0f64, f64::max);
    if maxm <= MAG_EPS.sqrt() * 2.0 {
        return Ok(Array2::zeros((h, w)));
    }
    let er = mag.mapv(|v| 1.0 / (1.0 + (-(v / maxm - EDGE_THRESH) / EDGE_TAU).exp()));
    let ei_c = ei.mapv(|v| 1.0 - v);
    let er_c = er.mapv(|v| 1.0 - v);
    // d loss / d er: edge term direct, complement term with a sign flip
    let g_edge = dice_loss_grad(&ei, &er)?;
    let g_comp = dice_loss_grad(&ei_c, &er_c)?;
    let mut d_er = Array2::<f64>::zeros((h, w));
    for ((d, &ge), &gc) in d_er.iter_mut().zip(g_edge.iter()).zip(g_comp.iter()) {
        *d = gamma * ge - delta * gc;
    }
    // through the sigmoid
    let mut d_mag = Array2::<f64>::zeros((h, w));
    for ((d, &e), &de) in d_mag.iter_mut().zip(er.iter()).zip(d_er.iter()) {
        *d = de * e * (1.0 - e) / (EDGE_TAU * maxm);
    }
    // through the magnitude and the Sobel convolutions (reflect padding)
    let p = reflect_pad(i_r, 1);
    let mut grad = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let at = |dy: usize, dx: usize| p[[y + dy, x + dx]];
            let gx = -at(0, 0) + at(0, 2) - 2.0 * at(1, 0) + 2.0 * at(1, 2) - at(2, 0) + at(2, 2);
            let gy = -at(0, 0) - 2.0 * at(0, 1) - at(0, 2) + at(2, 0) + 2.0 * at(2, 1) + at(2, 2);
            let m = mag[[y, x]];
            let dm = d_mag[[y, x]];
            let (dgx, dgy) = (dm * gx / m, dm * gy / m);
            // scatter through both kernels with reflect mapping
            let kx = [
                (-1i32, -1i32, -1.0),
                (-1, 1, 1.0),
                (0, -1, -2.0),
                (0, 1, 2.0),
                (1, -1, -1.0),
                (1, 1, 1.0),
            ];
            let ky = [
                (-1i32, -1i32, -1.0),
                (-1, 0, -2.0),
                (-1, 1, -1.0),
                (1, -1, 1.0),
                (1, 0, 2.0),
                (1, 1, 1.0),
            ];
            for &(dy, dx, wgt) in kx.iter() {
                let sy = reflect(y as isize + dy as isize, h);
                let sx = reflect(x as isize + dx as isize, w);
                grad[[sy, sx]] += dgx * wgt;
            }
            for &(dy, dx, wgt) in ky.iter() {
                let sy = reflect(y as isize + dy as isize, h);
                let sx = reflect(x as isize + dx as isize, w);
                grad[[sy, sx]] += dgy * wgt;
            }
        }
    }
    Ok(grad)
}

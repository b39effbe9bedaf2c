//! Procedural desk-scale dataset: smooth gradient backgrounds with one
//! anti-aliased shape per image, six shape classes. Small, learnable by a
//! toy diffusion model, and cleanly separable by a small CNN.

use crate::data_io::{save_image_png, Image};
use crate::error::Result;
use crate::nn::Scalar;
use crate::util::rng_for;
use ndarray::Array3;
use std::path::Path;

pub const CLASS_NAMES: [&str; 6] = ["disk", "square", "triangle", "cross", "ring", "bars"];

#[derive(Debug, Clone)]
pub struct DatagenConfig {
    pub train: usize,
    pub test: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            train: 5000,
            test: 512,
            image_size: 32,
            seed: 0,
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Signed distance to the class shape; positive inside.
fn shape_sdf(class: usize, px: f32, py: f32, cx: f32, cy: f32, r: f32) -> f32 {
    let dx = px - cx;
    let dy = py - cy;
    match class {
        // disk
        0 => r - (dx * dx + dy * dy).sqrt(),
        // square
        1 => r * 0.9 - dx.abs().max(dy.abs()),
        // upward triangle: three half-planes
        2 => {
            let d_bottom = (cy + r * 0.7) - py;
            // left and right slanted edges through apex (cx, cy - r) with
            // base half-width 1.1 r
            let slope = (1.1 * r) / (1.7 * r);
            let d_right = (slope * ((cy + r * 0.7) - py) - dx) / (1.0 + slope * slope).sqrt();
            let d_left = (slope * ((cy + r * 0.7) - py) + dx) / (1.0 + slope * slope).sqrt();
            d_bottom.min(d_right).min(d_left)
        }
        // cross: union of two bars
        3 => {
            let thick = r * 0.38;
            let horiz = (r - dx.abs()).min(thick - dy.abs());
            let vert = (r - dy.abs()).min(thick - dx.abs());
            horiz.max(vert)
        }
        // ring
        4 => {
            let d = (dx * dx + dy * dy).sqrt();
            (r - d).min(d - r * 0.45)
        }
        // two horizontal bars
        _ => {
            let thick = r * 0.28;
            let off = r * 0.5;
            let top = (r - dx.abs()).min(thick - (dy + off).abs());
            let bottom = (r - dx.abs()).min(thick - (dy - off).abs());
            top.max(bottom)
        }
    }
}

/// Render one image of the given class using the provided RNG stream.
pub fn render_image(class: usize, size: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Image {
    let n = size as f32;
    // background: linear gradient between two soft colors
    let h1 = f32::rand01(rng);
    let h2 = f32::rand01(rng);
    let c1 = hsv_to_rgb(h1, 0.25 + 0.2 * f32::rand01(rng), 0.35 + 0.4 * f32::rand01(rng));
    let c2 = hsv_to_rgb(h2, 0.25 + 0.2 * f32::rand01(rng), 0.35 + 0.4 * f32::rand01(rng));
    let theta = f32::rand01(rng) * std::f32::consts::TAU;
    let (gx, gy) = (theta.cos(), theta.sin());
    // foreground: saturated distinct color
    let fg = hsv_to_rgb(
        f32::rand01(rng),
        0.7 + 0.3 * f32::rand01(rng),
        0.7 + 0.3 * f32::rand01(rng),
    );
    let cx = n / 2.0 + (f32::rand01(rng) - 0.5) * 0.30 * n;
    let cy = n / 2.0 + (f32::rand01(rng) - 0.5) * 0.30 * n;
    let r = n * (0.14 + 0.08 * f32::rand01(rng));
    let edge = 1.1f32;

    let mut img = Array3::<f32>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let (pxf, pyf) = (x as f32 + 0.5, y as f32 + 0.5);
            let g = ((pxf * gx + pyf * gy) / n + 1.0) / 2.0;
            let g = g.clamp(0.0, 1.0);
            let d = shape_sdf(class, pxf, pyf, cx, cy, r);
            let alpha = 1.0 / (1.0 + (-d / (edge * 0.5)).exp());
            for ci in 0..3 {
                let bg = c1[ci] * (1.0 - g) + c2[ci] * g;
                img[[y, x, ci]] = (bg * (1.0 - alpha) + fg[ci] * alpha).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Generate train/ and test/ splits under `dir`, each with PNGs and a
/// manifest. Deterministic in the seed.
pub fn generate_dataset(dir: &Path, cfg: &DatagenConfig) -> Result<()> {
    for (split, count) in [("train", cfg.train), ("test", cfg.test)] {
        let split_dir = dir.join(split);
        std::fs::create_dir_all(&split_dir)?;
        let mut manifest = String::new();
        for i in 0..count {
            let class = i % CLASS_NAMES.len();
            let mut rng = rng_for(cfg.seed, &format!("datagen-{split}-{i}"));
            let img = render_image(class, cfg.image_size, &mut rng);
            let name = format!("img_{i:05}.png");
            save_image_png(&img, &split_dir.join(&name))?;
            manifest.push_str(&format!("{name},{class}\n"));
        }
        std::fs::write(split_dir.join("manifest.csv"), manifest)?;
    }
    Ok(())
}

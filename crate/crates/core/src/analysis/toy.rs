//! Synthetic per-pixel classification: colored rectangles on a noisy,
//! striped background.

use crate::tensor::{Rng, Tensor4};

pub const TOY_SIZE: usize = 32;
/// Background plus three rectangle classes.
pub const TOY_CLASSES: usize = 4;

/// Mean RGB of each rectangle class (background is gray-ish).
const CLASS_COLORS: [[f32; 3]; 3] = [[0.8, -0.4, -0.4], [-0.4, 0.8, -0.4], [-0.4, -0.4, 0.8]];

/// Noise knobs of the generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyStyle {
    /// Per-pixel Gaussian noise.
    pub pixel_noise: f32,
    /// Amplitude of the background stripes.
    pub texture: f32,
    /// Per-rectangle color jitter.
    pub jitter: f32,
}

impl Default for ToyStyle {
    fn default() -> Self {
        ToyStyle {
            pixel_noise: 0.7,
            texture: 0.4,
            jitter: 0.2,
        }
    }
}

/// `n` images `(n, 3, 32, 32)` with labels laid out `b·1024 + i·32 + j`.
///
/// Each image holds 3–5 axis-aligned rectangles; later ones paint over
/// earlier ones.
pub fn toy_batch(rng: &mut Rng, n: usize, style: ToyStyle) -> (Tensor4<f32>, Vec<usize>) {
    let sz = TOY_SIZE;
    let mut x = Tensor4::zeros((n, 3, sz, sz));
    let mut labels = vec![0usize; n * sz * sz];
    for b in 0..n {
        let base = rng.uniform(-0.2, 0.2) as f32;
        let (fy, fx) = (rng.uniform(0.2, 0.9) as f32, rng.uniform(0.2, 0.9) as f32);
        let phase = rng.uniform(0.0, std::f64::consts::TAU) as f32;
        let mut rgb = vec![[0f32; 3]; sz * sz];
        for i in 0..sz {
            for j in 0..sz {
                let t = style.texture * (fy * i as f32 + fx * j as f32 + phase).sin();
                rgb[i * sz + j] = [base + t, base + t, base + t];
            }
        }
        let count = rng.below(3, 6);
        for _ in 0..count {
            let class = rng.below(1, TOY_CLASSES);
            let (rh, rw) = (rng.below(6, 15), rng.below(6, 15));
            let (y0, x0) = (rng.below(0, sz - rh + 1), rng.below(0, sz - rw + 1));
            let mut color = CLASS_COLORS[class - 1];
            for v in &mut color {
                *v += style.jitter * rng.uniform(-1.0, 1.0) as f32;
            }
            for i in y0..y0 + rh {
                for j in x0..x0 + rw {
                    rgb[i * sz + j] = color;
                    labels[b * sz * sz + i * sz + j] = class;
                }
            }
        }
        for (site, px) in rgb.iter().enumerate() {
            for (c, &v) in px.iter().enumerate() {
                *x.at_mut(b, c, site / sz, site % sz) = v + style.pixel_noise * rng.normal() as f32;
            }
        }
    }
    (x, labels)
}

//! Deterministic procedural images (gradients, flat shapes, stripes and
//! grain) for tests and toy training runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Image;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// A `width`x`height` image determined by `seed`.
pub fn synthetic_image(width: u32, height: u32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0: [f64; 3] = [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)];
    let c1: [f64; 3] = [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)];
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let shapes: Vec<(f64, f64, f64, [f64; 3], bool)> = (0..rng.gen_range(2..6))
        .map(|_| {
            (
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.0..height as f64),
                rng.gen_range(0.08..0.35) * width.min(height) as f64,
                [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)],
                rng.gen_bool(0.5),
            )
        })
        .collect();
    let stripe_period: f64 = rng.gen_range(3.0..12.0);
    let stripe_amp: f64 = rng.gen_range(0.0..25.0);
    let grain: f64 = rng.gen_range(2.0..10.0);
    let diag = ((width * width + height * height) as f64).sqrt().max(1.0);
    let mut data = Vec::with_capacity((width * height * 3) as usize);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let t = (((fx * ca + fy * sa) / diag) + 1.0) / 2.0;
            let mut px = [lerp(c0[0], c1[0], t), lerp(c0[1], c1[1], t), lerp(c0[2], c1[2], t)];
            for &(cx, cy, r, col, round) in &shapes {
                let inside = if round {
                    (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r
                } else {
                    (fx - cx).abs() <= r && (fy - cy).abs() <= 0.6 * r
                };
                if inside {
                    px = col;
                }
            }
            let stripe = stripe_amp * (std::f64::consts::TAU * (fx + 0.5 * fy) / stripe_period).sin();
            for v in px.iter_mut() {
                let noise = grain * (rng.gen::<f64>() - 0.5);
                data.push((*v + stripe + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::from_raw(width, height, data).expect("valid dimensions")
}

/// `count` images with consecutive seeds starting at `seed`.
pub fn synthetic_set(count: usize, width: u32, height: u32, seed: u64) -> Vec<Image> {
    (0..count as u64).map(|i| synthetic_image(width, height, seed + i)).collect()
}

/// Uniform random noise image.
pub fn noise_image(width: u32, height: u32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..width * height * 3).map(|_| rng.gen()).collect();
    Image::from_raw(width, height, data).expect("valid dimensions")
}

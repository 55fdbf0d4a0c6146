//! Procedural natural-looking images for offline training and tests.
//!
//! Each image layers a smooth colour gradient, 1/f value noise, oriented
//! stripe textures inside random regions and a few flat-shaded shapes with
//! hard edges. This gives the mix of edges, textures and smooth areas that
//! makes the perception/distortion trade-off visible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::Image;

/// Value noise: a random `cells x cells` grid bilinearly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let g = cells + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / h as f64 * cells as f64;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / w as f64 * cells as f64;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Sum of octaves with amplitude proportional to wavelength (1/f spectrum).
fn pink_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut cells = 2;
    let mut amp = 0.5;
    while cells <= h.max(w) / 2 {
        for (o, v) in out.iter_mut().zip(value_noise(rng, h, w, cells)) {
            *o += amp * v;
        }
        cells *= 2;
        amp *= 0.5;
    }
    out
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A deterministic procedural RGB image in `[0, 1]`.
pub fn synth_image(seed: u64, height: usize, width: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height, width);
    let c0 = random_colour(&mut rng);
    let c1 = random_colour(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let noise: Vec<Vec<f64>> = (0..3).map(|_| pink_noise(&mut rng, h, w)).collect();
    let mut img = Image::from_fn(3, h, w, |c, y, x| {
        let u = ((x as f64 / w as f64 - 0.5) * ca + (y as f64 / h as f64 - 0.5) * sa) + 0.5;
        let base = c0[c] * (1.0 - u) + c1[c] * u;
        base + 0.35 * noise[c][y * w + x]
    });

    // Striped texture patches.
    for _ in 0..rng.random_range(2..5) {
        let (cy, cx) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
        let radius = rng.random_range(0.15..0.4) * h.min(w) as f64;
        let period: f64 = rng.random_range(2.5..9.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (ct, st) = (theta.cos(), theta.sin());
        let contrast = rng.random_range(0.15..0.35);
        let tint = random_colour(&mut rng);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let r = (dy * dy + dx * dx).sqrt();
                if r > radius {
                    continue;
                }
                let falloff = (1.0 - r / radius).min(0.25) * 4.0;
                let phase = (dx * ct + dy * st) / period * std::f64::consts::TAU;
                let s = phase.sin() * contrast * falloff;
                for (c, t) in tint.iter().enumerate() {
                    let v = img.get(c, y, x) + s * (0.5 + t);
                    img.set(c, y, x, v);
                }
            }
        }
    }

    // Flat shapes with hard edges.
    for _ in 0..rng.random_range(3..7) {
        let colour = random_colour(&mut rng);
        let (cy, cx) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
        let size = rng.random_range(0.05..0.2) * h.min(w) as f64;
        let round = rng.random::<bool>();
        let alpha = rng.random_range(0.6..1.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if round {
                    dy * dy + dx * dx <= size * size
                } else {
                    dy.abs() <= size && dx.abs() <= size * 0.6
                };
                if inside {
                    for (c, col) in colour.iter().enumerate() {
                        let v = img.get(c, y, x) * (1.0 - alpha) + col * alpha;
                        img.set(c, y, x, v);
                    }
                }
            }
        }
    }
    img.clip01()
}

/// `count` images with consecutive seeds starting at `seed`.
pub fn synth_set(seed: u64, count: usize, height: usize, width: usize) -> Vec<Image> {
    (0..count as u64)
        .map(|i| synth_image(seed.wrapping_add(i), height, width))
        .collect()
}

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imageio::quantize;

/// A synthetic clean scene: a two-colour gradient, a few flat-shaded
/// rectangles and ellipses, and a faint low-frequency ripple.
pub fn procedural_background(seed: u64, h: usize, w: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [0; 3].map(|_| rng.gen_range(0.08..0.7)) };
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (sa, ca) = angle.sin_cos();

    let mut px = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 / w as f64 - 0.5) * ca + (y as f64 / h as f64 - 0.5) * sa + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                px[y * w + x][c] = top[c] * (1.0 - t) + bottom[c] * t;
            }
        }
    }

    let shapes = rng.gen_range(2..6);
    for _ in 0..shapes {
        let fill = color(&mut rng);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(0.08..0.35) * h as f64;
        let rx = rng.gen_range(0.08..0.35) * w as f64;
        let ellipse = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    px[y * w + x] = fill;
                }
            }
        }
    }

    let fy = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / h as f64;
    let fx = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / w as f64;
    let amp = rng.gen_range(0.0..0.06);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let ripple = amp * ((x as f64 * fx).sin() * (y as f64 * fy).cos());
        let p = px[y as usize * w + x as usize];
        Rgb([0, 1, 2].map(|c| quantize(p[c] + ripple)))
    })
}

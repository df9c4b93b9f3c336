//! Procedural test content: smooth textured images and slowly drifting clips.
//!
//! Desk-scale runs need video with local gradients (so block matching and
//! photometric alignment have something to lock onto), smooth regions, and
//! temporal redundancy. Everything is deterministic in the seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::frame::{Frame, FrameRole};

/// Smooth random texture in `[0.05, 0.95]`: a handful of Gaussian blobs over
/// a tilted base gradient plus low-amplitude sinusoidal detail.
pub fn natural_texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..10)
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(3.0..(h.max(w) as f64 / 2.5)),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let (gx, gy) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    let (fx, fy, fp) = (rng.gen_range(0.15..0.55), rng.gen_range(0.15..0.55), rng.gen_range(0.0..6.28));
    let mut plane = Array2::zeros((h, w));
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            let mut v = gx * x as f64 / w as f64 + gy * y as f64 / h as f64;
            for &(cy, cx, s, a) in &blobs {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += a * (-d2 / (2.0 * s * s)).exp();
            }
            v += 0.08 * (fx * x as f64 + fp).sin() * (fy * y as f64).cos();
            plane[[y, x]] = v as f32;
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = ((hi - lo) as f32).max(1e-6);
    plane.mapv(|v| 0.05 + 0.9 * (v - lo as f32) / span)
}

fn bilinear_at(plane: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = plane.dim();
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (cx - x0 as f64) as f32;
    let fy = (cy - y0 as f64) as f32;
    (1.0 - fx) * (1.0 - fy) * plane[[y0, x0]]
        + fx * (1.0 - fy) * plane[[y0, x1]]
        + (1.0 - fx) * fy * plane[[y1, x0]]
        + fx * fy * plane[[y1, x1]]
}

/// Crops an `h x w` window from `master` at a (possibly fractional) offset.
pub fn crop_at(master: &Array2<f32>, top: f64, left: f64, h: usize, w: usize) -> Array2<f32> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        bilinear_at(master, top + y as f64, left + x as f64).clamp(0.0, 1.0)
    })
}

/// A clip whose frames drift across a larger master texture with a slowly
/// varying subpixel velocity: globally rigid motion of roughly a pixel per
/// frame, plus gentle brightness breathing.
pub fn moving_clip(h: usize, w: usize, frames: usize, seed: u64) -> Result<Vec<Frame>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = 16 + frames * 2;
    let master_y = natural_texture(h + 2 * pad, w + 2 * pad, &mut rng);
    let master_u = natural_texture((h + 2 * pad) / 2, (w + 2 * pad) / 2, &mut rng);
    let master_v = natural_texture((h + 2 * pad) / 2, (w + 2 * pad) / 2, &mut rng);

    let mut vy: f64 = rng.gen_range(-1.1..1.1);
    let mut vx: f64 = rng.gen_range(-1.1..1.1);
    let mut ty = pad as f64;
    let mut tx = pad as f64;
    let mut out = Vec::with_capacity(frames);
    for n in 0..frames {
        let gain = 1.0 + 0.03 * ((n as f32) * 0.7).sin();
        let y = crop_at(&master_y, ty, tx, h, w).mapv(|v| (v * gain).clamp(0.0, 1.0));
        let u = crop_at(&master_u, ty / 2.0, tx / 2.0, h / 2, w / 2);
        let v = crop_at(&master_v, ty / 2.0, tx / 2.0, h / 2, w / 2);
        out.push(Frame::new(FrameRole::Raw, n, y, u, v, None)?);
        vy = (vy + rng.gen_range(-0.25..0.25)).clamp(-1.4, 1.4);
        vx = (vx + rng.gen_range(-0.25..0.25)).clamp(-1.4, 1.4);
        ty += vy;
        tx += vx;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::correlation_coefficient;

    #[test]
    fn texture_is_in_range_and_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = natural_texture(32, 48, &mut r1);
        let b = natural_texture(32, 48, &mut r2);
        assert_eq!(a, b);
        for &v in a.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
        let spread = a.iter().cloned().fold(f32::MIN, f32::max)
            - a.iter().cloned().fold(f32::MAX, f32::min);
        assert!(spread > 0.5, "texture too flat: {spread}");
    }

    #[test]
    fn clip_frames_are_correlated_but_not_identical() {
        let clip = moving_clip(32, 32, 6, 9).unwrap();
        assert_eq!(clip.len(), 6);
        for pair in clip.windows(2) {
            let cc = correlation_coefficient(pair[0].y(), pair[1].y()).unwrap();
            assert!(cc > 0.5, "adjacent frames should stay similar, cc = {cc}");
            assert_ne!(pair[0].y(), pair[1].y());
        }
    }
}

//! Codec proxy: blockwise DCT quantization with a variance-driven quadtree
//! partition and a hierarchical per-frame QP pattern.
//!
//! The proxy has no prediction loop; quality fluctuation across frames comes
//! purely from the per-position QP offsets, which is what the reference
//! selector needs to exercise. The rate proxy is the count of nonzero
//! quantized coefficients per second.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::frame::{Frame, FrameRole};
use crate::partition::{BlockLayout, Rect};
use crate::validation;

/// Nominal frame rate used to express the rate proxy per second.
pub const NOMINAL_FPS: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct ProxyCodecConfig {
    pub qp_base: i32,
    pub gop_size: usize,
    /// Per-position QP offsets within a GOP; length must equal `gop_size`.
    pub qp_offsets: Vec<i32>,
    pub seed: u64,
}

impl Default for ProxyCodecConfig {
    fn default() -> Self {
        ProxyCodecConfig { qp_base: 37, gop_size: 4, qp_offsets: vec![0, 4, 3, 4], seed: 0 }
    }
}

impl ProxyCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gop_size == 0 || self.qp_offsets.len() != self.gop_size {
            return Err(validation!(
                "GOP size {} needs exactly that many offsets, got {}",
                self.gop_size,
                self.qp_offsets.len()
            ));
        }
        Ok(())
    }
}

/// Quantization step for a QP, in the normalized sample domain.
pub fn quant_step(qp: i32) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0) / 255.0
}

/// Orthonormal type-II DCT basis of size `n`.
fn dct_basis(n: usize) -> Array2<f64> {
    let mut d = Array2::zeros((n, n));
    let nf = n as f64;
    for k in 0..n {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for x in 0..n {
            d[[k, x]] = scale * (std::f64::consts::PI * (2.0 * x as f64 + 1.0) * k as f64 / (2.0 * nf)).cos();
        }
    }
    d
}

/// Transforms, quantizes, dequantizes and reconstructs one plane in `n x n`
/// blocks. Returns the reconstruction and the nonzero-coefficient count.
fn code_plane(plane: &Array2<f32>, n: usize, step: f64) -> (Array2<f32>, u64) {
    let (h, w) = plane.dim();
    debug_assert!(h % n == 0 && w % n == 0);
    let d = dct_basis(n);
    let mut recon = Array2::zeros((h, w));
    let mut nonzero = 0u64;
    let mut block = Array2::<f64>::zeros((n, n));
    let mut tmp = Array2::<f64>::zeros((n, n));
    let mut coef = Array2::<f64>::zeros((n, n));
    for by in (0..h).step_by(n) {
        for bx in (0..w).step_by(n) {
            for y in 0..n {
                for x in 0..n {
                    block[[y, x]] = plane[[by + y, bx + x]] as f64;
                }
            }
            // coef = D * block * D^T
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += d[[y, k]] * block[[k, x]];
                    }
                    tmp[[y, x]] = acc;
                }
            }
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += tmp[[y, k]] * d[[x, k]];
                    }
                    let q = (acc / step).round();
                    if q != 0.0 {
                        nonzero += 1;
                    }
                    coef[[y, x]] = q * step;
                }
            }
            // block = D^T * coef * D
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += d[[k, y]] * coef[[k, x]];
                    }
                    tmp[[y, x]] = acc;
                }
            }
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += tmp[[y, k]] * d[[k, x]];
                    }
                    recon[[by + y, bx + x]] = (acc.clamp(0.0, 1.0)) as f32;
                }
            }
        }
    }
    (recon, nonzero)
}

fn variance(plane: &Array2<f32>, r: Rect) -> f64 {
    let n = (r.w * r.h) as f64;
    let mut sum = 0.0f64;
    let mut sq = 0.0f64;
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            let v = plane[[y, x]] as f64;
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0)
}

/// Greedy power-of-two decomposition of a multiple-of-8 extent, largest
/// segments (up to 64) first.
fn pow2_segments(mut n: usize) -> Vec<usize> {
    debug_assert_eq!(n % 8, 0);
    let mut out = Vec::new();
    while n > 0 {
        let s = [64usize, 32, 16, 8].into_iter().find(|&s| s <= n).unwrap();
        out.push(s);
        n -= s;
    }
    out
}

/// Root tiling of the frame: the cartesian grid of per-axis power-of-two
/// segments. Tiles may be rectangular; sides stay within 8..=64.
fn root_tiles(width: usize, height: usize) -> Vec<Rect> {
    let mut tiles = Vec::new();
    let mut y = 0;
    for th in pow2_segments(height) {
        let mut x = 0;
        for tw in pow2_segments(width) {
            tiles.push(Rect::new(x, y, tw, th));
            x += tw;
        }
        y += th;
    }
    tiles
}

/// Variance-driven quadtree split of the root tiles: textured blocks split
/// deeper, with a per-block randomized threshold.
fn quadtree_cu(luma: &Array2<f32>, rng: &mut ChaCha8Rng) -> Vec<Rect> {
    fn split(plane: &Array2<f32>, r: Rect, rng: &mut ChaCha8Rng, out: &mut Vec<Rect>) {
        let var = variance(plane, r);
        let threshold = 2.5e-3 * 2f64.powf(rng.gen_range(-1.0..1.0));
        if r.w.min(r.h) > 8 && var > threshold {
            let (hw, hh) = (r.w / 2, r.h / 2);
            split(plane, Rect::new(r.x, r.y, hw, hh), rng, out);
            split(plane, Rect::new(r.x + hw, r.y, hw, hh), rng, out);
            split(plane, Rect::new(r.x, r.y + hh, hw, hh), rng, out);
            split(plane, Rect::new(r.x + hw, r.y + hh, hw, hh), rng, out);
        } else {
            out.push(r);
        }
    }
    let (h, w) = luma.dim();
    let mut out = Vec::new();
    for tile in root_tiles(w, h) {
        split(luma, tile, rng, &mut out);
    }
    out
}

/// One further split level below the coding-unit layout (down to 4x4).
fn tu_from_cu(cu: &[Rect]) -> Vec<Rect> {
    let mut out = Vec::new();
    for r in cu {
        if r.w > 4 && r.h > 4 {
            let (hw, hh) = (r.w / 2, r.h / 2);
            out.push(Rect::new(r.x, r.y, hw, hh));
            out.push(Rect::new(r.x + hw, r.y, hw, hh));
            out.push(Rect::new(r.x, r.y + hh, hw, hh));
            out.push(Rect::new(r.x + hw, r.y + hh, hw, hh));
        } else {
            out.push(*r);
        }
    }
    out
}

pub struct ProxyEncodeOutput {
    pub urfs: Vec<Frame>,
    pub layouts: Vec<BlockLayout>,
    /// Nonzero quantized coefficients per second at the nominal frame rate.
    pub bitrate_estimate: f64,
}

/// Proxy-encodes a sequence: per frame, a variance-driven partition, 8x8 DCT
/// quantization on luma (4x4 on chroma), QP cycling through the GOP offsets.
/// Deterministic for a fixed seed.
pub fn proxy_encode(raws: &[Frame], config: &ProxyCodecConfig) -> Result<ProxyEncodeOutput> {
    config.validate()?;
    if raws.is_empty() {
        return Err(validation!("empty input sequence"));
    }
    let mut urfs = Vec::with_capacity(raws.len());
    let mut layouts = Vec::with_capacity(raws.len());
    let mut nonzero_total = 0u64;
    for (n, raw) in raws.iter().enumerate() {
        let (h, w) = raw.dim();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(validation!("frame {n} is {h}x{w}; proxy coding needs multiples of 8"));
        }
        let qp = config.qp_base + config.qp_offsets[n % config.gop_size];
        let step = quant_step(qp);
        // Seed per frame so layouts do not depend on processing order.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (n as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let cu = quadtree_cu(raw.y(), &mut rng);
        let tu = tu_from_cu(&cu);

        let (y, nz_y) = code_plane(raw.y(), 8, step);
        let (u, nz_u) = code_plane(raw.u(), 4, step);
        let (v, nz_v) = code_plane(raw.v(), 4, step);
        nonzero_total += nz_y + nz_u + nz_v;

        urfs.push(Frame::new(FrameRole::Urf, raw.index(), y, u, v, Some(qp))?);
        layouts.push(BlockLayout { cu, tu });
    }
    let bitrate_estimate = nonzero_total as f64 / raws.len() as f64 * NOMINAL_FPS;
    Ok(ProxyEncodeOutput { urfs, layouts, bitrate_estimate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr_luma;
    use crate::partition::rasterize_partition;

    fn gradient_frame(h: usize, w: usize, index: usize) -> Frame {
        let y = Array2::from_shape_fn((h, w), |(yy, xx)| {
            0.1 + 0.8 * ((yy as f32 / h as f32) * 0.5 + (xx as f32 / w as f32) * 0.5)
        });
        let u = Array2::from_elem((h / 2, w / 2), 0.5);
        let v = Array2::from_elem((h / 2, w / 2), 0.45);
        Frame::new(FrameRole::Raw, index, y, u, v, None).unwrap()
    }

    fn textured_frame(h: usize, w: usize, index: usize) -> Frame {
        let y = Array2::from_shape_fn((h, w), |(yy, xx)| {
            (0.5 + 0.3 * ((xx as f32 * 0.8).sin() * (yy as f32 * 0.6).cos())
                + 0.1 * ((xx * 7 + yy * 13) % 5) as f32 / 5.0)
                .clamp(0.0, 1.0)
        });
        let u = Array2::from_shape_fn((h / 2, w / 2), |(yy, xx)| {
            0.5 + 0.2 * ((xx as f32 * 0.3).cos() * (yy as f32 * 0.4).sin())
        });
        let v = u.mapv(|c| 1.0 - c);
        Frame::new(FrameRole::Raw, index, y, u, v, None).unwrap()
    }

    #[test]
    fn tiny_steps_preserve_a_smooth_ramp() {
        let raw = gradient_frame(32, 32, 0);
        let config = ProxyCodecConfig { qp_base: 1, gop_size: 1, qp_offsets: vec![0], seed: 7 };
        let out = proxy_encode(&[raw.clone()], &config).unwrap();
        let p = psnr_luma(&out.urfs[0], &raw).unwrap();
        assert!(p >= 50.0, "psnr {p}");
    }

    #[test]
    fn constant_frame_survives_when_dc_is_exact() {
        // Pick the gray level so the DC coefficient is an exact multiple of
        // the quantization step: dc = 8 * g, choose g = step * k / 8.
        let qp = 28;
        let step = quant_step(qp);
        let g = (step * 64.0 / 8.0) as f32;
        assert!(g <= 1.0);
        let y = Array2::from_elem((16, 16), g);
        let u = Array2::from_elem((8, 8), (step * 16.0 / 4.0) as f32);
        let raw = Frame::new(FrameRole::Raw, 0, y, u.clone(), u, None).unwrap();
        let config = ProxyCodecConfig { qp_base: qp, gop_size: 1, qp_offsets: vec![0], seed: 1 };
        let out = proxy_encode(&[raw.clone()], &config).unwrap();
        for (a, b) in out.urfs[0].y().iter().zip(raw.y().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn coarser_qp_means_lower_quality_and_rate() {
        let raws: Vec<Frame> = (0..2).map(|i| textured_frame(64, 64, i)).collect();
        let run = |qp| {
            let config = ProxyCodecConfig { qp_base: qp, gop_size: 1, qp_offsets: vec![0], seed: 3 };
            let out = proxy_encode(&raws, &config).unwrap();
            let p = raws
                .iter()
                .zip(&out.urfs)
                .map(|(r, u)| psnr_luma(u, r).unwrap())
                .sum::<f64>()
                / 2.0;
            (p, out.bitrate_estimate)
        };
        let (p22, r22) = run(22);
        let (p37, r37) = run(37);
        assert!(p37 < p22, "psnr {p37} !< {p22}");
        assert!(r37 < r22, "rate {r37} !< {r22}");
    }

    #[test]
    fn qp_offsets_create_quality_fluctuation() {
        let raws: Vec<Frame> = (0..12).map(|i| textured_frame(64, 64, i)).collect();
        let config = ProxyCodecConfig { qp_base: 30, gop_size: 4, qp_offsets: vec![0, 4, 2, 4], seed: 5 };
        let out = proxy_encode(&raws, &config).unwrap();
        let psnr_at = |offset: usize| -> f64 {
            let vals: Vec<f64> = (0..12)
                .filter(|i| i % 4 == offset)
                .map(|i| psnr_luma(&out.urfs[i], &raws[i]).unwrap())
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let p0 = psnr_at(0);
        let p2 = psnr_at(2);
        let p1 = (psnr_at(1) + psnr_at(3)) / 2.0;
        assert!(p0 > p2 && p2 > p1, "expected fluctuation, got {p0:.2} / {p2:.2} / {p1:.2}");
    }

    #[test]
    fn layouts_tile_and_rasterize() {
        let raws = vec![textured_frame(48, 64, 0)];
        let config = ProxyCodecConfig { qp_base: 32, ..Default::default() };
        let out = proxy_encode(&raws, &config).unwrap();
        // Rasterization validates exact tiling internally.
        let maps = rasterize_partition(&out.layouts[0], 64, 48).unwrap();
        assert_eq!(maps.cu.dim(), (48, 64));
        // TU blocks are one level finer than CU blocks.
        assert!(out.layouts[0].tu.len() >= out.layouts[0].cu.len());
    }

    #[test]
    fn determinism_under_fixed_seed() {
        let raws: Vec<Frame> = (0..3).map(|i| textured_frame(32, 32, i)).collect();
        let config = ProxyCodecConfig { qp_base: 32, gop_size: 2, qp_offsets: vec![0, 4], seed: 11 };
        let a = proxy_encode(&raws, &config).unwrap();
        let b = proxy_encode(&raws, &config).unwrap();
        assert_eq!(a.bitrate_estimate, b.bitrate_estimate);
        for (fa, fb) in a.urfs.iter().zip(&b.urfs) {
            assert_eq!(fa.y(), fb.y());
        }
        assert_eq!(a.layouts[0].cu, b.layouts[0].cu);
    }

    #[test]
    fn unaligned_frames_are_rejected() {
        let y = Array2::from_elem((20, 20), 0.5f32);
        let c = Array2::from_elem((10, 10), 0.5f32);
        let raw = Frame::new(FrameRole::Raw, 0, y, c.clone(), c, None).unwrap();
        let config = ProxyCodecConfig::default();
        assert!(proxy_encode(&[raw], &config).is_err());
    }
}

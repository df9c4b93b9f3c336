//! Quality and similarity metrics: PSNR, Pearson correlation, Z-score
//! normalization. All accumulation is done in `f64` regardless of the sample
//! storage type.

use ndarray::Array2;

use crate::error::Result;
use crate::frame::Frame;
use crate::validation;

/// PSNR reported for identical planes (zero MSE), in dB.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Floor applied to standard deviations before dividing.
pub const STD_FLOOR: f64 = 1e-6;

fn check_same_shape(a: &Array2<f32>, b: &Array2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(validation!("plane shapes differ: {:?} vs {:?}", a.dim(), b.dim()));
    }
    Ok(())
}

/// Mean squared error between two planes.
pub fn mse(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`] for zero MSE.
pub fn psnr(a: &Array2<f32>, b: &Array2<f32>, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(validation!("peak must be positive, got {peak}"));
    }
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Luma PSNR between two frames with the in-memory peak of 1.0.
pub fn psnr_luma(a: &Frame, b: &Frame) -> Result<f64> {
    psnr(a.y(), b.y(), 1.0)
}

/// Per-channel PSNR increment of a pool frame over a reconstruction.
///
/// Each frame is scored against its own raw frame: the pool frame against the
/// raw frame at the pool index, the reconstruction against the raw frame at
/// its own index. Returns `(dY, dU, dV)` in dB.
pub fn delta_psnr_channels(
    pool: &Frame,
    pool_raw: &Frame,
    urf: &Frame,
    urf_raw: &Frame,
) -> Result<(f64, f64, f64)> {
    let d = |a: &Array2<f32>, ar: &Array2<f32>, b: &Array2<f32>, br: &Array2<f32>| -> Result<f64> {
        Ok(psnr(a, ar, 1.0)? - psnr(b, br, 1.0)?)
    };
    Ok((
        d(pool.y(), pool_raw.y(), urf.y(), urf_raw.y())?,
        d(pool.u(), pool_raw.u(), urf.u(), urf_raw.u())?,
        d(pool.v(), pool_raw.v(), urf.v(), urf_raw.v())?,
    ))
}

/// Pearson correlation over co-located samples.
///
/// Returns 0 when either plane is constant: a constant plane carries no
/// alignable content and its variance is undefined.
pub fn correlation_coefficient(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.len();
    if n < 2 {
        return Err(validation!("correlation needs at least 2 samples, got {n}"));
    }
    let nf = n as f64;
    let mean_a = a.iter().map(|&x| x as f64).sum::<f64>() / nf;
    let mean_b = b.iter().map(|&x| x as f64).sum::<f64>() / nf;
    let (mut sab, mut saa, mut sbb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let da = x as f64 - mean_a;
        let db = y as f64 - mean_b;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// A Z-score-normalized batch together with the original moments.
#[derive(Debug, Clone)]
pub struct NormalizedBatch {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Z-score normalization with population standard deviation, floored at
/// [`STD_FLOOR`] so one-element and constant batches stay finite.
pub fn zscore(values: &[f64]) -> Result<NormalizedBatch> {
    if values.is_empty() {
        return Err(validation!("cannot normalize an empty batch"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let denom = std.max(STD_FLOOR);
    Ok(NormalizedBatch {
        values: values.iter().map(|v| (v - mean) / denom).collect(),
        mean,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane_from(vals: &[f32], h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_vec((h, w), vals.to_vec()).unwrap()
    }

    fn lcg_plane(seed: u64, h: usize, w: usize, lo: f32, hi: f32) -> Array2<f32> {
        let mut state = seed.wrapping_add(0x9e3779b97f4a7c15);
        Array2::from_shape_fn((h, w), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((state >> 33) as f32) / (u32::MAX >> 1) as f32;
            lo + u.min(1.0) * (hi - lo)
        })
    }

    #[test]
    fn identical_planes_hit_the_cap() {
        let a = lcg_plane(1, 8, 8, 0.0, 1.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn constant_offset_gives_exact_psnr() {
        let a = plane_from(&[0.5; 64], 8, 8);
        let b = plane_from(&[0.6; 64], 8, 8);
        let p = psnr(&a, &b, 1.0).unwrap();
        // 0.6 - 0.5 is off by one f32 ulp, worth ~2e-6 dB.
        assert!((p - 20.0).abs() < 1e-5, "psnr = {p}");
    }

    #[test]
    fn psnr_matches_a_naive_double_loop() {
        let a = lcg_plane(7, 15, 11, 0.0, 1.0);
        let b = lcg_plane(8, 15, 11, 0.0, 1.0);
        let mut acc = 0.0f64;
        for y in 0..15 {
            for x in 0..11 {
                let d = a[[y, x]] as f64 - b[[y, x]] as f64;
                acc += d * d;
            }
        }
        let expect = 10.0 * (1.0 / (acc / 165.0)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() <= 1e-9);
    }

    #[test]
    fn correlation_reference_cases() {
        let a = lcg_plane(3, 6, 6, 0.0, 1.0);
        assert!((correlation_coefficient(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = a.mapv(|v| -v + 1.0);
        assert!((correlation_coefficient(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        let c = plane_from(&[0.25; 36], 6, 6);
        assert_eq!(correlation_coefficient(&a, &c).unwrap(), 0.0);
    }

    #[test]
    fn correlation_matches_two_pass_oracle() {
        let a = lcg_plane(10, 9, 13, 0.0, 1.0);
        let b = lcg_plane(11, 9, 13, 0.0, 1.0);
        // Textbook two-pass formula, recomputed independently.
        let n = 117.0f64;
        let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mut num = 0.0;
        let mut da2 = 0.0;
        let mut db2 = 0.0;
        for (&x, &y) in a.iter().zip(b.iter()) {
            num += (x as f64 - ma) * (y as f64 - mb);
            da2 += (x as f64 - ma).powi(2);
            db2 += (y as f64 - mb).powi(2);
        }
        let expect = num / (da2.sqrt() * db2.sqrt());
        assert!((correlation_coefficient(&a, &b).unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn zscore_reference_cases() {
        let z = zscore(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(z.values, vec![0.0, 0.0, 0.0]);
        let z = zscore(&[0.0, 2.0]).unwrap();
        assert_eq!(z.values, vec![-1.0, 1.0]);
        assert!(zscore(&[]).is_err());
    }

    #[test]
    fn delta_psnr_identity_is_zero() {
        let raw = crate::frame::Frame::constant(crate::frame::FrameRole::Raw, 0, 8, 8, 0.5).unwrap();
        let urf = crate::frame::Frame::new(
            crate::frame::FrameRole::Urf,
            0,
            lcg_plane(5, 8, 8, 0.0, 1.0),
            lcg_plane(6, 4, 4, 0.0, 1.0),
            lcg_plane(7, 4, 4, 0.0, 1.0),
            None,
        )
        .unwrap();
        let (dy, du, dv) = delta_psnr_channels(&urf, &raw, &urf, &raw).unwrap();
        assert_eq!((dy, du, dv), (0.0, 0.0, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn psnr_is_symmetric(seed in any::<u64>()) {
            let a = lcg_plane(seed, 8, 8, 0.0, 1.0);
            let b = lcg_plane(seed ^ 0xabcdef, 8, 8, 0.0, 1.0);
            let ab = psnr(&a, &b, 1.0).unwrap();
            let ba = psnr(&b, &a, 1.0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn psnr_decreases_with_noise_amplitude(seed in any::<u64>()) {
            let a = lcg_plane(seed, 8, 8, 0.2, 0.8);
            let noise = lcg_plane(seed ^ 0x5555, 8, 8, -1.0, 1.0);
            let mut prev = f64::INFINITY;
            for &amp in &[0.01f32, 0.03, 0.09] {
                let b = ndarray::Zip::from(&a).and(&noise).map_collect(|&x, &n| x + amp * n);
                let p = psnr(&a, &b, 1.0).unwrap();
                prop_assert!(p < prev);
                prev = p;
            }
        }

        #[test]
        fn correlation_is_affine_invariant(seed in any::<u64>(), scale in 0.1f32..4.0, shift in -0.5f32..0.5) {
            let a = lcg_plane(seed, 8, 8, 0.0, 1.0);
            let b = lcg_plane(seed ^ 0x1234, 8, 8, 0.0, 1.0);
            let base = correlation_coefficient(&a, &b).unwrap();
            let b2 = b.mapv(|v| scale * v + shift);
            let scaled = correlation_coefficient(&a, &b2).unwrap();
            prop_assert!((base - scaled).abs() < 1e-6, "{base} vs {scaled}");
        }

        #[test]
        fn zscore_moments_and_affine_invariance(seed in any::<u64>(), scale in 0.5f64..3.0, shift in -10.0f64..10.0) {
            let mut state = seed;
            let vals: Vec<f64> = (0..12).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 33) as f64 / (1u64 << 31) as f64 * 10.0
            }).collect();
            let z = zscore(&vals).unwrap();
            let mean = z.values.iter().sum::<f64>() / 12.0;
            let var = z.values.iter().map(|v| v * v).sum::<f64>() / 12.0;
            prop_assert!(mean.abs() <= 1e-9);
            if z.std > STD_FLOOR {
                prop_assert!((var.sqrt() - 1.0).abs() <= 1e-6);
            }
            let shifted: Vec<f64> = vals.iter().map(|v| scale * v + shift).collect();
            let z2 = zscore(&shifted).unwrap();
            for (x, y) in z.values.iter().zip(z2.values.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

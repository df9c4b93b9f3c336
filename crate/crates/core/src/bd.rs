//! Bjøntegaard delta rate / delta PSNR between two rate-distortion curves.
//!
//! Both metrics follow the canonical recipe: fit a cubic polynomial through
//! one axis as a function of the other (with bitrates on a log10 scale),
//! integrate the difference of the two fits over the overlapping interval,
//! and convert the average difference to percent bitrate or dB.

use std::path::Path;

use crate::error::{MifError, Result};
use crate::validation;

/// One rate-distortion measurement.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RdPoint {
    pub bitrate: f64,
    pub psnr: f64,
}

impl RdPoint {
    pub fn new(bitrate: f64, psnr: f64) -> RdPoint {
        RdPoint { bitrate, psnr }
    }
}

fn validate_curve(curve: &[RdPoint], name: &str) -> Result<()> {
    if curve.len() < 4 {
        return Err(validation!("{name} curve has {} points, need at least 4", curve.len()));
    }
    for p in curve {
        if !(p.bitrate > 0.0) || !p.psnr.is_finite() {
            return Err(validation!("{name} curve has an invalid point ({}, {})", p.bitrate, p.psnr));
        }
    }
    for w in curve.windows(2) {
        if w[1].bitrate <= w[0].bitrate {
            return Err(validation!("{name} curve bitrates must be strictly increasing"));
        }
        if w[1].psnr <= w[0].psnr {
            return Err(validation!("{name} curve PSNR must be strictly increasing with bitrate"));
        }
    }
    Ok(())
}

/// Least-squares cubic fit `y = sum c_k (x - center)^k`.
///
/// `center` is chosen by the caller (shared between the two curves being
/// compared) to keep the normal equations well conditioned.
fn polyfit_cubic(xs: &[f64], ys: &[f64], center: f64) -> Result<[f64; 4]> {
    debug_assert_eq!(xs.len(), ys.len());
    // Normal equations A c = b with A[i][j] = sum x^(i+j), b[i] = sum y x^i.
    let mut pow_sums = [0.0f64; 7];
    let mut b = [0.0f64; 4];
    for (&x0, &y) in xs.iter().zip(ys) {
        let x = x0 - center;
        let mut xp = 1.0;
        for (k, s) in pow_sums.iter_mut().enumerate() {
            *s += xp;
            if k < 4 {
                b[k] += y * xp;
            }
            xp *= x;
        }
    }
    let mut a = [[0.0f64; 5]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        for j in 0..4 {
            row[j] = pow_sums[i + j];
        }
        row[4] = b[i];
    }
    // Gaussian elimination with partial pivoting on the 4x5 augmented system.
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(MifError::Computation(
                "curve fit is singular (degenerate sample positions)".into(),
            ));
        }
        a.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..5 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut c = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut acc = a[row][4];
        for k in row + 1..4 {
            acc -= a[row][k] * c[k];
        }
        c[row] = acc / a[row][row];
    }
    Ok(c)
}

/// Definite integral of the fitted cubic over `[lo, hi]` (same centered frame).
fn integrate_cubic(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    anti(hi) - anti(lo)
}

struct FittedPair {
    anchor: [f64; 4],
    test: [f64; 4],
    lo: f64,
    hi: f64,
}

/// Shared fitting step: `x` and `y` extractors choose which axis is which.
fn fit_pair(
    curve_anchor: &[RdPoint],
    curve_test: &[RdPoint],
    x_of: impl Fn(&RdPoint) -> f64,
    y_of: impl Fn(&RdPoint) -> f64,
) -> Result<FittedPair> {
    validate_curve(curve_anchor, "anchor")?;
    validate_curve(curve_test, "test")?;

    let axis = |c: &[RdPoint]| -> (Vec<f64>, Vec<f64>) {
        (c.iter().map(&x_of).collect(), c.iter().map(&y_of).collect())
    };
    let (xa, ya) = axis(curve_anchor);
    let (xt, yt) = axis(curve_test);

    let min_max = |v: &[f64]| (v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (a_lo, a_hi) = min_max(&xa);
    let (t_lo, t_hi) = min_max(&xt);
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if !(hi > lo) {
        return Err(MifError::Computation(format!(
            "curves do not overlap on the integration axis: [{a_lo:.4},{a_hi:.4}] vs [{t_lo:.4},{t_hi:.4}]"
        )));
    }
    let center = 0.5 * (lo + hi);
    Ok(FittedPair {
        anchor: polyfit_cubic(&xa, &ya, center)?,
        test: polyfit_cubic(&xt, &yt, center)?,
        lo: lo - center,
        hi: hi - center,
    })
}

/// Average bitrate change of `curve_test` relative to `curve_anchor`, in
/// percent. Negative values mean the test curve needs less rate for the same
/// quality.
pub fn bd_rate(curve_anchor: &[RdPoint], curve_test: &[RdPoint]) -> Result<f64> {
    let fit = fit_pair(curve_anchor, curve_test, |p| p.psnr, |p| p.bitrate.log10())?;
    let width = fit.hi - fit.lo;
    let avg_log_diff =
        (integrate_cubic(&fit.test, fit.lo, fit.hi) - integrate_cubic(&fit.anchor, fit.lo, fit.hi)) / width;
    Ok((10f64.powf(avg_log_diff) - 1.0) * 100.0)
}

/// Average PSNR change of `curve_test` relative to `curve_anchor`, in dB.
pub fn bd_psnr(curve_anchor: &[RdPoint], curve_test: &[RdPoint]) -> Result<f64> {
    let fit = fit_pair(curve_anchor, curve_test, |p| p.bitrate.log10(), |p| p.psnr)?;
    let width = fit.hi - fit.lo;
    Ok((integrate_cubic(&fit.test, fit.lo, fit.hi) - integrate_cubic(&fit.anchor, fit.lo, fit.hi)) / width)
}

/// Reads RD curves from a `label,bitrate,psnr` CSV. Curves keep the order in
/// which their labels first appear; points keep file order.
pub fn read_rd_csv(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<RdPoint>)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
    let mut curves: Vec<(String, Vec<RdPoint>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if lineno == 0 && line.eq_ignore_ascii_case("label,bitrate,psnr") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(MifError::Format(format!(
                "{}:{}: expected `label,bitrate,psnr`, got {line:?}",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                MifError::Format(format!("{}:{}: bad {what} {s:?}", path.display(), lineno + 1))
            })
        };
        let point = RdPoint::new(parse(fields[1], "bitrate")?, parse(fields[2], "psnr")?);
        match curves.iter_mut().find(|(l, _)| l == fields[0]) {
            Some((_, pts)) => pts.push(point),
            None => curves.push((fields[0].to_string(), vec![point])),
        }
    }
    Ok(curves)
}

/// Writes RD curves as a `label,bitrate,psnr` CSV.
pub fn write_rd_csv(path: impl AsRef<Path>, curves: &[(String, Vec<RdPoint>)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("label,bitrate,psnr\n");
    for (label, pts) in curves {
        for p in pts {
            out.push_str(&format!("{label},{:.6},{:.6}\n", p.bitrate, p.psnr));
        }
    }
    std::fs::write(path, out).map_err(|e| MifError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn anchor_curve() -> Vec<RdPoint> {
        vec![
            RdPoint::new(400.0, 30.5),
            RdPoint::new(800.0, 33.2),
            RdPoint::new(1600.0, 36.0),
            RdPoint::new(3200.0, 38.6),
        ]
    }

    /// Simpson's rule on the fitted cubics, as an independent integration route.
    fn bd_psnr_numeric(anchor: &[RdPoint], test: &[RdPoint]) -> f64 {
        let fit = fit_pair(anchor, test, |p| p.bitrate.log10(), |p| p.psnr).unwrap();
        let eval = |c: &[f64; 4], x: f64| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x;
        let n = 4096;
        let h = (fit.hi - fit.lo) / n as f64;
        let f = |x: f64| eval(&fit.test, x) - eval(&fit.anchor, x);
        let mut acc = f(fit.lo) + f(fit.hi);
        for i in 1..n {
            let x = fit.lo + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        acc * h / 3.0 / (fit.hi - fit.lo)
    }

    fn bd_rate_numeric(anchor: &[RdPoint], test: &[RdPoint]) -> f64 {
        let fit = fit_pair(anchor, test, |p| p.psnr, |p| p.bitrate.log10()).unwrap();
        let eval = |c: &[f64; 4], x: f64| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x;
        let n = 4096;
        let h = (fit.hi - fit.lo) / n as f64;
        let f = |x: f64| eval(&fit.test, x) - eval(&fit.anchor, x);
        let mut acc = f(fit.lo) + f(fit.hi);
        for i in 1..n {
            let x = fit.lo + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        let avg = acc * h / 3.0 / (fit.hi - fit.lo);
        (10f64.powf(avg) - 1.0) * 100.0
    }

    #[test]
    fn identical_curves_are_zero() {
        let a = anchor_curve();
        assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
        assert_eq!(bd_psnr(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn scaled_rate_gives_constant_percent() {
        let a = anchor_curve();
        let t: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.bitrate * 0.9, p.psnr)).collect();
        let bd = bd_rate(&a, &t).unwrap();
        assert!((bd + 10.0).abs() <= 0.1, "bd = {bd}");
    }

    #[test]
    fn constant_psnr_offset_is_recovered() {
        let a = anchor_curve();
        let t: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.bitrate, p.psnr + 0.5)).collect();
        let bd = bd_psnr(&a, &t).unwrap();
        assert!((bd - 0.5).abs() <= 1e-6, "bd = {bd}");
    }

    #[test]
    fn better_anchor_means_negative_bd_rate_for_it() {
        // Test curve sits 1 dB above the anchor at equal bitrates, so the test
        // curve saves rate: BD-rate must be negative and must agree with the
        // dense numerical integration oracle.
        let a = anchor_curve();
        let t: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.bitrate, p.psnr + 1.0)).collect();
        let bd = bd_rate(&a, &t).unwrap();
        assert!(bd < 0.0, "bd = {bd}");
        let oracle = bd_rate_numeric(&a, &t);
        assert!((bd - oracle).abs() < 1e-3, "{bd} vs {oracle}");
        // A bigger offset saves at least as much rate.
        let t2: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.bitrate, p.psnr + 2.0)).collect();
        assert!(bd_rate(&a, &t2).unwrap() < bd);
    }

    #[test]
    fn errors_are_categorized() {
        let a = anchor_curve();
        assert_eq!(bd_rate(&a[..3], &a).unwrap_err().category(), "validation");
        let far: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.bitrate, p.psnr + 50.0)).collect();
        assert_eq!(bd_rate(&a, &far).unwrap_err().category(), "computation");
        let mut bad = anchor_curve();
        bad[2].bitrate = bad[1].bitrate;
        assert_eq!(bd_rate(&bad, &a).unwrap_err().category(), "validation");
    }

    #[test]
    fn rd_csv_round_trip() {
        let curves = vec![
            ("anchor".to_string(), anchor_curve()),
            ("test".to_string(), anchor_curve().iter().map(|p| RdPoint::new(p.bitrate * 0.95, p.psnr)).collect()),
        ];
        let path = std::env::temp_dir().join(format!("mif-rd-{}.csv", std::process::id()));
        write_rd_csv(&path, &curves).unwrap();
        let back = read_rd_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "anchor");
        assert_eq!(back[1].1.len(), 4);
        assert!((back[1].1[0].bitrate - 380.0).abs() < 1e-3);
        std::fs::remove_file(&path).unwrap();
    }

    fn perturbed_curve(seed: u64) -> (Vec<RdPoint>, Vec<RdPoint>) {
        let mut state = seed | 1;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        let anchor: Vec<RdPoint> = (0..5)
            .map(|i| RdPoint::new(300.0 * 2f64.powi(i), 30.0 + 2.2 * i as f64 + next() * 0.2))
            .collect();
        let test: Vec<RdPoint> = anchor
            .iter()
            .map(|p| RdPoint::new(p.bitrate * (0.85 + 0.1 * next()), p.psnr + 0.1 + 0.3 * next()))
            .collect();
        (anchor, test)
    }

    #[test]
    fn analytic_integration_matches_dense_numeric_oracle() {
        for seed in [3u64, 17, 99, 2024] {
            let (a, t) = perturbed_curve(seed);
            let bd = bd_psnr(&a, &t).unwrap();
            let oracle = bd_psnr_numeric(&a, &t);
            assert!((bd - oracle).abs() <= 1e-3, "seed {seed}: {bd} vs {oracle}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn bd_psnr_antisymmetry(seed in any::<u64>()) {
            let (a, t) = perturbed_curve(seed);
            let ab = bd_psnr(&a, &t).unwrap();
            let ba = bd_psnr(&t, &a).unwrap();
            prop_assert!((ab + ba).abs() < 1e-6, "{ab} vs {ba}");
        }

        #[test]
        fn bd_rate_reciprocity(seed in any::<u64>()) {
            let (a, t) = perturbed_curve(seed);
            let ab = bd_rate(&a, &t).unwrap();
            let ba = bd_rate(&t, &a).unwrap();
            let expected = -ba / (1.0 + ba / 100.0);
            prop_assert!((ab - expected).abs() < 1e-3, "{ab} vs {expected}");
        }
    }
}

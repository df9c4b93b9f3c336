//! Reference frame selection.
//!
//! For each reconstruction the previous `N` decoded frames form a candidate
//! pool. Six metrics (per-channel PSNR increment and content correlation)
//! decide validity; a two-layer network ranks the valid candidates and the
//! top `M` become the references for multi-frame filtering. Ground-truth
//! ranking potentials come from a classical block-matching compensation
//! oracle, keeping label generation independent of the learned compensation
//! network.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamSet;
use crate::error::Result;
use crate::frame::Frame;
use crate::metrics::{correlation_coefficient, delta_psnr_channels, psnr, zscore, STD_FLOOR};
use crate::validation;

/// Selection hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct RfsConfig {
    /// Pool size N: how many previous frames are examined.
    pub pool_size: usize,
    /// Correlation threshold tau in the validity rule.
    pub cc_threshold: f64,
    /// Number of references M handed to the multi-frame filter.
    pub num_selected: usize,
}

impl Default for RfsConfig {
    fn default() -> Self {
        RfsConfig { pool_size: 16, cc_threshold: 0.3, num_selected: 2 }
    }
}

impl RfsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_selected < 1 || self.pool_size < self.num_selected {
            return Err(validation!(
                "pool size {} must be >= num_selected {} >= 1",
                self.pool_size,
                self.num_selected
            ));
        }
        if !(-1.0 < self.cc_threshold && self.cc_threshold < 1.0) {
            return Err(validation!("cc threshold must lie in (-1, 1)"));
        }
        Ok(())
    }
}

/// Metrics and bookkeeping for one (pool frame, target) pair.
#[derive(Debug, Clone)]
pub struct RfsRecord {
    pub pool_index: usize,
    pub target_index: usize,
    /// PSNR increment of the pool frame over the reconstruction, per channel.
    pub d_psnr: (f64, f64, f64),
    /// Content correlation between the pool frame and the reconstruction.
    pub cc: (f64, f64, f64),
    pub valid: bool,
    /// Ground-truth reference potential (training only), dB.
    pub potential_gt: Option<f64>,
    /// Network-predicted potential (z-scored within the batch).
    pub potential_pred: Option<f64>,
}

impl RfsRecord {
    /// Feature order consumed by the ranking network.
    pub fn features(&self) -> [f64; 6] {
        [self.d_psnr.0, self.d_psnr.1, self.d_psnr.2, self.cc.0, self.cc.1, self.cc.2]
    }
}

/// The validity rule: a pool frame is usable if at least one channel has both
/// a positive PSNR increment and correlation above the threshold.
pub fn reference_validity(d_psnr: (f64, f64, f64), cc: (f64, f64, f64), tau: f64) -> bool {
    let channel = |d: f64, c: f64| d > 0.0 && c > tau;
    channel(d_psnr.0, cc.0) || channel(d_psnr.1, cc.1) || channel(d_psnr.2, cc.2)
}

fn raw_for<'a>(raws: &'a [Frame], index: usize, what: &str) -> Result<&'a Frame> {
    raws.iter()
        .find(|f| f.index() == index)
        .ok_or_else(|| validation!("missing raw frame for {what} index {index}"))
}

/// Computes the six metrics and validity for every pool frame.
///
/// `raws` must contain the raw frames for the target index and every pool
/// index. An empty pool yields an empty list.
pub fn compute_metrics(
    urf: &Frame,
    pool: &[&Frame],
    raws: &[Frame],
    config: &RfsConfig,
) -> Result<Vec<RfsRecord>> {
    config.validate()?;
    let raw_n = raw_for(raws, urf.index(), "target")?;
    let mut records = Vec::with_capacity(pool.len());
    for p in pool {
        if p.dim() != urf.dim() {
            return Err(validation!(
                "pool frame {} is {:?}, target is {:?}",
                p.index(),
                p.dim(),
                urf.dim()
            ));
        }
        let raw_i = raw_for(raws, p.index(), "pool")?;
        let d_psnr = delta_psnr_channels(p, raw_i, urf, raw_n)?;
        let cc = (
            correlation_coefficient(p.y(), urf.y())?,
            correlation_coefficient(p.u(), urf.u())?,
            correlation_coefficient(p.v(), urf.v())?,
        );
        records.push(RfsRecord {
            pool_index: p.index(),
            target_index: urf.index(),
            d_psnr,
            cc,
            valid: reference_validity(d_psnr, cc, config.cc_threshold),
            potential_gt: None,
            potential_pred: None,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Ranking network: 6 -> 12 -> 1, PReLU on both layers, outputs z-scored
// across the batch (one batch = the valid references of one target frame).
// ---------------------------------------------------------------------------

const HIDDEN: usize = 12;

#[derive(Debug, Clone)]
pub struct RfsNet {
    pub params: ParamSet<f64>,
}

/// Forward-pass caches needed for backprop.
pub struct RfsForward {
    /// Pre-activation of the hidden layer, per record.
    pre_hidden: Vec<[f64; HIDDEN]>,
    hidden: Vec<[f64; HIDDEN]>,
    /// Pre-activation of the output node, per record.
    pre_out: Vec<f64>,
    /// Activated (un-normalized) outputs.
    out: Vec<f64>,
    /// Z-scored outputs: the predicted potentials.
    pub scores: Vec<f64>,
}

impl RfsNet {
    /// Parameter layout: `layer1.w [12,6]`, `layer1.b [12]`, `layer1.slope [1]`,
    /// `layer2.w [1,12]`, `layer2.b [1]`, `layer2.slope [1]`.
    pub fn new(rng: &mut ChaCha8Rng) -> RfsNet {
        let mut params = ParamSet::new();
        let b1 = 1.0 / 6f64.sqrt();
        params.add(
            "layer1.w",
            ArrayD::from_shape_fn(IxDyn(&[HIDDEN, 6]), |_| rng.gen_range(-b1..b1)),
        );
        params.add("layer1.b", ArrayD::zeros(IxDyn(&[HIDDEN])));
        params.add("layer1.slope", ArrayD::from_elem(IxDyn(&[1]), 0.25));
        let b2 = 1.0 / (HIDDEN as f64).sqrt();
        params.add(
            "layer2.w",
            ArrayD::from_shape_fn(IxDyn(&[1, HIDDEN]), |_| rng.gen_range(-b2..b2)),
        );
        params.add("layer2.b", ArrayD::zeros(IxDyn(&[1])));
        params.add("layer2.slope", ArrayD::from_elem(IxDyn(&[1]), 0.25));
        RfsNet { params }
    }

    pub fn from_params(params: ParamSet<f64>) -> Result<RfsNet> {
        let expect: [(&str, &[usize]); 6] = [
            ("layer1.w", &[HIDDEN, 6]),
            ("layer1.b", &[HIDDEN]),
            ("layer1.slope", &[1]),
            ("layer2.w", &[1, HIDDEN]),
            ("layer2.b", &[1]),
            ("layer2.slope", &[1]),
        ];
        let mut ids = params.ids();
        for (name, shape) in expect {
            let id = ids
                .next()
                .ok_or_else(|| validation!("ranking network parameters truncated at {name}"))?;
            if params.name(id) != name || params.value(id).shape() != shape {
                return Err(validation!(
                    "unexpected parameter {} {:?}, wanted {name} {shape:?}",
                    params.name(id),
                    params.value(id).shape()
                ));
            }
        }
        Ok(RfsNet { params })
    }

    fn get(&self, idx: usize) -> &ArrayD<f64> {
        self.params.value(self.params.id_at(idx))
    }

    /// Raw two-layer forward with caches; `scores` are z-scored outputs.
    pub fn forward(&self, features: &[[f64; 6]]) -> Result<RfsForward> {
        if features.is_empty() {
            return Err(validation!("ranking batch must be non-empty"));
        }
        let w1 = self.get(0);
        let b1 = self.get(1);
        let a1 = self.get(2)[[0]];
        let w2 = self.get(3);
        let b2 = self.get(4);
        let a2 = self.get(5)[[0]];

        let n = features.len();
        let mut pre_hidden = Vec::with_capacity(n);
        let mut hidden = Vec::with_capacity(n);
        let mut pre_out = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for x in features {
            let mut t = [0.0f64; HIDDEN];
            let mut h = [0.0f64; HIDDEN];
            for j in 0..HIDDEN {
                let mut acc = b1[[j]];
                for (k, &xv) in x.iter().enumerate() {
                    acc += w1[[j, k]] * xv;
                }
                t[j] = acc;
                h[j] = if acc >= 0.0 { acc } else { a1 * acc };
            }
            let mut u = b2[[0]];
            for j in 0..HIDDEN {
                u += w2[[0, j]] * h[j];
            }
            pre_hidden.push(t);
            hidden.push(h);
            pre_out.push(u);
            out.push(if u >= 0.0 { u } else { a2 * u });
        }
        let scores = zscore(&out)?.values;
        Ok(RfsForward { pre_hidden, hidden, pre_out, out, scores })
    }

    /// Predicted potentials for a batch of valid records.
    pub fn predict(&self, records: &[&RfsRecord]) -> Result<Vec<f64>> {
        if records.iter().any(|r| !r.valid) {
            return Err(validation!("ranking batch must contain only valid records"));
        }
        let features: Vec<[f64; 6]> = records.iter().map(|r| r.features()).collect();
        Ok(self.forward(&features)?.scores)
    }

    /// Backpropagates `grad_scores` (d loss / d z-scored outputs) to parameter
    /// gradients, ordered like the parameter set.
    pub fn backward(
        &self,
        features: &[[f64; 6]],
        fwd: &RfsForward,
        grad_scores: &[f64],
    ) -> Vec<ArrayD<f64>> {
        let a1 = self.get(2)[[0]];
        let w2 = self.get(3);
        let a2 = self.get(5)[[0]];
        let n = features.len();
        let nf = n as f64;

        // Gradient through the batch z-score.
        let mean = fwd.out.iter().sum::<f64>() / nf;
        let var = fwd.out.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / nf;
        let sigma = var.sqrt();
        let g_mean = grad_scores.iter().sum::<f64>() / nf;
        let mut grad_out = vec![0.0f64; n];
        if sigma > STD_FLOOR {
            let gz_mean =
                grad_scores.iter().zip(&fwd.scores).map(|(g, z)| g * z).sum::<f64>() / nf;
            for i in 0..n {
                grad_out[i] = (grad_scores[i] - g_mean - fwd.scores[i] * gz_mean) / sigma;
            }
        } else {
            for i in 0..n {
                grad_out[i] = (grad_scores[i] - g_mean) / STD_FLOOR;
            }
        }

        let mut g_w1 = ArrayD::<f64>::zeros(IxDyn(&[HIDDEN, 6]));
        let mut g_b1 = ArrayD::<f64>::zeros(IxDyn(&[HIDDEN]));
        let mut g_a1 = 0.0f64;
        let mut g_w2 = ArrayD::<f64>::zeros(IxDyn(&[1, HIDDEN]));
        let mut g_b2 = ArrayD::<f64>::zeros(IxDyn(&[1]));
        let mut g_a2 = 0.0f64;

        for i in 0..n {
            let u = fwd.pre_out[i];
            let gy = grad_out[i];
            let gu = if u >= 0.0 { gy } else { a2 * gy };
            if u < 0.0 {
                g_a2 += gy * u;
            }
            g_b2[[0]] += gu;
            for j in 0..HIDDEN {
                g_w2[[0, j]] += gu * fwd.hidden[i][j];
            }
            for j in 0..HIDDEN {
                let gh = gu * w2[[0, j]];
                let t = fwd.pre_hidden[i][j];
                let gt = if t >= 0.0 { gh } else { a1 * gh };
                if t < 0.0 {
                    g_a1 += gh * t;
                }
                g_b1[[j]] += gt;
                for (k, &xv) in features[i].iter().enumerate() {
                    g_w1[[j, k]] += gt * xv;
                }
            }
        }
        vec![
            g_w1,
            g_b1,
            ArrayD::from_elem(IxDyn(&[1]), g_a1),
            g_w2,
            g_b2,
            ArrayD::from_elem(IxDyn(&[1]), g_a2),
        ]
    }
}

/// Ground-truth potentials z-scored within their batch, as compared against
/// predictions by the ranking loss.
pub fn zscore_gt(gt: &[f64]) -> Result<Vec<f64>> {
    Ok(zscore(gt)?.values)
}

/// Ranking loss: the ground-truth potentials are z-scored within the batch
/// and compared to the (already z-scored) predictions by summed squares.
pub fn rfs_loss(gt: &[f64], pred: &[f64]) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(validation!("loss needs equal lengths, got {} vs {}", gt.len(), pred.len()));
    }
    let gt_z = zscore(gt)?.values;
    Ok(gt_z.iter().zip(pred).map(|(r, p)| (r - p) * (r - p)).sum())
}

/// Outcome of reference selection for one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    /// Pool indices of the selected references, best first.
    Selected(Vec<usize>),
    /// Fewer valid candidates than requested; single-frame filtering applies.
    NotEnough { valid: usize },
}

/// Ranks the valid records and picks the top M.
///
/// Ties in predicted potential break toward the temporally closer (larger)
/// pool index. The result does not depend on the input record order.
pub fn select_references(
    records: &[RfsRecord],
    net: &RfsNet,
    config: &RfsConfig,
) -> Result<Selection> {
    config.validate()?;
    let valid: Vec<&RfsRecord> = records.iter().filter(|r| r.valid).collect();
    if valid.len() < config.num_selected {
        return Ok(Selection::NotEnough { valid: valid.len() });
    }
    let scores = net.predict(&valid)?;
    let mut order: Vec<(f64, usize)> =
        scores.iter().zip(&valid).map(|(&s, r)| (s, r.pool_index)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
    Ok(Selection::Selected(order.iter().take(config.num_selected).map(|&(_, i)| i).collect()))
}

// ---------------------------------------------------------------------------
// Compensation oracle for ground-truth potentials: full-search integer block
// matching, 16x16 blocks, +-8 pixel range, SAD cost.
// ---------------------------------------------------------------------------

const BM_BLOCK: usize = 16;
const BM_RANGE: isize = 8;

/// Compensates `source` toward `target` with full-search block matching and
/// returns the motion-aligned source plane.
pub fn block_match_compensate(source: &Array2<f32>, target: &Array2<f32>) -> Array2<f32> {
    let (h, w) = target.dim();
    debug_assert_eq!(source.dim(), (h, w));
    let mut out = Array2::zeros((h, w));
    let mut ty = 0;
    while ty < h {
        let bh = BM_BLOCK.min(h - ty);
        let mut tx = 0;
        while tx < w {
            let bw = BM_BLOCK.min(w - tx);
            let mut best = (f64::INFINITY, 0isize, 0isize);
            for dy in -BM_RANGE..=BM_RANGE {
                let sy = ty as isize + dy;
                if sy < 0 || sy as usize + bh > h {
                    continue;
                }
                for dx in -BM_RANGE..=BM_RANGE {
                    let sx = tx as isize + dx;
                    if sx < 0 || sx as usize + bw > w {
                        continue;
                    }
                    let mut sad = 0.0f64;
                    for y in 0..bh {
                        for x in 0..bw {
                            let d = source[[sy as usize + y, sx as usize + x]]
                                - target[[ty + y, tx + x]];
                            sad += d.abs() as f64;
                        }
                    }
                    if sad < best.0 {
                        best = (sad, dy, dx);
                    }
                }
            }
            let (_, dy, dx) = best;
            for y in 0..bh {
                for x in 0..bw {
                    out[[ty + y, tx + x]] =
                        source[[(ty as isize + dy) as usize + y, (tx as isize + dx) as usize + x]];
                }
            }
            tx += BM_BLOCK;
        }
        ty += BM_BLOCK;
    }
    out
}

/// Ground-truth reference potential: luma PSNR between the block-matching
/// compensated pool frame and the raw frame at the target index.
pub fn ground_truth_potential(pool_frame: &Frame, urf: &Frame, raw_n: &Frame) -> Result<f64> {
    if pool_frame.dim() != urf.dim() || urf.dim() != raw_n.dim() {
        return Err(validation!("potential inputs must share one resolution"));
    }
    let compensated = block_match_compensate(pool_frame.y(), urf.y());
    psnr(&compensated, raw_n.y(), 1.0)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut j = k;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[k]] {
                j += 1;
            }
            let avg = (k + j) as f64 / 2.0 + 1.0;
            for &i in &idx[k..=j] {
                r[i] = avg;
            }
            k = j + 1;
        }
        r
    };
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da.sqrt() * db.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::FrameRole;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn record(d: (f64, f64, f64), cc: (f64, f64, f64), i: usize, tau: f64) -> RfsRecord {
        RfsRecord {
            pool_index: i,
            target_index: 100,
            d_psnr: d,
            cc,
            valid: reference_validity(d, cc, tau),
            potential_gt: None,
            potential_pred: None,
        }
    }

    #[test]
    fn validity_truth_table() {
        // One good channel is enough, even when the others fail.
        assert!(reference_validity((0.5, -1.0, -1.0), (0.9, 0.0, 0.0), 0.3));
        // No positive PSNR increment anywhere: invalid.
        assert!(!reference_validity((0.0, -0.2, -3.0), (0.9, 0.9, 0.9), 0.3));
        // Positive increment but correlation at or below tau: invalid.
        assert!(!reference_validity((0.5, -1.0, -1.0), (0.2, 0.0, 0.0), 0.3));
        // Threshold is strict.
        assert!(!reference_validity((0.5, -1.0, -1.0), (0.3, 0.0, 0.0), 0.3));
    }

    #[test]
    fn validity_is_monotone_in_metrics() {
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
        };
        for _ in 0..500 {
            let d = (next(), next(), next());
            let cc = (next(), next(), next());
            let v = reference_validity(d, cc, 0.3);
            let bump = 0.37;
            // Raising any metric never flips valid -> invalid.
            let cases = [
                ((d.0 + bump, d.1, d.2), cc),
                ((d.0, d.1 + bump, d.2), cc),
                ((d.0, d.1, d.2 + bump), cc),
                (d, (cc.0 + bump, cc.1, cc.2)),
                (d, (cc.0, cc.1 + bump, cc.2)),
                (d, (cc.0, cc.1, cc.2 + bump)),
            ];
            for (d2, cc2) in cases {
                assert!(!v || reference_validity(d2, cc2, 0.3));
            }
        }
    }

    #[test]
    fn single_record_batch_normalizes_to_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let net = RfsNet::new(&mut r);
        let rec = record((0.5, 0.1, 0.1), (0.9, 0.8, 0.7), 3, 0.3);
        let scores = net.predict(&[&rec]).unwrap();
        assert_eq!(scores, vec![0.0]);
    }

    #[test]
    fn batch_scores_have_zero_mean() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let net = RfsNet::new(&mut r);
        let recs: Vec<RfsRecord> = (0..7)
            .map(|i| record((0.1 * i as f64 + 0.05, 0.0, 0.0), (0.9, 0.5, 0.5), i, 0.3))
            .collect();
        let refs: Vec<&RfsRecord> = recs.iter().collect();
        let scores = net.predict(&refs).unwrap();
        let mean = scores.iter().sum::<f64>() / 7.0;
        assert!(mean.abs() <= 1e-6);
    }

    /// Hand-rolled matrix arithmetic for a fixed tiny parameter setting.
    #[test]
    fn forward_matches_hand_computation() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut net = RfsNet::new(&mut r);
        // Simple params: w1 rows pick features, slopes 0.5, w2 sums hidden.
        net.params.value_mut(net.params.id_at(0)).fill(0.0);
        for j in 0..HIDDEN {
            net.params.value_mut(net.params.id_at(0))[[j, j % 6]] = if j % 2 == 0 { 1.0 } else { -1.0 };
        }
        net.params.value_mut(net.params.id_at(1)).fill(0.1);
        net.params.value_mut(net.params.id_at(2)).fill(0.5);
        net.params.value_mut(net.params.id_at(3)).fill(0.25);
        net.params.value_mut(net.params.id_at(4)).fill(-0.2);
        net.params.value_mut(net.params.id_at(5)).fill(0.5);

        let x = [0.4, -0.3, 0.2, 0.8, 0.6, -0.5];
        let fwd = net.forward(&[x]).unwrap();
        // By hand: t_j = ±x[j%6] + 0.1, h = prelu(t, 0.5), u = 0.25*sum(h) - 0.2.
        let mut expect_u = -0.2f64;
        for j in 0..HIDDEN {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let t = sign * x[j % 6] + 0.1;
            let h = if t >= 0.0 { t } else { 0.5 * t };
            expect_u += 0.25 * h;
        }
        let expect_y = if expect_u >= 0.0 { expect_u } else { 0.5 * expect_u };
        assert!((fwd.out[0] - expect_y).abs() <= 1e-6, "{} vs {expect_y}", fwd.out[0]);
    }

    #[test]
    fn loss_reference_cases() {
        assert_eq!(rfs_loss(&[1.0, 3.0], &[-1.0, 1.0]).unwrap(), 0.0);
        let l = rfs_loss(&[1.0, 3.0], &[1.0, -1.0]).unwrap();
        assert_eq!(l, 8.0);
        assert!(rfs_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut net = RfsNet::new(&mut r);
        let features: Vec<[f64; 6]> = (0..5)
            .map(|i| {
                let mut f = [0.0; 6];
                for (k, v) in f.iter_mut().enumerate() {
                    *v = ((i * 7 + k * 3) % 11) as f64 / 11.0 - 0.4;
                }
                f
            })
            .collect();
        let gt: Vec<f64> = (0..5).map(|i| (i as f64 * 1.3).sin()).collect();

        let loss_of = |net: &RfsNet| -> f64 {
            let fwd = net.forward(&features).unwrap();
            rfs_loss(&gt, &fwd.scores).unwrap()
        };
        let fwd = net.forward(&features).unwrap();
        let gt_z = zscore(&gt).unwrap().values;
        let grad_scores: Vec<f64> =
            fwd.scores.iter().zip(&gt_z).map(|(p, r)| 2.0 * (p - r)).collect();
        let grads = net.backward(&features, &fwd, &grad_scores);

        let eps = 1e-5;
        for idx in 0..6 {
            let id = net.params.id_at(idx);
            for k in 0..net.params.value(id).len() {
                let orig = net.params.value(id).as_slice().unwrap()[k];
                net.params.value_mut(id).as_slice_mut().unwrap()[k] = orig + eps;
                let lp = loss_of(&net);
                net.params.value_mut(id).as_slice_mut().unwrap()[k] = orig - eps;
                let lm = loss_of(&net);
                net.params.value_mut(id).as_slice_mut().unwrap()[k] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads[idx].as_slice().unwrap()[k];
                // The absolute floor absorbs central-difference noise on
                // parameters the z-score makes locally inert.
                assert!(
                    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5) <= 1e-4,
                    "param {idx}[{k}]: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn selection_semantics() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let net = RfsNet::new(&mut r);
        let cfg = RfsConfig { pool_size: 16, cc_threshold: 0.3, num_selected: 2 };

        // No valid records.
        let recs = vec![record((-1.0, -1.0, -1.0), (0.9, 0.9, 0.9), 0, 0.3)];
        assert_eq!(select_references(&recs, &net, &cfg).unwrap(), Selection::NotEnough { valid: 0 });

        // Three valid records with distinct scores: the two best win.
        let recs: Vec<RfsRecord> = vec![
            record((0.9, 0.0, 0.0), (0.9, 0.9, 0.9), 10, 0.3),
            record((0.1, 0.0, 0.0), (0.8, 0.8, 0.8), 11, 0.3),
            record((-5.0, 0.5, 0.0), (0.1, 0.9, 0.9), 12, 0.3),
        ];
        let Selection::Selected(sel) = select_references(&recs, &net, &cfg).unwrap() else {
            panic!("expected a selection");
        };
        assert_eq!(sel.len(), 2);

        // Permutation invariance.
        let mut rev = recs.clone();
        rev.reverse();
        let Selection::Selected(sel2) = select_references(&rev, &net, &cfg).unwrap() else {
            panic!("expected a selection");
        };
        assert_eq!(sel, sel2);
    }

    #[test]
    fn tie_break_prefers_temporally_closer() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let net = RfsNet::new(&mut r);
        let cfg = RfsConfig { pool_size: 16, cc_threshold: 0.3, num_selected: 2 };
        // Two identical records (tied scores) plus two weaker distinct ones.
        let strong = (3.0, 3.0, 3.0);
        let cc = (0.9, 0.9, 0.9);
        let recs = vec![
            record(strong, cc, 4, 0.3),
            record(strong, cc, 9, 0.3),
            record((0.01, 0.0, 0.0), (0.5, 0.4, 0.4), 2, 0.3),
        ];
        let Selection::Selected(sel) = select_references(&recs, &net, &cfg).unwrap() else {
            panic!("expected selection");
        };
        // The tied pair must come out later-index first.
        assert_eq!(&sel[..2], &[9, 4]);
    }

    #[test]
    fn shift_in_final_bias_does_not_change_scores() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut net = RfsNet::new(&mut r);
        let recs: Vec<RfsRecord> = (0..6)
            .map(|i| record((0.2 * i as f64 + 0.1, 0.0, 0.0), (0.9, 0.6, 0.6), i, 0.3))
            .collect();
        let refs: Vec<&RfsRecord> = recs.iter().collect();
        let before = net.predict(&refs).unwrap();
        // Shift every pre-normalization output by a constant; keep it in the
        // linear region so the shift passes through the activation.
        let id = net.params.id_at(4);
        net.params.value_mut(id)[[0]] += 5.0;
        let after = net.predict(&refs).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn block_matching_recovers_integer_shifts() {
        let mut plane = Array2::zeros((48, 48));
        for y in 0..48usize {
            for x in 0..48usize {
                plane[[y, x]] = ((x as f32 * 0.7).sin() * (y as f32 * 0.5).cos() * 0.4 + 0.5).clamp(0.0, 1.0);
            }
        }
        // Source = target shifted by (3, -2).
        let mut source = Array2::zeros((48, 48));
        for y in 0..48usize {
            for x in 0..48usize {
                let sy = (y as isize + 2).clamp(0, 47) as usize;
                let sx = (x as isize - 3).clamp(0, 47) as usize;
                source[[y, x]] = plane[[sy, sx]];
            }
        }
        let comp = block_match_compensate(&source, &plane);
        // Blocks whose shifted source stays inside the frame (and clear of the
        // clamped construction bands) recover the shift exactly.
        let mut max_err = 0.0f32;
        for y in 16..32 {
            for x in 0..32 {
                max_err = max_err.max((comp[[y, x]] - plane[[y, x]]).abs());
            }
        }
        assert!(max_err <= 1e-6, "max recoverable-region error {max_err}");
    }

    #[test]
    fn potential_orders_shifted_above_noise() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let mut plane = Array2::zeros((48, 48));
        for v in plane.iter_mut() {
            *v = rand::Rng::gen_range(&mut r, 0.2..0.8);
        }
        // Smooth the noise so blocks are matchable.
        let mut smooth = plane.clone();
        for y in 1..47 {
            for x in 1..47 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += plane[[y + dy - 1, x + dx - 1]];
                    }
                }
                smooth[[y, x]] = acc / 9.0;
            }
        }
        let raw = Frame::new(
            FrameRole::Raw,
            5,
            smooth.clone(),
            Array2::from_elem((24, 24), 0.5),
            Array2::from_elem((24, 24), 0.5),
            None,
        )
        .unwrap();
        let urf = raw.with_role(FrameRole::Urf);

        let mut shifted = Array2::zeros((48, 48));
        for y in 0..48usize {
            for x in 0..48usize {
                shifted[[y, x]] = smooth[[y.min(46) + 1, x]];
            }
        }
        let shifted_frame = raw.with_luma(shifted, FrameRole::Pool).unwrap();
        let mut noise_plane = Array2::zeros((48, 48));
        for v in noise_plane.iter_mut() {
            *v = rand::Rng::gen_range(&mut r, 0.0..1.0);
        }
        let noise_frame = raw.with_luma(noise_plane, FrameRole::Pool).unwrap();

        let p_shift = ground_truth_potential(&shifted_frame, &urf, &raw).unwrap();
        let p_noise = ground_truth_potential(&noise_frame, &urf, &raw).unwrap();
        assert!(p_shift > p_noise + 10.0, "shifted {p_shift} dB vs noise {p_noise} dB");
    }

    #[test]
    fn spearman_reference_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[5.0, -2.0, -8.0]) + 1.0).abs() < 1e-12);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((s - 0.8).abs() < 1e-12);
    }
}

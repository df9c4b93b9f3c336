//! Scalar-type-generic number crunching behind the tape ops.
//!
//! Everything here works on contiguous row-major `[B, C, H, W]` buffers and
//! must stay deterministic: fixed iteration order, fixed accumulator
//! patterns, parallelism only across disjoint output regions.

use ndarray::{Array4, ArrayView4, ArrayViewMut4};
use rayon::prelude::*;

use super::Real;

/// `dst[x] += a*src[x-1] + b*src[x] + c*src[x+1]` with zero padding.
///
/// The interior runs over zipped shifted slices so the bounds checks vanish
/// and the loop vectorizes.
#[inline]
fn row3_acc<T: Real>(dst: &mut [T], src: &[T], a: T, b: T, c: T) {
    let w = dst.len();
    debug_assert_eq!(src.len(), w);
    if w == 1 {
        dst[0] = b.mul_add(src[0], dst[0]);
        return;
    }
    dst[0] = b.mul_add(src[0], c.mul_add(src[1], dst[0]));
    let (mid, last) = dst[1..].split_at_mut(w - 2);
    for (((d, &l), &m), &r) in mid.iter_mut().zip(&src[..w - 2]).zip(&src[1..w - 1]).zip(&src[2..]) {
        *d = a.mul_add(l, b.mul_add(m, c.mul_add(r, *d)));
    }
    last[0] = a.mul_add(src[w - 2], b.mul_add(src[w - 1], last[0]));
}

/// Fused interior-row kernel: applies all nine taps of a 3x3 kernel in one
/// pass over the destination row. `r0`, `r1`, `r2` are the source rows above,
/// at, and below the destination row.
#[inline]
fn row9_acc<T: Real>(dst: &mut [T], r0: &[T], r1: &[T], r2: &[T], k: &[T]) {
    let w = dst.len();
    debug_assert!(k.len() == 9 && r0.len() == w && r1.len() == w && r2.len() == w);
    if w == 1 {
        dst[0] = k[1].mul_add(r0[0], k[4].mul_add(r1[0], k[7].mul_add(r2[0], dst[0])));
        return;
    }
    dst[0] = k[1].mul_add(r0[0], k[2].mul_add(r0[1], dst[0]));
    dst[0] = k[4].mul_add(r1[0], k[5].mul_add(r1[1], dst[0]));
    dst[0] = k[7].mul_add(r2[0], k[8].mul_add(r2[1], dst[0]));
    let (mid, lastd) = dst[1..].split_at_mut(w - 2);
    for (x, d) in mid.iter_mut().enumerate() {
        // Safety: x ranges over 0..w-3, so x+2 <= w-1 and all three source
        // rows have length w (asserted above).
        debug_assert!(x + 2 < w);
        let (l0, m0, rr0) = unsafe {
            (*r0.get_unchecked(x), *r0.get_unchecked(x + 1), *r0.get_unchecked(x + 2))
        };
        let (l1, m1, rr1) = unsafe {
            (*r1.get_unchecked(x), *r1.get_unchecked(x + 1), *r1.get_unchecked(x + 2))
        };
        let (l2, m2, rr2) = unsafe {
            (*r2.get_unchecked(x), *r2.get_unchecked(x + 1), *r2.get_unchecked(x + 2))
        };
        // Three independent chains per row keep the FMA pipeline busy.
        let t0 = k[0].mul_add(l0, k[1].mul_add(m0, k[2] * rr0));
        let t1 = k[3].mul_add(l1, k[4].mul_add(m1, k[5] * rr1));
        let t2 = k[6].mul_add(l2, k[7].mul_add(m2, k[8] * rr2));
        *d = *d + ((t0 + t1) + t2);
    }
    let e = w - 1;
    lastd[0] = k[0].mul_add(r0[e - 1], k[1].mul_add(r0[e], lastd[0]));
    lastd[0] = k[3].mul_add(r1[e - 1], k[4].mul_add(r1[e], lastd[0]));
    lastd[0] = k[6].mul_add(r2[e - 1], k[7].mul_add(r2[e], lastd[0]));
}

const DOT_LANES: usize = 16;

/// Accumulates the three horizontal-tap dot products of one row pair into the
/// lane banks: `aa += g[x]*s[x-1]`, `bb += g[x]*s[x]`, `cc += g[x]*s[x+1]`.
/// Folding is left to the caller so it can amortize over a whole plane.
#[inline]
fn row3_dot_acc<T: Real>(
    g: &[T],
    s: &[T],
    aa: &mut [T; DOT_LANES],
    bb: &mut [T; DOT_LANES],
    cc: &mut [T; DOT_LANES],
) {
    let w = g.len();
    debug_assert_eq!(s.len(), w);
    if w == 1 {
        bb[0] = g[0].mul_add(s[0], bb[0]);
        return;
    }
    // Interior x in 1..w-1 has all three taps in range.
    let n = w - 2;
    let gi = &g[1..w - 1];
    let sl = &s[..n];
    let sm = &s[1..w - 1];
    let sr = &s[2..];
    let chunks = n / DOT_LANES;
    for ((gc, lc), (mc, rc)) in gi
        .chunks_exact(DOT_LANES)
        .zip(sl.chunks_exact(DOT_LANES))
        .zip(sm.chunks_exact(DOT_LANES).zip(sr.chunks_exact(DOT_LANES)))
    {
        // Fixed-size array views let the lane loop compile branch-free.
        let ga: &[T; DOT_LANES] = gc.try_into().unwrap();
        let la: &[T; DOT_LANES] = lc.try_into().unwrap();
        let ma: &[T; DOT_LANES] = mc.try_into().unwrap();
        let ra: &[T; DOT_LANES] = rc.try_into().unwrap();
        for k in 0..DOT_LANES {
            aa[k] = ga[k].mul_add(la[k], aa[k]);
            bb[k] = ga[k].mul_add(ma[k], bb[k]);
            cc[k] = ga[k].mul_add(ra[k], cc[k]);
        }
    }
    for k in chunks * DOT_LANES..n {
        let gv = gi[k];
        aa[k % DOT_LANES] = gv.mul_add(sl[k], aa[k % DOT_LANES]);
        bb[k % DOT_LANES] = gv.mul_add(sm[k], bb[k % DOT_LANES]);
        cc[k % DOT_LANES] = gv.mul_add(sr[k], cc[k % DOT_LANES]);
    }
    // Boundary contributions go to dedicated lanes to keep the order fixed.
    aa[0] = g[w - 1].mul_add(s[w - 2], aa[0]);
    bb[0] = g[0].mul_add(s[0], bb[0]);
    bb[1] = g[w - 1].mul_add(s[w - 1], bb[1]);
    cc[0] = g[0].mul_add(s[1], cc[0]);
}

#[inline]
fn fold_lanes<T: Real>(mut v: [T; DOT_LANES], extra: T) -> T {
    let mut width = DOT_LANES / 2;
    while width > 0 {
        for k in 0..width {
            v[k] = v[k] + v[k + width];
        }
        width /= 2;
    }
    v[0] + extra
}

/// Paired-row tap dots: one pass over two gradient rows (`ga` for tap row
/// `dy`, `gb` for tap row `dy+1`) against the shared source row between them.
/// Amortizes the shifted source loads across two accumulator triples.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn row3_dot_acc2<T: Real>(
    ga: &[T],
    gb: &[T],
    s: &[T],
    banks_a: &mut [T; DOT_LANES],
    banks_a1: &mut [T; DOT_LANES],
    banks_a2: &mut [T; DOT_LANES],
    banks_b: &mut [T; DOT_LANES],
    banks_b1: &mut [T; DOT_LANES],
    banks_b2: &mut [T; DOT_LANES],
) {
    let w = s.len();
    if w < 2 + DOT_LANES {
        row3_dot_acc(ga, s, banks_a, banks_a1, banks_a2);
        row3_dot_acc(gb, s, banks_b, banks_b1, banks_b2);
        return;
    }
    let n = w - 2;
    let gai = &ga[1..w - 1];
    let gbi = &gb[1..w - 1];
    let chunks = n / DOT_LANES;
    for i in 0..chunks {
        let base = i * DOT_LANES;
        let gav: &[T; DOT_LANES] = gai[base..base + DOT_LANES].try_into().unwrap();
        let gbv: &[T; DOT_LANES] = gbi[base..base + DOT_LANES].try_into().unwrap();
        let la: &[T; DOT_LANES] = s[base..base + DOT_LANES].try_into().unwrap();
        let ma: &[T; DOT_LANES] = s[base + 1..base + 1 + DOT_LANES].try_into().unwrap();
        let ra: &[T; DOT_LANES] = s[base + 2..base + 2 + DOT_LANES].try_into().unwrap();
        for k in 0..DOT_LANES {
            banks_a[k] = gav[k].mul_add(la[k], banks_a[k]);
            banks_a1[k] = gav[k].mul_add(ma[k], banks_a1[k]);
            banks_a2[k] = gav[k].mul_add(ra[k], banks_a2[k]);
            banks_b[k] = gbv[k].mul_add(la[k], banks_b[k]);
            banks_b1[k] = gbv[k].mul_add(ma[k], banks_b1[k]);
            banks_b2[k] = gbv[k].mul_add(ra[k], banks_b2[k]);
        }
    }
    for k in chunks * DOT_LANES..n {
        let lane = k % DOT_LANES;
        banks_a[lane] = gai[k].mul_add(s[k], banks_a[lane]);
        banks_a1[lane] = gai[k].mul_add(s[k + 1], banks_a1[lane]);
        banks_a2[lane] = gai[k].mul_add(s[k + 2], banks_a2[lane]);
        banks_b[lane] = gbi[k].mul_add(s[k], banks_b[lane]);
        banks_b1[lane] = gbi[k].mul_add(s[k + 1], banks_b1[lane]);
        banks_b2[lane] = gbi[k].mul_add(s[k + 2], banks_b2[lane]);
    }
    banks_a[0] = ga[w - 1].mul_add(s[w - 2], banks_a[0]);
    banks_a1[0] = ga[0].mul_add(s[0], banks_a1[0]);
    banks_a1[1] = ga[w - 1].mul_add(s[w - 1], banks_a1[1]);
    banks_a2[0] = ga[0].mul_add(s[1], banks_a2[0]);
    banks_b[0] = gb[w - 1].mul_add(s[w - 2], banks_b[0]);
    banks_b1[0] = gb[0].mul_add(s[0], banks_b1[0]);
    banks_b1[1] = gb[w - 1].mul_add(s[w - 1], banks_b1[1]);
    banks_b2[0] = gb[0].mul_add(s[1], banks_b2[0]);
}

/// All nine tap dots between a gradient plane and a source plane:
/// `out[dy*3+dx] = sum_y,x g[y,x] * s[y+dy-1, x+dx-1]` with zero padding.
///
/// Iterates source rows; each source row `sy` feeds gradient rows `sy-1` and
/// `sy+1` (taps `dy=2` and `dy=0`) in one fused pass, plus `sy` (tap `dy=1`).
#[inline]
fn plane9_dot<T: Real>(g_plane: &[T], s_plane: &[T], h: usize, w: usize) -> [T; 9] {
    let mut banks = [[T::zero(); DOT_LANES]; 9];
    for sy in 0..h {
        let s_row = &s_plane[sy * w..(sy + 1) * w];
        // g row sy-1 sees this source row as its dy=2 tap; g row sy+1 as dy=0.
        if sy > 0 && sy + 1 < h {
            let g_above = &g_plane[(sy - 1) * w..sy * w];
            let g_below = &g_plane[(sy + 1) * w..(sy + 2) * w];
            let (hi, lo) = banks.split_at_mut(6);
            let (z, hi) = hi.split_at_mut(3);
            let ([b0, b1, b2], [b6, b7, b8]) = (z, lo) else { unreachable!() };
            let _ = hi;
            row3_dot_acc2(g_below, g_above, s_row, b0, b1, b2, b6, b7, b8);
        } else if sy + 1 < h {
            let g_below = &g_plane[(sy + 1) * w..(sy + 2) * w];
            let [b0, b1, b2] = &mut banks[0..3] else { unreachable!() };
            row3_dot_acc(g_below, s_row, b0, b1, b2);
        } else if sy > 0 {
            let g_above = &g_plane[(sy - 1) * w..sy * w];
            let [b6, b7, b8] = &mut banks[6..9] else { unreachable!() };
            row3_dot_acc(g_above, s_row, b6, b7, b8);
        }
        let g_mid = &g_plane[sy * w..(sy + 1) * w];
        let [b3, b4, b5] = &mut banks[3..6] else { unreachable!() };
        row3_dot_acc(g_mid, s_row, b3, b4, b5);
    }
    let mut out = [T::zero(); 9];
    for (o, bank) in out.iter_mut().zip(banks) {
        *o = fold_lanes(bank, T::zero());
    }
    out
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

/// 3x3 convolution with stride 1 and zero padding.
///
/// `groups == 1` is a dense convolution with weights `[c_out, c_in, 3, 3]`;
/// with `groups == c_out` each output channel sees its own `c_in / groups`…
/// more precisely weights are `[c_out, group_width, 3, 3]` and output channel
/// `o` reads input channels `o*group_width .. (o+1)*group_width`.
pub fn conv3x3_forward<T: Real>(
    x: &ArrayView4<T>,
    weights: &[T],
    bias: &[T],
    groups: usize,
    out: &mut Array4<T>,
) {
    let (batch, c_in, h, w) = x.dim();
    let c_out = bias.len();
    debug_assert_eq!(out.dim(), (batch, c_out, h, w));
    debug_assert_eq!(c_in % groups, 0);
    let gw = c_in / groups;
    debug_assert_eq!(weights.len(), c_out * gw * 9);

    let xs = x.as_slice().expect("standard layout");
    let plane = h * w;
    let outs = out.as_slice_mut().expect("standard layout");

    outs.par_chunks_mut(plane).enumerate().for_each(|(bo, dst)| {
        let b = bo / c_out;
        let o = bo % c_out;
        // With grouped weights, output o belongs to group o (group width 1 in
        // channels-out terms); it consumes input channels o*gw..(o+1)*gw.
        let in_base = if groups == 1 { 0 } else { o * gw };
        dst.fill(bias[o]);
        for ig in 0..gw {
            let i = in_base + ig;
            let wk = &weights[(o * gw + ig) * 9..(o * gw + ig) * 9 + 9];
            let src_plane = &xs[(b * c_in + i) * plane..(b * c_in + i + 1) * plane];
            // Top and bottom rows miss one source row; the interior takes the
            // fused nine-tap path.
            row3_acc(&mut dst[..w], &src_plane[..w], wk[3], wk[4], wk[5]);
            if h > 1 {
                row3_acc(&mut dst[..w], &src_plane[w..2 * w], wk[6], wk[7], wk[8]);
                let last = (h - 1) * w;
                row3_acc(&mut dst[last..], &src_plane[last - w..last], wk[0], wk[1], wk[2]);
                row3_acc(&mut dst[last..], &src_plane[last..], wk[3], wk[4], wk[5]);
            }
            for y in 1..h.saturating_sub(1) {
                let dst_row = &mut dst[y * w..(y + 1) * w];
                row9_acc(
                    dst_row,
                    &src_plane[(y - 1) * w..y * w],
                    &src_plane[y * w..(y + 1) * w],
                    &src_plane[(y + 1) * w..(y + 2) * w],
                    wk,
                );
            }
        }
    });
}

/// Backward pass of [`conv3x3_forward`]: gradient w.r.t. input.
pub fn conv3x3_backward_input<T: Real>(
    gout: &ArrayView4<T>,
    weights: &[T],
    dims: &ConvDims,
    groups: usize,
    gx: &mut Array4<T>,
) {
    let ConvDims { batch: _, c_in, c_out, h, w } = *dims;
    let gw = c_in / groups;
    let gs = gout.as_slice().expect("standard layout");
    let plane = h * w;
    let gxs = gx.as_slice_mut().expect("standard layout");

    gxs.par_chunks_mut(plane).enumerate().for_each(|(bi, dst)| {
        let b = bi / c_in;
        let i = bi % c_in;
        // Which output channels read input channel i.
        let (o_lo, o_hi) = if groups == 1 { (0, c_out) } else { (i / gw, i / gw + 1) };
        for o in o_lo..o_hi {
            let ig = if groups == 1 { i } else { i % gw };
            let wk = &weights[(o * gw + ig) * 9..(o * gw + ig) * 9 + 9];
            let g_plane = &gs[(b * c_out + o) * plane..(b * c_out + o + 1) * plane];
            // out[y] reads in[y+dy-1]  =>  gin[v] reads gout[v+1-dy], with
            // horizontal taps reversed. That is row9_acc with the kernel
            // rotated by 180 degrees.
            let wr: [T; 9] = [wk[8], wk[7], wk[6], wk[5], wk[4], wk[3], wk[2], wk[1], wk[0]];
            row3_acc(&mut dst[..w], &g_plane[..w], wr[3], wr[4], wr[5]);
            if h > 1 {
                row3_acc(&mut dst[..w], &g_plane[w..2 * w], wr[6], wr[7], wr[8]);
                let last = (h - 1) * w;
                row3_acc(&mut dst[last..], &g_plane[last - w..last], wr[0], wr[1], wr[2]);
                row3_acc(&mut dst[last..], &g_plane[last..], wr[3], wr[4], wr[5]);
            }
            for v in 1..h.saturating_sub(1) {
                let dst_row = &mut dst[v * w..(v + 1) * w];
                row9_acc(
                    dst_row,
                    &g_plane[(v - 1) * w..v * w],
                    &g_plane[v * w..(v + 1) * w],
                    &g_plane[(v + 1) * w..(v + 2) * w],
                    &wr,
                );
            }
        }
    });
}

/// Backward pass of [`conv3x3_forward`]: gradients w.r.t. weights and bias.
///
/// Per-sample partials are reduced in batch order, so the result does not
/// depend on thread scheduling.
pub fn conv3x3_backward_params<T: Real>(
    gout: &ArrayView4<T>,
    x: &ArrayView4<T>,
    dims: &ConvDims,
    groups: usize,
    gweights: &mut [T],
    gbias: &mut [T],
) {
    let ConvDims { batch, c_in, c_out, h, w } = *dims;
    let gw_width = c_in / groups;
    let plane = h * w;
    let gs = gout.as_slice().expect("standard layout");
    let xs = x.as_slice().expect("standard layout");

    // One task per (sample, output channel) so small batches still spread
    // over the pool; partials reduce in task order, keeping the result
    // independent of scheduling.
    let per_task: Vec<(Vec<T>, T)> = (0..batch * c_out)
        .into_par_iter()
        .map(|bo| {
            let b = bo / c_out;
            let o = bo % c_out;
            let g_plane = &gs[(b * c_out + o) * plane..(b * c_out + o + 1) * plane];
            let mut bacc = T::zero();
            for &g in g_plane {
                bacc = bacc + g;
            }
            let mut gwk = vec![T::zero(); gw_width * 9];
            let in_base = if groups == 1 { 0 } else { o * gw_width };
            for ig in 0..gw_width {
                let i = in_base + ig;
                let src_plane = &xs[(b * c_in + i) * plane..(b * c_in + i + 1) * plane];
                let d9 = plane9_dot(g_plane, src_plane, h, w);
                for (d, v) in gwk[ig * 9..ig * 9 + 9].iter_mut().zip(d9) {
                    *d = *d + v;
                }
            }
            (gwk, bacc)
        })
        .collect();

    for (bo, (gwk, bacc)) in per_task.into_iter().enumerate() {
        let o = bo % c_out;
        for (d, s) in gweights[o * gw_width * 9..(o + 1) * gw_width * 9].iter_mut().zip(&gwk) {
            *d = *d + *s;
        }
        gbias[o] = gbias[o] + bacc;
    }
}

/// Bilinear sample of `src` at `(cx, cy)` with border clamp.
/// Returns `(value, d/dcx, d/dcy, corner indices and weights)` packed for reuse.
#[inline]
pub fn bilinear_taps(w: usize, h: usize, cx: f64, cy: f64) -> ([usize; 4], [f64; 4], bool, bool) {
    let cxc = cx.clamp(0.0, (w - 1) as f64);
    let cyc = cy.clamp(0.0, (h - 1) as f64);
    let x0 = cxc.floor() as usize;
    let y0 = cyc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cxc - x0 as f64;
    let fy = cyc - y0 as f64;
    let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
    let wts = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    let x_clamped = cx < 0.0 || cx > (w - 1) as f64;
    let y_clamped = cy < 0.0 || cy > (h - 1) as f64;
    (idx, wts, x_clamped, y_clamped)
}

/// Warp every channel of `src` by the per-pixel displacement field
/// (`flow[:,0]` horizontal, `flow[:,1]` vertical, in pixels).
pub fn warp_forward<T: Real>(src: &ArrayView4<T>, flow: &ArrayView4<T>, out: &mut Array4<T>) {
    let (_batch, c, h, w) = src.dim();
    let plane = h * w;
    let ss = src.as_slice().expect("standard layout");
    let fs = flow.as_slice().expect("standard layout");
    let outs = out.as_slice_mut().expect("standard layout");

    outs.par_chunks_mut(plane).enumerate().for_each(|(bc, dst)| {
        let b = bc / c;
        let ch = bc % c;
        let mx = &fs[(b * 2) * plane..(b * 2 + 1) * plane];
        let my = &fs[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
        let sp = &ss[(b * c + ch) * plane..(b * c + ch + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let cx = x as f64 + mx[p].to_f64();
                let cy = y as f64 + my[p].to_f64();
                let (idx, wts, _, _) = bilinear_taps(w, h, cx, cy);
                let mut v = T::zero();
                for k in 0..4 {
                    v = T::from_f64(wts[k]).mul_add(sp[idx[k]], v);
                }
                dst[p] = v;
            }
        }
    });
}

/// Backward pass of [`warp_forward`] w.r.t. both the source and the flow.
pub fn warp_backward<T: Real>(
    gout: &ArrayView4<T>,
    src: &ArrayView4<T>,
    flow: &ArrayView4<T>,
    gsrc: &mut Array4<T>,
    gflow: &mut Array4<T>,
) {
    let (batch, c, h, w) = src.dim();
    let plane = h * w;
    let gs = gout.as_slice().expect("standard layout");
    let ss = src.as_slice().expect("standard layout");
    let fs = flow.as_slice().expect("standard layout");

    // Parallel over samples: every sample owns its slices of both gradients.
    let gsrc_s = gsrc.as_slice_mut().expect("standard layout");
    let gflow_s = gflow.as_slice_mut().expect("standard layout");
    gsrc_s
        .par_chunks_mut(c * plane)
        .zip(gflow_s.par_chunks_mut(2 * plane))
        .enumerate()
        .for_each(|(b, (gsp, gfp))| {
            debug_assert!(b < batch);
            let mx = &fs[(b * 2) * plane..(b * 2 + 1) * plane];
            let my = &fs[(b * 2 + 1) * plane..(b * 2 + 2) * plane];
            for ch in 0..c {
                let sp = &ss[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                let gp = &gs[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                let gsc = &mut gsp[ch * plane..(ch + 1) * plane];
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let g = gp[p];
                        let cx = x as f64 + mx[p].to_f64();
                        let cy = y as f64 + my[p].to_f64();
                        let (idx, wts, x_clamped, y_clamped) = bilinear_taps(w, h, cx, cy);
                        for k in 0..4 {
                            gsc[idx[k]] = T::from_f64(wts[k]).mul_add(g, gsc[idx[k]]);
                        }
                        let s00 = sp[idx[0]].to_f64();
                        let s10 = sp[idx[1]].to_f64();
                        let s01 = sp[idx[2]].to_f64();
                        let s11 = sp[idx[3]].to_f64();
                        let fx = wts[1] + wts[3];
                        let fy = wts[2] + wts[3];
                        if !x_clamped {
                            let d = (s10 - s00) * (1.0 - fy) + (s11 - s01) * fy;
                            gfp[p] = T::from_f64(d).mul_add(g, gfp[p]);
                        }
                        if !y_clamped {
                            let d = (s01 - s00) * (1.0 - fx) + (s11 - s10) * fx;
                            gfp[plane + p] = T::from_f64(d).mul_add(g, gfp[plane + p]);
                        }
                    }
                }
            }
        });
}

/// 2x2 average pooling, stride 2. Dimensions must be even.
pub fn avgpool2_forward<T: Real>(x: &ArrayView4<T>, out: &mut Array4<T>) {
    let (_, _c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.as_slice().expect("standard layout");
    let outs = out.as_slice_mut().expect("standard layout");
    let q = T::from_f64(0.25);
    outs.par_chunks_mut(oh * ow).enumerate().for_each(|(bc, dst)| {
        let sp = &xs[bc * h * w..(bc + 1) * h * w];
        for y in 0..oh {
            for x_ in 0..ow {
                let p0 = (2 * y) * w + 2 * x_;
                let p1 = p0 + w;
                let s = (sp[p0] + sp[p0 + 1]) + (sp[p1] + sp[p1 + 1]);
                dst[y * ow + x_] = q * s;
            }
        }
    });
}

pub fn avgpool2_backward<T: Real>(gout: &ArrayView4<T>, gx: &mut Array4<T>) {
    let (_, _, h, w) = gx.dim();
    let (oh, ow) = (h / 2, w / 2);
    let gs = gout.as_slice().expect("standard layout");
    let gxs = gx.as_slice_mut().expect("standard layout");
    let q = T::from_f64(0.25);
    gxs.par_chunks_mut(h * w).enumerate().for_each(|(bc, dst)| {
        let gp = &gs[bc * oh * ow..(bc + 1) * oh * ow];
        for y in 0..oh {
            for x_ in 0..ow {
                let g = q * gp[y * ow + x_];
                let p0 = (2 * y) * w + 2 * x_;
                let p1 = p0 + w;
                dst[p0] = dst[p0] + g;
                dst[p0 + 1] = dst[p0 + 1] + g;
                dst[p1] = dst[p1] + g;
                dst[p1 + 1] = dst[p1 + 1] + g;
            }
        }
    });
}

/// Taps for x2 bilinear upsampling with half-pixel alignment: output index
/// `2i` mixes `in[i-1]` and `in[i]` at 1/4 : 3/4, `2i+1` mixes `in[i]` and
/// `in[i+1]` at 3/4 : 1/4, clamped at the borders.
#[inline]
fn up2_taps(i_out: usize, n_in: usize) -> (usize, usize, f64, f64) {
    let i = i_out / 2;
    if i_out % 2 == 0 {
        let j = i.saturating_sub(1);
        (j, i, if i == 0 { 0.0 } else { 0.25 }, if i == 0 { 1.0 } else { 0.75 })
    } else {
        let j = (i + 1).min(n_in - 1);
        (i, j, if j == i { 1.0 } else { 0.75 }, if j == i { 0.0 } else { 0.25 })
    }
}

/// Bilinear x2 upsampling; `value_scale` multiplies the result (used to keep
/// displacement fields in output-resolution pixel units).
pub fn upsample2_forward<T: Real>(x: &ArrayView4<T>, value_scale: T, out: &mut Array4<T>) {
    let (_, _, h, w) = x.dim();
    let (oh, ow) = (2 * h, 2 * w);
    let xs = x.as_slice().expect("standard layout");
    let outs = out.as_slice_mut().expect("standard layout");
    outs.par_chunks_mut(oh * ow).enumerate().for_each(|(bc, dst)| {
        let sp = &xs[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = up2_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = up2_taps(ox, w);
                let v = T::from_f64(wy0 * wx0) * sp[y0 * w + x0]
                    + T::from_f64(wy0 * wx1) * sp[y0 * w + x1]
                    + T::from_f64(wy1 * wx0) * sp[y1 * w + x0]
                    + T::from_f64(wy1 * wx1) * sp[y1 * w + x1];
                dst[oy * ow + ox] = value_scale * v;
            }
        }
    });
}

pub fn upsample2_backward<T: Real>(gout: &ArrayView4<T>, value_scale: T, gx: &mut Array4<T>) {
    let (_, _, h, w) = gx.dim();
    let (oh, ow) = (2 * h, 2 * w);
    let gs = gout.as_slice().expect("standard layout");
    let gxs = gx.as_slice_mut().expect("standard layout");
    gxs.par_chunks_mut(h * w).enumerate().for_each(|(bc, dst)| {
        let gp = &gs[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = up2_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = up2_taps(ox, w);
                let g = value_scale * gp[oy * ow + ox];
                dst[y0 * w + x0] = T::from_f64(wy0 * wx0).mul_add(g, dst[y0 * w + x0]);
                dst[y0 * w + x1] = T::from_f64(wy0 * wx1).mul_add(g, dst[y0 * w + x1]);
                dst[y1 * w + x0] = T::from_f64(wy1 * wx0).mul_add(g, dst[y1 * w + x0]);
                dst[y1 * w + x1] = T::from_f64(wy1 * wx1).mul_add(g, dst[y1 * w + x1]);
            }
        }
    });
}

/// Zero-allocating helper: `dst += src` elementwise.
pub fn add_assign<T: Real>(dst: &mut ArrayViewMut4<T>, src: &ArrayView4<T>) {
    let d = dst.as_slice_mut().expect("standard layout");
    let s = src.as_slice().expect("standard layout");
    for (a, b) in d.iter_mut().zip(s) {
        *a = *a + *b;
    }
}

//! A small reverse-mode autodiff tape over `[batch, channel, height, width]`
//! tensors.
//!
//! The op set is exactly what the filtering networks need: 3x3 (optionally
//! grouped) convolution, PReLU, elementwise arithmetic, channel concat, 2x2
//! average pooling, x2 bilinear upsampling, bilinear warping by a
//! displacement field, clamping, and sum-of-squares losses. Ops evaluate
//! eagerly; `backward` replays the tape in reverse.
//!
//! Everything is generic over the scalar so that training can run in `f32`
//! while gradient checks run in `f64`.

pub mod kernels;

use ndarray::{Array4, ArrayD, Ix1, Ix4};
use rayon::prelude::*;

use crate::error::Result;
use crate::validation;
use kernels::ConvDims;

/// Scalar type the engine works over.
pub trait Real: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter storage, ordered by insertion. The order is the on-disk
/// serialization order, so it must stay stable for a given architecture.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Id of the parameter at a given insertion position.
    pub fn id_at(&self, idx: usize) -> ParamId {
        assert!(idx < self.values.len(), "parameter index {idx} out of range");
        ParamId(idx)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| U::from_f64(x.to_f64()))).collect(),
        }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv3x3 { x: NodeId, w: ParamId, b: ParamId, groups: usize },
    PRelu { x: NodeId, slope: ParamId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    MulOuter { m: NodeId, x: NodeId },
    ConcatC(Vec<NodeId>),
    AvgPool2(NodeId),
    Upsample2 { x: NodeId, value_scale: f64 },
    Warp { src: NodeId, flow: NodeId },
    Clamp01(NodeId),
    SumSqDiff(NodeId, NodeId),
}

struct Node<T> {
    value: Array4<T>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Array4<T>>>,
    params: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&Array4<T>> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.params[id.0].as_ref()
    }

    /// Gradient for every parameter, zeros where the loss did not reach.
    pub fn into_param_grads(mut self, params: &ParamSet<T>) -> Vec<ArrayD<T>> {
        params
            .ids()
            .map(|id| {
                self.params[id.0]
                    .take()
                    .unwrap_or_else(|| ArrayD::zeros(params.value(id).raw_dim()))
            })
            .collect()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Array4<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array4<T>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array4<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Dense or grouped 3x3 convolution, stride 1, zero padding.
    ///
    /// Weights are `[c_out, group_width, 3, 3]`; `groups == 1` means dense.
    /// For grouped use, `groups` must equal `c_out` and input channels must be
    /// `c_out * group_width`.
    pub fn conv3x3(
        &mut self,
        params: &ParamSet<T>,
        x: NodeId,
        w: ParamId,
        b: ParamId,
        groups: usize,
    ) -> Result<NodeId> {
        let (batch, c_in, h, wd) = self.value(x).dim();
        let wshape = params.value(w).shape().to_vec();
        let c_out = params.value(b).len();
        if wshape.len() != 4 || wshape[2] != 3 || wshape[3] != 3 {
            return Err(validation!("conv weights must be [c_out, gw, 3, 3], got {wshape:?}"));
        }
        if wshape[0] != c_out {
            return Err(validation!("conv bias length {c_out} does not match weight c_out {}", wshape[0]));
        }
        let expected_in = if groups == 1 { wshape[1] } else { wshape[1] * groups };
        if c_in != expected_in || (groups != 1 && groups != c_out) {
            return Err(validation!(
                "conv input has {c_in} channels, weights {wshape:?} with groups {groups} expect {expected_in}"
            ));
        }
        let mut out = Array4::zeros((batch, c_out, h, wd));
        kernels::conv3x3_forward(
            &self.value(x).view(),
            params.value(w).as_slice().expect("standard layout"),
            params.value(b).as_slice().expect("standard layout"),
            groups,
            &mut out,
        );
        Ok(self.push(out, Op::Conv3x3 { x, w, b, groups }))
    }

    /// Channel-wise PReLU: `y = x` for positive x, `slope[c] * x` otherwise.
    pub fn prelu(&mut self, params: &ParamSet<T>, x: NodeId, slope: ParamId) -> Result<NodeId> {
        let (_, c, _, _) = self.value(x).dim();
        let s = params.value(slope);
        if s.len() != c {
            return Err(validation!("prelu slope has {} entries for {c} channels", s.len()));
        }
        let sv = s.as_slice().expect("standard layout").to_vec();
        let xv = self.value(x);
        let (batch, _, h, w) = xv.dim();
        let plane = h * w;
        let mut out = xv.clone();
        {
            let o = out.as_slice_mut().expect("standard layout");
            o.par_chunks_mut(plane).enumerate().for_each(|(bc, dst)| {
                let a = sv[bc % c];
                for v in dst.iter_mut() {
                    if *v < T::zero() {
                        *v = a * *v;
                    }
                }
            });
        }
        debug_assert_eq!(out.dim(), (batch, c, h, w));
        Ok(self.push(out, Op::PRelu { x, slope }))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        if self.value(a).dim() != self.value(b).dim() {
            return Err(validation!(
                "{name}: shape mismatch {:?} vs {:?}",
                self.value(a).dim(),
                self.value(b).dim()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let kk = T::from_f64(k);
        let out = self.value(x).mapv(|v| kk * v);
        self.push(out, Op::Scale(x, k))
    }

    /// Outer channel product: `out[b, l*ci + j] = m[b, l] * x[b, j]`.
    pub fn mul_outer(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        let (bm, cm, hm, wm) = self.value(m).dim();
        let (bx, cx, hx, wx) = self.value(x).dim();
        if (bm, hm, wm) != (bx, hx, wx) {
            return Err(validation!("mul_outer: spatial/batch mismatch"));
        }
        let plane = hm * wm;
        let mut out = Array4::zeros((bm, cm * cx, hm, wm));
        {
            let ms = self.value(m).as_slice().expect("standard layout");
            let xs = self.value(x).as_slice().expect("standard layout");
            let os = out.as_slice_mut().expect("standard layout");
            os.par_chunks_mut(plane).enumerate().for_each(|(bli, dst)| {
                let b = bli / (cm * cx);
                let l = (bli / cx) % cm;
                let j = bli % cx;
                let mp = &ms[(b * cm + l) * plane..(b * cm + l + 1) * plane];
                let xp = &xs[(b * cx + j) * plane..(b * cx + j + 1) * plane];
                for ((d, &a), &bv) in dst.iter_mut().zip(mp).zip(xp) {
                    *d = a * bv;
                }
            });
        }
        Ok(self.push(out, Op::MulOuter { m, x }))
    }

    /// Concatenation along the channel axis.
    pub fn concat_c(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(validation!("concat_c: empty part list"));
        }
        let (b0, _, h0, w0) = self.value(parts[0]).dim();
        let mut c_total = 0;
        for &p in parts {
            let (b, c, h, w) = self.value(p).dim();
            if (b, h, w) != (b0, h0, w0) {
                return Err(validation!("concat_c: incompatible shapes"));
            }
            c_total += c;
        }
        let mut out = Array4::zeros((b0, c_total, h0, w0));
        let plane = h0 * w0;
        {
            let os = out.as_slice_mut().expect("standard layout");
            for b in 0..b0 {
                let mut c_off = 0;
                for &p in parts {
                    let (_, c, _, _) = self.value(p).dim();
                    let ps = self.value(p).as_slice().expect("standard layout");
                    let src = &ps[b * c * plane..(b + 1) * c * plane];
                    let dst = &mut os[(b * c_total + c_off) * plane..(b * c_total + c_off + c) * plane];
                    dst.copy_from_slice(src);
                    c_off += c;
                }
            }
        }
        Ok(self.push(out, Op::ConcatC(parts.to_vec())))
    }

    pub fn avgpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(validation!("avgpool2 needs even dims, got {h}x{w}"));
        }
        let mut out = Array4::zeros((b, c, h / 2, w / 2));
        kernels::avgpool2_forward(&self.value(x).view(), &mut out);
        Ok(self.push(out, Op::AvgPool2(x)))
    }

    pub fn upsample2(&mut self, x: NodeId, value_scale: f64) -> NodeId {
        let (b, c, h, w) = self.value(x).dim();
        let mut out = Array4::zeros((b, c, h * 2, w * 2));
        kernels::upsample2_forward(&self.value(x).view(), T::from_f64(value_scale), &mut out);
        self.push(out, Op::Upsample2 { x, value_scale })
    }

    /// Bilinear warp of `src` by the displacement field `flow` (`[B,2,H,W]`,
    /// channel 0 horizontal, channel 1 vertical, in pixels). Sampling
    /// coordinates are clamped to the frame.
    pub fn warp(&mut self, src: NodeId, flow: NodeId) -> Result<NodeId> {
        let (bs, _, hs, ws) = self.value(src).dim();
        let (bf, cf, hf, wf) = self.value(flow).dim();
        if cf != 2 || (bs, hs, ws) != (bf, hf, wf) {
            return Err(validation!(
                "warp: src {:?} incompatible with flow {:?}",
                self.value(src).dim(),
                self.value(flow).dim()
            ));
        }
        let mut out = Array4::zeros(self.value(src).raw_dim());
        kernels::warp_forward(&self.value(src).view(), &self.value(flow).view(), &mut out);
        Ok(self.push(out, Op::Warp { src, flow }))
    }

    pub fn clamp01(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(|v| v.max(T::zero()).min(T::one()));
        self.push(out, Op::Clamp01(x))
    }

    /// Sum over all elements of `(a - b)^2`, as a `[1,1,1,1]` scalar node.
    pub fn sum_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sum_sq_diff")?;
        let av = self.value(a).as_slice().expect("standard layout");
        let bv = self.value(b).as_slice().expect("standard layout");
        let mut acc = [T::zero(); 4];
        for (i, (&x, &y)) in av.iter().zip(bv).enumerate() {
            let d = x - y;
            acc[i & 3] = d.mul_add(d, acc[i & 3]);
        }
        let s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        let out = Array4::from_elem((1, 1, 1, 1), s);
        Ok(self.push(out, Op::SumSqDiff(a, b)))
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v[[0, 0, 0, 0]]
    }

    /// True if every element of the node is finite.
    pub fn is_finite(&self, id: NodeId) -> bool {
        self.value(id).iter().all(|v| v.is_finite())
    }

    fn grad_slot<'a>(
        grads: &'a mut Vec<Option<Array4<T>>>,
        nodes: &[Node<T>],
        id: NodeId,
    ) -> &'a mut Array4<T> {
        if grads[id.0].is_none() {
            grads[id.0] = Some(Array4::zeros(nodes[id.0].value.raw_dim()));
        }
        grads[id.0].as_mut().unwrap()
    }

    /// Reverse pass from a scalar node. Returns gradients for every reached
    /// node and parameter.
    pub fn backward(&self, loss: NodeId, params: &ParamSet<T>) -> Gradients<T> {
        let mut node_grads: Vec<Option<Array4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<ArrayD<T>>> = (0..params.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Array4::from_elem((1, 1, 1, 1), T::one()));

        for idx in (0..=loss.0).rev() {
            let g = match node_grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input => {
                    node_grads[idx] = Some(g);
                    continue;
                }
                Op::Conv3x3 { x, w, b, groups } => {
                    let xv = &self.nodes[x.0].value;
                    let (batch, c_in, h, wd) = xv.dim();
                    let c_out = self.nodes[idx].value.dim().1;
                    let dims = ConvDims { batch, c_in, c_out, h, w: wd };
                    {
                        let gx = Self::grad_slot(&mut node_grads, &self.nodes, *x);
                        kernels::conv3x3_backward_input(
                            &g.view(),
                            params.value(*w).as_slice().expect("standard layout"),
                            &dims,
                            *groups,
                            gx,
                        );
                    }
                    let mut gw_local = vec![T::zero(); params.value(*w).len()];
                    let mut gb_local = vec![T::zero(); params.value(*b).len()];
                    kernels::conv3x3_backward_params(
                        &g.view(),
                        &xv.view(),
                        &dims,
                        *groups,
                        &mut gw_local,
                        &mut gb_local,
                    );
                    let gw = param_grads[w.0]
                        .get_or_insert_with(|| ArrayD::zeros(params.value(*w).raw_dim()));
                    for (d, s) in gw.as_slice_mut().expect("standard layout").iter_mut().zip(&gw_local) {
                        *d = *d + *s;
                    }
                    let gb = param_grads[b.0]
                        .get_or_insert_with(|| ArrayD::zeros(params.value(*b).raw_dim()));
                    for (d, s) in gb.as_slice_mut().expect("standard layout").iter_mut().zip(&gb_local) {
                        *d = *d + *s;
                    }
                }
                Op::PRelu { x, slope } => {
                    let xv = &self.nodes[x.0].value;
                    let (_, c, h, w) = xv.dim();
                    let plane = h * w;
                    let sv = params.value(*slope).as_slice().expect("standard layout").to_vec();
                    let mut gs = vec![T::zero(); c];
                    {
                        let gx = Self::grad_slot(&mut node_grads, &self.nodes, *x);
                        let gxs = gx.as_slice_mut().expect("standard layout");
                        let xs = xv.as_slice().expect("standard layout");
                        let ggs = g.as_slice().expect("standard layout");
                        for (bc, (dst, (xp, gp))) in gxs
                            .chunks_mut(plane)
                            .zip(xs.chunks(plane).zip(ggs.chunks(plane)))
                            .enumerate()
                        {
                            let ch = bc % c;
                            let a = sv[ch];
                            let mut acc = T::zero();
                            for ((d, &xx), &gg) in dst.iter_mut().zip(xp).zip(gp) {
                                if xx < T::zero() {
                                    *d = a.mul_add(gg, *d);
                                    acc = xx.mul_add(gg, acc);
                                } else {
                                    *d = *d + gg;
                                }
                            }
                            gs[ch] = gs[ch] + acc;
                        }
                    }
                    let gsl = param_grads[slope.0]
                        .get_or_insert_with(|| ArrayD::zeros(params.value(*slope).raw_dim()));
                    let gsl = gsl.as_slice_mut().expect("standard layout");
                    for (d, s) in gsl.iter_mut().zip(&gs) {
                        *d = *d + *s;
                    }
                }
                Op::Add(a, b) => {
                    kernels::add_assign(
                        &mut Self::grad_slot(&mut node_grads, &self.nodes, *a).view_mut(),
                        &g.view(),
                    );
                    kernels::add_assign(
                        &mut Self::grad_slot(&mut node_grads, &self.nodes, *b).view_mut(),
                        &g.view(),
                    );
                }
                Op::Sub(a, b) => {
                    kernels::add_assign(
                        &mut Self::grad_slot(&mut node_grads, &self.nodes, *a).view_mut(),
                        &g.view(),
                    );
                    let gb = Self::grad_slot(&mut node_grads, &self.nodes, *b);
                    let gbs = gb.as_slice_mut().expect("standard layout");
                    for (d, &s) in gbs.iter_mut().zip(g.as_slice().expect("standard layout")) {
                        *d = *d - s;
                    }
                }
                Op::Scale(x, k) => {
                    let kk = T::from_f64(*k);
                    let gx = Self::grad_slot(&mut node_grads, &self.nodes, *x);
                    let gxs = gx.as_slice_mut().expect("standard layout");
                    for (d, &s) in gxs.iter_mut().zip(g.as_slice().expect("standard layout")) {
                        *d = kk.mul_add(s, *d);
                    }
                }
                Op::MulOuter { m, x } => {
                    let (b, cm, h, w) = self.nodes[m.0].value.dim();
                    let cx = self.nodes[x.0].value.dim().1;
                    let plane = h * w;
                    let ms = self.nodes[m.0].value.as_slice().expect("standard layout");
                    let xs = self.nodes[x.0].value.as_slice().expect("standard layout");
                    let gg = g.as_slice().expect("standard layout");
                    {
                        let gm = Self::grad_slot(&mut node_grads, &self.nodes, *m);
                        let gms = gm.as_slice_mut().expect("standard layout");
                        for bi in 0..b {
                            for l in 0..cm {
                                let dst = &mut gms[(bi * cm + l) * plane..(bi * cm + l + 1) * plane];
                                for j in 0..cx {
                                    let go = &gg[(bi * cm * cx + l * cx + j) * plane
                                        ..(bi * cm * cx + l * cx + j + 1) * plane];
                                    let xp = &xs[(bi * cx + j) * plane..(bi * cx + j + 1) * plane];
                                    for ((d, &a), &bv) in dst.iter_mut().zip(go).zip(xp) {
                                        *d = a.mul_add(bv, *d);
                                    }
                                }
                            }
                        }
                    }
                    let gx = Self::grad_slot(&mut node_grads, &self.nodes, *x);
                    let gxs = gx.as_slice_mut().expect("standard layout");
                    for bi in 0..b {
                        for j in 0..cx {
                            let dst = &mut gxs[(bi * cx + j) * plane..(bi * cx + j + 1) * plane];
                            for l in 0..cm {
                                let go = &gg[(bi * cm * cx + l * cx + j) * plane
                                    ..(bi * cm * cx + l * cx + j + 1) * plane];
                                let mp = &ms[(bi * cm + l) * plane..(bi * cm + l + 1) * plane];
                                for ((d, &a), &bv) in dst.iter_mut().zip(go).zip(mp) {
                                    *d = a.mul_add(bv, *d);
                                }
                            }
                        }
                    }
                }
                Op::ConcatC(parts) => {
                    let (b, c_total, h, w) = self.nodes[idx].value.dim();
                    let plane = h * w;
                    let gg = g.as_slice().expect("standard layout");
                    let mut c_off = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].value.dim().1;
                        {
                            let gp = Self::grad_slot(&mut node_grads, &self.nodes, p);
                            let gps = gp.as_slice_mut().expect("standard layout");
                            for bi in 0..b {
                                let src = &gg[(bi * c_total + c_off) * plane
                                    ..(bi * c_total + c_off + c) * plane];
                                let dst = &mut gps[bi * c * plane..(bi + 1) * c * plane];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = *d + s;
                                }
                            }
                        }
                        c_off += c;
                    }
                }
                Op::AvgPool2(x) => {
                    let gx = Self::grad_slot(&mut node_grads, &self.nodes, *x);
                    kernels::avgpool2_backward(&g.view(), gx);
                }
                Op::Upsample2 { x, value_scale } => {
                    let gx = Self::grad_slot(&mut node_grads, &self.nodes, *x);
                    kernels::upsample2_backward(&g.view(), T::from_f64(*value_scale), gx);
                }
                Op::Warp { src, flow } => {
                    let sv = &self.nodes[src.0].value;
                    let fv = &self.nodes[flow.0].value;
                    let mut gsrc = Array4::zeros(sv.raw_dim());
                    let mut gflow = Array4::zeros(fv.raw_dim());
                    kernels::warp_backward(&g.view(), &sv.view(), &fv.view(), &mut gsrc, &mut gflow);
                    kernels::add_assign(
                        &mut Self::grad_slot(&mut node_grads, &self.nodes, *src).view_mut(),
                        &gsrc.view(),
                    );
                    kernels::add_assign(
                        &mut Self::grad_slot(&mut node_grads, &self.nodes, *flow).view_mut(),
                        &gflow.view(),
                    );
                }
                Op::Clamp01(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = Self::grad_slot(&mut node_grads, &self.nodes, *x);
                    let gxs = gx.as_slice_mut().expect("standard layout");
                    let xs = xv.as_slice().expect("standard layout");
                    let ggs = g.as_slice().expect("standard layout");
                    for ((d, &xx), &gg) in gxs.iter_mut().zip(xs).zip(ggs) {
                        if xx >= T::zero() && xx <= T::one() {
                            *d = *d + gg;
                        }
                    }
                }
                Op::SumSqDiff(a, b) => {
                    let gs = g[[0, 0, 0, 0]];
                    let two_g = T::from_f64(2.0) * gs;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let ga = Self::grad_slot(&mut node_grads, &self.nodes, *a);
                        let gas = ga.as_slice_mut().expect("standard layout");
                        for ((d, &x), &y) in gas
                            .iter_mut()
                            .zip(av.as_slice().expect("standard layout"))
                            .zip(bv.as_slice().expect("standard layout"))
                        {
                            *d = two_g.mul_add(x - y, *d);
                        }
                    }
                    let gb = Self::grad_slot(&mut node_grads, &self.nodes, *b);
                    let gbs = gb.as_slice_mut().expect("standard layout");
                    for ((d, &x), &y) in gbs
                        .iter_mut()
                        .zip(av.as_slice().expect("standard layout"))
                        .zip(bv.as_slice().expect("standard layout"))
                    {
                        *d = two_g.mul_add(y - x, *d);
                    }
                }
            }
            node_grads[idx] = Some(g);
        }

        Gradients { nodes: node_grads, params: param_grads }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Helpers to move between 2-D planes and `[1,1,H,W]` tensors.
pub fn plane_to_tensor<T: Real>(plane: &ndarray::Array2<f32>) -> Array4<T> {
    let (h, w) = plane.dim();
    Array4::from_shape_fn((1, 1, h, w), |(_, _, y, x)| T::from_f64(plane[[y, x]] as f64))
}

pub fn tensor_to_plane<T: Real>(t: &Array4<T>, b: usize, c: usize) -> ndarray::Array2<f32> {
    let (_, _, h, w) = t.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| t[[b, c, y, x]].to_f64() as f32)
}

/// Stacks per-sample planes into a `[B, 1, H, W]` tensor.
pub fn stack_planes<T: Real>(planes: &[&ndarray::Array2<f32>]) -> Array4<T> {
    let (h, w) = planes[0].dim();
    let mut out = Array4::zeros((planes.len(), 1, h, w));
    for (b, p) in planes.iter().enumerate() {
        debug_assert_eq!(p.dim(), (h, w));
        for y in 0..h {
            for x in 0..w {
                out[[b, 0, y, x]] = T::from_f64(p[[y, x]] as f64);
            }
        }
    }
    out
}

/// Casts a parameter to a 1-D view; panics if the rank is wrong.
pub fn as1<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView1<'_, T> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
}

/// Casts a parameter to a 4-D view; panics if the rank is wrong.
pub fn as4<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 parameter")
}

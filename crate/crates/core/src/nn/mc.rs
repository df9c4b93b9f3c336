//! Coarse-to-fine motion compensation.
//!
//! Three convolutional paths estimate displacement fields at 1/4, 1/2 and
//! full resolution. Each coarser field is upsampled (with its values doubled,
//! keeping displacements in target-resolution pixels), used to pre-warp the
//! reference for the next path, and refined with a residual field. Every path
//! is a stack of five 24-channel 3x3 convolutions with PReLU and two identity
//! shortcuts, closed by a linear 2-channel convolution.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamId, ParamSet, Real, Tape};
use crate::error::{MifError, Result};
use crate::validation;

use super::init;

const PATH_WIDTH: usize = 24;
const PATH_DEPTH: usize = 5;

#[derive(Debug, Clone)]
struct McPath {
    name: &'static str,
    convs: Vec<(ParamId, ParamId, ParamId)>,
    head_w: ParamId,
    head_b: ParamId,
}

impl McPath {
    fn new<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        name: &'static str,
        rng: &mut ChaCha8Rng,
    ) -> McPath {
        let mut convs = Vec::with_capacity(PATH_DEPTH);
        let mut c_in = 2;
        for k in 0..PATH_DEPTH {
            let w = init::conv_weight(params, &format!("{prefix}.c{k}.w"), PATH_WIDTH, c_in, rng);
            let b = init::bias(params, &format!("{prefix}.c{k}.b"), PATH_WIDTH, 0.0);
            let s = init::prelu_slope(params, &format!("{prefix}.c{k}.s"), PATH_WIDTH);
            convs.push((w, b, s));
            c_in = PATH_WIDTH;
        }
        let head_w = init::conv_weight(params, &format!("{prefix}.head.w"), 2, PATH_WIDTH, rng);
        let head_b = init::bias(params, &format!("{prefix}.head.b"), 2, 0.0);
        McPath { name, convs, head_w, head_b }
    }

    /// `input` is the 2-channel (reference, target) stack at path resolution;
    /// returns a 2-channel displacement field at the same resolution.
    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        input: NodeId,
    ) -> Result<NodeId> {
        let act = |tape: &mut Tape<T>, k: usize, x: NodeId| -> Result<NodeId> {
            let (w, b, s) = self.convs[k];
            let y = tape.conv3x3(params, x, w, b, 1)?;
            tape.prelu(params, y, s)
        };
        let h1 = act(tape, 0, input)?;
        let h2 = act(tape, 1, h1)?;
        let h3p = act(tape, 2, h2)?;
        let h3 = tape.add(h3p, h1)?; // shortcut 1
        let h4 = act(tape, 3, h3)?;
        let h5p = act(tape, 4, h4)?;
        let h5 = tape.add(h5p, h3)?; // shortcut 2
        let field = tape.conv3x3(params, h5, self.head_w, self.head_b, 1)?;
        if !tape.is_finite(field) {
            return Err(MifError::Numeric(format!(
                "non-finite activations in motion path `{}`",
                self.name
            )));
        }
        Ok(field)
    }
}

/// Output of one compensation pass.
pub struct McOutput {
    /// Full-resolution displacement field, `[B, 2, H, W]`.
    pub flow: NodeId,
    /// Warped reference, `[B, 1, H, W]`.
    pub compensated: NodeId,
}

#[derive(Debug, Clone)]
pub struct McNet {
    path_quarter: McPath,
    path_half: McPath,
    path_full: McPath,
    /// Ablation: drop the full-resolution refinement path.
    pub use_full_scale: bool,
    /// Ablation: let the full-scale path predict an absolute field instead of
    /// a residual on top of the upsampled half-resolution field.
    pub full_scale_absolute: bool,
}

impl McNet {
    pub fn new<T: Real>(params: &mut ParamSet<T>, prefix: &str, rng: &mut ChaCha8Rng) -> McNet {
        McNet {
            path_quarter: McPath::new(params, &format!("{prefix}.quarter"), "quarter", rng),
            path_half: McPath::new(params, &format!("{prefix}.half"), "half", rng),
            path_full: McPath::new(params, &format!("{prefix}.full"), "full", rng),
            use_full_scale: true,
            full_scale_absolute: false,
        }
    }

    /// Estimates motion from `reference` to `target` and warps the reference.
    /// Both are `[B, 1, H, W]` with `H`, `W` divisible by 4.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        reference: NodeId,
        target: NodeId,
    ) -> Result<McOutput> {
        let (_, cr, h, w) = tape.value(reference).dim();
        if tape.value(target).dim() != tape.value(reference).dim() || cr != 1 {
            return Err(validation!(
                "compensation expects matching single-channel planes, got {:?} and {:?}",
                tape.value(reference).dim(),
                tape.value(target).dim()
            ));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(validation!("plane dims must be divisible by 4, got {h}x{w}"));
        }

        let ref_half = tape.avgpool2(reference)?;
        let tgt_half = tape.avgpool2(target)?;
        let ref_quarter = tape.avgpool2(ref_half)?;
        let tgt_quarter = tape.avgpool2(tgt_half)?;

        // Quarter-resolution estimate.
        let in_q = tape.concat_c(&[ref_quarter, tgt_quarter])?;
        let field_q = self.path_quarter.forward(tape, params, in_q)?;

        // Half resolution: pre-warp with the upsampled coarse field, refine.
        let field_h0 = tape.upsample2(field_q, 2.0);
        let warped_h = tape.warp(ref_half, field_h0)?;
        let in_h = tape.concat_c(&[warped_h, tgt_half])?;
        let resid_h = self.path_half.forward(tape, params, in_h)?;
        let field_h = tape.add(field_h0, resid_h)?;

        // Full resolution.
        let field_f0 = tape.upsample2(field_h, 2.0);
        let flow = if self.use_full_scale {
            let warped_f = tape.warp(reference, field_f0)?;
            let in_f = tape.concat_c(&[warped_f, target])?;
            let resid_f = self.path_full.forward(tape, params, in_f)?;
            if self.full_scale_absolute {
                resid_f
            } else {
                tape.add(field_f0, resid_f)?
            }
        } else {
            field_f0
        };

        let compensated = tape.warp(reference, flow)?;
        Ok(McOutput { flow, compensated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn setup() -> (ParamSet<f32>, McNet) {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let mut params = ParamSet::new();
        let net = McNet::new(&mut params, "mc", &mut r);
        (params, net)
    }

    #[test]
    fn field_is_full_resolution_and_output_in_range() {
        let (params, net) = setup();
        let mut r = ChaCha8Rng::seed_from_u64(22);
        for (h, w) in [(16usize, 16usize), (24, 32), (64, 48)] {
            let mut t = Tape::new();
            let rf = t.input(Array4::from_shape_fn((1, 1, h, w), |_| r.gen_range(0.0f32..1.0)));
            let tg = t.input(Array4::from_shape_fn((1, 1, h, w), |_| r.gen_range(0.0f32..1.0)));
            let out = net.forward(&mut t, &params, rf, tg).unwrap();
            assert_eq!(t.value(out.flow).dim(), (1, 2, h, w));
            assert_eq!(t.value(out.compensated).dim(), (1, 1, h, w));
            assert!(t.is_finite(out.compensated));
            // Warping an in-range plane is a convex combination of samples.
            for &v in t.value(out.compensated).iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn unaligned_dims_are_rejected() {
        let (params, net) = setup();
        let mut t = Tape::new();
        let rf = t.input(Array4::<f32>::zeros((1, 1, 18, 16)));
        let tg = t.input(Array4::<f32>::zeros((1, 1, 18, 16)));
        assert!(net.forward(&mut t, &params, rf, tg).is_err());
    }

    #[test]
    fn disabling_full_scale_still_yields_full_resolution_flow() {
        let (params, mut net) = setup();
        net.use_full_scale = false;
        let mut t = Tape::new();
        let rf = t.input(Array4::<f32>::from_elem((1, 1, 16, 16), 0.5));
        let tg = t.input(Array4::<f32>::from_elem((1, 1, 16, 16), 0.5));
        let out = net.forward(&mut t, &params, rf, tg).unwrap();
        assert_eq!(t.value(out.flow).dim(), (1, 2, 16, 16));
    }
}

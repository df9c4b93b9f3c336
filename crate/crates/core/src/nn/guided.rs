//! Block-adaptive guided convolution.
//!
//! A guidance stack (two plain 3x3 convolutions) turns the partition maps
//! into one intermediate map per output channel. Each output channel `l` is
//! then a 3x3 convolution over the inputs whose effective weights are the
//! stored weights modulated pointwise by intermediate map `l`:
//!
//! `out_l(x,y) = bias_l + sum_j sum_d w[l,j,d] * m_l(x+d) * in_j(x+d)`
//!
//! which is computed as an outer channel product followed by a grouped
//! convolution.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamId, ParamSet, Real, Tape};
use crate::error::Result;
use crate::validation;

use super::init;

/// Width of the guidance stack's hidden layer.
const GUIDE_HIDDEN: usize = 8;

#[derive(Debug, Clone)]
pub struct GuidedConv {
    pub p_in: usize,
    pub p_guide: usize,
    pub p_out: usize,
    /// Space-invariant kernel, `[p_out, p_in, 3, 3]`.
    pub weight: ParamId,
    pub bias: ParamId,
    guide_w1: ParamId,
    guide_b1: ParamId,
    guide_s1: ParamId,
    guide_w2: ParamId,
    guide_b2: ParamId,
}

impl GuidedConv {
    /// Creates the layer's parameters. The second guidance layer starts with
    /// small weights and bias 1 so the layer initially behaves like a plain
    /// convolution.
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        p_in: usize,
        p_guide: usize,
        p_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> GuidedConv {
        GuidedConv {
            p_in,
            p_guide,
            p_out,
            weight: init::conv_weight(params, &format!("{prefix}.w"), p_out, p_in, rng),
            bias: init::bias(params, &format!("{prefix}.b"), p_out, 0.0),
            guide_w1: init::conv_weight(params, &format!("{prefix}.guide1.w"), GUIDE_HIDDEN, p_guide, rng),
            guide_b1: init::bias(params, &format!("{prefix}.guide1.b"), GUIDE_HIDDEN, 0.0),
            guide_s1: init::prelu_slope(params, &format!("{prefix}.guide1.s"), GUIDE_HIDDEN),
            guide_w2: init::conv_weight_scaled(params, &format!("{prefix}.guide2.w"), p_out, GUIDE_HIDDEN, 0.01, rng),
            guide_b2: init::bias(params, &format!("{prefix}.guide2.b"), p_out, 1.0),
        }
    }

    /// Intermediate maps from the guidance stack, `[B, p_out, H, W]`.
    pub fn intermediate_maps<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        guidance: NodeId,
    ) -> Result<NodeId> {
        let (_, c, _, _) = tape.value(guidance).dim();
        if c != self.p_guide {
            return Err(validation!("guided conv expects {} guidance maps, got {c}", self.p_guide));
        }
        let h1 = tape.conv3x3(params, guidance, self.guide_w1, self.guide_b1, 1)?;
        let h1 = tape.prelu(params, h1, self.guide_s1)?;
        tape.conv3x3(params, h1, self.guide_w2, self.guide_b2, 1)
    }

    /// Full guided convolution.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        inputs: NodeId,
        guidance: NodeId,
    ) -> Result<NodeId> {
        let maps = self.intermediate_maps(tape, params, guidance)?;
        self.forward_with_maps(tape, params, inputs, maps)
    }

    /// Convolution-with-intermediation step, with externally supplied maps
    /// (tests use this to force specific intermediates).
    pub fn forward_with_maps<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        inputs: NodeId,
        maps: NodeId,
    ) -> Result<NodeId> {
        let (_, c, _, _) = tape.value(inputs).dim();
        if c != self.p_in {
            return Err(validation!("guided conv expects {} input maps, got {c}", self.p_in));
        }
        let (_, cm, _, _) = tape.value(maps).dim();
        if cm != self.p_out {
            return Err(validation!("guided conv expects {} intermediate maps, got {cm}", self.p_out));
        }
        // prod[b, l*p_in + j] = m_l * in_j, then one grouped conv applies
        // w[l, j] across each group and sums over j.
        let prod = tape.mul_outer(maps, inputs)?;
        tape.conv3x3(params, prod, self.weight, self.bias, self.p_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    /// Forcing the guidance stack to produce constant-one maps must reduce the
    /// layer to a plain 3x3 convolution with the same kernel, exactly.
    #[test]
    fn unit_guidance_reduces_to_standard_conv() {
        let mut r = rng();
        let mut params = ParamSet::<f64>::new();
        let layer = GuidedConv::new(&mut params, "g", 3, 2, 16, &mut r);
        // Zero the second guidance layer's weights; its bias is already 1.
        params.value_mut(layer.guide_w2).fill(0.0);

        let x = Array4::from_shape_fn((2, 3, 8, 8), |_| r.gen_range(-1.0..1.0));
        let guidance = Array4::from_shape_fn((2, 2, 8, 8), |_| if r.gen_bool(0.5) { 1.0 } else { -1.0 });

        let mut t = Tape::new();
        let xn = t.input(x.clone());
        let gn = t.input(guidance);
        let guided = layer.forward(&mut t, &params, xn, gn).unwrap();

        let std_conv = t.conv3x3(&params, xn, layer.weight, layer.bias, 1).unwrap();
        let diff = t.value(guided) - t.value(std_conv);
        let max = diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 1e-6, "max diff {max}");
    }

    /// Zero intermediate maps kill every product term, leaving only the bias.
    #[test]
    fn zero_maps_leave_only_bias() {
        let mut r = rng();
        let mut params = ParamSet::<f64>::new();
        let layer = GuidedConv::new(&mut params, "g", 2, 2, 4, &mut r);
        let bias_vals: Vec<f64> = (0..4).map(|i| i as f64 * 0.25 - 0.3).collect();
        *params.value_mut(layer.bias) = ArrayD::from_shape_vec(IxDyn(&[4]), bias_vals.clone()).unwrap();

        let x = Array4::from_shape_fn((1, 2, 6, 6), |_| r.gen_range(-1.0..1.0));
        let mut t = Tape::new();
        let xn = t.input(x);
        let zero_maps = t.input(Array4::zeros((1, 4, 6, 6)));
        let out = layer.forward_with_maps(&mut t, &params, xn, zero_maps).unwrap();
        for l in 0..4 {
            for y in 0..6 {
                for xx in 0..6 {
                    assert_eq!(t.value(out)[[0, l, y, xx]], bias_vals[l]);
                }
            }
        }
    }

    #[test]
    fn wrong_arity_is_rejected() {
        let mut r = rng();
        let mut params = ParamSet::<f64>::new();
        let layer = GuidedConv::new(&mut params, "g", 3, 2, 8, &mut r);
        let mut t = Tape::new();
        let x = t.input(Array4::zeros((1, 2, 4, 4))); // 2 != p_in
        let g = t.input(Array4::zeros((1, 2, 4, 4)));
        assert!(layer.forward(&mut t, &params, x, g).is_err());
        let x3 = t.input(Array4::zeros((1, 3, 4, 4)));
        let g1 = t.input(Array4::zeros((1, 1, 4, 4))); // 1 != p_guide
        assert!(layer.forward(&mut t, &params, x3, g1).is_err());
    }
}

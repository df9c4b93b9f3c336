//! Dense units: four 3x3 convolutional layers where layer `k` consumes the
//! concatenation of the unit input and all previous layer outputs, giving ten
//! inter-layer connections per unit.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamId, ParamSet, Real, Tape};
use crate::error::Result;
use crate::validation;

use super::{init, GROWTH};

#[derive(Debug, Clone)]
pub struct DenseUnit {
    pub c_in: usize,
    /// When set, the last layer is linear, outputs a single channel, and the
    /// unit returns only that channel (the difference frame).
    pub is_final: bool,
    layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    w: ParamId,
    b: ParamId,
    slope: Option<ParamId>,
}

pub const LAYERS_PER_UNIT: usize = 4;

impl DenseUnit {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        c_in: usize,
        is_final: bool,
        rng: &mut ChaCha8Rng,
    ) -> DenseUnit {
        let mut layers = Vec::with_capacity(LAYERS_PER_UNIT);
        let mut width = c_in;
        for k in 0..LAYERS_PER_UNIT {
            let last = k == LAYERS_PER_UNIT - 1;
            let c_out = if is_final && last { 1 } else { GROWTH };
            let w = init::conv_weight(params, &format!("{prefix}.l{k}.w"), c_out, width, rng);
            let b = init::bias(params, &format!("{prefix}.l{k}.b"), c_out, 0.0);
            let slope = if is_final && last {
                None
            } else {
                Some(init::prelu_slope(params, &format!("{prefix}.l{k}.s"), c_out))
            };
            layers.push(DenseLayer { w, b, slope });
            width += GROWTH;
        }
        DenseUnit { c_in, is_final, layers }
    }

    /// Number of inter-layer connections realized by the unit: layer `k`
    /// consumes `k` earlier tensors (unit input plus previous outputs).
    pub fn connection_count(&self) -> usize {
        (1..=self.layers.len()).sum()
    }

    /// Channels the unit emits: the four concatenated layer outputs, or one
    /// channel for the final unit.
    pub fn c_out(&self) -> usize {
        if self.is_final {
            1
        } else {
            LAYERS_PER_UNIT * GROWTH
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        input: NodeId,
    ) -> Result<NodeId> {
        let (_, c, _, _) = tape.value(input).dim();
        if c != self.c_in {
            return Err(validation!("dense unit expects {} input channels, got {c}", self.c_in));
        }
        let mut feeds = vec![input];
        let mut outputs = Vec::with_capacity(LAYERS_PER_UNIT);
        for layer in &self.layers {
            let stacked = if feeds.len() == 1 { feeds[0] } else { tape.concat_c(&feeds)? };
            let mut y = tape.conv3x3(params, stacked, layer.w, layer.b, 1)?;
            if let Some(slope) = layer.slope {
                y = tape.prelu(params, y, slope)?;
            }
            outputs.push(y);
            feeds.push(y);
        }
        if self.is_final {
            Ok(*outputs.last().unwrap())
        } else {
            tape.concat_c(&outputs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;

    #[test]
    fn widths_and_connections_follow_the_dense_pattern() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::<f32>::new();
        let unit = DenseUnit::new(&mut params, "u", 16, false, &mut r);
        assert_eq!(unit.connection_count(), 10);
        assert_eq!(unit.c_out(), 48);
        // Layer k sees c_in + k*growth input channels: 16, 28, 40, 52.
        for (k, expect) in [16usize, 28, 40, 52].into_iter().enumerate() {
            let shape = params.value(unit.layers[k].w).shape().to_vec();
            assert_eq!(shape, vec![if k == 3 { GROWTH } else { GROWTH }, expect, 3, 3]);
        }

        let mut t = Tape::new();
        let x = t.input(Array4::<f32>::from_elem((1, 16, 8, 8), 0.1));
        let y = unit.forward(&mut t, &params, x).unwrap();
        assert_eq!(t.value(y).dim(), (1, 48, 8, 8));
    }

    #[test]
    fn final_unit_collapses_to_one_linear_channel() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamSet::<f32>::new();
        let unit = DenseUnit::new(&mut params, "u", 48, true, &mut r);
        let mut t = Tape::new();
        let x = t.input(Array4::<f32>::from_elem((2, 48, 8, 8), 0.2));
        let y = unit.forward(&mut t, &params, x).unwrap();
        assert_eq!(t.value(y).dim(), (2, 1, 8, 8));
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::<f64>::new();
        let unit = DenseUnit::new(&mut params, "u", 8, false, &mut r);
        for id in params.ids() {
            params.value_mut(id).fill(0.0);
        }
        let mut t = Tape::new();
        let x = t.input(Array4::from_elem((1, 8, 6, 6), 0.4));
        let y = unit.forward(&mut t, &params, x).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let mut params = ParamSet::<f32>::new();
        let unit = DenseUnit::new(&mut params, "u", 16, false, &mut r);
        let mut t = Tape::new();
        let x = t.input(Array4::<f32>::zeros((1, 12, 8, 8)));
        assert!(unit.forward(&mut t, &params, x).is_err());
    }
}

//! 64x64 co-located training patches.

use ndarray::{s, Array2};

use crate::error::Result;
use crate::frame::Frame;
use crate::partition::PartitionMaps;
use crate::validation;

/// Training patch side length, in luma pixels.
pub const PATCH_SIZE: usize = 64;

/// One co-located stack of luma patches: ground truth, reconstruction,
/// partition guidance, and zero or more reference patches.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub raw: Array2<f32>,
    pub urf: Array2<f32>,
    pub cu: Array2<f32>,
    pub tu: Array2<f32>,
    /// Empty for single-frame samples; length M for multi-frame samples.
    pub refs: Vec<Array2<f32>>,
}

/// Cuts co-located patches on a regular grid.
///
/// Patches that would extend past the frame border are discarded, so the
/// output count is exactly `⌊(H-64)/stride+1⌋ · ⌊(W-64)/stride+1⌋` when both
/// dimensions are at least 64, and zero otherwise.
pub fn extract_patches(
    raw: &Frame,
    urf: &Frame,
    maps: &PartitionMaps,
    refs: &[&Frame],
    stride: usize,
) -> Result<Vec<PatchSample>> {
    if stride < 1 {
        return Err(validation!("stride must be >= 1"));
    }
    let (h, w) = raw.dim();
    if urf.dim() != (h, w) {
        return Err(validation!("raw is {h}x{w} but urf is {:?}", urf.dim()));
    }
    if maps.cu.dim() != (h, w) || maps.tu.dim() != (h, w) {
        return Err(validation!("partition maps do not match the {h}x{w} frame"));
    }
    for r in refs {
        if r.dim() != (h, w) {
            return Err(validation!("reference frame is {:?}, expected {h}x{w}", r.dim()));
        }
    }
    let mut out = Vec::new();
    if h < PATCH_SIZE || w < PATCH_SIZE {
        return Ok(out);
    }
    let mut y = 0;
    while y + PATCH_SIZE <= h {
        let mut x = 0;
        while x + PATCH_SIZE <= w {
            let window = s![y..y + PATCH_SIZE, x..x + PATCH_SIZE];
            out.push(PatchSample {
                raw: raw.y().slice(window).to_owned(),
                urf: urf.y().slice(window).to_owned(),
                cu: maps.cu.slice(window).to_owned(),
                tu: maps.tu.slice(window).to_owned(),
                refs: refs.iter().map(|r| r.y().slice(window).to_owned()).collect(),
            });
            x += stride;
        }
        y += stride;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::FrameRole;
    use crate::partition::{rasterize_partition, uniform_layout, BlockLayout};

    fn setup(h: usize, w: usize) -> (Frame, Frame, PartitionMaps) {
        let raw = Frame::constant(FrameRole::Raw, 0, h, w, 0.5).unwrap();
        let urf = Frame::constant(FrameRole::Urf, 0, h, w, 0.4).unwrap();
        let layout = BlockLayout {
            cu: uniform_layout(w, h, 16),
            tu: uniform_layout(w, h, 8),
        };
        let maps = rasterize_partition(&layout, w, h).unwrap();
        (raw, urf, maps)
    }

    #[test]
    fn patch_counts_follow_the_grid_formula() {
        for &(h, w, stride, expect) in &[
            (64usize, 64usize, 64usize, 1usize),
            (128, 128, 64, 4),
            (100, 100, 64, 1),
            (128, 96, 32, 3 * 2),
            (48, 64, 64, 0),
        ] {
            let (raw, urf, maps) = setup(h, w);
            let got = extract_patches(&raw, &urf, &maps, &[], stride).unwrap().len();
            assert_eq!(got, expect, "{h}x{w} stride {stride}");
            if h >= 64 && w >= 64 {
                let formula = ((h - 64) / stride + 1) * ((w - 64) / stride + 1);
                assert_eq!(got, formula);
            }
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (raw, _, maps) = setup(64, 64);
        let urf_small = Frame::constant(FrameRole::Urf, 0, 32, 64, 0.4).unwrap();
        assert!(extract_patches(&raw, &urf_small, &maps, &[], 64).is_err());

        let (_, urf, _) = setup(64, 64);
        let ref_small = Frame::constant(FrameRole::Reference, 0, 32, 64, 0.4).unwrap();
        assert!(extract_patches(&raw, &urf, &maps, &[&ref_small], 64).is_err());
    }

    #[test]
    fn patches_carry_reference_stacks() {
        let (raw, urf, maps) = setup(64, 128);
        let r0 = Frame::constant(FrameRole::Reference, 1, 64, 128, 0.3).unwrap();
        let r1 = Frame::constant(FrameRole::Reference, 2, 64, 128, 0.6).unwrap();
        let patches = extract_patches(&raw, &urf, &maps, &[&r0, &r1], 64).unwrap();
        assert_eq!(patches.len(), 2);
        for p in &patches {
            assert_eq!(p.refs.len(), 2);
            assert_eq!(p.refs[0][[0, 0]], 0.3);
            assert_eq!(p.refs[1][[0, 0]], 0.6);
            assert_eq!(p.raw.dim(), (64, 64));
        }
    }
}

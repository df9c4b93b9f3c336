//! Block partition layouts and their rasterized boundary maps.
//!
//! The partition of a frame is stored compactly as rectangle lists (one for
//! the coding-unit level, one for the transform-unit level) and rasterized on
//! demand into per-pixel ±1 maps: `+1` on block boundaries, `-1` in block
//! interiors. The frame edge always counts as a boundary.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MifError, Result};
use crate::validation;

/// Axis-aligned block, in luma pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Rect {
        Rect { x, y, w, h }
    }
}

/// Rectangle tilings of one frame at the CU and TU levels.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BlockLayout {
    pub cu: Vec<Rect>,
    pub tu: Vec<Rect>,
}

/// Per-pixel boundary maps, values exactly `+1` or `-1`.
#[derive(Debug, Clone)]
pub struct PartitionMaps {
    pub cu: Array2<f32>,
    pub tu: Array2<f32>,
}

fn is_pow2_in_range(side: usize) -> bool {
    side.is_power_of_two() && (4..=64).contains(&side)
}

/// Rasterizes one rectangle list into a ±1 boundary map, validating that the
/// rectangles tile the frame exactly.
pub fn rasterize_rects(rects: &[Rect], width: usize, height: usize) -> Result<Array2<f32>> {
    for r in rects {
        if !is_pow2_in_range(r.w) || !is_pow2_in_range(r.h) {
            return Err(validation!(
                "block {}x{} at ({},{}) has a side that is not a power of two in 4..=64",
                r.w,
                r.h,
                r.x,
                r.y
            ));
        }
        if r.x + r.w > width || r.y + r.h > height {
            return Err(validation!(
                "block {}x{} at ({},{}) exceeds the {width}x{height} frame",
                r.w,
                r.h,
                r.x,
                r.y
            ));
        }
    }
    // Coverage counts catch both gaps and overlaps, reported at the first
    // offending pixel in raster order.
    let mut cover = Array2::<u8>::zeros((height, width));
    for r in rects {
        for yy in r.y..r.y + r.h {
            for xx in r.x..r.x + r.w {
                cover[[yy, xx]] = cover[[yy, xx]].saturating_add(1);
            }
        }
    }
    for yy in 0..height {
        for xx in 0..width {
            match cover[[yy, xx]] {
                1 => {}
                0 => return Err(validation!("layout gap at pixel ({xx},{yy})")),
                _ => return Err(validation!("layout overlap at pixel ({xx},{yy})")),
            }
        }
    }

    let mut map = Array2::from_elem((height, width), -1.0f32);
    for r in rects {
        for xx in r.x..r.x + r.w {
            map[[r.y, xx]] = 1.0;
            map[[r.y + r.h - 1, xx]] = 1.0;
        }
        for yy in r.y..r.y + r.h {
            map[[yy, r.x]] = 1.0;
            map[[yy, r.x + r.w - 1]] = 1.0;
        }
    }
    Ok(map)
}

/// Rasterizes a CU+TU layout into [`PartitionMaps`].
pub fn rasterize_partition(layout: &BlockLayout, width: usize, height: usize) -> Result<PartitionMaps> {
    Ok(PartitionMaps {
        cu: rasterize_rects(&layout.cu, width, height)?,
        tu: rasterize_rects(&layout.tu, width, height)?,
    })
}

/// Sidecar entry as stored on disk: rectangles as `[x, y, w, h]` arrays.
#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    cu: Vec<[usize; 4]>,
    tu: Vec<[usize; 4]>,
}

/// Writes one layout per frame as the JSON sidecar format.
pub fn write_partition_sidecar(path: impl AsRef<Path>, layouts: &[BlockLayout]) -> Result<()> {
    let path = path.as_ref();
    let entries: Vec<SidecarEntry> = layouts
        .iter()
        .map(|l| SidecarEntry {
            cu: l.cu.iter().map(|r| [r.x, r.y, r.w, r.h]).collect(),
            tu: l.tu.iter().map(|r| [r.x, r.y, r.w, r.h]).collect(),
        })
        .collect();
    let json = serde_json::to_string(&entries)
        .map_err(|e| MifError::Format(format!("{}: {e}", path.display())))?;
    std::fs::write(path, json).map_err(|e| MifError::io(path, e))
}

/// Reads a JSON partition sidecar (one entry per frame).
pub fn read_partition_sidecar(path: impl AsRef<Path>) -> Result<Vec<BlockLayout>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
    let entries: Vec<SidecarEntry> = serde_json::from_str(&text)
        .map_err(|e| MifError::Format(format!("{}: {e}", path.display())))?;
    Ok(entries
        .into_iter()
        .map(|e| BlockLayout {
            cu: e.cu.iter().map(|&[x, y, w, h]| Rect::new(x, y, w, h)).collect(),
            tu: e.tu.iter().map(|&[x, y, w, h]| Rect::new(x, y, w, h)).collect(),
        })
        .collect())
}

/// Uniform tiling, handy for tests and as a degenerate layout.
pub fn uniform_layout(width: usize, height: usize, block: usize) -> Vec<Rect> {
    let mut rects = Vec::new();
    let mut y = 0;
    while y < height {
        let mut x = 0;
        while x < width {
            rects.push(Rect::new(x, y, block.min(width - x), block.min(height - y)));
            x += block;
        }
        y += block;
    }
    rects
}

//! Planar YUV 4:2:0 frames and raw-sequence I/O.
//!
//! Samples live in `[0, 1]` as `f32`; conversion to/from integer code values
//! happens only at the file boundary. All frame data is immutable after
//! construction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{MifError, Result};
use crate::validation;

/// What a frame is playing in the pipeline. Purely informational; the sample
/// layout is identical for every role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FrameRole {
    /// Original (uncompressed) frame.
    Raw,
    /// Unfiltered reconstruction straight out of the codec.
    Urf,
    /// Member of the reference-frame pool.
    Pool,
    /// Frame selected as a reference.
    Reference,
    /// Motion-compensated reference.
    Compensated,
    /// Output of an enhancement network.
    Enhanced,
    /// Residual frame; samples unbounded.
    Difference,
}

impl FrameRole {
    fn samples_bounded(self) -> bool {
        !matches!(self, FrameRole::Difference)
    }
}

/// One planar 4:2:0 picture.
#[derive(Debug, Clone)]
pub struct Frame {
    y: Array2<f32>,
    u: Array2<f32>,
    v: Array2<f32>,
    role: FrameRole,
    index: usize,
    qp: Option<i32>,
}

impl Frame {
    /// Builds a frame, checking the plane geometry and sample-range invariants.
    pub fn new(
        role: FrameRole,
        index: usize,
        y: Array2<f32>,
        u: Array2<f32>,
        v: Array2<f32>,
        qp: Option<i32>,
    ) -> Result<Self> {
        let (h, w) = y.dim();
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(validation!("luma plane must have even nonzero dims, got {h}x{w}"));
        }
        for (name, c) in [("u", &u), ("v", &v)] {
            if c.dim() != (h / 2, w / 2) {
                return Err(validation!(
                    "{name} plane must be {}x{}, got {}x{}",
                    h / 2,
                    w / 2,
                    c.dim().0,
                    c.dim().1
                ));
            }
        }
        let bounded = role.samples_bounded();
        for plane in [&y, &u, &v] {
            for &s in plane.iter() {
                if !s.is_finite() {
                    return Err(validation!("non-finite sample in frame {index}"));
                }
                if bounded && !(0.0..=1.0).contains(&s) {
                    return Err(validation!("sample {s} out of [0,1] in {role:?} frame {index}"));
                }
            }
        }
        Ok(Frame { y, u, v, role, index, qp })
    }

    /// Constant-luma gray frame, handy in tests and as a pool placeholder.
    pub fn constant(role: FrameRole, index: usize, h: usize, w: usize, value: f32) -> Result<Self> {
        Frame::new(
            role,
            index,
            Array2::from_elem((h, w), value),
            Array2::from_elem((h / 2, w / 2), 0.5),
            Array2::from_elem((h / 2, w / 2), 0.5),
            None,
        )
    }

    pub fn y(&self) -> &Array2<f32> {
        &self.y
    }
    pub fn u(&self) -> &Array2<f32> {
        &self.u
    }
    pub fn v(&self) -> &Array2<f32> {
        &self.v
    }
    pub fn role(&self) -> FrameRole {
        self.role
    }
    pub fn index(&self) -> usize {
        self.index
    }
    pub fn qp(&self) -> Option<i32> {
        self.qp
    }
    /// Luma dimensions `(height, width)`.
    pub fn dim(&self) -> (usize, usize) {
        self.y.dim()
    }

    /// Same picture, different role tag.
    pub fn with_role(&self, role: FrameRole) -> Frame {
        Frame { role, ..self.clone() }
    }

    /// Replaces the luma plane (e.g. with an enhanced one), keeping chroma.
    pub fn with_luma(&self, y: Array2<f32>, role: FrameRole) -> Result<Frame> {
        Frame::new(role, self.index, y, self.u.clone(), self.v.clone(), self.qp)
    }

    pub fn with_qp(mut self, qp: i32) -> Frame {
        self.qp = Some(qp);
        self
    }
}

fn plane_bytes(w: usize, h: usize, bit_depth: u32) -> usize {
    w * h * if bit_depth == 8 { 1 } else { 2 }
}

fn frame_bytes(w: usize, h: usize, bit_depth: u32) -> usize {
    plane_bytes(w, h, bit_depth) + 2 * plane_bytes(w / 2, h / 2, bit_depth)
}

fn decode_plane(buf: &[u8], h: usize, w: usize, bit_depth: u32) -> Array2<f32> {
    let peak = ((1u32 << bit_depth) - 1) as f32;
    let mut plane = Array2::zeros((h, w));
    if bit_depth == 8 {
        for (dst, &b) in plane.iter_mut().zip(buf) {
            *dst = b as f32 / peak;
        }
    } else {
        for (i, dst) in plane.iter_mut().enumerate() {
            let v = u16::from_le_bytes([buf[2 * i], buf[2 * i + 1]]);
            *dst = v as f32 / peak;
        }
    }
    plane
}

fn encode_plane(plane: &Array2<f32>, bit_depth: u32, out: &mut Vec<u8>) {
    let peak = ((1u32 << bit_depth) - 1) as f32;
    for &s in plane.iter() {
        let code = (s.clamp(0.0, 1.0) * peak).round() as u32;
        if bit_depth == 8 {
            out.push(code as u8);
        } else {
            out.extend_from_slice(&(code as u16).to_le_bytes());
        }
    }
}

/// Reads a headerless frame-sequential planar 4:2:0 file.
///
/// Supports 8-bit and 10-bit little-endian sample packing. Samples are mapped
/// to `[0,1]` by dividing by `2^bit_depth - 1`; frames get indices `0..K-1`
/// and the given role.
pub fn read_yuv_sequence(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    bit_depth: u32,
    role: FrameRole,
) -> Result<Vec<Frame>> {
    let path = path.as_ref();
    if bit_depth != 8 && bit_depth != 10 {
        return Err(MifError::Config(format!("unsupported bit depth {bit_depth} (expected 8 or 10)")));
    }
    if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
        return Err(validation!("frame dimensions must be even and nonzero, got {width}x{height}"));
    }
    let file = File::open(path).map_err(|e| MifError::io(path, e))?;
    let size = file.metadata().map_err(|e| MifError::io(path, e))?.len() as usize;
    let per_frame = frame_bytes(width, height, bit_depth);
    if size == 0 || size % per_frame != 0 {
        return Err(MifError::Format(format!(
            "{}: file size {size} is not a positive multiple of the {per_frame}-byte frame size \
             ({width}x{height}, {bit_depth}-bit 4:2:0)",
            path.display()
        )));
    }
    let mut reader = BufReader::new(file);
    let mut frames = Vec::with_capacity(size / per_frame);
    let mut buf = vec![0u8; per_frame];
    for index in 0..size / per_frame {
        reader.read_exact(&mut buf).map_err(|e| MifError::io(path, e))?;
        let yb = plane_bytes(width, height, bit_depth);
        let cb = plane_bytes(width / 2, height / 2, bit_depth);
        let y = decode_plane(&buf[..yb], height, width, bit_depth);
        let u = decode_plane(&buf[yb..yb + cb], height / 2, width / 2, bit_depth);
        let v = decode_plane(&buf[yb + cb..], height / 2, width / 2, bit_depth);
        frames.push(Frame::new(role, index, y, u, v, None)?);
    }
    Ok(frames)
}

/// Writes frames back out as headerless planar 4:2:0.
///
/// Inverse of [`read_yuv_sequence`]: reading a written file reproduces the
/// original bytes exactly for in-range samples.
pub fn write_yuv_sequence(path: impl AsRef<Path>, frames: &[Frame], bit_depth: u32) -> Result<()> {
    let path = path.as_ref();
    if bit_depth != 8 && bit_depth != 10 {
        return Err(MifError::Config(format!("unsupported bit depth {bit_depth} (expected 8 or 10)")));
    }
    let file = File::create(path).map_err(|e| MifError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let mut buf = Vec::new();
    for frame in frames {
        buf.clear();
        encode_plane(&frame.y, bit_depth, &mut buf);
        encode_plane(&frame.u, bit_depth, &mut buf);
        encode_plane(&frame.v, bit_depth, &mut buf);
        writer.write_all(&buf).map_err(|e| MifError::io(path, e))?;
    }
    writer.flush().map_err(|e| MifError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("mif-frame-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn constant_file_reads_as_constant_frames() {
        let path = tmpfile("const.yuv");
        let per_frame = 16 * 16 + 2 * 8 * 8;
        let mut f = File::create(&path).unwrap();
        f.write_all(&vec![128u8; 2 * per_frame]).unwrap();
        drop(f);

        let frames = read_yuv_sequence(&path, 16, 16, 8, FrameRole::Raw).unwrap();
        assert_eq!(frames.len(), 2);
        for (i, fr) in frames.iter().enumerate() {
            assert_eq!(fr.index(), i);
            for &s in fr.y().iter() {
                assert_eq!(s, 128.0 / 255.0);
            }
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn size_mismatch_is_an_io_error() {
        let path = tmpfile("bad.yuv");
        std::fs::write(&path, vec![0u8; 100]).unwrap();
        let err = read_yuv_sequence(&path, 16, 16, 8, FrameRole::Raw).unwrap_err();
        assert_eq!(err.category(), "io");
        let msg = err.to_string();
        assert!(msg.contains("100") && msg.contains("384"), "unexpected message: {msg}");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn unsupported_bit_depth_is_a_config_error() {
        let err = read_yuv_sequence("/nonexistent", 16, 16, 12, FrameRole::Raw).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn ramp_round_trip_is_bit_exact() {
        let path = tmpfile("ramp.yuv");
        let per_frame = 32 * 16 + 2 * 16 * 8;
        let bytes: Vec<u8> = (0..3 * per_frame).map(|i| (i * 7 % 256) as u8).collect();
        std::fs::write(&path, &bytes).unwrap();

        let frames = read_yuv_sequence(&path, 32, 16, 8, FrameRole::Raw).unwrap();
        let out = tmpfile("ramp-out.yuv");
        write_yuv_sequence(&out, &frames, 8).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), bytes);
        std::fs::remove_file(&path).unwrap();
        std::fs::remove_file(&out).unwrap();
    }

    #[test]
    fn ten_bit_round_trip_is_bit_exact() {
        let path = tmpfile("ramp10.yuv");
        let samples = 8 * 8 + 2 * 4 * 4;
        let mut bytes = Vec::new();
        for i in 0..samples {
            bytes.extend_from_slice(&(((i * 13) % 1024) as u16).to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let frames = read_yuv_sequence(&path, 8, 8, 10, FrameRole::Raw).unwrap();
        let out = tmpfile("ramp10-out.yuv");
        write_yuv_sequence(&out, &frames, 10).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), bytes);
        std::fs::remove_file(&path).unwrap();
        std::fs::remove_file(&out).unwrap();
    }

    #[test]
    fn frame_invariants_are_enforced() {
        let y = Array2::from_elem((8, 8), 0.5);
        let u = Array2::from_elem((4, 4), 0.5);
        let v = Array2::from_elem((4, 4), 0.5);
        assert!(Frame::new(FrameRole::Raw, 0, y.clone(), u.clone(), v.clone(), None).is_ok());

        let bad = Array2::from_elem((8, 8), 1.5);
        assert!(Frame::new(FrameRole::Raw, 0, bad.clone(), u.clone(), v.clone(), None).is_err());
        // Unbounded samples are fine for difference frames.
        let d = Frame::new(FrameRole::Difference, 0, bad, u.clone(), v.clone(), None);
        assert!(d.is_ok());

        let odd = Array2::from_elem((7, 8), 0.5);
        assert!(Frame::new(FrameRole::Raw, 0, odd, u, v, None).is_err());
    }
}

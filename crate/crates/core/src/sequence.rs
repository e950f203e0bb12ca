//! Frame sequences and the PMV file format.
//!
//! PMV layout (all little-endian):
//!
//! | field   | type      |
//! |---------|-----------|
//! | magic   | `b"PMV1"` |
//! | frames  | u32       |
//! | height  | u32       |
//! | width   | u32       |
//! | pixels  | frames * height * width f32, frame-major, row-major |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{topology, Error, Result};
use crate::tensor::{Frame, MapStack};

pub const PMV_MAGIC: &[u8; 4] = b"PMV1";

/// Ordered frames of one size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    height: usize,
    width: usize,
    frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn new(height: usize, width: usize) -> Self {
        FrameSequence { height, width, frames: Vec::new() }
    }

    pub fn from_frames(height: usize, width: usize, frames: Vec<Frame>) -> Result<Self> {
        if let Some(f) = frames.iter().find(|f| f.dims() != (1, height, width)) {
            return topology(format!("frame {:?} does not match sequence size {height}x{width}", f.dims()));
        }
        Ok(FrameSequence { height, width, frames })
    }

    pub fn push(&mut self, frame: Frame) -> Result<()> {
        if frame.dims() != (1, self.height, self.width) {
            return topology(format!("frame {:?} does not match sequence size {}x{}", frame.dims(), self.height, self.width));
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }
    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }
    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> FrameSequence {
        FrameSequence { height: self.height, width: self.width, frames: self.frames[start..end].to_vec() }
    }

    pub fn to_pmv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.frames.len() * self.height * self.width);
        out.extend_from_slice(PMV_MAGIC);
        for v in [self.frames.len(), self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for f in &self.frames {
            for &v in f.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_pmv_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != PMV_MAGIC {
            return Err(Error::Corrupt("not a PMV1 file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (t, h, w) = (word(0), word(1), word(2));
        if h == 0 || w == 0 {
            return Err(Error::Corrupt(format!("PMV frame size {h}x{w}")));
        }
        let expected = t
            .checked_mul(h * w)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt("PMV header overflows".into()))?;
        if bytes.len() - 16 != expected {
            return Err(Error::Corrupt(format!(
                "PMV body holds {} bytes, header implies {expected}",
                bytes.len() - 16
            )));
        }
        let body = &bytes[16..];
        let mut frames = Vec::with_capacity(t);
        for k in 0..t {
            let data: Vec<f64> = body[k * h * w * 4..(k + 1) * h * w * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            frames.push(MapStack::from_vec(1, h, w, data).map_err(|e| Error::Corrupt(e.to_string()))?);
        }
        Ok(FrameSequence { height: h, width: w, frames })
    }

    pub fn save_pmv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_pmv_bytes())?;
        Ok(())
    }

    pub fn load_pmv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pmv_bytes(&fs::read(path)?)
    }

    /// Writes one binary PGM per frame (`prefix_0000.pgm`, ...), pixel > 0 drawn white.
    pub fn dump_pgm(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir.as_ref())?;
        for (k, f) in self.frames.iter().enumerate() {
            let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
            out.extend(f.as_slice().iter().map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8));
            fs::write(dir.as_ref().join(format!("{prefix}_{k:04}.pgm")), out)?;
        }
        Ok(())
    }
}

/// Reads a binary (P5) PGM as a frame in `[-1, 1]`.
pub fn read_pgm(bytes: &[u8]) -> Result<Frame> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Corrupt("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Corrupt("only binary P5 PGM is supported".into()));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Corrupt(format!("bad PGM field {s}")));
    let (w, h, maxv) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxv == 0 || maxv > 255 {
        return Err(Error::Corrupt("PGM maxval must be 1..=255".into()));
    }
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(Error::Corrupt("truncated PGM body".into()));
    }
    let data = bytes[pos..pos + w * h].iter().map(|&b| 2.0 * b as f64 / maxv as f64 - 1.0).collect();
    MapStack::from_vec(1, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_from(t: usize, h: usize, w: usize, vals: &[bool]) -> FrameSequence {
        let frames = (0..t)
            .map(|k| {
                let d = (0..h * w).map(|i| if vals[(k * h * w + i) % vals.len()] { 1.0 } else { -1.0 }).collect();
                MapStack::from_vec(1, h, w, d).unwrap()
            })
            .collect();
        FrameSequence::from_frames(h, w, frames).unwrap()
    }

    proptest! {
        #[test]
        fn pmv_round_trip(t in 0usize..6, h in 1usize..7, w in 1usize..7, vals in proptest::collection::vec(any::<bool>(), 1..40)) {
            let s = seq_from(t, h, w, &vals);
            let bytes = s.to_pmv_bytes();
            prop_assert_eq!(bytes.len(), 16 + 4 * t * h * w);
            let back = FrameSequence::from_pmv_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_pmv_bytes(), bytes);
        }
    }

    #[test]
    fn pmv_rejects_truncation_and_bad_magic() {
        let s = seq_from(3, 4, 4, &[true, false, false]);
        let bytes = s.to_pmv_bytes();
        assert!(matches!(FrameSequence::from_pmv_bytes(&bytes[..bytes.len() - 1]), Err(Error::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FrameSequence::from_pmv_bytes(&bad), Err(Error::Corrupt(_))));
        assert!(matches!(FrameSequence::from_pmv_bytes(b"PMV1"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn pgm_round_trip() {
        let s = seq_from(2, 3, 5, &[true, false]);
        let dir = tempfile::tempdir().unwrap();
        s.dump_pgm(dir.path(), "f").unwrap();
        let back = read_pgm(&fs::read(dir.path().join("f_0001.pgm")).unwrap()).unwrap();
        assert_eq!(&back, s.frame(1));
    }

    #[test]
    fn push_checks_size() {
        let mut s = FrameSequence::new(2, 2);
        assert!(s.push(MapStack::zeros(1, 2, 3)).is_err());
        s.push(MapStack::zeros(1, 2, 2)).unwrap();
        assert_eq!(s.len(), 1);
    }
}

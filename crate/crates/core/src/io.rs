//! On-disk formats.
//!
//! # Tensor file (version 1)
//!
//! ```text
//! "FRCT" | version: u16 LE = 1 | dtype: u8 (0 = f32) | rank: u8
//!        | dims: rank x u32 LE | payload: row-major f32 LE
//! ```
//!
//! # Tensor bundle (version 2)
//!
//! The multi-tensor variant used for checkpoints and flow fields:
//!
//! ```text
//! "FRCT" | version: u16 LE = 2 | meta_len: u32 LE | meta: UTF-8 text
//!        | count: u32 LE
//!        | count x ( name_len: u16 LE | name: UTF-8
//!                  | dtype: u8 | rank: u8 | dims: rank x u32 LE | payload )
//! ```
//!
//! # Images
//!
//! Frames are exported as binary PPM (`P6`, three channels) or PGM (`P5`,
//! one channel) with values mapped from `[-1, 1]` to `[0, 255]` by
//! `floor((v + 1) / 2 * 255 + 0.5)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, ArrayView2, ArrayViewD, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::FrameSequence;

pub const MAGIC: &[u8; 4] = b"FRCT";
pub const VERSION_SINGLE: u16 = 1;
pub const VERSION_BUNDLE: u16 = 2;
const DTYPE_F32: u8 = 0;

fn push_array(out: &mut Vec<u8>, a: &ArrayViewD<'_, f32>) -> Result<()> {
    let rank = u8::try_from(a.ndim()).map_err(|_| Error::InvalidShape {
        shape: a.shape().to_vec(),
        reason: "rank exceeds 255".into(),
    })?;
    out.push(DTYPE_F32);
    out.push(rank);
    for &d in a.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "dimension exceeds u32".into(),
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(a.len() * 4);
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor(a: &ArrayViewD<'_, f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * a.ndim() + 4 * a.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION_SINGLE.to_le_bytes());
    push_array(&mut out, a)?;
    Ok(out)
}

/// Byte reader that remembers its offset for error messages.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self) -> Result<u16> {
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        self.u16("version")
    }

    fn array(&mut self) -> Result<ArrayD<f32>> {
        let dtype_at = self.offset();
        let dtype = self.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(dtype_at, format!("unknown dtype code {dtype}")));
        }
        let rank = self.u8("rank")? as usize;
        let dims_at = self.offset();
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("dimension")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::format(dims_at, format!("dimensions {dims:?} overflow")))?;
        let payload = self.take(count * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length checked above"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ))
        }
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<ArrayD<f32>> {
    let mut cur = Cursor::new(bytes);
    let version = cur.header()?;
    if version != VERSION_SINGLE {
        return Err(Error::format(
            4,
            format!("expected version {VERSION_SINGLE}, found {version}"),
        ));
    }
    let a = cur.array()?;
    cur.finish()?;
    Ok(a)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(path: impl AsRef<Path>, a: &ArrayViewD<'_, f32>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(a)?)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<ArrayD<f32>> {
    decode_tensor(&read(path.as_ref())?)
}

pub fn save_frames(path: impl AsRef<Path>, seq: &FrameSequence) -> Result<()> {
    save_tensor(path, &seq.as_array().view().into_dyn())
}

/// Loads a rank-4 tensor as a frame sequence (values are clamped on load).
pub fn load_frames(path: impl AsRef<Path>) -> Result<FrameSequence> {
    let a = load_tensor(path)?;
    let shape = a.shape().to_vec();
    let a = a
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::InvalidShape {
            shape,
            reason: "expected a rank-4 [L, C, H, W] tensor".into(),
        })?;
    FrameSequence::new(a)
}

/// Named tensors plus a free-form UTF-8 metadata block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    pub meta: String,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl TensorBundle {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION_BUNDLE.to_le_bytes());
        let meta_len =
            u32::try_from(self.meta.len()).map_err(|_| Error::Precondition("metadata block exceeds 4 GiB".into()))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, a) in &self.tensors {
            let len =
                u16::try_from(name.len()).map_err(|_| Error::Precondition(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            push_array(&mut out, &a.view())?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let version = cur.header()?;
        if version != VERSION_BUNDLE {
            return Err(Error::format(
                4,
                format!("expected version {VERSION_BUNDLE}, found {version}"),
            ));
        }
        let meta_len = cur.u32("metadata length")? as usize;
        let meta_at = cur.offset();
        let meta = std::str::from_utf8(cur.take(meta_len, "metadata")?)
            .map_err(|e| Error::format(meta_at, format!("metadata is not UTF-8: {e}")))?
            .to_owned();
        let count = cur.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = cur.u16("name length")? as usize;
            let name_at = cur.offset();
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|e| Error::format(name_at, format!("name is not UTF-8: {e}")))?
                .to_owned();
            tensors.push((name, cur.array()?));
        }
        cur.finish()?;
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read(path.as_ref())?)
    }
}

/// `[-1, 1] -> [0, 255]` with round-half-up.
pub fn to_u8(v: f32) -> u8 {
    let x = ((v.clamp(-1.0, 1.0) as f64 + 1.0) / 2.0) * 255.0;
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes one `[C, H, W]` frame as PPM (`C = 3`) or PGM (`C = 1`).
pub fn encode_pnm(frame: &ndarray::ArrayView3<'_, f32>) -> Result<Vec<u8>> {
    let (c, h, w) = frame.dim();
    let tag = match c {
        1 => "P5",
        3 => "P6",
        other => return Err(Error::UnsupportedChannels(other)),
    };
    let mut out = format!("{tag}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(to_u8(frame[[ch, y, x]]));
            }
        }
    }
    Ok(out)
}

/// Greyscale PGM of an arbitrary non-negative map, scaled so `max` is white.
pub fn encode_pgm_scaled(map: &ArrayView2<'_, f32>, max: f32) -> Vec<u8> {
    let (h, w) = map.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    for v in map.iter() {
        out.push((v * scale).round().clamp(0.0, 255.0) as u8);
    }
    out
}

/// Writes `frame_000.ppm`, `frame_001.ppm`, ... (or `.pgm` for one channel)
/// into `dir` and returns the paths in frame order.
pub fn export_frames(seq: &FrameSequence, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let ext = match seq.channels() {
        1 => "pgm",
        3 => "ppm",
        other => return Err(Error::UnsupportedChannels(other)),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..seq.len())
        .map(|i| {
            let path = dir.join(format!("frame_{i:03}.{ext}"));
            write_atomic(&path, &encode_pnm(&seq.frame(i))?)?;
            Ok(path)
        })
        .collect()
}

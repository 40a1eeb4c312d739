//! Dense multi-channel tensors and the VIPT binary file format.
//!
//! A [`Tensor`] is a `channels x rows x cols` block of `f32` stored row-major
//! as `[channel][row][col]`, so each channel is one contiguous scan. For image
//! tensors the spatial axes are height x width, for sinogram tensors they are
//! views x detectors; the layout is identical and the [`TensorKind`] tag keeps
//! track of which one a file holds.
//!
//! VIPT file layout (all integers little-endian):
//!
//! ```text
//! offset  size            field
//! 0       4               magic "VIPT"
//! 4       2               version (u16) == 1
//! 6       1               rank (u8)
//! 7       1               kind (u8): 0 = image, 1 = sinogram, 2 = mask
//! 8       rank * 4        dims (u32 each)
//! ...     prod(dims) * 4  payload, IEEE-754 binary32 little-endian, row-major
//! ```
//!
//! Round-trips are bit-exact for any finite payload. Rank is 3 for tensors;
//! masks use rank 1 (view masks) or rank 2 (virtual masks) with kind 2.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const VIPT_MAGIC: [u8; 4] = *b"VIPT";
pub const VIPT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Image,
    Sinogram,
    Mask,
}

impl TensorKind {
    fn to_u8(self) -> u8 {
        match self {
            TensorKind::Image => 0,
            TensorKind::Sinogram => 1,
            TensorKind::Mask => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(TensorKind::Image),
            1 => Ok(TensorKind::Sinogram),
            2 => Ok(TensorKind::Mask),
            other => Err(Error::format(format!("unknown tensor kind {other}"))),
        }
    }
}

/// Dense `channels x rows x cols` tensor of `f32`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    kind: TensorKind,
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(kind: TensorKind, channels: usize, rows: usize, cols: usize) -> Self {
        Tensor {
            kind,
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    /// Builds a tensor from raw data; rejects length mismatches and non-finite values.
    pub fn from_vec(
        kind: TensorKind,
        channels: usize,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 || rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "tensor dims must be >= 1, got {channels}x{rows}x{cols}"
            )));
        }
        if data.len() != channels * rows * cols {
            return Err(Error::shape(format!(
                "data length {} != {channels}x{rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::argument(format!("non-finite value {bad} in tensor")));
        }
        Ok(Tensor {
            kind,
            channels,
            rows,
            cols,
            data,
        })
    }

    pub fn kind(&self) -> TensorKind {
        self.kind
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.kind, self.channels, self.rows, self.cols)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn at(&self, c: usize, r: usize, col: usize) -> f32 {
        self.data[(c * self.rows + r) * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f32) {
        self.data[(c * self.rows + r) * self.cols + col] = v;
    }

    /// One channel as a contiguous `rows * cols` slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.rows * self.cols;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// One spatial row of one channel.
    pub fn row(&self, c: usize, r: usize) -> &[f32] {
        let start = (c * self.rows + r) * self.cols;
        &self.data[start..start + self.cols]
    }

    pub fn row_mut(&mut self, c: usize, r: usize) -> &mut [f32] {
        let start = (c * self.rows + r) * self.cols;
        &mut self.data[start..start + self.cols]
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Dot product with another tensor of the same shape, accumulated in f64.
    pub fn dot(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other), "dot on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert!(self.same_shape(other), "diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Concatenates tensors along the channel axis. All parts must share spatial dims.
pub fn stack_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::argument("stack_channels on empty list"))?;
    let mut channels = 0;
    for p in parts {
        if p.rows != first.rows || p.cols != first.cols {
            return Err(Error::shape(format!(
                "stack_channels: part {}x{} does not match {}x{}",
                p.rows, p.cols, first.rows, first.cols
            )));
        }
        channels += p.channels;
    }
    let mut data = Vec::with_capacity(channels * first.rows * first.cols);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        kind: first.kind,
        channels,
        rows: first.rows,
        cols: first.cols,
        data,
    })
}

/// Extracts channels `range.start..range.end` as a new tensor.
pub fn slice_channels(t: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
    if range.start >= range.end || range.end > t.channels {
        return Err(Error::shape(format!(
            "slice_channels: range {}..{} out of 0..{}",
            range.start, range.end, t.channels
        )));
    }
    let n = t.rows * t.cols;
    Ok(Tensor {
        kind: t.kind,
        channels: range.end - range.start,
        rows: t.rows,
        cols: t.cols,
        data: t.data[range.start * n..range.end * n].to_vec(),
    })
}

/// Raw VIPT record: arbitrary rank, used directly for mask files.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: TensorKind,
    pub dims: Vec<u32>,
    pub payload: Vec<f32>,
}

impl TensorFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        if self.dims.is_empty() || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("invalid dims {:?}", self.dims)));
        }
        let expect: usize = self.dims.iter().map(|&d| d as usize).product();
        if self.payload.len() != expect {
            return Err(Error::Truncation(format!(
                "payload length {} != dims product {expect}",
                self.payload.len()
            )));
        }
        if let Some(bad) = self.payload.iter().find(|v| !v.is_finite()) {
            return Err(Error::argument(format!("non-finite value {bad} in payload")));
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&VIPT_MAGIC)?;
        w.write_all(&VIPT_VERSION.to_le_bytes())?;
        w.write_all(&[self.dims.len() as u8, self.kind.to_u8()])?;
        for &d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in &self.payload {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; 8];
        r.read_exact(&mut head)
            .map_err(|_| Error::Truncation("file shorter than header".into()))?;
        if head[0..4] != VIPT_MAGIC {
            return Err(Error::format(format!(
                "bad magic {:02x?}, expected \"VIPT\"",
                &head[0..4]
            )));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VIPT_VERSION {
            return Err(Error::format(format!(
                "unsupported version {version}, expected {VIPT_VERSION}"
            )));
        }
        let rank = head[6] as usize;
        let kind = TensorKind::from_u8(head[7])?;
        if rank == 0 {
            return Err(Error::format("rank 0 tensor"));
        }
        let mut dims = vec![0u32; rank];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Truncation("file ends inside dims".into()))?;
            *d = u32::from_le_bytes(b);
            if *d == 0 {
                return Err(Error::format("zero dimension"));
            }
        }
        let count: usize = dims.iter().map(|&d| d as usize).product();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 4 {
            return Err(Error::Truncation(format!(
                "payload has {} bytes, dims {:?} require {}",
                bytes.len(),
                dims,
                count * 4
            )));
        }
        let payload: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(bad) = payload.iter().find(|v| !v.is_finite()) {
            return Err(Error::format(format!("non-finite value {bad} in payload")));
        }
        Ok(TensorFile { kind, dims, payload })
    }
}

/// Writes a rank-3 tensor as a VIPT file.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    TensorFile {
        kind: t.kind,
        dims: vec![t.channels as u32, t.rows as u32, t.cols as u32],
        payload: t.data.clone(),
    }
    .write(path.as_ref())
}

/// Reads a rank-3 tensor from a VIPT file.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let f = TensorFile::read(path.as_ref())?;
    if f.dims.len() != 3 {
        return Err(Error::format(format!(
            "expected rank-3 tensor, file has rank {}",
            f.dims.len()
        )));
    }
    Tensor::from_vec(
        f.kind,
        f.dims[0] as usize,
        f.dims[1] as usize,
        f.dims[2] as usize,
        f.payload,
    )
}

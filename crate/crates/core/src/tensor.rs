//! Dense NCHW tensors and the `TNSR v1` dump format.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Extents of a 4-d NCHW tensor. All extents are at least one.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("zero extent in ({n},{c},{h},{w})")));
        }
        n.checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or(Error::Size([n, c, h, w]))?;
        Ok(Shape { n, c, h, w })
    }

    /// Shape of a single scalar value.
    pub const fn scalar() -> Self {
        Shape { n: 1, c: 1, h: 1, w: 1 }
    }

    /// Per-channel vector stored as (1, c, 1, 1).
    pub fn vector(c: usize) -> Result<Self> {
        Shape::new(1, c, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Row-major offset of `(n, c, y, x)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// A dense tensor of `f32` values in NCHW order.
///
/// `grad` is only populated for parameters after gradients have been
/// accumulated into them; intermediate gradients live on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()], requires_grad: false, grad: None }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor { shape, data: vec![value; shape.numel()], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("item() on non-scalar tensor {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data viewed under a different shape with the same element count.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into `self.grad`, zero-initialising it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.numel() {
            return Err(Error::shape(format!("gradient length {} does not match tensor {}", g.len(), self.shape)));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (acc, v) in buf.iter_mut().zip(g) {
            *acc += v;
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 16;

/// Encodes `t` as a `TNSR v1` byte stream.
pub fn encode_tnsr(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for d in t.shape.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a `TNSR v1` byte stream. `origin` only labels error messages.
pub fn decode_tnsr(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |msg: String| Error::Format { path: origin.to_path_buf(), msg };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!("unsupported version {}", bytes[4])));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 5 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| fail(e.to_string()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * shape.numel() {
        return Err(fail(format!("payload is {} bytes, shape {shape} needs {}", payload.len(), 4 * shape.numel())));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tnsr(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_tnsr(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tnsr(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode_tnsr(&bytes, path)
}

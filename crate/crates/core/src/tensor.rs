//! Dense row-major tensors, grayscale images and the `.tnig` tensor file.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "TNIG"  u16 version=1  u8 dtype=1 (f32 LE)  u8 ndim  ndim x u64 dims  payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNIG";
pub const TENSOR_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const MAX_NDIM: usize = 8;

/// Height x width x channels tensor stored channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "{}x{}x{} tensor needs {} values, got {}",
                h,
                w,
                c,
                h * w * c,
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { h, w, c, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.w + j) * self.c + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.w + j) * self.c + k] = v;
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.w + j) * self.c;
        &self.data[start..start + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let start = (i * self.w + j) * self.c;
        &mut self.data[start..start + self.c]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.dims() == other.dims()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Extracts one channel as an `h x w x 1` tensor.
    pub fn channel(&self, k: usize) -> Tensor3 {
        Tensor3::from_fn(self.h, self.w, 1, |i, j, _| self.get(i, j, k))
    }
}

/// A single-channel image with intensities in `[0, 1]` and the subject's age
/// at acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Tensor3,
    age_years: f64,
}

pub const MIN_IMAGE_SIDE: usize = 8;

impl ImageTensor {
    pub fn new(pixels: Tensor3, age_years: f64) -> Result<Self> {
        if pixels.channels() != 1 {
            return Err(Error::Shape(format!(
                "images are single channel, got {}",
                pixels.channels()
            )));
        }
        if pixels.height() < MIN_IMAGE_SIDE || pixels.width() < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {}x{}",
                pixels.height(),
                pixels.width()
            )));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        if !(age_years.is_finite() && age_years >= 0.0) {
            return Err(Error::Domain(format!("invalid age {age_years}")));
        }
        Ok(Self { pixels, age_years })
    }

    pub fn from_rows(h: usize, w: usize, data: Vec<f64>, age_years: f64) -> Result<Self> {
        Self::new(Tensor3::from_vec(h, w, 1, data)?, age_years)
    }

    pub fn pixels(&self) -> &Tensor3 {
        &self.pixels
    }

    pub fn age_years(&self) -> f64 {
        self.age_years
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.pixels.same_shape(&other.pixels)
    }
}

/// Encodes `values` with the given dims as a `.tnig` byte stream. Values are
/// narrowed to `f32`.
pub fn encode_tensor(dims: &[usize], values: &[f64]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), values.len());
    let mut out = Vec::with_capacity(8 + 8 * dims.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes a `.tnig` byte stream into `(dims, values)`. `origin` only labels
/// errors.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let fail = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 8 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(fail(&format!("unsupported dtype {}", bytes[6])));
    }
    let ndim = bytes[7] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(fail(&format!("unsupported ndim {ndim}")));
    }
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err(fail("truncated dims"));
    }
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail("dims overflow"))?;
    let payload = &bytes[header..];
    if payload.len() != count * 4 {
        return Err(fail(&format!(
            "payload is {} bytes, dims require {}",
            payload.len(),
            count * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Ok((dims, values))
}

pub fn write_map(path: &Path, map: &Tensor3) -> Result<()> {
    let dims: Vec<usize> = if map.channels() == 1 {
        vec![map.height(), map.width()]
    } else {
        vec![map.height(), map.width(), map.channels()]
    };
    let bytes = encode_tensor(&dims, map.data());
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: &Path) -> Result<Tensor3> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, values) = decode_tensor(&bytes, path)?;
    match dims[..] {
        [h, w] => Tensor3::from_vec(h, w, 1, values),
        [h, w, c] => Tensor3::from_vec(h, w, c, values),
        _ => Err(Error::format(path, format!("expected 2 or 3 dims, got {}", dims.len()))),
    }
}

/// Rounds every value through `f32`, so the tensor survives a file round
/// trip bit-exactly.
pub fn quantize_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// 8-bit binary PGM preview, values clamped to `[0, 1]`.
pub fn write_pgm(path: &Path, map: &Tensor3) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    for i in 0..map.height() {
        for j in 0..map.width() {
            bytes.push((map.get(i, j, 0).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

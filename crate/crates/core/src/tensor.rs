//! Dense row-major 2-D tensors, the seeded normal generator, and the
//! `SBQTENS1` tensor file format.
//!
//! A row is a *channel*. Sub-channel layouts split every row into `S`
//! contiguous column blocks; because the split is contiguous the flat
//! row-major buffer is unchanged and only the shape moves.

use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Magic prefix of the tensor file format.
pub const T2D_MAGIC: &[u8; 8] = b"SBQTENS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!(
                "tensor must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    /// Builds a tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same buffer viewed under a different shape with the same element count.
    pub fn reshaped(self, rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, self.data)
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Seeded standard-normal generator.
///
/// Uniform bits come from ChaCha8 (a counter-based stream cipher with a
/// portable, versioned output stream); normals are drawn with the Marsaglia
/// polar form of Box–Muller, consuming two 53-bit uniforms per attempt and
/// caching the second variate of each accepted pair.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // rejection keeps the distribution exact
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let k = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * k);
                return u * k;
            }
        }
    }
}

/// `rows × cols` i.i.d. standard-normal samples, deterministic per seed.
pub fn randn(rows: usize, cols: usize, seed: u64) -> Result<Tensor2D> {
    let mut rng = Rng::new(seed);
    randn_with(rows, cols, &mut rng)
}

pub fn randn_with(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor2D> {
    if rows == 0 || cols == 0 {
        return Err(Error::dim(format!(
            "randn needs non-zero dims, got {rows}x{cols}"
        )));
    }
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor2D::new(rows, cols, data)
}

/// Splits every channel into `subchannels` contiguous blocks.
///
/// Input row `r` becomes output rows `r*S .. (r+1)*S`.
pub fn reshape_subchannels(w: &Tensor2D, subchannels: usize) -> Result<Tensor2D> {
    if subchannels == 0 || !w.cols().is_multiple_of(subchannels) {
        return Err(Error::dim(format!(
            "{} columns are not divisible into {subchannels} sub-channels",
            w.cols()
        )));
    }
    w.clone()
        .reshaped(w.rows() * subchannels, w.cols() / subchannels)
}

/// Inverse of [`reshape_subchannels`].
pub fn merge_subchannels(w_sub: &Tensor2D, subchannels: usize) -> Result<Tensor2D> {
    if subchannels == 0 || !w_sub.rows().is_multiple_of(subchannels) {
        return Err(Error::dim(format!(
            "{} sub-channel rows are not a multiple of {subchannels}",
            w_sub.rows()
        )));
    }
    w_sub
        .clone()
        .reshaped(w_sub.rows() / subchannels, w_sub.cols() * subchannels)
}

/// Mean over all entries of `|a - b|`.
pub fn mean_abs_diff(a: &Tensor2D, b: &Tensor2D) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

/// Encodes a tensor as `SBQTENS1`: magic, u32 rows, u32 cols, f32 row-major data,
/// all little-endian.
pub fn encode_t2d(t: &Tensor2D) -> Result<Vec<u8>> {
    let rows = u32::try_from(t.rows()).map_err(|_| Error::Encoding("rows exceed u32".into()))?;
    let cols = u32::try_from(t.cols()).map_err(|_| Error::Encoding("cols exceed u32".into()))?;
    let mut out = Vec::with_capacity(16 + 4 * t.len());
    out.extend_from_slice(T2D_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_t2d(bytes: &[u8]) -> Result<Tensor2D> {
    if bytes.len() < 16 {
        return Err(Error::Decoding(format!(
            "tensor file too short: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..8] != T2D_MAGIC {
        return Err(Error::Decoding("bad tensor magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::Decoding("tensor shape overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Decoding(format!(
            "tensor payload is {} bytes, expected {expected} for {rows}x{cols}",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor2D::new(rows, cols, data).map_err(|e| Error::Decoding(e.to_string()))
}

pub fn write_t2d(t: &Tensor2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_t2d(t)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_t2d(path: impl AsRef<Path>) -> Result<Tensor2D> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_t2d(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn randn_is_deterministic() {
        let a = randn(1, 4, 7).unwrap();
        let b = randn(1, 4, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, randn(1, 4, 8).unwrap());
    }

    #[test]
    fn randn_moments() {
        let t = randn(32, 512, 3).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn randn_rejects_zero_dims() {
        assert!(matches!(randn(0, 4, 1), Err(Error::Dimension(_))));
        assert!(matches!(randn(4, 0, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn reshape_layout_is_contiguous() {
        let w = Tensor2D::new(2, 8, (0..16).map(f64::from).collect()).unwrap();
        let s = reshape_subchannels(&w, 2).unwrap();
        assert_eq!(s.shape(), (4, 4));
        assert_eq!(s.row(0), &w.row(0)[..4]);
        assert_eq!(s.row(1), &w.row(0)[4..]);
        assert_eq!(s.row(2), &w.row(1)[..4]);
        assert_eq!(merge_subchannels(&s, 2).unwrap(), w);
    }

    #[test]
    fn reshape_rejects_non_divisible() {
        let w = Tensor2D::zeros(2, 6).unwrap();
        assert!(matches!(
            reshape_subchannels(&w, 4),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mean_abs_diff_small_cases() {
        let x = randn(3, 5, 1).unwrap();
        assert_eq!(mean_abs_diff(&x, &x).unwrap(), 0.0);
        let a = Tensor2D::from_rows(&[[0.0, 1.0]]).unwrap();
        let b = Tensor2D::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(mean_abs_diff(&a, &b).unwrap(), 0.5);
        let c = Tensor2D::zeros(2, 1).unwrap();
        assert!(mean_abs_diff(&a, &c).is_err());
    }

    #[test]
    fn mean_abs_diff_matches_loop() {
        let a = randn(7, 9, 11).unwrap();
        let b = randn(7, 9, 12).unwrap();
        let mut acc = 0.0;
        for r in 0..7 {
            for c in 0..9 {
                acc += (a.get(r, c) - b.get(r, c)).abs();
            }
        }
        let oracle = acc / 63.0;
        assert!((mean_abs_diff(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn t2d_round_trip_at_f32_precision() {
        let t = randn(3, 4, 5).unwrap();
        let bytes = encode_t2d(&t).unwrap();
        assert_eq!(bytes.len(), 16 + 48);
        let back = decode_t2d(&bytes).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert!(decode_t2d(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_t2d(&bad).is_err());
    }
}

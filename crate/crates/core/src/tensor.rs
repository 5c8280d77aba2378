//! Dense rank-4 feature maps and rank-2 matrices.
//!
//! Storage is row-major in `(n, c, h, w)` order. The spatial position index
//! of row `i` and column `j` is `p = i * w + j`, so each channel plane of a
//! sample is a contiguous run of `h * w` values.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    /// Number of spatial positions per channel plane.
    pub const fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// Number of values in one sample.
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn checked_len(&self) -> Result<usize> {
        let dims = [self.n, self.c, self.h, self.w];
        if dims.contains(&0) {
            return Err(Error::Size(format!("zero dimension in shape {:?}", dims)));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Size(format!("element count of {:?} overflows", dims)))
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl From<(usize, usize, usize, usize)> for Shape4 {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape4 { n, c, h, w }
    }
}

/// A batch of `c`-channel feature maps over an `h x w` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct FeatureMap {
    shape: Shape4,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for FeatureMap {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        let [n, c, h, w]: [usize; 4] = raw.shape.as_slice().try_into().map_err(|_| {
            Error::Size(format!("expected a rank-4 shape, got {:?}", raw.shape))
        })?;
        if raw.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::parameter("tensor data must be finite"));
        }
        FeatureMap::from_vec(Shape4::new(n, c, h, w), raw.data)
    }
}

impl From<FeatureMap> for RawTensor {
    fn from(x: FeatureMap) -> Self {
        RawTensor {
            shape: x.shape.as_array().to_vec(),
            data: x.data,
        }
    }
}

impl FeatureMap {
    pub fn zeros(shape: impl Into<Shape4>) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_len()?;
        Ok(FeatureMap {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_len()?;
        if data.len() != len {
            return Err(Error::Size(format!(
                "shape {:?} needs {} values, got {}",
                shape.as_array(),
                len,
                data.len()
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    /// Fills a tensor with independent normal samples of the given standard
    /// deviation.
    ///
    /// The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`.
    /// Each normal pair comes from one Box-Muller transform of two uniforms
    /// `u = (next_u64() >> 11) * 2^-53`, with the first uniform shifted to
    /// `(0, 1]` so the logarithm is finite.
    pub fn randn_seeded(shape: impl Into<Shape4>, seed: u64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::parameter(format!("std must be positive, got {std}")));
        }
        let shape = shape.into();
        let len = shape.checked_len()?;
        let mut normals = NormalStream::new(seed);
        let data = (0..len).map(|_| std * normals.next()).collect();
        Ok(FeatureMap { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + i) * s.w + j
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: f64) {
        let k = self.index(n, c, i, j);
        self.data[k] = v;
    }

    /// Decomposes a flat index into `(n, c, i, j)`.
    pub fn unravel(&self, flat: usize) -> [usize; 4] {
        let s = self.shape;
        let j = flat % s.w;
        let i = (flat / s.w) % s.h;
        let c = (flat / s.spatial()) % s.c;
        let n = flat / s.sample_len();
        [n, c, i, j]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Moves the value at spatial position `p` to position `perm[p]`, for every
    /// sample and channel.
    pub fn permute_spatial(&self, perm: &[usize]) -> Result<Self> {
        let hw = self.shape.spatial();
        check_permutation(perm, hw)?;
        let mut out = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks_exact(hw).zip(out.chunks_exact_mut(hw)) {
            for (p, &q) in perm.iter().enumerate() {
                dst[q] = src[p];
            }
        }
        Ok(FeatureMap {
            shape: self.shape,
            data: out,
        })
    }

    pub fn scale(&self, alpha: f64) -> Self {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        max_abs_diff(&self.data, &other.data)
    }

    /// Sum of elementwise products; panics on shape mismatch.
    pub fn dot(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        let len = matrix_len(rows, cols)?;
        Ok(Matrix {
            rows,
            cols,
            data: vec![0.0; len],
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let len = matrix_len(rows, cols)?;
        if data.len() != len {
            return Err(Error::Size(format!(
                "{rows}x{cols} matrix needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(size: usize) -> Result<Self> {
        let mut m = Matrix::zeros(size, size)?;
        for k in 0..size {
            m.set(k, k, 1.0);
        }
        Ok(m)
    }

    /// Same generator as [`FeatureMap::randn_seeded`].
    pub fn randn_seeded(rows: usize, cols: usize, seed: u64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::parameter(format!("std must be positive, got {std}")));
        }
        let len = matrix_len(rows, cols)?;
        let mut normals = NormalStream::new(seed);
        let data = (0..len).map(|_| std * normals.next()).collect();
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        max_abs_diff(&self.data, &other.data)
    }

    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

fn matrix_len(rows: usize, cols: usize) -> Result<usize> {
    if rows == 0 || cols == 0 {
        return Err(Error::Size(format!("zero dimension in {rows}x{cols} matrix")));
    }
    rows.checked_mul(cols)
        .ok_or_else(|| Error::Size(format!("{rows}x{cols} matrix overflows")))
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn check_permutation(perm: &[usize], len: usize) -> Result<()> {
    if perm.len() != len {
        return Err(Error::parameter(format!(
            "permutation has {} entries, expected {len}",
            perm.len()
        )));
    }
    let mut seen = vec![false; len];
    for &q in perm {
        if q >= len || std::mem::replace(&mut seen[q], true) {
            return Err(Error::parameter("spatial map is not a bijection"));
        }
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (p, &q) in perm.iter().enumerate() {
        inv[q] = p;
    }
    inv
}

/// Deterministic Fisher-Yates shuffle of `0..len` from the crate's generator.
pub fn seeded_permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..len).collect();
    for k in (1..len).rev() {
        let r = (rng.next_u64() % (k as u64 + 1)) as usize;
        perm.swap(k, r);
    }
    perm
}

/// Uniform `[0, 1)` and standard-normal draws from a seeded ChaCha8 stream.
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        NormalStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, bound: usize) -> usize {
        (self.rng.next_u64() % bound as u64) as usize
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

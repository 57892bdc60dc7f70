//! Dense row-major `f32` arrays, the seeded RNG and the `.azt` file format.

mod file;
mod rng;

pub use file::{decode, encode, read_tensor, write_atomic, write_tensor};
pub use rng::SeededRng;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Immutable dense array of finite `f32` values, row-major, slowest axis first.
///
/// Video latents use the layout `[frames, channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "dims {dims:?} hold {n} elements but data has {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    /// Skips the finiteness scan; shape must already be consistent.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        let n = dims.iter().product();
        Ok(Self {
            dims,
            data: vec![0.0; n],
        })
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.iter_mut().for_each(|v| *v = value);
        Self::new(t.dims, t.data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Self {
            dims,
            data: self.data,
        })
    }

    /// Number of elements in one slice along the leading axis.
    pub fn outer_stride(&self) -> usize {
        self.dims[1..].iter().product()
    }

    /// Slice `index` (0-based) along the leading axis.
    pub fn outer(&self, index: usize) -> &[f32] {
        let s = self.outer_stride();
        &self.data[index * s..(index + 1) * s]
    }

    /// Row `i` of a rank-2 array.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.rank(), 2);
        self.outer(i)
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.outer_stride().max(1))
    }

    /// Returns a copy with leading-axis slice `index` replaced by `slice`.
    pub fn with_outer(&self, index: usize, slice: &[f32]) -> Result<Self> {
        let s = self.outer_stride();
        if slice.len() != s || index >= self.dims[0] {
            return Err(Error::dim(format!(
                "cannot place {} values at outer index {index} of {:?}",
                slice.len(),
                self.dims
            )));
        }
        if let Some(i) = slice.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(index * s + i));
        }
        let mut data = self.data.clone();
        data[index * s..(index + 1) * s].copy_from_slice(slice);
        Ok(Self::from_parts(self.dims.clone(), data))
    }

    /// Concatenates arrays along the leading axis; trailing dims must agree.
    pub fn stack_outer(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("nothing to concatenate"))?;
        let tail = &first.dims[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.dims[1..] != tail {
                return Err(Error::dim(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.dims, p.dims
                )));
            }
            lead += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(tail);
        Ok(Self::from_parts(dims, data))
    }

    /// Bitwise comparison, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Hex SHA-256 of the `.azt` encoding.
    pub fn checksum(&self) -> String {
        sha256_hex(&encode(self))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::dim(format!(
            "dims must be a nonempty list of positive sizes, got {dims:?}"
        )));
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::dim(format!("rank {} exceeds 255", dims.len())));
    }
    Ok(())
}

/// Standard-normal samples with the given shape.
pub fn randn(rng: &mut SeededRng, dims: Vec<usize>) -> Result<Tensor> {
    check_dims(&dims)?;
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Ok(Tensor::from_parts(dims, data))
}

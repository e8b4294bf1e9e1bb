//! Dense row-major tensors of rank 1 to 3.
//!
//! Tensors are plain values: cheap to clone at toy scale, immutable once
//! built except through explicit `data_mut` access (used by the optimizer
//! and the finite-difference checker). All math lives on the tape.

use crate::error::{Error, Result};
use rand::Rng;

/// Dense floating-point array with shape metadata. Rank is 1, 2, or 3 and
/// data is stored row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating rank and that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::InvalidShape(format!(
                "rank must be 1..=3, got shape {shape:?}"
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "extents must be positive, got shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} implies {numel} values but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Rank-2 convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Zero-mean Gaussian initialization via Box-Muller, deterministic
    /// under the supplied generator.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut u1: f64 = rng.gen();
            while u1 <= f64::MIN_POSITIVE {
                u1 = rng.gen();
            }
            let u2: f64 = rng.gen();
            data.push((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std);
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix (rank 2 only).
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Number of columns when viewed as a matrix (rank 2 only).
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm, summed left to right.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    /// Largest absolute elementwise difference to another tensor of the
    /// same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn new_rejects_rank_0_and_4() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn from_rows_rejects_ragged() {
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn row_access() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 2);
    }

    #[test]
    fn norm_is_euclidean() {
        let t = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert!((t.norm() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn randn_is_finite_and_seed_deterministic() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(vec![4, 5], 0.02, &mut r1).unwrap();
        let b = Tensor::randn(vec![4, 5], 0.02, &mut r2).unwrap();
        assert!(a.is_finite());
        assert_eq!(a.data(), b.data());
    }
}

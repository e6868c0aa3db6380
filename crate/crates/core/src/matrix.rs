use crate::error::{Error, Result};
use crate::Real;

/// Row-major `rows x cols` matrix holding Q, K, V, outputs and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl FeatureMatrix {
    /// Wraps external data, rejecting wrong lengths and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Real) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Internal constructor for kernel outputs; the caller guarantees the length.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<Real>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Real> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Real] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Contiguous rows `start..start + count`.
    #[inline]
    pub fn rows_slice(&self, start: usize, count: usize) -> &[Real] {
        &self.data[start * self.cols..(start + count) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: Real) {
        self.data[r * self.cols + c] = value;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Returns the first non-finite coordinate, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(pos) => Err(Error::NonFinite {
                row: pos / self.cols,
                col: pos % self.cols,
            }),
            None => Ok(()),
        }
    }

    pub fn scaled(&self, factor: Real) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    /// Largest elementwise `|a - b|`; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if !self.same_shape(other) {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| (*x as f64).abs()).fold(0.0, f64::max)
    }

    /// Frobenius inner product accumulated in f64.
    pub fn inner(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }

    /// Column sums accumulated in f64.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, x) in sums.iter_mut().zip(self.row(r)) {
                *s += *x as f64;
            }
        }
        sums
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The summation order is fixed, which keeps results bitwise reproducible.
#[inline]
pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0 as Real; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dst += alpha * src`
#[inline]
pub(crate) fn axpy(dst: &mut [Real], alpha: Real, src: &[Real]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_non_finite() {
        assert!(matches!(
            FeatureMatrix::new(2, 2, vec![0.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            FeatureMatrix::new(2, 2, vec![0.0, 1.0, Real::NAN, 0.0]),
            Err(Error::NonFinite { row: 1, col: 0 })
        ));
        assert!(FeatureMatrix::new(0, 3, vec![]).is_err());
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<Real> = (0..11).map(|x| x as Real * 0.5).collect();
        let b: Vec<Real> = (0..11).map(|x| 3.0 - x as Real).collect();
        let naive: Real = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-5);
    }
}

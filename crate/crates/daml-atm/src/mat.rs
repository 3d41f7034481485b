//! Minimal dense row-major matrix used by the model.
//!
//! The shapes here are tiny (sequence length × model dim), so the kernels are
//! plain loops arranged for contiguous inner access.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            debug_assert_eq!(row.len(), c);
            data.extend(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline(always)]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline(always)]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.cols + j]
    }

    /// `self · b` — (m×k)·(k×n).
    pub fn matmul(&self, b: &Mat<T>) -> Mat<T> {
        debug_assert_eq!(self.cols, b.rows);
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &a) in arow.iter().enumerate() {
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for j in 0..b.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    /// `selfᵀ · b` — (k×m)ᵀ·(k×n) = m×n. Used for weight gradients.
    pub fn matmul_tn(&self, b: &Mat<T>) -> Mat<T> {
        debug_assert_eq!(self.rows, b.rows);
        let mut out = Mat::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = b.row(k);
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for j in 0..b.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    /// `self · bᵀ` — (m×k)·(n×k)ᵀ = m×n. Used for attention scores and
    /// gradients through transposed weights.
    pub fn matmul_nt(&self, b: &Mat<T>) -> Mat<T> {
        debug_assert_eq!(self.cols, b.cols);
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * b.rows..(i + 1) * b.rows];
            for j in 0..b.rows {
                let brow = b.row(j);
                let mut acc = T::ZERO;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                orow[j] = acc;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Mean over rows; empty input returns the zero vector.
    pub fn mean_rows(&self) -> Vec<T> {
        let mut out = vec![T::ZERO; self.cols];
        if self.rows == 0 {
            return out;
        }
        for i in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        let inv = T::from_f64(1.0 / self.rows as f64);
        for o in &mut out {
            *o *= inv;
        }
        out
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_agrees_with_naive() {
        let a = Mat {
            rows: 2,
            cols: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let b = Mat {
            rows: 3,
            cols: 2,
            data: vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
        };
        let c = a.matmul(&b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_products_are_consistent() {
        let a = Mat {
            rows: 3,
            cols: 2,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let b = Mat {
            rows: 3,
            cols: 4,
            data: (0..12).map(|x| x as f64).collect(),
        };
        // aᵀ·b computed two ways
        let tn = a.matmul_tn(&b);
        let mut at = Mat::zeros(2, 3);
        for i in 0..3 {
            for j in 0..2 {
                *at.at_mut(j, i) = a.at(i, j);
            }
        }
        let expect = at.matmul(&b);
        assert_eq!(tn.data, expect.data);

        let c = Mat {
            rows: 5,
            cols: 2,
            data: (0..10).map(|x| x as f64 * 0.5).collect(),
        };
        let nt2 = a.matmul_nt(&c);
        let mut ct = Mat::zeros(2, 5);
        for i in 0..5 {
            for j in 0..2 {
                *ct.at_mut(j, i) = c.at(i, j);
            }
        }
        let expect2 = a.matmul(&ct);
        assert_eq!(nt2.data, expect2.data);
    }
}

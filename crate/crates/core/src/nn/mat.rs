//! Dense row-major matrices and the few kernels the models need.

use rand_chacha::ChaCha8Rng;

use crate::rng;
use crate::scalar::{r, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| r::<T>(rng::gaussian(rng) * std))
            .collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn zeros_like(&self) -> Self {
        Mat::zeros(self.rows, self.cols)
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64_c(x.to_f64_c())).collect(),
        }
    }
}

/// out[m×n] += x[m×k] · w[k×n]
pub fn matmul_acc<T: Real>(out: &mut Mat<T>, x: &Mat<T>, w: &Mat<T>) {
    debug_assert_eq!(x.cols, w.rows);
    debug_assert_eq!(out.rows, x.rows);
    debug_assert_eq!(out.cols, w.cols);
    let n = w.cols;
    for i in 0..x.rows {
        let xrow = x.row(i);
        let orow = out.row_mut(i);
        for (kk, &xv) in xrow.iter().enumerate() {
            let wrow = &w.data[kk * n..(kk + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                *o = *o + xv * wv;
            }
        }
    }
}

/// dx[m×k] += dy[m×n] · wᵀ  (w stored as [k×n])
pub fn matmul_dx<T: Real>(dx: &mut Mat<T>, dy: &Mat<T>, w: &Mat<T>) {
    debug_assert_eq!(dy.cols, w.cols);
    debug_assert_eq!(dx.cols, w.rows);
    let n = w.cols;
    for i in 0..dy.rows {
        let dyrow = dy.row(i);
        let dxrow = dx.row_mut(i);
        for (kk, d) in dxrow.iter_mut().enumerate() {
            let wrow = &w.data[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (&dv, &wv) in dyrow.iter().zip(wrow.iter()) {
                acc = acc + dv * wv;
            }
            *d = *d + acc;
        }
    }
}

/// dw[k×n] += xᵀ · dy  (x is [m×k], dy is [m×n])
pub fn matmul_dw<T: Real>(dw: &mut Mat<T>, x: &Mat<T>, dy: &Mat<T>) {
    debug_assert_eq!(x.rows, dy.rows);
    debug_assert_eq!(dw.rows, x.cols);
    debug_assert_eq!(dw.cols, dy.cols);
    let n = dy.cols;
    for i in 0..x.rows {
        let xrow = x.row(i);
        let dyrow = dy.row(i);
        for (kk, &xv) in xrow.iter().enumerate() {
            let drow = &mut dw.data[kk * n..(kk + 1) * n];
            for (d, &dv) in drow.iter_mut().zip(dyrow.iter()) {
                *d = *d + xv * dv;
            }
        }
    }
}

/// y = x · w for a single row vector x[k], w[k×n].
pub fn vec_matmul<T: Real>(x: &[T], w: &Mat<T>) -> Vec<T> {
    debug_assert_eq!(x.len(), w.rows);
    let n = w.cols;
    let mut out = vec![T::zero(); n];
    for (kk, &xv) in x.iter().enumerate() {
        let wrow = &w.data[kk * n..(kk + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wrow.iter()) {
            *o = *o + xv * wv;
        }
    }
    out
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc = acc + x * y;
    }
    acc
}

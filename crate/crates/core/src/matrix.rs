//! Row-major dense `f64` matrices and the handful of kernels the tape needs.
//!
//! Every product accumulates in ascending inner-index order starting from
//! zero, so a batched product agrees bit-for-bit with a sequential dot
//! product over the same operands.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-times-matrix kernel with the output width fixed at compile time, so
/// the accumulator row lives in registers.
fn rows_times_fixed<const N: usize>(a: &[f64], k: usize, b: &[f64], out: &mut [f64]) {
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(N)) {
        let mut acc = [0.0f64; N];
        for (&av, brow) in arow.iter().zip(b.chunks_exact(N)) {
            for j in 0..N {
                acc[j] += av * brow[j];
            }
        }
        orow.copy_from_slice(&acc);
    }
}

fn rows_times_any(a: &[f64], k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a (m x k) * b (k x n)`.
///
/// Every output entry is accumulated over `k` in ascending order starting
/// from zero, independent of `m` and of the kernel chosen, so a row of a
/// batched product is bit-identical to the same row computed alone.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if k == 0 || n == 0 {
        return out;
    }
    let (ad, bd, od) = (&a.data[..], &b.data[..], &mut out.data[..]);
    match n {
        1 => rows_times_fixed::<1>(ad, k, bd, od),
        2 => rows_times_fixed::<2>(ad, k, bd, od),
        4 => rows_times_fixed::<4>(ad, k, bd, od),
        8 => rows_times_fixed::<8>(ad, k, bd, od),
        16 => rows_times_fixed::<16>(ad, k, bd, od),
        24 => rows_times_fixed::<24>(ad, k, bd, od),
        32 => rows_times_fixed::<32>(ad, k, bd, od),
        _ => rows_times_any(ad, k, bd, n, od),
    }
    out
}

/// `a (m x k) * b^T` with `b` stored `n x k`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension");
    matmul(a, &b.transpose())
}

fn outer_acc_fixed<const N: usize>(a: &[f64], k: usize, g: &[f64], out: &mut [f64]) {
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(N)) {
        let gv: [f64; N] = grow.try_into().expect("row width");
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(N)) {
            for j in 0..N {
                orow[j] += av * gv[j];
            }
        }
    }
}

fn outer_acc_any(a: &[f64], k: usize, g: &[f64], n: usize, out: &mut [f64]) {
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `a^T (k x m) * g (m x n)` accumulated into `out (k x n)`, summing over
/// the rows of `a` in ascending order.
pub fn matmul_tn_acc(a: &Matrix, g: &Matrix, out: &mut Matrix) {
    assert_eq!(a.rows, g.rows);
    let (k, n) = (a.cols, g.cols);
    assert_eq!(out.shape(), (k, n));
    if k == 0 || n == 0 {
        return;
    }
    let (ad, gd, od) = (&a.data[..], &g.data[..], &mut out.data[..]);
    match n {
        1 => outer_acc_fixed::<1>(ad, k, gd, od),
        2 => outer_acc_fixed::<2>(ad, k, gd, od),
        4 => outer_acc_fixed::<4>(ad, k, gd, od),
        8 => outer_acc_fixed::<8>(ad, k, gd, od),
        16 => outer_acc_fixed::<16>(ad, k, gd, od),
        32 => outer_acc_fixed::<32>(ad, k, gd, od),
        _ => outer_acc_any(ad, k, gd, n, od),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
        assert_eq!(matmul_nt(&a, &b.transpose()), c);
        let mut at_c = Matrix::zeros(3, 2);
        matmul_tn_acc(&a, &c, &mut at_c);
        assert_eq!(at_c, matmul(&a.transpose(), &c));
    }

    #[test]
    fn every_width_matches_naive_order_exactly() {
        let val = |i: usize| ((i * 7919) % 101) as f64 / 37.0 - 1.3;
        for n in 1..=33 {
            let (m, k) = (5, 7);
            let a = Matrix::from_vec(m, k, (0..m * k).map(val).collect());
            let b = Matrix::from_vec(k, n, (0..k * n).map(|i| val(i + 3)).collect());
            let c = matmul(&a, &b);
            let mut tn = Matrix::zeros(k, n);
            let g = Matrix::from_vec(m, n, (0..m * n).map(|i| val(i + 5)).collect());
            matmul_tn_acc(&a, &g, &mut tn);
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a.get(i, p) * b.get(p, j);
                    }
                    assert_eq!(c.get(i, j), acc);
                }
            }
            for p in 0..k {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += a.get(i, p) * g.get(i, j);
                    }
                    assert_eq!(tn.get(p, j), acc);
                }
            }
            // One row alone equals the same row of the batched product.
            let row = Matrix::row_vector(a.row(3).to_vec());
            assert_eq!(matmul(&row, &b).data, c.row(3));
        }
    }
}

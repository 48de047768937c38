//! Dense row-major matrices in `f64`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `out[j] += Σ_i x[i] * w[i, j]` for a row vector times a matrix.
#[inline]
pub fn vec_mat_acc(x: &[f64], w: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(out.len(), w.cols());
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
}

/// `out[i] += Σ_j w[i, j] * y[j]`, i.e. a row vector times the transpose.
#[inline]
pub fn vec_mat_t_acc(y: &[f64], w: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(y.len(), w.cols());
    debug_assert_eq!(out.len(), w.rows());
    for (i, o) in out.iter_mut().enumerate() {
        *o += dot(w.row(i), y);
    }
}

/// Rank-one update `w[i, j] += x[i] * y[j]`.
#[inline]
pub fn outer_acc(x: &[f64], y: &[f64], w: &mut Matrix) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (wij, &yj) in w.row_mut(i).iter_mut().zip(y) {
            *wij += xi * yj;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_of_equal_logits_is_uniform() {
        let lp = log_softmax(&[0.0; 8]);
        for v in lp {
            assert!((v + 8f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn vec_mat_products_agree_with_transpose() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let mut out = vec![0.0; 3];
        vec_mat_acc(&[1.0, -1.0], &w, &mut out);
        assert_eq!(out, vec![-3.0, -3.0, -3.0]);
        let mut back = vec![0.0; 2];
        vec_mat_t_acc(&[1.0, 0.0, 1.0], &w, &mut back);
        assert_eq!(back, vec![4.0, 10.0]);
    }
}

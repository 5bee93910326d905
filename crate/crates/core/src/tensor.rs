//! Dense row-major f32 matrices and the handful of kernels the forward needs.

use crate::error::{contract, Result};

/// Row-major `rows x cols` matrix. Row `i` is token `i`'s hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl HiddenStates {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(contract(format!(
                "buffer of {} values cannot be viewed as {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(contract(format!("row of width {} in a {cols}-wide matrix", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// New matrix holding rows `idx` in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn concat(cols: usize, parts: &[&HiddenStates]) -> Self {
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            debug_assert_eq!(p.cols, cols);
            data.extend_from_slice(&p.data);
        }
        Self { rows, cols, data }
    }

    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Order-sensitive hash of the exact bit patterns.
    pub fn bit_checksum(&self) -> u64 {
        bit_checksum(&self.data)
    }

    pub fn max_abs_diff(&self, other: &HiddenStates) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

pub fn bit_checksum(xs: &[f32]) -> u64 {
    xs.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, x| {
        crate::rng::mix64(h ^ x.to_bits() as u64)
    })
}

/// `x (n x in) * w (in x out)` where `w` is stored row-major as `in x out`.
pub fn matmul(x: &HiddenStates, w: &[f32], out_cols: usize) -> HiddenStates {
    let in_cols = x.cols;
    debug_assert_eq!(w.len(), in_cols * out_cols);
    let mut out = HiddenStates::zeros(x.rows, out_cols);
    for r in 0..x.rows {
        let xr = x.row(r);
        let orow = &mut out.data[r * out_cols..(r + 1) * out_cols];
        for (k, &xv) in xr.iter().enumerate() {
            let wrow = &w[k * out_cols..(k + 1) * out_cols];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

pub const NORM_EPS: f32 = 1e-5;

/// Per-row layer normalization with a multiplicative gain and no bias.
pub fn layer_norm(x: &HiddenStates, gain: &[f32]) -> HiddenStates {
    let mut out = x.clone();
    for r in 0..x.rows {
        layer_norm_row(out.row_mut(r), gain);
    }
    out
}

pub fn layer_norm_row(row: &mut [f32], gain: &[f32]) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    for (v, g) in row.iter_mut().zip(gain) {
        *v = (*v - mean) * inv * g;
    }
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotary embedding applied in place to one head vector at `position`.
/// Pairs are `(2i, 2i+1)` with frequency `base^(-2i/d)`.
pub fn rope_in_place(head: &mut [f32], position: usize) {
    let d = head.len();
    for i in 0..d / 2 {
        let theta = ROPE_BASE.powf(-((2 * i) as f64) / d as f64);
        let angle = position as f64 * theta;
        let (s, c) = (angle.sin() as f32, angle.cos() as f32);
        let (a, b) = (head[2 * i], head[2 * i + 1]);
        head[2 * i] = a * c - b * s;
        head[2 * i + 1] = a * s + b * c;
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2(a: &[f32]) -> f32 {
    a.iter().map(|x| x * x).sum::<f32>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_computation() {
        let x = HiddenStates::from_rows(2, &[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        // w = [[1, 0, 2], [0, 1, 3]]
        let w = [1.0, 0.0, 2.0, 0.0, 1.0, 3.0];
        let y = matmul(&x, &w, 3);
        assert_eq!(y.row(0), &[1.0, 2.0, 8.0]);
        assert_eq!(y.row(1), &[3.0, 4.0, 18.0]);
    }

    #[test]
    fn layer_norm_of_zero_row_is_zero() {
        let mut r = vec![0.0; 8];
        layer_norm_row(&mut r, &[1.0; 8]);
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rope_preserves_norm_and_relative_dot() {
        let q: Vec<f32> = (0..8).map(|i| (i as f32 * 0.3).sin()).collect();
        let k: Vec<f32> = (0..8).map(|i| (i as f32 * 0.7).cos()).collect();
        let rot = |v: &[f32], p| {
            let mut v = v.to_vec();
            rope_in_place(&mut v, p);
            v
        };
        assert!((l2(&rot(&q, 13)) - l2(&q)).abs() < 1e-5);
        let d1 = dot(&rot(&q, 10), &rot(&k, 4));
        let d2 = dot(&rot(&q, 106), &rot(&k, 100));
        assert!((d1 - d2).abs() < 1e-4);
    }
}

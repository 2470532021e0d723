//! Dense row-major f64 matrices and the reverse-mode tape built on them.
//!
//! Everything numeric in this crate — fMRI frames, prompt sequences, model
//! parameters, activations — is a [`Mat`]. Keeping a single concrete 2-D
//! type (scalars are 1x1, vectors are nx1) keeps the autodiff engine in
//! [`tape`] small and lets plain-value code (generation, metrics, the ridge
//! solver) share the same kernels.

pub mod tape;

pub use tape::{Tape, Var};

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "from_vec: data length {} != {rows}x{cols}",
            data.len()
        );
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// 1x1 matrix holding a single scalar.
    pub fn scalar(v: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// Column vector nx1.
    pub fn col(data: Vec<f64>) -> Self {
        Mat {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The sole element of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(
            (self.rows, self.cols),
            (1, 1),
            "item() on a {}x{} matrix",
            self.rows,
            self.cols
        );
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// C = A @ B, A: [m x k], B: [k x n].
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(
            self.cols, b.rows,
            "matmul: {}x{} @ {}x{}",
            self.rows, self.cols, b.rows, b.cols
        );
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = Mat::zeros(m, n);
        // ikj order: the inner loop runs over contiguous rows of B and C,
        // which the compiler vectorizes.
        for i in 0..m {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (l, &a) in arow.iter().enumerate().take(k) {
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    /// C = A @ B^T, A: [m x k], B: [n x k].
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(
            self.cols, b.cols,
            "matmul_nt: {}x{} @ ({}x{})^T",
            self.rows, self.cols, b.rows, b.cols
        );
        let (m, n) = (self.rows, b.rows);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for (j, o) in orow.iter_mut().enumerate().take(n) {
                let brow = b.row(j);
                let mut acc = 0.0;
                for (&a, &bv) in arow.iter().zip(brow) {
                    acc += a * bv;
                }
                *o = acc;
            }
        }
        out
    }

    /// C = A^T @ B, A: [k x m], B: [k x n].
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(
            self.rows, b.rows,
            "matmul_tn: ({}x{})^T @ {}x{}",
            self.rows, self.cols, b.rows, b.cols
        );
        let (k, m, n) = (self.rows, self.cols, b.cols);
        let mut out = Mat::zeros(m, n);
        for l in 0..k {
            let arow = self.row(l);
            let brow = b.row(l);
            for (i, &a) in arow.iter().enumerate().take(m) {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), other.shape(), "zip: shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Mat {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_assign: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Dot product of the flattened matrices.
    pub fn dot_flat(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot_flat: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_flat(&self) -> f64 {
        self.dot_flat(self).sqrt()
    }

    /// Extract rows [from, to).
    pub fn slice_rows(&self, from: usize, to: usize) -> Mat {
        assert!(from <= to && to <= self.rows, "slice_rows out of range");
        Mat {
            rows: to - from,
            cols: self.cols,
            data: self.data[from * self.cols..to * self.cols].to_vec(),
        }
    }

    /// Stack two matrices with equal column count, self on top.
    pub fn vstack(&self, below: &Mat) -> Mat {
        assert_eq!(self.cols, below.cols, "vstack: column mismatch");
        let mut data = Vec::with_capacity(self.data.len() + below.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&below.data);
        Mat {
            rows: self.rows + below.rows,
            cols: self.cols,
            data,
        }
    }
}

/// Cosine similarity between two equal-shape matrices flattened to vectors.
/// A zero-norm side is defined to have cosine 0.
pub fn cos_flat(a: &Mat, b: &Mat) -> f64 {
    let na = a.norm_flat();
    let nb = b.norm_flat();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot_flat(b) / (na * nb)
}

/// Solve the symmetric positive-definite system A x = b in place via
/// Cholesky. Errors when A is not positive definite (e.g. a singular
/// normal-equation matrix with zero regularization).
pub fn solve_spd(a: &Mat, b: &[f64]) -> crate::Result<Vec<f64>> {
    assert_eq!(a.rows, a.cols, "solve_spd: matrix not square");
    assert_eq!(a.rows, b.len(), "solve_spd: rhs length mismatch");
    let n = a.rows;
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(crate::Error::Numerical(format!(
                        "matrix not positive definite at pivot {i} (value {s:.3e})"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    // forward substitution L y = b
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    // back substitution L^T x = y
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

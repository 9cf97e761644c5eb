//! Dense row-major matrices of `f64`.
//!
//! Products go through `matrixmultiply::dgemm`; transposed operands are
//! expressed with strides instead of copies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EncodedMatrix", into = "EncodedMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::from_vec",
                detail: format!("{} values for {rows}x{cols}", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "Matrix::from_rows",
                detail: "ragged rows".into(),
            });
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn is_finite(&self) -> bool {
        // branch-free per chunk so the inner loop vectorizes
        self.data
            .chunks(64)
            .all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean of each column (mean over rows).
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(), other.shape()),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(GemmOperand::plain(self), GemmOperand::plain(other), &mut out.data, 0.0);
        Ok(out)
    }

    /// `P · self · Pᵀ` where `perm[new] = old`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| self[(perm[r], perm[c])])
    }
}

/// Serialized form: shape plus a base64 little-endian payload.
#[derive(Serialize, Deserialize)]
struct EncodedMatrix {
    rows: usize,
    cols: usize,
    dtype: String,
    data: String,
}

impl From<Matrix> for EncodedMatrix {
    fn from(m: Matrix) -> Self {
        Self {
            rows: m.rows,
            cols: m.cols,
            dtype: "f64le".into(),
            data: crate::codec::encode_f64(&m.data),
        }
    }
}

impl TryFrom<EncodedMatrix> for Matrix {
    type Error = Error;

    fn try_from(e: EncodedMatrix) -> Result<Self> {
        if e.dtype != "f64le" {
            return Err(Error::Format(format!("unsupported dtype {}", e.dtype)));
        }
        let data = crate::codec::decode_f64(&e.data)?;
        Matrix::from_vec(e.rows, e.cols, data)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// A row-major buffer viewed as an `rows x cols` operand, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct GemmOperand<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> GemmOperand<'a> {
    pub fn plain(m: &'a Matrix) -> Self {
        Self::new(&m.data, m.rows, m.cols, false)
    }

    /// `data` is stored as `rows x cols` row-major; `transposed` flips the view.
    pub fn new(data: &'a [f64], rows: usize, cols: usize, transposed: bool) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed,
        }
    }

    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a · b + beta · out`, all row-major.
pub(crate) fn gemm(a: GemmOperand<'_>, b: GemmOperand<'_>, out: &mut [f64], beta: f64) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: dimensions and strides describe in-bounds views of the three
    // buffers, checked by the assertions above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

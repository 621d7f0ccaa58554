//! Dense `f64` tensors.
//!
//! Row-major storage with an explicit dims vector. Almost everything in the
//! crate is a matrix `[rows, cols]`; convolution inputs use `[c, h, w]` and
//! kernels `[co, ci, kh, kw]`.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "dims {:?} do not match data length {}",
            dims,
            data.len()
        );
        Tensor { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            dims: vec![r, c],
            data,
        }
    }

    /// A single-row matrix `[1, n]`.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            dims: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// `rows` copies of the same row stacked into `[rows, n]`.
    pub fn tile_row(values: &[f64], rows: usize) -> Self {
        let mut data = Vec::with_capacity(rows * values.len());
        for _ in 0..rows {
            data.extend_from_slice(values);
        }
        Tensor {
            dims: vec![rows, values.len()],
            data,
        }
    }

    pub fn randn<R: Rng>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng>(dims: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.dims.len() == 2
    }

    pub fn rows(&self) -> usize {
        assert!(self.is_matrix(), "not a matrix: dims {:?}", self.dims);
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "not a matrix: dims {:?}", self.dims);
        self.dims[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Reinterpret the buffer under new dims of equal volume.
    pub fn reshaped(&self, dims: &[usize]) -> Tensor {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.data.len(),
            "reshape volume mismatch"
        );
        Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "not a scalar: dims {:?}", self.dims);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.dims, other.dims, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * scale;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self @ other` for 2-D matrices.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        matmul(self, other, false, false)
    }
}

/// GEMM wrapper: `op_a(a) @ op_b(b)` where each op is optional transpose.
pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
    let (am, ak) = if trans_a {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (bk, bn) = if trans_b {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    assert_eq!(ak, bk, "matmul inner dims: {} vs {}", ak, bk);
    let mut out = Tensor::zeros(&[am, bn]);
    // Row-major strides; transposition is expressed through strides.
    let (a_rs, a_cs) = if trans_a {
        (1isize, a.cols() as isize)
    } else {
        (a.cols() as isize, 1isize)
    };
    let (b_rs, b_cs) = if trans_b {
        (1isize, b.cols() as isize)
    } else {
        (b.cols() as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            am,
            ak,
            bn,
            1.0,
            a.data.as_ptr(),
            a_rs,
            a_cs,
            b.data.as_ptr(),
            b_rs,
            b_cs,
            0.0,
            out.data.as_mut_ptr(),
            bn as isize,
            1,
        );
    }
    out
}

/// Accumulating GEMM: `c += alpha * op_a(a) @ op_b(b)`.
pub fn matmul_acc(c: &mut Tensor, alpha: f64, a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) {
    let (am, ak) = if trans_a {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (bk, bn) = if trans_b {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    assert_eq!(ak, bk, "matmul_acc inner dims");
    assert_eq!(c.rows(), am);
    assert_eq!(c.cols(), bn);
    let (a_rs, a_cs) = if trans_a {
        (1isize, a.cols() as isize)
    } else {
        (a.cols() as isize, 1isize)
    };
    let (b_rs, b_cs) = if trans_b {
        (1isize, b.cols() as isize)
    } else {
        (b.cols() as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            am,
            ak,
            bn,
            alpha,
            a.data.as_ptr(),
            a_rs,
            a_cs,
            b.data.as_ptr(),
            b_rs,
            b_cs,
            1.0,
            c.data.as_mut_ptr(),
            bn as isize,
            1,
        );
    }
}

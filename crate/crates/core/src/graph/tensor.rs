//! Dense row-major f64 tensors with cheap clones.
//!
//! Values are shared through an `Arc`, so cloning a tensor (e.g. binding a
//! parameter into a tape) never copies the payload; mutation goes through
//! copy-on-write in the optimizer.

use std::sync::Arc;

use crate::{Error, Result};

/// Up to four dimensions; unused trailing dims are 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 4],
    ndim: u8,
}

impl Shape {
    pub fn d1(n: usize) -> Shape {
        Shape {
            dims: [n, 1, 1, 1],
            ndim: 1,
        }
    }
    pub fn d2(r: usize, c: usize) -> Shape {
        Shape {
            dims: [r, c, 1, 1],
            ndim: 2,
        }
    }
    pub fn d3(a: usize, b: usize, c: usize) -> Shape {
        Shape {
            dims: [a, b, c, 1],
            ndim: 3,
        }
    }
    pub fn d4(a: usize, b: usize, c: usize, d: usize) -> Shape {
        Shape {
            dims: [a, b, c, d],
            ndim: 4,
        }
    }

    pub fn ndim(&self) -> usize {
        self.ndim as usize
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of a 1- or 2-d tensor (a vector is a single row).
    pub fn rows(&self) -> usize {
        if self.ndim == 1 {
            1
        } else {
            self.dims[0]
        }
    }

    /// Columns of a 1- or 2-d tensor.
    pub fn cols(&self) -> usize {
        if self.ndim == 1 {
            self.dims[0]
        } else {
            self.dims[1]
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for i in 0..self.ndim() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{}", self.dims[i])?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.len(),
            data.len(),
            "shape {shape} does not match data length {}",
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::new(shape, vec![0.0; shape.len()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(Shape::d1(1), vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(Shape::d1(n), data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(Shape::d2(rows, cols), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy-on-write access for in-place parameter updates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Reinterprets the payload under a new shape of identical length.
    pub fn reshaped(&self, shape: Shape) -> Tensor {
        assert_eq!(shape.len(), self.len());
        Tensor {
            shape,
            data: Arc::clone(&self.data),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!(
                "non-finite values in {context} (shape {})",
                self.shape
            )))
        }
    }
}

/// `c += a · b` for row-major buffers, the only hot kernel in the crate.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += aᵀ · b` where `a` is `[k, m]` row-major.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` where `b` is `[n, k]` row-major. `b` is transposed into a
/// scratch buffer first so the inner loop is a vectorizable axpy instead of
/// a serial dot-product reduction.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_acc(a, &bt, c, m, k, n);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = vec![0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        // aᵀ·b with a stored transposed gives the same product.
        let a_t = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2 = aᵀ
        let mut c2 = vec![0.0; 4];
        matmul_tn_acc(&a_t, &b, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        // a·bᵀ with b stored transposed.
        let b_t = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // 2x3 = bᵀ
        let mut c3 = vec![0.0; 4];
        matmul_nt_acc(&a, &b_t, &mut c3, 2, 3, 2);
        assert_eq!(c, c3);
    }
}

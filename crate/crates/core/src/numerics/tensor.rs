use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`]: `f32` for training, `f64`
/// for gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// Large negative stand-in for −∞ in additive attention masks.
    const MASK_SENTINEL: Self;
    const DTYPE: &'static str;

    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Every address reachable through the given extents and strides must be
    /// in bounds of the corresponding allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {
    const MASK_SENTINEL: Self = -1e9;
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const MASK_SENTINEL: Self = -1e18;
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided read-only matrix view into a slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, F> MatRef<'a, F> {
    pub fn dense(data: &'a [F], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// Row-major sub-block starting at `offset` with the given row stride.
    pub fn block(data: &'a [F], offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        MatRef { data: &data[offset..], rows, cols, row_stride, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

pub struct MatMut<'a, F> {
    pub data: &'a mut [F],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a, F> MatMut<'a, F> {
    pub fn dense(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        MatMut { data, rows, cols, row_stride: cols }
    }

    pub fn block(data: &'a mut [F], offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        MatMut { data: &mut data[offset..], rows, cols, row_stride }
    }
}

/// `c = alpha * a·b + beta * c`.
pub fn gemm<F: Real>(alpha: F, a: MatRef<'_, F>, b: MatRef<'_, F>, beta: F, c: MatMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(a.rows, c.rows, "gemm row extent");
    assert_eq!(b.cols, c.cols, "gemm col extent");
    assert!(a.max_index() <= a.data.len() && b.max_index() <= b.data.len());
    if c.rows > 0 && c.cols > 0 {
        assert!((c.rows - 1) * c.row_stride + c.cols <= c.data.len());
    }
    // SAFETY: extents and strides were bounds-checked above.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            1,
        )
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents as (rows, cols), collapsing all leading axes into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            s => {
                let cols = *s.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn sq_norm(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }
}

//! Dense rank-4 / rank-2 arrays in row-major NCHW layout.
//!
//! This is deliberately minimal: no broadcasting, no views. Activations and
//! convolution weights live in [`Tensor4`]; fully-connected layers and label
//! batches use [`Tensor2`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Mul,
    Sub,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1, "all dims must be >= 1");
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor4 {
        assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1, "all dims must be >= 1");
        assert_eq!(data.len(), n * c * h * w, "data length must equal n*c*h*w");
        Tensor4 { n, c, h, w, data }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dims are all >= 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    /// The (h × w) spatial plane of sample `n`, channel `c`, as a flat slice.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let base = (n * self.c + c) * self.h * self.w;
        &self.data[base..base + self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let base = (n * self.c + c) * self.h * self.w;
        let hw = self.h * self.w;
        &mut self.data[base..base + hw]
    }

    /// Zero-padded accessor with the 1-based spatial convention used by the
    /// layer equations: `p` and `q` address rows/columns in `1..=h` and
    /// `1..=w`; everything outside reads as 0. `n` and `c` out of range is a
    /// contract violation and panics.
    #[inline]
    pub fn padded_get(&self, n: usize, c: usize, p: i64, q: i64) -> f64 {
        assert!(n < self.n && c < self.c, "n/c out of range");
        if p < 1 || p > self.h as i64 || q < 1 || q > self.w as i64 {
            0.0
        } else {
            self.at(n, c, (p - 1) as usize, (q - 1) as usize)
        }
    }

    pub fn elementwise(a: &Tensor4, b: &Tensor4, op: ElemOp) -> Result<Tensor4> {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!(
                "elementwise on {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| match op {
                ElemOp::Add => x + y,
                ElemOp::Mul => x * y,
                ElemOp::Sub => x - y,
            })
            .collect();
        Ok(Tensor4 {
            n: a.n,
            c: a.c,
            h: a.h,
            w: a.w,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Tensor2 {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor2 {
        assert_eq!(data.len(), rows * cols);
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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
}

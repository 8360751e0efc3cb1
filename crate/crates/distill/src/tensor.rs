//! Dense row-major matrices and the three matmul kernels the tape needs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use anatomy_core::par::{self, Exec};
use num_traits::Float;

/// Scalar type of a tape: `f32` for training, `f64` for checks.
pub trait Real:
    Float + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scalar(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_WORK: usize = 1 << 16;

fn rows_per_task(rows: usize, work: usize, exec: Exec) -> Option<usize> {
    if !exec.is_parallel() || work < PAR_WORK || rows < 2 {
        None
    } else {
        Some(rows.div_ceil(rayon_tasks()).max(1))
    }
}

fn rayon_tasks() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()) * 4
}

/// Runs `f(first_row, block)` over row blocks of `out`; the per-element
/// arithmetic is the same however the rows are split.
fn over_rows<T: Real>(out: &mut Tensor<T>, work: usize, exec: Exec, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    let cols = out.cols.max(1);
    match rows_per_task(out.rows, work, exec) {
        Some(r) => par::for_each_chunk_mut(exec, &mut out.data, r * cols, |idx, block| f(idx * r, block)),
        None => f(0, &mut out.data),
    }
}

/// `a · b`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, exec: Exec) -> Tensor<T> {
    assert_eq!(a.cols, b.rows);
    let (k, m) = (a.cols, b.cols);
    let mut out = Tensor::zeros(a.rows, m);
    over_rows(&mut out, a.rows * k * m, exec, |first, block| {
        for (r, orow) in block.chunks_exact_mut(m.max(1)).enumerate() {
            let arow = a.row(first + r);
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b.data[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>, exec: Exec) -> Tensor<T> {
    assert_eq!(a.cols, b.cols);
    let m = b.rows;
    let mut out = Tensor::zeros(a.rows, m);
    over_rows(&mut out, a.rows * a.cols * m, exec, |first, block| {
        for (r, orow) in block.chunks_exact_mut(m.max(1)).enumerate() {
            let arow = a.row(first + r);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot(arow, b.row(j));
            }
        }
    });
    out
}

/// `aᵀ · b`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>, exec: Exec) -> Tensor<T> {
    assert_eq!(a.rows, b.rows);
    let (n, m) = (a.cols, b.cols);
    let mut out = Tensor::zeros(n, m);
    over_rows(&mut out, a.rows * n * m, exec, |first, block| {
        let rows = block.len() / m.max(1);
        for p in 0..a.rows {
            let arow = a.row(p);
            let brow = b.row(p);
            for r in 0..rows {
                let av = arow[first + r];
                for (o, &bv) in block[r * m..(r + 1) * m].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

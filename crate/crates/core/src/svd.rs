//! Dense singular value decomposition.
//!
//! Householder bidiagonalization followed by implicit-shift QR sweeps on the
//! bidiagonal (Golub-Kahan-Reinsch). Storage is column-major so that each
//! reflector and each Givens rotation touches contiguous columns; column
//! updates are independent and run under the caller's [`Exec`] policy.

use crate::error::{AnatomyError, Result};
use crate::par::{self, Exec};

/// Off-diagonal entries below this fraction of the bidiagonal norm are
/// treated as converged.
pub const CONVERGENCE_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 75;
/// Column blocks smaller than this are updated inline.
const PAR_MIN_WORK: usize = 1 << 14;

/// Column-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ColMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ColMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ColMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[j * rows + i] = values[i * cols + j];
            }
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                t.data[i * self.cols + j] = self.data[j * self.rows + i];
            }
        }
        t
    }

    /// Mutable views of two distinct columns.
    fn two_cols_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b);
        let r = self.rows;
        if a < b {
            let (left, right) = self.data.split_at_mut(b * r);
            (&mut left[a * r..(a + 1) * r], &mut right[..r])
        } else {
            let (left, right) = self.data.split_at_mut(a * r);
            (&mut right[..r], &mut left[b * r..(b + 1) * r])
        }
    }
}

/// Singular values (descending) and, when requested, thin factors with
/// `M = U diag(s) Vᵀ`; `U` is rows×r and `V` is cols×r, r = min(rows, cols).
#[derive(Debug, Clone)]
pub struct Svd {
    pub singular_values: Vec<f64>,
    pub u: Option<ColMatrix>,
    pub v: Option<ColMatrix>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Householder vector for `x`: returns (beta, alpha) with `v` written in place
/// of `x` so that `(I - beta v vᵀ) x = alpha e₁`.
fn householder(x: &mut [f64]) -> (f64, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || x.len() == 1 {
        let alpha = x[0];
        x.iter_mut().for_each(|v| *v = 0.0);
        return (0.0, alpha);
    }
    let alpha = if x[0] > 0.0 { -norm } else { norm };
    x[0] -= alpha;
    let vtv = x.iter().map(|v| v * v).sum::<f64>();
    (2.0 / vtv, alpha)
}

/// Applies `I - beta v vᵀ` to rows `offset..` of every column in `cols`.
fn reflect_columns(exec: Exec, m: &mut ColMatrix, cols: std::ops::Range<usize>, offset: usize, v: &[f64], beta: f64) {
    if beta == 0.0 || cols.is_empty() {
        return;
    }
    let rows = m.rows;
    let block = &mut m.data[cols.start * rows..cols.end * rows];
    let exec = if block.len() * 2 < PAR_MIN_WORK { Exec::Sequential } else { exec };
    par::for_each_chunk_mut(exec, block, rows, |_, col| {
        let tail = &mut col[offset..];
        let w = beta * dot(v, tail);
        for (c, vi) in tail.iter_mut().zip(v) {
            *c -= w * vi;
        }
    });
}

/// Applies `I - beta v vᵀ` from the right on columns `first..` of rows `first_row..`.
fn reflect_rows(exec: Exec, m: &mut ColMatrix, first_row: usize, first_col: usize, v: &[f64], beta: f64) {
    if beta == 0.0 {
        return;
    }
    let rows = m.rows;
    // s = A[first_row.., first_col..] v, accumulated column by column
    let mut s = vec![0.0; rows - first_row];
    for (j, &vj) in v.iter().enumerate() {
        let col = &m.col(first_col + j)[first_row..];
        for (si, c) in s.iter_mut().zip(col) {
            *si += c * vj;
        }
    }
    let block = &mut m.data[first_col * rows..(first_col + v.len()) * rows];
    let exec = if block.len() * 2 < PAR_MIN_WORK { Exec::Sequential } else { exec };
    par::for_each_chunk_mut(exec, block, rows, |j, col| {
        let f = beta * v[j];
        for (c, si) in col[first_row..].iter_mut().zip(&s) {
            *c -= f * si;
        }
    });
}

/// Rotates columns `a` and `b`: `a ← a c + b s`, `b ← b c − a s`.
fn rotate(m: &mut ColMatrix, a: usize, b: usize, c: f64, s: f64) {
    let (ca, cb) = m.two_cols_mut(a, b);
    for (x, z) in ca.iter_mut().zip(cb.iter_mut()) {
        let (y, w) = (*x, *z);
        *x = y * c + w * s;
        *z = w * c - y * s;
    }
}

/// SVD of a row-major `rows`×`cols` matrix.
pub fn svd_with(values: &[f64], rows: usize, cols: usize, factors: bool, exec: Exec) -> Result<Svd> {
    if rows == 0 || cols == 0 || values.len() != rows * cols {
        return Err(AnatomyError::validation("matrix shape does not match its data"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AnatomyError::validation("matrix contains non-finite values"));
    }
    let a = ColMatrix::from_row_major(rows, cols, values);
    if rows >= cols {
        tall_svd(a, factors, exec)
    } else {
        let t = tall_svd(a.transpose(), factors, exec)?;
        Ok(Svd {
            singular_values: t.singular_values,
            u: t.v,
            v: t.u,
        })
    }
}

pub fn svd(values: &[f64], rows: usize, cols: usize, factors: bool) -> Result<Svd> {
    svd_with(values, rows, cols, factors, Exec::default())
}

fn tall_svd(mut a: ColMatrix, factors: bool, exec: Exec) -> Result<Svd> {
    let (m, n) = (a.rows, a.cols);
    let mut d = vec![0.0; n];
    // e[k] couples d[k-1] and d[k]; e[0] is unused
    let mut e = vec![0.0; n];
    let mut left_beta = vec![0.0; n];
    let mut right_beta = vec![0.0; n];

    for k in 0..n {
        let (beta, alpha) = householder(&mut a.col_mut(k)[k..]);
        left_beta[k] = beta;
        d[k] = alpha;
        let v = a.col(k)[k..].to_vec();
        reflect_columns(exec, &mut a, k + 1..n, k, &v, beta);

        if k + 1 < n {
            let mut x: Vec<f64> = (k + 1..n).map(|j| a.get(k, j)).collect();
            let (beta, alpha) = householder(&mut x);
            right_beta[k] = beta;
            e[k + 1] = alpha;
            for (j, xv) in (k + 1..n).zip(&x) {
                a.data[j * m + k] = *xv;
            }
            reflect_rows(exec, &mut a, k + 1, k + 1, &x, beta);
        }
    }

    let (mut u, mut v) = if factors {
        let mut u = ColMatrix::zeros(m, n);
        for j in 0..n {
            u.data[j * m + j] = 1.0;
        }
        for k in (0..n).rev() {
            let hv = a.col(k)[k..].to_vec();
            reflect_columns(exec, &mut u, k..n, k, &hv, left_beta[k]);
        }
        let mut vm = ColMatrix::zeros(n, n);
        for j in 0..n {
            vm.data[j * n + j] = 1.0;
        }
        for k in (0..n.saturating_sub(1)).rev() {
            let hv: Vec<f64> = (k + 1..n).map(|j| a.get(k, j)).collect();
            reflect_columns(exec, &mut vm, k + 1..n, k + 1, &hv, right_beta[k]);
        }
        (Some(u), Some(vm))
    } else {
        (None, None)
    };

    diagonalize(&mut d, &mut e, u.as_mut(), v.as_mut())?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
    let singular_values: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let u = u.map(|m| permute_cols(&m, &order));
    let v = v.map(|m| permute_cols(&m, &order));
    Ok(Svd {
        singular_values,
        u,
        v,
    })
}

fn permute_cols(m: &ColMatrix, order: &[usize]) -> ColMatrix {
    let mut out = ColMatrix::zeros(m.rows, order.len());
    for (t, &src) in order.iter().enumerate() {
        out.col_mut(t).copy_from_slice(m.col(src));
    }
    out
}

/// Implicit-shift QR on the upper bidiagonal (`d` diagonal, `e` super-diagonal
/// with `e[i]` between `i-1` and `i`). On return `d` holds nonnegative
/// singular values in no particular order.
fn diagonalize(d: &mut [f64], e: &mut [f64], mut u: Option<&mut ColMatrix>, mut v: Option<&mut ColMatrix>) -> Result<()> {
    let n = d.len();
    let anorm = d
        .iter()
        .zip(e.iter())
        .map(|(a, b)| a.abs() + b.abs())
        .fold(0.0, f64::max);
    let tol = CONVERGENCE_TOL * anorm;

    for k in (0..n).rev() {
        let mut sweeps = 0;
        loop {
            // find l such that e[l] is negligible (l == 0 always qualifies)
            let mut l = k;
            let mut cancel = false;
            loop {
                if l == 0 || e[l].abs() <= tol {
                    break;
                }
                if d[l - 1].abs() <= tol {
                    cancel = true;
                    break;
                }
                l -= 1;
            }
            if cancel {
                // d[l-1] is zero: chase e[l] out with rotations from the left
                let nm = l - 1;
                let (mut c, mut s) = (0.0, 1.0);
                for i in l..=k {
                    let f = s * e[i];
                    e[i] *= c;
                    if f.abs() <= tol {
                        break;
                    }
                    let g = d[i];
                    let h = f.hypot(g);
                    d[i] = h;
                    c = g / h;
                    s = -f / h;
                    if let Some(u) = u.as_deref_mut() {
                        rotate(u, nm, i, c, s);
                    }
                }
            }
            let z = d[k];
            if l == k {
                if z < 0.0 {
                    d[k] = -z;
                    if let Some(v) = v.as_deref_mut() {
                        v.col_mut(k).iter_mut().for_each(|x| *x = -*x);
                    }
                }
                break;
            }
            sweeps += 1;
            if sweeps > MAX_SWEEPS {
                return Err(AnatomyError::Numeric {
                    op: "svd",
                    message: format!("no convergence for singular value {k} after {MAX_SWEEPS} sweeps"),
                });
            }

            // Wilkinson-style shift from the trailing 2x2 block
            let mut x = d[l];
            let y = d[k - 1];
            let g = e[k - 1];
            let h = e[k];
            let mut f = ((y - z) * (y + z) + (g - h) * (g + h)) / (2.0 * h * y);
            let r = f.hypot(1.0);
            f = ((x - z) * (x + z) + h * ((y / (f + r.copysign(f))) - h)) / x;

            let (mut c, mut s) = (1.0, 1.0);
            for j in l..k {
                let i = j + 1;
                let mut g = e[i];
                let mut y = d[i];
                let mut h = s * g;
                g *= c;
                let mut z = f.hypot(h);
                e[j] = z;
                c = f / z;
                s = h / z;
                f = x * c + g * s;
                g = g * c - x * s;
                h = y * s;
                y *= c;
                if let Some(v) = v.as_deref_mut() {
                    rotate(v, j, i, c, s);
                }
                z = f.hypot(h);
                d[j] = z;
                if z != 0.0 {
                    c = f / z;
                    s = h / z;
                }
                f = c * g + s * y;
                x = c * y - s * g;
                if let Some(u) = u.as_deref_mut() {
                    rotate(u, j, i, c, s);
                }
            }
            e[l] = 0.0;
            e[k] = f;
            d[k] = x;
        }
    }
    Ok(())
}

//! Scalar-generic vector/matrix primitives, a numerically stable softmax,
//! and a central finite-difference gradient oracle.
//!
//! Everything here is pure and reentrant. The rest of the crate instantiates
//! these at `f64` (see the aliases at the crate root); the generic bound lets
//! tests and tools pick `f32` where single precision is all they need.

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point scalar usable by the core math: `f32` or `f64`.
pub trait Real: Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major matrix with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut F {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// `y = A x`; `x.len()` must equal `cols`.
    pub fn matvec(&self, x: &[F]) -> Result<Vec<F>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: {}x{} matrix applied to length-{} vector",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect())
    }

    /// `y = A^T x`; `x.len()` must equal `rows`.
    pub fn matvec_t(&self, x: &[F]) -> Result<Vec<F>> {
        if x.len() != self.rows {
            return Err(Error::Shape(format!(
                "matvec_t: {}x{} matrix applied to length-{} vector",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut y = vec![F::zero(); self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for (yc, &a) in y.iter_mut().zip(row) {
                *yc = *yc + a * xr;
            }
        }
        Ok(y)
    }

    pub fn frobenius_norm(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm2<F: Real>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// L2-normalize in place; returns the original norm. Vectors with norm below
/// `eps` are left untouched (zero-guard).
pub fn l2_normalize<F: Real>(v: &mut [F], eps: F) -> F {
    let n = norm2(v);
    if n > eps {
        for x in v.iter_mut() {
            *x = *x / n;
        }
    }
    n
}

pub fn all_finite<F: Real>(v: &[F]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Temperature softmax `p_i = exp(l_i / temp) / sum_j exp(l_j / temp)`,
/// computed with max-subtraction.
pub fn softmax<F: Real>(logits: &[F], temperature: F) -> Result<Vec<F>> {
    if !all_finite(logits) {
        return Err(Error::Numeric("softmax: non-finite logit".into()));
    }
    if !(temperature > F::zero()) {
        return Err(Error::Numeric(format!(
            "softmax: temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Numeric("softmax: empty logits".into()));
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Central-difference gradient estimate `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// This is the independent oracle the gradient tests check analytic
/// backpropagation against; it must stay free of any analytic shortcut.
pub fn finite_diff_grad<F: Real>(
    f: &mut dyn FnMut(&[F]) -> F,
    x: &[F],
    h: F,
) -> Result<Vec<F>> {
    let mut grad = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_grad: non-finite evaluation at coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (h + h));
    }
    Ok(grad)
}

/// Relative error between an analytic gradient and an oracle gradient,
/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn grad_rel_err<F: Real>(analytic: &[F], oracle: &[F]) -> F {
    let diff: F = analytic
        .iter()
        .zip(oracle)
        .fold(F::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    let na = norm2(analytic);
    let nb = norm2(oracle);
    let floor = F::from_f64(1e-8).unwrap();
    diff.sqrt() / na.max(nb).max(floor)
}

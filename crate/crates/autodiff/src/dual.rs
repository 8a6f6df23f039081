//! Forward-mode input tangents layered over another backend.
//!
//! A [`DualT`] carries a primal value plus one tangent per seeded input
//! direction, each of them a value of the underlying backend. Running a
//! network on `Dual<Tape>` therefore records the input derivatives on the
//! tape, and a later reverse sweep differentiates them with respect to the
//! parameters.

use crate::backend::Backend;
use crate::error::{AdError, Result};
use crate::spectral::power_iteration;
use crate::tensor::Tensor;
use crate::unary::Unary;

#[derive(Debug, Clone)]
pub struct DualT<T> {
    pub v: T,
    /// `None` for values that do not depend on the seeded input.
    pub d: Option<Vec<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Dual<'a, B: Backend> {
    pub base: &'a B,
    pub dirs: usize,
}

impl<'a, B: Backend> Dual<'a, B> {
    pub fn new(base: &'a B, dirs: usize) -> Self {
        Self { base, dirs }
    }

    /// A value with explicit tangents, one per direction.
    pub fn seed(&self, v: B::T, tangents: Vec<B::T>) -> DualT<B::T> {
        assert_eq!(tangents.len(), self.dirs, "one tangent per direction");
        DualT { v, d: Some(tangents) }
    }

    /// Lifts a value of the base backend as a constant.
    pub fn lift(&self, v: B::T) -> DualT<B::T> {
        DualT { v, d: None }
    }

    fn zeros_like(&self, v: &B::T) -> B::T {
        let (r, c) = self.base.dims(v);
        self.base.zeros(r, c)
    }

    fn map_d(&self, a: &DualT<B::T>, f: impl Fn(&B::T) -> B::T) -> Option<Vec<B::T>> {
        a.d.as_ref().map(|d| d.iter().map(f).collect())
    }

    /// Combines tangents of two operands; `fa`/`fb` give each operand's
    /// contribution for one direction.
    fn combine(
        &self,
        a: &DualT<B::T>,
        b: &DualT<B::T>,
        fa: impl Fn(&B::T) -> B::T,
        fb: impl Fn(&B::T) -> B::T,
    ) -> Option<Vec<B::T>> {
        match (&a.d, &b.d) {
            (None, None) => None,
            (Some(da), None) => Some(da.iter().map(fa).collect()),
            (None, Some(db)) => Some(db.iter().map(fb).collect()),
            (Some(da), Some(db)) => {
                Some(da.iter().zip(db).map(|(x, y)| self.base.add(&fa(x), &fb(y))).collect())
            }
        }
    }
}

impl<B: Backend> Backend for Dual<'_, B> {
    type T = DualT<B::T>;

    fn constant(&self, t: Tensor) -> Self::T {
        self.lift(self.base.constant(t))
    }

    fn param(&self, name: &str, t: &Tensor) -> Self::T {
        self.lift(self.base.param(name, t))
    }

    fn value(&self, a: &Self::T) -> Tensor {
        self.base.value(&a.v)
    }

    fn dims(&self, a: &Self::T) -> (usize, usize) {
        self.base.dims(&a.v)
    }

    fn add(&self, a: &Self::T, b: &Self::T) -> Self::T {
        let b_ = self.base;
        DualT { v: b_.add(&a.v, &b.v), d: self.combine(a, b, |x| x.clone(), |y| y.clone()) }
    }

    fn sub(&self, a: &Self::T, b: &Self::T) -> Self::T {
        let b_ = self.base;
        DualT { v: b_.sub(&a.v, &b.v), d: self.combine(a, b, |x| x.clone(), |y| b_.neg(y)) }
    }

    fn mul(&self, a: &Self::T, b: &Self::T) -> Self::T {
        let b_ = self.base;
        let d = self.combine(a, b, |x| b_.mul(x, &b.v), |y| b_.mul(&a.v, y));
        DualT { v: b_.mul(&a.v, &b.v), d }
    }

    fn div(&self, a: &Self::T, b: &Self::T) -> Self::T {
        let b_ = self.base;
        let v = b_.div(&a.v, &b.v);
        // d(a/b) = (da − v·db) / b
        let d = self.combine(
            a,
            b,
            |x| b_.div(x, &b.v),
            |y| b_.neg(&b_.div(&b_.mul(&v, y), &b.v)),
        );
        DualT { v, d }
    }

    fn add_row(&self, a: &Self::T, row: &Self::T) -> Self::T {
        let b_ = self.base;
        let d = match (&a.d, &row.d) {
            (None, None) => None,
            (Some(da), None) => Some(da.clone()),
            (da, Some(dr)) => Some(
                dr.iter()
                    .enumerate()
                    .map(|(k, r)| {
                        let base = match da {
                            Some(da) => da[k].clone(),
                            None => self.zeros_like(&a.v),
                        };
                        b_.add_row(&base, r)
                    })
                    .collect(),
            ),
        };
        DualT { v: b_.add_row(&a.v, &row.v), d }
    }

    fn mul_col(&self, a: &Self::T, col: &Self::T) -> Self::T {
        let b_ = self.base;
        let d = self.combine(a, col, |x| b_.mul_col(x, &col.v), |y| b_.mul_col(&a.v, y));
        DualT { v: b_.mul_col(&a.v, &col.v), d }
    }

    fn matmul(&self, a: &Self::T, b: &Self::T) -> Self::T {
        let b_ = self.base;
        let d = self.combine(a, b, |x| b_.matmul(x, &b.v), |y| b_.matmul(&a.v, y));
        DualT { v: b_.matmul(&a.v, &b.v), d }
    }

    fn matmul_nt(&self, a: &Self::T, b: &Self::T) -> Self::T {
        let b_ = self.base;
        let d = self.combine(a, b, |x| b_.matmul_nt(x, &b.v), |y| b_.matmul_nt(&a.v, y));
        DualT { v: b_.matmul_nt(&a.v, &b.v), d }
    }

    fn scale(&self, a: &Self::T, c: f64) -> Self::T {
        DualT { v: self.base.scale(&a.v, c), d: self.map_d(a, |x| self.base.scale(x, c)) }
    }

    fn add_scalar(&self, a: &Self::T, c: f64) -> Self::T {
        DualT { v: self.base.add_scalar(&a.v, c), d: a.d.clone() }
    }

    fn unary(&self, a: &Self::T, f: Unary) -> Self::T {
        let v = self.base.unary(&a.v, f);
        let d = match (&a.d, f.derivative()) {
            (None, _) => None,
            (Some(da), None) => Some(da.iter().map(|x| self.zeros_like(x)).collect()),
            (Some(da), Some(fp)) => {
                let slope = self.base.unary(&a.v, fp);
                Some(da.iter().map(|x| self.base.mul(x, &slope)).collect())
            }
        };
        DualT { v, d }
    }

    fn sum_rows(&self, a: &Self::T) -> Self::T {
        DualT { v: self.base.sum_rows(&a.v), d: self.map_d(a, |x| self.base.sum_rows(x)) }
    }

    fn sum_cols(&self, a: &Self::T) -> Self::T {
        DualT { v: self.base.sum_cols(&a.v), d: self.map_d(a, |x| self.base.sum_cols(x)) }
    }

    fn sum_all(&self, a: &Self::T) -> Self::T {
        DualT { v: self.base.sum_all(&a.v), d: self.map_d(a, |x| self.base.sum_all(x)) }
    }

    fn col(&self, a: &Self::T, j: usize) -> Self::T {
        DualT { v: self.base.col(&a.v, j), d: self.map_d(a, |x| self.base.col(x, j)) }
    }

    fn hcat(&self, parts: &[Self::T]) -> Self::T {
        let vs: Vec<B::T> = parts.iter().map(|p| p.v.clone()).collect();
        let v = self.base.hcat(&vs);
        let d = if parts.iter().all(|p| p.d.is_none()) {
            None
        } else {
            Some(
                (0..self.dirs)
                    .map(|k| {
                        let ds: Vec<B::T> = parts
                            .iter()
                            .map(|p| match &p.d {
                                Some(d) => d[k].clone(),
                                None => self.zeros_like(&p.v),
                            })
                            .collect();
                        self.base.hcat(&ds)
                    })
                    .collect(),
            )
        };
        DualT { v, d }
    }

    fn reshape(&self, a: &Self::T, rows: usize, cols: usize) -> Self::T {
        DualT {
            v: self.base.reshape(&a.v, rows, cols),
            d: self.map_d(a, |x| self.base.reshape(x, rows, cols)),
        }
    }

    fn transpose(&self, a: &Self::T) -> Self::T {
        DualT { v: self.base.transpose(&a.v), d: self.map_d(a, |x| self.base.transpose(x)) }
    }

    fn spectral_norm(&self, a: &Self::T, iters: usize) -> Self::T {
        let v = self.base.spectral_norm(&a.v, iters);
        let d = a.d.as_ref().map(|da| {
            let t = power_iteration(&self.base.value(&a.v), iters);
            let (r, c) = self.base.dims(&a.v);
            let mut uv = Tensor::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    uv.data[i * c + j] = t.u[i] * t.v[j];
                }
            }
            let uv = self.base.constant(uv);
            da.iter().map(|x| self.base.sum_all(&self.base.mul(x, &uv))).collect()
        });
        DualT { v, d }
    }
}

/// Row-wise input gradient of a per-row scalar function.
///
/// `x` is an `n × d` batch; `f` must map it to an `n × 1` column whose row
/// `i` depends only on row `i` of its input. Returns the `n × d` matrix of
/// gradients, expressed in the base backend so that it stays differentiable
/// with respect to anything `f` reads through `param`.
pub fn input_gradient<B, F>(base: &B, x: &B::T, f: F) -> Result<B::T>
where
    B: Backend,
    F: FnOnce(&Dual<'_, B>, &DualT<B::T>) -> DualT<B::T>,
{
    let (n, d) = base.dims(x);
    let dual = Dual::new(base, d);
    let dirs = (0..d)
        .map(|j| {
            let mut e = Tensor::zeros(n, d);
            for r in 0..n {
                e.data[r * d + j] = 1.0;
            }
            base.constant(e)
        })
        .collect();
    let xd = dual.seed(x.clone(), dirs);
    let out = f(&dual, &xd);
    if base.dims(&out.v) != (n, 1) {
        return Err(AdError::Contract(format!(
            "input_gradient needs an {n} x 1 output, got {:?}",
            base.dims(&out.v)
        )));
    }
    Ok(match out.d {
        Some(ds) => base.hcat(&ds),
        None => base.zeros(n, d),
    })
}

//! The operation set every evaluator implements.
//!
//! Networks, vector fields and losses are written once against [`Backend`]
//! and then run on [`Eager`] (plain values), on a [`crate::Tape`] (recorded
//! for reverse-mode gradients) or on [`crate::Dual`] (forward-mode input
//! tangents layered over either of the two).

use crate::spectral::power_iteration;
use crate::tensor::Tensor;
use crate::unary::Unary;

pub trait Backend {
    type T: Clone;

    fn constant(&self, t: Tensor) -> Self::T;
    /// A trainable parameter. Differentiating backends register it under
    /// `name`; evaluating the same name twice yields the same leaf.
    fn param(&self, name: &str, t: &Tensor) -> Self::T;
    fn value(&self, a: &Self::T) -> Tensor;
    fn dims(&self, a: &Self::T) -> (usize, usize);

    fn add(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn div(&self, a: &Self::T, b: &Self::T) -> Self::T;
    /// `a (n×m) + row (1×m)`.
    fn add_row(&self, a: &Self::T, row: &Self::T) -> Self::T;
    /// `a (n×m) ⊙ col (n×1)`.
    fn mul_col(&self, a: &Self::T, col: &Self::T) -> Self::T;
    fn matmul(&self, a: &Self::T, b: &Self::T) -> Self::T;
    /// `a · bᵀ`, the layout used for `x Wᵀ` with `W` stored out × in.
    fn matmul_nt(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn scale(&self, a: &Self::T, c: f64) -> Self::T;
    fn add_scalar(&self, a: &Self::T, c: f64) -> Self::T;
    fn unary(&self, a: &Self::T, f: Unary) -> Self::T;
    /// Column sums (`1 × m`).
    fn sum_rows(&self, a: &Self::T) -> Self::T;
    /// Row sums (`n × 1`).
    fn sum_cols(&self, a: &Self::T) -> Self::T;
    fn sum_all(&self, a: &Self::T) -> Self::T;
    fn col(&self, a: &Self::T, j: usize) -> Self::T;
    fn hcat(&self, parts: &[Self::T]) -> Self::T;
    fn reshape(&self, a: &Self::T, rows: usize, cols: usize) -> Self::T;
    fn transpose(&self, a: &Self::T) -> Self::T;
    /// Largest singular value of a matrix by power iteration (`1 × 1`).
    /// The singular vectors are treated as constants when differentiating.
    fn spectral_norm(&self, a: &Self::T, iters: usize) -> Self::T;

    fn scalar(&self, v: f64) -> Self::T {
        self.constant(Tensor::scalar(v))
    }

    fn zeros(&self, rows: usize, cols: usize) -> Self::T {
        self.constant(Tensor::zeros(rows, cols))
    }

    fn neg(&self, a: &Self::T) -> Self::T {
        self.scale(a, -1.0)
    }

    fn relu(&self, a: &Self::T) -> Self::T {
        self.unary(a, Unary::RELU)
    }

    fn square(&self, a: &Self::T) -> Self::T {
        self.unary(a, Unary::SQUARE)
    }

    fn mean_all(&self, a: &Self::T) -> Self::T {
        let (n, m) = self.dims(a);
        let s = self.sum_all(a);
        self.scale(&s, 1.0 / (n * m) as f64)
    }

    /// Row-wise dot product of two `n × m` operands (`n × 1`).
    fn row_dot(&self, a: &Self::T, b: &Self::T) -> Self::T {
        let p = self.mul(a, b);
        self.sum_cols(&p)
    }

    /// `a − row` broadcast over rows.
    fn sub_row(&self, a: &Self::T, row: &Self::T) -> Self::T {
        let neg = self.neg(row);
        self.add_row(a, &neg)
    }

    fn scalar_value(&self, a: &Self::T) -> f64 {
        self.value(a).item()
    }
}

/// Plain evaluation; nothing is recorded.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager;

impl Backend for Eager {
    type T = Tensor;

    fn constant(&self, t: Tensor) -> Tensor {
        t
    }
    fn param(&self, _name: &str, t: &Tensor) -> Tensor {
        t.clone()
    }
    fn value(&self, a: &Tensor) -> Tensor {
        a.clone()
    }
    fn dims(&self, a: &Tensor) -> (usize, usize) {
        a.dims()
    }
    fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.add(b)
    }
    fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.sub(b)
    }
    fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.mul(b)
    }
    fn div(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.div(b)
    }
    fn add_row(&self, a: &Tensor, row: &Tensor) -> Tensor {
        a.add_row(row)
    }
    fn mul_col(&self, a: &Tensor, col: &Tensor) -> Tensor {
        a.mul_col(col)
    }
    fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.matmul(b)
    }
    fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.matmul_nt(b)
    }
    fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        a.scale(c)
    }
    fn add_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        a.add_scalar(c)
    }
    fn unary(&self, a: &Tensor, f: Unary) -> Tensor {
        a.map(|x| f.apply(x))
    }
    fn sum_rows(&self, a: &Tensor) -> Tensor {
        a.sum_rows()
    }
    fn sum_cols(&self, a: &Tensor) -> Tensor {
        a.sum_cols()
    }
    fn sum_all(&self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum())
    }
    fn col(&self, a: &Tensor, j: usize) -> Tensor {
        a.col(j)
    }
    fn hcat(&self, parts: &[Tensor]) -> Tensor {
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::hcat(&refs)
    }
    fn reshape(&self, a: &Tensor, rows: usize, cols: usize) -> Tensor {
        a.reshape(rows, cols)
    }
    fn transpose(&self, a: &Tensor) -> Tensor {
        a.transpose()
    }
    fn spectral_norm(&self, a: &Tensor, iters: usize) -> Tensor {
        Tensor::scalar(power_iteration(a, iters).sigma)
    }
}

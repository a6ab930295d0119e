use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the laboratory is generic over: `f32` or `f64`.
///
/// Every tolerance quoted in the tests refers to `f64`; `f32` is supported
/// for exploratory runs where the looser precision is acceptable.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Residual tolerance for exact-in-theory linear solves in this precision.
    fn solve_tolerance() -> Self {
        Self::lit(1e-9).max(Self::epsilon() * Self::lit(1e3))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| m.max(x));
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(sum(exp(logits)))` without overflow.
pub fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| m.max(x));
    let total: T = logits.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

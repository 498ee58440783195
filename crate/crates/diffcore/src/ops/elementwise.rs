//! Pointwise arithmetic, activations and full reductions.

use crate::error::{mismatch, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `rhs` must equal `lhs` in shape, be a trailing suffix of it (broadcast over
/// leading axes), or hold a single element. Returns the rhs element count.
fn broadcast_len<T: Scalar>(op: &'static str, lhs: &Tensor<T>, rhs: &Tensor<T>) -> Result<usize> {
    let (a, b) = (lhs.shape(), rhs.shape());
    let scalar_rhs = rhs.numel() == 1 && b.len() <= 1;
    let suffix = b.len() <= a.len() && a[a.len() - b.len()..] == *b;
    if scalar_rhs || suffix {
        Ok(rhs.numel())
    } else {
        Err(mismatch(op, a, b))
    }
}

/// Sums a full-size gradient down to the broadcast rhs length.
fn reduce_to<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, &x)| *o = *o + x);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let nb = broadcast_len("add", self, rhs)?;
        let b = rhs.data();
        let data = self.data().iter().enumerate().map(|(i, &x)| x + b[i % nb]).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, rhs], move |g| {
            vec![Some(g.to_vec()), Some(reduce_to(g, nb))]
        }))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let nb = broadcast_len("sub", self, rhs)?;
        let b = rhs.data();
        let data = self.data().iter().enumerate().map(|(i, &x)| x - b[i % nb]).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, rhs], move |g| {
            let gb = reduce_to(g, nb).into_iter().map(|x| -x).collect();
            vec![Some(g.to_vec()), Some(gb)]
        }))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let nb = broadcast_len("mul", self, rhs)?;
        let b = rhs.data();
        let data = self.data().iter().enumerate().map(|(i, &x)| x * b[i % nb]).collect();
        let (a_in, b_in) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, rhs], move |g| {
            let (a, b) = (a_in.data(), b_in.data());
            let ga = g.iter().enumerate().map(|(i, &gi)| gi * b[i % nb]).collect();
            let full: Vec<T> = g.iter().zip(a).map(|(&gi, &ai)| gi * ai).collect();
            vec![Some(ga), Some(reduce_to(&full, nb))]
        }))
    }

    pub fn mul_const(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            vec![Some(g.iter().map(|&x| x * c).collect())]
        })
    }

    pub fn add_const(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], |g| vec![Some(g.to_vec())])
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_const(-T::one())
    }

    /// Pointwise map with derivative expressed through input and output.
    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out = data.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            let x = input.data();
            vec![Some(g.iter().enumerate().map(|(i, &gi)| gi * df(x[i], out[i])).collect())]
        })
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        self.unary(gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x, _| T::lit(2.0) * x)
    }

    /// Pointwise Huber penalty: `0.5 r²` inside `delta`, `delta (|r| − delta/2)` outside.
    pub fn huber(&self, delta: T) -> Tensor<T> {
        let half = T::lit(0.5);
        self.unary(
            move |r| {
                if r.abs() <= delta {
                    half * r * r
                } else {
                    delta * (r.abs() - half * delta)
                }
            },
            move |r, _| {
                if r.abs() <= delta {
                    r
                } else {
                    delta * r.signum()
                }
            },
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![total], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    /// Mean of all elements as a rank-0 tensor (0 for an empty tensor).
    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        if n == 0 {
            return Tensor::scalar(T::zero());
        }
        self.sum().mul_const(T::one() / T::lit(n as f64))
    }
}

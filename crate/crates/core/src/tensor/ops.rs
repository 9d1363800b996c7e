use super::{inverse_permutation, split_at_axis, Scalar, Tensor, Var};
use crate::error::{Error, Result};

fn unary<'t, T: Scalar>(
    x: &Var<'t, T>,
    forward: impl Fn(T) -> T,
    derivative: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let out = x.value.map(forward);
    let input = x.shared();
    let out_for_grad = (x.is_tracked() && x.tape.is_recording()).then(|| out.clone());
    x.tape.record(out, &[x], move |g, _| {
        let y = out_for_grad.expect("tracked output kept");
        let data = g
            .data()
            .iter()
            .zip(input.data())
            .zip(y.data())
            .map(|((&g, &x), &y)| g * derivative(x, y))
            .collect();
        vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
    })
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value.zip_map(&other.value, |a, b| a + b)?;
        Ok(self.tape.record(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value.zip_map(&other.value, |a, b| a - b)?;
        Ok(self.tape.record(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value.zip_map(&other.value, |a, b| a * b)?;
        let (a, b) = (self.shared(), other.shared());
        Ok(self.tape.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, b| g * b).expect("same shape")),
                needs[1].then(|| g.zip_map(&a, |g, a| g * a).expect("same shape")),
            ]
        }))
    }

    pub fn scale(&self, factor: T) -> Var<'t, T> {
        let out = self.value.map(|v| v * factor);
        self.tape
            .record(out, &[self], move |g, _| vec![Some(g.map(|v| v * factor))])
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let out = self.value.map(|v| v + c);
        self.tape.record(out, &[self], |g, _| vec![Some(g.clone())])
    }

    /// `x` for `x >= 0`, `alpha * (exp(x) - 1)` otherwise.
    pub fn elu(&self, alpha: T) -> Var<'t, T> {
        unary(
            self,
            move |x| if x >= T::zero() { x } else { alpha * x.exp_m1() },
            move |x, y| if x >= T::zero() { T::one() } else { y + alpha },
        )
    }

    pub fn tanh(&self) -> Var<'t, T> {
        unary(self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        unary(
            self,
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Var<'t, T> {
        unary(
            self,
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

    pub fn sum(&self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value.sum());
        let shape = self.shape().to_vec();
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::lit(self.value.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value).clone().reshaped(shape)?;
        let original = self.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.clone().reshaped(&original).expect("element count preserved"))]
        }))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value.permuted(perm)?;
        let inverse = inverse_permutation(perm);
        Ok(self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.permuted(&inverse).expect("valid inverse permutation"))]
        }))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = self.value.slice_axis(axis, start, len)?;
        let shape = self.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let (outer, dim, inner) = split_at_axis(&shape, axis);
            let mut full = Tensor::zeros(&shape);
            let dst = full.data_mut();
            for o in 0..outer {
                let d = (o * dim + start) * inner;
                let s = o * len * inner;
                dst[d..d + len * inner].copy_from_slice(&g.data()[s..s + len * inner]);
            }
            vec![Some(full)]
        }))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| &*p.value).collect();
        let out = Tensor::concat(&values, axis)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let operands: Vec<&Var<'t, T>> = parts.iter().collect();
        Ok(first.tape.record(out, &operands, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let piece = need.then(|| g.slice_axis(axis, start, len).expect("in range"));
                    start += len;
                    piece
                })
                .collect()
        }))
    }
}

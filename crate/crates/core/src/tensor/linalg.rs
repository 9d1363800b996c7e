use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// `c (+)= op(a) * op(b)` for row-major `m x k` and `k x n` operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_raw(m, k, n, T::one(), a, a_trans, b, b_trans, beta, c);
}

fn batched<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    b_trans: bool,
) -> Result<(usize, usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(Error::shape(format!(
            "bmm expects [G, m, k] x [G, k, n], got {sa:?} and {sb:?}"
        )));
    }
    let (g, m, k) = (sa[0], sa[1], sa[2]);
    let (kb, n) = if b_trans { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    if k != kb {
        return Err(Error::shape(format!(
            "bmm inner dimensions differ: {sa:?} x {sb:?}{}",
            if b_trans { " (transposed)" } else { "" }
        )));
    }
    Ok((g, m, k, n))
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul expects [m, k] x [k, n], got {sa:?} and {sb:?}"
            )));
        }
        let (m, n) = (sa[0], sb[1]);
        let a3 = self.reshape(&[1, sa[0], sa[1]])?;
        let b3 = other.reshape(&[1, sb[0], sb[1]])?;
        a3.bmm(&b3, false)?.reshape(&[m, n])
    }

    /// Batched matrix product `[G, m, k] x [G, k, n]`, or with `b_trans`
    /// the second operand is given as `[G, n, k]`.
    pub fn bmm(&self, other: &Var<'t, T>, b_trans: bool) -> Result<Var<'t, T>> {
        let (g, m, k, n) = batched(&self.value, &other.value, b_trans)?;
        let mut out = vec![T::zero(); g * m * n];
        let (a, b) = (self.value.data(), other.value.data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                false,
                &b[i * k * n..(i + 1) * k * n],
                b_trans,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::from_parts(vec![g, m, n], out);
        let (av, bv) = (self.shared(), other.shared());
        Ok(self.tape.record(out, &[self, other], move |go, needs| {
            let gd = go.data();
            let da = needs[0].then(|| {
                // dA = dC * op(B)^T
                let mut da = vec![T::zero(); g * m * k];
                for i in 0..g {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        !b_trans,
                        &mut da[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                Tensor::from_parts(vec![g, m, k], da)
            });
            let db = needs[1].then(|| {
                let mut db = vec![T::zero(); g * k * n];
                for i in 0..g {
                    let a_i = &av.data()[i * m * k..(i + 1) * m * k];
                    let g_i = &gd[i * m * n..(i + 1) * m * n];
                    let d_i = &mut db[i * k * n..(i + 1) * k * n];
                    if b_trans {
                        // B stored [n, k]: dB = dC^T * A
                        gemm(n, m, k, g_i, true, a_i, false, d_i, false);
                    } else {
                        // dB = A^T * dC
                        gemm(k, m, n, a_i, true, g_i, false, d_i, false);
                    }
                }
                let shape = if b_trans { vec![g, n, k] } else { vec![g, k, n] };
                Tensor::from_parts(shape, db)
            });
            vec![da, db]
        }))
    }

    /// Softmax along the last axis of `x / scale`, stabilised by subtracting
    /// the row maximum.
    pub fn softmax_rows(&self, scale: T) -> Result<Var<'t, T>> {
        if scale <= T::zero() {
            return Err(Error::InvalidInput(format!("softmax scale must be positive, got {scale}")));
        }
        let out = softmax_last_axis(&self.value, scale);
        let y = out.clone();
        let cols = *self.shape().last().expect("rank >= 1");
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); g.numel()];
            for ((dxr, yr), gr) in dx
                .chunks_mut(cols)
                .zip(y.data().chunks(cols))
                .zip(g.data().chunks(cols))
            {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((d, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot) / scale;
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        }))
    }
}

pub(crate) fn softmax_last_axis<T: Scalar>(x: &Tensor<T>, scale: T) -> Tensor<T> {
    let cols = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) / scale).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        assert_eq!(i.matmul(&b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(&c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("dimension"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        for v in z.softmax_rows(1.0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[1, 3], &[2f64.ln(), 0.0, 0.0]));
        let y = x.softmax_rows(1.0).unwrap();
        for (a, b) in y.value().data().iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(x.softmax_rows(0.0).is_err());
    }

    #[test]
    fn bmm_transposed_matches_explicit_transpose() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin()));
        let b = tape.constant(Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.3).cos()));
        let bt = b.permute(&[0, 2, 1]).unwrap();
        let x = a.bmm(&b, true).unwrap();
        let y = a.bmm(&bt, false).unwrap();
        for (p, q) in x.value().data().iter().zip(y.value().data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

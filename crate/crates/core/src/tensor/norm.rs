use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Per-channel statistics of one training-mode batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Scalar> {
    pub mean: Tensor<T>,
    /// Biased (population) variance.
    pub var: Tensor<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

fn channel_params<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = *x.shape().last().ok_or_else(|| Error::shape("batchnorm on rank-0 tensor"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batchnorm: gamma {:?} / beta {:?} must both be [{c}] for input {:?}",
            gamma.shape(),
            beta.shape(),
            x.shape()
        )));
    }
    Ok(c)
}

/// Shared affine tail: returns (y, x_hat) for `y = gamma * x_hat + beta`.
fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let c = mean.len();
    let mut x_hat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for ((row, xh), yr) in x.data().chunks(c).zip(x_hat.chunks_mut(c)).zip(y.chunks_mut(c)) {
        for j in 0..c {
            xh[j] = (row[j] - mean[j]) * inv_std[j];
            yr[j] = gamma[j] * xh[j] + beta[j];
        }
    }
    (y, x_hat)
}

fn affine_grads<T: Scalar>(g: &[T], x_hat: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (gr, xr) in g.chunks(c).zip(x_hat.chunks(c)) {
        for j in 0..c {
            dgamma[j] += gr[j] * xr[j];
            dbeta[j] += gr[j];
        }
    }
    (dgamma, dbeta)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Batch normalisation over every axis except the last, using this
    /// batch's statistics.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let c = channel_params(&self.value, &gamma.value, &beta.value)?;
        let count = self.value.numel() / c;
        if count == 0 {
            return Err(Error::shape("batchnorm on an empty batch"));
        }
        let n = T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        for row in self.value.data().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); c];
        for row in self.value.data().chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, x_hat) = normalize(&self.value, &mean, &inv_std, gamma.value.data(), beta.value.data());
        let stats = BatchStats {
            mean: Tensor::from_parts(vec![c], mean),
            var: Tensor::from_parts(vec![c], var),
            count,
        };
        let out = Tensor::from_parts(self.shape().to_vec(), y);
        let gamma_v = gamma.shared();
        let shape = self.shape().to_vec();
        let var = self.tape.record(out, &[self, gamma, beta], move |g, needs| {
            let gd = g.data();
            let (dgamma, dbeta) = affine_grads(gd, &x_hat, c);
            let dx = needs[0].then(|| {
                // dx = inv_std / N * (N * dxh - sum(dxh) - x_hat * sum(dxh * x_hat))
                let gm = gamma_v.data();
                let mut sum_dxh = vec![T::zero(); c];
                let mut sum_dxh_xh = vec![T::zero(); c];
                for (gr, xr) in gd.chunks(c).zip(x_hat.chunks(c)) {
                    for j in 0..c {
                        let dxh = gr[j] * gm[j];
                        sum_dxh[j] += dxh;
                        sum_dxh_xh[j] += dxh * xr[j];
                    }
                }
                let mut dx = vec![T::zero(); gd.len()];
                for ((dr, gr), xr) in dx.chunks_mut(c).zip(gd.chunks(c)).zip(x_hat.chunks(c)) {
                    for j in 0..c {
                        let dxh = gr[j] * gm[j];
                        dr[j] = inv_std[j] / n * (n * dxh - sum_dxh[j] - xr[j] * sum_dxh_xh[j]);
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            vec![
                dx,
                needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
            ]
        });
        Ok((var, stats))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_infer(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var<'t, T>> {
        let c = channel_params(&self.value, &gamma.value, &beta.value)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm: running stats must be [{c}], got {:?} / {:?}",
                running_mean.shape(),
                running_var.shape()
            )));
        }
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let (y, x_hat) = normalize(
            &self.value,
            running_mean.data(),
            &inv_std,
            gamma.value.data(),
            beta.value.data(),
        );
        let out = Tensor::from_parts(self.shape().to_vec(), y);
        let gamma_v = gamma.shared();
        let shape = self.shape().to_vec();
        Ok(self.tape.record(out, &[self, gamma, beta], move |g, needs| {
            let gd = g.data();
            let (dgamma, dbeta) = affine_grads(gd, &x_hat, c);
            let dx = needs[0].then(|| {
                let gm = gamma_v.data();
                let mut dx = gd.to_vec();
                for row in dx.chunks_mut(c) {
                    for j in 0..c {
                        row[j] *= gm[j] * inv_std[j];
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            vec![
                dx,
                needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};

    fn affine(tape: &Tape<f64>, c: usize) -> (Var<'_, f64>, Var<'_, f64>) {
        (tape.constant(Tensor::ones(&[c])), tape.constant(Tensor::zeros(&[c])))
    }

    #[test]
    fn normalized_input_passes_through() {
        let tape = Tape::<f64>::new();
        // Per channel: values {-1, 1} -> mean 0, var 1.
        let x = tape.constant(Tensor::new(&[2, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap());
        let (g, b) = affine(&tape, 2);
        let (y, stats) = x.batch_norm_train(&g, &b, 1e-5).unwrap();
        assert_eq!(stats.var.data(), &[1.0, 1.0]);
        for (a, e) in y.value().data().iter().zip(x.value().data()) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_input_yields_beta() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[5, 3, 2], 7.5));
        let gamma = tape.constant(Tensor::new(&[2], vec![2.0, -1.0]).unwrap());
        let beta = tape.constant(Tensor::new(&[2], vec![0.25, -3.0]).unwrap());
        let (y, _) = x.batch_norm_train(&gamma, &beta, 1e-5).unwrap();
        for row in y.value().data().chunks(2) {
            assert_eq!(row, &[0.25, -3.0]);
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[4, 6, 5, 3], |_| rng.gen_range(-4.0..9.0)));
        let (g, b) = affine(&tape, 3);
        let (y, _) = x.batch_norm_train(&g, &b, 1e-5).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = y.value().data().iter().skip(ch).step_by(3).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn infer_uses_running_stats() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 1], vec![3.0, 5.0]).unwrap());
        let (g, b) = affine(&tape, 1);
        let rm = Tensor::new(&[1], vec![1.0]).unwrap();
        let rv = Tensor::new(&[1], vec![4.0]).unwrap();
        let y = x.batch_norm_infer(&g, &b, &rm, &rv, 0.0).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0]);
    }
}

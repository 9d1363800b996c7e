//! Slow, loop-based reference implementations and a finite-difference
//! gradient checker. Used by the test suites and the `selftest` command.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionAxis, SelfAttention};
use crate::error::{Error, Result};
use crate::layers::{Activation, ConvBlock, Forward, Mode, ParamId, ParamStore};
use crate::tensor::{same_padding, Tape, Tensor, Var};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per input; `None` checks all of them.
    pub samples_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = values.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&vars)?.value().item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut values = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let indices: Vec<usize> = match opts.samples_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in indices {
            let orig = input.data()[j];
            values[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric);
            if !e.is_finite() {
                return Err(Error::NonFinite(format!("gradient check of input {i} index {j}")));
            }
            if e > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = (i, j, a, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Finite-difference check of parameter gradients: `f` builds a scalar
/// from a forward context over `store`. `params` limits the check to the
/// given `(entry, flat index)` coordinates; `None` checks all trainable
/// scalars.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    mode: Mode,
    bn_eps: f64,
    params: Option<&[(ParamId, usize)]>,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t, 's> Fn(&Forward<'t, 's, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let fw = Forward::new(&tape, store, mode, bn_eps);
    let loss = f(&fw)?;
    let grads = fw.param_grads(&tape.backward(&loss)?);
    let coords: Vec<(ParamId, usize)> = match params {
        Some(p) => p.to_vec(),
        None => grads
            .iter()
            .flat_map(|(id, g)| (0..g.numel()).map(move |j| (*id, j)))
            .collect(),
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::inference();
        let fw = Forward::new(&tape, s, mode, bn_eps);
        Ok(f(&fw)?.value().item())
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    for (id, j) in coords {
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, g)| g.data()[j])
            .ok_or_else(|| Error::Graph(format!("`{}` is not a trainable parameter", store.entry(id).name)))?;
        let orig = store.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + opts.step;
        let plus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig - opts.step;
        let minus = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let e = rel_err(analytic, numeric);
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("gradient check of `{}`[{j}]", store.entry(id).name)));
        }
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = (id.0, j, analytic, numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// `count` distinct random `(parameter, index)` coordinates.
pub fn sample_param_coords(store: &ParamStore<f64>, count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let ids = store.param_ids();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, count.min(total)).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|mut flat| {
            let mut k = 0;
            while flat >= sizes[k] {
                flat -= sizes[k];
                k += 1;
            }
            (ids[k], flat)
        })
        .collect()
}

/// Fixed pseudo-random weights for turning a tensor output into a scalar
/// loss with generic gradients.
pub fn probe(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct-loop "same"-padded strided cross-correlation on `[H, W, Cin]`.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: (usize, usize)) -> Tensor<f64> {
    let &[h, wd, cin] = x.shape() else { panic!("rank-3 input") };
    let &[kh, kw, wcin, cout] = w.shape() else { panic!("rank-4 kernel") };
    assert_eq!(cin, wcin);
    let (oh, pt) = same_padding(h, kh, stride.0);
    let (ow, pl) = same_padding(wd, kw, stride.1);
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    for i in 0..oh {
        for j in 0..ow {
            for o in 0..cout {
                let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                for a in 0..kh {
                    for b in 0..kw {
                        let r = (i * stride.0 + a) as isize - pt as isize;
                        let c = (j * stride.1 + b) as isize - pl as isize;
                        if r < 0 || c < 0 || r >= h as isize || c >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[(r as usize * wd + c as usize) * cin + ci]
                                * w.data()[((a * kw + b) * cin + ci) * cout + o];
                        }
                    }
                }
                out.data_mut()[(i * ow + j) * cout + o] = acc;
            }
        }
    }
    out
}

/// Per-channel batch normalisation with explicit loops.
pub fn batch_norm(
    x: &Tensor<f64>,
    gamma: &Tensor<f64>,
    beta: &Tensor<f64>,
    stats: Option<(&Tensor<f64>, &Tensor<f64>)>,
    eps: f64,
) -> Tensor<f64> {
    let c = *x.shape().last().expect("rank >= 1");
    let rows = x.numel() / c;
    let mut out = x.clone();
    for ch in 0..c {
        let (mean, var) = match stats {
            Some((m, v)) => (m.data()[ch], v.data()[ch]),
            None => {
                let vals: Vec<f64> = (0..rows).map(|r| x.data()[r * c + ch]).collect();
                let mean = vals.iter().sum::<f64>() / rows as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
                (mean, var)
            }
        };
        for r in 0..rows {
            let v = &mut out.data_mut()[r * c + ch];
            *v = gamma.data()[ch] * (*v - mean) / (var + eps).sqrt() + beta.data()[ch];
        }
    }
    out
}

pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Conv block evaluated with the loop references.
pub fn conv_block(store: &ParamStore<f64>, block: &ConvBlock, x: &Tensor<f64>, mode: Mode, eps: f64) -> Tensor<f64> {
    let y = conv2d(x, store.get(block.weight_id()), None, block.stride);
    let (mean, var) = block.running_ids();
    let stats = match mode {
        Mode::Train => None,
        Mode::Infer => Some((store.get(mean), store.get(var))),
    };
    let y = batch_norm(&y, store.get(block.gamma_id()), store.get(block.beta_id()), stats, eps);
    match block.activation {
        Activation::Elu => y.map(elu),
        Activation::Sigmoid => y.map(sigmoid),
    }
}

/// Self-attention on one `[T, F, C]` map computed token by token. The
/// attention matrix is formed entry by entry and the softmax uses the
/// textbook definition.
pub fn self_attention(store: &ParamStore<f64>, attn: &SelfAttention, x: &Tensor<f64>, mode: Mode, eps: f64) -> Tensor<f64> {
    let &[t, f, c] = x.shape() else { panic!("rank-3 input") };
    let h = c / 2;
    let q = conv_block(store, &attn.query, x, mode, eps);
    let k = conv_block(store, &attn.key, x, mode, eps);
    let v = conv_block(store, &attn.value, x, mode, eps);
    // token(n)[d] for the attended axis.
    let (tokens, other) = match attn.axis {
        AttentionAxis::Temporal => (t, f),
        AttentionAxis::Frequency => (f, t),
    };
    let at = |m: &Tensor<f64>, n: usize, o: usize, ch: usize| -> f64 {
        let (ti, fi) = match attn.axis {
            AttentionAxis::Temporal => (n, o),
            AttentionAxis::Frequency => (o, n),
        };
        m.data()[(ti * f + fi) * h + ch]
    };
    let scale = ((h * other) as f64).sqrt();
    let mut sa = Tensor::zeros(&[t, f, h]);
    for n in 0..tokens {
        let mut scores = vec![0.0; tokens];
        for (m, s) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for o in 0..other {
                for ch in 0..h {
                    dot += at(&q, n, o, ch) * at(&k, m, o, ch);
                }
            }
            *s = (dot / scale).exp();
        }
        let total: f64 = scores.iter().sum();
        for o in 0..other {
            for ch in 0..h {
                let mut acc = 0.0;
                for (m, s) in scores.iter().enumerate() {
                    acc += s / total * at(&v, m, o, ch);
                }
                let (ti, fi) = match attn.axis {
                    AttentionAxis::Temporal => (n, o),
                    AttentionAxis::Frequency => (o, n),
                };
                sa.data_mut()[(ti * f + fi) * h + ch] = acc;
            }
        }
    }
    let out = conv_block(store, &attn.out, &sa, mode, eps);
    out.zip_map(x, |a, b| a + b).expect("residual shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Builder;

    #[test]
    fn rel_err_definition() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(rel_err(0.0, 0.0), 0.0);
    }

    #[test]
    fn checker_passes_square() {
        let x = probe(&[3], 1);
        let r = check_gradients(&[x], |v| Ok(v[0].mul(&v[0])?.sum()), &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err < 1e-6);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn loop_conv_matches_gemm_conv() {
        let x = probe(&[5, 7, 3], 2);
        let w = probe(&[3, 3, 3, 4], 3);
        let b = probe(&[4], 4);
        for stride in [(1, 1), (2, 2), (1, 2), (2, 1)] {
            let tape = Tape::inference();
            let y = tape
                .constant(x.clone())
                .conv2d(&tape.constant(w.clone()), Some(&tape.constant(b.clone())), stride)
                .unwrap();
            let r = conv2d(&x, &w, Some(&b), stride);
            assert_eq!(y.shape(), r.shape());
            for (p, q) in y.value().data().iter().zip(r.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loop_attention_matches_tape_attention() {
        for axis in [AttentionAxis::Temporal, AttentionAxis::Frequency] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let a = SelfAttention::new(&mut Builder::new(&mut store, &mut rng), "a", axis, 8).unwrap();
            let x = probe(&[6, 4, 8], 6);
            let tape = Tape::inference();
            let fw = Forward::new(&tape, &store, Mode::Train, 1e-5);
            let y = a.forward(&fw, &tape.constant(x.clone())).unwrap();
            let r = self_attention(&store, &a, &x, Mode::Train, 1e-5);
            for (p, q) in y.value().data().iter().zip(r.data()) {
                assert!((p - q).abs() < 1e-10);
            }
        }
    }
}

//! Finite-difference checks of every differentiable primitive.

use mtfatt::reference::{check_gradients, probe, GradCheckOptions};
use mtfatt::signal::{apply_cirm_var, istft_var, pack_subbands_var, stft, unpack_subbands_var, StftConfig};
use mtfatt::training::{loss_freq_var, loss_time_var};
use mtfatt::{Result, Tensor, Var};

const TOL: f64 = 1e-3;

/// Probe-weighted sum, so every output coordinate contributes a
/// distinct weight.
fn readout<'t>(v: &Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = v.tape().constant(probe(v.shape(), seed ^ 0xa5a5));
    Ok(v.mul(&w)?.sum())
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], samples: Option<usize>, f: F)
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let opts = GradCheckOptions {
        samples_per_input: samples,
        ..GradCheckOptions::default()
    };
    let report = check_gradients(inputs, f, &opts).unwrap();
    assert!(report.max_rel_err < TOL, "{name}: {report:?}");
    assert!(report.checked > 0);
}

#[test]
fn elementwise() {
    let a = probe(&[3, 4], 1);
    let b = probe(&[3, 4], 2);
    check("add", &[a.clone(), b.clone()], None, |x| readout(&x[0].add(&x[1])?, 0));
    check("sub", &[a.clone(), b.clone()], None, |x| readout(&x[0].sub(&x[1])?, 0));
    check("mul", &[a.clone(), b.clone()], None, |x| readout(&x[0].mul(&x[1])?, 0));
    check("scale", &[a.clone()], None, |x| readout(&x[0].scale(-1.7).add_scalar(0.3), 0));
    check("elu", &[a.clone()], None, |x| readout(&x[0].elu(1.0), 0));
    check("tanh", &[a.clone()], None, |x| readout(&x[0].tanh(), 0));
    check("sigmoid", &[a.clone()], None, |x| readout(&x[0].sigmoid(), 0));
    check("abs", &[a.clone()], None, |x| readout(&x[0].abs(), 0));
    check("mean", &[a], None, |x| Ok(x[0].mul(&x[0])?.mean()));
}

#[test]
fn structural() {
    let a = probe(&[2, 3, 4], 3);
    check("reshape", &[a.clone()], None, |x| readout(&x[0].reshape(&[6, 4])?, 1));
    check("permute", &[a.clone()], None, |x| readout(&x[0].permute(&[2, 0, 1])?, 1));
    check("slice", &[a.clone()], None, |x| readout(&x[0].slice(2, 1, 2)?, 1));
    check("concat", &[a.clone(), probe(&[2, 3, 1], 4)], None, |x| {
        readout(&Var::concat(&[x[0].clone(), x[1].clone()], 2)?, 1)
    });
}

#[test]
fn linear_algebra() {
    check("matmul", &[probe(&[3, 4], 5), probe(&[4, 2], 6)], None, |x| readout(&x[0].matmul(&x[1])?, 2));
    check("bmm", &[probe(&[2, 3, 4], 7), probe(&[2, 4, 5], 8)], None, |x| {
        readout(&x[0].bmm(&x[1], false)?, 2)
    });
    check("bmm transposed", &[probe(&[2, 3, 4], 7), probe(&[2, 5, 4], 8)], None, |x| {
        readout(&x[0].bmm(&x[1], true)?, 2)
    });
    check("softmax", &[probe(&[4, 6], 9)], None, |x| readout(&x[0].softmax_rows(0.7)?, 2));
}

#[test]
fn convolutions() {
    let x = probe(&[2, 5, 6, 3], 10);
    for stride in [(1, 1), (2, 2), (1, 2)] {
        check("conv2d", &[x.clone(), probe(&[3, 3, 3, 4], 11), probe(&[4], 12)], Some(40), |v| {
            readout(&v[0].conv2d(&v[1], Some(&v[2]), stride)?, 3)
        });
    }
    for (stride, target) in [((1, 1), (5, 6)), ((2, 2), (10, 11)), ((1, 2), (5, 12))] {
        check("conv2d_transpose", &[x.clone(), probe(&[3, 3, 4, 3], 13), probe(&[4], 14)], Some(40), |v| {
            readout(&v[0].conv2d_transpose(&v[1], Some(&v[2]), stride, target)?, 3)
        });
    }
}

#[test]
fn batch_norm() {
    let x = probe(&[2, 3, 4, 3], 15);
    let gamma = probe(&[3], 16).map(|v| 1.0 + 0.5 * v);
    let beta = probe(&[3], 17);
    check("batch_norm_train", &[x.clone(), gamma.clone(), beta.clone()], None, |v| {
        readout(&v[0].batch_norm_train(&v[1], &v[2], 1e-5)?.0, 4)
    });
    let mean = probe(&[3], 18);
    let var = probe(&[3], 19).map(|v| 1.0 + v.abs());
    check("batch_norm_infer", &[x, gamma, beta], None, |v| {
        readout(&v[0].batch_norm_infer(&v[1], &v[2], &mean, &var, 1e-5)?, 4)
    });
}

#[test]
fn signal_ops() {
    let cfg = StftConfig::new(16, 4, 8000).unwrap();
    let n = 48;
    let frames = n / cfg.hop;
    let (re, im) = (probe(&[frames, 8, 2], 20), probe(&[frames, 8, 2], 21));
    check("istft", &[re.clone(), im.clone()], Some(60), |v| readout(&istft_var(&v[0], &v[1], cfg, n)?, 5));
    check("pack", &[re.clone(), im.clone()], None, |v| readout(&pack_subbands_var(&v[0], &v[1], 4)?, 5));
    check("unpack", &[probe(&[frames, 2, 16], 22)], None, |v| {
        let (r, i) = unpack_subbands_var(&v[0], 4)?;
        Ok(readout(&r, 5)?.add(&readout(&i, 6)?)?)
    });
    let mix = stft(&probe(&[n, 2], 23), cfg).unwrap();
    check("cirm", &[re.clone(), im.clone()], None, |v| {
        let (r, i) = apply_cirm_var(&mix, &v[0], &v[1])?;
        Ok(readout(&r, 5)?.add(&readout(&i, 6)?)?)
    });
}

#[test]
fn losses() {
    let s = probe(&[32, 2], 24);
    check("time loss", &[probe(&[32, 2], 25)], None, |v| {
        loss_time_var(&v[0].tape().constant(s.clone()), &v[0])
    });
    let (re, im) = (probe(&[4, 8, 2], 26), probe(&[4, 8, 2], 27));
    check("freq loss", &[probe(&[4, 8, 2], 28), probe(&[4, 8, 2], 29)], None, |v| {
        let t = v[0].tape();
        loss_freq_var(&t.constant(re.clone()), &t.constant(im.clone()), &v[0], &v[1])
    });
}

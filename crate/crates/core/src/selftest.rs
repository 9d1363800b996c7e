//! Fast invariant suite: gradient checks, shape ledger, attention oracles
//! and STFT round trip.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionAxis, RaBlock, RaBlockSpec, SegmentedAttention, SelfAttention, Separator};
use crate::error::{Error, Result};
use crate::layers::{
    Activation, Builder, ConvBlock, ConvTranspose, Decoder, DecoderStageSpec, Dense, DenseNetBlock, Encoder,
    EncoderStageSpec, EntryKind, FeatureShape, Forward, GatedBlock, LayerKind, LayerSpec, Mode, ParamId, ParamStore,
};
use crate::model::{ModelConfig, SeparationModel};
use crate::reference::{self, check_param_gradients, probe, sample_param_coords, GradCheckOptions};
use crate::signal::{pack_subbands_var, stft, istft, unpack_subbands_var, StftConfig};
use crate::tensor::{Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-5;
pub const STFT_TOL: f64 = 1e-4;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Doubles the softmax temperature of the attention under test.
    pub corrupt_softmax_scale: bool,
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

fn group(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> GroupResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    GroupResult {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

pub fn run_selftest(opts: SelftestOptions) -> Vec<GroupResult> {
    vec![
        group("gradient checks", || {
            let mut worst = layer_gradient_checks()?;
            worst.push(("end-to-end desk model".into(), end_to_end_gradient_check(50, 0)?));
            let (name, err) = worst
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .cloned()
                .expect("non-empty");
            Ok((
                worst.iter().all(|(_, e)| *e < GRAD_TOL),
                format!("{} checks, worst rel err {err:.2e} ({name})", worst.len()),
            ))
        }),
        group("shape ledger", || {
            shape_ledger_check()?;
            Ok((true, "full-scale stages match, bottleneck 120x256x64, mask 240x1024x16".into()))
        }),
        group("attention oracles", || {
            let err = attention_oracle_check(20, 7, opts.corrupt_softmax_scale)?;
            let (p1, p2) = segmented_composition_check(3)?;
            Ok((
                err < ORACLE_TOL && p1 && p2,
                format!("max abs err {err:.2e}, P=1 bitwise {p1}, P=2 bitwise {p2}"),
            ))
        }),
        group("stft round trip", || {
            let err = stft_round_trip_check(100, 11)?;
            let exact = pack_round_trip_check(5)?;
            Ok((
                err < STFT_TOL && exact,
                format!("max interior rel err {err:.2e}, pack/unpack exact {exact}"),
            ))
        }),
    ]
}

struct Harness {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
    inputs: Vec<ParamId>,
}

impl Harness {
    fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            inputs: Vec::new(),
        }
    }

    /// Registers an input tensor as a trainable entry so that its gradient
    /// is checked together with the layer parameters.
    fn input(&mut self, shape: &[usize]) -> Result<ParamId> {
        let seed = self.rng.gen();
        let id = self
            .store
            .insert(&format!("input{}", self.inputs.len()), EntryKind::Param, probe(shape, seed))?;
        self.inputs.push(id);
        Ok(id)
    }

    fn builder(&mut self) -> Builder<'_, f64> {
        Builder::new(&mut self.store, &mut self.rng)
    }

    /// Randomises batch-norm running statistics and affine terms away from
    /// their identity initialisation.
    fn perturb_buffers(&mut self) {
        for i in 0..self.store.len() {
            let name = self.store.entries()[i].name.clone();
            let value = self.store.entries()[i].value.clone();
            let range = if name.ends_with("running_var") || name.ends_with("gamma") {
                0.5..1.5
            } else if name.ends_with("running_mean") || name.ends_with("beta") {
                -0.3..0.3
            } else {
                continue;
            };
            let rng = &mut self.rng;
            let new = Tensor::from_fn(value.shape(), |_| rng.gen_range(range.clone()));
            self.store.set(&name, new).expect("same shape");
        }
    }

    fn check<F>(&self, mode: Mode, coords: usize, f: F) -> Result<f64>
    where
        F: for<'t, 's> Fn(&Forward<'t, 's, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let sel = sample_param_coords(&self.store, coords, 1);
        let inputs = self.inputs.clone();
        let report = check_param_gradients(
            &self.store,
            mode,
            BN_EPS,
            Some(&sel),
            |fw| {
                let xs: Vec<_> = inputs.iter().map(|&id| fw.param(id).clone()).collect();
                f(fw, &xs)
            },
            &GradCheckOptions::default(),
        )?;
        Ok(report.max_rel_err)
    }
}

/// Probe-weighted sum, giving every output element a distinct weight.
fn readout<'t>(y: &Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = y.tape().constant(probe(y.shape(), seed));
    Ok(y.mul(&w)?.sum())
}

/// Finite-difference checks of every layer type in isolation, returning
/// the worst relative error per layer.
pub fn layer_gradient_checks() -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    const COORDS: usize = 60;

    for (name, act, kernel, stride, mode) in [
        ("conv block elu 3x3 s(2,2) train", Activation::Elu, (3, 3), (2, 2), Mode::Train),
        ("conv block elu 3x3 s(1,2) infer", Activation::Elu, (3, 3), (1, 2), Mode::Infer),
        ("conv block sigmoid 1x1 train", Activation::Sigmoid, (1, 1), (1, 1), Mode::Train),
    ] {
        let mut h = Harness::new(1);
        h.input(&[5, 6, 3])?;
        let block = ConvBlock::new(&mut h.builder(), "c", 3, 4, kernel, stride, act)?;
        h.perturb_buffers();
        out.push((name.to_string(), h.check(mode, COORDS, |fw, x| readout(&block.forward(fw, &x[0])?, 2))?));
    }

    let mut h = Harness::new(2);
    h.input(&[2, 4, 5, 3])?;
    let dense = Dense::new(&mut h.builder(), "d", 3, 4)?;
    out.push(("dense".into(), h.check(Mode::Train, COORDS, |fw, x| readout(&dense.forward(fw, &x[0])?, 3))?));

    for stride in [(1, 1), (1, 2), (2, 2)] {
        let mut h = Harness::new(3);
        h.input(&[3, 4, 3])?;
        let spec = LayerSpec::new(LayerKind::Conv2dTranspose, 2, (3, 3), stride);
        let up = ConvTranspose::from_spec(&mut h.builder(), "u", 3, &spec)?;
        let target = (3 * stride.0, 4 * stride.1);
        out.push((
            format!("conv transpose s{stride:?}"),
            h.check(Mode::Train, COORDS, |fw, x| readout(&up.forward(fw, &x[0], target)?, 4))?,
        ));
    }

    let mut h = Harness::new(4);
    h.input(&[4, 4, 2])?;
    let spec = LayerSpec::new(LayerKind::DenseNet, 2, (3, 3), (1, 1));
    let dn = DenseNetBlock::from_spec(&mut h.builder(), "dn", 2, &spec)?;
    out.push(("densenet".into(), h.check(Mode::Train, COORDS, |fw, x| readout(&dn.forward(fw, &x[0])?, 5))?));

    let mut h = Harness::new(5);
    h.input(&[2, 3, 3])?;
    h.input(&[4, 6, 2])?;
    let up = LayerSpec::new(LayerKind::Conv2dTranspose, 3, (3, 3), (2, 2));
    let fuse = LayerSpec::new(LayerKind::Conv2dBlock, 3, (1, 1), (1, 1));
    let gated = GatedBlock::new(&mut h.builder(), "g", 3, 2, &up, &fuse)?;
    out.push((
        "gated".into(),
        h.check(Mode::Train, COORDS, |fw, x| readout(&gated.forward(fw, &x[0], &x[1])?, 6))?,
    ));

    let mut h = Harness::new(6);
    h.input(&[4, 8, 4])?;
    let enc_specs: Vec<_> = [(1, 1), (2, 2), (1, 2)]
        .into_iter()
        .map(|s| EncoderStageSpec {
            dense: LayerSpec::new(LayerKind::DenseNet, 2, (3, 3), (1, 1)),
            conv: LayerSpec::new(LayerKind::Conv2dBlock, 2, (3, 3), s),
        })
        .collect();
    let dec_specs: Vec<_> = [(1, 2), (2, 2), (1, 1)]
        .into_iter()
        .map(|s| DecoderStageSpec {
            up: LayerSpec::new(LayerKind::Conv2dTranspose, 2, (3, 3), s),
            fuse: LayerSpec::new(LayerKind::Conv2dBlock, 2, (1, 1), (1, 1)),
            dense: LayerSpec::new(LayerKind::DenseNet, 2, (3, 3), (1, 1)),
        })
        .collect();
    let head = LayerSpec::new(LayerKind::Conv2dBlock, 4, (1, 1), (1, 1));
    let mut b = h.builder();
    let encoder = Encoder::new(&mut b, 4, &enc_specs)?;
    let decoder = Decoder::new(&mut b, 2, &[2, 2, 2], &dec_specs, &head, 2.0)?;
    out.push((
        "encoder + decoder".into(),
        h.check(Mode::Train, COORDS, |fw, x| {
            let e = encoder.forward(fw, &x[0])?;
            readout(&decoder.forward(fw, &e.bottleneck, &e.skips)?, 7)
        })?,
    ));

    for axis in [AttentionAxis::Temporal, AttentionAxis::Frequency] {
        for (segments, mode) in [(1, Mode::Train), (2, Mode::Infer)] {
            let mut h = Harness::new(7);
            h.input(&[4, 4, 4])?;
            let attention = SelfAttention::new(&mut h.builder(), "a", axis, 4)?;
            h.perturb_buffers();
            let seg = SegmentedAttention { attention, segments };
            out.push((
                format!("{axis:?} attention P={segments} {mode:?}"),
                h.check(mode, COORDS, |fw, x| readout(&seg.forward(fw, &x[0])?, 8))?,
            ));
        }
    }

    for (temporal, frequency) in [(false, false), (true, true)] {
        let mut h = Harness::new(8);
        h.input(&[4, 4, 4])?;
        let spec = RaBlockSpec {
            channels: 4,
            segments: 2,
            temporal,
            frequency,
        };
        let ra = RaBlock::new(&mut h.builder(), "ra", spec)?;
        out.push((
            format!("ra block paths={}", spec.paths()),
            h.check(Mode::Train, COORDS, |fw, x| readout(&ra.forward(fw, &x[0])?, 9))?,
        ));
    }

    let mut h = Harness::new(9);
    h.input(&[4, 4, 4])?;
    let spec = |p| RaBlockSpec {
        channels: 4,
        segments: p,
        temporal: true,
        frequency: true,
    };
    let sep = Separator::new(&mut h.builder(), &[vec![spec(1), spec(2)], vec![spec(2), spec(1)]])?;
    out.push((
        "multi-scale separator".into(),
        h.check(Mode::Train, COORDS, |fw, x| readout(&sep.forward(fw, &x[0])?, 10))?,
    ));

    Ok(out)
}

/// End-to-end check of `count` random parameters of the desk-scale model
/// in 64-bit, through STFT features, masking and the inverse STFT.
pub fn end_to_end_gradient_check(count: usize, seed: u64) -> Result<f64> {
    let config = ModelConfig {
        seed,
        ..ModelConfig::desk_scale()
    };
    let model = SeparationModel::<f64>::build(config.clone())?;
    let n = config.segment_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mix = Tensor::from_fn(&[n, 2], |i| {
        let t = (i / 2) as f64;
        0.3 * (0.05 * t).sin() + 0.2 * (0.31 * t + (i % 2) as f64).sin() + rng.gen_range(-0.05..0.05)
    });
    let spec = stft(&mix, config.stft())?;
    let coords = sample_param_coords(model.store(), count, seed);
    let report = check_param_gradients(
        model.store(),
        Mode::Train,
        config.bn_eps,
        Some(&coords),
        |fw| {
            let out = model.forward_with(fw, &spec, n)?;
            readout(&out.estimate, 12)?.add(&readout(&out.mask, 13)?)
        },
        &GradCheckOptions::default(),
    )?;
    Ok(report.max_rel_err)
}

/// `(label, shape)` of every stage of the full-scale model, derived from
/// the layer table strides.
pub fn expected_full_scale_ledger() -> Vec<(&'static str, FeatureShape)> {
    vec![
        ("input", [240, 1024, 16]),
        ("EB1.dense", [240, 1024, 32]),
        ("EB1", [240, 1024, 32]),
        ("EB2.dense", [240, 1024, 64]),
        ("EB2", [120, 512, 64]),
        ("EB3.dense", [120, 512, 64]),
        ("EB3", [120, 256, 64]),
        ("separator", [120, 256, 64]),
        ("DB1", [120, 512, 64]),
        ("DB2", [240, 1024, 64]),
        ("DB3", [240, 1024, 32]),
        ("mask", [240, 1024, 16]),
    ]
}

pub fn shape_ledger_check() -> Result<()> {
    let model = SeparationModel::<f32>::build(ModelConfig::full_scale())?;
    let ledger = model.shape_ledger()?;
    let expected = expected_full_scale_ledger();
    if ledger.len() != expected.len() {
        return Err(Error::shape(format!("ledger has {} rows, expected {}", ledger.len(), expected.len())));
    }
    for ((label, shape), (el, es)) in ledger.iter().zip(&expected) {
        if label != el || shape != es {
            return Err(Error::shape(format!("{label} {shape:?}, expected {el} {es:?}")));
        }
    }
    Ok(())
}

/// Max abs difference between tape attention and the loop reference over
/// `n` random inputs per axis. `fault` corrupts the softmax temperature of
/// the attention under test.
pub fn attention_oracle_check(n: usize, seed: u64, fault: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..n {
        for axis in [AttentionAxis::Temporal, AttentionAxis::Frequency] {
            let t = rng.gen_range(2..7);
            let f = rng.gen_range(2..7);
            let c = 2 * rng.gen_range(1..5);
            let mut store = ParamStore::<f64>::new();
            let mut attn = SelfAttention::new(&mut Builder::new(&mut store, &mut rng), "a", axis, c)?;
            if fault {
                attn.scale_factor = 2.0;
            }
            let x = probe(&[t, f, c], rng.gen()).map(|v| 2.0 * v);
            let mode = if i % 2 == 0 { Mode::Train } else { Mode::Infer };
            let tape = Tape::inference();
            let fw = Forward::new(&tape, &store, mode, BN_EPS);
            let y = attn.forward(&fw, &tape.constant(x.clone()))?;
            let r = reference::self_attention(&store, &attn, &x, mode, BN_EPS);
            for (a, b) in y.value().data().iter().zip(r.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Bitwise checks of segmented attention: `P = 1` against the plain
/// attention and `P = 2` against manual slice, attend and concat.
pub fn segmented_composition_check(seed: u64) -> Result<(bool, bool)> {
    let mut p1 = true;
    let mut p2 = true;
    for axis in [AttentionAxis::Temporal, AttentionAxis::Frequency] {
        let mut h = Harness::new(seed);
        let attention = SelfAttention::new(&mut h.builder(), "a", axis, 6)?;
        h.perturb_buffers();
        let store = h.store.cast::<f32>();
        let x = probe(&[2, 6, 8, 6], seed).cast::<f32>();
        let tape = Tape::inference();
        // Inference mode: training-mode projections share batch statistics
        // across segments by design.
        let fw = Forward::new(&tape, &store, Mode::Infer, BN_EPS);
        let xv = tape.constant(x);
        let plain = attention.forward(&fw, &xv)?;
        let one = SegmentedAttention {
            attention: attention.clone(),
            segments: 1,
        }
        .forward(&fw, &xv)?;
        p1 &= plain.value() == one.value();
        let two = SegmentedAttention {
            attention: attention.clone(),
            segments: 2,
        }
        .forward(&fw, &xv)?;
        let axis_idx = match axis {
            AttentionAxis::Temporal => 2,
            AttentionAxis::Frequency => 1,
        };
        let width = xv.shape()[axis_idx] / 2;
        let parts = (0..2)
            .map(|i| attention.forward(&fw, &xv.slice(axis_idx, i * width, width)?))
            .collect::<Result<Vec<_>>>()?;
        p2 &= Var::concat(&parts, axis_idx)?.value() == two.value();
    }
    Ok((p1, p2))
}

/// Stereo sum of random sinusoids below 0.4 cycles per sample.
pub fn band_limited_signal(n: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let partials: Vec<(f64, f64, f64)> = (0..16)
        .map(|_| {
            (
                rng.gen_range(0.001..0.4) * std::f64::consts::TAU,
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    Tensor::from_fn(&[n, 2], |i| {
        let t = (i / 2) as f64;
        let ch = (i % 2) as f64;
        partials.iter().map(|&(w, a, p)| a * (w * t + p + ch).sin()).sum()
    })
}

/// Worst interior relative error of `istft(stft(x))` over `n` random
/// signals, using the desk and full-scale geometries and one in between.
/// Error is dominated by leakage into the dropped Nyquist bin, which
/// grows quickly below 256-point frames.
pub fn stft_round_trip_check(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs = [
        ModelConfig::desk_scale().stft(),
        StftConfig::new(1024, 256, 16000)?,
        ModelConfig::full_scale().stft(),
    ];
    let mut worst = 0.0f64;
    for i in 0..n {
        let cfg = configs[i % configs.len()];
        let len = cfg.hop * rng.gen_range(24..40) + rng.gen_range(0..cfg.hop);
        let x = band_limited_signal(len, &mut rng);
        let y = istft(&stft(&x, cfg)?, len)?;
        let range = cfg.interior(len);
        let (mut err, mut energy) = (0.0, 0.0);
        for s in range {
            for ch in 0..2 {
                let a = x.data()[s * 2 + ch];
                let b = y.data()[s * 2 + ch];
                err += (a - b) * (a - b);
                energy += a * a;
            }
        }
        worst = worst.max((err / energy).sqrt());
    }
    Ok(worst)
}

/// Subband pack followed by unpack restores random spectra exactly.
pub fn pack_round_trip_check(seed: u64) -> Result<bool> {
    let mut ok = true;
    for (k, shape) in [(1, [3, 8, 2]), (2, [3, 8, 2]), (4, [5, 16, 2]), (8, [2, 16, 2])] {
        let re = probe(&shape, seed).cast::<f32>();
        let im = probe(&shape, seed + 1).cast::<f32>();
        let tape = Tape::inference();
        let packed = pack_subbands_var(&tape.constant(re.clone()), &tape.constant(im.clone()), k)?;
        ok &= packed.shape() == [shape[0], shape[1] / k, 4 * k];
        let (r2, i2) = unpack_subbands_var(&packed, k)?;
        ok &= *r2.value() == re && *i2.value() == im;
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_fault_is_detected() {
        assert!(attention_oracle_check(4, 1, false).unwrap() < ORACLE_TOL);
        assert!(attention_oracle_check(4, 1, true).unwrap() > 1e-3);
    }

    #[test]
    fn stft_and_pack_round_trip() {
        assert!(stft_round_trip_check(6, 2).unwrap() < STFT_TOL);
        assert!(pack_round_trip_check(1).unwrap());
    }

    #[test]
    fn full_scale_ledger() {
        shape_ledger_check().unwrap();
    }
}

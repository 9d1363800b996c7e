//! STFT front end, subband packing and complex ratio masking.
//!
//! Audio is `[N, C]` (interleaved channels) or `[B, N, C]`. Spectrograms are
//! stored as separate real and imaginary planes of shape `[T, F, C]` (or
//! `[B, T, F, C]`) with `F = n_fft / 2`: the Nyquist bin is dropped on
//! analysis and resynthesised as zero.
//!
//! Framing: the signal is reflect-padded by `n_fft / 2` on the left and
//! `n_fft / 2 - hop` on the right, which yields exactly `N / hop` frames when
//! `hop` divides `N`, each frame centred on a multiple of `hop`.

use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Lowest window-sum accepted during overlap-add normalisation.
pub const MIN_WINDOW_SUM: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        let cfg = Self {
            n_fft,
            hop,
            sample_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 4 || self.n_fft % 2 != 0 {
            return Err(Error::config(format!("n_fft must be even and >= 4, got {}", self.n_fft)));
        }
        if self.hop == 0 || self.n_fft % self.hop != 0 || 2 * self.hop > self.n_fft {
            return Err(Error::config(format!(
                "hop {} must divide n_fft {} and be at most n_fft / 2",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2
    }

    pub fn pad_left(&self) -> usize {
        self.n_fft / 2
    }

    pub fn pad_right(&self) -> usize {
        self.n_fft / 2 - self.hop
    }

    /// Frames produced for `n` input samples.
    pub fn frames_for(&self, n: usize) -> usize {
        (n + self.pad_left() + self.pad_right() - self.n_fft) / self.hop + 1
    }

    /// Sample range unaffected by edge padding: the first and last `n_fft`
    /// samples of a signal of length `n` are excluded.
    pub fn interior(&self, n: usize) -> std::ops::Range<usize> {
        self.n_fft.min(n)..n.saturating_sub(self.n_fft).max(self.n_fft.min(n))
    }

    /// Samples corresponding to `frames` frames (exact inverse of
    /// [`StftConfig::frames_for`] on multiples of `hop`).
    pub fn samples_for(&self, frames: usize) -> usize {
        frames * self.hop
    }
}

/// Periodic Hann window.
pub fn hann_window<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::lit(0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Complex STFT as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram<T: Scalar = f32> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
    pub config: StftConfig,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>, config: StftConfig) -> Result<Self> {
        re.expect_same_shape(&im, "spectrogram planes")?;
        let r = re.rank();
        if !(r == 3 || r == 4) || re.shape()[r - 2] != config.bins() {
            return Err(Error::shape(format!(
                "spectrogram planes must be [.., T, {}, C], got {:?}",
                config.bins(),
                re.shape()
            )));
        }
        Ok(Self { re, im, config })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            re: Tensor::zeros(self.re.shape()),
            im: Tensor::zeros(self.im.shape()),
            config: self.config,
        }
    }

    pub fn frames(&self) -> usize {
        self.re.shape()[self.re.rank() - 3]
    }

    pub fn bins(&self) -> usize {
        self.re.shape()[self.re.rank() - 2]
    }

    pub fn channels(&self) -> usize {
        self.re.shape()[self.re.rank() - 1]
    }
}

/// Channel-wise subband packing `[.., T, F/K, 4K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandFeature<T: Scalar = f32> {
    pub data: Tensor<T>,
    pub k: usize,
}

/// Splits `[.., N, C]` into (batch, n, channels, had_batch).
fn audio_dims(shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match *shape {
        [n, c] => Ok((1, n, c, false)),
        [b, n, c] => Ok((b, n, c, true)),
        _ => Err(Error::shape(format!("audio must be [N, C] or [B, N, C], got {shape:?}"))),
    }
}

fn spec_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [t, f, c] => Ok((1, t, f, c, false)),
        [b, t, f, c] => Ok((b, t, f, c, true)),
        _ => Err(Error::shape(format!(
            "spectrogram must be [T, F, C] or [B, T, F, C], got {shape:?}"
        ))),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// FFT plans and window for one `StftConfig`.
struct Plans<T: Scalar> {
    forward: Arc<dyn RealToComplex<T>>,
    inverse: Arc<dyn ComplexToReal<T>>,
    window: Vec<T>,
}

impl<T: Scalar> Plans<T> {
    fn new(n_fft: usize) -> Self {
        let mut planner = RealFftPlanner::<T>::new();
        Self {
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
            window: hann_window(n_fft),
        }
    }
}

/// Short-time Fourier transform of `[N, C]` or `[B, N, C]` audio.
pub fn stft<T: Scalar>(audio: &Tensor<T>, cfg: StftConfig) -> Result<ComplexSpectrogram<T>> {
    cfg.validate()?;
    let (batch, n, channels, had_batch) = audio_dims(audio.shape())?;
    if n <= cfg.pad_left() {
        return Err(Error::InvalidInput(format!(
            "audio of {n} samples is too short for {}-sample reflect padding",
            cfg.pad_left()
        )));
    }
    let frames = cfg.frames_for(n);
    let bins = cfg.bins();
    let plans = Plans::<T>::new(cfg.n_fft);
    let mut re = vec![T::zero(); batch * frames * bins * channels];
    let mut im = re.clone();
    let mut frame = plans.forward.make_input_vec();
    let mut spectrum = plans.forward.make_output_vec();
    let pad = cfg.pad_left() as isize;
    let x = audio.data();
    for b in 0..batch {
        for c in 0..channels {
            for t in 0..frames {
                let start = (t * cfg.hop) as isize - pad;
                for (j, v) in frame.iter_mut().enumerate() {
                    let idx = reflect(start + j as isize, n);
                    *v = x[(b * n + idx) * channels + c] * plans.window[j];
                }
                plans
                    .forward
                    .process(&mut frame, &mut spectrum)
                    .expect("buffer sizes come from the plan");
                let base = ((b * frames + t) * bins) * channels + c;
                for (k, z) in spectrum[..bins].iter().enumerate() {
                    re[base + k * channels] = z.re;
                    im[base + k * channels] = z.im;
                }
            }
        }
    }
    let shape = if had_batch {
        vec![batch, frames, bins, channels]
    } else {
        vec![frames, bins, channels]
    };
    ComplexSpectrogram::new(
        Tensor::from_parts(shape.clone(), re),
        Tensor::from_parts(shape, im),
        cfg,
    )
}

/// Geometry shared by the inverse transform and its adjoint.
struct Synthesis<T: Scalar> {
    cfg: StftConfig,
    batch: usize,
    frames: usize,
    channels: usize,
    n_samples: usize,
    had_batch: bool,
    /// Sum of squared windows over the padded timeline.
    window_sum: Vec<T>,
    plans: Plans<T>,
}

impl<T: Scalar> Synthesis<T> {
    fn new(shape: &[usize], cfg: StftConfig, n_samples: usize) -> Result<Self> {
        cfg.validate()?;
        let (batch, frames, bins, channels, had_batch) = spec_dims(shape)?;
        if bins != cfg.bins() {
            return Err(Error::shape(format!(
                "istft: spectrogram has {bins} bins, configuration expects {}",
                cfg.bins()
            )));
        }
        let padded = (frames - 1) * cfg.hop + cfg.n_fft;
        if n_samples == 0 || cfg.pad_left() + n_samples > padded {
            return Err(Error::shape(format!(
                "istft: {frames} frames cannot produce {n_samples} samples"
            )));
        }
        let plans = Plans::<T>::new(cfg.n_fft);
        let mut window_sum = vec![T::zero(); padded];
        for t in 0..frames {
            for (j, &w) in plans.window.iter().enumerate() {
                window_sum[t * cfg.hop + j] += w * w;
            }
        }
        let floor = T::lit(MIN_WINDOW_SUM);
        let range = cfg.pad_left()..cfg.pad_left() + n_samples;
        if let Some(pos) = window_sum[range.clone()].iter().position(|&s| s < floor) {
            return Err(Error::config(format!(
                "istft: window sum falls below {MIN_WINDOW_SUM} at sample {pos}"
            )));
        }
        Ok(Self {
            cfg,
            batch,
            frames,
            channels,
            n_samples,
            had_batch,
            window_sum,
            plans,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.had_batch {
            vec![self.batch, self.n_samples, self.channels]
        } else {
            vec![self.n_samples, self.channels]
        }
    }

    fn bins(&self) -> usize {
        self.cfg.bins()
    }

    fn synthesize(&self, re: &[T], im: &[T]) -> Vec<T> {
        let (bins, ch, hop, n_fft) = (self.bins(), self.channels, self.cfg.hop, self.cfg.n_fft);
        let scale = T::one() / T::lit(n_fft as f64);
        let mut spectrum = self.plans.inverse.make_input_vec();
        let mut frame = self.plans.inverse.make_output_vec();
        let mut out = vec![T::zero(); self.batch * self.n_samples * ch];
        let mut timeline = vec![T::zero(); self.window_sum.len()];
        for b in 0..self.batch {
            for c in 0..ch {
                timeline.fill(T::zero());
                for t in 0..self.frames {
                    let base = ((b * self.frames + t) * bins) * ch + c;
                    for (k, z) in spectrum[..bins].iter_mut().enumerate() {
                        *z = Complex::new(re[base + k * ch], im[base + k * ch]);
                    }
                    spectrum[0].im = T::zero();
                    spectrum[bins] = Complex::new(T::zero(), T::zero());
                    self.plans
                        .inverse
                        .process(&mut spectrum, &mut frame)
                        .expect("DC and Nyquist imaginary parts are zero");
                    for (j, (&v, &w)) in frame.iter().zip(&self.plans.window).enumerate() {
                        timeline[t * hop + j] += v * scale * w;
                    }
                }
                let pad = self.cfg.pad_left();
                for i in 0..self.n_samples {
                    out[(b * self.n_samples + i) * ch + c] = timeline[pad + i] / self.window_sum[pad + i];
                }
            }
        }
        out
    }

    /// Adjoint of [`Synthesis::synthesize`] with respect to both planes.
    fn adjoint(&self, grad: &[T]) -> (Vec<T>, Vec<T>) {
        let (bins, ch, hop) = (self.bins(), self.channels, self.cfg.hop);
        let n_fft = self.cfg.n_fft;
        let scale = T::one() / T::lit(n_fft as f64);
        let two = T::lit(2.0);
        let mut d_re = vec![T::zero(); self.batch * self.frames * bins * ch];
        let mut d_im = d_re.clone();
        let mut timeline = vec![T::zero(); self.window_sum.len()];
        let mut frame = self.plans.forward.make_input_vec();
        let mut spectrum = self.plans.forward.make_output_vec();
        let pad = self.cfg.pad_left();
        for b in 0..self.batch {
            for c in 0..ch {
                timeline.fill(T::zero());
                for i in 0..self.n_samples {
                    timeline[pad + i] = grad[(b * self.n_samples + i) * ch + c] / self.window_sum[pad + i];
                }
                for t in 0..self.frames {
                    for (j, v) in frame.iter_mut().enumerate() {
                        *v = timeline[t * hop + j] * self.plans.window[j];
                    }
                    self.plans
                        .forward
                        .process(&mut frame, &mut spectrum)
                        .expect("buffer sizes come from the plan");
                    let base = ((b * self.frames + t) * bins) * ch + c;
                    for (k, z) in spectrum[..bins].iter().enumerate() {
                        let weight = if k == 0 { scale } else { two * scale };
                        d_re[base + k * ch] = z.re * weight;
                        d_im[base + k * ch] = if k == 0 { T::zero() } else { z.im * weight };
                    }
                }
            }
        }
        (d_re, d_im)
    }
}

/// Inverse STFT by windowed overlap-add, normalised by the window sum.
pub fn istft<T: Scalar>(spec: &ComplexSpectrogram<T>, n_samples: usize) -> Result<Tensor<T>> {
    spec.re.expect_same_shape(&spec.im, "istft")?;
    let syn = Synthesis::new(spec.re.shape(), spec.config, n_samples)?;
    let out = syn.synthesize(spec.re.data(), spec.im.data());
    Ok(Tensor::from_parts(syn.out_shape(), out))
}

/// Differentiable inverse STFT of tracked real/imaginary planes.
pub fn istft_var<'t, T: Scalar>(
    re: &Var<'t, T>,
    im: &Var<'t, T>,
    cfg: StftConfig,
    n_samples: usize,
) -> Result<Var<'t, T>> {
    re.value().expect_same_shape(im.value(), "istft")?;
    let syn = Synthesis::new(re.shape(), cfg, n_samples)?;
    let out = Tensor::from_parts(syn.out_shape(), syn.synthesize(re.value().data(), im.value().data()));
    let shape = re.shape().to_vec();
    Ok(re.tape().record(out, &[re, im], move |g, needs| {
        let (d_re, d_im) = syn.adjoint(g.data());
        vec![
            needs[0].then(|| Tensor::from_parts(shape.clone(), d_re)),
            needs[1].then(|| Tensor::from_parts(shape.clone(), d_im)),
        ]
    }))
}

fn check_k(bins: usize, k: usize) -> Result<()> {
    if k == 0 || bins % k != 0 {
        return Err(Error::config(format!("subband count {k} does not divide {bins} bins")));
    }
    Ok(())
}

/// Packs stereo real/imaginary planes into `[.., T, F/K, 4K]`.
///
/// Channel `4 * band + p` holds plane `p` of band `band`, with planes ordered
/// `[re L, re R, im L, im R]` (real parts of both channels, then imaginary).
pub fn pack_subbands_var<'t, T: Scalar>(re: &Var<'t, T>, im: &Var<'t, T>, k: usize) -> Result<Var<'t, T>> {
    re.value().expect_same_shape(im.value(), "pack_subbands")?;
    let (batch, t, f, c, had_batch) = spec_dims(re.shape())?;
    if c != 2 {
        return Err(Error::shape(format!("pack_subbands expects stereo planes, got {c} channels")));
    }
    check_k(f, k)?;
    let planes = Var::concat(&[re.clone(), im.clone()], re.shape().len() - 1)?;
    let packed = planes
        .reshape(&[batch, t, k, f / k, 4])?
        .permute(&[0, 1, 3, 2, 4])?;
    if had_batch {
        packed.reshape(&[batch, t, f / k, 4 * k])
    } else {
        packed.reshape(&[t, f / k, 4 * k])
    }
}

/// Inverse of [`pack_subbands_var`]: returns `(re, im)` stereo planes.
pub fn unpack_subbands_var<'t, T: Scalar>(
    packed: &Var<'t, T>,
    k: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (batch, t, fk, ch, had_batch) = spec_dims(packed.shape())?;
    if k == 0 || ch != 4 * k {
        return Err(Error::shape(format!(
            "unpack: {ch} channels is inconsistent with K = {k} (expected {})",
            4 * k
        )));
    }
    let f = fk * k;
    let planes = packed
        .reshape(&[batch, t, fk, k, 4])?
        .permute(&[0, 1, 3, 2, 4])?;
    let planes = if had_batch {
        planes.reshape(&[batch, t, f, 4])?
    } else {
        planes.reshape(&[t, f, 4])?
    };
    let axis = planes.shape().len() - 1;
    Ok((planes.slice(axis, 0, 2)?, planes.slice(axis, 2, 2)?))
}

pub fn pack_subbands<T: Scalar>(spec: &ComplexSpectrogram<T>, k: usize) -> Result<SubbandFeature<T>> {
    check_k(spec.bins(), k)?;
    let tape = crate::tensor::Tape::inference();
    let packed = pack_subbands_var(&tape.constant(spec.re.clone()), &tape.constant(spec.im.clone()), k)?;
    Ok(SubbandFeature {
        data: packed.value().clone(),
        k,
    })
}

/// Reassembles a fullband complex stereo mask from its subband packing.
pub fn unpack_mask<T: Scalar>(mask: &SubbandFeature<T>, config: StftConfig) -> Result<ComplexSpectrogram<T>> {
    let tape = crate::tensor::Tape::inference();
    let (re, im) = unpack_subbands_var(&tape.constant(mask.data.clone()), mask.k)?;
    ComplexSpectrogram::new(re.value().clone(), im.value().clone(), config)
}

/// `Ŝ = M ⊙ Y` elementwise in the complex plane.
pub fn apply_cirm<T: Scalar>(
    mix: &ComplexSpectrogram<T>,
    mask: &ComplexSpectrogram<T>,
) -> Result<ComplexSpectrogram<T>> {
    mix.re.expect_same_shape(&mask.re, "apply_cirm")?;
    mix.im.expect_same_shape(&mask.im, "apply_cirm")?;
    let re = Tensor::from_fn(mix.re.shape(), |i| {
        mask.re.data()[i] * mix.re.data()[i] - mask.im.data()[i] * mix.im.data()[i]
    });
    let im = Tensor::from_fn(mix.re.shape(), |i| {
        mask.re.data()[i] * mix.im.data()[i] + mask.im.data()[i] * mix.re.data()[i]
    });
    ComplexSpectrogram::new(re, im, mix.config)
}

/// Differentiable complex masking of a constant mixture spectrogram.
pub fn apply_cirm_var<'t, T: Scalar>(
    mix: &ComplexSpectrogram<T>,
    mask_re: &Var<'t, T>,
    mask_im: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tape = mask_re.tape();
    let y_re = tape.constant(mix.re.clone());
    let y_im = tape.constant(mix.im.clone());
    let re = mask_re.mul(&y_re)?.sub(&mask_im.mul(&y_im)?)?;
    let im = mask_re.mul(&y_im)?.add(&mask_im.mul(&y_re)?)?;
    Ok((re, im))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};

    fn cfg() -> StftConfig {
        StftConfig::new(64, 8, 8000).unwrap()
    }

    /// Random multi-sine stereo signal kept below 80% of Nyquist.
    fn bandlimited(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let partials: Vec<(f64, f64, f64, usize)> = (0..12)
            .map(|_| {
                (
                    rng.gen_range(0.0..0.4),
                    rng.gen_range(0.05..0.5),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0..2),
                )
            })
            .collect();
        Tensor::from_fn(&[n, 2], |i| {
            let (s, c) = (i / 2, i % 2);
            partials
                .iter()
                .filter(|p| p.3 == c)
                .map(|&(f, a, ph, _)| a * (2.0 * PI * f * s as f64 + ph).sin())
                .sum()
        })
    }

    #[test]
    fn frame_count_contract() {
        let full = StftConfig::new(8192, 1024, 44100).unwrap();
        let n = full.samples_for(240);
        assert_eq!(full.frames_for(n), 240);
        assert_eq!(full.bins(), 4096);
        assert!((n as f64 / 44100.0 - 5.57).abs() < 0.01);
        assert!(StftConfig::new(64, 7, 8000).is_err());
        assert!(StftConfig::new(64, 64, 8000).is_err());
    }

    #[test]
    fn round_trip_bandlimited() {
        let c = cfg();
        let x = bandlimited(c.samples_for(40), 11);
        let spec = stft(&x, c).unwrap();
        assert_eq!(spec.re.shape(), &[40, 32, 2]);
        let y = istft(&spec, x.shape()[0]).unwrap();
        let r = c.interior(x.shape()[0]);
        let (xi, yi) = (&x.data()[2 * r.start..2 * r.end], &y.data()[2 * r.start..2 * r.end]);
        let err: f64 = xi.iter().zip(yi).map(|(a, b)| (a - b).powi(2)).sum();
        let energy: f64 = xi.iter().map(|a| a * a).sum();
        assert!((err / energy).sqrt() < 1e-4, "{}", (err / energy).sqrt());
    }

    #[test]
    fn zero_in_zero_out() {
        let c = cfg();
        let x = Tensor::<f32>::zeros(&[c.samples_for(10), 2]);
        let spec = stft(&x, c).unwrap();
        assert!(spec.re.data().iter().chain(spec.im.data()).all(|&v| v == 0.0));
        assert!(istft(&spec, x.shape()[0]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_audio_is_rejected() {
        let x = Tensor::<f32>::zeros(&[32, 2]);
        assert!(matches!(stft(&x, cfg()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bin_centred_sinusoid_is_localised() {
        let c = StftConfig::new(256, 32, 8000).unwrap();
        let bin = 20;
        let n = c.samples_for(32);
        let x = Tensor::<f64>::from_fn(&[n, 2], |i| {
            (2.0 * PI * bin as f64 * (i / 2) as f64 / c.n_fft as f64).cos()
        });
        let spec = stft(&x, c).unwrap();
        let (frames, bins) = (spec.frames(), spec.bins());
        for t in 4..frames - 4 {
            let energy = |k: usize| {
                let i = (t * bins + k) * 2;
                spec.re.data()[i].powi(2) + spec.im.data()[i].powi(2)
            };
            let total: f64 = (0..bins).map(energy).sum();
            let near: f64 = (bin - 1..=bin + 1).map(energy).sum();
            assert!(near / total > 0.99);
        }
    }

    #[test]
    fn istft_rejects_unreachable_length() {
        let c = cfg();
        let x = bandlimited(c.samples_for(8), 2);
        let spec = stft(&x, c).unwrap();
        assert!(istft(&spec, c.samples_for(8) + c.n_fft).is_err());
    }

    #[test]
    fn pack_k1_is_real_then_imag() {
        let c = cfg();
        let spec = stft(&bandlimited(c.samples_for(6), 5), c).unwrap();
        let packed = pack_subbands(&spec, 1).unwrap();
        assert_eq!(packed.data.shape(), &[6, 32, 4]);
        for (i, ch) in packed.data.data().chunks(4).enumerate() {
            assert_eq!(ch[0], spec.re.data()[2 * i]);
            assert_eq!(ch[1], spec.re.data()[2 * i + 1]);
            assert_eq!(ch[2], spec.im.data()[2 * i]);
            assert_eq!(ch[3], spec.im.data()[2 * i + 1]);
        }
    }

    #[test]
    fn pack_full_scale_shape() {
        let c = StftConfig::new(8192, 1024, 44100).unwrap();
        let spec = ComplexSpectrogram::new(Tensor::<f32>::zeros(&[2, 4096, 2]), Tensor::zeros(&[2, 4096, 2]), c)
            .unwrap();
        assert_eq!(pack_subbands(&spec, 4).unwrap().data.shape(), &[2, 1024, 16]);
        assert!(pack_subbands(&spec, 3).is_err());
    }

    #[test]
    fn single_entry_lands_at_predicted_position() {
        let c = cfg();
        let (t, f, k) = (3, 32, 4);
        let width = f / k;
        for band in 0..k {
            for fi in [0, width - 1] {
                for plane in 0..4 {
                    let mut data = Tensor::<f64>::zeros(&[t, width, 4 * k]);
                    let row = 1;
                    data.data_mut()[(row * width + fi) * 4 * k + band * 4 + plane] = 1.0;
                    let m = unpack_mask(&SubbandFeature { data, k }, c).unwrap();
                    let bin = band * width + fi;
                    let (target, ch) = match plane {
                        0 => (&m.re, 0),
                        1 => (&m.re, 1),
                        2 => (&m.im, 0),
                        _ => (&m.im, 1),
                    };
                    let idx = (row * f + bin) * 2 + ch;
                    assert_eq!(target.data()[idx], 1.0);
                    assert_eq!(m.re.sum() + m.im.sum(), 1.0);
                }
            }
        }
    }

    #[test]
    fn unit_mask_from_constant_channels() {
        let c = cfg();
        let k = 2;
        let data = Tensor::<f32>::from_fn(&[4, 16, 8], |i| if (i % 8) % 4 < 2 { 1.0 } else { 0.0 });
        let m = unpack_mask(&SubbandFeature { data, k }, c).unwrap();
        assert!(m.re.data().iter().all(|&v| v == 1.0));
        assert!(m.im.data().iter().all(|&v| v == 0.0));
        let bad = SubbandFeature {
            data: Tensor::<f32>::zeros(&[4, 16, 6]),
            k,
        };
        assert!(unpack_mask(&bad, c).is_err());
    }

    #[test]
    fn cirm_identity_and_null() {
        let c = cfg();
        let mix = stft(&bandlimited(c.samples_for(6), 9), c).unwrap();
        let one = ComplexSpectrogram::new(Tensor::ones(mix.re.shape()), Tensor::zeros(mix.re.shape()), c).unwrap();
        assert_eq!(apply_cirm(&mix, &one).unwrap(), mix);
        let zero = mix.zeros_like();
        let out = apply_cirm(&mix, &zero).unwrap();
        assert!(out.re.data().iter().chain(out.im.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn cirm_var_matches_value_path() {
        let c = cfg();
        let mix = stft(&bandlimited(c.samples_for(6), 4), c).unwrap();
        let mask = stft(&bandlimited(c.samples_for(6), 8), c).unwrap();
        let expected = apply_cirm(&mix, &mask).unwrap();
        let tape = Tape::new();
        let (re, im) =
            apply_cirm_var(&mix, &tape.constant(mask.re.clone()), &tape.constant(mask.im.clone())).unwrap();
        for (a, b) in re.value().data().iter().zip(expected.re.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in im.value().data().iter().zip(expected.im.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

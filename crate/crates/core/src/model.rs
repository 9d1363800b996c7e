//! End-to-end separation model: STFT, subband packing, encoder, separator,
//! decoder, complex masking and inverse STFT.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attention::{RaBlockSpec, Separator};
use crate::error::{Error, Result};
use crate::layers::{
    Builder, Decoder, DecoderStageSpec, Encoder, EncoderStageSpec, FeatureShape, Forward, LayerKind, LayerSpec, Mode,
    ParamStore,
};
use crate::signal::{
    apply_cirm_var, istft_var, pack_subbands_var, stft, unpack_subbands_var, ComplexSpectrogram, StftConfig,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Separator variants of the attention ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Residual conv stacks only.
    NoAtt,
    /// Frequency attention only.
    FAtt,
    /// Temporal attention only.
    TAtt,
    /// Temporal and frequency attention, single scale.
    TFAtt,
    /// Two-branch multi-scale temporal-frequency attention.
    MTFAtt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::NoAtt, Variant::FAtt, Variant::TAtt, Variant::TFAtt, Variant::MTFAtt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoAtt => "noAtt",
            Variant::FAtt => "FAtt",
            Variant::TAtt => "TAtt",
            Variant::TFAtt => "TFAtt",
            Variant::MTFAtt => "MTFAtt",
        }
    }

    fn paths(self) -> (bool, bool) {
        match self {
            Variant::NoAtt => (false, false),
            Variant::FAtt => (false, true),
            Variant::TAtt => (true, false),
            Variant::TFAtt | Variant::MTFAtt => (true, true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::config(format!("unknown variant `{s}`; valid variants: {}", names.join(", ")))
            })
    }
}

pub const ENCODER_STRIDES: [(usize, usize); 3] = [(1, 1), (2, 2), (1, 2)];
pub const DECODER_STRIDES: [(usize, usize); 3] = [(1, 2), (2, 2), (1, 1)];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    /// Number of subbands `K`.
    pub subbands: usize,
    /// STFT frames per training segment `T`.
    pub segment_frames: usize,
    pub encoder_channels: [usize; 3],
    pub decoder_channels: [usize; 3],
    pub variant: Variant,
    /// RA blocks of the single-scale separators.
    pub ra_blocks: usize,
    /// Segment counts along the increasing branch of the multi-scale
    /// separator; the other branch runs them in reverse.
    pub p_schedule: Vec<usize>,
    pub mask_expansion: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// 44.1 kHz, 8192-point STFT, 240-frame segments, channels 32/64/64.
    pub fn full_scale() -> Self {
        Self {
            sample_rate: 44100,
            n_fft: 8192,
            hop: 1024,
            subbands: 4,
            segment_frames: 240,
            encoder_channels: [32, 64, 64],
            decoder_channels: [64, 64, 32],
            variant: Variant::MTFAtt,
            ra_blocks: 4,
            p_schedule: vec![1, 2, 4, 8],
            mask_expansion: 2.0,
            bn_eps: 1e-5,
            bn_momentum: 0.99,
            seed: 0,
        }
    }

    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk_scale() -> Self {
        Self {
            sample_rate: 4000,
            n_fft: 512,
            hop: 64,
            segment_frames: 64,
            encoder_channels: [8, 16, 16],
            decoder_channels: [16, 16, 8],
            // Few optimizer steps per epoch: running statistics must track
            // the weights closely.
            bn_momentum: 0.9,
            ..Self::full_scale()
        }
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            n_fft: self.n_fft,
            hop: self.hop,
            sample_rate: self.sample_rate,
        }
    }

    pub fn segment_samples(&self) -> usize {
        self.stft().samples_for(self.segment_frames)
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2
    }

    /// `[T, F/K, 4K]`.
    pub fn input_shape(&self) -> FeatureShape {
        [self.segment_frames, self.bins() / self.subbands, 4 * self.subbands]
    }

    /// Separator feature map `[T', F', C]`.
    pub fn bottleneck_shape(&self) -> FeatureShape {
        let [mut t, mut f, _] = self.input_shape();
        for (st, sf) in ENCODER_STRIDES {
            t = t.div_ceil(st);
            f = f.div_ceil(sf);
        }
        [t, f, self.encoder_channels[2]]
    }

    pub fn validate(&self) -> Result<()> {
        self.stft().validate()?;
        let bins = self.bins();
        if self.subbands == 0 || bins % self.subbands != 0 {
            return Err(Error::config(format!("K = {} must divide n_fft / 2 = {bins}", self.subbands)));
        }
        let [t, f, _] = self.input_shape();
        if t % 2 != 0 || f % 4 != 0 {
            return Err(Error::config(format!(
                "encoder strides need T even and F/K divisible by 4, got T = {t}, F/K = {f}"
            )));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.encoder_channels[2] % 2 != 0 {
            return Err(Error::config("separator channel count must be even"));
        }
        if !(self.mask_expansion > 0.0) {
            return Err(Error::config("mask expansion must be positive"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::config("batch-norm eps must be > 0 and momentum in [0, 1)"));
        }
        let [tb, fb, _] = self.bottleneck_shape();
        match self.variant {
            Variant::MTFAtt => {
                if self.p_schedule.is_empty() {
                    return Err(Error::config("multi-scale separator needs a P schedule"));
                }
                for &p in &self.p_schedule {
                    if p == 0 || tb % p != 0 || fb % p != 0 {
                        return Err(Error::config(format!(
                            "P = {p} must divide the separator map {tb}x{fb}"
                        )));
                    }
                }
            }
            _ => {
                if self.ra_blocks == 0 {
                    return Err(Error::config("single-scale separator needs at least one RA block"));
                }
            }
        }
        Ok(())
    }

    pub fn encoder_stages(&self) -> [EncoderStageSpec; 3] {
        std::array::from_fn(|i| {
            let c = self.encoder_channels[i];
            EncoderStageSpec {
                dense: LayerSpec::new(LayerKind::DenseNet, c, (3, 3), (1, 1)),
                conv: LayerSpec::new(LayerKind::Conv2dBlock, c, (3, 3), ENCODER_STRIDES[i]),
            }
        })
    }

    pub fn decoder_stages(&self) -> [DecoderStageSpec; 3] {
        std::array::from_fn(|i| {
            let c = self.decoder_channels[i];
            DecoderStageSpec {
                up: LayerSpec::new(LayerKind::Conv2dTranspose, c, (3, 3), DECODER_STRIDES[i]),
                fuse: LayerSpec::new(LayerKind::Conv2dBlock, c, (1, 1), (1, 1)),
                dense: LayerSpec::new(LayerKind::DenseNet, c, (3, 3), (1, 1)),
            }
        })
    }

    pub fn head(&self) -> LayerSpec {
        LayerSpec::new(LayerKind::Conv2dBlock, 4 * self.subbands, (1, 1), (1, 1))
    }

    /// Encoder/decoder rows in table order, labelled by stage.
    pub fn layer_table(&self) -> Vec<(String, LayerSpec)> {
        let mut rows = Vec::new();
        for (i, s) in self.encoder_stages().iter().enumerate() {
            rows.push((format!("EB{}", i + 1), s.dense));
            rows.push((format!("EB{}", i + 1), s.conv));
        }
        for (i, s) in self.decoder_stages().iter().enumerate() {
            rows.push((format!("DB{}", i + 1), s.up));
            rows.push((format!("DB{}", i + 1), s.fuse));
            rows.push((format!("DB{}", i + 1), s.dense));
        }
        rows.push(("head".to_string(), self.head()));
        rows
    }

    pub fn separator_chains(&self) -> Vec<Vec<RaBlockSpec>> {
        let channels = self.encoder_channels[2];
        let (temporal, frequency) = self.variant.paths();
        let spec = |p| RaBlockSpec {
            channels,
            segments: p,
            temporal,
            frequency,
        };
        match self.variant {
            Variant::MTFAtt => vec![
                self.p_schedule.iter().map(|&p| spec(p)).collect(),
                self.p_schedule.iter().rev().map(|&p| spec(p)).collect(),
            ],
            _ => vec![vec![spec(1); self.ra_blocks]],
        }
    }

    /// Canonical text of every architectural field (the seed is excluded).
    pub fn canonical(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "sample_rate={}\nn_fft={}\nhop={}\nsubbands={}\nsegment_frames={}\nencoder_channels={}\n\
             decoder_channels={}\nvariant={}\nra_blocks={}\np_schedule={}\nmask_expansion={:?}\nbn_eps={:?}\n\
             bn_momentum={:?}\n",
            self.sample_rate,
            self.n_fft,
            self.hop,
            self.subbands,
            self.segment_frames,
            list(&self.encoder_channels),
            list(&self.decoder_channels),
            self.variant,
            self.ra_blocks,
            list(&self.p_schedule),
            self.mask_expansion,
            self.bn_eps,
            self.bn_momentum,
        )
    }

    /// SHA-256 of [`ModelConfig::canonical`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    /// Trainable scalar count from the configuration alone.
    pub fn parameter_count(&self) -> usize {
        // conv block: k*k*cin*cout weights + BN gamma/beta.
        let block = |k: usize, cin: usize, cout: usize| k * k * cin * cout + 2 * cout;
        let dense = |cin: usize, g: usize| (0..4).map(|i| block(3, cin + i * g, g)).sum::<usize>();
        let mut total = 0;
        let mut c = 4 * self.subbands;
        let mut skips = Vec::new();
        for &e in &self.encoder_channels {
            total += dense(c, e) + block(3, e, e);
            skips.push(e);
            c = e;
        }
        for &d in &self.decoder_channels {
            let skip = skips.pop().expect("three skips");
            total += 9 * c * d + d; // transposed conv with bias
            total += block(3, d, skip) + block(1, skip, skip); // gate
            total += block(1, d + skip, d); // fuse
            total += dense(d, d);
            c = d;
        }
        let k4 = 4 * self.subbands;
        total += block(1, c, k4) + k4 * k4 + k4;

        let ch = self.encoder_channels[2];
        let h = ch / 2;
        let attention = 3 * block(1, ch, h) + block(1, h, ch);
        let chains = self.separator_chains();
        for chain in &chains {
            for spec in chain {
                total += 4 * block(3, ch, ch);
                total += (spec.paths() - 1) * attention;
                total += block(1, spec.paths() * ch, ch);
            }
        }
        if chains.len() > 1 {
            total += block(1, chains.len() * ch, ch);
        }
        total
    }
}

/// Waveform estimate, masked spectrum and packed mask of one pass.
pub struct ForwardOutput<'t, T: Scalar> {
    /// `[.., N, 2]`.
    pub estimate: Var<'t, T>,
    pub spec_re: Var<'t, T>,
    pub spec_im: Var<'t, T>,
    /// Packed subband mask `[.., T, F/K, 4K]`.
    pub mask: Var<'t, T>,
}

/// A dedicated separation network for one target stem.
#[derive(Clone, Debug)]
pub struct SeparationModel<T: Scalar = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    separator: Separator,
    decoder: Decoder,
}

impl<T: Scalar> SeparationModel<T> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = Encoder::new(&mut b, 4 * config.subbands, &config.encoder_stages())?;
        let separator = Separator::new(&mut b, &config.separator_chains())?;
        let decoder = Decoder::new(
            &mut b,
            config.encoder_channels[2],
            &config.encoder_channels,
            &config.decoder_stages(),
            &config.head(),
            config.mask_expansion,
        )?;
        let model = Self {
            config,
            store,
            encoder,
            separator,
            decoder,
        };
        model.separator.check(model.config.bottleneck_shape())?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn separator(&self) -> &Separator {
        &self.separator
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn cast<U: Scalar>(&self) -> SeparationModel<U> {
        SeparationModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            separator: self.separator.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn forward_context<'t, 's>(&'s self, tape: &'t Tape<T>, mode: Mode) -> Forward<'t, 's, T> {
        Forward::new(tape, &self.store, mode, self.config.bn_eps)
    }

    fn check_mix(&self, mix: &Tensor<T>) -> Result<()> {
        let n = self.config.segment_samples();
        match *mix.shape() {
            [len, 2] | [_, len, 2] if len == n => Ok(()),
            _ => Err(Error::shape(format!(
                "mixture must be [{n}, 2] or [B, {n}, 2] (one segment), got {:?}",
                mix.shape()
            ))),
        }
    }

    /// Decoder mask for a packed mixture feature `[.., T, F/K, 4K]`.
    pub fn mask<'t>(&self, fw: &Forward<'t, '_, T>, packed: &Var<'t, T>) -> Result<Var<'t, T>> {
        let enc = self.encoder.forward(fw, packed)?;
        let sep = self.separator.forward(fw, &enc.bottleneck)?;
        self.decoder.forward(fw, &sep, &enc.skips)
    }

    /// Full pass on a mixture segment and its precomputed spectrogram.
    pub fn forward_with<'t>(
        &self,
        fw: &Forward<'t, '_, T>,
        mix_spec: &ComplexSpectrogram<T>,
        n_samples: usize,
    ) -> Result<ForwardOutput<'t, T>> {
        let tape = fw.tape();
        let packed = pack_subbands_var(
            &tape.constant(mix_spec.re.clone()),
            &tape.constant(mix_spec.im.clone()),
            self.config.subbands,
        )?;
        let mask = self.mask(fw, &packed)?;
        let (m_re, m_im) = unpack_subbands_var(&mask, self.config.subbands)?;
        let (spec_re, spec_im) = apply_cirm_var(mix_spec, &m_re, &m_im)?;
        let estimate = istft_var(&spec_re, &spec_im, mix_spec.config, n_samples)?;
        Ok(ForwardOutput {
            estimate,
            spec_re,
            spec_im,
            mask,
        })
    }

    /// Inference on one segment (`[N, 2]` or a batch `[B, N, 2]`):
    /// returns the waveform estimate and the fullband complex mask.
    pub fn forward(&self, mix: &Tensor<T>) -> Result<(Tensor<T>, ComplexSpectrogram<T>)> {
        self.check_mix(mix)?;
        let spec = stft(mix, self.config.stft())?;
        let tape = Tape::inference();
        let fw = self.forward_context(&tape, Mode::Infer);
        let out = self.forward_with(&fw, &spec, self.config.segment_samples())?;
        let (m_re, m_im) = unpack_subbands_var(&out.mask, self.config.subbands)?;
        let mask = ComplexSpectrogram::new(m_re.value().clone(), m_im.value().clone(), spec.config)?;
        Ok((out.estimate.value().clone(), mask))
    }

    /// Separates audio of any length `[N, 2]` by 50%-overlapping segments
    /// joined with a triangular crossfade. Audio shorter than one segment
    /// is zero-padded (with a warning) and the result trimmed.
    pub fn separate_long(&self, audio: &Tensor<T>) -> Result<Tensor<T>> {
        let &[n, 2] = audio.shape() else {
            return Err(Error::shape(format!("audio must be [N, 2], got {:?}", audio.shape())));
        };
        let len = self.config.segment_samples();
        if n < len {
            log::warn!("input of {n} samples is shorter than one {len}-sample segment; zero-padding");
            let mut padded = vec![T::zero(); len * 2];
            padded[..n * 2].copy_from_slice(audio.data());
            let (y, _) = self.forward(&Tensor::new(&[len, 2], padded)?)?;
            return Tensor::new(&[n, 2], y.data()[..n * 2].to_vec());
        }
        if n == len {
            return Ok(self.forward(audio)?.0);
        }
        let starts = segment_starts(n, len);
        let outputs = starts
            .par_iter()
            .map(|&s| {
                let seg = Tensor::new(&[len, 2], audio.data()[s * 2..(s + len) * 2].to_vec())?;
                Ok(self.forward(&seg)?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut acc = vec![T::zero(); n * 2];
        let mut norm = vec![T::zero(); n];
        for (idx, (&s, y)) in starts.iter().zip(&outputs).enumerate() {
            let first = idx == 0;
            let last = idx + 1 == starts.len();
            for i in 0..len {
                let w = T::lit(crossfade(i, len, first, last));
                norm[s + i] += w;
                acc[(s + i) * 2] += w * y.data()[i * 2];
                acc[(s + i) * 2 + 1] += w * y.data()[i * 2 + 1];
            }
        }
        for (i, &w) in norm.iter().enumerate() {
            acc[i * 2] /= w;
            acc[i * 2 + 1] /= w;
        }
        Tensor::new(&[n, 2], acc)
    }

    /// Symbolic shape propagation through every stage, labelled.
    pub fn shape_ledger(&self) -> Result<Vec<(String, FeatureShape)>> {
        let input = self.config.input_shape();
        let mut ledger = vec![("input".to_string(), input)];
        let (stages, skips) = self.encoder.shapes(input)?;
        for (i, (s, k)) in stages.iter().zip(&skips).enumerate() {
            ledger.push((format!("EB{}.dense", i + 1), *k));
            ledger.push((format!("EB{}", i + 1), *s));
        }
        let bottleneck = *stages.last().expect("three stages");
        self.separator.check(bottleneck)?;
        ledger.push(("separator".to_string(), bottleneck));
        let dec = self.decoder.shapes(bottleneck, &skips)?;
        for (i, s) in dec.iter().enumerate() {
            let label = if i < 3 { format!("DB{}", i + 1) } else { "mask".to_string() };
            ledger.push((label, *s));
        }
        Ok(ledger)
    }
}

/// Segment offsets covering `[0, n)` with hop `len / 2`; the last segment
/// is aligned to the end.
pub fn segment_starts(n: usize, len: usize) -> Vec<usize> {
    if n <= len {
        return vec![0];
    }
    let hop = (len / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * hop).take_while(|&s| s + len < n).collect();
    starts.push(n - len);
    starts
}

/// Triangular crossfade weight; the outer edges of the first and last
/// segments are held at full weight.
fn crossfade(i: usize, len: usize, first: bool, last: bool) -> f64 {
    let half = len as f64 / 2.0;
    let pos = i as f64 + 0.5;
    if (first && pos < half) || (last && pos >= half) {
        return 1.0;
    }
    (pos.min(len as f64 - pos) / half).max(1e-3)
}

/// Anything that maps a stereo mixture to a stereo stem estimate.
pub trait StemEstimator: Sync {
    fn estimate(&self, mix: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl StemEstimator for SeparationModel<f32> {
    fn estimate(&self, mix: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.separate_long(mix)
    }
}

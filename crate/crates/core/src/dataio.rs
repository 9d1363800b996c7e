//! WAV ingestion, dataset layout, segmenting, synthetic songs and
//! checkpoint persistence.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::model::{ModelConfig, SeparationModel};
use crate::signal::{stft, StftConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stem {
    Vocals,
    Bass,
    Drums,
    Other,
}

impl Stem {
    pub const ALL: [Stem; 4] = [Stem::Vocals, Stem::Bass, Stem::Drums, Stem::Other];

    pub fn name(self) -> &'static str {
        match self {
            Stem::Vocals => "vocals",
            Stem::Bass => "bass",
            Stem::Drums => "drums",
            Stem::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stem::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stem `{s}`; valid stems: vocals, bass, drums, other")))
    }
}

fn wav_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads a PCM16 or float32 WAV file as `[N, 2]` samples in `[-1, 1]`.
/// Mono files are duplicated to both channels.
pub fn read_wav(path: &Path) -> Result<(Tensor<f32>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => wav_error(path, format!("malformed RIFF/WAVE header: {msg}")),
        hound::Error::Unsupported => wav_error(path, "unsupported codec in `fmt ` chunk"),
        other => wav_error(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(wav_error(
            path,
            format!("`fmt ` chunk declares {} channels; only mono and stereo are supported", spec.channels),
        ));
    }
    let samples: std::result::Result<Vec<f32>, hound::Error> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect(),
        (hound::SampleFormat::Float, 32) => reader.into_samples::<f32>().collect(),
        (format, bits) => {
            return Err(wav_error(
                path,
                format!("unsupported `fmt ` chunk: {bits}-bit {format:?}; expected 16-bit PCM or 32-bit float"),
            ))
        }
    };
    let samples = samples.map_err(|e| wav_error(path, format!("bad `data` chunk: {e}")))?;
    let data = if spec.channels == 1 {
        samples.iter().flat_map(|&s| [s, s]).collect()
    } else {
        samples
    };
    let n = data.len() / 2;
    Ok((Tensor::new(&[n, 2], data)?, spec.sample_rate))
}

fn stereo_frames(audio: &Tensor<f32>) -> Result<usize> {
    match *audio.shape() {
        [n, 2] => Ok(n),
        _ => Err(Error::shape(format!("audio must be [N, 2], got {:?}", audio.shape()))),
    }
}

/// Writes `[N, 2]` samples as a 32-bit float stereo WAV.
pub fn write_wav(path: &Path, audio: &Tensor<f32>, sample_rate: u32) -> Result<()> {
    write_wav_as(path, audio, sample_rate, hound::SampleFormat::Float)
}

/// Writes `[N, 2]` samples as 16-bit PCM, clipping to full scale.
pub fn write_wav_pcm16(path: &Path, audio: &Tensor<f32>, sample_rate: u32) -> Result<()> {
    write_wav_as(path, audio, sample_rate, hound::SampleFormat::Int)
}

fn write_wav_as(path: &Path, audio: &Tensor<f32>, sample_rate: u32, format: hound::SampleFormat) -> Result<()> {
    stereo_frames(audio)?;
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate,
        bits_per_sample: if format == hound::SampleFormat::Float { 32 } else { 16 },
        sample_format: format,
    };
    let err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_error(path, other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in audio.data() {
        match format {
            hound::SampleFormat::Float => w.write_sample(s),
            hound::SampleFormat::Int => w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
        }
        .map_err(err)?;
    }
    w.finalize().map_err(err)
}

/// One song: the mixture and its four stems, all `[N, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StemSet {
    pub name: String,
    pub sample_rate: u32,
    pub mixture: Tensor<f32>,
    /// Indexed by [`Stem::index`].
    pub stems: [Tensor<f32>; 4],
}

/// Relative tolerance of the mixture-consistency check on ingest.
pub const MIXTURE_TOLERANCE: f64 = 1e-3;

impl StemSet {
    pub fn new(name: impl Into<String>, sample_rate: u32, mixture: Tensor<f32>, stems: [Tensor<f32>; 4]) -> Result<Self> {
        let name = name.into();
        let n = stereo_frames(&mixture)?;
        for (stem, t) in Stem::ALL.iter().zip(&stems) {
            if stereo_frames(t)? != n {
                return Err(Error::Dataset(format!(
                    "song `{name}`: {stem} has {} samples, mixture has {n}",
                    t.shape()[0]
                )));
            }
        }
        let set = Self {
            name,
            sample_rate,
            mixture,
            stems,
        };
        let err = set.mixture_error();
        if err > MIXTURE_TOLERANCE {
            log::warn!("song `{}`: mixture differs from the sum of stems by {err:.2e} (relative)", set.name);
        }
        Ok(set)
    }

    /// Builds the mixture as the exact sum of the stems.
    pub fn from_stems(name: impl Into<String>, sample_rate: u32, stems: [Tensor<f32>; 4]) -> Result<Self> {
        let mixture = sum_stems(&stems)?;
        Self::new(name, sample_rate, mixture, stems)
    }

    pub fn len(&self) -> usize {
        self.mixture.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stem(&self, stem: Stem) -> &Tensor<f32> {
        &self.stems[stem.index()]
    }

    /// `||mix - sum(stems)|| / ||mix||`.
    pub fn mixture_error(&self) -> f64 {
        let mut err = 0.0f64;
        let mut energy = 0.0f64;
        for i in 0..self.mixture.numel() {
            let m = self.mixture.data()[i] as f64;
            let s: f64 = self.stems.iter().map(|t| t.data()[i] as f64).sum();
            err += (m - s) * (m - s);
            energy += m * m;
        }
        if energy == 0.0 {
            return if err == 0.0 { 0.0 } else { f64::INFINITY };
        }
        (err / energy).sqrt()
    }
}

pub fn sum_stems(stems: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let (first, rest) = stems.split_first().ok_or_else(|| Error::InvalidInput("no stems to sum".into()))?;
    let mut acc = first.clone();
    for s in rest {
        acc = acc.zip_map(s, |a, b| a + b)?;
    }
    Ok(acc)
}

pub const MIXTURE_FILE: &str = "mixture.wav";

/// Loads `mixture.wav` and the four stem files from a song directory.
pub fn load_song(dir: &Path) -> Result<StemSet> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("song directory {} does not exist", dir.display())));
    }
    let (mixture, sr) = read_wav(&dir.join(MIXTURE_FILE))?;
    let mut stems = Vec::with_capacity(4);
    for stem in Stem::ALL {
        let path = dir.join(format!("{stem}.wav"));
        let (audio, rate) = read_wav(&path)?;
        if rate != sr {
            return Err(wav_error(&path, format!("sample rate {rate} differs from mixture rate {sr}")));
        }
        stems.push(audio);
    }
    let stems: [Tensor<f32>; 4] = stems.try_into().expect("four stems");
    let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    StemSet::new(name, sr, mixture, stems)
}

/// Writes a song directory in the layout [`load_song`] reads.
pub fn save_song(dir: &Path, set: &StemSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_wav(&dir.join(MIXTURE_FILE), &set.mixture, set.sample_rate)?;
    for stem in Stem::ALL {
        write_wav(&dir.join(format!("{stem}.wav")), set.stem(stem), set.sample_rate)?;
    }
    Ok(())
}

/// Parses a split manifest (`<split>\t<song-dir>` per line). Relative song
/// directories are resolved against `root`.
pub fn read_manifest(path: &Path, root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (split, dir) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!("{}:{}: expected `<split>\\t<song-dir>`", path.display(), lineno + 1))
        })?;
        out.push((split.trim().to_string(), root.join(dir.trim())));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[(String, PathBuf)]) -> Result<()> {
    let text: String = entries
        .iter()
        .map(|(split, dir)| format!("{split}\t{}\n", dir.display()))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every song of one split, checking the sample rate.
pub fn load_split(manifest: &[(String, PathBuf)], split: &str, sample_rate: u32) -> Result<Vec<StemSet>> {
    let mut songs = Vec::new();
    for (_, dir) in manifest.iter().filter(|(s, _)| s == split) {
        let song = load_song(dir)?;
        if song.sample_rate != sample_rate {
            return Err(Error::Dataset(format!(
                "{} is sampled at {} Hz, the model expects {sample_rate} Hz",
                dir.display(),
                song.sample_rate
            )));
        }
        songs.push(song);
    }
    if songs.is_empty() {
        return Err(Error::Dataset(format!("split `{split}` is empty")));
    }
    Ok(songs)
}

/// A training segment: `len` samples of song `song` from `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentIndex {
    pub song: usize,
    pub start: usize,
    pub len: usize,
}

/// Hop-aligned segments of `segment_frames` frames advancing by
/// `shift_frames`. A song shorter than one segment yields a single segment
/// that [`extract_segment`] zero-pads.
pub fn segment(
    song: usize,
    set: &StemSet,
    segment_frames: usize,
    shift_frames: usize,
    stft: StftConfig,
) -> Result<Vec<SegmentIndex>> {
    if segment_frames == 0 || shift_frames == 0 {
        return Err(Error::config("segment and shift lengths must be positive"));
    }
    let len = stft.samples_for(segment_frames);
    let shift = stft.samples_for(shift_frames);
    let n = set.len();
    if n < len {
        log::warn!("song `{}` has {n} samples, shorter than one {len}-sample segment; padding", set.name);
        return Ok(vec![SegmentIndex { song, start: 0, len }]);
    }
    Ok((0..)
        .map(|i| i * shift)
        .take_while(|&s| s + len <= n)
        .map(|start| SegmentIndex { song, start, len })
        .collect())
}

/// Segments of every song in order.
pub fn segment_all(
    songs: &[StemSet],
    segment_frames: usize,
    shift_frames: usize,
    stft: StftConfig,
) -> Result<Vec<SegmentIndex>> {
    let mut out = Vec::new();
    for (i, s) in songs.iter().enumerate() {
        out.extend(segment(i, s, segment_frames, shift_frames, stft)?);
    }
    Ok(out)
}

fn slice_padded(audio: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let n = audio.shape()[0];
    let mut data = vec![0.0; len * 2];
    let end = (start + len).min(n);
    if start < end {
        data[..(end - start) * 2].copy_from_slice(&audio.data()[start * 2..end * 2]);
    }
    Tensor::new(&[len, 2], data).expect("stereo segment")
}

/// The four stem segments of an index, zero-padded past the song end.
pub fn extract_segment(songs: &[StemSet], idx: SegmentIndex) -> Result<[Tensor<f32>; 4]> {
    let set = songs
        .get(idx.song)
        .ok_or_else(|| Error::Dataset(format!("segment refers to song {} of {}", idx.song, songs.len())))?;
    Ok(std::array::from_fn(|i| slice_padded(&set.stems[i], idx.start, idx.len)))
}

/// Frequency bands of the synthetic stems in Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub sample_rate: u32,
    /// `(low, high)` per stem, indexed by [`Stem::index`].
    pub bands: [(f64, f64); 4],
    /// Distance kept between generated partials and the band edges.
    pub margin: f64,
}

impl SynthSpec {
    /// Disjoint bands below 2 kHz: bass, vocals, other and drums from
    /// bottom to top.
    pub fn disjoint(sample_rate: u32) -> Self {
        let s = sample_rate as f64 / 4000.0;
        Self {
            sample_rate,
            bands: [
                (300.0 * s, 700.0 * s),
                (40.0 * s, 250.0 * s),
                (1300.0 * s, 1800.0 * s),
                (800.0 * s, 1200.0 * s),
            ],
            margin: 30.0 * s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        for (stem, &(lo, hi)) in Stem::ALL.iter().zip(&self.bands) {
            if !(lo >= 0.0 && lo + 2.0 * self.margin < hi && hi <= nyquist) {
                return Err(Error::config(format!(
                    "{stem} band {lo}..{hi} Hz is empty after the {} Hz margin or exceeds Nyquist {nyquist} Hz",
                    self.margin
                )));
            }
        }
        Ok(())
    }

    fn inner(&self, stem: Stem) -> (f64, f64) {
        let (lo, hi) = self.bands[stem.index()];
        (lo + self.margin, hi - self.margin)
    }
}

/// Raised-cosine fade of `fade` samples at both ends of `[0, n)`.
fn fade_gain(i: usize, n: usize, fade: usize) -> f64 {
    let d = i.min(n - 1 - i);
    if d >= fade {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * d as f64 / fade as f64).cos()
    }
}

struct Partial {
    freq: f64,
    amp: f64,
    phase: f64,
}

fn random_partials(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64), count: usize, amp: f64) -> Vec<Partial> {
    (0..count)
        .map(|_| Partial {
            freq: rng.gen_range(lo..hi),
            amp: amp * rng.gen_range(0.5..1.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        })
        .collect()
}

/// Notes of `note_len` samples; each is a harmonic complex with vibrato
/// whose partials stay inside `band`.
fn tone_notes(rng: &mut ChaCha8Rng, n: usize, sr: f64, band: (f64, f64), note_len: usize, vibrato: f64) -> Vec<[f64; 2]> {
    let (lo, hi) = band;
    let mut out = vec![[0.0; 2]; n];
    let fade = note_len / 8;
    let mut start = 0;
    while start < n {
        let len = note_len.min(n - start);
        let top = hi / (1.0 + vibrato);
        let bottom = lo / (1.0 - vibrato);
        let f0 = rng.gen_range(bottom..top.max(bottom + 1e-3));
        let pan: f64 = rng.gen_range(0.3..0.7);
        let rate = rng.gen_range(4.0..6.0);
        let harmonics: Vec<(f64, f64)> = (1..=8)
            .map(|k| k as f64)
            .filter(|&k| k * f0 * (1.0 + vibrato) <= hi)
            .map(|k| (k, 0.25 / k))
            .collect();
        let mut phase = 0.0f64;
        for i in 0..len {
            let t = i as f64 / sr;
            let inst = f0 * (1.0 + vibrato * (std::f64::consts::TAU * rate * t).sin());
            phase += std::f64::consts::TAU * inst / sr;
            let g = if len > 2 * fade { fade_gain(i, len, fade) } else { 0.0 };
            let v: f64 = harmonics.iter().map(|&(k, a)| a * (k * phase).sin()).sum::<f64>() * g;
            out[start + i][0] += v * pan;
            out[start + i][1] += v * (1.0 - pan);
        }
        start += note_len;
    }
    out
}

/// Keeps synthetic mixtures inside full scale.
const SYNTH_GAIN: f64 = 0.5;

fn to_tensor(samples: Vec<[f64; 2]>, fade: usize) -> Tensor<f32> {
    let n = samples.len();
    let data = samples
        .into_iter()
        .enumerate()
        .flat_map(|(i, [l, r])| {
            let g = SYNTH_GAIN * fade_gain(i, n, fade);
            [(l * g) as f32, (r * g) as f32]
        })
        .collect();
    Tensor::new(&[n, 2], data).expect("stereo")
}

fn synth_song(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> [Tensor<f32>; 4] {
    let sr = spec.sample_rate as f64;
    let tau = std::f64::consts::TAU;
    let edge_fade = (0.05 * sr) as usize;

    let note = (sr * rng.gen_range(0.35..0.6)) as usize;
    let vocals = tone_notes(rng, n, sr, spec.inner(Stem::Vocals), note, 0.01);
    let bass = tone_notes(rng, n, sr, spec.inner(Stem::Bass), note * 2, 0.0);

    // Drums: bursts of in-band random-phase partials with a gamma envelope.
    let period = (sr * rng.gen_range(0.25..0.5)) as usize;
    let decay = 0.015 * sr;
    let burst = random_partials(rng, spec.inner(Stem::Drums), 48, 0.12);
    let mut drums = vec![[0.0; 2]; n];
    for (i, d) in drums.iter_mut().enumerate() {
        let x = (i % period) as f64 / decay;
        let env = x * (1.0 - x).exp();
        if env < 1e-9 {
            continue;
        }
        let t = i as f64 / sr;
        let l: f64 = burst.iter().map(|p| p.amp * (tau * p.freq * t + p.phase).sin()).sum();
        let r: f64 = burst.iter().map(|p| p.amp * (tau * p.freq * t + 1.3 * p.phase).sin()).sum();
        *d = [env * l, env * r];
    }

    // Other: slowly amplitude-modulated band-limited noise.
    let partials = random_partials(rng, spec.inner(Stem::Other), 64, 0.04);
    let lfo = rng.gen_range(0.2..0.6);
    let other = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let g = 0.75 + 0.25 * (tau * lfo * t).sin();
            let l: f64 = partials.iter().map(|p| p.amp * (tau * p.freq * t + p.phase).sin()).sum();
            let r: f64 = partials.iter().map(|p| p.amp * (tau * p.freq * t - p.phase).sin()).sum();
            [g * l, g * r]
        })
        .collect();

    [
        to_tensor(vocals, edge_fade),
        to_tensor(bass, edge_fade),
        to_tensor(drums, edge_fade),
        to_tensor(other, edge_fade),
    ]
}

/// Deterministic band-limited songs with an exact-sum mixture.
pub fn synth_dataset(spec: &SynthSpec, n_songs: usize, duration_s: f64, seed: u64) -> Result<Vec<StemSet>> {
    spec.validate()?;
    if !(duration_s > 0.0) {
        return Err(Error::config("synthetic song duration must be positive"));
    }
    let n = (duration_s * spec.sample_rate as f64).round() as usize;
    (0..n_songs)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let stems = synth_song(spec, n, &mut rng);
            StemSet::from_stems(format!("synth{i:03}"), spec.sample_rate, stems)
        })
        .collect()
}

/// Fraction of a signal's STFT energy outside `[lo, hi]` Hz.
pub fn out_of_band_fraction(audio: &Tensor<f32>, band: (f64, f64), stft_cfg: StftConfig) -> Result<f64> {
    let spec = stft(&audio.cast::<f64>(), stft_cfg)?;
    let bins = spec.bins();
    let channels = spec.channels();
    let bin_hz = stft_cfg.sample_rate as f64 / stft_cfg.n_fft as f64;
    let (mut inside, mut total) = (0.0, 0.0);
    for (i, (re, im)) in spec.re.data().iter().zip(spec.im.data()).enumerate() {
        let f = ((i / channels) % bins) as f64 * bin_hz;
        let e = re * re + im * im;
        total += e;
        if f >= band.0 && f <= band.1 {
            inside += e;
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - inside / total)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MTFA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A decoded checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: [u8; 32],
    pub entries: Vec<(String, Tensor<f32>)>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, config: &ModelConfig) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            digest: config.digest(),
            entries: store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let digest: [u8; 32] = r.take(32, "config digest")?.try_into().expect("32 bytes");
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::CheckpointFormat(format!("entry {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::CheckpointFormat(format!("`{name}` has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|&n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::CheckpointFormat(format!("`{name}` dims {dims:?} overflow")))?;
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push((name, Tensor::new(&dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            version,
            digest,
            entries,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CheckpointTruncated(format!("file ends inside {what} at byte {}", self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(model: &SeparationModel<f32>, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_store(model.store(), model.config()).to_bytes();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint written for `config` (the seed is irrelevant).
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<SeparationModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint(&Checkpoint::from_bytes(&bytes)?, config)
}

pub fn model_from_checkpoint(ckpt: &Checkpoint, config: &ModelConfig) -> Result<SeparationModel<f32>> {
    let expected = config.digest();
    if ckpt.digest != expected {
        return Err(Error::CheckpointDigest {
            found: hex(&ckpt.digest),
            expected: hex(&expected),
        });
    }
    let mut model = SeparationModel::<f32>::build(config.clone())?;
    let store = model.store_mut();
    if ckpt.entries.len() != store.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} entries, the model has {}",
            ckpt.entries.len(),
            store.len()
        )));
    }
    for (i, (name, value)) in ckpt.entries.iter().enumerate() {
        if store.entries()[i].name != *name {
            return Err(Error::CheckpointFormat(format!(
                "entry {i} is `{name}`, expected `{}`",
                store.entries()[i].name
            )));
        }
        store.set(name, value.clone()).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_set(n: usize) -> StemSet {
        let stems = std::array::from_fn(|k| Tensor::from_fn(&[n, 2], |i| ((i + k) as f32 * 0.01).sin()));
        StemSet::from_stems("tiny", 8000, stems).unwrap()
    }

    #[test]
    fn stem_names_parse() {
        for s in Stem::ALL {
            assert_eq!(s.name().parse::<Stem>().unwrap(), s);
        }
        assert!("guitar".parse::<Stem>().is_err());
    }

    #[test]
    fn segment_arithmetic() {
        let cfg = StftConfig::new(8192, 1024, 44100).unwrap();
        let set = tiny_set(412 * 1024);
        let starts: Vec<_> = segment(0, &set, 240, 86, cfg).unwrap().iter().map(|s| s.start / 1024).collect();
        assert_eq!(starts, vec![0, 86, 172]);
        let one = tiny_set(240 * 1024);
        assert_eq!(segment(0, &one, 240, 86, cfg).unwrap().len(), 1);
        let tiling = segment(0, &set, 100, 100, cfg).unwrap();
        assert_eq!(tiling.iter().map(|s| s.start).collect::<Vec<_>>(), vec![0, 102400, 204800, 307200]);
    }

    #[test]
    fn short_song_pads() {
        let cfg = StftConfig::new(512, 64, 8000).unwrap();
        let set = tiny_set(1000);
        let segs = segment(0, &set, 64, 64, cfg).unwrap();
        assert_eq!(segs, vec![SegmentIndex { song: 0, start: 0, len: 4096 }]);
        let parts = extract_segment(std::slice::from_ref(&set), segs[0]).unwrap();
        assert_eq!(parts[0].shape(), &[4096, 2]);
        assert_eq!(parts[0].data()[..2000], set.stems[0].data()[..]);
        assert!(parts[0].data()[2000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixture_error_detects_mismatch() {
        let set = tiny_set(100);
        assert!(set.mixture_error() < 1e-6);
        let mut bad = set.clone();
        bad.mixture = bad.mixture.map(|v| v * 1.1);
        assert!(bad.mixture_error() > 0.05);
    }

    #[test]
    fn checkpoint_truncation_and_trailing() {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            digest: [7; 32],
            entries: vec![("a".into(), Tensor::from_fn(&[2, 3], |i| i as f32))],
        };
        let bytes = ckpt.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
        for cut in [3, 10, 50, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CheckpointTruncated(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::CheckpointFormat(_))));
        let mut v = bytes;
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::CheckpointVersion { found: 9, .. })));
    }

    #[test]
    fn synth_bands_validate() {
        SynthSpec::disjoint(4000).validate().unwrap();
        let mut bad = SynthSpec::disjoint(4000);
        bad.bands[0] = (500.0, 520.0);
        assert!(bad.validate().is_err());
        bad.bands[0] = (1500.0, 2500.0);
        assert!(bad.validate().is_err());
    }
}

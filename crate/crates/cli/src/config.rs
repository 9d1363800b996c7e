//! Line-oriented `section.key = value` run configuration.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use mtfatt::dataio::Stem;
use mtfatt::model::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Band-disjoint generated songs.
    Synthetic,
    /// Song directories listed in a split manifest.
    Directory,
}

impl DataSource {
    fn name(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Directory => "directory",
        }
    }
}

impl FromStr for DataSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "directory" => Ok(DataSource::Directory),
            _ => Err(format!("unknown data source `{s}` (expected synthetic or directory)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub source: DataSource,
    pub dataset_root: PathBuf,
    /// Relative paths are resolved against `dataset_root`.
    pub manifest: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub synth_songs: usize,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_duration: f64,
    pub synth_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub seed: u64,
    pub swap_prob: f64,
    pub remix_prob: f64,
    pub shift_frames: Option<usize>,
    pub max_batches_per_epoch: Option<usize>,
    pub stems: Vec<Stem>,
    pub eval_split: String,
    /// 0 means one worker per core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk_scale(),
            source: DataSource::Synthetic,
            dataset_root: PathBuf::from("data"),
            manifest: PathBuf::from("splits.tsv"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            output_dir: PathBuf::from("out"),
            synth_songs: 12,
            synth_train: 8,
            synth_val: 2,
            synth_duration: 20.0,
            synth_seed: 1234,
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            alpha: 0.1,
            seed: 0,
            swap_prob: 0.5,
            remix_prob: 1.0,
            shift_frames: None,
            max_batches_per_epoch: None,
            stems: Stem::ALL.to_vec(),
            eval_split: "test".into(),
            threads: 0,
        }
    }
}

fn list<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse().map_err(|e| format!("{key}: cannot parse `{v}`: {e}"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_channels(key: &str, v: &str) -> Result<[usize; 3], String> {
    parse_list::<usize>(key, v)?
        .try_into()
        .map_err(|_| format!("{key}: expected three comma-separated channel counts"))
}

fn parse_opt(key: &str, v: &str) -> Result<Option<usize>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "none".into(), |n| n.to_string())
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("model.sample_rate", m.sample_rate.to_string()),
            ("model.n_fft", m.n_fft.to_string()),
            ("model.hop", m.hop.to_string()),
            ("model.subbands", m.subbands.to_string()),
            ("model.segment_frames", m.segment_frames.to_string()),
            ("model.encoder_channels", list(&m.encoder_channels)),
            ("model.decoder_channels", list(&m.decoder_channels)),
            ("model.variant", m.variant.to_string()),
            ("model.ra_blocks", m.ra_blocks.to_string()),
            ("model.p_schedule", list(&m.p_schedule)),
            ("model.mask_expansion", m.mask_expansion.to_string()),
            ("model.bn_eps", m.bn_eps.to_string()),
            ("model.bn_momentum", m.bn_momentum.to_string()),
            ("model.seed", m.seed.to_string()),
            ("data.source", self.source.name().into()),
            ("data.synth_songs", self.synth_songs.to_string()),
            ("data.synth_train", self.synth_train.to_string()),
            ("data.synth_val", self.synth_val.to_string()),
            ("data.synth_duration", self.synth_duration.to_string()),
            ("data.synth_seed", self.synth_seed.to_string()),
            ("paths.dataset_root", self.dataset_root.display().to_string()),
            ("paths.manifest", self.manifest.display().to_string()),
            ("paths.checkpoint_dir", self.checkpoint_dir.display().to_string()),
            ("paths.output_dir", self.output_dir.display().to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.alpha", self.alpha.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.swap_prob", self.swap_prob.to_string()),
            ("train.remix_prob", self.remix_prob.to_string()),
            ("train.shift_frames", opt(self.shift_frames)),
            ("train.max_batches_per_epoch", opt(self.max_batches_per_epoch)),
            ("run.stems", list(&self.stems)),
            ("run.eval_split", self.eval_split.clone()),
            ("run.threads", self.threads.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        match key {
            "model.preset" => match v {
                "desk" => *m = ModelConfig::desk_scale(),
                "full" => *m = ModelConfig::full_scale(),
                _ => return Err(format!("model.preset: expected desk or full, got `{v}`")),
            },
            "model.sample_rate" => m.sample_rate = parse(key, v)?,
            "model.n_fft" => m.n_fft = parse(key, v)?,
            "model.hop" => m.hop = parse(key, v)?,
            "model.subbands" => m.subbands = parse(key, v)?,
            "model.segment_frames" => m.segment_frames = parse(key, v)?,
            "model.encoder_channels" => m.encoder_channels = parse_channels(key, v)?,
            "model.decoder_channels" => m.decoder_channels = parse_channels(key, v)?,
            "model.variant" => m.variant = parse::<Variant>(key, v)?,
            "model.ra_blocks" => m.ra_blocks = parse(key, v)?,
            "model.p_schedule" => m.p_schedule = parse_list(key, v)?,
            "model.mask_expansion" => m.mask_expansion = parse(key, v)?,
            "model.bn_eps" => m.bn_eps = parse(key, v)?,
            "model.bn_momentum" => m.bn_momentum = parse(key, v)?,
            "model.seed" => m.seed = parse(key, v)?,
            "data.source" => self.source = v.parse()?,
            "data.synth_songs" => self.synth_songs = parse(key, v)?,
            "data.synth_train" => self.synth_train = parse(key, v)?,
            "data.synth_val" => self.synth_val = parse(key, v)?,
            "data.synth_duration" => self.synth_duration = parse(key, v)?,
            "data.synth_seed" => self.synth_seed = parse(key, v)?,
            "paths.dataset_root" => self.dataset_root = v.into(),
            "paths.manifest" => self.manifest = v.into(),
            "paths.checkpoint_dir" => self.checkpoint_dir = v.into(),
            "paths.output_dir" => self.output_dir = v.into(),
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.alpha" => self.alpha = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.swap_prob" => self.swap_prob = parse(key, v)?,
            "train.remix_prob" => self.remix_prob = parse(key, v)?,
            "train.shift_frames" => self.shift_frames = parse_opt(key, v)?,
            "train.max_batches_per_epoch" => self.max_batches_per_epoch = parse_opt(key, v)?,
            "run.stems" => self.stems = parse_list(key, v)?,
            "run.eval_split" => self.eval_split = v.to_string(),
            "run.threads" => self.threads = parse(key, v)?,
            _ => return Err(format!("unknown configuration key `{key}`")),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. A `model.preset` line is
    /// applied before every other key wherever it appears.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `section.key = value`", n + 1))?;
            lines.push((n + 1, k.trim(), v.trim()));
        }
        let mut cfg = Self::default();
        let (presets, rest): (Vec<_>, Vec<_>) = lines.into_iter().partition(|(_, k, _)| *k == "model.preset");
        for (n, k, v) in presets.into_iter().chain(rest) {
            cfg.set(k, v).map_err(|e| format!("line {n}: {e}"))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.manifest.is_absolute() {
            self.manifest.clone()
        } else {
            self.dataset_root.join(&self.manifest)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_defaults_and_full() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let mut full = RunConfig::parse("model.preset = full\ntrain.lr = 0.00037\ntrain.shift_frames = 12").unwrap();
        full.stems = vec![Stem::Drums, Stem::Vocals];
        assert_eq!(full.model, {
            let mut m = ModelConfig::full_scale();
            m.seed = full.model.seed;
            m
        });
        assert_eq!(RunConfig::parse(&full.to_text()).unwrap(), full);
    }

    #[test]
    fn preset_applies_first() {
        let cfg = RunConfig::parse("model.hop = 512\nmodel.preset = full").unwrap();
        assert_eq!(cfg.model.hop, 512);
        assert_eq!(cfg.model.n_fft, 8192);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let e = RunConfig::parse("model.n_fft = 256\nmodel.nfft = 3").unwrap_err();
        assert!(e.contains("line 2") && e.contains("model.nfft"), "{e}");
        assert!(RunConfig::parse("train.epochs 3").is_err());
        assert!(RunConfig::parse("model.encoder_channels = 1,2").is_err());
        let e = RunConfig::parse("model.variant = big").unwrap_err();
        assert!(e.contains("MTFAtt"), "{e}");
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# run\n\ntrain.epochs = 7 # short\n").unwrap();
        assert_eq!(cfg.epochs, 7);
    }
}

//! Plain energy-ratio SDR and per-stem evaluation reports.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataio::{Stem, StemSet};
use crate::error::{Error, Result};
use crate::model::StemEstimator;
use crate::tensor::Tensor;

pub const SDR_CAP_DB: f64 = 100.0;

/// `10 log10(sum s^2 / sum (s - ŝ)^2)` over both channels, capped at
/// [`SDR_CAP_DB`].
pub fn sdr(reference: &Tensor<f32>, estimate: &Tensor<f32>) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(Error::shape(format!(
            "sdr: reference {:?} vs estimate {:?}",
            reference.shape(),
            estimate.shape()
        )));
    }
    let (mut signal, mut error) = (0.0f64, 0.0f64);
    for (&s, &e) in reference.data().iter().zip(estimate.data()) {
        let (s, e) = (s as f64, e as f64);
        signal += s * s;
        error += (s - e) * (s - e);
    }
    if signal == 0.0 {
        return Err(Error::UndefinedMetric("SDR of a silent reference".into()));
    }
    if error == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (signal / error).log10()).min(SDR_CAP_DB))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SongScore {
    pub song: String,
    /// SDR per evaluated stem, in [`SdrReport::stems`] order.
    pub sdr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdrReport {
    pub label: String,
    pub stems: Vec<Stem>,
    pub songs: Vec<SongScore>,
}

impl SdrReport {
    fn column(&self, k: usize) -> Vec<f64> {
        self.songs.iter().map(|s| s.sdr[k]).collect()
    }

    fn position(&self, stem: Stem) -> Option<usize> {
        self.stems.iter().position(|&s| s == stem)
    }

    /// Median across songs.
    pub fn median(&self, stem: Stem) -> Option<f64> {
        self.position(stem).map(|k| median(&mut self.column(k)))
    }

    pub fn mean(&self, stem: Stem) -> Option<f64> {
        self.position(stem)
            .map(|k| self.column(k).iter().sum::<f64>() / self.songs.len() as f64)
    }

    /// Average of the per-stem medians.
    pub fn all_median(&self) -> f64 {
        self.stems.iter().filter_map(|&s| self.median(s)).sum::<f64>() / self.stems.len() as f64
    }

    pub fn all_mean(&self) -> f64 {
        self.stems.iter().filter_map(|&s| self.mean(s)).sum::<f64>() / self.stems.len() as f64
    }

    /// Human-readable table: one row per stem and an `All` row.
    pub fn to_table(&self) -> String {
        let mut out = format!("plain SDR (dB), {}, {} songs\n", self.label, self.songs.len());
        let _ = writeln!(out, "{:<8} {:>9} {:>9}", "stem", "median", "mean");
        for &stem in &self.stems {
            let _ = writeln!(
                out,
                "{:<8} {:>9.3} {:>9.3}",
                stem.name(),
                self.median(stem).unwrap_or(f64::NAN),
                self.mean(stem).unwrap_or(f64::NAN)
            );
        }
        let _ = writeln!(out, "{:<8} {:>9.3} {:>9.3}", "All", self.all_median(), self.all_mean());
        out
    }

    /// Machine-readable records: one per song and stem, then aggregates.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for song in &self.songs {
            for (stem, v) in self.stems.iter().zip(&song.sdr) {
                let _ = writeln!(out, "song={}\tstem={stem}\tsdr={v:.6}", song.song);
            }
        }
        for &stem in &self.stems {
            let _ = writeln!(
                out,
                "aggregate\tstem={stem}\tmedian={:.6}\tmean={:.6}",
                self.median(stem).unwrap_or(f64::NAN),
                self.mean(stem).unwrap_or(f64::NAN)
            );
        }
        let _ = writeln!(out, "aggregate\tstem=All\tmedian={:.6}\tmean={:.6}", self.all_median(), self.all_mean());
        out
    }
}

/// Separates every song with the model of each requested stem and scores
/// it against the reference stem. Songs are processed in parallel.
pub fn evaluate(
    models: &[(Stem, &dyn StemEstimator)],
    songs: &[StemSet],
    stems: &[Stem],
    label: &str,
) -> Result<SdrReport> {
    let chosen = stems
        .iter()
        .map(|&stem| {
            models
                .iter()
                .find(|(s, _)| *s == stem)
                .map(|(_, m)| *m)
                .ok_or_else(|| Error::MissingStemModel(stem.name().into()))
        })
        .collect::<Result<Vec<_>>>()?;
    if songs.is_empty() {
        return Err(Error::Dataset("no songs to evaluate".into()));
    }
    let scores = songs
        .par_iter()
        .map(|song| {
            let sdr = stems
                .iter()
                .zip(&chosen)
                .map(|(&stem, model)| sdr(song.stem(stem), &model.estimate(&song.mixture)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(SongScore {
                song: song.name.clone(),
                sdr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SdrReport {
        label: label.to_string(),
        stems: stems.to_vec(),
        songs: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal() -> Tensor<f32> {
        Tensor::from_fn(&[256, 2], |i| ((i as f32) * 0.37).sin() + 0.1)
    }

    #[test]
    fn sdr_examples() {
        let s = signal();
        assert_eq!(sdr(&s, &s).unwrap(), SDR_CAP_DB);
        assert!(sdr(&s, &Tensor::zeros(&[256, 2])).unwrap().abs() < 1e-12);
        let half = sdr(&s, &s.map(|v| 0.5 * v)).unwrap();
        assert!((half - 20.0 * 2f64.log10()).abs() < 1e-6);
        assert!(matches!(sdr(&Tensor::zeros(&[4, 2]), &s), Err(_)));
    }

    #[test]
    fn sdr_ten_db() {
        let s = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        // noise energy 0.4 = 0.1 * 4
        let e = Tensor::new(&[2, 2], vec![1.0 + 0.1f32.sqrt() * 2.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((sdr(&s, &e).unwrap() - 10.0).abs() < 1e-5);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

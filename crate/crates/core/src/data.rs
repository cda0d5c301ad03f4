//! Audio sources for training and evaluation: a synthetic generator (tones,
//! chirps, filtered noise) and WAV directories split by file.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::wav::read_wav;
use crate::dsp::{resample, AudioBuffer};
use crate::error::{Error, Result};

/// One synthetic clip: 1 to 3 tones, a linear chirp half of the time and a
/// smoothed noise floor 10 to 30 dB below them, normalised to a 0.5 peak.
pub fn synth_clip(len: usize, sample_rate: u32, rng: &mut impl Rng) -> AudioBuffer {
    let sr = sample_rate as f64;
    let top = (sr / 2.0 * 0.6).min(5000.0);
    let mut x = vec![0.0; len];
    for _ in 0..rng.gen_range(1..=3) {
        let f = rng.gen_range(100.0..top);
        let a = rng.gen_range(0.1..0.5);
        let p = rng.gen_range(0.0..2.0 * PI);
        let trem = rng.gen_range(0.0..3.0);
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 / sr;
            *v += a * (1.0 + 0.3 * (2.0 * PI * trem * t).sin()) * (2.0 * PI * f * t + p).sin();
        }
    }
    if rng.gen_bool(0.5) {
        let f0 = rng.gen_range(100.0..top * 0.6);
        let f1 = rng.gen_range(100.0..top * 1.2);
        let a = rng.gen_range(0.1..0.4);
        let dur = len.max(1) as f64 / sr;
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 / sr;
            *v += a * (2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur))).sin();
        }
    }
    let width = rng.gen_range(2..40usize);
    let tonal = (x.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    let level = tonal * 10f64.powf(-rng.gen_range(10.0..30.0) / 20.0);
    let raw: Vec<f64> = (0..len + width).map(|_| StandardNormal.sample(rng)).collect();
    let mut acc: f64 = raw[..width].iter().sum();
    let mut smooth = Vec::with_capacity(len);
    for i in 0..len {
        smooth.push(acc / width as f64);
        acc += raw[i + width] - raw[i];
    }
    let sd = (smooth.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt() + 1e-12;
    x.iter_mut().zip(&smooth).for_each(|(v, n)| *v += level * n / sd);
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-12;
    x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    AudioBuffer::new(x, sample_rate).expect("finite synthetic audio")
}

/// `count` clips of `seconds` each, drawn from `seed`.
pub fn synth_corpus(count: usize, seconds: f64, sample_rate: u32, seed: u64) -> Vec<AudioBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * sample_rate as f64).round() as usize;
    (0..count).map(|_| synth_clip(len, sample_rate, &mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Sorted `.wav` files under `dir` (non-recursive).
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Read {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Shuffles the files with `seed` and cuts them 0.8 : 0.1 : 0.1.
pub fn split_files(files: &[PathBuf], seed: u64, split: Split) -> Vec<PathBuf> {
    let mut shuffled = files.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let a = (n as f64 * 0.8).round() as usize;
    let b = (n as f64 * 0.9).round() as usize;
    match split {
        Split::Train => shuffled[..a].to_vec(),
        Split::Validation => shuffled[a..b].to_vec(),
        Split::Test => shuffled[b..].to_vec(),
    }
}

/// Reads every file and resamples to `sample_rate`.
pub fn load_all(files: &[PathBuf], sample_rate: u32) -> Result<Vec<AudioBuffer>> {
    files
        .iter()
        .map(|f| read_wav(f).and_then(|a| resample(&a, sample_rate)))
        .collect()
}

/// Clips held in memory; training draws random windows from them.
#[derive(Debug, Clone)]
pub struct Corpus {
    clips: Vec<AudioBuffer>,
}

impl Corpus {
    pub fn new(clips: Vec<AudioBuffer>) -> Result<Self> {
        let clips: Vec<_> = clips.into_iter().filter(|c| !c.is_empty()).collect();
        if clips.is_empty() {
            return Err(Error::EmptyDataset("no usable clips".into()));
        }
        Ok(Self { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clips(&self) -> &[AudioBuffer] {
        &self.clips
    }

    /// Random window of `len` samples. Clips shorter than `len` are looped.
    pub fn window(&self, len: usize, rng: &mut impl Rng) -> AudioBuffer {
        let clip = &self.clips[rng.gen_range(0..self.clips.len())];
        let s = clip.samples();
        let data = if s.len() >= len {
            let start = rng.gen_range(0..=s.len() - len);
            s[start..start + len].to_vec()
        } else {
            (0..len).map(|i| s[i % s.len()]).collect()
        };
        AudioBuffer::new(data, clip.sample_rate()).expect("finite window")
    }
}

//! Audio buffers, short-time Fourier analysis/synthesis, resampling and
//! quality metrics.

pub mod filter;
mod resample;
pub(crate) mod stft;
pub mod wav;

pub use resample::resample;
pub use stft::{istft, stft, OverlapNorm, Spectrogram, StftConfig, StftEngine, Window};

use crate::error::{Error, Result};

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Config(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Copy of `len` samples starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> AudioBuffer {
        let end = (start + len).min(self.samples.len());
        let start = start.min(end);
        AudioBuffer {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// `20 log10(||C|| / ||C' - C||)` over two magnitude spectrograms.
pub fn spectrogram_sdr(original: &Spectrogram, modified: &Spectrogram) -> Result<f64> {
    if original.shape() != modified.shape() || original.config() != modified.config() {
        return Err(Error::ShapeMismatch {
            op: "spectrogram_sdr",
            left: original.shape().to_vec(),
            right: modified.shape().to_vec(),
        });
    }
    magnitude_sdr(original.magnitude(), modified.magnitude())
}

/// SDR between two equally sized magnitude arrays.
pub fn magnitude_sdr(reference: &[f64], modified: &[f64]) -> Result<f64> {
    if reference.len() != modified.len() {
        return Err(Error::ShapeMismatch {
            op: "magnitude_sdr",
            left: vec![reference.len()],
            right: vec![modified.len()],
        });
    }
    let signal = l2(reference);
    if signal == 0.0 {
        return Err(Error::SilentReference);
    }
    let err = reference
        .iter()
        .zip(modified)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (signal / err).log10())
}

/// Time-domain SDR of `modified` against `reference`, over the common prefix.
pub fn time_sdr(reference: &[f64], modified: &[f64]) -> Result<f64> {
    let n = reference.len().min(modified.len());
    magnitude_sdr(&reference[..n], &modified[..n])
}

pub(crate) fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sdr_direct_formula() {
        let c = vec![100.0, 0.0];
        let m = vec![99.0, 0.0];
        assert!((magnitude_sdr(&c, &m).unwrap() - 40.0).abs() < 1e-12);
        assert_eq!(magnitude_sdr(&c, &c).unwrap(), f64::INFINITY);
        assert!(matches!(
            magnitude_sdr(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::SilentReference)
        ));
    }

    #[test]
    fn audio_rejects_nan() {
        assert!(AudioBuffer::new(vec![0.0, f64::NAN], 16000).is_err());
        assert!(AudioBuffer::new(vec![0.0], 0).is_err());
    }
}

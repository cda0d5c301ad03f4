use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioBuffer;
use crate::error::{Error, Result};

/// Below this the window sum counts as zero.
const WSUM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / L)`.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "hann" => Some(Window::Hann),
            "rectangular" => Some(Window::Rectangular),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_length: usize,
    pub hop_length: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::profile_16k()
    }
}

impl StftConfig {
    /// 16 kHz model profile: 2048-point transform, hop 1024.
    pub fn profile_16k() -> Self {
        Self {
            fft_size: 2048,
            window_length: 2048,
            hop_length: 1024,
            window: Window::Hann,
        }
    }

    /// 44.1 kHz model profile: 4096-point transform, hop 2048.
    pub fn profile_44k() -> Self {
        Self {
            fft_size: 4096,
            window_length: 4096,
            hop_length: 2048,
            window: Window::Hann,
        }
    }

    pub fn with_sizes(fft_size: usize, window_length: usize, hop_length: usize) -> Self {
        Self {
            fft_size,
            window_length,
            hop_length,
            window: Window::Hann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.window_length == 0 || self.hop_length == 0 {
            return Err(Error::Config("STFT sizes must be positive".into()));
        }
        if self.fft_size % 2 != 0 {
            return Err(Error::Config("fft_size must be even".into()));
        }
        if self.window_length > self.fft_size {
            return Err(Error::Config("window_length exceeds fft_size".into()));
        }
        if self.hop_length > self.window_length {
            return Err(Error::Config("hop_length exceeds window_length".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count under the no-padding convention; zero if `len` is shorter
    /// than one window.
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.window_length {
            0
        } else {
            (len - self.window_length) / self.hop_length + 1
        }
    }

    /// Samples needed to produce `frames` frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop_length + self.window_length
        }
    }
}

/// Magnitude/phase spectrogram laid out bin-major: index `f * frames + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    magnitude: Vec<f64>,
    phase: Vec<f64>,
    bins: usize,
    frames: usize,
    config: StftConfig,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn from_parts(
        magnitude: Vec<f64>,
        phase: Vec<f64>,
        frames: usize,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        let bins = config.bins();
        if magnitude.len() != bins * frames || phase.len() != magnitude.len() {
            return Err(Error::ShapeMismatch {
                op: "spectrogram",
                left: vec![magnitude.len()],
                right: vec![phase.len(), bins * frames],
            });
        }
        if magnitude.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::Config("magnitude must be non-negative".into()));
        }
        Ok(Self {
            magnitude,
            phase,
            bins,
            frames,
            config,
            sample_rate,
        })
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.bins, self.frames]
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Same phase and config, new magnitude.
    pub fn with_magnitude(&self, magnitude: Vec<f64>) -> Result<Self> {
        Self::from_parts(
            magnitude,
            self.phase.clone(),
            self.frames,
            self.config,
            self.sample_rate,
        )
    }
}

/// How overlap-added frames are normalised by the summed squared window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OverlapNorm {
    /// Exact division; samples with zero window sum at the edges become 0.
    Exact,
    /// Divide by `max(wsum, floor)`, tapering the partially covered edges.
    Floor(f64),
}

/// Planned transforms plus window for one [`StftConfig`].
pub struct StftEngine {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftEngine")
            .field("config", &self.config)
            .finish()
    }
}

impl StftEngine {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window.coefficients(config.window_length),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Complex analysis, bin-major layout, `bins * frames` entries.
    pub fn analyze(&self, samples: &[f64]) -> Result<(Vec<Complex64>, usize)> {
        let cfg = &self.config;
        if samples.len() < cfg.window_length {
            return Err(Error::InputTooShort {
                samples: samples.len(),
                needed: cfg.window_length,
            });
        }
        let frames = cfg.frames_for(samples.len());
        let bins = cfg.bins();
        let mut out = vec![Complex64::new(0.0, 0.0); bins * frames];
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
        for t in 0..frames {
            let start = t * cfg.hop_length;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (n, w) in self.window.iter().enumerate() {
                buf[n].re = samples[start + n] * w;
            }
            self.forward.process(&mut buf);
            for f in 0..bins {
                out[f * frames + t] = buf[f];
            }
        }
        Ok((out, frames))
    }

    /// Magnitude-only analysis.
    pub fn magnitude(&self, samples: &[f64]) -> Result<(Vec<f64>, usize)> {
        let (spec, frames) = self.analyze(samples)?;
        Ok((spec.iter().map(|c| c.norm()).collect(), frames))
    }

    /// Squared-window overlap sum for `frames` frames.
    pub fn window_sum(&self, frames: usize) -> Vec<f64> {
        let cfg = &self.config;
        let mut wsum = vec![0.0; cfg.samples_for(frames)];
        for t in 0..frames {
            let start = t * cfg.hop_length;
            for (n, w) in self.window.iter().enumerate() {
                wsum[start + n] += w * w;
            }
        }
        wsum
    }

    /// Smallest window sum in the fully overlapped region.
    pub fn interior_floor(&self) -> f64 {
        let cfg = &self.config;
        let periods = cfg.window_length.div_ceil(cfg.hop_length) + 1;
        let wsum = self.window_sum(2 * periods + 1);
        let lo = cfg.window_length;
        wsum[lo..lo + cfg.hop_length]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    fn normaliser(&self, frames: usize, norm: OverlapNorm) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let wsum = self.window_sum(frames);
        let len = wsum.len();
        let edge = cfg.window_length - cfg.hop_length;
        match norm {
            OverlapNorm::Exact => {
                for (i, &w) in wsum.iter().enumerate() {
                    if w <= WSUM_EPS && i >= edge && i + edge < len {
                        return Err(Error::ZeroWindowSum(i));
                    }
                }
                Ok(wsum
                    .into_iter()
                    .map(|w| if w > WSUM_EPS { 1.0 / w } else { 0.0 })
                    .collect())
            }
            OverlapNorm::Floor(floor) => Ok(wsum.into_iter().map(|w| 1.0 / w.max(floor)).collect()),
        }
    }

    /// Overlap-add resynthesis from magnitude and phase (bin-major).
    pub fn synthesize(
        &self,
        magnitude: &[f64],
        phase: &[f64],
        frames: usize,
        norm: OverlapNorm,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let bins = cfg.bins();
        let n = cfg.fft_size;
        if magnitude.len() != bins * frames || phase.len() != magnitude.len() {
            return Err(Error::ShapeMismatch {
                op: "istft",
                left: vec![magnitude.len()],
                right: vec![bins, frames],
            });
        }
        let scale = self.normaliser(frames, norm)?;
        let mut out = vec![0.0; scale.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let inv_n = 1.0 / n as f64;
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for f in 0..bins {
                let idx = f * frames + t;
                let c = Complex64::from_polar(magnitude[idx], phase[idx]);
                buf[f] = c;
                if f > 0 && f < n - f {
                    buf[n - f] = c.conj();
                }
            }
            self.inverse.process(&mut buf);
            let start = t * cfg.hop_length;
            for (i, w) in self.window.iter().enumerate() {
                out[start + i] += w * buf[i].re * inv_n;
            }
        }
        out.iter_mut().zip(&scale).for_each(|(o, s)| *o *= s);
        Ok(out)
    }

    /// Vector-Jacobian product of `|analyze(x)|` at `x`, given the complex
    /// analysis of `x` and the gradient with respect to the magnitudes.
    pub fn magnitude_vjp(
        &self,
        len: usize,
        spectrum: &[Complex64],
        frames: usize,
        grad_magnitude: &[f64],
    ) -> Vec<f64> {
        let cfg = &self.config;
        let bins = cfg.bins();
        let mut grad = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for f in 0..bins {
                let idx = f * frames + t;
                let x = spectrum[idx];
                let r = x.norm();
                if r > 0.0 {
                    buf[f] = x * (grad_magnitude[idx] / r);
                }
            }
            self.inverse.process(&mut buf);
            let start = t * cfg.hop_length;
            for (i, w) in self.window.iter().enumerate() {
                grad[start + i] += w * buf[i].re;
            }
        }
        grad
    }

    /// Vector-Jacobian product of [`StftEngine::synthesize`] with respect to
    /// the magnitudes (the map is linear in them).
    pub fn synthesize_vjp(
        &self,
        grad_samples: &[f64],
        phase: &[f64],
        frames: usize,
        norm: OverlapNorm,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let bins = cfg.bins();
        let n = cfg.fft_size;
        let scale = self.normaliser(frames, norm)?;
        let mut grad = vec![0.0; bins * frames];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let inv_n = 1.0 / n as f64;
        for t in 0..frames {
            let start = t * cfg.hop_length;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                buf[i].re = grad_samples[start + i] * scale[start + i] * w;
            }
            self.forward.process(&mut buf);
            for f in 0..bins {
                let idx = f * frames + t;
                let weight = if f == 0 || 2 * f == n { 1.0 } else { 2.0 };
                let rot = Complex64::from_polar(1.0, phase[idx]);
                grad[idx] = weight * inv_n * (rot * buf[f].conj()).re;
            }
        }
        Ok(grad)
    }
}

fn wrap_phase(p: f64) -> f64 {
    if p <= -std::f64::consts::PI {
        p + 2.0 * std::f64::consts::PI
    } else {
        p
    }
}

/// Short-time Fourier transform without padding; trailing partial frames are
/// dropped.
pub fn stft(audio: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram> {
    let engine = StftEngine::new(*cfg)?;
    stft_with(&engine, audio)
}

pub(crate) fn stft_with(engine: &StftEngine, audio: &AudioBuffer) -> Result<Spectrogram> {
    let (spec, frames) = engine.analyze(audio.samples())?;
    let magnitude = spec.iter().map(|c| c.norm()).collect();
    let phase = spec.iter().map(|c| wrap_phase(c.arg())).collect();
    Ok(Spectrogram {
        magnitude,
        phase,
        bins: engine.config().bins(),
        frames,
        config: *engine.config(),
        sample_rate: audio.sample_rate(),
    })
}

/// Inverse STFT by windowed overlap-add with squared-window normalisation.
/// Output length is `(frames - 1) * hop + window`.
pub fn istft(spec: &Spectrogram) -> Result<AudioBuffer> {
    let engine = StftEngine::new(spec.config)?;
    let samples = engine.synthesize(&spec.magnitude, &spec.phase, spec.frames, OverlapNorm::Exact)?;
    AudioBuffer::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> StftConfig {
        StftConfig::with_sizes(64, 64, 32)
    }

    #[test]
    fn frame_count_for_twelve_seconds() {
        let cfg = StftConfig::profile_16k();
        // (192000 - 2048) / 1024 + 1
        assert_eq!(cfg.frames_for(192_000), 186);
        let audio = AudioBuffer::silence(192_000, 16_000);
        let spec = stft(&audio, &cfg).unwrap();
        assert_eq!(spec.frames(), 186);
        assert_eq!(spec.bins(), 1025);
    }

    #[test]
    fn too_short_is_rejected() {
        let audio = AudioBuffer::silence(10, 16_000);
        assert!(matches!(
            stft(&audio, &small()),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn zeros_give_zero_magnitude() {
        let audio = AudioBuffer::silence(64, 16_000);
        let spec = stft(&audio, &small()).unwrap();
        assert!(spec.magnitude().iter().all(|&m| m == 0.0));
        let back = istft(&spec.with_magnitude(vec![0.0; spec.magnitude().len()]).unwrap()).unwrap();
        assert!(back.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn bin_centred_sine_concentrates() {
        let cfg = StftConfig::profile_16k();
        let k = 100;
        let sr = 16_000.0;
        let freq = k as f64 * sr / cfg.fft_size as f64;
        let x: Vec<f64> = (0..8192)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / sr).sin())
            .collect();
        let spec = stft(&AudioBuffer::new(x, 16_000).unwrap(), &cfg).unwrap();
        let t_count = spec.frames();
        for t in 0..t_count {
            let energy: Vec<f64> = (0..spec.bins())
                .map(|f| spec.magnitude()[f * t_count + t].powi(2))
                .collect();
            let total: f64 = energy.iter().sum();
            let near: f64 = energy[k - 1..=k + 1].iter().sum();
            assert!(near / total >= 0.99, "frame {t}: {}", near / total);
        }
    }

    #[test]
    fn phase_is_half_open() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = stft(&AudioBuffer::new(x, 8000).unwrap(), &small()).unwrap();
        let pi = std::f64::consts::PI;
        assert!(spec.phase().iter().all(|&p| p > -pi && p <= pi));
    }

    #[test]
    fn rectangular_full_hop_has_no_zero_sum() {
        let cfg = StftConfig {
            window: Window::Rectangular,
            ..StftConfig::with_sizes(16, 16, 16)
        };
        let engine = StftEngine::new(cfg).unwrap();
        assert!(engine.synthesize(&vec![0.0; 9 * 3], &vec![0.0; 27], 3, OverlapNorm::Exact).is_ok());
        // Hann with hop == window leaves a zero at each frame boundary.
        let hann = StftEngine::new(StftConfig::with_sizes(16, 16, 16)).unwrap();
        assert!(matches!(
            hann.synthesize(&vec![0.0; 27], &vec![0.0; 27], 3, OverlapNorm::Exact),
            Err(Error::ZeroWindowSum(_))
        ));
    }

    #[test]
    fn interior_floor_for_half_overlap_hann() {
        let engine = StftEngine::new(StftConfig::profile_16k()).unwrap();
        // sin^4 + cos^4 has minimum 1/2
        assert!((engine.interior_floor() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn vjps_match_finite_differences() {
        let cfg = StftConfig::with_sizes(16, 12, 6);
        let engine = StftEngine::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (spec, frames) = engine.analyze(&x).unwrap();
        let g: Vec<f64> = (0..spec.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = engine.magnitude_vjp(x.len(), &spec, frames, &g);
        let objective = |x: &[f64]| -> f64 {
            let (m, _) = engine.magnitude(x).unwrap();
            m.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (objective(&xp) - objective(&xm)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", analytic[i]);
        }

        let mag: Vec<f64> = (0..spec.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let phase: Vec<f64> = (0..spec.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let norm = OverlapNorm::Floor(engine.interior_floor());
        let out_len = cfg.samples_for(frames);
        let gs: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = engine.synthesize_vjp(&gs, &phase, frames, norm).unwrap();
        let objective = |m: &[f64]| -> f64 {
            let y = engine.synthesize(m, &phase, frames, norm).unwrap();
            y.iter().zip(&gs).map(|(a, b)| a * b).sum()
        };
        for i in 0..mag.len() {
            let mut mp = mag.clone();
            mp[i] += 1e-6;
            let mut mm = mag.clone();
            mm[i] -= 1e-6;
            let fd = (objective(&mp) - objective(&mm)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", analytic[i]);
        }
    }
}

use super::AudioBuffer;
use crate::error::{Error, Result};

/// Zero crossings of the kernel per side, counted at the lower of the two rates.
const HALF_TAPS: f64 = 32.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.97;
const KAISER_BETA: f64 = 8.0;
/// Above this many phases kernels are evaluated per output sample.
const MAX_TABLE_PHASES: u64 = 4096;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

struct Kernel {
    cutoff: f64,
    half_width: f64,
    norm: f64,
}

impl Kernel {
    fn new(up: u64, down: u64) -> Self {
        let ratio = up as f64 / down as f64;
        let cutoff = ROLLOFF * ratio.min(1.0);
        Self {
            cutoff,
            half_width: HALF_TAPS / ratio.min(1.0),
            norm: bessel_i0(KAISER_BETA),
        }
    }

    fn eval(&self, tau: f64) -> f64 {
        let r = tau / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let x = std::f64::consts::PI * self.cutoff * tau;
        let sinc = if x == 0.0 { 1.0 } else { x.sin() / x };
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.norm;
        self.cutoff * sinc * window
    }

    /// Taps for an output landing `frac` input samples after input index 0,
    /// normalised to unit DC gain.
    fn taps(&self, frac: f64) -> (i64, Vec<f64>) {
        let lo = (frac - self.half_width).ceil() as i64;
        let hi = (frac + self.half_width).floor() as i64;
        let mut taps: Vec<f64> = (lo..=hi).map(|i| self.eval(frac - i as f64)).collect();
        let sum: f64 = taps.iter().sum();
        if sum != 0.0 {
            taps.iter_mut().for_each(|t| *t /= sum);
        }
        (lo, taps)
    }
}

/// Band-limited windowed-sinc resampling. Output length is
/// `round(len * target / source)`.
pub fn resample(audio: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    let source_rate = audio.sample_rate();
    if target_rate == source_rate {
        return Ok(audio.clone());
    }
    let g = gcd(target_rate as u64, source_rate as u64);
    let up = target_rate as u64 / g;
    let down = source_rate as u64 / g;
    let input = audio.samples();
    let out_len = ((input.len() as f64) * target_rate as f64 / source_rate as f64).round() as usize;
    let kernel = Kernel::new(up, down);

    let table: Option<Vec<(i64, Vec<f64>)>> = (up <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|p| kernel.taps(p as f64 / up as f64)).collect());

    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len as u64 {
        let pos = j * down;
        let base = (pos / up) as i64;
        let phase = pos % up;
        let owned;
        let (lo, taps) = match &table {
            Some(t) => {
                let (lo, taps) = &t[phase as usize];
                (*lo, taps.as_slice())
            }
            None => {
                owned = kernel.taps(phase as f64 / up as f64);
                (owned.0, owned.1.as_slice())
            }
        };
        let mut acc = 0.0;
        for (k, h) in taps.iter().enumerate() {
            let idx = base + lo + k as i64;
            if idx >= 0 && (idx as usize) < input.len() {
                acc += h * input[idx as usize];
            }
        }
        out.push(acc);
    }
    AudioBuffer::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, len: usize) -> AudioBuffer {
        let x = (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / rate as f64).sin())
            .collect();
        AudioBuffer::new(x, rate).unwrap()
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let aa: f64 = a.iter().map(|x| x * x).sum();
        let bb: f64 = b.iter().map(|x| x * x).sum();
        ab / (aa * bb).sqrt()
    }

    #[test]
    fn identity_rate_is_exact() {
        let x = sine(440.0, 16_000, 1000);
        let y = resample(&x, 16_000).unwrap();
        let err = x
            .samples()
            .iter()
            .zip(y.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn output_length_rounds() {
        let x = sine(440.0, 16_000, 16_001);
        assert_eq!(resample(&x, 8_000).unwrap().len(), 8_001); // 8000.5 rounds away from zero
        assert_eq!(resample(&x, 11_025).unwrap().len(), 11_026);
        assert!(resample(&x, 0).is_err());
    }

    #[test]
    fn low_tone_survives_round_trip() {
        let x = sine(1000.0, 16_000, 16_000);
        let y = resample(&resample(&x, 8_000).unwrap(), 16_000).unwrap();
        let interior = 200..15_800;
        let c = correlation(&x.samples()[interior.clone()], &y.samples()[interior]);
        assert!(c > 0.999, "correlation {c}");
    }

    #[test]
    fn tone_above_new_nyquist_is_removed() {
        let x = sine(7000.0, 16_000, 16_000);
        let y = resample(&resample(&x, 8_000).unwrap(), 16_000).unwrap();
        let interior = 200..15_800;
        let e_in: f64 = x.samples()[interior.clone()].iter().map(|v| v * v).sum();
        let e_out: f64 = y.samples()[interior].iter().map(|v| v * v).sum();
        let atten_db = 10.0 * (e_in / e_out.max(1e-300)).log10();
        assert!(atten_db > 20.0, "attenuation {atten_db} dB");
    }

    #[test]
    fn coprime_rates_fall_back_to_direct_kernels() {
        let x = sine(500.0, 16_000, 4000);
        let y = resample(&x, 9_973).unwrap();
        let back = resample(&y, 16_000).unwrap();
        let c = correlation(&x.samples()[300..3700], &back.samples()[300..3700]);
        assert!(c > 0.999, "correlation {c}");
    }
}

//! Lossy codec round trips: a deterministic in-process stand-in and an
//! external encoder/decoder driven through command templates.

use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::CodecFormat;
use crate::dsp::wav::{read_wav, write_wav, WavFormat};
use crate::dsp::{resample, AudioBuffer, OverlapNorm, StftConfig, StftEngine};
use crate::error::{Error, Result};

const SIM_FFT: usize = 512;
const SIM_HOP: usize = 256;
const SIM_BAND: usize = 16;
/// Quantiser step in band-RMS units at 1 kbps.
const SIM_STEP: f64 = 16.0;
/// Bitrate at which the low-pass sits at half the spectrum.
const SIM_KNEE_KBPS: f64 = 32.0;

/// Environment variable naming the encoder/decoder binary used by the
/// default templates.
pub const FFMPEG_ENV: &str = "QUIETMARK_FFMPEG";

/// Highest bin kept by the simulated codec at `kbps` (exclusive).
pub(crate) fn simulated_cutoff(bins: usize, kbps: u32) -> usize {
    let k = kbps as f64;
    ((bins as f64 * k / (k + SIM_KNEE_KBPS)).ceil() as usize).min(bins)
}

/// Deterministic lossy transform: a 512-point STFT whose magnitudes are
/// quantised per 16-bin band with step `band_rms * 16 / kbps`, bins above a
/// bitrate-dependent cutoff removed, then resynthesised with the original
/// phase. Zero delay, same length.
pub fn simulated_codec(audio: &AudioBuffer, kbps: u32) -> Result<AudioBuffer> {
    if kbps == 0 {
        return Err(Error::Config("bitrate must be positive".into()));
    }
    let engine = StftEngine::new(StftConfig::with_sizes(SIM_FFT, SIM_FFT, SIM_HOP))?;
    let len = audio.len();
    let frames = (len + SIM_HOP).div_ceil(SIM_HOP) + 1;
    let mut padded = vec![0.0; (frames - 1) * SIM_HOP + SIM_FFT];
    padded[SIM_HOP..SIM_HOP + len].copy_from_slice(audio.samples());
    let (spec, frames) = engine.analyze(&padded)?;
    let bins = engine.config().bins();
    let cutoff = simulated_cutoff(bins, kbps);
    let mut mag: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
    let phase: Vec<f64> = spec.iter().map(|c| c.arg()).collect();
    for t in 0..frames {
        for b0 in (0..bins).step_by(SIM_BAND) {
            let b1 = (b0 + SIM_BAND).min(bins);
            let energy: f64 = (b0..b1).map(|f| mag[f * frames + t].powi(2)).sum();
            let rms = (energy / (b1 - b0) as f64).sqrt();
            let step = rms * SIM_STEP / kbps as f64;
            for f in b0..b1 {
                let m = &mut mag[f * frames + t];
                *m = if f >= cutoff || step == 0.0 {
                    0.0
                } else {
                    (*m / step).round() * step
                };
            }
        }
    }
    let out = engine.synthesize(&mag, &phase, frames, OverlapNorm::Exact)?;
    AudioBuffer::new(out[SIM_HOP..SIM_HOP + len].to_vec(), audio.sample_rate())
}

/// Lag (in samples) by which `processed` trails `reference`, searched over
/// `[-max_lag, max_lag]` by FFT cross-correlation. Ties go to the smallest
/// absolute lag.
pub fn estimate_delay(reference: &[f64], processed: &[f64], max_lag: usize) -> isize {
    let n = (reference.len() + processed.len()).next_power_of_two().max(2);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |x: &[f64]| {
        let mut b = vec![Complex64::new(0.0, 0.0); n];
        b.iter_mut().zip(x).for_each(|(c, &v)| c.re = v);
        b
    };
    let mut a = load(reference);
    let mut b = load(processed);
    fwd.process(&mut a);
    fwd.process(&mut b);
    let mut c: Vec<Complex64> = b.iter().zip(&a).map(|(p, r)| p * r.conj()).collect();
    inv.process(&mut c);
    let at = |lag: isize| c[lag.rem_euclid(n as isize) as usize].re;
    let max_lag = max_lag.min(n / 2 - 1) as isize;
    let mut best = 0isize;
    for d in 1..=max_lag {
        for lag in [d, -d] {
            if at(lag) > at(best) * (1.0 + 1e-12) + 1e-300 {
                best = lag;
            }
        }
    }
    best
}

/// Shifts `processed` earlier by `delay` samples and fits it to `len`.
fn compensate(processed: &[f64], delay: isize, len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let j = i as isize + delay;
            if j >= 0 && (j as usize) < processed.len() {
                processed[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}

struct Pool {
    busy: Mutex<(usize, usize)>,
    freed: Condvar,
}

static POOL: Pool = Pool {
    busy: Mutex::new((0, 4)),
    freed: Condvar::new(),
};

/// Caps concurrently running codec subprocesses (default 4).
pub fn set_codec_pool_limit(limit: usize) {
    let mut g = POOL.busy.lock().unwrap_or_else(|e| e.into_inner());
    g.1 = limit.max(1);
    POOL.freed.notify_all();
}

struct Slot;

impl Slot {
    fn acquire() -> Self {
        let mut g = POOL.busy.lock().unwrap_or_else(|e| e.into_inner());
        while g.0 >= g.1 {
            g = POOL.freed.wait(g).unwrap_or_else(|e| e.into_inner());
        }
        g.0 += 1;
        Slot
    }
}

impl Drop for Slot {
    fn drop(&mut self) {
        let mut g = POOL.busy.lock().unwrap_or_else(|e| e.into_inner());
        g.0 -= 1;
        POOL.freed.notify_one();
    }
}

/// External encoder plus decoder, each a command template with `{in}`,
/// `{out}`, `{bitrate}` (kbps) and `{rate}` (Hz) placeholders. Templates are
/// split on whitespace and run without a shell.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecClient {
    pub encode: String,
    pub decode: String,
    /// Extension of the compressed intermediate file.
    pub extension: String,
    pub timeout: Duration,
    /// Search window for delay compensation.
    pub max_delay: usize,
}

impl CodecClient {
    /// ffmpeg-based templates for `format`; the binary comes from
    /// `QUIETMARK_FFMPEG` or defaults to `ffmpeg`.
    pub fn for_format(format: CodecFormat) -> Self {
        let bin = std::env::var(FFMPEG_ENV).unwrap_or_else(|_| "ffmpeg".into());
        let (codec, ext) = match format {
            CodecFormat::Mp3 => ("libmp3lame", "mp3"),
            CodecFormat::Ogg => ("libvorbis", "ogg"),
            CodecFormat::Aac | CodecFormat::Simulated => ("aac", "m4a"),
        };
        Self {
            encode: format!("{bin} -nostdin -y -loglevel error -i {{in}} -c:a {codec} -b:a {{bitrate}}k {{out}}"),
            decode: format!("{bin} -nostdin -y -loglevel error -i {{in}} -ar {{rate}} -ac 1 -c:a pcm_f32le {{out}}"),
            extension: ext.into(),
            timeout: Duration::from_secs(60),
            max_delay: 8192,
        }
    }

    fn run(&self, template: &str, input: &Path, output: &Path, bitrate: u32, rate: u32, log: &Path) -> Result<()> {
        let args: Vec<String> = template
            .split_whitespace()
            .map(|a| {
                a.replace("{in}", &input.to_string_lossy())
                    .replace("{out}", &output.to_string_lossy())
                    .replace("{bitrate}", &bitrate.to_string())
                    .replace("{rate}", &rate.to_string())
            })
            .collect();
        let (program, rest) = args
            .split_first()
            .ok_or_else(|| Error::Config("empty codec command template".into()))?;
        let failed = |reason: String| Error::CodecFailed {
            command: args.join(" "),
            reason,
        };
        let mut child = Command::new(program)
            .args(rest)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(std::fs::File::create(log)?)
            .spawn()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::CodecMissing(program.clone()),
                _ => failed(e.to_string()),
            })?;
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(failed(format!("timed out after {:?}", self.timeout)));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        if !status.success() {
            let stderr = std::fs::read_to_string(log).unwrap_or_default();
            return Err(failed(format!("{status}: {}", stderr.trim())));
        }
        Ok(())
    }

    /// Encode, decode, resample back to the input rate and align to the
    /// input by cross-correlation. Temporary files are removed on every path.
    pub fn round_trip(&self, audio: &AudioBuffer, bitrate: u32) -> Result<AudioBuffer> {
        let _slot = Slot::acquire();
        let dir = tempfile::tempdir()?;
        let src = dir.path().join("in.wav");
        let mid = dir.path().join(format!("coded.{}", self.extension));
        let dst = dir.path().join("out.wav");
        let log = dir.path().join("stderr.log");
        write_wav(&src, audio, WavFormat::Float32)?;
        let rate = audio.sample_rate();
        self.run(&self.encode, &src, &mid, bitrate, rate, &log)?;
        self.run(&self.decode, &mid, &dst, bitrate, rate, &log)?;
        let decoded = read_wav(&dst)?;
        let decoded = resample(&decoded, rate)?;
        let delay = estimate_delay(audio.samples(), decoded.samples(), self.max_delay);
        AudioBuffer::new(compensate(decoded.samples(), delay, audio.len()), rate)
    }
}

/// Where non-simulated codec formats are sent.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum CodecBackend {
    /// External binaries via [`CodecClient::for_format`].
    #[default]
    External,
    /// Explicit clients per format; formats without one fall back to the
    /// defaults.
    Clients(Vec<(CodecFormat, CodecClient)>),
    /// Every format is replaced by the simulated codec at the same bitrate.
    Simulated,
}

impl CodecBackend {
    pub fn round_trip(&self, audio: &AudioBuffer, format: CodecFormat, bitrate: u32) -> Result<AudioBuffer> {
        match (self, format) {
            (_, CodecFormat::Simulated) | (CodecBackend::Simulated, _) => simulated_codec(audio, bitrate),
            (CodecBackend::External, f) => CodecClient::for_format(f).round_trip(audio, bitrate),
            (CodecBackend::Clients(list), f) => match list.iter().find(|(g, _)| *g == f) {
                Some((_, c)) => c.round_trip(audio, bitrate),
                None => CodecClient::for_format(f).round_trip(audio, bitrate),
            },
        }
    }
}

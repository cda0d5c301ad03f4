//! Distortions applied to watermarked audio, at evaluation time on plain
//! buffers and at training time on the graph.
//!
//! Specs use the grammar `kind:key=val,key=val`, for example `gn:snr=40`,
//! `eq:centers=35/200/1000/4000,gain=15` or `codec:format=mp3,bitrate=128`.
//! Every spec may carry `seed=N`; all randomness is drawn from it.

mod codec;
pub mod graph;
mod synth;

use std::fmt;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use codec::{
    estimate_delay, set_codec_pool_limit, simulated_codec, CodecBackend, CodecClient, FFMPEG_ENV,
};
pub use graph::{
    differentiable_attack, sample_attack_from, sample_training_attack, AttackFamily, GraphAttack,
    TRAIN_FRAME_JITTER,
};
pub use synth::babble;

use crate::dsp::filter::{cascade, Biquad};
use crate::dsp::wav::read_wav;
use crate::dsp::{resample, AudioBuffer};
use crate::error::{Error, Result};

pub const EQ_CENTERS_HZ: [f64; 4] = [35.0, 200.0, 1000.0, 4000.0];
pub const DEFAULT_JITTER_RATE: f64 = 1e-3;
pub const CODEC_BITRATES: [u32; 3] = [64, 128, 256];
/// Lowest and highest rate drawn by a resample attack without a target.
pub const RESAMPLE_RANGE_HZ: (u32, u32) = (6400, 16000);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodecFormat {
    Mp3,
    Ogg,
    Aac,
    Simulated,
}

impl CodecFormat {
    pub const EXTERNAL: [CodecFormat; 3] = [CodecFormat::Mp3, CodecFormat::Ogg, CodecFormat::Aac];

    pub fn name(self) -> &'static str {
        match self {
            CodecFormat::Mp3 => "mp3",
            CodecFormat::Ogg => "ogg",
            CodecFormat::Aac => "aac",
            CodecFormat::Simulated => "simulated",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mp3" => Some(CodecFormat::Mp3),
            "ogg" | "vorbis" => Some(CodecFormat::Ogg),
            "aac" | "m4a" => Some(CodecFormat::Aac),
            "simulated" | "sim" => Some(CodecFormat::Simulated),
            _ => None,
        }
    }
}

/// How `quantize` rounds samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantGrid {
    /// Cast through IEEE half precision (only for 16 bits).
    Float,
    /// Uniform grid of `2^(bits-1)` steps per unit.
    Int,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Attack {
    GaussianNoise { snr_db: f64 },
    Crop { fraction: f64 },
    Eq { centers_hz: Vec<f64>, gain_db: f64, q: f64 },
    Mix { interferer: Option<PathBuf>, level_db: f64 },
    Quantize { bits: u32, grid: QuantGrid },
    TimeJitter { rate: f64 },
    Resample { target_hz: Option<u32> },
    Codec { format: CodecFormat, bitrate: u32 },
}

impl Attack {
    pub fn kind(&self) -> &'static str {
        match self {
            Attack::GaussianNoise { .. } => "gn",
            Attack::Crop { .. } => "crop",
            Attack::Eq { .. } => "eq",
            Attack::Mix { .. } => "mix",
            Attack::Quantize { .. } => "q",
            Attack::TimeJitter { .. } => "tj",
            Attack::Resample { .. } => "rs",
            Attack::Codec { .. } => "codec",
        }
    }

    /// Training-time family label.
    pub fn family(&self) -> &'static str {
        match self {
            Attack::GaussianNoise { .. } => "noise",
            Attack::TimeJitter { .. } => "jitter",
            Attack::Eq { .. } => "eq",
            Attack::Codec { .. } => "codec",
            _ => "other",
        }
    }
}

pub const KINDS: &str = "gn, crop, eq, mix, q, tj, rs, codec";

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub attack: Attack,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(attack: Attack, seed: u64) -> Self {
        Self { attack, seed }
    }

    /// Parses a spec; `default_seed` applies when the text has no `seed=`.
    pub fn parse(text: &str, default_seed: u64) -> Result<Self> {
        let bad = |reason: String| Error::AttackSpec {
            spec: text.to_string(),
            reason,
        };
        let (kind, rest) = text.trim().split_once(':').unwrap_or((text.trim(), ""));
        let mut params: Vec<(String, String)> = Vec::new();
        for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{item}`")))?;
            params.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
        }
        let mut seed = default_seed;
        let mut take = |key: &str| -> Option<String> {
            let pos = params.iter().position(|(k, _)| k == key)?;
            Some(params.remove(pos).1)
        };
        if let Some(s) = take("seed") {
            seed = s.parse().map_err(|_| bad(format!("bad seed `{s}`")))?;
        }
        let num = |v: Option<String>, key: &str, default: f64| -> Result<f64> {
            match v {
                None => Ok(default),
                Some(s) => s
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| bad(format!("`{key}` must be a number, got `{s}`"))),
            }
        };
        let range = |x: f64, key: &str, lo: f64, hi: f64| -> Result<f64> {
            if x < lo || x > hi {
                Err(bad(format!("`{key}` = {x} outside [{lo}, {hi}]")))
            } else {
                Ok(x)
            }
        };
        let attack = match kind.to_ascii_lowercase().as_str() {
            "gn" | "gaussian_noise" | "noise" => Attack::GaussianNoise {
                snr_db: range(num(take("snr"), "snr", 40.0)?, "snr", -20.0, 120.0)?,
            },
            "crop" | "50c" => {
                let fraction = num(take("fraction"), "fraction", 0.5)?;
                if !(0.0..1.0).contains(&fraction) {
                    return Err(bad(format!("`fraction` = {fraction} outside [0, 1)")));
                }
                Attack::Crop { fraction }
            }
            "eq" => {
                let centers_hz = match take("centers") {
                    None => EQ_CENTERS_HZ.to_vec(),
                    Some(s) => s
                        .split('/')
                        .map(|c| c.trim().parse::<f64>().ok().filter(|&x| x > 0.0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad(format!("bad centre list `{s}`")))?,
                };
                Attack::Eq {
                    centers_hz,
                    gain_db: range(num(take("gain"), "gain", 15.0)?, "gain", 0.0, 40.0)?,
                    q: range(num(take("q"), "q", 1.0)?, "q", 0.05, 50.0)?,
                }
            }
            "mix" | "mx" => Attack::Mix {
                interferer: take("path").map(PathBuf::from),
                level_db: range(num(take("level"), "level", -15.0)?, "level", -80.0, 20.0)?,
            },
            "q" | "quantize" => {
                let bits = num(take("bits"), "bits", 16.0)?;
                let grid = match take("grid").as_deref() {
                    None if bits == 16.0 => QuantGrid::Float,
                    None | Some("int") => QuantGrid::Int,
                    Some("float") => QuantGrid::Float,
                    Some(g) => return Err(bad(format!("unknown grid `{g}` (float, int)"))),
                };
                if bits.fract() != 0.0 || !(2.0..=32.0).contains(&bits) {
                    return Err(bad(format!("`bits` must be an integer in [2, 32], got {bits}")));
                }
                if grid == QuantGrid::Float && bits != 16.0 {
                    return Err(bad("float grid is only defined for 16 bits".into()));
                }
                Attack::Quantize {
                    bits: bits as u32,
                    grid,
                }
            }
            "tj" | "time_jitter" | "jitter" => Attack::TimeJitter {
                rate: range(num(take("rate"), "rate", DEFAULT_JITTER_RATE)?, "rate", 0.0, 0.1)?,
            },
            "rs" | "resample" => Attack::Resample {
                target_hz: match take("target") {
                    None => None,
                    Some(s) => Some(
                        s.parse::<u32>()
                            .ok()
                            .filter(|&r| (1000..=384_000).contains(&r))
                            .ok_or_else(|| bad(format!("bad target rate `{s}`")))?,
                    ),
                },
            },
            "codec" => {
                let format_name = take("format").unwrap_or_else(|| "simulated".into());
                let format = CodecFormat::from_name(&format_name)
                    .ok_or_else(|| bad(format!("unknown format `{format_name}` (mp3, ogg, aac, simulated)")))?;
                let bitrate = num(take("bitrate"), "bitrate", 64.0)?;
                if bitrate.fract() != 0.0 || bitrate <= 0.0 || bitrate > 100_000.0 {
                    return Err(bad(format!("bad bitrate {bitrate}")));
                }
                let bitrate = bitrate as u32;
                if format != CodecFormat::Simulated && !CODEC_BITRATES.contains(&bitrate) {
                    return Err(bad(format!("external codecs accept bitrates 64, 128, 256; got {bitrate}")));
                }
                Attack::Codec { format, bitrate }
            }
            other => return Err(bad(format!("unknown kind `{other}`; valid kinds: {KINDS}"))),
        };
        if let Some((k, _)) = params.first() {
            return Err(bad(format!("unknown key `{k}` for `{}`", attack.kind())));
        }
        Ok(Self { attack, seed })
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

impl std::str::FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, 0)
    }
}

/// Canonical spec text, always including the seed.
impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut params: Vec<String> = match &self.attack {
            Attack::GaussianNoise { snr_db } => vec![format!("snr={snr_db}")],
            Attack::Crop { fraction } => vec![format!("fraction={fraction}")],
            Attack::Eq { centers_hz, gain_db, q } => {
                let c: Vec<String> = centers_hz.iter().map(|c| c.to_string()).collect();
                vec![format!("centers={}", c.join("/")), format!("gain={gain_db}"), format!("q={q}")]
            }
            Attack::Mix { interferer, level_db } => {
                let mut p = vec![format!("level={level_db}")];
                if let Some(path) = interferer {
                    p.push(format!("path={}", path.display()));
                }
                p
            }
            Attack::Quantize { bits, grid } => {
                let g = match grid {
                    QuantGrid::Float => "float",
                    QuantGrid::Int => "int",
                };
                vec![format!("bits={bits}"), format!("grid={g}")]
            }
            Attack::TimeJitter { rate } => vec![format!("rate={rate}")],
            Attack::Resample { target_hz } => target_hz.iter().map(|t| format!("target={t}")).collect(),
            Attack::Codec { format, bitrate } => {
                vec![format!("format={}", format.name()), format!("bitrate={bitrate}")]
            }
        };
        params.push(format!("seed={}", self.seed));
        write!(f, "{}:{}", self.attack.kind(), params.join(","))
    }
}

/// Peaking sections at `centers` with a random sign per band; centres at or
/// above Nyquist are skipped.
pub fn eq_sections(centers: &[f64], gain_db: f64, q: f64, sample_rate: u32, rng: &mut impl Rng) -> Vec<Biquad> {
    centers
        .iter()
        .filter_map(|&fc| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (fc < sample_rate as f64 / 2.0).then(|| Biquad::peaking(fc, sign * gain_db, q, sample_rate))
        })
        .collect()
}

/// White noise scaled to exactly `rms(signal) * 10^(-snr/20)`.
pub fn noise_for(signal: &[f64], snr_db: f64, rng: &mut impl Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut n: Vec<f64> = (0..signal.len()).map(|_| StandardNormal.sample(rng)).collect();
    let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    let (s, r) = (rms(signal), rms(&n));
    let k = if r > 0.0 { s * 10f64.powf(-snr_db / 20.0) / r } else { 0.0 };
    n.iter_mut().for_each(|v| *v *= k);
    n
}

fn fit_length(mut x: Vec<f64>, len: usize) -> Vec<f64> {
    x.resize(len, 0.0);
    x
}

/// Applies `spec` with the default codec backend for its format.
pub fn apply_attack(audio: &AudioBuffer, spec: &AttackSpec) -> Result<AudioBuffer> {
    apply_attack_with(audio, spec, &CodecBackend::default())
}

/// Applies `spec`; external codec formats go through `backend`.
pub fn apply_attack_with(audio: &AudioBuffer, spec: &AttackSpec, backend: &CodecBackend) -> Result<AudioBuffer> {
    let mut rng = spec.rng();
    let sr = audio.sample_rate();
    let x = audio.samples();
    let out = match &spec.attack {
        Attack::GaussianNoise { snr_db } => {
            let n = noise_for(x, *snr_db, &mut rng);
            x.iter().zip(&n).map(|(a, b)| a + b).collect()
        }
        Attack::Crop { fraction } => {
            let cut = (fraction * x.len() as f64).floor() as usize;
            let start = rng.gen_range(0..=x.len() - cut);
            let mut y = x[..start].to_vec();
            y.extend_from_slice(&x[start + cut..]);
            y
        }
        Attack::Eq { centers_hz, gain_db, q } => {
            cascade(&eq_sections(centers_hz, *gain_db, *q, sr, &mut rng), x)
        }
        Attack::Mix { interferer, level_db } => {
            let other = match interferer {
                Some(path) => {
                    let src = read_wav(path)?;
                    let src = resample(&src, sr)?;
                    if src.is_empty() {
                        return Err(Error::Config(format!("interferer `{}` is empty", path.display())));
                    }
                    let off = rng.gen_range(0..src.len());
                    (0..x.len()).map(|i| src.samples()[(off + i) % src.len()]).collect()
                }
                None => babble(x.len(), sr, &mut rng),
            };
            let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len().max(1) as f64).sqrt();
            let (s, o) = (rms(x), rms(&other));
            let k = if o > 0.0 { s * 10f64.powf(level_db / 20.0) / o } else { 0.0 };
            x.iter().zip(&other).map(|(a, b)| a + k * b).collect()
        }
        Attack::Quantize { bits, grid } => match grid {
            QuantGrid::Float => x.iter().map(|&v| half::f16::from_f64(v).to_f64()).collect(),
            QuantGrid::Int => {
                let steps = (1u64 << (bits - 1)) as f64;
                x.iter()
                    .map(|&v| (v * steps).round().clamp(-steps, steps - 1.0) / steps)
                    .collect()
            }
        },
        Attack::TimeJitter { rate } => {
            let mut y = Vec::with_capacity(x.len() + x.len() / 100);
            for &v in x {
                let r: f64 = rng.gen();
                if r < rate / 2.0 {
                    continue;
                }
                y.push(v);
                if r < *rate {
                    y.push(v);
                }
            }
            y
        }
        Attack::Resample { target_hz } => {
            let target = target_hz.unwrap_or_else(|| {
                let (lo, hi) = RESAMPLE_RANGE_HZ;
                lo + 100 * rng.gen_range(0..=(hi - lo) / 100)
            });
            let down = resample(audio, target)?;
            fit_length(resample(&down, sr)?.into_samples(), x.len())
        }
        Attack::Codec { format, bitrate } => {
            return match format {
                CodecFormat::Simulated => simulated_codec(audio, *bitrate),
                f => backend.round_trip(audio, *f, *bitrate),
            }
        }
    };
    AudioBuffer::new(out, sr)
}

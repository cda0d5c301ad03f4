//! Training-time attacks on the graph. Each takes the watermarked signal and
//! returns the magnitude spectrogram the message decoder sees.

use std::sync::Arc;

use rand::Rng;

use super::{eq_sections, noise_for, Attack, AttackSpec, CodecBackend, CodecFormat, CODEC_BITRATES, EQ_CENTERS_HZ};
use crate::dsp::{AudioBuffer, StftEngine};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::spectral;

/// Per-frame probability of a drop or duplicate in training-time jitter
/// (half each).
pub const TRAIN_FRAME_JITTER: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct GraphAttack {
    /// `(1, F, T')` magnitude after the attack.
    pub magnitude: Var,
    /// For frame jitter: source frame of each output frame.
    pub frame_map: Option<Vec<usize>>,
}

fn jitter_map(frames: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut map = Vec::with_capacity(frames);
    let mut t = 0;
    while map.len() < frames {
        let r: f64 = rng.gen();
        let src = t.min(frames - 1);
        if r < TRAIN_FRAME_JITTER / 2.0 {
            t += 1;
        } else if r < TRAIN_FRAME_JITTER {
            map.push(src);
        } else {
            map.push(src);
            t += 1;
        }
    }
    map
}

/// Applies a trainable attack to the 1-D `signal` node.
///
/// Noise and EQ act on the waveform before a differentiable STFT; jitter
/// drops or repeats whole frames; codecs run on the value and pass the
/// gradient straight through.
pub fn differentiable_attack(
    g: &mut Graph,
    engine: &Arc<StftEngine>,
    signal: Var,
    spec: &AttackSpec,
    backend: &CodecBackend,
    sample_rate: u32,
) -> Result<GraphAttack> {
    let mut rng = spec.rng();
    let attacked = match &spec.attack {
        Attack::GaussianNoise { snr_db } => {
            let n = noise_for(g.value(signal).data(), *snr_db, &mut rng);
            let n = g.constant(Tensor::new(vec![n.len()], n)?);
            g.add(signal, n)?
        }
        Attack::Eq { centers_hz, gain_db, q } => {
            let sections = Arc::new(eq_sections(centers_hz, *gain_db, *q, sample_rate, &mut rng));
            spectral::filter(g, signal, &sections)?
        }
        Attack::TimeJitter { .. } => {
            let mag = spectral::stft_magnitude(g, engine, signal)?;
            let map = jitter_map(g.shape(mag)[2], &mut rng);
            let magnitude = g.index_select(mag, 2, &map)?;
            return Ok(GraphAttack {
                magnitude,
                frame_map: Some(map),
            });
        }
        Attack::Codec { format, bitrate } => {
            let (format, bitrate) = (*format, *bitrate);
            g.straight_through(signal, |t| {
                let audio = AudioBuffer::new(t.data().to_vec(), sample_rate)?;
                let out = backend.round_trip(&audio, format, bitrate)?;
                Tensor::new(t.shape().to_vec(), out.into_samples())
            })?
        }
        other => return Err(Error::EvaluationOnlyAttack(other.kind().to_string())),
    };
    Ok(GraphAttack {
        magnitude: spectral::stft_magnitude(g, engine, attacked)?,
        frame_map: None,
    })
}

/// Training distortion families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackFamily {
    Noise,
    Jitter,
    Eq,
    Codec,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 4] = [
        AttackFamily::Noise,
        AttackFamily::Jitter,
        AttackFamily::Eq,
        AttackFamily::Codec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Noise => "noise",
            AttackFamily::Jitter => "jitter",
            AttackFamily::Eq => "eq",
            AttackFamily::Codec => "codec",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "noise" | "gn" => Some(AttackFamily::Noise),
            "jitter" | "tj" => Some(AttackFamily::Jitter),
            "eq" => Some(AttackFamily::Eq),
            "codec" => Some(AttackFamily::Codec),
            _ => None,
        }
    }
}

/// One training distortion: noise, jitter, EQ or codec with equal
/// probability; codec format and bitrate uniform over the external set.
pub fn sample_training_attack(rng: &mut impl Rng) -> AttackSpec {
    sample_attack_from(rng, &AttackFamily::ALL)
}

/// Like [`sample_training_attack`], restricted to `families` (which must be
/// non-empty).
pub fn sample_attack_from(rng: &mut impl Rng, families: &[AttackFamily]) -> AttackSpec {
    let seed = rng.gen();
    let attack = match families[rng.gen_range(0..families.len())] {
        AttackFamily::Noise => Attack::GaussianNoise { snr_db: 40.0 },
        AttackFamily::Jitter => Attack::TimeJitter {
            rate: super::DEFAULT_JITTER_RATE,
        },
        AttackFamily::Eq => Attack::Eq {
            centers_hz: EQ_CENTERS_HZ.to_vec(),
            gain_db: 15.0,
            q: 1.0,
        },
        AttackFamily::Codec => Attack::Codec {
            format: CodecFormat::EXTERNAL[rng.gen_range(0..3)],
            bitrate: CODEC_BITRATES[rng.gen_range(0..3)],
        },
    };
    AttackSpec { attack, seed }
}

//! Message framing, repetition along time, alignment decoding and presence
//! detection.
//!
//! A frame is the payload bits followed by one end-token. The frame is tiled
//! over every STFT frame of the carrier; the decoder votes per cyclic
//! position and uses the end-token to find where the payload starts.

use rand::Rng;

use crate::error::{Error, Result};

/// Payload alphabet size.
pub const RADIX: usize = 2;
/// Symbol id of the end-token.
pub const END_TOKEN: usize = RADIX;
/// Alphabet size including the end-token.
pub const NUM_SYMBOLS: usize = RADIX + 1;
pub const MIN_PAYLOAD_BITS: usize = 8;
pub const MAX_PAYLOAD_BITS: usize = 64;
pub const DEFAULT_TAU: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MessageFrame {
    payload: Vec<usize>,
}

impl MessageFrame {
    pub fn new(payload: Vec<usize>) -> Result<Self> {
        let bad = |reason: String| Error::Payload {
            input: format!("{payload:?}"),
            reason,
        };
        if !(MIN_PAYLOAD_BITS..=MAX_PAYLOAD_BITS).contains(&payload.len()) {
            return Err(bad(format!(
                "payload must have {MIN_PAYLOAD_BITS} to {MAX_PAYLOAD_BITS} bits, got {}",
                payload.len()
            )));
        }
        if let Some(s) = payload.iter().find(|&&s| s >= RADIX) {
            return Err(bad(format!("symbol {s} is not a bit")));
        }
        Ok(Self { payload })
    }

    /// Uniformly random payload of `bits` bits.
    pub fn random(bits: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new((0..bits).map(|_| rng.gen_range(0..RADIX)).collect())
    }

    /// Parses `0b`-prefixed binary or plain hex (MSB first). A `0x` prefix is
    /// accepted for hex.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        let err = |reason: &str| Error::Payload {
            input: text.to_string(),
            reason: reason.to_string(),
        };
        let bits: Vec<usize> = if let Some(bin) = t.strip_prefix("0b") {
            bin.chars()
                .filter(|&c| c != '_')
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(err("binary payload may only contain 0 and 1")),
                })
                .collect::<Result<_>>()?
        } else {
            let hex = t.strip_prefix("0x").unwrap_or(t);
            let mut bits = Vec::with_capacity(hex.len() * 4);
            for c in hex.chars().filter(|&c| c != '_') {
                let nibble = c.to_digit(16).ok_or_else(|| err("not a hex digit"))?;
                bits.extend((0..4).rev().map(|k| ((nibble >> k) & 1) as usize));
            }
            bits
        };
        if bits.is_empty() {
            return Err(err("empty payload"));
        }
        Self::new(bits).map_err(|e| match e {
            Error::Payload { reason, .. } => err(&reason),
            other => other,
        })
    }

    pub fn payload(&self) -> &[usize] {
        &self.payload
    }

    /// Payload plus the trailing end-token.
    pub fn frame_symbols(&self) -> Vec<usize> {
        let mut s = self.payload.clone();
        s.push(END_TOKEN);
        s
    }

    /// Frame length `L_f`.
    pub fn len(&self) -> usize {
        self.payload.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Hex when the bit count is a multiple of 4, `0b` binary otherwise.
    pub fn to_text(&self) -> String {
        bits_to_text(&self.payload)
    }
}

/// Renders bits as hex (MSB first) when possible, else as `0b...`.
pub fn bits_to_text(bits: &[usize]) -> String {
    if !bits.is_empty() && bits.len() % 4 == 0 {
        bits.chunks(4)
            .map(|c| {
                let v = c.iter().fold(0u32, |acc, &b| (acc << 1) | (b as u32 & 1));
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    } else {
        let mut s = String::from("0b");
        s.extend(bits.iter().map(|&b| if b == 1 { '1' } else { '0' }));
        s
    }
}

/// The frame tiled cyclically over `frames` positions.
pub fn frame_and_repeat(frame: &MessageFrame, frames: usize) -> Result<Vec<usize>> {
    let symbols = frame.frame_symbols();
    if frames < symbols.len() {
        return Err(too_short(frames, symbols.len()));
    }
    Ok((0..frames).map(|t| symbols[t % symbols.len()]).collect())
}

fn too_short(frames: usize, needed: usize) -> Error {
    Error::CarrierTooShort {
        frames,
        needed,
        min_seconds: None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeReport {
    pub payload: Vec<usize>,
    /// Index of the first frame whose cyclic position is payload bit 0.
    pub offset: usize,
    /// Votes for the chosen symbol at each frame position (payload bits,
    /// then the end-token).
    pub mode_counts: Vec<usize>,
    /// Frames observed at each frame position.
    pub position_totals: Vec<usize>,
    /// Complete repetitions in the sequence.
    pub repetitions: usize,
    pub detected: bool,
}

impl DecodeReport {
    /// `mode_counts / position_totals` per frame position, end-token last.
    pub fn mode_ratios(&self) -> Vec<f64> {
        self.mode_counts
            .iter()
            .zip(&self.position_totals)
            .map(|(&m, &n)| if n == 0 { 0.0 } else { m as f64 / n as f64 })
            .collect()
    }

    pub fn payload_text(&self) -> String {
        bits_to_text(&self.payload)
    }

    /// Fraction of payload bits equal to `truth`.
    pub fn bit_accuracy(&self, truth: &[usize]) -> f64 {
        if truth.is_empty() {
            return 0.0;
        }
        let hits = self.payload.iter().zip(truth).filter(|(a, b)| a == b).count();
        hits as f64 / truth.len() as f64
    }
}

/// Picks the cyclic offset whose frame hypothesis agrees with the most
/// predictions, then reads each payload bit as the modal bit at its position.
///
/// A position's agreement is its modal bit count for payload positions and
/// its end-token count for the end position; ties on the offset go to the
/// smallest, ties on a bit to 0. `detected` is left false; see [`detect`].
pub fn align_and_decode(predictions: &[usize], frame_len: usize) -> Result<DecodeReport> {
    if frame_len < 2 {
        return Err(Error::Config("frame length must be at least 2".into()));
    }
    if predictions.len() < frame_len {
        return Err(too_short(predictions.len(), frame_len));
    }
    if let Some(&s) = predictions.iter().find(|&&s| s >= NUM_SYMBOLS) {
        return Err(Error::SymbolOutOfRange {
            id: s,
            num_symbols: NUM_SYMBOLS,
        });
    }
    let mut counts = vec![[0usize; NUM_SYMBOLS]; frame_len];
    for (t, &s) in predictions.iter().enumerate() {
        counts[t % frame_len][s] += 1;
    }
    let best_bit = |c: &[usize; NUM_SYMBOLS]| {
        let mut best = 0;
        for s in 1..RADIX {
            if c[s] > c[best] {
                best = s;
            }
        }
        best
    };
    let score = |phi: usize| -> usize {
        (0..frame_len)
            .map(|j| {
                let c = &counts[(j + phi) % frame_len];
                if j + 1 == frame_len {
                    c[END_TOKEN]
                } else {
                    c[best_bit(c)]
                }
            })
            .sum()
    };
    let mut offset = 0;
    let mut best = score(0);
    for phi in 1..frame_len {
        let s = score(phi);
        if s > best {
            best = s;
            offset = phi;
        }
    }
    let mut payload = Vec::with_capacity(frame_len - 1);
    let mut mode_counts = Vec::with_capacity(frame_len);
    let mut position_totals = Vec::with_capacity(frame_len);
    for j in 0..frame_len {
        let c = &counts[(j + offset) % frame_len];
        if j + 1 == frame_len {
            mode_counts.push(c[END_TOKEN]);
        } else {
            let b = best_bit(c);
            payload.push(b);
            mode_counts.push(c[b]);
        }
        position_totals.push(c.iter().sum());
    }
    Ok(DecodeReport {
        payload,
        offset,
        mode_counts,
        position_totals,
        repetitions: predictions.len() / frame_len,
        detected: false,
    })
}

/// Presence test: the modal ratio of every payload position, and the
/// end-token ratio at its position, must reach `tau`. Including the
/// end-token rejects decoders that emit one symbol everywhere.
pub fn detect(report: &DecodeReport, tau: f64) -> Result<bool> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    let ratios = report.mode_ratios();
    Ok(!ratios.is_empty() && ratios.iter().all(|&r| r >= tau))
}

/// [`align_and_decode`] followed by [`detect`], with the flag filled in.
pub fn decode(predictions: &[usize], frame_len: usize, tau: f64) -> Result<DecodeReport> {
    let mut report = align_and_decode(predictions, frame_len)?;
    report.detected = detect(&report, tau)?;
    Ok(report)
}

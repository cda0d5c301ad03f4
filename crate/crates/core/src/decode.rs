//! Audio-level decoding: STFT, per-frame symbol predictions, alignment and
//! detection.

use crate::dsp::{resample, stft, AudioBuffer};
use crate::error::{Error, Result};
use crate::msgcodec::{decode, DecodeReport};
use crate::nets::WatermarkModel;

/// Per-frame argmax symbols for `audio` (resampled to the model rate first).
pub fn predict_frames(model: &WatermarkModel, audio: &AudioBuffer) -> Result<Vec<usize>> {
    let audio = if audio.sample_rate() == model.sample_rate() {
        audio.clone()
    } else {
        resample(audio, model.sample_rate())?
    };
    let spec = stft(&audio, model.stft_config())?;
    model.predict_symbols(spec.magnitude(), spec.frames())
}

/// Decodes a payload of `payload_bits` bits and runs detection at `tau`.
pub fn decode_audio(model: &WatermarkModel, audio: &AudioBuffer, payload_bits: usize, tau: f64) -> Result<DecodeReport> {
    let frame_len = payload_bits + 1;
    let cfg = model.stft_config();
    if audio.len() < cfg.window_length {
        return Err(Error::CarrierTooShort {
            frames: 0,
            needed: frame_len,
            min_seconds: Some(cfg.samples_for(frame_len) as f64 / model.sample_rate() as f64),
        });
    }
    let frames = predict_frames(model, audio)?;
    decode(&frames, frame_len, tau).map_err(|e| match e {
        Error::CarrierTooShort { frames, needed, .. } => Error::CarrierTooShort {
            frames,
            needed,
            min_seconds: Some(cfg.samples_for(needed) as f64 / model.sample_rate() as f64),
        },
        other => other,
    })
}

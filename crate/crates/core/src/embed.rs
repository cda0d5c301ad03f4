//! Watermark embedding: half-band masking, SDR-calibrated scaling, ReLU
//! thresholding against the carrier and resynthesis with the carrier phase.
//!
//! With `k = ||C|| * 10^(-alpha/20)` the scaled term is
//! `W = -|raw| * k / max(||raw||, eps)`, so `||W|| = k` and `C' = relu(C + W)`
//! satisfies `||C' - C|| <= k` whatever the network produced.

use std::sync::Arc;

use crate::dsp::{magnitude_sdr, AudioBuffer, OverlapNorm, Spectrogram, StftEngine};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::msgcodec::{frame_and_repeat, MessageFrame};
use crate::nets::{ModelVars, WatermarkModel};
use crate::spectral;

pub const DEFAULT_ALPHA: f64 = 47.0;
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedConfig {
    /// SDR floor in dB.
    pub alpha: f64,
    /// Confine the watermark to bins below `F / 2`.
    pub half_band: bool,
    /// Guard on the raw message norm.
    pub epsilon: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            half_band: true,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl EmbedConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1e-6], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// `10^(-alpha/20)`.
    pub fn budget(&self) -> f64 {
        10f64.powf(-self.alpha / 20.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedResult {
    /// `C'` with the carrier's phase.
    pub watermarked_spec: Spectrogram,
    /// `W`, shaped `(1, F, T)`; never positive.
    pub watermark_term: Tensor,
    /// `20 log10(||C|| / ||C' - C||)`.
    pub achieved_sdr: f64,
    /// Bins where `C + W < 0` was clamped to zero.
    pub clipped_bins: usize,
    /// Complete message repetitions in the carrier.
    pub repetitions: usize,
}

/// 0/1 mask over `(1, bins, frames)` keeping bins below `floor(bins / 2)`.
pub fn half_band_tensor(bins: usize, frames: usize) -> Tensor {
    let cut = bins / 2;
    Tensor::from_fn(&[1, bins, frames], |i| if i / frames < cut { 1.0 } else { 0.0 })
}

fn check_grid(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[1, f, frames] => Ok((f, frames)),
        s => Err(Error::ShapeMismatch {
            op,
            left: s.to_vec(),
            right: vec![1, 0, 0],
        }),
    }
}

/// Zeroes bins `>= floor(F / 2)` of a `(1, F, T)` message spectrogram.
pub fn half_band_mask(msg: &Tensor) -> Result<Tensor> {
    let (f, frames) = check_grid("half_band_mask", msg)?;
    Ok(msg.zip_map(&half_band_tensor(f, frames), |a, m| a * m))
}

fn carrier_scale(carrier: &Tensor, cfg: &EmbedConfig) -> Result<f64> {
    if carrier.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Config("carrier magnitude must be finite and non-negative".into()));
    }
    let norm = carrier.norm();
    if norm == 0.0 {
        return Err(Error::SilentCarrier);
    }
    Ok(norm * cfg.budget())
}

/// `W = -|raw| * ||C|| 10^(-alpha/20) / max(||raw||, eps)`.
pub fn scale_message(raw: &Tensor, carrier: &Tensor, cfg: &EmbedConfig) -> Result<Tensor> {
    cfg.validate()?;
    if raw.shape() != carrier.shape() {
        return Err(Error::ShapeMismatch {
            op: "scale_message",
            left: raw.shape().to_vec(),
            right: carrier.shape().to_vec(),
        });
    }
    let k = carrier_scale(carrier, cfg)?;
    let inv = 1.0 / raw.norm().max(cfg.epsilon);
    Ok(raw.map(|r| r.abs() * inv * -k))
}

/// `C' = max(C + W, 0)` and the number of clamped bins.
pub fn apply_watermark(carrier: &Tensor, w: &Tensor) -> Result<(Tensor, usize)> {
    if carrier.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_watermark",
            left: carrier.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if let Some((index, &value)) = w.data().iter().enumerate().find(|(_, &v)| v > 0.0) {
        return Err(Error::PositiveWatermark { index, value });
    }
    let mut clipped = 0;
    let out = carrier.zip_map(w, |c, w| if c + w > 0.0 { c + w } else { 0.0 });
    for (c, w) in carrier.data().iter().zip(w.data()) {
        if c + w < 0.0 {
            clipped += 1;
        }
    }
    Ok((out, clipped))
}

/// Nodes of the embedding pipeline on a graph.
#[derive(Debug, Clone, Copy)]
pub struct EmbedNodes {
    pub carrier: Var,
    /// Carrier decoder output before masking.
    pub raw: Var,
    pub watermark: Var,
    /// `C'`.
    pub embedded: Var,
}

/// Builds `C' = relu(C + S_c(mask(D_c([E(C), C, L(M)]))))` on `g`.
pub fn embed_graph(
    g: &mut Graph,
    model: &WatermarkModel,
    vars: &ModelVars,
    carrier: Tensor,
    symbols: &[usize],
    cfg: &EmbedConfig,
) -> Result<EmbedNodes> {
    cfg.validate()?;
    let (bins, frames) = check_grid("embed", &carrier)?;
    let k = carrier_scale(&carrier, cfg)?;
    let c = g.constant(carrier);
    let me = model.embed_message(g, vars, symbols)?;
    let enc = model.encode_carrier(g, vars, c)?;
    let h = model.carrier_decoder_input(g, enc, c, me)?;
    let raw = model.decode_carrier(g, vars, h)?;
    let masked = if cfg.half_band {
        g.mask(raw, half_band_tensor(bins, frames))?
    } else {
        raw
    };
    let mag = g.abs(masked);
    let norm = g.l2_norm(masked);
    let norm = g.clamp_min(norm, cfg.epsilon);
    let inv = g.recip(norm);
    let unit = g.mul(mag, inv)?;
    let watermark = g.scale(unit, -k);
    let sum = g.add(c, watermark)?;
    let embedded = g.relu(sum);
    Ok(EmbedNodes {
        carrier: c,
        raw,
        watermark,
        embedded,
    })
}

/// Minimum number of samples that hold one full frame at `model`'s STFT.
pub fn min_samples(model: &WatermarkModel, frame: &MessageFrame) -> usize {
    model.stft_config().samples_for(frame.len())
}

/// Full embedding of `frame`, repeated over the whole clip.
///
/// The output is `x + istft(C' - C)`: inside the fully overlapped region this
/// equals `istft(C')` with the carrier phase, and samples outside the last
/// analysis frame pass through untouched.
pub fn embed(
    model: &WatermarkModel,
    audio: &AudioBuffer,
    frame: &MessageFrame,
    cfg: &EmbedConfig,
) -> Result<(AudioBuffer, EmbedResult)> {
    cfg.validate()?;
    if audio.sample_rate() != model.sample_rate() {
        return Err(Error::Config(format!(
            "audio is {} Hz but the model expects {} Hz",
            audio.sample_rate(),
            model.sample_rate()
        )));
    }
    let stft_cfg = *model.stft_config();
    let needed = min_samples(model, frame);
    let too_short = |frames| Error::CarrierTooShort {
        frames,
        needed: frame.len(),
        min_seconds: Some(needed as f64 / audio.sample_rate() as f64),
    };
    if audio.len() < needed {
        return Err(too_short(if audio.len() < stft_cfg.window_length {
            0
        } else {
            stft_cfg.frames_for(audio.len())
        }));
    }
    let engine = Arc::new(StftEngine::new(stft_cfg)?);
    let spec = crate::dsp::stft::stft_with(&engine, audio)?;
    let frames = spec.frames();
    let symbols = frame_and_repeat(frame, frames).map_err(|_| too_short(frames))?;
    let carrier = Tensor::new(vec![1, spec.bins(), frames], spec.magnitude().to_vec())?;

    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let nodes = embed_graph(&mut g, model, &vars, carrier, &symbols, cfg)?;
    let w = g.value(nodes.watermark).clone();
    let c_prime = g.value(nodes.embedded).clone();
    let clipped_bins = w
        .data()
        .iter()
        .zip(spec.magnitude())
        .filter(|(w, c)| *c + *w < 0.0)
        .count();
    let delta = g.sub(nodes.embedded, nodes.carrier)?;
    let phase = Arc::new(spec.phase().to_vec());
    let norm = OverlapNorm::Floor(engine.interior_floor());
    let residual = spectral::synthesize(&mut g, &engine, delta, &phase, norm, audio.len())?;
    let samples: Vec<f64> = audio
        .samples()
        .iter()
        .zip(g.value(residual).data())
        .map(|(x, r)| x + r)
        .collect();

    let achieved_sdr = magnitude_sdr(spec.magnitude(), c_prime.data())?;
    let watermarked_spec = spec.with_magnitude(c_prime.into_data())?;
    Ok((
        AudioBuffer::new(samples, audio.sample_rate())?,
        EmbedResult {
            watermarked_spec,
            watermark_term: w,
            achieved_sdr,
            clipped_bins,
            repetitions: frames / frame.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftConfig};
    use crate::nets::NetConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t3(data: &[f64], f: usize) -> Tensor {
        Tensor::new(vec![1, f, data.len() / f], data.to_vec()).unwrap()
    }

    fn tiny_model(seed: u64) -> WatermarkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stft = StftConfig::with_sizes(64, 64, 32);
        WatermarkModel::new(NetConfig::compact(stft.bins()), stft, 8000, &mut rng).unwrap()
    }

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> AudioBuffer {
        AudioBuffer::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap()
    }

    #[test]
    fn mask_examples() {
        let ones = Tensor::full(&[1, 8, 1], 1.0);
        let m = half_band_mask(&ones).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(half_band_mask(&m).unwrap(), m);
        let odd = half_band_mask(&Tensor::full(&[1, 9, 2], 2.0)).unwrap();
        assert_eq!(odd.data()[7], 2.0);
        assert_eq!(odd.data()[8], 0.0);
        assert!(half_band_mask(&Tensor::zeros(&[8, 2])).is_err());
    }

    #[test]
    fn scale_examples() {
        let cfg = EmbedConfig::with_alpha(40.0);
        let c = t3(&[60.0, 80.0], 2);
        let w = scale_message(&t3(&[3.0, -1.0], 2), &c, &cfg).unwrap();
        assert!((w.norm() - 1.0).abs() < 1e-12);
        assert!(w.data().iter().all(|&v| v <= 0.0));
        let z = scale_message(&Tensor::zeros(&[1, 2, 1]), &c, &cfg).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let err = scale_message(&c, &Tensor::zeros(&[1, 2, 1]), &cfg).unwrap_err();
        assert_eq!(err.to_string(), "silent carrier cannot host watermark");
    }

    #[test]
    fn scale_hits_alpha_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EmbedConfig::with_alpha(47.0);
        let c = Tensor::from_fn(&[1, 33, 20], |_| rng.gen_range(0.0..3.0));
        let raw = Tensor::from_fn(&[1, 33, 20], |_| rng.gen_range(-1.0..1.0));
        let w = scale_message(&raw, &c, &cfg).unwrap();
        let sdr = 20.0 * (c.norm() / w.norm()).log10();
        assert!((sdr - 47.0).abs() < 1e-4, "{sdr}");
    }

    #[test]
    fn apply_examples() {
        let (cp, clipped) = apply_watermark(&t3(&[5.0, 3.0], 2), &t3(&[-1.0, -4.0], 2)).unwrap();
        assert_eq!((cp.data(), clipped), (&[4.0, 0.0][..], 1));
        let c = t3(&[5.0, 3.0], 2);
        assert_eq!(apply_watermark(&c, &Tensor::zeros(&[1, 2, 1])).unwrap(), (c.clone(), 0));
        let err = apply_watermark(&c, &t3(&[-1.0, 0.5], 2)).unwrap_err();
        assert!(err.to_string().contains("positive watermark violates phase constraint"));
    }

    #[test]
    fn clipping_only_raises_sdr() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EmbedConfig::with_alpha(20.0);
        let c = Tensor::from_fn(&[1, 16, 16], |_| rng.gen_range(1.0..2.0));
        // |W| <= C everywhere: exact
        let w = scale_message(&Tensor::from_fn(&[1, 16, 16], |_| rng.gen_range(0.5..1.0)), &c, &cfg).unwrap();
        let (cp, clipped) = apply_watermark(&c, &w).unwrap();
        assert_eq!(clipped, 0);
        let sdr = magnitude_sdr(c.data(), cp.data()).unwrap();
        assert!((sdr - 20.0).abs() < 1e-9);
        // concentrate the budget on one bin so it overshoots
        let mut raw = Tensor::zeros(&[1, 16, 16]);
        raw.data_mut()[3] = 1.0;
        let w = scale_message(&raw, &c, &cfg).unwrap();
        let (cp, clipped) = apply_watermark(&c, &w).unwrap();
        assert_eq!(clipped, 1);
        assert!(magnitude_sdr(c.data(), cp.data()).unwrap() > 20.0);
    }

    #[test]
    fn graph_matches_value_functions() {
        let model = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = Tensor::from_fn(&[1, 33, 12], |_| rng.gen_range(0.0..1.0));
        let symbols: Vec<usize> = (0..12).map(|t| t % 3).collect();
        for half_band in [true, false] {
            let cfg = EmbedConfig {
                alpha: 30.0,
                half_band,
                ..EmbedConfig::default()
            };
            let mut g = Graph::new();
            let vars = model.bind(&mut g, false);
            let n = embed_graph(&mut g, &model, &vars, c.clone(), &symbols, &cfg).unwrap();
            let raw = g.value(n.raw).clone();
            let masked = if half_band { half_band_mask(&raw).unwrap() } else { raw };
            let w = scale_message(&masked, &c, &cfg).unwrap();
            assert_eq!(g.value(n.watermark), &w);
            assert_eq!(g.value(n.embedded), &apply_watermark(&c, &w).unwrap().0);
        }
    }

    #[test]
    fn embed_end_to_end_invariants() {
        let model = tiny_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let audio = noise(&mut rng, 2000);
        let frame = MessageFrame::random(8, &mut rng).unwrap();
        let cfg = EmbedConfig::with_alpha(40.0);
        let (y, r) = embed(&model, &audio, &frame, &cfg).unwrap();
        assert_eq!(y.len(), audio.len());
        assert!(r.achieved_sdr >= 40.0 - 1e-6);
        assert!(r.watermark_term.data().iter().all(|&w| w <= 0.0));
        let c = stft(&audio, model.stft_config()).unwrap();
        let cp = r.watermarked_spec.magnitude();
        for (a, b) in c.magnitude().iter().zip(cp) {
            assert!(*b >= 0.0 && b <= a);
        }
        let frames = c.frames();
        for f in 16..33 {
            assert_eq!(&cp[f * frames..(f + 1) * frames], &c.magnitude()[f * frames..(f + 1) * frames]);
        }
        assert_eq!(r.watermarked_spec.phase(), c.phase());
        assert_eq!(r.repetitions, frames / 9);
    }

    #[test]
    fn higher_alpha_means_smaller_change() {
        let model = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let audio = noise(&mut rng, 3000);
        let frame = MessageFrame::random(8, &mut rng).unwrap();
        let diff = |alpha| {
            let (y, _) = embed(&model, &audio, &frame, &EmbedConfig::with_alpha(alpha)).unwrap();
            crate::dsp::l2(
                &y.samples()
                    .iter()
                    .zip(audio.samples())
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            )
        };
        assert!(diff(60.0) < diff(30.0));
    }

    #[test]
    fn short_and_silent_inputs() {
        let model = tiny_model(4);
        let frame = MessageFrame::random(8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let short = AudioBuffer::silence(200, 8000);
        let err = embed(&model, &short, &frame, &EmbedConfig::default()).unwrap_err();
        assert!(err.to_string().contains("minimum duration 0.040 s"), "{err}");
        let silent = AudioBuffer::silence(2000, 8000);
        assert!(matches!(
            embed(&model, &silent, &frame, &EmbedConfig::default()),
            Err(Error::SilentCarrier)
        ));
        let wrong_rate = AudioBuffer::silence(2000, 16_000);
        assert!(embed(&model, &wrong_rate, &frame, &EmbedConfig::default()).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(EmbedConfig::with_alpha(0.0).validate().is_err());
        let mut c = EmbedConfig::default();
        c.epsilon = 1e-3;
        assert!(c.validate().is_err());
        c.epsilon = 1e-12;
        assert!(c.validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn sdr_floor_and_constraints(seed in 0u64..1_000_000, alpha in 20.0f64..60.0, half_band: bool) {
                let model = tiny_model(seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let audio = noise(&mut rng, 1200);
                let frame = MessageFrame::random(8, &mut rng).unwrap();
                let cfg = EmbedConfig { alpha, half_band, ..EmbedConfig::default() };
                let (_, r) = embed(&model, &audio, &frame, &cfg).unwrap();
                prop_assert!(r.achieved_sdr >= alpha - 1e-6);
                if r.clipped_bins == 0 {
                    prop_assert!((r.achieved_sdr - alpha).abs() < 1e-4);
                }
                prop_assert!(r.watermark_term.data().iter().all(|&w| w <= 0.0));
            }

            #[test]
            fn mask_is_idempotent_and_shrinks(values in prop::collection::vec(-5.0f64..5.0, 2..64)) {
                let n = values.len();
                let t = Tensor::new(vec![1, n, 1], values).unwrap();
                let m = half_band_mask(&t).unwrap();
                prop_assert_eq!(half_band_mask(&m).unwrap(), m.clone());
                prop_assert!(m.norm() <= t.norm());
            }
        }
    }
}

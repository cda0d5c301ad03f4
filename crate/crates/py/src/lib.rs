//! Python bindings: the model (load, embed, decode), attacks, payload
//! parsing, alignment decoding and the synthetic clip generator.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use quietmark::attacks::{apply_attack_with, AttackSpec, CodecBackend};
use quietmark::data::synth_corpus;
use quietmark::decode::decode_audio;
use quietmark::dsp::AudioBuffer;
use quietmark::embed::{embed, EmbedConfig, DEFAULT_ALPHA};
use quietmark::msgcodec::{align_and_decode, detect, MessageFrame, DEFAULT_TAU};
use quietmark::nets::{NetConfig, WatermarkModel};
use quietmark::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Read { .. } | Error::Io(_) | Error::Wav(_) | Error::CodecMissing(_) | Error::CodecFailed { .. } => {
            PyOSError::new_err(e.to_string())
        }
        Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn audio(samples: Vec<f64>, sample_rate: u32) -> PyResult<AudioBuffer> {
    AudioBuffer::new(samples, sample_rate).map_err(py_err)
}

/// Watermark encoder/decoder pair.
#[pyclass(name = "Model", module = "pyquietmark")]
pub struct PyModel {
    inner: WatermarkModel,
}

#[pymethods]
impl PyModel {
    /// Randomly initialised model; `profile` is "16k" or "44k",
    /// `architecture` "standard" or "compact".
    #[new]
    #[pyo3(signature = (profile = "16k", architecture = "compact", seed = 0))]
    fn new(profile: &str, architecture: &str, seed: u64) -> PyResult<Self> {
        let (stft, rate) = match profile {
            "16k" => (quietmark::dsp::StftConfig::profile_16k(), 16_000),
            "44k" => (quietmark::dsp::StftConfig::profile_44k(), 44_100),
            p => return Err(PyValueError::new_err(format!("unknown profile `{p}`"))),
        };
        let net = match architecture {
            "standard" => NetConfig::standard(stft.bins()),
            "compact" => NetConfig::compact(stft.bins()),
            a => return Err(PyValueError::new_err(format!("unknown architecture `{a}`"))),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = WatermarkModel::new(net, stft, rate, &mut rng).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: WatermarkModel::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate()
    }

    #[getter]
    fn bins(&self) -> usize {
        self.inner.config().bins
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Embeds `payload` (hex or `0b` binary). Returns the watermarked samples
    /// and a report dict.
    #[pyo3(signature = (samples, sample_rate, payload, alpha = DEFAULT_ALPHA, half_band = true))]
    fn encode<'py>(
        &self,
        py: Python<'py>,
        samples: Vec<f64>,
        sample_rate: u32,
        payload: &str,
        alpha: f64,
        half_band: bool,
    ) -> PyResult<(Vec<f64>, Bound<'py, PyDict>)> {
        let frame = MessageFrame::parse(payload).map_err(py_err)?;
        let cfg = EmbedConfig {
            alpha,
            half_band,
            ..EmbedConfig::default()
        };
        let x = audio(samples, sample_rate)?;
        let (y, r) = embed(&self.inner, &x, &frame, &cfg).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("achieved_sdr_db", r.achieved_sdr)?;
        d.set_item("clipped_bins", r.clipped_bins)?;
        d.set_item("repetitions", r.repetitions)?;
        d.set_item("duration_s", y.duration_secs())?;
        Ok((y.into_samples(), d))
    }

    /// Decodes a `bits`-bit payload and runs detection at `tau`.
    #[pyo3(signature = (samples, sample_rate, bits, tau = DEFAULT_TAU))]
    fn decode<'py>(
        &self,
        py: Python<'py>,
        samples: Vec<f64>,
        sample_rate: u32,
        bits: usize,
        tau: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let x = audio(samples, sample_rate)?;
        let r = decode_audio(&self.inner, &x, bits, tau).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("payload_hex", r.payload_text())?;
        d.set_item("payload", r.payload.clone())?;
        d.set_item("detected", r.detected)?;
        d.set_item("offset", r.offset)?;
        d.set_item("per_position_mode_ratio", r.mode_ratios())?;
        d.set_item("repetitions", r.repetitions)?;
        Ok(d)
    }

    /// Per-frame argmax symbols of the message decoder.
    fn predict_frames(&self, samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<usize>> {
        let x = audio(samples, sample_rate)?;
        quietmark::decode::predict_frames(&self.inner, &x).map_err(py_err)
    }
}

/// Applies an attack spec such as `"gn:snr=40"`. Returns the new samples.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, spec, seed = 0, simulated_codecs = false))]
fn attack(samples: Vec<f64>, sample_rate: u32, spec: &str, seed: u64, simulated_codecs: bool) -> PyResult<Vec<f64>> {
    let spec = AttackSpec::parse(spec, seed).map_err(py_err)?;
    let backend = if simulated_codecs {
        CodecBackend::Simulated
    } else {
        CodecBackend::External
    };
    let x = audio(samples, sample_rate)?;
    Ok(apply_attack_with(&x, &spec, &backend).map_err(py_err)?.into_samples())
}

/// Payload text to a bit list.
#[pyfunction]
fn parse_payload(text: &str) -> PyResult<Vec<usize>> {
    Ok(MessageFrame::parse(text).map_err(py_err)?.payload().to_vec())
}

/// Alignment decoding of a per-frame symbol sequence. Returns
/// `(payload, offset, detected)`.
#[pyfunction]
#[pyo3(signature = (symbols, frame_len, tau = DEFAULT_TAU))]
fn decode_symbols(symbols: Vec<usize>, frame_len: usize, tau: f64) -> PyResult<(Vec<usize>, usize, bool)> {
    let r = align_and_decode(&symbols, frame_len).map_err(py_err)?;
    let found = detect(&r, tau).map_err(py_err)?;
    Ok((r.payload, r.offset, found))
}

/// Synthetic test clips (tones, chirps, filtered noise).
#[pyfunction]
#[pyo3(signature = (count, seconds, sample_rate = 16_000, seed = 0))]
fn synth_clips(count: usize, seconds: f64, sample_rate: u32, seed: u64) -> Vec<Vec<f64>> {
    synth_corpus(count, seconds, sample_rate, seed)
        .into_iter()
        .map(AudioBuffer::into_samples)
        .collect()
}

#[pymodule]
fn pyquietmark(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(parse_payload, m)?)?;
    m.add_function(wrap_pyfunction!(decode_symbols, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clips, m)?)?;
    Ok(())
}

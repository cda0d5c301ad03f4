//! Graph ops that run the STFT engine and biquad filters, with analytic
//! vector-Jacobian products.

use std::sync::Arc;

use rustfft::num_complex::Complex64;

use crate::dsp::filter::{cascade, cascade_adjoint, Biquad};
use crate::dsp::{OverlapNorm, StftEngine};
use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Tensor, Var};

struct Synthesis {
    engine: Arc<StftEngine>,
    phase: Arc<Vec<f64>>,
    frames: usize,
    norm: OverlapNorm,
}

impl CustomOp for Synthesis {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let covered = self.engine.config().samples_for(self.frames);
        let g = self
            .engine
            .synthesize_vjp(&grad.data()[..covered], &self.phase, self.frames, self.norm)
            .expect("normaliser validated in forward");
        vec![Some(
            Tensor::new(inputs[0].shape().to_vec(), g).expect("synthesis grad shape"),
        )]
    }
}

/// Overlap-add resynthesis of a `(1, F, T)` magnitude with fixed phase,
/// zero-extended to `len` samples.
pub fn synthesize(
    g: &mut Graph,
    engine: &Arc<StftEngine>,
    magnitude: Var,
    phase: &Arc<Vec<f64>>,
    norm: OverlapNorm,
    len: usize,
) -> Result<Var> {
    let shape = g.shape(magnitude).to_vec();
    let bins = engine.config().bins();
    if shape.len() != 3 || shape[0] != 1 || shape[1] != bins || phase.len() != bins * shape[2] {
        return Err(Error::ShapeMismatch {
            op: "istft",
            left: shape,
            right: vec![1, bins, phase.len() / bins.max(1)],
        });
    }
    let frames = shape[2];
    let covered = engine.config().samples_for(frames);
    if len < covered {
        return Err(Error::ShapeMismatch {
            op: "istft",
            left: vec![len],
            right: vec![covered],
        });
    }
    let mut out = engine.synthesize(g.value(magnitude).data(), phase, frames, norm)?;
    out.resize(len, 0.0);
    let value = Tensor::new(vec![len], out)?;
    Ok(g.custom(
        &[magnitude],
        value,
        Box::new(Synthesis {
            engine: Arc::clone(engine),
            phase: Arc::clone(phase),
            frames,
            norm,
        }),
    ))
}

struct Magnitude {
    engine: Arc<StftEngine>,
    spectrum: Vec<Complex64>,
    frames: usize,
}

impl CustomOp for Magnitude {
    fn name(&self) -> &'static str {
        "stft_magnitude"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let len = inputs[0].len();
        let g = self
            .engine
            .magnitude_vjp(len, &self.spectrum, self.frames, grad.data());
        vec![Some(Tensor::new(vec![len], g).expect("magnitude grad shape"))]
    }
}

/// `|STFT(x)|` of a 1-D signal, shaped `(1, F, T)`.
pub fn stft_magnitude(g: &mut Graph, engine: &Arc<StftEngine>, signal: Var) -> Result<Var> {
    if g.shape(signal).len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "stft_magnitude",
            left: g.shape(signal).to_vec(),
            right: vec![0],
        });
    }
    let (spectrum, frames) = engine.analyze(g.value(signal).data())?;
    let mag = spectrum.iter().map(|c| c.norm()).collect();
    let value = Tensor::new(vec![1, engine.config().bins(), frames], mag)?;
    Ok(g.custom(
        &[signal],
        value,
        Box::new(Magnitude {
            engine: Arc::clone(engine),
            spectrum,
            frames,
        }),
    ))
}

struct Filter {
    sections: Arc<Vec<Biquad>>,
}

impl CustomOp for Filter {
    fn name(&self) -> &'static str {
        "biquad_cascade"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = cascade_adjoint(&self.sections, grad.data());
        vec![Some(Tensor::new(vec![g.len()], g).expect("filter grad shape"))]
    }
}

/// Biquad cascade applied from rest to a 1-D signal.
pub fn filter(g: &mut Graph, signal: Var, sections: &Arc<Vec<Biquad>>) -> Result<Var> {
    if g.shape(signal).len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "biquad_cascade",
            left: g.shape(signal).to_vec(),
            right: vec![0],
        });
    }
    let y = cascade(sections, g.value(signal).data());
    let value = Tensor::new(vec![y.len()], y)?;
    Ok(g.custom(
        &[signal],
        value,
        Box::new(Filter {
            sections: Arc::clone(sections),
        }),
    ))
}

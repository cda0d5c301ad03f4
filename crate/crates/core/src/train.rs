//! Training: the embed pipeline, a sampled attack and the message decoder
//! on one graph per utterance, cross-entropy on the per-frame symbols, and
//! Adam on the shared parameters.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::graph::{differentiable_attack, sample_attack_from, AttackFamily};
use crate::attacks::{AttackSpec, CodecBackend};
use crate::checkpoint::Container;
use crate::data::{list_wavs, load_all, split_files, synth_corpus, Corpus, Split};
use crate::dsp::{AudioBuffer, OverlapNorm, StftConfig, StftEngine};
use crate::embed::{embed_graph, EmbedConfig, EmbedNodes, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::msgcodec::{frame_and_repeat, MessageFrame};
use crate::nets::{argmax_columns, read_header, write_header, ModelVars, NetConfig, WatermarkModel};
use crate::spectral;

/// Stream id reserved for parameter initialisation; steps use their index.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: u64,
    pub clip_seconds: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub payload_bits: usize,
    /// `16k` or `44k`.
    pub profile: String,
    /// `standard` or `compact`.
    pub architecture: String,
    pub half_band: bool,
    /// Training distortion families; empty trains without attacks.
    pub attacks: Vec<String>,
    /// `simulated` or `external`.
    pub codec_backend: String,
    /// WAV directory; synthetic clips are generated when unset.
    pub data_dir: Option<PathBuf>,
    pub synthetic_clips: usize,
    pub synthetic_seconds: f64,
    pub metrics_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint period in steps; 0 writes only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            iterations: 2000,
            clip_seconds: 12.0,
            batch_size: 4,
            alpha: DEFAULT_ALPHA,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            payload_bits: 32,
            profile: "16k".into(),
            architecture: "standard".into(),
            half_band: true,
            attacks: AttackFamily::ALL.iter().map(|f| f.name().to_string()).collect(),
            codec_backend: "simulated".into(),
            data_dir: None,
            synthetic_clips: 180,
            synthetic_seconds: 10.0,
            metrics_csv: None,
            checkpoint: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Small CPU setting: compact network, 8-bit payload, 20-frame clips.
    pub fn toy() -> Self {
        Self {
            learning_rate: 3e-3,
            clip_seconds: 1.4,
            alpha: 40.0,
            payload_bits: 8,
            architecture: "compact".into(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn sample_rate(&self) -> Result<u32> {
        match self.profile.as_str() {
            "16k" => Ok(16_000),
            "44k" => Ok(44_100),
            p => Err(Error::Config(format!("unknown profile `{p}` (16k or 44k)"))),
        }
    }

    pub fn stft_config(&self) -> Result<StftConfig> {
        match self.profile.as_str() {
            "16k" => Ok(StftConfig::profile_16k()),
            "44k" => Ok(StftConfig::profile_44k()),
            p => Err(Error::Config(format!("unknown profile `{p}` (16k or 44k)"))),
        }
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let bins = self.stft_config()?.bins();
        match self.architecture.as_str() {
            "standard" => Ok(NetConfig::standard(bins)),
            "compact" => Ok(NetConfig::compact(bins)),
            a => Err(Error::Config(format!("unknown architecture `{a}` (standard or compact)"))),
        }
    }

    pub fn families(&self) -> Result<Vec<AttackFamily>> {
        self.attacks
            .iter()
            .map(|a| {
                AttackFamily::from_name(a)
                    .ok_or_else(|| Error::Config(format!("unknown attack family `{a}` (noise, jitter, eq, codec)")))
            })
            .collect()
    }

    pub fn backend(&self) -> Result<CodecBackend> {
        match self.codec_backend.as_str() {
            "simulated" => Ok(CodecBackend::Simulated),
            "external" => Ok(CodecBackend::External),
            b => Err(Error::Config(format!("unknown codec backend `{b}` (simulated or external)"))),
        }
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            alpha: self.alpha,
            half_band: self.half_band,
            ..EmbedConfig::default()
        }
    }

    pub fn clip_samples(&self) -> Result<usize> {
        Ok((self.clip_seconds * self.sample_rate()? as f64).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        self.embed_config().validate()?;
        self.net_config()?.validate()?;
        self.families()?;
        self.backend()?;
        MessageFrame::new(vec![0; self.payload_bits])?;
        let needed = self.stft_config()?.samples_for(self.payload_bits + 1);
        if self.clip_samples()? < needed {
            return bad(format!(
                "clip_seconds {} holds less than one message repetition ({needed} samples)",
                self.clip_seconds
            ));
        }
        if self.data_dir.is_none() && (self.synthetic_clips == 0 || self.synthetic_seconds <= 0.0) {
            return bad("synthetic dataset is empty".into());
        }
        Ok(())
    }

    /// Training clips: the train split of `data_dir`, or the synthetic set.
    pub fn corpus(&self) -> Result<Corpus> {
        let sr = self.sample_rate()?;
        match &self.data_dir {
            Some(dir) => {
                let files = list_wavs(dir)?;
                if files.is_empty() {
                    return Err(Error::EmptyDataset(format!("no .wav files in {}", dir.display())));
                }
                Corpus::new(load_all(&split_files(&files, self.seed, Split::Train), sr)?)
            }
            None => Corpus::new(synth_corpus(
                self.synthetic_clips,
                self.synthetic_seconds,
                sr,
                self.seed,
            )),
        }
    }
}

/// Mean over frames of `-log softmax(logits)[target]`; the only training
/// objective.
pub fn message_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

/// Everything optimisation carries between steps. Moments are stored at
/// parameter precision so that a checkpoint captures the state exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: WatermarkModel,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
    /// Exponential average of the batch loss.
    pub running_loss: f64,
}

impl TrainState {
    pub fn new(model: WatermarkModel) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            model,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            running_loss: f64::NAN,
        }
    }

    /// Rng for step `step`; independent of how many steps ran before it.
    pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        rng
    }

    pub fn to_container(&self, config: &TrainConfig) -> Container {
        let mut c = Container::default();
        write_header(
            &mut c,
            self.model.config(),
            self.model.stft_config(),
            self.model.sample_rate(),
        );
        c.set("kind", "train");
        c.set("step", self.step);
        c.set("running_loss", format!("{:016x}", self.running_loss.to_bits()));
        c.set("config", serde_json::to_string(config).expect("config serialises"));
        c.blobs = self
            .model
            .params()
            .iter()
            .map(|p| p.data.clone())
            .chain(self.m.iter().cloned())
            .chain(self.v.iter().cloned())
            .collect();
        c
    }

    pub fn from_container(c: &Container) -> Result<(Self, TrainConfig)> {
        if c.get("kind")? != "train" {
            return Err(Error::NotACheckpoint("not a training checkpoint".into()));
        }
        read_header(c)?;
        let config: TrainConfig = serde_json::from_str(c.get("config")?)
            .map_err(|e| Error::NotACheckpoint(format!("bad config: {e}")))?;
        let bits = u64::from_str_radix(c.get("running_loss")?, 16)
            .map_err(|_| Error::NotACheckpoint("bad running_loss".into()))?;
        let mut model_part = c.clone();
        model_part.set("kind", "model");
        let model = WatermarkModel::from_container(&model_part)?;
        let n = model.params().len();
        if c.blobs.len() != 3 * n {
            return Err(Error::TruncatedCheckpoint(format!(
                "expected {} blobs, found {}",
                3 * n,
                c.blobs.len()
            )));
        }
        for (i, p) in model.params().iter().enumerate() {
            if c.blobs[n + i].len() != p.data.len() || c.blobs[2 * n + i].len() != p.data.len() {
                return Err(Error::TruncatedCheckpoint(format!("moments of `{}` are the wrong size", p.name)));
            }
        }
        let state = Self {
            model,
            m: c.blobs[n..2 * n].to_vec(),
            v: c.blobs[2 * n..].to_vec(),
            step: c.parse("step")?,
            running_loss: f64::from_bits(bits),
        };
        Ok((state, config))
    }

    pub fn save(&self, config: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
        self.to_container(config).write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, TrainConfig)> {
        Self::from_container(&Container::read(path)?)
    }
}

/// One utterance's training graph.
pub struct UtteranceGraph {
    pub graph: Graph,
    pub vars: ModelVars,
    pub embed: EmbedNodes,
    /// `||C' - C||`, kept only as a metric. The loss must not depend on it.
    pub distortion: Var,
    /// Watermarked waveform before the attack.
    pub watermarked: Var,
    pub logits: Var,
    pub loss: Var,
    /// Per-frame targets after the attack's frame remapping.
    pub targets: Vec<usize>,
    /// Target symbols on the unattacked frames.
    pub symbols: Vec<usize>,
    /// Spectrogram SDR of `C'` against `C` in dB.
    pub sdr: f64,
}

/// Per-step summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Frame accuracy on the attacked signal.
    pub accuracy: f64,
    /// Frame accuracy on the watermarked signal without the attack.
    pub clean_accuracy: f64,
    /// Attack kinds, one per utterance.
    pub attacks: Vec<String>,
    /// Lowest SDR in the batch.
    pub sdr: f64,
}

/// What one step draws: a window, a payload and an attack per utterance.
#[derive(Debug, Clone)]
pub struct Sample {
    pub audio: AudioBuffer,
    pub frame: MessageFrame,
    pub attack: Option<AttackSpec>,
}

pub struct Trainer {
    config: TrainConfig,
    corpus: Corpus,
    engine: Arc<StftEngine>,
    backend: CodecBackend,
    families: Vec<AttackFamily>,
    clip_len: usize,
    metrics: Option<File>,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let sr = config.sample_rate()?;
        if let Some(c) = corpus.clips().iter().find(|c| c.sample_rate() != sr) {
            return Err(Error::Config(format!(
                "corpus clip at {} Hz, training runs at {sr} Hz",
                c.sample_rate()
            )));
        }
        let metrics = match &config.metrics_csv {
            Some(path) => Some(open_metrics(path)?),
            None => None,
        };
        Ok(Self {
            engine: Arc::new(StftEngine::new(config.stft_config()?)?),
            backend: config.backend()?,
            families: config.families()?,
            clip_len: config.clip_samples()?,
            config,
            corpus,
            metrics,
        })
    }

    /// Builds the corpus described by `config`.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let corpus = config.corpus()?;
        Self::new(config, corpus)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Freshly initialised state from the configured seed.
    pub fn init_state(&self) -> Result<TrainState> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(INIT_STREAM);
        let model = WatermarkModel::new(
            self.config.net_config()?,
            self.config.stft_config()?,
            self.config.sample_rate()?,
            &mut rng,
        )?;
        Ok(TrainState::new(model))
    }

    /// The batch for `step`, a pure function of the seed and step index.
    pub fn sample_batch(&self, step: u64) -> Vec<Sample> {
        let mut rng = TrainState::step_rng(self.config.seed, step);
        (0..self.config.batch_size)
            .map(|_| {
                let audio = self.corpus.window(self.clip_len, &mut rng);
                let frame = MessageFrame::random(self.config.payload_bits, &mut rng).expect("validated payload size");
                let attack = (!self.families.is_empty()).then(|| sample_attack_from(&mut rng, &self.families));
                Sample { audio, frame, attack }
            })
            .collect()
    }

    /// Forward graph for one utterance: embed, resynthesise, attack, decode,
    /// cross-entropy.
    pub fn utterance_graph(&self, model: &WatermarkModel, sample: &Sample) -> Result<UtteranceGraph> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let (spectrum, frames) = self.engine.analyze(sample.audio.samples())?;
        let bins = self.engine.config().bins();
        let magnitude: Vec<f64> = spectrum.iter().map(|c| c.norm()).collect();
        let phase = Arc::new(spectrum.iter().map(|c| c.arg()).collect::<Vec<_>>());
        let symbols = frame_and_repeat(&sample.frame, frames)?;
        let carrier = Tensor::new(vec![1, bins, frames], magnitude)?;
        let embed = embed_graph(&mut g, model, &vars, carrier, &symbols, &self.config.embed_config())?;

        let delta = g.sub(embed.embedded, embed.carrier)?;
        let distortion = g.l2_norm(delta);
        let sdr = 20.0 * (g.value(embed.carrier).norm() / g.value(distortion).item()).log10();

        let len = sample.audio.len();
        let norm = OverlapNorm::Floor(self.engine.interior_floor());
        let residual = spectral::synthesize(&mut g, &self.engine, delta, &phase, norm, len)?;
        let x = g.constant(Tensor::new(vec![len], sample.audio.samples().to_vec())?);
        let watermarked = g.add(x, residual)?;

        let (attacked, frame_map) = match &sample.attack {
            Some(spec) => {
                let a = differentiable_attack(
                    &mut g,
                    &self.engine,
                    watermarked,
                    spec,
                    &self.backend,
                    sample.audio.sample_rate(),
                )?;
                (a.magnitude, a.frame_map)
            }
            None => (spectral::stft_magnitude(&mut g, &self.engine, watermarked)?, None),
        };
        let logits = model.decode_message(&mut g, &vars, attacked)?;
        let targets = match frame_map {
            Some(map) => map.iter().map(|&t| symbols[t]).collect(),
            None => symbols.clone(),
        };
        let loss = message_loss(&mut g, logits, &targets)?;
        Ok(UtteranceGraph {
            graph: g,
            vars,
            embed,
            distortion,
            watermarked,
            logits,
            loss,
            targets,
            symbols,
            sdr,
        })
    }

    /// One optimisation step on the batch drawn for `state.step`.
    pub fn step(&mut self, state: &mut TrainState) -> Result<StepMetrics> {
        let batch = self.sample_batch(state.step);
        let n = batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = state.model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        let (mut loss, mut accuracy, mut clean, mut sdr) = (0.0, 0.0, 0.0, f64::INFINITY);
        for sample in &batch {
            let mut u = self.utterance_graph(&state.model, sample)?;
            let l = u.graph.value(u.loss).item();
            if !l.is_finite() {
                let dump = self.dump(state, &batch)?;
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    dump: dump.display().to_string(),
                });
            }
            u.graph.backward(u.loss)?;
            for (acc, &v) in grads.iter_mut().zip(u.vars.vars()) {
                if let Some(gr) = u.graph.grad(v) {
                    acc.iter_mut().zip(gr.data()).for_each(|(a, g)| *a += g / n);
                }
            }
            loss += l / n;
            accuracy += frame_accuracy(&argmax_columns(u.graph.value(u.logits)), &u.targets) / n;
            let y = u.graph.value(u.watermarked).data();
            let (mag, frames) = self.engine.magnitude(y)?;
            let predicted = state.model.predict_symbols(&mag, frames)?;
            clean += frame_accuracy(&predicted, &u.symbols) / n;
            sdr = sdr.min(u.sdr);
        }
        self.adam(state, &grads);
        state.step += 1;
        state.running_loss = if state.running_loss.is_finite() {
            0.98 * state.running_loss + 0.02 * loss
        } else {
            loss
        };
        let metrics = StepMetrics {
            step: state.step,
            loss,
            accuracy,
            clean_accuracy: clean,
            attacks: batch
                .iter()
                .map(|s| s.attack.as_ref().map_or("none", |a| a.attack.kind()).to_string())
                .collect(),
            sdr,
        };
        if let Some(f) = &mut self.metrics {
            writeln!(
                f,
                "{},{:.6},{:.4},{:.4},{},{:.3}",
                metrics.step,
                metrics.loss,
                metrics.accuracy,
                metrics.clean_accuracy,
                metrics.attacks.join(";"),
                metrics.sdr
            )?;
        }
        Ok(metrics)
    }

    fn adam(&self, state: &mut TrainState, grads: &[Vec<f64>]) {
        let c = &self.config;
        let t = (state.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let params = state.model.params_mut();
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for j in 0..p.data.len() {
                let g = grads[i][j];
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = c.learning_rate * (mj / bc1) / ((vj / bc2).sqrt() + c.adam_eps);
                p.data[j] = (p.data[j] as f64 - update) as f32;
            }
        }
    }

    /// Writes the failing step's inputs and parameter norms next to the
    /// checkpoint (or in the temp dir).
    fn dump(&self, state: &TrainState, batch: &[Sample]) -> Result<PathBuf> {
        let dir = self
            .config
            .checkpoint
            .as_ref()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("nonfinite-step-{}.json", state.step));
        let report = serde_json::json!({
            "step": state.step,
            "seed": self.config.seed,
            "utterances": batch.iter().map(|s| serde_json::json!({
                "payload": s.frame.to_text(),
                "attack": s.attack.as_ref().map(|a| a.to_string()),
                "rms": s.audio.rms(),
                "samples": s.audio.len(),
            })).collect::<Vec<_>>(),
            "param_norms": state.model.params().iter().map(|p| {
                (p.name.clone(), p.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            }).collect::<Vec<_>>(),
        });
        std::fs::write(&path, serde_json::to_string_pretty(&report).expect("json"))?;
        Ok(path)
    }

    /// Steps until `config.iterations`, checkpointing as configured.
    /// `progress` sees every step's metrics.
    pub fn run(&mut self, state: &mut TrainState, mut progress: impl FnMut(&StepMetrics)) -> Result<()> {
        while state.step < self.config.iterations {
            let m = self.step(state)?;
            progress(&m);
            if let Some(path) = &self.config.checkpoint {
                let every = self.config.checkpoint_every;
                if (every > 0 && state.step % every == 0) || state.step == self.config.iterations {
                    state.save(&self.config, path)?;
                }
            }
        }
        Ok(())
    }
}

fn open_metrics(path: &Path) -> Result<File> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "step,loss,accuracy,clean_accuracy,attack,sdr")?;
    }
    Ok(f)
}

/// Fraction of positions where `predicted` equals `targets`.
pub fn frame_accuracy(predicted: &[usize], targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(targets).filter(|(a, b)| a == b).count();
    hits as f64 / targets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch_size: 2,
            synthetic_clips: 4,
            synthetic_seconds: 2.0,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn uniform_logits_give_ln3() {
        let mut g = Graph::new();
        let l = g.param(Tensor::zeros(&[3, 5]));
        let loss = message_loss(&mut g, l, &[0, 1, 2, 0, 1]).unwrap();
        assert!((g.value(loss).item() - 3f64.ln()).abs() < 1e-12);
        let big = g.param(Tensor::new(vec![3, 1], vec![50.0, 0.0, 0.0]).unwrap());
        let loss = message_loss(&mut g, big, &[0]).unwrap();
        assert!(g.value(loss).item() < 1e-20);
        assert!(message_loss(&mut g, l, &[0, 1, 2, 0, 3]).is_err());
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = TrainConfig::toy();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let parsed = TrainConfig::from_toml("learning_rate = 0.01\nattacks = [\"noise\"]\n").unwrap();
        assert_eq!(parsed.learning_rate, 0.01);
        assert_eq!(parsed.iterations, 2000);
        for bad in [
            "iterations = 0",
            "clip_seconds = 0.5",
            "attacks = [\"lasers\"]",
            "profile = \"8k\"",
            "bogus = 1",
        ] {
            assert!(TrainConfig::from_toml(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn batches_are_a_function_of_step() {
        let t = Trainer::from_config(tiny()).unwrap();
        let a = t.sample_batch(7);
        let b = t.sample_batch(7);
        assert_eq!(a[1].audio, b[1].audio);
        assert_eq!(a[1].frame, b[1].frame);
        assert_eq!(a[1].attack, b[1].attack);
        assert_ne!(t.sample_batch(8)[0].audio, a[0].audio);
    }

    #[test]
    fn loss_never_depends_on_the_distortion() {
        let t = Trainer::from_config(tiny()).unwrap();
        let state = t.init_state().unwrap();
        for sample in t.sample_batch(0) {
            let mut u = t.utterance_graph(&state.model, &sample).unwrap();
            assert!(!u.graph.depends_on(u.loss, u.distortion));
            assert!(u.graph.depends_on(u.loss, u.embed.embedded));
            assert!(u.sdr >= 40.0 - 1e-6);
            let w = u.graph.l2_norm(u.embed.watermark);
            u.graph.backward(w).unwrap();
            for &v in u.vars.vars() {
                if let Some(gr) = u.graph.grad(v) {
                    assert!(gr.norm() < 1e-9 * u.graph.value(w).item().max(1.0), "{}", gr.norm());
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut cfg = tiny();
        cfg.learning_rate = 0.0;
        let mut t = Trainer::from_config(cfg).unwrap();
        let mut state = t.init_state().unwrap();
        let before = state.model.clone();
        for _ in 0..2 {
            let m = t.step(&mut state).unwrap();
            assert!(m.loss.is_finite());
            assert!(m.sdr >= 40.0 - 1e-6);
        }
        assert_eq!(state.model, before);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let cfg = tiny();
        let mut t = Trainer::from_config(cfg.clone()).unwrap();
        let mut a = t.init_state().unwrap();
        t.step(&mut a).unwrap();
        a.save(&cfg, &path).unwrap();
        let next = t.step(&mut a).unwrap();

        let (mut b, loaded) = TrainState::load(&path).unwrap();
        assert_eq!(loaded, cfg);
        let mut t2 = Trainer::from_config(loaded).unwrap();
        let resumed = t2.step(&mut b).unwrap();
        assert_eq!(next.loss.to_bits(), resumed.loss.to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let cfg = tiny();
        let t = Trainer::from_config(cfg.clone()).unwrap();
        let state = t.init_state().unwrap();
        state.save(&cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(TrainState::load(&path), Err(Error::NotACheckpoint(_))));
        let model_only = dir.path().join("m.ckpt");
        state.model.save(&model_only).unwrap();
        assert!(TrainState::load(&model_only).is_err());
    }

    #[test]
    fn metrics_csv_appends_one_row_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("m.csv");
        let mut cfg = tiny();
        cfg.metrics_csv = Some(csv.clone());
        cfg.iterations = 2;
        let mut t = Trainer::from_config(cfg).unwrap();
        let mut state = t.init_state().unwrap();
        t.run(&mut state, |_| {}).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,loss,accuracy,clean_accuracy,attack,sdr");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,"));
    }
}

//! The four learnable networks: message embedding table, carrier encoder,
//! carrier decoder and message decoder.
//!
//! Parameters are stored as `f32` (the checkpoint precision) and promoted to
//! `f64` when bound onto a [`Graph`].

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::dsp::{StftConfig, Window};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};

/// Floor added to the normalised magnitude before the message decoder's log.
const LOG_FLOOR: f64 = 1e-3;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Frequency bins F; the embedding spans the full axis.
    pub bins: usize,
    /// Gated blocks of the carrier encoder.
    pub enc_channels: Vec<usize>,
    /// Carrier decoder; gated blocks then a final linear conv, last entry 1.
    pub dec_channels: Vec<usize>,
    /// Gated blocks of the message decoder, before the 1x1 symbol head.
    pub msg_channels: Vec<usize>,
    /// `(freq, time)` kernel, both odd.
    pub kernel: (usize, usize),
    /// Alphabet size including the end token.
    pub num_symbols: usize,
}

impl NetConfig {
    /// Full-size architecture: 3 gated encoder blocks (16, 32, 64), carrier
    /// decoder 64-32-16-1 and message decoder 16-32-64, 5x5 kernels.
    pub fn standard(bins: usize) -> Self {
        Self {
            bins,
            enc_channels: vec![16, 32, 64],
            dec_channels: vec![64, 32, 16, 1],
            msg_channels: vec![16, 32, 64],
            kernel: (5, 5),
            num_symbols: 3,
        }
    }

    /// Desk-scale architecture used for CPU training runs.
    pub fn compact(bins: usize) -> Self {
        Self {
            bins,
            enc_channels: vec![8],
            dec_channels: vec![8, 1],
            msg_channels: vec![8, 8],
            kernel: (3, 3),
            num_symbols: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.enc_channels.is_empty() || self.dec_channels.is_empty() || self.msg_channels.is_empty() {
            return bad("channel lists must be non-empty");
        }
        if self
            .enc_channels
            .iter()
            .chain(&self.dec_channels)
            .chain(&self.msg_channels)
            .any(|&c| c == 0)
        {
            return bad("channel counts must be positive");
        }
        if self.dec_channels.last() != Some(&1) {
            return bad("carrier decoder must end with a single channel");
        }
        if self.kernel.0 % 2 == 0 || self.kernel.1 % 2 == 0 {
            return bad("kernel dimensions must be odd");
        }
        if self.num_symbols < 2 {
            return bad("num_symbols must be at least 2");
        }
        if self.bins == 0 {
            return bad("bins must be positive");
        }
        Ok(())
    }

    fn padding(&self) -> (usize, usize) {
        (self.kernel.0 / 2, self.kernel.1 / 2)
    }

    fn enc_out(&self) -> usize {
        *self.enc_channels.last().expect("validated")
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (kh, kw) = cfg.kernel;
    let mut out = vec![(
        "embedding".to_string(),
        vec![cfg.num_symbols, cfg.bins],
        Init::Uniform(0.1),
    )];
    let conv = |out: &mut Vec<_>, name: String, cin: usize, cout: usize, k: (usize, usize)| {
        let s = 1.0 / ((cin * k.0 * k.1) as f64).sqrt();
        out.push((format!("{name}.weight"), vec![cout, cin, k.0, k.1], Init::Uniform(s)));
        out.push((format!("{name}.bias"), vec![cout], Init::Uniform(s)));
    };
    let mut cin = 1;
    for (i, &c) in cfg.enc_channels.iter().enumerate() {
        conv(&mut out, format!("encoder.{i}.a"), cin, c, (kh, kw));
        conv(&mut out, format!("encoder.{i}.b"), cin, c, (kh, kw));
        cin = c;
    }
    let mut cin = cfg.enc_out() + 2;
    let (gated, last) = cfg.dec_channels.split_at(cfg.dec_channels.len() - 1);
    for (i, &c) in gated.iter().enumerate() {
        conv(&mut out, format!("carrier.{i}.a"), cin, c, (kh, kw));
        conv(&mut out, format!("carrier.{i}.b"), cin, c, (kh, kw));
        cin = c;
    }
    conv(&mut out, "carrier.out".into(), cin, last[0], (kh, kw));
    let mut cin = 1;
    for (i, &c) in cfg.msg_channels.iter().enumerate() {
        conv(&mut out, format!("message.{i}.a"), cin, c, (kh, kw));
        conv(&mut out, format!("message.{i}.b"), cin, c, (kh, kw));
        cin = c;
    }
    conv(&mut out, "message.head".into(), cin, cfg.num_symbols, (1, 1));
    out.push((
        "message.pool".into(),
        vec![1, cfg.bins],
        Init::Const(1.0 / cfg.bins as f64),
    ));
    out
}

/// Parameters bound onto a graph, in declared order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct ConvVars {
    weight: Var,
    bias: Var,
}

/// Walks [`ModelVars`] in the order produced by [`layout`].
struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    fn conv(&mut self) -> ConvVars {
        ConvVars {
            weight: self.next(),
            bias: self.next(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkModel {
    config: NetConfig,
    stft: StftConfig,
    sample_rate: u32,
    params: Vec<Param>,
}

impl WatermarkModel {
    pub fn new(config: NetConfig, stft: StftConfig, sample_rate: u32, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        stft.validate()?;
        if config.bins != stft.bins() {
            return Err(Error::Config(format!(
                "network expects {} bins but STFT yields {}",
                config.bins,
                stft.bins()
            )));
        }
        let params = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| match init {
                        Init::Uniform(s) => rng.gen_range(-s..s) as f32,
                        Init::Const(v) => v as f32,
                    })
                    .collect();
                Param { name, shape, data }
            })
            .collect();
        Ok(Self {
            config,
            stft,
            sample_rate,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn stft_config(&self) -> &StftConfig {
        &self.stft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Puts every parameter on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let t = Tensor::new(p.shape.clone(), p.data.iter().map(|&v| v as f64).collect())
                    .expect("param shape");
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        ModelVars { vars }
    }

    fn cursor<'a>(&self, vars: &'a ModelVars, section: Section) -> Cursor<'a> {
        let cfg = &self.config;
        let enc = 1;
        let carrier = enc + 4 * cfg.enc_channels.len();
        let message = carrier + 4 * (cfg.dec_channels.len() - 1) + 2;
        let pos = match section {
            Section::Embedding => 0,
            Section::Encoder => enc,
            Section::Carrier => carrier,
            Section::Message => message,
        };
        Cursor {
            vars: &vars.vars,
            pos,
        }
    }

    fn gated(&self, g: &mut Graph, x: Var, a: ConvVars, b: ConvVars) -> Result<Var> {
        let pad = self.config.padding();
        let ya = g.conv2d(x, a.weight, Some(a.bias), (1, 1), pad)?;
        let yb = g.conv2d(x, b.weight, Some(b.bias), (1, 1), pad)?;
        let ta = g.tanh(ya);
        let sb = g.sigmoid(yb);
        g.mul(ta, sb)
    }

    fn check_grid(&self, g: &Graph, x: Var, channels: usize, op: &'static str) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 3 || s[0] != channels || s[1] != self.config.bins {
            return Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![channels, self.config.bins],
            });
        }
        Ok(s[2])
    }

    /// `x / rms(x)`, guarded for an all-zero input.
    fn rms_normalise(g: &mut Graph, x: Var) -> Var {
        let n = g.value(x).len() as f64;
        let norm = g.l2_norm(x);
        let rms = g.scale(norm, 1.0 / n.sqrt());
        let rms = g.clamp_min(rms, NORM_EPS);
        let inv = g.recip(rms);
        g.mul(x, inv).expect("scalar broadcast")
    }

    /// `(1, F, T)` message embedding: column `t` is the table row of
    /// `symbols[t]`.
    pub fn embed_message(&self, g: &mut Graph, vars: &ModelVars, symbols: &[usize]) -> Result<Var> {
        let table = self.cursor(vars, Section::Embedding).next();
        let rows = g.gather_rows(table, symbols)?;
        let cols = g.permute(rows, &[1, 0])?;
        g.reshape(cols, &[1, self.config.bins, symbols.len()])
    }

    /// Carrier encoder on a `(1, F, T)` magnitude; output is
    /// `(enc_channels.last, F, T)`. The input is RMS-normalised first, so the
    /// encoder is invariant to overall gain.
    pub fn encode_carrier(&self, g: &mut Graph, vars: &ModelVars, carrier: Var) -> Result<Var> {
        self.check_grid(g, carrier, 1, "encode_carrier")?;
        let mut cur = self.cursor(vars, Section::Encoder);
        let mut x = Self::rms_normalise(g, carrier);
        for _ in 0..self.config.enc_channels.len() {
            let (a, b) = (cur.conv(), cur.conv());
            x = self.gated(g, x, a, b)?;
        }
        Ok(x)
    }

    /// Builds `H = [E(C), C / rms(C), M_e]` along the channel axis.
    pub fn carrier_decoder_input(
        &self,
        g: &mut Graph,
        encoded: Var,
        carrier: Var,
        embedding: Var,
    ) -> Result<Var> {
        let normalised = Self::rms_normalise(g, carrier);
        g.concat(&[encoded, normalised, embedding], 0)
    }

    /// Carrier decoder: `(enc_last + 2, F, T)` to a `(1, F, T)` raw message
    /// spectrogram (linear output).
    pub fn decode_carrier(&self, g: &mut Graph, vars: &ModelVars, h: Var) -> Result<Var> {
        self.check_grid(g, h, self.config.enc_out() + 2, "decode_carrier")?;
        let mut cur = self.cursor(vars, Section::Carrier);
        let mut x = h;
        for _ in 0..self.config.dec_channels.len() - 1 {
            let (a, b) = (cur.conv(), cur.conv());
            x = self.gated(g, x, a, b)?;
        }
        let out = cur.conv();
        g.conv2d(x, out.weight, Some(out.bias), (1, 1), self.config.padding())
    }

    /// Message decoder: `(1, F, T)` magnitude to `(num_symbols, T)` logits.
    /// Works on `ln(|X| / rms + floor)`, then pools frequency with learned
    /// per-bin weights (initialised to the mean).
    pub fn decode_message(&self, g: &mut Graph, vars: &ModelVars, magnitude: Var) -> Result<Var> {
        let frames = self.check_grid(g, magnitude, 1, "decode_message")?;
        let mut cur = self.cursor(vars, Section::Message);
        let normalised = Self::rms_normalise(g, magnitude);
        let shifted = g.add_scalar(normalised, LOG_FLOOR);
        let mut x = g.log(shifted);
        for _ in 0..self.config.msg_channels.len() {
            let (a, b) = (cur.conv(), cur.conv());
            x = self.gated(g, x, a, b)?;
        }
        let head = cur.conv();
        let logits = g.conv2d(x, head.weight, Some(head.bias), (1, 1), (0, 0))?;
        let pool = cur.next();
        let s = self.config.num_symbols;
        let by_bin = g.permute(logits, &[1, 0, 2])?;
        let flat = g.reshape(by_bin, &[self.config.bins, s * frames])?;
        let pooled = g.matmul(pool, flat)?;
        g.reshape(pooled, &[s, frames])
    }

    /// Inference-only logits for a bin-major magnitude array.
    pub fn message_logits(&self, magnitude: &[f64], frames: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let m = g.constant(Tensor::new(vec![1, self.config.bins, frames], magnitude.to_vec())?);
        let logits = self.decode_message(&mut g, &vars, m)?;
        Ok(g.value(logits).clone())
    }

    /// Per-frame argmax symbol of the message decoder.
    pub fn predict_symbols(&self, magnitude: &[f64], frames: usize) -> Result<Vec<usize>> {
        let logits = self.message_logits(magnitude, frames)?;
        Ok(argmax_columns(&logits))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        write_header(&mut c, &self.config, &self.stft, self.sample_rate);
        c.set("kind", "model");
        c.blobs = self.params.iter().map(|p| p.data.clone()).collect();
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (config, stft, sample_rate) = read_header(c)?;
        let shapes = layout(&config);
        if c.blobs.len() < shapes.len() {
            return Err(Error::TruncatedCheckpoint(format!(
                "expected {} parameter blobs, found {}",
                shapes.len(),
                c.blobs.len()
            )));
        }
        let params = shapes
            .into_iter()
            .zip(&c.blobs)
            .map(|((name, shape, _), blob)| {
                let n: usize = shape.iter().product();
                if blob.len() != n {
                    return Err(Error::NotACheckpoint(format!(
                        "parameter `{name}` has {} values, expected {n}",
                        blob.len()
                    )));
                }
                Ok(Param {
                    name,
                    shape,
                    data: blob.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            stft,
            sample_rate,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

#[derive(Clone, Copy)]
enum Section {
    Embedding,
    Encoder,
    Carrier,
    Message,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::NotACheckpoint(format!("bad channel list `{s}`")))
        })
        .collect()
}

pub(crate) fn write_header(c: &mut Container, cfg: &NetConfig, stft: &StftConfig, sample_rate: u32) {
    c.set("bins", cfg.bins);
    c.set("enc_channels", join(&cfg.enc_channels));
    c.set("dec_channels", join(&cfg.dec_channels));
    c.set("msg_channels", join(&cfg.msg_channels));
    c.set("kernel", format!("{}x{}", cfg.kernel.0, cfg.kernel.1));
    c.set("num_symbols", cfg.num_symbols);
    c.set("fft_size", stft.fft_size);
    c.set("window_length", stft.window_length);
    c.set("hop_length", stft.hop_length);
    c.set("window", stft.window.name());
    c.set("sample_rate", sample_rate);
}

pub(crate) fn read_header(c: &Container) -> Result<(NetConfig, StftConfig, u32)> {
    let (kh, kw) = c
        .get("kernel")?
        .split_once('x')
        .ok_or_else(|| Error::NotACheckpoint("bad kernel".into()))?;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::NotACheckpoint(format!("bad kernel size `{s}`")))
    };
    let config = NetConfig {
        bins: c.parse("bins")?,
        enc_channels: split(c.get("enc_channels")?)?,
        dec_channels: split(c.get("dec_channels")?)?,
        msg_channels: split(c.get("msg_channels")?)?,
        kernel: (parse(kh)?, parse(kw)?),
        num_symbols: c.parse("num_symbols")?,
    };
    let window = Window::from_name(c.get("window")?)
        .ok_or_else(|| Error::NotACheckpoint("unknown window".into()))?;
    let stft = StftConfig {
        fft_size: c.parse("fft_size")?,
        window_length: c.parse("window_length")?,
        hop_length: c.parse("hop_length")?,
        window,
    };
    config
        .validate()
        .map_err(|e| Error::NotACheckpoint(e.to_string()))?;
    stft.validate()
        .map_err(|e| Error::NotACheckpoint(e.to_string()))?;
    Ok((config, stft, c.parse("sample_rate")?))
}

/// Index of the largest entry in each column of a `(classes, columns)` tensor;
/// ties go to the smallest index.
pub fn argmax_columns(logits: &Tensor) -> Vec<usize> {
    let (classes, cols) = (logits.shape()[0], logits.shape()[1]);
    let d = logits.data();
    (0..cols)
        .map(|c| {
            let mut best = 0;
            for k in 1..classes {
                if d[k * cols + c] > d[best * cols + c] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_stft() -> StftConfig {
        StftConfig::with_sizes(16, 16, 8)
    }

    fn model(seed: u64) -> WatermarkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NetConfig {
            bins: 9,
            enc_channels: vec![3, 4],
            dec_channels: vec![3, 1],
            msg_channels: vec![2],
            kernel: (3, 3),
            num_symbols: 3,
        };
        WatermarkModel::new(cfg, tiny_stft(), 16_000, &mut rng).unwrap()
    }

    fn carrier(rng: &mut ChaCha8Rng, frames: usize) -> Tensor {
        Tensor::from_fn(&[1, 9, frames], |_| rng.gen_range(0.1..2.0))
    }

    #[test]
    fn config_validation() {
        let mut c = NetConfig::compact(9);
        assert!(c.validate().is_ok());
        c.kernel = (4, 3);
        assert!(c.validate().is_err());
        let mut c = NetConfig::compact(9);
        c.num_symbols = 1;
        assert!(c.validate().is_err());
        let mut c = NetConfig::compact(9);
        c.msg_channels.clear();
        assert!(c.validate().is_err());
        assert!(NetConfig::standard(1025).validate().is_ok());
    }

    #[test]
    fn constant_symbol_gives_identical_columns() {
        let m = model(1);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let e = m.embed_message(&mut g, &vars, &[2, 2, 2, 2]).unwrap();
        let v = g.value(e);
        assert_eq!(v.shape(), &[1, 9, 4]);
        for f in 0..9 {
            let row = &v.data()[f * 4..(f + 1) * 4];
            assert!(row.iter().all(|&x| x == row[0]));
        }
    }

    #[test]
    fn embedding_columns_are_table_rows() {
        let m = model(2);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let e = m.embed_message(&mut g, &vars, &[0, 1]).unwrap();
        let table = &m.params()[0].data;
        let v = g.value(e).data();
        for f in 0..9 {
            assert_eq!(v[f * 2], table[f] as f64);
            assert_eq!(v[f * 2 + 1], table[9 + f] as f64);
        }
        assert!(matches!(
            m.embed_message(&mut g, &vars, &[0, 3]),
            Err(Error::SymbolOutOfRange { id: 3, .. })
        ));
    }

    #[test]
    fn zero_carrier_gives_bias_only_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = model(3).config().clone();
        cfg.enc_channels = vec![4];
        let m = WatermarkModel::new(cfg, tiny_stft(), 16_000, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let c = g.constant(Tensor::zeros(&[1, 9, 5]));
        let e = m.encode_carrier(&mut g, &vars, c).unwrap();
        let v = g.value(e);
        assert_eq!(v.shape(), &[4, 9, 5]);
        let (ba, bb) = (&m.params()[2].data, &m.params()[4].data);
        for ch in 0..4 {
            let expected = (ba[ch] as f64).tanh() / (1.0 + (-(bb[ch] as f64)).exp());
            for &x in &v.data()[ch * 45..(ch + 1) * 45] {
                assert!((x - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encoder_is_gain_invariant_but_not_degenerate() {
        let m = model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let c0 = carrier(&mut rng, 6);
        let run = |c: Tensor| {
            let mut g = Graph::new();
            let vars = m.bind(&mut g, false);
            let c = g.constant(c);
            let e = m.encode_carrier(&mut g, &vars, c).unwrap();
            g.value(e).clone()
        };
        let base = run(c0.clone());
        let doubled = run(c0.map(|v| 2.0 * v));
        let rel = base.zip_map(&doubled, |a, b| a - b).norm() / base.norm();
        assert!(rel < 1e-12, "gain changed output by {rel}");
        let mut reshaped = c0.clone();
        reshaped.data_mut()[..27].iter_mut().for_each(|v| *v *= 2.0);
        let other = run(reshaped);
        let rel = base.zip_map(&other, |a, b| a - b).norm() / base.norm();
        assert!(rel > 1e-6, "encoder ignores its input: {rel}");
    }

    #[test]
    fn decoder_shapes_and_channel_check() {
        let m = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let c = g.constant(carrier(&mut rng, 7));
        let e = m.encode_carrier(&mut g, &vars, c).unwrap();
        let me = m.embed_message(&mut g, &vars, &[0, 1, 2, 0, 1, 2, 0]).unwrap();
        let h = m.carrier_decoder_input(&mut g, e, c, me).unwrap();
        let out = m.decode_carrier(&mut g, &vars, h).unwrap();
        assert_eq!(g.shape(out), &[1, 9, 7]);
        assert!(m.decode_carrier(&mut g, &vars, e).is_err());
        let logits = m.decode_message(&mut g, &vars, c).unwrap();
        assert_eq!(g.shape(logits), &[3, 7]);
        let probs = g.softmax(logits, 0).unwrap();
        let p = g.value(probs).data();
        for t in 0..7 {
            let s: f64 = (0..3).map(|k| p[k * 7 + t]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let flat = g.constant(Tensor::zeros(&[9, 7]));
        assert!(m.decode_message(&mut g, &vars, flat).is_err());
    }

    #[test]
    fn carrier_decoder_gradient_reaches_all_upstream_params() {
        let m = model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, true);
        let c = g.constant(carrier(&mut rng, 5));
        let e = m.encode_carrier(&mut g, &vars, c).unwrap();
        let me = m.embed_message(&mut g, &vars, &[0, 1, 2, 1, 0]).unwrap();
        let h = m.carrier_decoder_input(&mut g, e, c, me).unwrap();
        let out = m.decode_carrier(&mut g, &vars, h).unwrap();
        let sq = g.mul(out, out).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let message_start = m.params().iter().position(|p| p.name.starts_with("message")).unwrap();
        for (p, &v) in m.params().iter().zip(vars.vars()).take(message_start) {
            let grad = g.grad(v).unwrap_or_else(|| panic!("{} has no gradient", p.name));
            assert!(grad.norm() > 0.0, "{} gradient is zero", p.name);
        }
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let m = model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let c = carrier(&mut rng, 4);
        let a = m.message_logits(c.data(), 4).unwrap();
        let b = m.message_logits(c.data(), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn container_round_trip_preserves_outputs() {
        let m = model(8);
        let back = WatermarkModel::from_container(&Container::from_bytes(&m.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let c = carrier(&mut rng, 4);
        assert_eq!(
            m.message_logits(c.data(), 4).unwrap(),
            back.message_logits(c.data(), 4).unwrap()
        );
    }

    #[test]
    fn bins_must_match_stft() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(WatermarkModel::new(NetConfig::compact(10), tiny_stft(), 16_000, &mut rng).is_err());
    }
}

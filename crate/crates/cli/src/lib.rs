//! Subcommands behind the `quietmark` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use quietmark::attacks::{apply_attack_with, AttackSpec, CodecBackend};
use quietmark::checkpoint::Container;
use quietmark::data::{list_wavs, synth_corpus};
use quietmark::decode::decode_audio;
use quietmark::dsp::wav::{read_wav, write_wav, WavFormat};
use quietmark::embed::{embed, EmbedConfig, DEFAULT_ALPHA};
use quietmark::eval::{evaluate, standard_columns, EvalConfig};
use quietmark::msgcodec::{MessageFrame, DEFAULT_TAU};
use quietmark::nets::WatermarkModel;
use quietmark::train::{TrainConfig, TrainState, Trainer};
use quietmark::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CARRIER: i32 = 4;
pub const EXIT_NOT_DETECTED: i32 = 5;
const EXIT_OTHER: i32 = 1;

/// Payload length assumed when neither the flag nor the model says.
const DEFAULT_BITS: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "quietmark", version, about = "Spectrogram-domain audio watermarking")]
pub struct Cli {
    /// TOML file with defaults for the flags below; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed a payload into a WAV file.
    Encode(EncodeArgs),
    /// Recover the payload and report detection.
    Decode(DecodeArgs),
    /// Presence test only.
    Detect(DecodeArgs),
    /// Apply one attack to a WAV file.
    Attack(AttackArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Run the attack matrix over a directory of WAV files.
    Eval(EvalArgs),
    /// Write synthetic test clips.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// Hex (MSB first) or `0b`-prefixed binary.
    #[arg(long)]
    pub payload: Option<String>,
    /// SDR floor in dB.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Write 16-bit PCM instead of 32-bit float.
    #[arg(long)]
    pub pcm16: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Payload length; defaults to the length the model was trained with.
    #[arg(long)]
    pub bits: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    /// `kind:key=value,...`, e.g. `gn:snr=40` or `codec:format=mp3,bitrate=64`.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `external` or `simulated`.
    #[arg(long)]
    pub codec_backend: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training TOML; every field is optional.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Start from the small CPU setting.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Training checkpoint written during and after the run.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a training checkpoint (its config is used).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Inference model written at the end.
    #[arg(long, short)]
    pub output: PathBuf,
    /// Progress line period in steps; 0 is silent.
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory of WAV files.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated column labels to keep (default: all).
    #[arg(long)]
    pub columns: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub codec_backend: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Per-file `C' - C` CSV dumps go here.
    #[arg(long)]
    pub spectrograms: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 12.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 16_000)]
    pub rate: u32,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Defaults read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub payload: Option<String>,
    pub bits: Option<usize>,
    pub seed: Option<u64>,
    pub codec_backend: Option<String>,
    pub workers: Option<usize>,
}

impl CliConfig {
    pub fn load(path: &Path) -> quietmark::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::CarrierTooShort { .. } | Error::SilentCarrier | Error::InputTooShort { .. } => EXIT_CARRIER,
        Error::Read { .. }
        | Error::Io(_)
        | Error::Wav(_)
        | Error::NotACheckpoint(_)
        | Error::CheckpointVersion { .. }
        | Error::TruncatedCheckpoint(_)
        | Error::CodecMissing(_)
        | Error::CodecFailed { .. } => EXIT_IO,
        Error::Config(_)
        | Error::Payload { .. }
        | Error::AttackSpec { .. }
        | Error::EmptyDataset(_)
        | Error::EvaluationOnlyAttack(_)
        | Error::SilentReference => EXIT_USAGE,
        _ => EXIT_OTHER,
    }
}

fn required<T>(v: Option<T>, flag: &str) -> quietmark::Result<T> {
    v.ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn check_tau(tau: f64) -> quietmark::Result<f64> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(tau)
    } else {
        Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")))
    }
}

fn backend(name: Option<&str>) -> quietmark::Result<CodecBackend> {
    match name.unwrap_or("external") {
        "external" => Ok(CodecBackend::External),
        "simulated" => Ok(CodecBackend::Simulated),
        b => Err(Error::Config(format!("unknown codec backend `{b}` (external or simulated)"))),
    }
}

/// Model plus the payload length stored alongside it, if any.
fn load_model(path: &Path) -> quietmark::Result<(WatermarkModel, Option<usize>)> {
    let c = Container::read(path)?;
    let bits = c.parse::<usize>("payload_bits").ok();
    Ok((WatermarkModel::from_container(&c)?, bits))
}

/// Saves `model` with its training payload length in the header.
pub fn save_model(model: &WatermarkModel, payload_bits: usize, path: &Path) -> quietmark::Result<()> {
    let mut c = model.to_container();
    c.set("payload_bits", payload_bits);
    c.write(path)
}

fn print_json(out: &mut dyn Write, v: &serde_json::Value) -> quietmark::Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(v).expect("json"))?;
    Ok(())
}

/// Runs `cli`, writing reports to `out`; returns the exit status.
pub fn run(cli: Cli, out: &mut dyn Write) -> quietmark::Result<i32> {
    let file = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    match cli.command {
        Command::Encode(a) => cmd_encode(a, &file, out),
        Command::Decode(a) => cmd_decode(a, &file, out, false),
        Command::Detect(a) => cmd_decode(a, &file, out, true),
        Command::Attack(a) => cmd_attack(a, &file, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, &file, out),
        Command::Synth(a) => cmd_synth(a, &file, out),
    }
}

fn cmd_encode(a: EncodeArgs, file: &CliConfig, out: &mut dyn Write) -> quietmark::Result<i32> {
    let model_path = required(a.model.or(file.model.clone()), "model")?;
    let frame = MessageFrame::parse(&required(a.payload.or(file.payload.clone()), "payload")?)?;
    let cfg = EmbedConfig::with_alpha(a.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA));
    cfg.validate()?;

    let (model, _) = load_model(&model_path)?;
    let audio = read_wav(&a.input)?;
    let audio = quietmark::dsp::resample(&audio, model.sample_rate())?;
    let (marked, report) = embed(&model, &audio, &frame, &cfg)?;
    let format = if a.pcm16 { WavFormat::Pcm16 } else { WavFormat::Float32 };
    write_wav(&a.output, &marked, format)?;
    print_json(
        out,
        &json!({
            "achieved_sdr_db": report.achieved_sdr,
            "clipped_bins": report.clipped_bins,
            "repetitions": report.repetitions,
            "duration_s": marked.duration_secs(),
        }),
    )?;
    Ok(EXIT_OK)
}

fn cmd_decode(a: DecodeArgs, file: &CliConfig, out: &mut dyn Write, detect_only: bool) -> quietmark::Result<i32> {
    let model_path = required(a.model.or(file.model.clone()), "model")?;
    let tau = check_tau(a.tau.or(file.tau).unwrap_or(DEFAULT_TAU))?;
    let (model, stored_bits) = load_model(&model_path)?;
    let bits = a.bits.or(file.bits).or(stored_bits).unwrap_or(DEFAULT_BITS);
    MessageFrame::new(vec![0; bits])?;
    let audio = read_wav(&a.input)?;
    let report = decode_audio(&model, &audio, bits, tau)?;
    let ratios = report.mode_ratios();
    if detect_only {
        print_json(
            out,
            &json!({
                "detected": report.detected,
                "min_mode_ratio": ratios.iter().copied().fold(f64::INFINITY, f64::min),
                "tau": tau,
            }),
        )?;
    } else {
        print_json(
            out,
            &json!({
                "payload_hex": report.payload_text(),
                "detected": report.detected,
                "offset": report.offset,
                "per_position_mode_ratio": ratios,
                "repetitions": report.repetitions,
            }),
        )?;
    }
    Ok(if report.detected { EXIT_OK } else { EXIT_NOT_DETECTED })
}

fn cmd_attack(a: AttackArgs, file: &CliConfig, out: &mut dyn Write) -> quietmark::Result<i32> {
    let spec = AttackSpec::parse(&a.spec, a.seed.or(file.seed).unwrap_or(0))?;
    let backend = backend(a.codec_backend.as_deref().or(file.codec_backend.as_deref()))?;
    let audio = read_wav(&a.input)?;
    let attacked = apply_attack_with(&audio, &spec, &backend)?;
    write_wav(&a.output, &attacked, WavFormat::Float32)?;
    print_json(
        out,
        &json!({
            "spec": spec.to_string(),
            "kind": spec.attack.kind(),
            "seed": spec.seed,
            "input_duration_s": audio.duration_secs(),
            "output_duration_s": attacked.duration_secs(),
        }),
    )?;
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> quietmark::Result<i32> {
    let (mut state, mut cfg) = match &a.resume {
        Some(p) => {
            let (s, c) = TrainState::load(p)?;
            (Some(s), c)
        }
        None => {
            let cfg = match &a.train_config {
                Some(p) => TrainConfig::load(p)?,
                None if a.toy => TrainConfig::toy(),
                None => TrainConfig::default(),
            };
            (None, cfg)
        }
    };
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if a.resume.is_none() {
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if a.data.is_some() {
            cfg.data_dir = a.data.clone();
        }
    }
    if a.metrics.is_some() {
        cfg.metrics_csv = a.metrics.clone();
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    cfg.validate()?;
    let mut trainer = Trainer::from_config(cfg.clone())?;
    let mut state = match state.take() {
        Some(s) => s,
        None => trainer.init_state()?,
    };
    let every = a.log_every;
    let mut last = None;
    trainer.run(&mut state, |m| {
        if every > 0 && m.step % every == 0 {
            eprintln!(
                "step {} loss {:.4} acc {:.3} clean {:.3} sdr {:.2}",
                m.step, m.loss, m.accuracy, m.clean_accuracy, m.sdr
            );
        }
        last = Some(m.loss);
    })?;
    save_model(&state.model, cfg.payload_bits, &a.output)?;
    print_json(
        out,
        &json!({
            "steps": state.step,
            "final_loss": last,
            "running_loss": state.running_loss,
            "model": a.output.display().to_string(),
        }),
    )?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs, file: &CliConfig, out: &mut dyn Write) -> quietmark::Result<i32> {
    let model_path = required(a.model.or(file.model.clone()), "model")?;
    let embed = EmbedConfig::with_alpha(a.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA));
    embed.validate()?;
    let tau = check_tau(a.tau.or(file.tau).unwrap_or(DEFAULT_TAU))?;
    let backend = backend(a.codec_backend.as_deref().or(file.codec_backend.as_deref()))?;
    let mut columns = standard_columns();
    if let Some(keep) = &a.columns {
        let keep: Vec<&str> = keep.split(',').map(str::trim).collect();
        if let Some(bad) = keep.iter().find(|k| !columns.iter().any(|c| c.label == **k)) {
            let valid: Vec<_> = columns.iter().map(|c| c.label.as_str()).collect();
            return Err(Error::Config(format!(
                "unknown column `{bad}`; valid: {}",
                valid.join(", ")
            )));
        }
        columns.retain(|c| keep.contains(&c.label.as_str()));
    }

    let (model, stored_bits) = load_model(&model_path)?;
    let bits = a.bits.or(file.bits).or(stored_bits).unwrap_or(DEFAULT_BITS);
    let files = list_wavs(&a.data)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no .wav files in {}", a.data.display())));
    }
    let clips = files
        .iter()
        .map(|f| {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            read_wav(f).map(|a| (name, a))
        })
        .collect::<quietmark::Result<Vec<_>>>()?;
    let cfg = EvalConfig {
        embed,
        tau,
        payload_bits: bits,
        seed: a.seed.or(file.seed).unwrap_or(0),
        backend,
        workers: a.workers.or(file.workers).unwrap_or(4),
        spectrogram_dir: a.spectrograms,
    };
    let table = evaluate(&model, &clips, &columns, &cfg)?;
    let csv = table.to_csv();
    match &a.output {
        Some(p) => std::fs::write(p, csv)?,
        None => out.write_all(csv.as_bytes())?,
    }
    Ok(EXIT_OK)
}

fn cmd_synth(a: SynthArgs, file: &CliConfig, out: &mut dyn Write) -> quietmark::Result<i32> {
    if a.count == 0 || a.seconds <= 0.0 || a.rate == 0 {
        return Err(Error::Config("count, seconds and rate must be positive".into()));
    }
    std::fs::create_dir_all(&a.output)?;
    let clips = synth_corpus(a.count, a.seconds, a.rate, a.seed.or(file.seed).unwrap_or(0));
    let mut written = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let p = a.output.join(format!("clip_{i:04}.wav"));
        write_wav(&p, c, WavFormat::Float32)?;
        written.push(p.display().to_string());
    }
    print_json(out, &json!({ "files": written }))?;
    Ok(EXIT_OK)
}

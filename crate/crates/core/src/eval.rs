//! Robustness evaluation: embed a per-file payload, apply each attack of a
//! matrix, decode, and tabulate payload accuracy and SDR.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attacks::{apply_attack_with, Attack, AttackSpec, CodecBackend, CodecFormat, QuantGrid, CODEC_BITRATES};
use crate::decode::decode_audio;
use crate::dsp::{resample, AudioBuffer};
use crate::embed::{embed, EmbedConfig};
use crate::error::{Error, Result};
use crate::msgcodec::{MessageFrame, DEFAULT_TAU};
use crate::nets::WatermarkModel;

/// One column of the attack matrix. `None` is the unattacked signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalColumn {
    pub label: String,
    pub attack: Option<Attack>,
}

impl EvalColumn {
    pub fn new(label: impl Into<String>, attack: Option<Attack>) -> Self {
        Self {
            label: label.into(),
            attack,
        }
    }
}

/// No attack, GN, 50C, EQ, MX, Q, TJ, RS, then MP3, OGG and AAC at 64, 128
/// and 256 kbps.
pub fn standard_columns() -> Vec<EvalColumn> {
    let mut cols = vec![
        EvalColumn::new("No attack", None),
        EvalColumn::new("GN", Some(Attack::GaussianNoise { snr_db: 40.0 })),
        EvalColumn::new("50C", Some(Attack::Crop { fraction: 0.5 })),
        EvalColumn::new(
            "EQ",
            Some(Attack::Eq {
                centers_hz: crate::attacks::EQ_CENTERS_HZ.to_vec(),
                gain_db: 15.0,
                q: 1.0,
            }),
        ),
        EvalColumn::new(
            "MX",
            Some(Attack::Mix {
                interferer: None,
                level_db: -15.0,
            }),
        ),
        EvalColumn::new(
            "Q",
            Some(Attack::Quantize {
                bits: 16,
                grid: QuantGrid::Float,
            }),
        ),
        EvalColumn::new("TJ", Some(Attack::TimeJitter { rate: 1e-3 })),
        EvalColumn::new("RS", Some(Attack::Resample { target_hz: None })),
    ];
    for format in CodecFormat::EXTERNAL {
        for bitrate in CODEC_BITRATES {
            cols.push(EvalColumn::new(
                format!("{}{bitrate}", format.name().to_uppercase()),
                Some(Attack::Codec { format, bitrate }),
            ));
        }
    }
    cols
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub embed: EmbedConfig,
    pub tau: f64,
    pub payload_bits: usize,
    pub seed: u64,
    pub backend: CodecBackend,
    /// Files processed at once.
    pub workers: usize,
    /// Directory for per-file `C' - C` CSV dumps.
    pub spectrogram_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            embed: EmbedConfig::default(),
            tau: DEFAULT_TAU,
            payload_bits: 32,
            seed: 0,
            backend: CodecBackend::default(),
            workers: 4,
            spectrogram_dir: None,
        }
    }
}

/// Results for one file. Cells are `None` where the attack could not run
/// (a missing codec binary, for instance).
#[derive(Debug, Clone, PartialEq)]
pub struct FileResult {
    pub name: String,
    pub payload: MessageFrame,
    pub sdr: f64,
    /// Payload bit accuracy in `[0, 1]` per column.
    pub accuracy: Vec<Option<f64>>,
    pub detected: Vec<Option<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub columns: Vec<String>,
    pub files: Vec<FileResult>,
}

impl EvalTable {
    /// Mean accuracy per column over the files where it ran.
    pub fn column_means(&self) -> Vec<Option<f64>> {
        (0..self.columns.len())
            .map(|c| mean(self.files.iter().filter_map(|f| f.accuracy[c])))
            .collect()
    }

    pub fn mean_accuracy(&self) -> Option<f64> {
        mean(self.column_means().into_iter().flatten())
    }

    pub fn mean_sdr(&self) -> Option<f64> {
        mean(self.files.iter().map(|f| f.sdr))
    }

    /// Accuracy mean for the column labelled `label`.
    pub fn column(&self, label: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == label)?;
        self.column_means()[i]
    }

    /// `file,sdr_db,<columns>,mean_accuracy`, one row per file and a final
    /// `mean` row. Accuracies are percentages; `n/a` marks skipped cells.
    pub fn to_csv(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::from("file,sdr_db");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push_str(",mean_accuracy\n");
        for f in &self.files {
            let _ = write!(s, "{},{:.3}", f.name, f.sdr);
            for a in &f.accuracy {
                let _ = write!(s, ",{}", pct(*a));
            }
            let _ = writeln!(s, ",{}", pct(mean(f.accuracy.iter().flatten().copied())));
        }
        let _ = write!(s, "mean,{}", self.mean_sdr().map_or("n/a".into(), |v| format!("{v:.3}")));
        for a in self.column_means() {
            let _ = write!(s, ",{}", pct(a));
        }
        let _ = writeln!(s, ",{}", pct(self.mean_accuracy()));
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = it.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

/// Payload for file `index`, independent of the other files.
pub fn file_payload(seed: u64, index: usize, bits: usize) -> Result<MessageFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    MessageFrame::random(bits, &mut rng)
}

fn attack_seed(seed: u64, file: usize, column: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(((file as u64) << 16) | column as u64)
}

/// Embeds, attacks and decodes one file for every column.
pub fn evaluate_file(
    model: &WatermarkModel,
    name: &str,
    audio: &AudioBuffer,
    index: usize,
    columns: &[EvalColumn],
    cfg: &EvalConfig,
) -> Result<FileResult> {
    let audio = resample(audio, model.sample_rate())?;
    let payload = file_payload(cfg.seed, index, cfg.payload_bits)?;
    let (marked, report) = embed(model, &audio, &payload, &cfg.embed)?;
    if let Some(dir) = &cfg.spectrogram_dir {
        dump_difference(dir, name, &audio, &report.watermarked_spec)?;
    }
    let mut accuracy = Vec::with_capacity(columns.len());
    let mut detected = Vec::with_capacity(columns.len());
    for (c, col) in columns.iter().enumerate() {
        let attacked = match &col.attack {
            None => Ok(marked.clone()),
            Some(a) => apply_attack_with(&marked, &AttackSpec::new(a.clone(), attack_seed(cfg.seed, index, c)), &cfg.backend),
        };
        let attacked = match attacked {
            Ok(a) => a,
            Err(Error::CodecMissing(_) | Error::CodecFailed { .. }) => {
                accuracy.push(None);
                detected.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        match decode_audio(model, &attacked, cfg.payload_bits, cfg.tau) {
            Ok(r) => {
                accuracy.push(Some(r.bit_accuracy(payload.payload())));
                detected.push(Some(r.detected));
            }
            Err(Error::CarrierTooShort { .. }) => {
                accuracy.push(Some(0.0));
                detected.push(Some(false));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(FileResult {
        name: name.to_string(),
        payload,
        sdr: report.achieved_sdr,
        accuracy,
        detected,
    })
}

/// Runs the matrix over `clips`; rows keep the input order.
pub fn evaluate(
    model: &WatermarkModel,
    clips: &[(String, AudioBuffer)],
    columns: &[EvalColumn],
    cfg: &EvalConfig,
) -> Result<EvalTable> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let files = pool.install(|| {
        clips
            .par_iter()
            .enumerate()
            .map(|(i, (name, audio))| evaluate_file(model, name, audio, i, columns, cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(EvalTable {
        columns: columns.iter().map(|c| c.label.clone()).collect(),
        files,
    })
}

/// Writes `C' - C` as one CSV row per frequency bin.
fn dump_difference(dir: &Path, name: &str, audio: &AudioBuffer, marked: &crate::dsp::Spectrogram) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let original = crate::dsp::stft(audio, marked.config())?;
    let (bins, frames) = (marked.bins(), marked.frames());
    let mut s = String::new();
    for f in 0..bins {
        let row = (0..frames)
            .map(|t| {
                let i = f * frames + t;
                format!("{:.6e}", marked.magnitude()[i] - original.magnitude()[i])
            })
            .collect::<Vec<_>>()
            .join(",");
        s.push_str(&row);
        s.push('\n');
    }
    let stem = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name);
    std::fs::write(dir.join(format!("{stem}.diff.csv")), s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_corpus;
    use crate::dsp::StftConfig;
    use crate::nets::NetConfig;

    fn model() -> WatermarkModel {
        let stft = StftConfig::profile_16k();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        WatermarkModel::new(NetConfig::compact(stft.bins()), stft, 16_000, &mut rng).unwrap()
    }

    #[test]
    fn standard_columns_cover_the_table() {
        let labels: Vec<_> = standard_columns().into_iter().map(|c| c.label).collect();
        assert_eq!(labels.len(), 17);
        assert_eq!(&labels[..8], ["No attack", "GN", "50C", "EQ", "MX", "Q", "TJ", "RS"]);
        assert!(labels.contains(&"MP364".to_string()));
        assert!(labels.contains(&"AAC256".to_string()));
    }

    #[test]
    fn csv_is_deterministic_and_codecs_without_binaries_are_skipped() {
        std::env::set_var("QUIETMARK_FFMPEG", "/nonexistent/ffmpeg");
        let clips: Vec<_> = synth_corpus(2, 1.5, 16_000, 9)
            .into_iter()
            .enumerate()
            .map(|(i, a)| (format!("clip{i}.wav"), a))
            .collect();
        let mut cols = standard_columns();
        cols.truncate(3);
        cols.push(EvalColumn::new(
            "MP364",
            Some(Attack::Codec {
                format: CodecFormat::Mp3,
                bitrate: 64,
            }),
        ));
        let cfg = EvalConfig {
            payload_bits: 8,
            embed: EmbedConfig::with_alpha(40.0),
            ..EvalConfig::default()
        };
        let m = model();
        let a = evaluate(&m, &clips, &cols, &cfg).unwrap();
        let b = evaluate(&m, &clips, &cols, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.files.iter().all(|f| f.sdr >= 40.0 - 1e-6 && f.accuracy[3].is_none()));
        let csv = a.to_csv();
        assert!(csv.starts_with("file,sdr_db,No attack,GN,50C,MP364,mean_accuracy\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().ends_with(&format!(
            ",n/a,{:.2}",
            100.0 * a.mean_accuracy().unwrap()
        )));
        assert!(evaluate(&m, &[], &cols, &cfg).is_err());
    }

    #[test]
    fn payloads_depend_on_index_only() {
        let a = file_payload(3, 5, 16).unwrap();
        assert_eq!(a, file_payload(3, 5, 16).unwrap());
        assert_ne!(a, file_payload(3, 6, 16).unwrap());
    }

    #[test]
    fn spectrogram_dumps_have_one_row_per_bin() {
        let dir = tempfile::tempdir().unwrap();
        let clips = vec![("x.wav".to_string(), synth_corpus(1, 1.5, 16_000, 2).remove(0))];
        let cfg = EvalConfig {
            payload_bits: 8,
            spectrogram_dir: Some(dir.path().to_path_buf()),
            ..EvalConfig::default()
        };
        evaluate(&model(), &clips, &standard_columns()[..1], &cfg).unwrap();
        let text = std::fs::read_to_string(dir.path().join("x.diff.csv")).unwrap();
        assert_eq!(text.lines().count(), 1025);
        assert!(text
            .split(|c| c == ',' || c == '\n')
            .filter(|v| !v.is_empty())
            .all(|v| v.parse::<f64>().unwrap() <= 0.0));
    }
}

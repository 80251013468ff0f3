//! On-disk formats: JSONL records, binary model checkpoints, metric CSVs and
//! the run-directory lock.

use crate::error::{Error, Result};
use crate::model::text::encode_prompt;
use crate::model::{BackboneConfig, HeadKind, Token, Transformer};
use crate::ppo::IterationMetrics;
use crate::reward::EpochStats;
use crate::tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

fn open_input(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Reads one JSON object per non-blank line. Parse failures name the file
/// and line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(open_input(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(items)?.as_bytes())
}

/// Appends one line and flushes it to disk.
pub fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let mut line = serde_json::to_string(item)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

/// A prompt given either as plain text (wrapped in the instruction frame and
/// byte-encoded) or as raw token ids. Exactly one of the two must be present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<Token>>,
}

impl PromptRecord {
    pub fn from_tokens(id: impl Into<String>, tokens: Vec<Token>) -> Self {
        Self {
            id: id.into(),
            text: None,
            tokens: Some(tokens),
        }
    }

    pub fn from_text(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: Some(text.into()),
            tokens: None,
        }
    }

    /// Model input for this prompt, checked against `vocab_size`.
    pub fn resolve(&self, vocab_size: usize) -> Result<Vec<Token>> {
        let tokens = match (&self.text, &self.tokens) {
            (Some(text), None) => encode_prompt(text),
            (None, Some(tokens)) => tokens.clone(),
            _ => {
                return Err(Error::Schema(format!(
                    "prompt `{}` needs exactly one of `text` or `tokens`",
                    self.id
                )))
            }
        };
        if tokens.is_empty() {
            return Err(Error::Schema(format!("prompt `{}` is empty", self.id)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Schema(format!(
                "prompt `{}` has token {t} outside vocabulary {vocab_size}",
                self.id
            )));
        }
        Ok(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub prompt_id: String,
    pub response_id: u32,
    pub tokens: Vec<Token>,
    pub seed: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = open_input(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRLHFCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: BackboneConfig,
    pub head: HeadKind,
    pub params: Vec<ParamEntry>,
}

/// Layout: magic, u32 format version, u64 header length, JSON header, every
/// parameter as little-endian f64 in header order, then the SHA-256 of all
/// preceding bytes.
pub fn encode_checkpoint(model: &Transformer) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config().clone(),
        head: model.head(),
        params: model
            .named_params()
            .map(|(name, t)| ParamEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + 8 * model.parameter_count() + DIGEST_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Transformer> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("header runs past end of file"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let layout = header.config.parameter_layout(header.head);
    let names: Vec<(&str, &[usize])> = header.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice())).collect();
    let expected: Vec<(&str, &[usize])> = layout.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    if names != expected {
        return Err(bad("parameter table does not match the architecture"));
    }
    let mut payload = body[header_end..].chunks_exact(8);
    if payload.len() != header.config.parameter_count(header.head) || !payload.remainder().is_empty() {
        return Err(bad("payload length does not match the parameter table"));
    }
    let mut params = Vec::with_capacity(layout.len());
    for (_, shape) in &layout {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = payload
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    Transformer::from_parts(header.config, header.head, params)
}

pub fn save_checkpoint(path: &Path, model: &Transformer) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Transformer> {
    let mut bytes = Vec::new();
    open_input(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Column order of the PPO metrics CSV.
pub const METRICS_COLUMNS: [&str; 6] = ["iteration", "mean_reward", "mean_kl", "clip_fraction", "actor_loss", "critic_loss"];

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Schema(format!("csv: {other:?}")),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(&row).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn write_metrics_csv(path: &Path, history: &[IterationMetrics]) -> Result<()> {
    write_csv(
        path,
        &METRICS_COLUMNS,
        history.iter().map(|m| {
            vec![
                m.iteration.to_string(),
                m.mean_reward.to_string(),
                m.mean_kl.to_string(),
                m.clip_fraction.to_string(),
                m.actor_loss.to_string(),
                m.critic_loss.to_string(),
            ]
        }),
    )
}

/// One parsed metrics row, in [`METRICS_COLUMNS`] order.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(open_input(path)?);
    let header: Vec<String> = r.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Schema(format!("{}: metrics columns {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

pub const REWARD_CURVE_COLUMNS: [&str; 3] = ["epoch", "train_loss", "held_out_accuracy"];

pub fn write_reward_curve_csv(path: &Path, curve: &[EpochStats]) -> Result<()> {
    write_csv(
        path,
        &REWARD_CURVE_COLUMNS,
        curve.iter().map(|s| {
            vec![
                s.epoch.to_string(),
                s.train_loss.to_string(),
                s.held_out_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

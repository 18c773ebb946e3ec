//! Binary checkpoint container and the model-level save/load on top of it.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PLSM" | version u16 | config_len u32 | config utf-8
//! entry_count u32
//! per entry: name_len u32 | name | payload_code u8 | payload
//!   code 0 (tensor): flags u8 (bit 0 = trainable) | rank u8 | dims u32 x rank | f64 x numel
//!   code 1 (bytes):  len u64 | bytes
//! crc32 u32 of every preceding byte
//! ```
//!
//! The same container carries model parameters (tensor entries) and random
//! forests (opaque tree payloads); the `kind=` line of the config text says
//! which. Writes go through a temp file and rename, so a failed save never
//! leaves a half-written checkpoint behind.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

use super::{build_model, BlockKind, ModelConfig, ModelParams, StageSpec, StemSpec};

pub const MAGIC: [u8; 4] = *b"PLSM";
pub const VERSION: u16 = 1;

const PAYLOAD_TENSOR: u8 = 0;
const PAYLOAD_BYTES: u8 = 1;

#[derive(Debug, Clone)]
pub enum Payload {
    Tensor { tensor: Tensor, trainable: bool },
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub config_text: String,
    pub entries: Vec<(String, Payload)>,
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        push_str(&mut buf, &self.config_text);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, payload) in &self.entries {
            push_str(&mut buf, name);
            match payload {
                Payload::Tensor { tensor, trainable } => {
                    buf.push(PAYLOAD_TENSOR);
                    buf.push(u8::from(*trainable));
                    buf.push(tensor.rank() as u8);
                    for &d in tensor.shape() {
                        buf.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for v in tensor.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Bytes(bytes) => {
                    buf.push(PAYLOAD_BYTES);
                    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                    buf.extend_from_slice(bytes);
                }
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 {
            return Err(CheckpointError::Truncated("header").into());
        }
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CheckpointError::UnknownVersion(version).into());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed }.into());
        }

        let mut r = Reader {
            bytes: body,
            pos: 6,
        };
        let config_text = r.string("config")?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string("entry name")?;
            let payload = match r.u8("payload code")? {
                PAYLOAD_TENSOR => {
                    let trainable = r.u8("tensor flags")? & 1 == 1;
                    let rank = r.u8("tensor rank")? as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(r.u32("tensor dim")? as usize);
                    }
                    let numel: usize = shape.iter().product();
                    let mut data = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        data.push(r.f64("tensor data")?);
                    }
                    let tensor = Tensor::new(shape, data)
                        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
                    Payload::Tensor { tensor, trainable }
                }
                PAYLOAD_BYTES => {
                    let len = r.u64("payload length")? as usize;
                    Payload::Bytes(r.take(len, "payload bytes")?.to_vec())
                }
                code => return Err(CheckpointError::UnknownPayload(code).into()),
            };
            entries.push((name, payload));
        }
        Ok(Container {
            config_text,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Value of the `kind=` line in the config text, if present.
    pub fn kind(&self) -> Option<&str> {
        self.config_text
            .lines()
            .find_map(|l| l.strip_prefix("kind="))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what).into());
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::BadConfig(format!("{what} is not utf-8")).into())
    }
}

// ---------------------------------------------------------------------------
// Canonical config text
// ---------------------------------------------------------------------------

pub fn config_to_text(config: &ModelConfig) -> String {
    let (c, h, w) = config.input_size;
    let (pw, ps) = config.stem.pool.unwrap_or((0, 0));
    let stages = config
        .stages
        .iter()
        .map(|s| {
            let kind = match s.kind {
                BlockKind::Basic => "basic",
                BlockKind::Bottleneck => "bottleneck",
            };
            format!("{kind}:{}:{}:{}", s.blocks, s.out_channels, s.first_stride)
        })
        .collect::<Vec<_>>()
        .join(";");
    let head = config
        .head_hidden
        .iter()
        .map(usize::to_string)
        .chain(std::iter::once("1".to_string()))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "input={c},{h},{w}\nstem={},{},{},{pw},{ps}\nskip={}\nbn={}\nstages={stages}\nhead={head}\n",
        config.stem.out_channels,
        config.stem.kernel,
        config.stem.stride,
        u8::from(config.skip_connections),
        u8::from(config.batch_norm),
    )
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let bad = |msg: String| -> Error { CheckpointError::BadConfig(msg).into() };
    let mut input = None;
    let mut stem = None;
    let mut skip = None;
    let mut bn = None;
    let mut stages = None;
    let mut head = None;

    for line in text.lines() {
        if line.is_empty() || line.starts_with("kind=") {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("bad config line {line:?}")))?;
        let nums = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|p| p.parse::<usize>().map_err(|_| bad(format!("bad number in {v:?}"))))
                .collect()
        };
        match key {
            "input" => {
                let v = nums(value)?;
                if v.len() != 3 {
                    return Err(bad("input needs 3 values".into()));
                }
                input = Some((v[0], v[1], v[2]));
            }
            "stem" => {
                let v = nums(value)?;
                if v.len() != 5 {
                    return Err(bad("stem needs 5 values".into()));
                }
                stem = Some(StemSpec {
                    out_channels: v[0],
                    kernel: v[1],
                    stride: v[2],
                    pool: (v[3] > 0).then_some((v[3], v[4])),
                });
            }
            "skip" => skip = Some(value == "1"),
            "bn" => bn = Some(value == "1"),
            "stages" => {
                let mut specs = Vec::new();
                if !value.is_empty() {
                    for part in value.split(';') {
                        let fields: Vec<&str> = part.split(':').collect();
                        if fields.len() != 4 {
                            return Err(bad(format!("bad stage spec {part:?}")));
                        }
                        let kind = match fields[0] {
                            "basic" => BlockKind::Basic,
                            "bottleneck" => BlockKind::Bottleneck,
                            other => return Err(bad(format!("unknown block kind {other:?}"))),
                        };
                        let parse = |s: &str| {
                            s.parse::<usize>()
                                .map_err(|_| bad(format!("bad number in stage {part:?}")))
                        };
                        specs.push(StageSpec {
                            kind,
                            blocks: parse(fields[1])?,
                            out_channels: parse(fields[2])?,
                            first_stride: parse(fields[3])?,
                        });
                    }
                }
                stages = Some(specs);
            }
            "head" => {
                let v = nums(value)?;
                if v.last() != Some(&1) {
                    return Err(bad("head must end with output dim 1".into()));
                }
                head = Some(v[..v.len() - 1].to_vec());
            }
            other => return Err(bad(format!("unknown config key {other:?}"))),
        }
    }

    let config = ModelConfig {
        input_size: input.ok_or_else(|| bad("missing input".into()))?,
        stem: stem.ok_or_else(|| bad("missing stem".into()))?,
        stages: stages.ok_or_else(|| bad("missing stages".into()))?,
        head_hidden: head.ok_or_else(|| bad("missing head".into()))?,
        skip_connections: skip.ok_or_else(|| bad("missing skip".into()))?,
        batch_norm: bn.ok_or_else(|| bad("missing bn".into()))?,
    };
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Model save / load
// ---------------------------------------------------------------------------

pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let ledger = config.parameter_ledger()?;
    let mut entries = Vec::with_capacity(ledger.len());
    for spec in &ledger {
        let tensor = params
            .get(&spec.name)
            .ok_or_else(|| CheckpointError::MissingParameter(spec.name.clone()))?;
        entries.push((
            spec.name.clone(),
            Payload::Tensor {
                tensor: tensor.clone(),
                trainable: spec.trainable,
            },
        ));
    }
    let container = Container {
        config_text: format!("kind=model\n{}", config_to_text(config)),
        entries,
    };
    container.write(path)
}

/// Load a model checkpoint, verifying CRC, config, and that the parameter set
/// matches the config's ledger exactly (no missing entries, no extras).
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let container = Container::read(path)?;
    if container.kind() != Some("model") {
        return Err(CheckpointError::BadConfig(format!(
            "expected kind=model, got {:?}",
            container.kind().unwrap_or("<none>")
        ))
        .into());
    }
    let config = config_from_text(&container.config_text)?;
    let ledger = config.parameter_ledger()?;

    let mut params = ModelParams::default();
    let mut seen = std::collections::HashSet::new();
    for (name, payload) in &container.entries {
        let Payload::Tensor { tensor, .. } = payload else {
            return Err(CheckpointError::BadConfig(format!(
                "model entry {name:?} is not a tensor"
            ))
            .into());
        };
        let spec = ledger
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| CheckpointError::UnexpectedParameter(name.clone()))?;
        if spec.shape != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                got: tensor.shape().to_vec(),
                expected: spec.shape.clone(),
            }
            .into());
        }
        params.insert(name.clone(), tensor.clone().with_requires_grad(spec.trainable));
        seen.insert(name.clone());
    }
    for spec in &ledger {
        if !seen.contains(&spec.name) {
            return Err(CheckpointError::MissingParameter(spec.name.clone()).into());
        }
    }
    Ok((params, config))
}

/// Which parameters a fine-tune load reused and which it re-initialized.
#[derive(Debug, Clone, Default)]
pub struct FinetuneReport {
    pub loaded: Vec<String>,
    pub reinitialized: Vec<String>,
}

/// Initialize parameters for `target_config`, reusing every checkpoint tensor
/// whose name and shape match and re-initializing the rest (fresh init from
/// `init_seed`). The report lists exactly which names fell in each bucket.
pub fn load_for_finetune(
    path: &Path,
    target_config: &ModelConfig,
    init_seed: u64,
) -> Result<(ModelParams, FinetuneReport)> {
    let (source, _) = load_checkpoint(path)?;
    let mut params = build_model(target_config, init_seed)?;
    let mut report = FinetuneReport::default();
    for spec in target_config.parameter_ledger()? {
        match source.get(&spec.name) {
            Some(tensor) if tensor.shape() == spec.shape => {
                params.insert(
                    spec.name.clone(),
                    tensor.clone().with_requires_grad(spec.trainable),
                );
                report.loaded.push(spec.name);
            }
            _ => report.reinitialized.push(spec.name),
        }
    }
    Ok((params, report))
}

//! Checkpoint files: a text manifest, a tensor directory, then the raw
//! little-endian `f64` parameter blob.
//!
//! ```text
//! EQUIADA-CKPT 1
//! kind base
//! step 2000
//! feature_dim 2
//! blob_sha256 <hex>
//! loss_tail 0.91 0.88
//! config hidden = 32
//! tensor embed.0.w 1 2,32 0 64
//! END
//! <blob>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adapter::{AdapterConfig, AdapterStack};
use crate::backbone::DenoiserModel;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

use super::{task::GLOBAL_DIM, RunConfig};

const HEADER: &str = "EQUIADA-CKPT 1";
const LOSS_TAIL: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Base,
    Adapter,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Base => "base",
            CheckpointKind::Adapter => "adapter",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub step: usize,
    pub feature_dim: usize,
    /// Last training losses, oldest first.
    pub loss_tail: Vec<f64>,
    pub params: ParamSet,
    /// Base layers the adapter blocks were copied from.
    pub source_layers: Vec<usize>,
    /// Hash of the base blob an adapter was trained against.
    pub base_sha256: Option<String>,
    /// Hash of the same base blob once training finished.
    pub base_sha256_after: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn params_sha256(params: &ParamSet) -> String {
    sha256_hex(&params.blob())
}

pub fn adapter_config(cfg: &RunConfig) -> AdapterConfig {
    AdapterConfig {
        blocks: cfg.blocks,
        strategy: cfg.strategy,
        control: cfg.control,
        ablation: cfg.ablation,
        global_dim: GLOBAL_DIM,
    }
}

pub fn loss_tail(history: &[f64]) -> Vec<f64> {
    history[history.len().saturating_sub(LOSS_TAIL)..].to_vec()
}

impl Checkpoint {
    pub fn base(config: &RunConfig, model: &DenoiserModel, step: usize, losses: &[f64]) -> Self {
        Self {
            kind: CheckpointKind::Base,
            config: config.clone(),
            step,
            feature_dim: model.config().feature_dim,
            loss_tail: loss_tail(losses),
            params: model.params().clone(),
            source_layers: Vec::new(),
            base_sha256: None,
            base_sha256_after: None,
        }
    }

    pub fn adapter(
        config: &RunConfig,
        base: &Checkpoint,
        stack: &AdapterStack,
        step: usize,
        losses: &[f64],
        base_after: &DenoiserModel,
    ) -> Self {
        Self {
            kind: CheckpointKind::Adapter,
            config: config.clone(),
            step,
            feature_dim: base.feature_dim,
            loss_tail: loss_tail(losses),
            params: stack.params().clone(),
            source_layers: stack.source_layers().to_vec(),
            base_sha256: Some(base.blob_sha256()),
            base_sha256_after: Some(params_sha256(base_after.params())),
        }
    }

    pub fn blob_sha256(&self) -> String {
        params_sha256(&self.params)
    }

    /// The frozen base model of a base checkpoint.
    pub fn model(&self) -> Result<DenoiserModel> {
        if self.kind != CheckpointKind::Base {
            return Err(Error::Invalid("not a base checkpoint".into()));
        }
        let mut m = DenoiserModel::from_params(self.config.model_config(self.feature_dim), self.params.clone())?;
        m.freeze();
        Ok(m)
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        adapter_config(&self.config)
    }

    /// The adapter stack of an adapter checkpoint on `base`, whose hash must
    /// match the recorded one.
    pub fn stack(&self, base: &Checkpoint) -> Result<(DenoiserModel, AdapterStack)> {
        if self.kind != CheckpointKind::Adapter {
            return Err(Error::Invalid("not an adapter checkpoint".into()));
        }
        let want = self.base_sha256.clone().unwrap_or_default();
        let got = base.blob_sha256();
        if want != got {
            return Err(Error::HashMismatch {
                expected: want,
                actual: got,
            });
        }
        let model = base.model()?;
        let stack = AdapterStack::from_params(
            &model,
            self.adapter_config(),
            self.source_layers.clone(),
            self.params.clone(),
        )?;
        Ok((model, stack))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut m = String::new();
        let _ = writeln!(m, "{HEADER}");
        let _ = writeln!(m, "kind {}", self.kind.as_str());
        let _ = writeln!(m, "step {}", self.step);
        let _ = writeln!(m, "feature_dim {}", self.feature_dim);
        let _ = writeln!(m, "blob_sha256 {}", self.blob_sha256());
        if let Some(h) = &self.base_sha256 {
            let _ = writeln!(m, "base_sha256 {h}");
        }
        if let Some(h) = &self.base_sha256_after {
            let _ = writeln!(m, "base_sha256_after {h}");
        }
        if !self.source_layers.is_empty() {
            let s: Vec<String> = self.source_layers.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(m, "source_layers {}", s.join(","));
        }
        let tail: Vec<String> = self.loss_tail.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(m, "loss_tail {}", tail.join(" "));
        for line in self.config.echo().lines() {
            let _ = writeln!(m, "config {line}");
        }
        let mut offset = 0;
        for p in self.params.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                m,
                "tensor {} {} {} {} {}",
                p.name,
                u8::from(p.trainable),
                dims.join(","),
                offset,
                p.value.len()
            );
            offset += p.value.len();
        }
        let _ = writeln!(m, "END");
        let mut out = m.into_bytes();
        out.extend_from_slice(&self.params.blob());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = find_end(bytes)?;
        let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
        let blob = &bytes[end + "END\n".len()..];
        let mut lines = text.lines();
        match lines.next() {
            Some(HEADER) => {}
            Some(h) if h.starts_with("EQUIADA-CKPT ") => {
                let found = h["EQUIADA-CKPT ".len()..].trim().parse().unwrap_or(0);
                return Err(Error::Version { found, expected: 1 });
            }
            _ => return Err(Error::Format("not a checkpoint file".into())),
        }
        let mut kind = None;
        let mut step = None;
        let mut feature_dim = None;
        let mut blob_hash = None;
        let mut base_sha256 = None;
        let mut base_sha256_after = None;
        let mut source_layers = Vec::new();
        let mut tail = Vec::new();
        let mut config_text = String::new();
        let mut tensors = Vec::new();
        let bad = |l: &str| Error::Format(format!("bad manifest line `{l}`"));
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "kind" => {
                    kind = Some(match rest {
                        "base" => CheckpointKind::Base,
                        "adapter" => CheckpointKind::Adapter,
                        _ => return Err(bad(line)),
                    })
                }
                "step" => step = Some(rest.parse::<usize>().map_err(|_| bad(line))?),
                "feature_dim" => feature_dim = Some(rest.parse::<usize>().map_err(|_| bad(line))?),
                "blob_sha256" => blob_hash = Some(rest.to_string()),
                "base_sha256" => base_sha256 = Some(rest.to_string()),
                "base_sha256_after" => base_sha256_after = Some(rest.to_string()),
                "source_layers" => {
                    source_layers = rest
                        .split(',')
                        .map(|v| v.parse::<usize>().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?
                }
                "loss_tail" => {
                    tail = rest
                        .split_whitespace()
                        .map(|v| v.parse::<f64>().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?
                }
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 5 {
                        return Err(bad(line));
                    }
                    let dims = f[2]
                        .split(',')
                        .map(|v| v.parse::<usize>().map_err(|_| bad(line)))
                        .collect::<Result<Vec<_>>>()?;
                    let trainable = match f[1] {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad(line)),
                    };
                    let offset = f[3].parse::<usize>().map_err(|_| bad(line))?;
                    let len = f[4].parse::<usize>().map_err(|_| bad(line))?;
                    tensors.push((f[0].to_string(), trainable, dims, offset, len));
                }
                _ => return Err(bad(line)),
            }
        }
        let missing = |k: &str| Error::Format(format!("manifest lacks `{k}`"));
        let blob_hash = blob_hash.ok_or_else(|| missing("blob_sha256"))?;
        let total: usize = tensors.iter().map(|t| t.4).sum();
        if blob.len() != total * 8 {
            return Err(Error::Truncated {
                expected: end + 4 + total * 8,
                actual: bytes.len(),
            });
        }
        let got = sha256_hex(blob);
        if got != blob_hash {
            return Err(Error::HashMismatch {
                expected: blob_hash,
                actual: got,
            });
        }
        let mut params = ParamSet::new();
        for (name, trainable, dims, offset, len) in tensors {
            if offset + len > total {
                return Err(Error::Format(format!("tensor `{name}` runs past the blob")));
            }
            let data = blob[offset * 8..(offset + len) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(&dims, data)?, trainable)?;
        }
        Ok(Self {
            kind: kind.ok_or_else(|| missing("kind"))?,
            config: RunConfig::parse(&config_text)?,
            step: step.ok_or_else(|| missing("step"))?,
            feature_dim: feature_dim.ok_or_else(|| missing("feature_dim"))?,
            loss_tail: tail,
            params,
            source_layers,
            base_sha256,
            base_sha256_after,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn find_end(bytes: &[u8]) -> Result<usize> {
    let mut start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            if &bytes[start..i] == b"END" {
                return Ok(start);
            }
            start = i + 1;
        }
    }
    Err(Error::Format("manifest has no END line".into()))
}

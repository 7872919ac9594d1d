//! Network checkpoints: a small binary container holding the architecture,
//! training progress, and every state tensor (weights, biases, norm
//! statistics) as little-endian `f32`.
//!
//! Layout: the magic `RCNN`, a format version, the byte length of a textual
//! key=value header, the header itself, then the state values in visitor
//! order. The explicit header length makes the container parseable without
//! scanning for delimiters.

use std::path::Path;

use super::net::{build_net, DenoiserNet, NetConfig};
use super::TensorFloat;
use crate::error::FormatError;
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"RCNN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training progress stored alongside the weights so a run can resume with
/// the schedule it left off at.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// Epochs fully completed before this snapshot was taken.
    pub epochs_completed: usize,
    /// Base learning rate of the run (the schedule recomputes the per-epoch
    /// value from this and the epoch index).
    pub lr: f64,
    pub decay: f64,
    /// Master seed of the run that produced the snapshot.
    pub seed: u64,
}

fn header_text(cfg: &NetConfig, meta: &CheckpointMeta, values: usize) -> String {
    // Fixed key order keeps equal inputs byte-identical.
    format!(
        "levels={}\nbase_filters={}\nconvs_per_block={}\nkernel={}\nuse_batchnorm={}\n\
         epochs_completed={}\nlr={}\ndecay={}\nseed={}\ndtype=f32le\nvalues={}\n",
        cfg.levels,
        cfg.base_filters,
        cfg.convs_per_block,
        cfg.kernel,
        cfg.use_batchnorm,
        meta.epochs_completed,
        meta.lr,
        meta.decay,
        meta.seed,
        values
    )
}

/// Writes the network state and training progress to `path`.
pub fn save_checkpoint<T: TensorFloat>(
    net: &DenoiserNet<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let values = net.state_count();
    let header = header_text(net.config(), meta, values);
    let mut bytes = Vec::with_capacity(12 + header.len() + 4 * values);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    net.for_each_state(&mut |s| {
        for v in s {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    });
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.at + n > self.bytes.len() {
            return Err(FormatError::Truncated {
                needed: self.at + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn parse_header(text: &str) -> std::result::Result<(NetConfig, CheckpointMeta, usize), FormatError> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::MalformedHeader(format!("line without '=': {line}")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(FormatError::MalformedHeader(format!("duplicate key {k}")));
        }
    }
    let known = [
        "levels",
        "base_filters",
        "convs_per_block",
        "kernel",
        "use_batchnorm",
        "epochs_completed",
        "lr",
        "decay",
        "seed",
        "dtype",
        "values",
    ];
    for k in map.keys() {
        if !known.contains(&k.as_str()) {
            return Err(FormatError::MalformedHeader(format!("unknown key {k}")));
        }
    }
    let get = |k: &str| {
        map.get(k)
            .ok_or_else(|| FormatError::MalformedHeader(format!("missing key {k}")))
    };
    let int = |k: &str| -> std::result::Result<usize, FormatError> {
        get(k)?
            .parse::<usize>()
            .map_err(|_| FormatError::MalformedHeader(format!("bad integer for {k}")))
    };
    let float = |k: &str| -> std::result::Result<f64, FormatError> {
        get(k)?
            .parse::<f64>()
            .map_err(|_| FormatError::MalformedHeader(format!("bad number for {k}")))
    };
    if get("dtype")? != "f32le" {
        return Err(FormatError::MalformedHeader(format!(
            "unsupported dtype {}",
            get("dtype")?
        )));
    }
    let cfg = NetConfig {
        levels: int("levels")?,
        base_filters: int("base_filters")?,
        convs_per_block: int("convs_per_block")?,
        kernel: int("kernel")?,
        use_batchnorm: match get("use_batchnorm")?.as_str() {
            "true" => true,
            "false" => false,
            other => {
                return Err(FormatError::MalformedHeader(format!(
                    "bad flag for use_batchnorm: {other}"
                )))
            }
        },
    };
    let meta = CheckpointMeta {
        epochs_completed: int("epochs_completed")?,
        lr: float("lr")?,
        decay: float("decay")?,
        seed: get("seed")?
            .parse::<u64>()
            .map_err(|_| FormatError::MalformedHeader("bad integer for seed".into()))?,
    };
    Ok((cfg, meta, int("values")?))
}

/// Reads a checkpoint, rebuilds the network it describes, and restores every
/// state tensor.
pub fn load_checkpoint<T: TensorFloat>(path: &Path) -> Result<(DenoiserNet<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        at: 0,
    };
    let magic = cur.take(4).map_err(Error::Format)?;
    if magic != MAGIC {
        return Err(Error::Format(FormatError::BadMagic {
            expected: MAGIC,
            found: magic.try_into().unwrap(),
        }));
    }
    let version = cur.u32().map_err(Error::Format)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(FormatError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        }));
    }
    let header_len = cur.u32().map_err(Error::Format)? as usize;
    let header = std::str::from_utf8(cur.take(header_len).map_err(Error::Format)?)
        .map_err(|_| Error::Format(FormatError::MalformedHeader("header is not UTF-8".into())))?;
    let (cfg, meta, values) = parse_header(header).map_err(Error::Format)?;

    // The initialization seed is irrelevant: every state value is replaced.
    let mut net = build_net::<T>(&cfg, 0)?;
    if net.state_count() != values {
        return Err(Error::Integrity(format!(
            "checkpoint declares {values} state values but the architecture has {}",
            net.state_count()
        )));
    }
    let payload = cur.take(4 * values).map_err(Error::Format)?;
    if cur.at != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cur.at
        )));
    }
    let mut at = 0usize;
    net.for_each_state_mut(&mut |s| {
        for v in s {
            let raw: [u8; 4] = payload[at..at + 4].try_into().unwrap();
            *v = T::from_f64_lossy(f32::from_le_bytes(raw) as f64);
            at += 4;
        }
    });
    Ok((net, meta))
}

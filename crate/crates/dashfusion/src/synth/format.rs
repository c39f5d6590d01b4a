//! Bit-exact on-disk formats.
//!
//! Tensor container (`.dfts`): magic `DFTS`, format version `u16`, rank
//! `u32`, dims `u32[rank]`, dtype tag `u8` (0 = f32, 1 = u32 token ids),
//! little-endian row-major payload, trailing CRC32 over all preceding
//! bytes. The dataset directory holds `manifest.json` plus
//! `{train,valid,test}/{text,audio,vision,labels}.dfts`; parameter
//! checkpoints reuse the container as a single flat f32 blob plus a
//! name -> (shape, offset) manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Dataset, Split, SynthConfig, SPLITS};
use crate::tensor::{ParamSet, Tensor};

pub const DFTS_MAGIC: &[u8; 4] = b"DFTS";
pub const DFTS_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => DTYPE_F32,
            Payload::U32(_) => DTYPE_U32,
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::U32(_) => "u32",
        }
    }
}

/// Serialize a tensor container to bytes.
pub fn encode_dfts(dims: &[usize], payload: &Payload) -> Result<Vec<u8>> {
    let numel: usize = dims.iter().product();
    if numel != payload.len() {
        return Err(Error::Format {
            path: "<encode>".into(),
            reason: format!("dims {dims:?} disagree with payload length {}", payload.len()),
        });
    }
    let mut out = Vec::with_capacity(15 + 4 * dims.len() + 4 * payload.len());
    out.extend_from_slice(DFTS_MAGIC);
    out.extend_from_slice(&DFTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(payload.dtype());
    match payload {
        Payload::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::U32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parse a tensor container, verifying the trailing CRC32.
pub fn decode_dfts(bytes: &[u8], path: &str) -> Result<(Vec<usize>, Payload)> {
    let fmt = |reason: String| Error::Format {
        path: path.to_string(),
        reason,
    };
    if bytes.len() < 15 {
        return Err(fmt("truncated file (shorter than any valid header)".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_string(),
            stored,
            computed,
        });
    }
    if &body[0..4] != DFTS_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = u16::from_le_bytes(body[4..6].try_into().unwrap());
    if version != DFTS_VERSION {
        return Err(fmt(format!(
            "unsupported format version {version} (expected {DFTS_VERSION})"
        )));
    }
    let rank = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
    let dims_end = 10 + 4 * rank;
    if body.len() < dims_end + 1 {
        return Err(fmt("truncated header".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(body[10 + 4 * i..14 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let dtype = body[dims_end];
    let data = &body[dims_end + 1..];
    let numel: usize = dims.iter().product();
    if data.len() != 4 * numel {
        return Err(fmt(format!(
            "payload holds {} bytes but dims {dims:?} require {}",
            data.len(),
            4 * numel
        )));
    }
    let payload = match dtype {
        DTYPE_F32 => Payload::F32(
            data.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DTYPE_U32 => Payload::U32(
            data.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        other => return Err(fmt(format!("unknown dtype tag {other}"))),
    };
    Ok((dims, payload))
}

pub fn write_dfts(path: &Path, dims: &[usize], payload: &Payload) -> Result<u32> {
    let bytes = encode_dfts(dims, payload)?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    fs::write(path, bytes)?;
    Ok(crc)
}

pub fn read_dfts(path: &Path) -> Result<(Vec<usize>, Payload)> {
    let bytes = fs::read(path)?;
    decode_dfts(&bytes, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// dataset directory

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FileEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub crc32: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitEntry {
    pub count: usize,
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u16,
    pub seed: u64,
    pub config: SynthConfig,
    pub label_stats: LabelStats,
    pub splits: BTreeMap<String, SplitEntry>,
}

fn label_stats(ds: &Dataset) -> LabelStats {
    let all: Vec<f64> = [&ds.train, &ds.valid, &ds.test]
        .iter()
        .flat_map(|s| s.labels.iter().map(|&v| v as f64))
        .collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    LabelStats {
        mean,
        std: var.sqrt(),
        min: all.iter().cloned().fold(f64::INFINITY, f64::min),
        max: all.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn split_files(split: &Split, cfg: &SynthConfig) -> Vec<(&'static str, Vec<usize>, Payload)> {
    vec![
        (
            "text",
            vec![split.n, cfg.seq_lens.text],
            Payload::U32(split.text.clone()),
        ),
        (
            "audio",
            vec![split.n, cfg.seq_lens.audio, cfg.dims.audio],
            Payload::F32(split.audio.clone()),
        ),
        (
            "vision",
            vec![split.n, cfg.seq_lens.vision, cfg.dims.vision],
            Payload::F32(split.vision.clone()),
        ),
        ("labels", vec![split.n], Payload::F32(split.labels.clone())),
    ]
}

/// Write `manifest.json` plus the per-split tensor containers.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut splits = BTreeMap::new();
    for name in SPLITS {
        let split = ds.split(name);
        let sub = dir.join(name.key());
        fs::create_dir_all(&sub)?;
        let mut files = BTreeMap::new();
        for (fname, dims, payload) in split_files(split, &ds.config) {
            let crc = write_dfts(&sub.join(format!("{fname}.dfts")), &dims, &payload)?;
            files.insert(
                fname.to_string(),
                FileEntry {
                    shape: dims,
                    dtype: payload.dtype_name().to_string(),
                    crc32: format!("{crc:08x}"),
                },
            );
        }
        splits.insert(
            name.key().to_string(),
            SplitEntry {
                count: split.n,
                files,
            },
        );
    }
    let manifest = DatasetManifest {
        format_version: DFTS_VERSION,
        seed: ds.config.seed,
        config: ds.config.clone(),
        label_stats: label_stats(ds),
        splits,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Load a dataset directory, verifying checksums and manifest/payload
/// agreement.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != DFTS_VERSION {
        return Err(Error::Format {
            path: manifest_path.display().to_string(),
            reason: format!(
                "unsupported manifest version {} (expected {DFTS_VERSION})",
                manifest.format_version
            ),
        });
    }
    let cfg = manifest.config.clone();

    let mut loaded: BTreeMap<&str, Split> = BTreeMap::new();
    for name in SPLITS {
        let entry = manifest.splits.get(name.key()).ok_or_else(|| Error::Format {
            path: manifest_path.display().to_string(),
            reason: format!("manifest is missing split {}", name.key()),
        })?;
        let sub = dir.join(name.key());
        let read = |fname: &str| -> Result<(Vec<usize>, Payload)> {
            let path = sub.join(format!("{fname}.dfts"));
            let (dims, payload) = read_dfts(&path)?;
            let fe = entry.files.get(fname).ok_or_else(|| Error::Format {
                path: manifest_path.display().to_string(),
                reason: format!("manifest is missing {}/{fname}", name.key()),
            })?;
            if fe.shape != dims {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!(
                        "manifest shape {:?} disagrees with payload header {:?}",
                        fe.shape, dims
                    ),
                });
            }
            if fe.dtype != payload.dtype_name() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!(
                        "manifest dtype {} disagrees with payload {}",
                        fe.dtype,
                        payload.dtype_name()
                    ),
                });
            }
            Ok((dims, payload))
        };
        let (text_dims, text) = read("text")?;
        let (_, audio) = read("audio")?;
        let (_, vision) = read("vision")?;
        let (label_dims, labels) = read("labels")?;
        let n = text_dims[0];
        if entry.count != n || label_dims != [n] {
            return Err(Error::Format {
                path: sub.display().to_string(),
                reason: "split counts disagree across files".into(),
            });
        }
        let split = match (text, audio, vision, labels) {
            (Payload::U32(text), Payload::F32(audio), Payload::F32(vision), Payload::F32(labels)) => {
                Split {
                    n,
                    text,
                    audio,
                    vision,
                    labels,
                }
            }
            _ => {
                return Err(Error::Format {
                    path: sub.display().to_string(),
                    reason: "unexpected dtypes in split payloads".into(),
                })
            }
        };
        loaded.insert(name.key(), split);
    }
    Ok(Dataset {
        config: cfg,
        train: loaded.remove("train").unwrap(),
        valid: loaded.remove("valid").unwrap(),
        test: loaded.remove("test").unwrap(),
    })
}

// ---------------------------------------------------------------------------
// parameter checkpoints

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    /// Offset in f32 elements into the payload blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u16,
    pub total_len: usize,
    pub entries: BTreeMap<String, CheckpointEntry>,
}

/// Save parameters as `{stem}.json` + `{stem}.dfts` (one flat f32 blob).
pub fn save_params(params: &ParamSet, stem: &Path) -> Result<()> {
    let mut entries = BTreeMap::new();
    let mut blob: Vec<f32> = Vec::with_capacity(params.total_len());
    for p in params.iter() {
        entries.insert(
            p.name.clone(),
            CheckpointEntry {
                shape: p.value.shape().to_vec(),
                offset: blob.len(),
                trainable: p.trainable,
            },
        );
        blob.extend(p.value.data().iter().map(|&v| v as f32));
    }
    let manifest = CheckpointManifest {
        format_version: DFTS_VERSION,
        total_len: blob.len(),
        entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(stem.with_extension("json"), json)?;
    write_dfts(
        &stem.with_extension("dfts"),
        &[blob.len()],
        &Payload::F32(blob),
    )?;
    Ok(())
}

pub fn load_params(stem: &Path) -> Result<ParamSet> {
    let manifest_path = stem.with_extension("json");
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let blob_path = stem.with_extension("dfts");
    let (dims, payload) = read_dfts(&blob_path)?;
    let blob = match payload {
        Payload::F32(v) => v,
        _ => {
            return Err(Error::Format {
                path: blob_path.display().to_string(),
                reason: "checkpoint payload must be f32".into(),
            })
        }
    };
    if dims != [manifest.total_len] || blob.len() != manifest.total_len {
        return Err(Error::Format {
            path: blob_path.display().to_string(),
            reason: format!(
                "payload length {} disagrees with manifest total {}",
                blob.len(),
                manifest.total_len
            ),
        });
    }
    let mut set = ParamSet::new();
    for (name, entry) in &manifest.entries {
        let numel: usize = entry.shape.iter().product();
        if entry.offset + numel > blob.len() {
            return Err(Error::Format {
                path: blob_path.display().to_string(),
                reason: format!("entry {name} overruns the payload"),
            });
        }
        let data: Vec<f64> = blob[entry.offset..entry.offset + numel]
            .iter()
            .map(|&v| v as f64)
            .collect();
        set.insert(
            name,
            Tensor::from_vec(entry.shape.clone(), data)?,
            entry.trainable,
        )?;
    }
    Ok(set)
}

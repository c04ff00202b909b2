//! On-disk dataset format.
//!
//! A dataset directory holds `manifest.json` plus one binary record file per
//! split (`train.bin`, `val.bin`, `test.bin`). Record framing:
//!
//! ```text
//! [u32 LE header length][UTF-8 JSON header][payload bytes]
//! ```
//!
//! The header carries `{"id", "label"|"answer", "meta", "panels", "h", "w"}`;
//! the payload is `panels * h * w` bytes of 8-bit grayscale, row-major within
//! a panel, panel-major across panels. A stored byte `i` denotes intensity
//! `i / 255`. RPM records store the 8 context panels followed by the 8
//! option panels; attribute grids are reconstructed from pixels on read.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::bongard::{ConceptFamily, ConceptParams, MiniBongardProblem};
use super::rpm::{Attribute, MiniRpmProblem, Regime, RuleMetadata, Split};
use super::shapes::{decode, Geometry, Panel};
use crate::hash::Fnv1a;

pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER_LEN: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("header JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported dataset format version {0}")]
    Version(u32),
    #[error("truncated record {index} in {file}")]
    Truncated { file: String, index: usize },
    #[error("checksum mismatch for split {split}: manifest {expect}, file {got}")]
    Checksum {
        split: String,
        expect: String,
        got: String,
    },
    #[error("record {index}: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error("split {split}: manifest says {expect} records, file has {got}")]
    CountMismatch {
        split: String,
        expect: usize,
        got: usize,
    },
    #[error("manifest kind does not match record content at record {index}")]
    KindMismatch { index: usize },
    #[error("missing split file {0}")]
    MissingSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "mini-bongard")]
    MiniBongard,
    #[serde(rename = "mini-rpm")]
    MiniRpm,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::MiniBongard => "mini-bongard",
            DatasetKind::MiniRpm => "mini-rpm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub kind: DatasetKind,
    pub splits: BTreeMap<String, SplitStats>,
    pub h: usize,
    pub w: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codebook: Option<Vec<String>>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
    pub config_hash: String,
    pub tool_version: String,
}

/// Everything the writer needs besides the problems themselves.
#[derive(Debug, Clone)]
pub struct DatasetWriteConfig {
    pub kind: DatasetKind,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    pub regime: Option<Regime>,
    pub concept: Option<String>,
    pub codebook: Option<Vec<String>>,
    pub config_hash: String,
}

/// A loaded split.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSet {
    Bongard(Vec<MiniBongardProblem>),
    Rpm(Vec<MiniRpmProblem>),
}

impl ProblemSet {
    pub fn len(&self) -> usize {
        match self {
            ProblemSet::Bongard(v) => v.len(),
            ProblemSet::Rpm(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> DatasetKind {
        match self {
            ProblemSet::Bongard(_) => DatasetKind::MiniBongard,
            ProblemSet::Rpm(_) => DatasetKind::MiniRpm,
        }
    }
}

/// A dataset directory read back into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub splits: BTreeMap<String, ProblemSet>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Option<&ProblemSet> {
        self.splits.get(split.name())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    answer: Option<usize>,
    meta: serde_json::Value,
    panels: usize,
    h: usize,
    w: usize,
}

fn encode_record(buf: &mut Vec<u8>, header: &RecordHeader, panels: &[&Panel]) {
    let header_bytes = serde_json::to_vec(header).expect("header serializes");
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for p in panels {
        buf.extend_from_slice(&p.bytes);
    }
}

fn encode_split(set: &ProblemSet) -> Vec<u8> {
    let mut buf = Vec::new();
    match set {
        ProblemSet::Bongard(problems) => {
            for p in problems {
                let header = RecordHeader {
                    id: p.id,
                    label: Some(p.concept.name().to_string()),
                    answer: None,
                    meta: serde_json::to_value(p.params).expect("params serialize"),
                    panels: p.panels.len(),
                    h: p.panels[0].h,
                    w: p.panels[0].w,
                };
                let refs: Vec<&Panel> = p.panels.iter().collect();
                encode_record(&mut buf, &header, &refs);
            }
        }
        ProblemSet::Rpm(problems) => {
            for p in problems {
                let header = RecordHeader {
                    id: p.id,
                    label: None,
                    answer: Some(p.answer),
                    meta: serde_json::to_value(&p.meta).expect("meta serializes"),
                    panels: p.context.len() + p.options.len(),
                    h: p.context[0].h,
                    w: p.context[0].w,
                };
                let refs: Vec<&Panel> = p.context.iter().chain(p.options.iter()).collect();
                encode_record(&mut buf, &header, &refs);
            }
        }
    }
    buf
}

/// Writes `manifest.json` plus one `.bin` file per provided split and returns
/// the manifest that was written.
pub fn write_dataset(
    dir: &Path,
    cfg: &DatasetWriteConfig,
    splits: &[(Split, &ProblemSet)],
) -> Result<DatasetManifest, DatasetIoError> {
    fs::create_dir_all(dir)?;
    let mut stats = BTreeMap::new();
    for (split, set) in splits {
        let bytes = encode_split(set);
        let mut hasher = Fnv1a::new();
        hasher.update(&bytes);
        stats.insert(
            split.name().to_string(),
            SplitStats {
                count: set.len(),
                checksum: format!("{:016x}", hasher.finish()),
            },
        );
        fs::write(dir.join(format!("{}.bin", split.name())), bytes)?;
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        kind: cfg.kind,
        splits: stats,
        h: cfg.h,
        w: cfg.w,
        codebook: cfg.codebook.clone(),
        seed: cfg.seed,
        regime: cfg.regime,
        concept: cfg.concept.clone(),
        config_hash: cfg.config_hash.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DatasetIoError> {
    let raw = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&raw)?;
    if manifest.version != FORMAT_VERSION {
        return Err(DatasetIoError::Version(manifest.version));
    }
    Ok(manifest)
}

fn rebuild_rpm_problem(
    header: &RecordHeader,
    panels: Vec<Panel>,
    index: usize,
) -> Result<MiniRpmProblem, DatasetIoError> {
    let meta: RuleMetadata = serde_json::from_value(header.meta.clone())?;
    let answer = header
        .answer
        .ok_or(DatasetIoError::KindMismatch { index })?;
    if panels.len() != 16 {
        return Err(DatasetIoError::BadRecord {
            index,
            reason: format!("expected 16 panels, got {}", panels.len()),
        });
    }
    if answer >= 8 {
        return Err(DatasetIoError::BadRecord {
            index,
            reason: format!("answer index {answer} out of range"),
        });
    }
    let mut iter = panels.into_iter();
    let context: Vec<Panel> = iter.by_ref().take(8).collect();
    let options: Vec<Panel> = iter.collect();

    // Attribute grids are not stored on the wire; rebuild them by decoding.
    let geom = Geometry::rpm();
    let decode_values = |panel: &Panel, where_: &str| -> Result<[u8; 3], DatasetIoError> {
        let shapes = decode(panel, &geom).map_err(|e| DatasetIoError::BadRecord {
            index,
            reason: format!("{where_}: {e}"),
        })?;
        if shapes.len() != 1 {
            return Err(DatasetIoError::BadRecord {
                index,
                reason: format!("{where_}: expected one shape, got {}", shapes.len()),
            });
        }
        let s = &shapes[0];
        Ok([s.shade_value, s.kind.value(), s.size_value])
    };
    let mut grids = [[[0u8; 3]; 3]; 3];
    for (i, panel) in context.iter().enumerate() {
        let vals = decode_values(panel, &format!("context panel {i}"))?;
        for attr in Attribute::ALL {
            grids[attr.index()][i / 3][i % 3] = vals[attr.index()];
        }
    }
    let mut option_values = Vec::with_capacity(8);
    for (i, panel) in options.iter().enumerate() {
        option_values.push(decode_values(panel, &format!("option panel {i}"))?);
    }
    for attr in Attribute::ALL {
        grids[attr.index()][2][2] = option_values[answer][attr.index()];
    }
    Ok(MiniRpmProblem {
        id: header.id,
        context,
        options,
        answer,
        meta,
        grids,
        option_values,
    })
}

fn decode_split_bytes(
    bytes: &[u8],
    kind: DatasetKind,
    file: &str,
) -> Result<ProblemSet, DatasetIoError> {
    let mut bongard = Vec::new();
    let mut rpm = Vec::new();
    let mut cursor = 0usize;
    let mut index = 0usize;
    while cursor < bytes.len() {
        let truncated = |_: ()| DatasetIoError::Truncated {
            file: file.to_string(),
            index,
        };
        if cursor + 4 > bytes.len() {
            return Err(truncated(()));
        }
        let header_len =
            u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().expect("4 bytes")) as usize;
        cursor += 4;
        if header_len == 0 || header_len > MAX_HEADER_LEN || cursor + header_len > bytes.len() {
            return Err(truncated(()));
        }
        let header: RecordHeader = serde_json::from_slice(&bytes[cursor..cursor + header_len])
            .map_err(|e| DatasetIoError::BadRecord {
                index,
                reason: format!("header: {e}"),
            })?;
        cursor += header_len;
        let payload = header.panels * header.h * header.w;
        if cursor + payload > bytes.len() {
            return Err(truncated(()));
        }
        let mut panels = Vec::with_capacity(header.panels);
        for p in 0..header.panels {
            let start = cursor + p * header.h * header.w;
            panels.push(Panel {
                h: header.h,
                w: header.w,
                bytes: bytes[start..start + header.h * header.w].to_vec(),
            });
        }
        cursor += payload;
        match kind {
            DatasetKind::MiniBongard => {
                let label = header
                    .label
                    .as_deref()
                    .and_then(ConceptFamily::from_name)
                    .ok_or(DatasetIoError::KindMismatch { index })?;
                let params: ConceptParams = serde_json::from_value(header.meta.clone())?;
                if params.family() != label || panels.len() != 14 {
                    return Err(DatasetIoError::BadRecord {
                        index,
                        reason: "label/meta/panel-count disagree".to_string(),
                    });
                }
                bongard.push(MiniBongardProblem {
                    id: header.id,
                    concept: label,
                    params,
                    panels,
                });
            }
            DatasetKind::MiniRpm => {
                rpm.push(rebuild_rpm_problem(&header, panels, index)?);
            }
        }
        index += 1;
    }
    Ok(match kind {
        DatasetKind::MiniBongard => ProblemSet::Bongard(bongard),
        DatasetKind::MiniRpm => ProblemSet::Rpm(rpm),
    })
}

/// Reads one split, verifying the manifest checksum and record count.
pub fn read_split(
    dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<ProblemSet, DatasetIoError> {
    let name = split.name();
    let stats = manifest
        .splits
        .get(name)
        .ok_or_else(|| DatasetIoError::MissingSplit(name.to_string()))?;
    let path = dir.join(format!("{name}.bin"));
    let mut bytes = Vec::new();
    fs::File::open(&path)
        .map_err(|_| DatasetIoError::MissingSplit(name.to_string()))?
        .read_to_end(&mut bytes)?;
    let mut hasher = Fnv1a::new();
    hasher.update(&bytes);
    let got = format!("{:016x}", hasher.finish());
    if got != stats.checksum {
        return Err(DatasetIoError::Checksum {
            split: name.to_string(),
            expect: stats.checksum.clone(),
            got,
        });
    }
    let set = decode_split_bytes(&bytes, manifest.kind, &format!("{name}.bin"))?;
    if set.len() != stats.count {
        return Err(DatasetIoError::CountMismatch {
            split: name.to_string(),
            expect: stats.count,
            got: set.len(),
        });
    }
    Ok(set)
}

/// Reads the manifest plus every split it lists.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetIoError> {
    let manifest = read_manifest(dir)?;
    let mut splits = BTreeMap::new();
    for name in manifest.splits.keys() {
        let split = match name.as_str() {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(DatasetIoError::MissingSplit(other.to_string())),
        };
        splits.insert(name.clone(), read_split(dir, &manifest, split)?);
    }
    Ok(Dataset { manifest, splits })
}

// Writing is single-writer by construction: one process builds the byte
// buffers and writes each file once.

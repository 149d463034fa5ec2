//! On-disk formats.
//!
//! A dataset is a directory holding `manifest.json` and `embeddings.smrt`.
//! The blob is `b"SMRT"`, a `u32` format version, a `u32` record count, then
//! for each record its dino, siglip and text-token floats as little-endian
//! `f32`, in that order. Everything else about a record lives in the manifest.
//!
//! Checkpoints reuse the container header with tensors as entries: `u32` name
//! length, UTF-8 name, `u32` rank, `u32` extents, then the `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::{AnswerType, EmbeddingRecord, RecordDims, SkillClass};
use super::DataError;

pub const MAGIC: &[u8; 4] = b"SMRT";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "embeddings.smrt";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub id: usize,
    pub count: usize,
    pub answer_type: AnswerType,
    pub skill_class: SkillClass,
}

/// Per-record fields that are not embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub puzzle_group: usize,
    pub valid_len: usize,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_sequences: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_sequence: Option<Vec<usize>>,
    /// Unassigned records fall outside the per-group cap.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic { seed: u64, separability: f64 },
    RealExtracted {
        /// Backbone identifier → pinned revision.
        #[serde(default)]
        backbones: BTreeMap<String, String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dims: RecordDims,
    pub groups: Vec<GroupInfo>,
    pub records: Vec<RecordMeta>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    /// Manifest describing `records`, with no split assigned yet.
    pub fn describe(records: &[EmbeddingRecord], dims: RecordDims, num_groups: usize, provenance: Provenance) -> Self {
        let mut groups: Vec<GroupInfo> = (0..num_groups)
            .map(|id| GroupInfo { id, count: 0, answer_type: AnswerType::Classification, skill_class: SkillClass::ALL[id % 8] })
            .collect();
        for r in records {
            if let Some(g) = groups.get_mut(r.puzzle_group) {
                g.count += 1;
                g.answer_type = r.answer_type;
                g.skill_class = r.skill_class;
            }
        }
        let records = records
            .iter()
            .map(|r| RecordMeta {
                puzzle_group: r.puzzle_group,
                valid_len: r.valid_len,
                label: r.label,
                option_sequences: r.option_sequences.clone(),
                answer_sequence: r.answer_sequence.clone(),
                split: None,
            })
            .collect();
        Self { format_version: FORMAT_VERSION, dims, groups, records, provenance }
    }

    pub fn set_splits(&mut self, splits: &[Option<Split>]) {
        for (meta, &s) in self.records.iter_mut().zip(splits) {
            meta.split = s;
        }
    }

    /// Record indices assigned to `split`, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records.iter().enumerate().filter(|(_, m)| m.split == Some(split)).map(|(i, _)| i).collect()
    }

    /// Records per skill class, summed from the group table.
    pub fn skill_counts(&self) -> [usize; 8] {
        let mut counts = [0; 8];
        for g in &self.groups {
            counts[g.skill_class.index()] += g.count;
        }
        counts
    }

    /// Check `records` against the manifest; reports the first offending field.
    pub fn validate(&self, records: &[EmbeddingRecord]) -> Result<(), DataError> {
        if self.format_version != FORMAT_VERSION {
            return Err(DataError::VersionMismatch { found: self.format_version, expected: FORMAT_VERSION });
        }
        if self.records.len() != records.len() {
            return Err(DataError::CountMismatch { manifest: self.records.len(), blob: records.len() });
        }
        let mut counts = vec![0usize; self.groups.len()];
        for (index, (r, meta)) in records.iter().zip(&self.records).enumerate() {
            let invalid = |field: &'static str| DataError::InvalidRecord { index, field };
            if let Some(field) = r.invalid_field(&self.dims, self.groups.len(), 5) {
                return Err(invalid(field));
            }
            let group = &self.groups[r.puzzle_group];
            if group.id != r.puzzle_group {
                return Err(invalid("puzzle_group"));
            }
            if group.answer_type != r.answer_type {
                return Err(invalid("answer_type"));
            }
            if group.skill_class != r.skill_class {
                return Err(invalid("skill_class"));
            }
            if meta.puzzle_group != r.puzzle_group {
                return Err(invalid("puzzle_group"));
            }
            if meta.valid_len != r.valid_len {
                return Err(invalid("valid_len"));
            }
            if meta.label != r.label {
                return Err(invalid("label"));
            }
            if meta.option_sequences != r.option_sequences {
                return Err(invalid("option_sequences"));
            }
            if meta.answer_sequence != r.answer_sequence {
                return Err(invalid("answer_sequence"));
            }
            counts[r.puzzle_group] += 1;
        }
        if let Some(g) = self.groups.iter().find(|g| counts[g.id] != g.count) {
            return Err(DataError::Invalid(format!("group {} declares {} records, found {}", g.id, g.count, counts[g.id])));
        }
        Ok(())
    }
}

/// Serialize the embedding blob.
pub fn encode_blob(records: &[EmbeddingRecord]) -> Vec<u8> {
    let floats: usize = records.iter().map(|r| r.dino.len() + r.siglip.len() + r.text_tokens.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        for v in r.dino.iter().chain(&r.siglip).chain(&r.text_tokens) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_header(bytes: &[u8]) -> Result<(u32, usize), DataError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(DataError::BadMagic);
        }
        return Err(DataError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((version, count))
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Rebuild records from a blob and its manifest.
pub fn decode_blob(bytes: &[u8], manifest: &DatasetManifest) -> Result<Vec<EmbeddingRecord>, DataError> {
    let (_, count) = read_header(bytes)?;
    if count != manifest.records.len() {
        return Err(DataError::CountMismatch { manifest: manifest.records.len(), blob: count });
    }
    let dims = manifest.dims;
    let per_record = 4 * dims.floats_per_record();
    let expected = HEADER_LEN + count * per_record;
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes { expected, actual: bytes.len() });
    }
    let v = dims.vision_dim * 4;
    let mut records = Vec::with_capacity(count);
    for (index, (chunk, meta)) in bytes[HEADER_LEN..].chunks_exact(per_record).zip(&manifest.records).enumerate() {
        let group = manifest
            .groups
            .get(meta.puzzle_group)
            .ok_or(DataError::InvalidRecord { index, field: "puzzle_group" })?;
        records.push(EmbeddingRecord {
            puzzle_group: meta.puzzle_group,
            skill_class: group.skill_class,
            answer_type: group.answer_type,
            dino: f32s(&chunk[..v]),
            siglip: f32s(&chunk[v..2 * v]),
            text_tokens: f32s(&chunk[2 * v..]),
            valid_len: meta.valid_len,
            label: meta.label,
            option_sequences: meta.option_sequences.clone(),
            answer_sequence: meta.answer_sequence.clone(),
        });
    }
    Ok(records)
}

/// Write `manifest.json` and `embeddings.smrt` into `dir`.
pub fn write_dataset(dir: &Path, records: &[EmbeddingRecord], manifest: &DatasetManifest) -> Result<(), DataError> {
    manifest.validate(records)?;
    fs::create_dir_all(dir)?;
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(BLOB_FILE))?);
    w.write_all(&encode_blob(records))?;
    w.flush()?;
    Ok(())
}

/// Load and validate a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<(Vec<EmbeddingRecord>, DatasetManifest), DataError> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch { found: manifest.format_version, expected: FORMAT_VERSION });
    }
    let bytes = fs::read(dir.join(BLOB_FILE))?;
    let records = decode_blob(&bytes, &manifest)?;
    manifest.validate(&records)?;
    Ok((records, manifest))
}

/// A named tensor inside a checkpoint container.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>, DataError> {
    let (_, count) = read_header(bytes)?;
    let mut pos = HEADER_LEN;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], DataError> {
        let end = *pos + n;
        if end > bytes.len() {
            return Err(DataError::Truncated { expected: end, actual: bytes.len() });
        }
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<usize, DataError> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize)
    };
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut pos)?;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| DataError::Invalid("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut pos)?;
        let shape = (0..rank).map(|_| read_u32(&mut pos)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let values = f32s(take(&mut pos, 4 * n)?);
        tensors.push(NamedTensor { name, shape, values });
    }
    if pos != bytes.len() {
        return Err(DataError::TrailingBytes { expected: pos, actual: bytes.len() });
    }
    Ok(tensors)
}

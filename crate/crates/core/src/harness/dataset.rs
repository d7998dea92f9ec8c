//! JSONL dialog records with inline or sidecar image features.
//!
//! One record per line:
//!
//! ```json
//! {"record_id": "r0",
//!  "image": {"regions": 8, "dim": 16, "data": "<base64 f32 little endian>"},
//!  "caption": ["a", "scene"],
//!  "history": [{"question": ["what", "is"], "answer": ["it", "is"]}],
//!  "question": ["what", "is", "the", "cube", "like", "?"],
//!  "candidates": [["it", "is", "red"], ["no", "idea"]],
//!  "gt_index": 0,
//!  "dense_relevance": [1.0, 0.0]}
//! ```
//!
//! Instead of `data`, `image` may name a sidecar feature file
//! (`{"regions": 8, "dim": 16, "sidecar": "features.bin"}`), resolved relative to
//! the dataset and keyed by `record_id`.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::Dims;
use crate::encoders::{RegionFeatures, TokenSequence, Vocabulary};
use crate::error::{FgaError, Result};

const SIDECAR_MAGIC: &[u8; 8] = b"FGAFEAT1";

#[derive(Clone, Debug, PartialEq)]
pub struct DialogRecord {
    pub record_id: String,
    pub image: RegionFeatures,
    pub caption: TokenSequence,
    /// (question, answer) per previous round, oldest first.
    pub history: Vec<(TokenSequence, TokenSequence)>,
    pub question: TokenSequence,
    pub candidates: Vec<TokenSequence>,
    pub gt_index: usize,
    pub dense_relevance: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    regions: usize,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRound {
    question: Vec<String>,
    answer: Vec<String>,
}

#[derive(Serialize)]
struct RawRecord<'a> {
    record_id: &'a str,
    image: RawImage,
    caption: Vec<String>,
    history: Vec<RawRound>,
    question: Vec<String>,
    candidates: Vec<Vec<String>>,
    gt_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    dense_relevance: Option<&'a Vec<f64>>,
}

const FIELDS: [&str; 8] = [
    "record_id",
    "image",
    "caption",
    "history",
    "question",
    "candidates",
    "gt_index",
    "dense_relevance",
];

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, id: &str, name: &str) -> Result<T> {
    let v = obj
        .get(name)
        .ok_or_else(|| FgaError::schema(id, name, "missing"))?;
    serde_json::from_value(v.clone()).map_err(|e| FgaError::schema(id, name, e.to_string()))
}

pub fn encode_features(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_features(id: &str, text: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| FgaError::schema(id, "image", format!("invalid base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(FgaError::schema(id, "image", "feature bytes are not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Binary feature file: magic, `count`, `regions`, `dim` (u64 LE), an index of
/// record ids (u32 length + UTF-8), then one `regions x dim` f32 block per id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSidecar {
    pub regions: usize,
    pub dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

impl FeatureSidecar {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(SIDECAR_MAGIC);
        for n in [self.entries.len(), self.regions, self.dim] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for (id, _) in &self.entries {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for (id, block) in &self.entries {
            if block.len() != self.regions * self.dim {
                return Err(FgaError::schema(id, "image", "sidecar block has the wrong size"));
            }
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| FgaError::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FgaError::io(format!("reading {}", path.display()), e))?;
        let bad = |detail: &str| FgaError::schema(path.display().to_string(), "sidecar", detail);
        if bytes.len() < 32 || &bytes[..8] != SIDECAR_MAGIC {
            return Err(bad("not a feature sidecar"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes")) as usize;
        let (count, regions, dim) = (u64_at(8), u64_at(16), u64_at(24));
        let mut pos = 32;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or_else(|| bad("truncated index"))?;
            pos += 4;
            let id = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated index"))?;
            ids.push(String::from_utf8(id.to_vec()).map_err(|_| bad("record id is not UTF-8"))?);
            pos += len;
        }
        let block = regions * dim * 4;
        if bytes.len() != pos + count * block {
            return Err(bad("feature blocks do not match the header"));
        }
        let entries = ids
            .into_iter()
            .enumerate()
            .map(|(k, id)| {
                let start = pos + k * block;
                let values = bytes[start..start + block]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                (id, values)
            })
            .collect();
        Ok(FeatureSidecar { regions, dim, entries })
    }
}

fn tokens(vocab: &Vocabulary, id: &str, name: &str, words: &[String]) -> Result<TokenSequence> {
    if words.is_empty() {
        return Err(FgaError::schema(id, name, "empty sentence"));
    }
    Ok(vocab.encode(words))
}

fn parse_record(
    line: &str,
    line_no: usize,
    vocab: &Vocabulary,
    dims: &Dims,
    base: &Path,
    sidecars: &mut HashMap<PathBuf, HashMap<String, Vec<f32>>>,
) -> Result<DialogRecord> {
    let where_ = format!("line {line_no}");
    let value: Value = serde_json::from_str(line).map_err(|e| FgaError::schema(&where_, "<record>", e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(FgaError::schema(&where_, "<record>", "not a JSON object"));
    };
    let id: String = field(&obj, &where_, "record_id")?;
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(FgaError::schema(&id, k, "unknown field"));
    }
    let image: RawImage = field(&obj, &id, "image")?;
    if image.regions != dims.regions || image.dim != dims.image_dim {
        return Err(FgaError::schema(
            &id,
            "image",
            format!("features are {}x{}, expected {}x{}", image.regions, image.dim, dims.regions, dims.image_dim),
        ));
    }
    let data = match (&image.data, &image.sidecar) {
        (Some(text), None) => decode_features(&id, text)?,
        (None, Some(file)) => {
            let path = base.join(file);
            if !sidecars.contains_key(&path) {
                let sc = FeatureSidecar::read(&path)?;
                if sc.regions != image.regions || sc.dim != image.dim {
                    return Err(FgaError::schema(&id, "image", "sidecar shape disagrees with the record"));
                }
                sidecars.insert(path.clone(), sc.entries.into_iter().collect());
            }
            sidecars[&path]
                .get(&id)
                .cloned()
                .ok_or_else(|| FgaError::schema(&id, "image", format!("no features for this record in {file}")))?
        }
        _ => return Err(FgaError::schema(&id, "image", "exactly one of `data` and `sidecar` is required")),
    };
    let image = RegionFeatures::new(image.regions, image.dim, data).map_err(|e| FgaError::schema(&id, "image", e.to_string()))?;

    let caption = tokens(vocab, &id, "caption", &field::<Vec<String>>(&obj, &id, "caption")?)?;
    let question = tokens(vocab, &id, "question", &field::<Vec<String>>(&obj, &id, "question")?)?;
    let rounds: Vec<RawRound> = if obj.contains_key("history") { field(&obj, &id, "history")? } else { Vec::new() };
    if rounds.len() > dims.rounds {
        return Err(FgaError::schema(&id, "history", format!("{} rounds exceed the configured {}", rounds.len(), dims.rounds)));
    }
    let history = rounds
        .iter()
        .map(|r| Ok((tokens(vocab, &id, "history", &r.question)?, tokens(vocab, &id, "history", &r.answer)?)))
        .collect::<Result<Vec<_>>>()?;
    let raw_candidates: Vec<Vec<String>> = field(&obj, &id, "candidates")?;
    if raw_candidates.len() != dims.candidates {
        return Err(FgaError::schema(
            &id,
            "candidates",
            format!("expected {} candidates, got {}", dims.candidates, raw_candidates.len()),
        ));
    }
    let candidates = raw_candidates
        .iter()
        .map(|c| tokens(vocab, &id, "candidates", c))
        .collect::<Result<Vec<_>>>()?;
    let gt_index: usize = field(&obj, &id, "gt_index")?;
    if gt_index >= dims.candidates {
        return Err(FgaError::schema(&id, "gt_index", format!("{gt_index} out of range for {} candidates", dims.candidates)));
    }
    let dense_relevance: Option<Vec<f64>> = match obj.get("dense_relevance") {
        None | Some(Value::Null) => None,
        Some(_) => {
            let rel: Vec<f64> = field(&obj, &id, "dense_relevance")?;
            if rel.len() != dims.candidates {
                return Err(FgaError::schema(&id, "dense_relevance", "one value per candidate is required"));
            }
            if rel.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(FgaError::schema(&id, "dense_relevance", "values must lie in [0, 1]"));
            }
            Some(rel)
        }
    };
    Ok(DialogRecord {
        record_id: id,
        image,
        caption,
        history,
        question,
        candidates,
        gt_index,
        dense_relevance,
    })
}

/// Reads and validates every record; blank lines are skipped.
pub fn load_dataset(path: &Path, vocab: &Vocabulary, dims: &Dims) -> Result<Vec<DialogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| FgaError::io(format!("reading {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut sidecars = HashMap::new();
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r = parse_record(line, k + 1, vocab, dims, &base, &mut sidecars)?;
        if !seen.insert(r.record_id.clone()) {
            return Err(FgaError::schema(&r.record_id, "record_id", "duplicate record id"));
        }
        records.push(r);
    }
    Ok(records)
}

/// Parses a single JSONL record. Sidecar paths resolve against `base`.
pub fn parse_record_json(line: &str, vocab: &Vocabulary, dims: &Dims, base: &Path) -> Result<DialogRecord> {
    parse_record(line, 1, vocab, dims, base, &mut HashMap::new())
}

fn decode(vocab: &Vocabulary, s: &TokenSequence) -> Vec<String> {
    s.ids[..s.true_length.min(s.ids.len())]
        .iter()
        .map(|&i| vocab.token(i).unwrap_or(crate::encoders::UNK).to_string())
        .collect()
}

/// Serializes one record. With `sidecar`, features are referenced instead of inlined.
pub fn record_to_json(record: &DialogRecord, vocab: &Vocabulary, sidecar: Option<&str>) -> String {
    let raw = RawRecord {
        record_id: &record.record_id,
        image: RawImage {
            regions: record.image.regions,
            dim: record.image.dim,
            data: sidecar.is_none().then(|| encode_features(&record.image.data)),
            sidecar: sidecar.map(str::to_string),
        },
        caption: decode(vocab, &record.caption),
        history: record
            .history
            .iter()
            .map(|(q, a)| RawRound {
                question: decode(vocab, q),
                answer: decode(vocab, a),
            })
            .collect(),
        question: decode(vocab, &record.question),
        candidates: record.candidates.iter().map(|c| decode(vocab, c)).collect(),
        gt_index: record.gt_index,
        dense_relevance: record.dense_relevance.as_ref(),
    };
    serde_json::to_string(&raw).expect("record serializes")
}

/// Writes JSONL with inline features.
pub fn write_dataset(path: &Path, records: &[DialogRecord], vocab: &Vocabulary) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        writeln!(out, "{}", record_to_json(r, vocab, None)).expect("write to memory");
    }
    std::fs::write(path, out).map_err(|e| FgaError::io(format!("writing {}", path.display()), e))
}

/// Writes JSONL referencing `sidecar` (a file name next to `path`) and the sidecar itself.
pub fn write_dataset_with_sidecar(path: &Path, sidecar: &str, records: &[DialogRecord], vocab: &Vocabulary) -> Result<()> {
    let first = records.first();
    let sc = FeatureSidecar {
        regions: first.map_or(0, |r| r.image.regions),
        dim: first.map_or(0, |r| r.image.dim),
        entries: records.iter().map(|r| (r.record_id.clone(), r.image.data.clone())).collect(),
    };
    sc.write(&path.parent().unwrap_or(Path::new(".")).join(sidecar))?;
    let mut out = Vec::new();
    for r in records {
        writeln!(out, "{}", record_to_json(r, vocab, Some(sidecar))).expect("write to memory");
    }
    std::fs::write(path, out).map_err(|e| FgaError::io(format!("writing {}", path.display()), e))
}

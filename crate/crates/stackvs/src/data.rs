//! Dataset formats, vocabulary, synthetic data generation, checkpoint
//! persistence, and attention-trace export.
//!
//! Every on-disk artifact is self-describing (magic + version + dimensions)
//! and refuses silent reinterpretation. Features travel in a binary sidecar
//! (`.svsf`), record metadata in JSON lines, and the two are tied together by
//! a JSON manifest. Checkpoints (`.svsc`) embed the model configuration and a
//! named parameter manifest ahead of a 32-bit float payload guarded by a
//! SHA-256 checksum.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::stack::{AttentionTrace, ModelParams, StackConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Padding token id.
pub const PAD: usize = 0;
/// Beginning-of-sequence token id.
pub const BOS: usize = 1;
/// End-of-sequence token id.
pub const EOS: usize = 2;
/// Unknown-word token id.
pub const UNK: usize = 3;

/// Spellings of the four special tokens, in id order.
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const SVSF_MAGIC: &[u8; 4] = b"SVSF";
const SVSF_VERSION: u32 = 1;
const SVSC_MAGIC: &[u8; 4] = b"SVSC";
const SVSC_VERSION: u32 = 1;

/// Token/id bijection with the four specials pinned at ids 0..=3 and the
/// remaining ids dense.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Wrap an explicit token list; the first four entries must be the
    /// specials and spellings must be unique.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Data("vocabulary is missing the special tokens".into()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Data(format!(
                    "vocabulary slot {i} holds {:?}, expected {s:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id for a spelling, falling back to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("word id {id} out of vocabulary range")))
    }

    /// Tokenize a raw caption and map to ids (unknowns become `<unk>`).
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        crate::metrics::tokenize(caption).iter().map(|t| self.id(t)).collect()
    }

    /// Join content tokens back into a string, stopping at `<eos>` and
    /// skipping other specials.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD || id == BOS {
                continue;
            }
            words.push(self.token(id)?);
        }
        Ok(words.join(" "))
    }
}

/// Build a vocabulary from raw captions: tokens seen fewer than `min_count`
/// times are dropped (they encode to `<unk>`); ids go to the most frequent
/// spellings first, ties broken lexicographically.
pub fn build_vocab(captions: &[String], min_count: usize) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    if captions.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for caption in captions {
        for token in crate::metrics::tokenize(caption) {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> =
        counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

/// One image: precomputed region features, detected attribute ids, and at
/// least one reference caption.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_id: String,
    /// n_v x d_v feature matrix.
    pub features: Tensor,
    pub attribute_ids: Vec<usize>,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub attribute_vocab: Vec<String>,
    pub n_v: usize,
    pub d_v: usize,
    pub n_e: usize,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.features.shape() != [self.n_v, self.d_v] {
                return Err(Error::Data(format!(
                    "record {} feature shape {:?} does not match header {}x{}",
                    r.image_id,
                    r.features.shape(),
                    self.n_v,
                    self.d_v
                )));
            }
            if !r.features.is_finite() {
                return Err(Error::Data(format!(
                    "record {} contains a non-finite feature value",
                    r.image_id
                )));
            }
            if r.attribute_ids.len() != self.n_e {
                return Err(Error::Data(format!(
                    "record {} has {} attribute ids, header says {}",
                    r.image_id,
                    r.attribute_ids.len(),
                    self.n_e
                )));
            }
            if let Some(&bad) =
                r.attribute_ids.iter().find(|&&a| a >= self.attribute_vocab.len())
            {
                return Err(Error::Data(format!(
                    "record {} attribute id {bad} exceeds attribute vocabulary size {}",
                    r.image_id,
                    self.attribute_vocab.len()
                )));
            }
            if r.references.is_empty() {
                return Err(Error::Data(format!(
                    "record {} has no reference captions",
                    r.image_id
                )));
            }
        }
        Ok(())
    }

    /// All reference captions of all records, flattened (vocabulary input).
    pub fn all_references(&self) -> Vec<String> {
        self.records.iter().flat_map(|r| r.references.iter().cloned()).collect()
    }

    pub fn find(&self, image_id: &str) -> Result<&DatasetRecord> {
        self.records
            .iter()
            .find(|r| r.image_id == image_id)
            .ok_or_else(|| Error::Data(format!("image id {image_id:?} not in dataset")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    features: String,
    records: String,
    attribute_vocab: Vec<String>,
    n_v: usize,
    d_v: usize,
    n_e: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    image_id: String,
    attribute_ids: Vec<usize>,
    references: Vec<String>,
}

fn image_id_hash(image_id: &str) -> [u8; 16] {
    let digest = Sha256::digest(image_id.as_bytes());
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    out
}

/// Write manifest.json, records.jsonl, and features.svsf into `dir`,
/// returning the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    ds.validate()?;
    fs::create_dir_all(dir)?;

    let mut feat = Vec::new();
    feat.extend_from_slice(SVSF_MAGIC);
    feat.extend_from_slice(&SVSF_VERSION.to_le_bytes());
    feat.extend_from_slice(&(ds.n_v as u32).to_le_bytes());
    feat.extend_from_slice(&(ds.d_v as u32).to_le_bytes());
    feat.extend_from_slice(&(ds.records.len() as u32).to_le_bytes());
    for r in &ds.records {
        feat.extend_from_slice(&image_id_hash(&r.image_id));
        for &v in r.features.values() {
            feat.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(dir.join("features.svsf"), feat)?;

    let mut lines = String::new();
    for r in &ds.records {
        let meta = RecordMeta {
            image_id: r.image_id.clone(),
            attribute_ids: r.attribute_ids.clone(),
            references: r.references.clone(),
        };
        lines.push_str(&serde_json::to_string(&meta).expect("record metadata serializes"));
        lines.push('\n');
    }
    fs::write(dir.join("records.jsonl"), lines)?;

    let manifest = Manifest {
        features: "features.svsf".into(),
        records: "records.jsonl".into(),
        attribute_vocab: ds.attribute_vocab.clone(),
        n_v: ds.n_v,
        d_v: ds.d_v,
        n_e: ds.n_e,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(path)
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < *pos + n {
        return Err(Error::Format(format!(
            "feature sidecar truncated at byte {} while reading {what}",
            buf.len()
        )));
    }
    let out = &buf[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn read_u32(buf: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let b = take(buf, pos, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
}

/// Load and validate a dataset from its manifest path.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest_text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Format(format!("bad manifest {}: {e}", manifest_path.display())))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let meta_text = fs::read_to_string(dir.join(&manifest.records))?;
    let mut metas = Vec::new();
    for (i, line) in meta_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let meta: RecordMeta = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("bad record on line {}: {e}", i + 1)))?;
        metas.push(meta);
    }

    let buf = fs::read(dir.join(&manifest.features))?;
    let mut pos = 0;
    let magic = take(&buf, &mut pos, 4, "magic")?;
    if magic != SVSF_MAGIC {
        return Err(Error::Format(format!("bad feature sidecar magic {magic:?}")));
    }
    let version = read_u32(&buf, &mut pos, "version")?;
    if version != SVSF_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature sidecar version {version} (expected {SVSF_VERSION})"
        )));
    }
    let n_v = read_u32(&buf, &mut pos, "N_v")? as usize;
    let d_v = read_u32(&buf, &mut pos, "d_v")? as usize;
    let count = read_u32(&buf, &mut pos, "record count")? as usize;
    if n_v != manifest.n_v || d_v != manifest.d_v {
        return Err(Error::Format(format!(
            "feature header {n_v}x{d_v} disagrees with manifest {}x{}",
            manifest.n_v, manifest.d_v
        )));
    }
    if count != metas.len() {
        return Err(Error::Format(format!(
            "feature sidecar holds {count} records, metadata file holds {}",
            metas.len()
        )));
    }

    let mut records = Vec::with_capacity(count);
    for meta in metas {
        let hash = take(&buf, &mut pos, 16, "image-id hash")?;
        if hash != image_id_hash(&meta.image_id) {
            return Err(Error::Format(format!(
                "feature record hash does not match image id {:?}",
                meta.image_id
            )));
        }
        let raw = take(&buf, &mut pos, n_v * d_v * 4, "feature payload")?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
            .collect();
        records.push(DatasetRecord {
            image_id: meta.image_id,
            features: Tensor::new(vec![n_v, d_v], values)?,
            attribute_ids: meta.attribute_ids,
            references: meta.references,
        });
    }
    if pos != buf.len() {
        return Err(Error::Format(format!(
            "feature sidecar has {} trailing bytes after byte {pos}",
            buf.len() - pos
        )));
    }

    let ds = Dataset {
        records,
        attribute_vocab: manifest.attribute_vocab,
        n_v,
        d_v,
        n_e: manifest.n_e,
    };
    ds.validate()?;
    Ok(ds)
}

/// Shape of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub n_v: usize,
    pub d_v: usize,
    pub n_e: usize,
    /// Attribute-vocabulary size.
    pub n_attributes: usize,
    /// Word-vocabulary size including the four specials.
    pub vocab_size: usize,
    pub caption_len: usize,
}

/// The k-th basis pattern: a ±1 vector derived from the bits of k.
pub fn basis_pattern(k: usize, d_v: usize) -> Vec<f64> {
    (0..d_v).map(|j| if (k >> (j % usize::BITS as usize)) & 1 == 1 { 1.0 } else { -1.0 }).collect()
}

/// Spelling of the synthetic word tied to basis pattern k.
pub fn synthetic_word(k: usize) -> String {
    format!("tok{k:02}")
}

/// Nearest basis pattern (Euclidean) for each feature row; the inverse of the
/// generator's caption construction.
pub fn nearest_basis(features: &Tensor, n_patterns: usize) -> Vec<usize> {
    let d_v = features.cols();
    let basis: Vec<Vec<f64>> = (0..n_patterns).map(|k| basis_pattern(k, d_v)).collect();
    (0..features.rows())
        .map(|r| {
            let row = &features.values()[r * d_v..(r + 1) * d_v];
            (0..n_patterns)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&basis[a]).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = row.iter().zip(&basis[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).expect("finite distances")
                })
                .expect("at least one pattern")
        })
        .collect()
}

/// Generate a deterministic, learnable dataset on disk and return the
/// manifest path. Each image carries `n_v` noisy copies of basis patterns,
/// its caption spells out which patterns appear (cycled to `caption_len`),
/// and its attribute ids are the patterns modulo the attribute vocabulary —
/// so captions are recoverable from features alone.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<PathBuf> {
    if spec.n_images == 0 || spec.n_v == 0 || spec.d_v == 0 || spec.n_e == 0 {
        return Err(Error::Config("synthetic dataset dimensions must be positive".into()));
    }
    if spec.vocab_size <= SPECIALS.len() {
        return Err(Error::Config(format!(
            "vocab_size {} leaves no content words",
            spec.vocab_size
        )));
    }
    if spec.n_attributes == 0 || spec.caption_len == 0 {
        return Err(Error::Config("n_attributes and caption_len must be positive".into()));
    }
    let n_patterns = spec.vocab_size - SPECIALS.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut records = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let mut patterns: Vec<usize> = Vec::new();
        for attempt in 0.. {
            patterns = (0..spec.n_v).map(|_| rng.random_range(0..n_patterns)).collect();
            if seen.insert(patterns.clone()) || attempt > 1000 {
                break;
            }
        }
        let values: Vec<f64> = patterns
            .iter()
            .flat_map(|&k| {
                basis_pattern(k, spec.d_v)
                    .into_iter()
                    .map(|b| b + 0.05 * (rng.random::<f64>() * 2.0 - 1.0))
                    .collect::<Vec<_>>()
            })
            .collect();
        let caption = (0..spec.caption_len)
            .map(|j| synthetic_word(patterns[j % spec.n_v]))
            .collect::<Vec<_>>()
            .join(" ");
        let attribute_ids =
            (0..spec.n_e).map(|j| patterns[j % spec.n_v] % spec.n_attributes).collect();
        records.push(DatasetRecord {
            image_id: format!("img{i:04}"),
            features: Tensor::new(vec![spec.n_v, spec.d_v], values)?,
            attribute_ids,
            references: vec![caption],
        });
    }
    let ds = Dataset {
        records,
        attribute_vocab: (0..spec.n_attributes).map(|a| format!("attr{a}")).collect(),
        n_v: spec.n_v,
        d_v: spec.d_v,
        n_e: spec.n_e,
    };
    save_dataset(&ds, dir)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the float payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: StackConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    params: Vec<ParamEntry>,
}

/// A checkpoint read back from disk.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub config: StackConfig,
    pub params: ModelParams,
    /// Word vocabulary, when the writer embedded one.
    pub vocab: Option<Vocabulary>,
}

/// Serialize parameters (rounded to 32-bit floats) with an embedded config
/// and optional vocabulary; the file ends in a SHA-256 checksum of the header
/// and payload.
pub fn save_checkpoint(
    m: &ModelParams,
    cfg: &StackConfig,
    vocab: Option<&Vocabulary>,
    path: &Path,
) -> Result<()> {
    m.validate(cfg)?;
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    m.for_each(&mut |name, t| {
        entries.push(ParamEntry { name, shape: t.shape().to_vec(), offset: payload.len() });
        for &v in t.values() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        config: cfg.clone(),
        vocab: vocab.map(|v| v.tokens().to_vec()),
        params: entries,
    };
    let header_bytes =
        serde_json::to_vec(&header).expect("checkpoint header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(SVSC_MAGIC);
    out.extend_from_slice(&SVSC_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    let mut hasher = Sha256::new();
    hasher.update(&header_bytes);
    hasher.update(&payload);
    out.extend_from_slice(&hasher.finalize());
    fs::write(path, out)?;
    Ok(())
}

/// Read and fully validate a checkpoint: magic, version, checksum, offset
/// coverage, and parameter shapes against the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0;
    let magic = take(&buf, &mut pos, 4, "magic")
        .map_err(|_| Error::Format("checkpoint too short for its magic".into()))?;
    if magic != SVSC_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&buf, &mut pos, "version")?;
    if version != SVSC_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {SVSC_VERSION})"
        )));
    }
    let header_len = read_u32(&buf, &mut pos, "header length")? as usize;
    let header_bytes = take(&buf, &mut pos, header_len, "header")?.to_vec();
    if buf.len() < pos + 32 {
        return Err(Error::Format("checkpoint truncated before checksum".into()));
    }
    let payload = &buf[pos..buf.len() - 32];
    let stored_sum = &buf[buf.len() - 32..];
    let mut hasher = Sha256::new();
    hasher.update(&header_bytes);
    hasher.update(payload);
    if hasher.finalize().as_slice() != stored_sum {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    header.config.validate()?;

    // Offsets must tile the payload exactly in manifest order.
    let mut expect_offset = 0usize;
    let mut values: HashMap<String, Vec<f64>> = HashMap::new();
    for entry in &header.params {
        if entry.offset != expect_offset {
            return Err(Error::Format(format!(
                "parameter {} at offset {} (expected {expect_offset}): manifest does not tile the payload",
                entry.name, entry.offset
            )));
        }
        let n: usize = entry.shape.iter().product();
        let bytes = payload
            .get(entry.offset..entry.offset + 4 * n)
            .ok_or_else(|| Error::Format(format!("payload too short for {}", entry.name)))?;
        values.insert(
            entry.name.clone(),
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
                .collect(),
        );
        expect_offset += 4 * n;
    }
    if expect_offset != payload.len() {
        return Err(Error::Format(format!(
            "payload has {} bytes beyond the parameter manifest",
            payload.len() - expect_offset
        )));
    }

    let attr_rows = header
        .params
        .iter()
        .find(|e| e.name == "attr_emb")
        .ok_or_else(|| Error::Format("checkpoint missing attr_emb".into()))?
        .shape
        .first()
        .copied()
        .unwrap_or(0);
    let mut params = ModelParams::zeros(&header.config, attr_rows);
    let mut missing = Vec::new();
    params.for_each_mut(&mut |name, t| match values.remove(&name) {
        Some(v) if v.len() == t.values().len() => t.values_mut().copy_from_slice(&v),
        Some(_) => missing.push(format!("{name} (wrong shape)")),
        None => missing.push(name),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint parameters unusable: {missing:?}")));
    }
    if !values.is_empty() {
        let extra: Vec<_> = values.into_keys().collect();
        return Err(Error::Format(format!("checkpoint has unexpected parameters: {extra:?}")));
    }
    params.validate(&header.config)?;
    let vocab = match header.vocab {
        Some(tokens) => Some(Vocabulary::from_tokens(tokens)?),
        None => None,
    };
    Ok(LoadedCheckpoint { config: header.config, params, vocab })
}

/// Load a checkpoint and refuse it unless its embedded config equals
/// `expected`, printing both on mismatch.
pub fn load_checkpoint_expecting(path: &Path, expected: &StackConfig) -> Result<LoadedCheckpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.config != expected {
        return Err(Error::Config(format!(
            "checkpoint config {:?} does not match requested config {expected:?}",
            ckpt.config
        )));
    }
    Ok(ckpt)
}

/// Render a trace as CSV: `stage,t,branch,index,weight,ratio` with visual
/// rows (`v`) before semantic rows (`s`) within each (stage, t) group.
pub fn trace_to_csv(trace: &AttentionTrace) -> String {
    let mut out = String::from("stage,t,branch,index,weight,ratio\n");
    for row in &trace.rows {
        for (branch, weights) in [("v", &row.alpha_v), ("s", &row.alpha_s)] {
            for (index, w) in weights.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.stage, row.t, branch, index, w, row.ratio
                ));
            }
        }
    }
    out
}

/// Write one rollout's trace to a CSV file.
pub fn export_trace(trace: &AttentionTrace, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(trace_to_csv(trace).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::TraceRow;

    fn toy_dataset() -> Dataset {
        Dataset {
            records: vec![
                DatasetRecord {
                    image_id: "a".into(),
                    features: Tensor::new(vec![2, 3], vec![0.5, -1.25, 2.0, 0.0, 1.0, -0.5])
                        .unwrap(),
                    attribute_ids: vec![0, 1],
                    references: vec!["a cat sits".into(), "the cat rests".into()],
                },
                DatasetRecord {
                    image_id: "b".into(),
                    features: Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap(),
                    attribute_ids: vec![1, 1],
                    references: vec!["a dog runs".into()],
                },
            ],
            attribute_vocab: vec!["cat".into(), "dog".into()],
            n_v: 2,
            d_v: 3,
            n_e: 2,
        }
    }

    #[test]
    fn vocab_filters_rare_tokens_to_unk() {
        let captions: Vec<String> = std::iter::repeat("cat".to_string())
            .take(4)
            .chain(std::iter::repeat("dog".to_string()).take(5))
            .collect();
        let v = build_vocab(&captions, 5).unwrap();
        assert_eq!(v.id("cat"), UNK);
        assert_eq!(v.id("dog"), 4);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn vocab_specials_and_ordering() {
        let captions = vec!["b a a c c".to_string()];
        let v = build_vocab(&captions, 1).unwrap();
        assert_eq!(v.tokens()[..4], SPECIALS.map(String::from));
        // a and c both appear twice; lexicographic tie-break puts a first.
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("c"), 5);
        assert_eq!(v.id("b"), 6);
        let again = build_vocab(&captions, 1).unwrap();
        assert_eq!(v, again);

        // Filtering everything still yields the specials.
        let v = build_vocab(&captions, 99).unwrap();
        assert_eq!(v.len(), 4);
        assert!(build_vocab(&[], 1).is_err());
        assert!(build_vocab(&captions, 0).is_err());
    }

    #[test]
    fn vocab_encode_decode_round_trip() {
        let v = build_vocab(&["a cat sits on a mat".to_string()], 1).unwrap();
        let ids = v.encode("a cat naps");
        assert_eq!(ids[2], UNK);
        let mut with_eos = v.encode("a cat sits");
        with_eos.push(EOS);
        assert_eq!(v.decode(&with_eos).unwrap(), "a cat sits");
    }

    #[test]
    fn dataset_round_trip_is_bitwise_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.records.len(), 2);
        for (a, b) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.attribute_ids, b.attribute_ids);
            assert_eq!(a.references, b.references);
            for (&x, &y) in a.features.values().iter().zip(b.features.values()) {
                assert_eq!(x as f32, y as f32);
                assert_eq!(y, (y as f32) as f64);
            }
        }
        // Saving the loaded copy reproduces the sidecar bytes exactly.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        let b1 = fs::read(dir.path().join("features.svsf")).unwrap();
        let b2 = fs::read(dir2.path().join("features.svsf")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn dataset_header_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy_dataset();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        // Claim 3 feature rows in a sidecar that holds 2.
        ds.n_v = 3;
        assert!(ds.validate().is_err());
        let text = fs::read_to_string(&manifest).unwrap().replace("\"n_v\": 2", "\"n_v\": 3");
        fs::write(&manifest, text).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_truncation_and_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&toy_dataset(), dir.path()).unwrap();
        let feat_path = dir.path().join("features.svsf");
        let bytes = fs::read(&feat_path).unwrap();

        fs::write(&feat_path, &bytes[..bytes.len() - 3]).unwrap();
        match load_dataset(&manifest) {
            Err(Error::Format(msg)) => assert!(msg.contains("byte"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&feat_path, &bad).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 9; // version
        fs::write(&feat_path, &bad).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_non_finite_feature_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&toy_dataset(), dir.path()).unwrap();
        let feat_path = dir.path().join("features.svsf");
        let mut bytes = fs::read(&feat_path).unwrap();
        let header = 20 + 16; // file header + first record's hash
        bytes[header..header + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&feat_path, &bytes).unwrap();
        match load_dataset(&manifest) {
            Err(Error::Data(msg)) => assert!(msg.contains('a'), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_sized() {
        let spec = SyntheticSpec {
            n_images: 6,
            n_v: 3,
            d_v: 5,
            n_e: 2,
            n_attributes: 4,
            vocab_size: 10,
            caption_len: 4,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = gen_synthetic(&spec, 7, d1.path()).unwrap();
        gen_synthetic(&spec, 7, d2.path()).unwrap();
        for file in ["features.svsf", "records.jsonl", "manifest.json"] {
            assert_eq!(
                fs::read(d1.path().join(file)).unwrap(),
                fs::read(d2.path().join(file)).unwrap(),
                "{file}"
            );
        }
        let ds = load_dataset(&m1).unwrap();
        assert_eq!(ds.records.len(), 6);

        let d3 = tempfile::tempdir().unwrap();
        gen_synthetic(&spec, 8, d3.path()).unwrap();
        assert_ne!(
            fs::read(d1.path().join("features.svsf")).unwrap(),
            fs::read(d3.path().join("features.svsf")).unwrap()
        );
    }

    #[test]
    fn synthetic_captions_recoverable_from_features_alone() {
        let spec = SyntheticSpec {
            n_images: 8,
            n_v: 4,
            d_v: 8,
            n_e: 3,
            n_attributes: 5,
            vocab_size: 20,
            caption_len: 6,
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_synthetic(&spec, 42, dir.path()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        let n_patterns = spec.vocab_size - SPECIALS.len();
        for r in &ds.records {
            let patterns = nearest_basis(&r.features, n_patterns);
            let decoded = (0..spec.caption_len)
                .map(|j| synthetic_word(patterns[j % spec.n_v]))
                .collect::<Vec<_>>()
                .join(" ");
            assert_eq!(decoded, r.references[0], "{}", r.image_id);
        }
    }

    fn toy_config() -> StackConfig {
        StackConfig {
            n_stages: 2,
            d_v: 3,
            d_e: 2,
            d_h: 2,
            d_a: 2,
            d_s: 2,
            d_p: 5,
            n_v: 2,
            n_e: 2,
            t_max: 4,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact_at_f32() {
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ModelParams::init(&cfg, 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.svsc");
        let vocab = build_vocab(&["a b c d e".to_string()], 1).unwrap();
        save_checkpoint(&m, &cfg, Some(&vocab), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.vocab.as_ref().unwrap(), &vocab);
        let mut originals = HashMap::new();
        m.for_each(&mut |name, t| {
            originals.insert(name, t.values().to_vec());
        });
        let mut n = 0;
        loaded.params.for_each(&mut |name, t| {
            n += 1;
            let orig = &originals[&name];
            for (&x, &y) in orig.iter().zip(t.values()) {
                assert_eq!(x as f32, y as f32, "{name}");
            }
        });
        assert_eq!(n, originals.len());

        // Re-saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("m2.svsc");
        save_checkpoint(&loaded.params, &cfg, Some(&vocab), &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_corruption_and_mismatch_refused() {
        let cfg = toy_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ModelParams::init(&cfg, 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.svsc");
        save_checkpoint(&m, &cfg, None, &path).unwrap();

        let bytes = fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        let flip = bad.len() - 40; // payload byte, ahead of the checksum
        bad[flip] ^= 1;
        fs::write(&path, &bad).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("checksum"), "{msg}"),
            other => panic!("expected checksum refusal, got {other:?}"),
        }

        fs::write(&path, &bytes).unwrap();
        let mut other_cfg = cfg.clone();
        other_cfg.d_h = 3;
        match load_checkpoint_expecting(&path, &other_cfg) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("d_h: 2") && msg.contains("d_h: 3"), "{msg}")
            }
            other => panic!("expected config refusal, got {other:?}"),
        }
        assert!(load_checkpoint_expecting(&path, &cfg).is_ok());

        let mut bad = bytes.clone();
        bad[4] = 9; // version
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn trace_csv_shape_and_determinism() {
        let trace = AttentionTrace {
            rows: vec![
                TraceRow {
                    stage: 0,
                    t: 0,
                    alpha_v: vec![0.25, 0.75],
                    alpha_s: vec![0.5, 0.25, 0.25],
                    ratio: 0.4,
                },
                TraceRow {
                    stage: 1,
                    t: 0,
                    alpha_v: vec![1.0, 0.0],
                    alpha_s: vec![0.0, 1.0, 0.0],
                    ratio: 0.75,
                },
            ],
        };
        let csv = trace_to_csv(&trace);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "stage,t,branch,index,weight,ratio");
        // header + per row (n_v + n_e) weights
        assert_eq!(lines.len(), 1 + 2 * (2 + 3));
        assert_eq!(lines[1], "0,0,v,0,0.25,0.4");
        assert_eq!(lines[3], "0,0,s,0,0.5,0.4");
        assert_eq!(csv, trace_to_csv(&trace));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        export_trace(&trace, &p).unwrap();
        export_trace(&trace, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), csv);
    }
}

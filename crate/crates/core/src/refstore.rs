//! Reference set of correctly answered samples with their embeddings and
//! recorded router pathways.
//!
//! On disk a store is JSON Lines: one header object, then one object per
//! entry. Float arrays are written twice, as decimals for reading and as
//! hex-encoded IEEE-754 bits; the hex payload is authoritative.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::hex64::DualArray;
use crate::model::{argmax, Input, MoeModel};
use crate::pathway::{OptimizationMask, Pathway, PathwayDims};
use crate::plant::Sample;

/// Maps an input to a unit-norm embedding vector.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, input: &Input) -> Result<Vec<f64>>;
}

/// Mean over tokens, then L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct MeanPoolEmbedder {
    pub dim: usize,
}

impl EmbeddingProvider for MeanPoolEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, input: &Input) -> Result<Vec<f64>> {
        check_dim("embedding input width", self.dim, input.ncols())?;
        if input.nrows() == 0 || input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding input must be finite and non-empty".into()));
        }
        let n = input.nrows() as f64;
        let pooled: Vec<f64> = (0..input.ncols()).map(|j| input.column(j).sum() / n).collect();
        let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= f64::EPSILON {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(pooled.into_iter().map(|v| v / norm).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub id: u64,
    pub input: Input,
    pub label: usize,
    pub embedding: Vec<f64>,
    pub pathway: Pathway,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_hash: String,
    pub seed: Option<u64>,
    pub built_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStore {
    entries: Vec<ReferenceEntry>,
    embedding_dim: usize,
    input_shape: (usize, usize),
    dims: PathwayDims,
    pub provenance: Provenance,
}

impl ReferenceStore {
    /// Validates ids, dimensions and per-entry invariants.
    pub fn new(
        entries: Vec<ReferenceEntry>,
        embedding_dim: usize,
        input_shape: (usize, usize),
        dims: PathwayDims,
        provenance: Provenance,
    ) -> Result<Self> {
        let store = Self {
            entries,
            embedding_dim,
            input_shape,
            dims,
            provenance,
        };
        store.check_structure()?;
        Ok(store)
    }

    fn check_structure(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 && e.id <= self.entries[i - 1].id {
                return Err(Error::Schema(format!("entry ids not strictly increasing at id {}", e.id)));
            }
            check_dim("entry embedding", self.embedding_dim, e.embedding.len())?;
            check_dim("entry input tokens", self.input_shape.0, e.input.nrows())?;
            check_dim("entry input width", self.input_shape.1, e.input.ncols())?;
            if e.pathway.dims() != self.dims {
                return Err(Error::Schema(format!("entry {} pathway shape differs from header", e.id)));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ReferenceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn pathway_dims(&self) -> PathwayDims {
        self.dims
    }

    /// Checks embedding norms and pathway mixtures; with a model, also checks
    /// the recorded model hash and that every entry's recorded pathway
    /// reproduces its label.
    pub fn verify(&self, model: Option<&MoeModel>) -> Result<()> {
        self.check_structure()?;
        if let Some(model) = model {
            let hash = model.digest()?;
            if hash != self.provenance.model_hash {
                return Err(Error::Verification(format!(
                    "store was built with model {}, got {hash}",
                    self.provenance.model_hash
                )));
            }
        }
        for e in &self.entries {
            let norm = e.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Verification(format!("entry {} embedding norm {norm}", e.id)));
            }
            e.pathway
                .validate_mixture(1e-9)
                .map_err(|err| Error::Verification(format!("entry {}: {err}", e.id)))?;
            if let Some(model) = model {
                let full = OptimizationMask::full(model.dims());
                let pred = model.predict(&e.input, &e.pathway, &full)?;
                if pred != e.label {
                    return Err(Error::Verification(format!(
                        "entry {} predicts {pred} under its recorded pathway, label is {}",
                        e.id, e.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over every id, label, meta pair and float bit pattern.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.embedding_dim as u64).to_le_bytes());
        for e in &self.entries {
            h.update(e.id.to_le_bytes());
            h.update((e.label as u64).to_le_bytes());
            for v in e.input.transpose().iter().chain(&e.embedding).chain(e.pathway.values()) {
                h.update(v.to_bits().to_le_bytes());
            }
            for (k, v) in &e.meta {
                h.update(k.as_bytes());
                h.update([0]);
                h.update(v.as_bytes());
                h.update([0]);
            }
        }
        hex::encode(h.finalize())
    }
}

/// Runs the base model over `pool` and keeps the correctly answered samples
/// together with their router pathway and embedding.
pub fn build_reference_set(
    model: &MoeModel,
    pool: &[Sample],
    embedder: &dyn EmbeddingProvider,
    seed: Option<u64>,
) -> Result<ReferenceStore> {
    if pool.is_empty() {
        return Err(Error::InvalidSpec("reference pool is empty".into()));
    }
    let mut entries = Vec::new();
    for (i, s) in pool.iter().enumerate() {
        let (logits, pathway) = model.forward_base(&s.input)?;
        if argmax(logits.as_slice()) != s.label {
            continue;
        }
        let mut meta = BTreeMap::new();
        meta.insert("cluster".to_string(), s.cluster.to_string());
        meta.insert("pool_index".to_string(), i.to_string());
        entries.push(ReferenceEntry {
            id: entries.len() as u64,
            input: s.input.clone(),
            label: s.label,
            embedding: embedder.embed(&s.input)?,
            pathway,
            meta,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyStore);
    }
    ReferenceStore::new(
        entries,
        embedder.dim(),
        (model.config.n_tokens, model.shape.d_model),
        model.dims(),
        Provenance {
            model_hash: model.digest()?,
            seed,
            built_at: None,
        },
    )
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const STORE_SCHEMA: &str = "refstore/1";

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    embedding_dim: usize,
    input_tokens: usize,
    input_width: usize,
    pathway: PathwayDims,
    entries: usize,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    id: u64,
    label: usize,
    input: DualArray,
    embedding: DualArray,
    pathway: DualArray,
    meta: BTreeMap<String, String>,
}

pub fn save(store: &ReferenceStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(store: &ReferenceStore, w: &mut impl Write) -> Result<()> {
    let header = Header {
        schema: STORE_SCHEMA.into(),
        embedding_dim: store.embedding_dim,
        input_tokens: store.input_shape.0,
        input_width: store.input_shape.1,
        pathway: store.dims,
        entries: store.entries.len(),
        provenance: store.provenance.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for e in &store.entries {
        // Input is stored token-major.
        let input: Vec<f64> = e.input.transpose().iter().copied().collect();
        let rec = EntryRecord {
            id: e.id,
            label: e.label,
            input: DualArray::new(&input),
            embedding: DualArray::new(&e.embedding),
            pathway: DualArray::new(e.pathway.values()),
            meta: e.meta.clone(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<ReferenceStore> {
    let file = std::fs::File::open(path)?;
    read_jsonl(BufReader::new(file), path)
}

pub fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<ReferenceStore> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "missing header line".into())),
    };
    if header.schema != STORE_SCHEMA {
        return Err(Error::Schema(format!(
            "expected store schema {STORE_SCHEMA}, found {}",
            header.schema
        )));
    }
    let (t, w) = (header.input_tokens, header.input_width);
    let mut entries = Vec::with_capacity(header.entries);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EntryRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let decode = |a: &DualArray, what: &str, want: usize| -> Result<Vec<f64>> {
            let v = a.values().map_err(|m| parse_err(lineno, format!("{what}: {m}")))?;
            if v.len() != want {
                return Err(Error::Schema(format!(
                    "line {lineno}: {what} has {} values, header implies {want}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let input = decode(&rec.input, "input", t * w)?;
        let embedding = decode(&rec.embedding, "embedding", header.embedding_dim)?;
        let pathway = decode(&rec.pathway, "pathway", header.pathway.len())?;
        entries.push(ReferenceEntry {
            id: rec.id,
            input: Input::from_row_slice(t, w, &input),
            label: rec.label,
            embedding,
            pathway: Pathway::from_values(header.pathway, pathway)
                .map_err(|e| parse_err(lineno, e.to_string()))?,
            meta: rec.meta,
        });
    }
    if entries.len() != header.entries {
        return Err(Error::Schema(format!(
            "header declares {} entries, file holds {}",
            header.entries,
            entries.len()
        )));
    }
    ReferenceStore::new(entries, header.embedding_dim, (t, w), header.pathway, header.provenance)
}

/// Checks that every decimal array in the file agrees with its hex payload.
pub fn check_decimal_payloads(path: &Path) -> Result<()> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    for (i, line) in reader.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EntryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        for (what, a) in [("input", &rec.input), ("embedding", &rec.embedding), ("pathway", &rec.pathway)] {
            if !a.consistent() {
                return Err(Error::Verification(format!(
                    "line {}: decimal {what} disagrees with hex payload",
                    i + 1
                )));
            }
        }
    }
    Ok(())
}

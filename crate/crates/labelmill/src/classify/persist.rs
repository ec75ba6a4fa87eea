//! Flat binary persistence for trained models, shared by the classifiers and
//! the clustering baseline. Weights are stored as raw little-endian f64
//! bytes, so a round-trip is bit-exact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes   "LMWT"
//! version  u16       currently 1
//! kind     u8        1 logit • 2 mlp • 3 multilabel • 4 kmeans
//! dim      u32       input dimensionality
//! classes  u32 count, then count × u32 label indices
//! hyper    u32 count, then per entry: u16 name len, name utf-8, f64 value
//! blocks   u32 count, then per block: u16 name len, name utf-8,
//!          u32 rows, u32 cols, rows×cols f64 row-major
//! tail     kind 3: u32 scorer count, then per scorer: u32 label index,
//!          u8 tag (0 constant-negative, 1 constant-positive, 2 model),
//!          tag 2 followed by u64 byte length + a nested encoding;
//!          kind 4: u64 fit seed
//! ```
//!
//! Block names are fixed per kind: logit stores `w` (K×dim) and `b` (K×1);
//! mlp stores `w1`, `b1`, `w2`, `b2`; kmeans stores `centroids` (K×dim).
//! Every count is validated against the remaining input before anything is
//! allocated, so the decoder is safe on hostile bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::classify::multilabel::{BinaryScorer, MultilabelModel};
use crate::classify::{ModelKind, ModelWeights, MulticlassModel};
use crate::cluster::ClusterModel;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LMWT";
const VERSION: u16 = 1;

const KIND_LOGIT: u8 = 1;
const KIND_MLP: u8 = 2;
const KIND_MULTILABEL: u8 = 3;
const KIND_KMEANS: u8 = 4;

// Sanity caps: generous for real models, tight enough that a hostile header
// cannot demand huge allocations before length checks run.
const MAX_CLASSES: usize = 1 << 20;
const MAX_HYPERPARAMS: usize = 1 << 12;
const MAX_NAME_LEN: usize = 1 << 12;
const MAX_BLOCKS: usize = 64;
const MAX_SCORERS: usize = 1 << 16;

/// Any model the weight-file format can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum PersistedModel {
    Multiclass(MulticlassModel),
    Multilabel(MultilabelModel),
    Kmeans(ClusterModel),
}

fn bad(reason: impl Into<String>) -> Error {
    Error::ModelFormat(reason.into())
}

// ---------------------------------------------------------------- encoding

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn name(&mut self, s: &str) {
        debug_assert!(s.len() <= MAX_NAME_LEN);
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn block(&mut self, name: &str, rows: usize, cols: usize, values: impl Iterator<Item = f64>) {
        self.name(name);
        self.u32(rows as u32);
        self.u32(cols as u32);
        let mut written = 0usize;
        for v in values {
            self.f64(v);
            written += 1;
        }
        debug_assert_eq!(written, rows * cols);
    }
}

fn encode_header(
    w: &mut Writer,
    kind: u8,
    dim: usize,
    classes: &[u32],
    hyperparams: &BTreeMap<String, f64>,
) {
    w.buf.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u8(kind);
    w.u32(dim as u32);
    w.u32(classes.len() as u32);
    for &c in classes {
        w.u32(c);
    }
    w.u32(hyperparams.len() as u32);
    for (name, &value) in hyperparams {
        w.name(name);
        w.f64(value);
    }
}

fn encode_multiclass(w: &mut Writer, model: &MulticlassModel) {
    let kind = match model.kind {
        ModelKind::Logit => KIND_LOGIT,
        ModelKind::Mlp => KIND_MLP,
    };
    encode_header(w, kind, model.dim, &model.classes, &model.hyperparams);
    match &model.weights {
        ModelWeights::Logit { w: wt, b } => {
            w.u32(2);
            w.block("w", wt.len(), model.dim, wt.iter().flatten().copied());
            w.block("b", b.len(), 1, b.iter().copied());
        }
        ModelWeights::Mlp { w1, b1, w2, b2 } => {
            w.u32(4);
            let hidden = w1.len();
            w.block("w1", hidden, model.dim, w1.iter().flatten().copied());
            w.block("b1", hidden, 1, b1.iter().copied());
            w.block("w2", w2.len(), hidden, w2.iter().flatten().copied());
            w.block("b2", b2.len(), 1, b2.iter().copied());
        }
    }
}

fn encode_multilabel(w: &mut Writer, model: &MultilabelModel) {
    let classes: Vec<u32> = model.per_label.keys().copied().collect();
    let scorer_kind = match model.kind {
        ModelKind::Logit => 1.0,
        ModelKind::Mlp => 2.0,
    };
    let hyperparams = BTreeMap::from([
        ("scorer_kind".to_string(), scorer_kind),
        ("threshold".to_string(), model.threshold),
    ]);
    encode_header(w, KIND_MULTILABEL, model.dim, &classes, &hyperparams);
    w.u32(0); // no blocks of its own
    w.u32(model.per_label.len() as u32);
    for (&label, scorer) in &model.per_label {
        w.u32(label);
        match scorer {
            BinaryScorer::ConstantNegative => w.u8(0),
            BinaryScorer::ConstantPositive => w.u8(1),
            BinaryScorer::Model(inner) => {
                w.u8(2);
                let mut nested = Writer::new();
                encode_multiclass(&mut nested, inner);
                w.u64(nested.buf.len() as u64);
                w.buf.extend_from_slice(&nested.buf);
            }
        }
    }
}

fn encode_kmeans(w: &mut Writer, model: &ClusterModel) {
    let dim = model.centroids.first().map_or(0, Vec::len);
    let hyperparams = BTreeMap::from([("inertia".to_string(), model.inertia)]);
    encode_header(w, KIND_KMEANS, dim, &[], &hyperparams);
    w.u32(1);
    w.block(
        "centroids",
        model.k(),
        dim,
        model.centroids.iter().flatten().copied(),
    );
    w.u64(model.seed);
}

/// Serializes a model to the weight-file bytes.
pub fn encode_model(model: &PersistedModel) -> Vec<u8> {
    let mut w = Writer::new();
    match model {
        PersistedModel::Multiclass(m) => encode_multiclass(&mut w, m),
        PersistedModel::Multilabel(m) => encode_multilabel(&mut w, m),
        PersistedModel::Kmeans(m) => encode_kmeans(&mut w, m),
    }
    w.buf
}

// ---------------------------------------------------------------- decoding

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(bad(format!(
                "truncated input: wanted {n} bytes, {} left",
                self.remaining()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        if len > MAX_NAME_LEN {
            return Err(bad("name too long"));
        }
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| bad("name is not utf-8"))
    }

    /// Reads a counted list of f64s, checking length before allocating.
    fn f64_vec(&mut self, count: usize) -> Result<Vec<f64>> {
        if self.remaining() < count.saturating_mul(8) {
            return Err(bad("truncated weight data"));
        }
        (0..count).map(|_| self.f64()).collect()
    }
}

struct Header {
    kind: u8,
    dim: usize,
    classes: Vec<u32>,
    hyperparams: BTreeMap<String, f64>,
}

fn decode_header(r: &mut Reader) -> Result<Header> {
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic; not a weight file"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    let dim = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    if n_classes > MAX_CLASSES || r.remaining() < n_classes.saturating_mul(4) {
        return Err(bad("class list exceeds input"));
    }
    let classes: Vec<u32> = (0..n_classes).map(|_| r.u32()).collect::<Result<_>>()?;
    let n_hyper = r.u32()? as usize;
    if n_hyper > MAX_HYPERPARAMS {
        return Err(bad("too many hyperparameters"));
    }
    let mut hyperparams = BTreeMap::new();
    for _ in 0..n_hyper {
        let name = r.name()?;
        let value = r.f64()?;
        if hyperparams.insert(name, value).is_some() {
            return Err(bad("duplicate hyperparameter"));
        }
    }
    Ok(Header {
        kind,
        dim,
        classes,
        hyperparams,
    })
}

struct Block {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

fn decode_blocks(r: &mut Reader) -> Result<Vec<Block>> {
    let n_blocks = r.u32()? as usize;
    if n_blocks > MAX_BLOCKS {
        return Err(bad("too many weight blocks"));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name = r.name()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| bad("block size overflows"))?;
        let values = r.f64_vec(count)?;
        blocks.push(Block {
            name,
            rows,
            cols,
            values,
        });
    }
    Ok(blocks)
}

fn into_rows(block: &Block) -> Vec<Vec<f64>> {
    block
        .values
        .chunks(block.cols.max(1))
        .map(<[f64]>::to_vec)
        .collect()
}

fn expect_block<'b>(blocks: &'b [Block], index: usize, name: &str) -> Result<&'b Block> {
    let block = blocks
        .get(index)
        .ok_or_else(|| bad(format!("missing `{name}` block")))?;
    if block.name != name {
        return Err(bad(format!(
            "expected block `{name}`, found `{}`",
            block.name
        )));
    }
    Ok(block)
}

fn decode_multiclass(r: &mut Reader, header: Header) -> Result<MulticlassModel> {
    let blocks = decode_blocks(r)?;
    let k = header.classes.len();
    let weights = match header.kind {
        KIND_LOGIT => {
            let w = expect_block(&blocks, 0, "w")?;
            let b = expect_block(&blocks, 1, "b")?;
            if w.rows != k || w.cols != header.dim || b.rows != k || b.cols != 1 {
                return Err(bad("logit block shape mismatch"));
            }
            ModelWeights::Logit {
                w: into_rows(w),
                b: b.values.clone(),
            }
        }
        KIND_MLP => {
            let w1 = expect_block(&blocks, 0, "w1")?;
            let b1 = expect_block(&blocks, 1, "b1")?;
            let w2 = expect_block(&blocks, 2, "w2")?;
            let b2 = expect_block(&blocks, 3, "b2")?;
            let hidden = w1.rows;
            if w1.cols != header.dim
                || b1.rows != hidden
                || b1.cols != 1
                || w2.rows != k
                || w2.cols != hidden
                || b2.rows != k
                || b2.cols != 1
            {
                return Err(bad("mlp block shape mismatch"));
            }
            ModelWeights::Mlp {
                w1: into_rows(w1),
                b1: b1.values.clone(),
                w2: into_rows(w2),
                b2: b2.values.clone(),
            }
        }
        other => return Err(bad(format!("kind {other} is not a multiclass model"))),
    };
    let model = MulticlassModel {
        kind: if header.kind == KIND_LOGIT {
            ModelKind::Logit
        } else {
            ModelKind::Mlp
        },
        dim: header.dim,
        classes: header.classes,
        hyperparams: header.hyperparams,
        weights,
    };
    model.validate()?;
    Ok(model)
}

fn decode_multilabel(r: &mut Reader, header: Header) -> Result<MultilabelModel> {
    let blocks = decode_blocks(r)?;
    if !blocks.is_empty() {
        return Err(bad("multilabel header carries no blocks of its own"));
    }
    let kind = match header.hyperparams.get("scorer_kind") {
        Some(&v) if v == 1.0 => ModelKind::Logit,
        Some(&v) if v == 2.0 => ModelKind::Mlp,
        _ => return Err(bad("missing or unknown scorer_kind")),
    };
    let threshold = *header
        .hyperparams
        .get("threshold")
        .ok_or_else(|| bad("missing threshold"))?;
    if !threshold.is_finite() {
        return Err(bad("non-finite threshold"));
    }
    let n_scorers = r.u32()? as usize;
    if n_scorers > MAX_SCORERS {
        return Err(bad("too many scorers"));
    }
    if n_scorers != header.classes.len() {
        return Err(bad("scorer count differs from class list"));
    }
    let mut per_label = BTreeMap::new();
    for _ in 0..n_scorers {
        let label = r.u32()?;
        let scorer = match r.u8()? {
            0 => BinaryScorer::ConstantNegative,
            1 => BinaryScorer::ConstantPositive,
            2 => {
                let len = r.u64()? as usize;
                let nested = r.take(len)?;
                let inner = match decode_model(nested)? {
                    PersistedModel::Multiclass(m) => m,
                    _ => return Err(bad("nested scorer is not a multiclass model")),
                };
                if inner.classes != [0, 1] {
                    return Err(bad("binary scorer must have classes [0, 1]"));
                }
                if inner.kind != kind {
                    return Err(bad("scorer family differs from scorer_kind"));
                }
                if inner.dim != header.dim {
                    return Err(bad("scorer dim differs from model dim"));
                }
                BinaryScorer::Model(inner)
            }
            tag => return Err(bad(format!("unknown scorer tag {tag}"))),
        };
        if per_label.insert(label, scorer).is_some() {
            return Err(bad("duplicate scorer label"));
        }
    }
    Ok(MultilabelModel {
        kind,
        dim: header.dim,
        threshold,
        per_label,
    })
}

fn decode_kmeans(r: &mut Reader, header: Header) -> Result<ClusterModel> {
    let blocks = decode_blocks(r)?;
    if !header.classes.is_empty() {
        return Err(bad("kmeans carries no class list"));
    }
    let centroids = expect_block(&blocks, 0, "centroids")?;
    if centroids.cols != header.dim || centroids.rows == 0 {
        return Err(bad("centroid block shape mismatch"));
    }
    let inertia = *header
        .hyperparams
        .get("inertia")
        .ok_or_else(|| bad("missing inertia"))?;
    let seed = r.u64()?;
    let model = ClusterModel {
        centroids: into_rows(centroids),
        // Assignments are data-tied; recompute with `assign_nearest`.
        assignments: Vec::new(),
        inertia,
        seed,
    };
    model.validate().map_err(|e| bad(e.to_string()))?;
    Ok(model)
}

/// Parses weight-file bytes back into a model. Rejects trailing garbage.
pub fn decode_model(bytes: &[u8]) -> Result<PersistedModel> {
    let mut r = Reader::new(bytes);
    let header = decode_header(&mut r)?;
    let model = match header.kind {
        KIND_LOGIT | KIND_MLP => PersistedModel::Multiclass(decode_multiclass(&mut r, header)?),
        KIND_MULTILABEL => PersistedModel::Multilabel(decode_multilabel(&mut r, header)?),
        KIND_KMEANS => PersistedModel::Kmeans(decode_kmeans(&mut r, header)?),
        other => return Err(bad(format!("unknown model kind {other}"))),
    };
    if r.remaining() > 0 {
        return Err(bad(format!("{} trailing bytes", r.remaining())));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &PersistedModel) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(|source| Error::IoPath {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<PersistedModel> {
    let bytes = std::fs::read(path).map_err(|source| Error::IoPath {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes)
}

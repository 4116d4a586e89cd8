//! Id-indexed embedding tables, text triplets and evaluation queries.
//!
//! Tables persist in the SEMB binary layout (little-endian):
//!
//! ```text
//! magic    "SCOTEMB1"            8 bytes
//! version  u32 = 1
//! count    u64
//! dim      u32
//! dtype    u8 = 0 (f32)
//! reserved 3 bytes of 0
//! payload  count * dim f32, row-major
//! ids      count x (u16 length + UTF-8 bytes)
//! tag      u16 length + UTF-8 bytes
//! ```
//!
//! Triplets and evaluation queries are newline-delimited JSON objects.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::tensor::{Matrix, ZERO_NORM};

pub const SEMB_MAGIC: &[u8; 8] = b"SCOTEMB1";
pub const SEMB_VERSION: u32 = 1;
pub const SEMB_HEADER_LEN: usize = 8 + 4 + 8 + 4 + 1 + 3;

/// Rows whose norm is within this distance of 1 are re-normalized on ingest;
/// anything further off is rejected.
pub const NORM_TOLERANCE: f64 = 1e-3;
/// Rows closer to unit norm than this are stored untouched, which keeps
/// write/read round trips bit-exact.
const NORM_EXACT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    matrix: Matrix<f32>,
    source_tag: String,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    /// Builds a table, re-normalizing near-unit rows. Fails on duplicate ids,
    /// non-finite values, zero rows or rows outside the norm tolerance.
    pub fn new(ids: Vec<String>, matrix: Matrix<f32>, source_tag: impl Into<String>) -> Result<Self> {
        let mut matrix = matrix;
        if ids.len() != matrix.rows() {
            return Err(Error::InvariantViolation(format!(
                "{} ids for {} rows",
                ids.len(),
                matrix.rows()
            )));
        }
        if matrix.cols() == 0 {
            return Err(Error::BadDims("embedding dim must be positive".into()));
        }
        let index = build_index(&ids)?;
        for (i, id) in ids.iter().enumerate() {
            normalize_row(matrix.row_mut(i), i, id)?;
        }
        Ok(Self {
            ids,
            matrix,
            source_tag: source_tag.into(),
            index,
        })
    }

    /// Builds a table from `(id, vector)` pairs, normalizing every row
    /// regardless of its starting norm. For producers that emit raw vectors.
    pub fn from_raw<I, S>(rows: I, source_tag: impl Into<String>) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut data: Vec<Vec<f32>> = Vec::new();
        for (id, v) in rows {
            let id = id.into();
            let v64: Vec<f64> = v.iter().map(|x| *x as f64).collect();
            let n = crate::tensor::l2_normalize(&v64).map_err(|e| match e {
                Error::ZeroVector { .. } => Error::InvariantViolation(format!("row {id} is a zero vector")),
                other => other,
            })?;
            data.push(n.into_iter().map(|x| x as f32).collect());
            ids.push(id);
        }
        let matrix = Matrix::from_rows(&data)?;
        Self::new(ids, matrix, source_tag)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Matrix<f32> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.matrix.row(i))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Restricts the table to the given ids, in the given order.
    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let mut rows = Vec::with_capacity(ids.len());
        let mut out_ids = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            let row = self.get(id).ok_or_else(|| Error::UnknownId {
                query: "select".into(),
                id: id.into(),
            })?;
            rows.push(row.to_vec());
            out_ids.push(id.to_string());
        }
        Self::new(out_ids, Matrix::from_rows(&rows)?, self.source_tag.clone())
    }

    /// Checks that every row is unit-norm within the ingest tolerance; used before writing.
    fn validate(&self) -> Result<()> {
        for (i, (id, row)) in self.ids.iter().zip(self.matrix.iter_rows()).enumerate() {
            let n = norm_f64(row);
            if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::NotNormalized {
                    row: i,
                    id: id.clone(),
                    norm: n,
                });
            }
            if id.len() > u16::MAX as usize {
                return Err(Error::InvariantViolation(format!("id at row {i} longer than 65535 bytes")));
            }
        }
        if self.source_tag.len() > u16::MAX as usize {
            return Err(Error::InvariantViolation("source tag longer than 65535 bytes".into()));
        }
        Ok(())
    }
}

fn build_index(ids: &[String]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::InvariantViolation(format!("duplicate id {id:?}")));
        }
    }
    Ok(index)
}

fn norm_f64(row: &[f32]) -> f64 {
    row.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

fn normalize_row(row: &mut [f32], i: usize, id: &str) -> Result<()> {
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("row {i} ({id})")));
    }
    let n = norm_f64(row);
    if n < ZERO_NORM {
        return Err(Error::ZeroVector {
            threshold: ZERO_NORM,
        });
    }
    let dev = (n - 1.0).abs();
    if dev > NORM_TOLERANCE {
        return Err(Error::NotNormalized {
            row: i,
            id: id.into(),
            norm: n,
        });
    }
    if dev > NORM_EXACT {
        for x in row.iter_mut() {
            *x = (*x as f64 / n) as f32;
        }
    }
    Ok(())
}

pub fn encode_table(table: &EmbeddingTable) -> Result<Vec<u8>> {
    table.validate()?;
    let m = table.matrix();
    let mut buf = Vec::with_capacity(SEMB_HEADER_LEN + m.as_slice().len() * 4);
    buf.extend_from_slice(SEMB_MAGIC);
    buf.extend_from_slice(&SEMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    buf.push(0);
    buf.extend_from_slice(&[0, 0, 0]);
    for x in m.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for id in table.ids() {
        put_str(&mut buf, id);
    }
    put_str(&mut buf, table.source_tag());
    Ok(buf)
}

pub fn decode_table(bytes: &[u8]) -> Result<EmbeddingTable> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(8).map_err(|_| Error::BadMagic {
        expected: "SCOTEMB1".into(),
        found: String::from_utf8_lossy(bytes).chars().take(8).collect(),
    })?;
    if magic != SEMB_MAGIC {
        return Err(Error::BadMagic {
            expected: "SCOTEMB1".into(),
            found: String::from_utf8_lossy(magic).into(),
        });
    }
    let version = r.u32()?;
    if version != SEMB_VERSION {
        return Err(Error::VersionMismatch {
            expected: SEMB_VERSION,
            found: version,
        });
    }
    let count = r.u64()? as usize;
    let dim = r.u32()? as usize;
    let dtype = r.u8()?;
    if dtype != 0 {
        return Err(Error::CorruptPayload(format!("unsupported dtype {dtype}")));
    }
    r.take(3)?;
    let n = count
        .checked_mul(dim)
        .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| Error::CorruptPayload(format!("payload of {count}x{dim} exceeds file size")))?;
    let payload = r.take(n * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(r.string()?);
    }
    let tag = r.string()?;
    if r.remaining() != 0 {
        return Err(Error::CorruptPayload(format!("{} trailing bytes", r.remaining())));
    }
    EmbeddingTable::new(ids, Matrix::new(count, dim, data)?, tag)
}

pub fn write_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_table(table)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    decode_table(&fs::read(path)?)
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::CorruptPayload(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::CorruptPayload(format!("invalid UTF-8: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTriplet {
    pub id: String,
    pub caption: String,
    pub modification: String,
    pub modified_caption: String,
}

impl TextTriplet {
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.caption.is_empty() {
            return Err("empty caption".into());
        }
        if self.modification.is_empty() {
            return Err("empty modification".into());
        }
        if self.modified_caption.is_empty() {
            return Err("empty modified_caption".into());
        }
        if self.modified_caption == self.caption {
            return Err("modified_caption equals caption".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub id: String,
    pub reference_id: String,
    pub modification_text: String,
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
}

impl EvalQuery {
    pub fn check(&self) -> std::result::Result<(), String> {
        if let Some(subset) = &self.subset_ids {
            if subset.len() < 2 {
                return Err(format!("subset has {} members, need at least 2", subset.len()));
            }
            if !subset.contains(&self.target_id) {
                return Err("subset does not contain target_id".into());
            }
        }
        Ok(())
    }
}

fn read_jsonl<T, F>(path: &Path, check: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(&T) -> std::result::Result<(), String>,
{
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        check(&rec).map_err(|msg| Error::InvalidRecord { line: lineno, msg })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<TextTriplet>> {
    read_jsonl(path.as_ref(), TextTriplet::check)
}

pub fn write_triplets(path: impl AsRef<Path>, triplets: &[TextTriplet]) -> Result<()> {
    write_jsonl(path.as_ref(), triplets)
}

pub fn load_eval_queries(path: impl AsRef<Path>) -> Result<Vec<EvalQuery>> {
    read_jsonl(path.as_ref(), EvalQuery::check)
}

pub fn write_eval_queries(path: impl AsRef<Path>, queries: &[EvalQuery]) -> Result<()> {
    write_jsonl(path.as_ref(), queries)
}

/// Loss inputs for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    /// Reference image embedding.
    pub image: Vec<f32>,
    /// Modification-text embedding.
    pub modification: Vec<f32>,
    /// Modified-caption embedding (the training target).
    pub target_text: Vec<f32>,
    /// Original-caption embedding (an extra negative).
    pub caption: Vec<f32>,
    /// Optional target-image embedding, used when training against image targets.
    pub target_image: Option<Vec<f32>>,
}

impl TrainingExample {
    pub fn dim(&self) -> usize {
        self.image.len()
    }
}

/// Ids that were present in some but not all joined tables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JoinReport {
    pub dropped: Vec<String>,
}

/// Joins four tables by id. Output order follows the image table.
pub fn assemble_training_set(
    images: &EmbeddingTable,
    mods: &EmbeddingTable,
    targets: &EmbeddingTable,
    originals: &EmbeddingTable,
) -> Result<(Vec<TrainingExample>, JoinReport)> {
    let d = images.dim();
    for t in [mods, targets, originals] {
        check_dim(d, t.dim())?;
    }
    let tables = [images, mods, targets, originals];
    let mut examples = Vec::new();
    for id in images.ids() {
        if let (Some(m), Some(u), Some(t)) = (mods.get(id), targets.get(id), originals.get(id)) {
            examples.push(TrainingExample {
                id: id.clone(),
                image: images.get(id).unwrap().to_vec(),
                modification: m.to_vec(),
                target_text: u.to_vec(),
                caption: t.to_vec(),
                target_image: None,
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::EmptyJoin);
    }
    let kept: HashSet<&str> = examples.iter().map(|e| e.id.as_str()).collect();
    let dropped: BTreeSet<String> = tables
        .iter()
        .flat_map(|t| t.ids().iter())
        .filter(|id| !kept.contains(id.as_str()))
        .cloned()
        .collect();
    if !dropped.is_empty() {
        log::warn!(
            "training-set join dropped {} ids missing from at least one table",
            dropped.len()
        );
    }
    Ok((
        examples,
        JoinReport {
            dropped: dropped.into_iter().collect(),
        },
    ))
}

/// Attaches target-image embeddings by id. Examples without a matching row are reported.
pub fn attach_image_targets(examples: &mut [TrainingExample], table: &EmbeddingTable) -> Result<Vec<String>> {
    let mut missing = Vec::new();
    for ex in examples.iter_mut() {
        check_dim(ex.dim(), table.dim())?;
        match table.get(&ex.id) {
            Some(v) => ex.target_image = Some(v.to_vec()),
            None => missing.push(ex.id.clone()),
        }
    }
    Ok(missing)
}

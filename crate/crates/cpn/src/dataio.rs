//! Dataset artifacts: embedding tables, attribute tables, class splits.
//!
//! Three on-disk formats, all deliberately simple:
//!
//! - `EMB1` binary embeddings (little-endian): magic `EMB1`, u32 record
//!   count, u32 dim, then per record a u32 class id and dim f32 values.
//!   Single precision on disk, widened to f64 in memory.
//! - Attribute CSV with header `class_id,a_1,...,a_M`; one row per class
//!   (category level) or one row per image (image level, averaged per
//!   class on load). When an external label list is supplied the CSV
//!   carries attribute columns only.
//! - Split manifest JSON `{"base":[...],"val":[...],"novel":[...]}`.
//!
//! [`DatasetBundle::validate`] cross-checks the three parts and seals them
//! into an immutable bundle that is free to share across threads.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::Vector;

const EMB_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(csv::Error),
    #[error("bad magic: expected EMB1")]
    BadMagic,
    #[error("file ends before the declared record count")]
    TruncatedFile,
    #[error("count mismatch: declared {expected} bytes of records, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("record {record} contains a non-finite feature value")]
    NonFiniteFeature { record: usize },
    #[error("feature of record {record} has length {found}, table dim is {expected}")]
    FeatureDimMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("row {row}: cannot parse {field:?} as a number")]
    BadNumber { row: usize, field: String },
    #[error("row {row} has a different width than the header")]
    RaggedRows { row: usize },
    #[error("row {row}, attribute {col}: negative score")]
    NegativeScore { row: usize, col: usize },
    #[error("row {row}, attribute {col}: non-finite score")]
    NonFiniteScore { row: usize, col: usize },
    #[error("class {class} has more than one category-level row")]
    DuplicateClassRow { class: u32 },
    #[error("class {class} resolves to an all-zero attribute vector")]
    AllZeroClassVector { class: u32 },
    #[error("label list has {labels} entries for {rows} csv rows")]
    LabelCountMismatch { rows: usize, labels: usize },
    #[error("class {class} appears in more than one split")]
    OverlappingSplits { class: u32 },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("class {class} has no attribute vector")]
    MissingAttributeVector { class: u32 },
    #[error("embedding label {class} is not assigned to any split")]
    UnsplitClass { class: u32 },
    #[error("split class {class} has no embedding records")]
    EmptyClass { class: u32 },
    #[error("table must contain at least one record")]
    EmptyTable,
}

fn map_csv(e: csv::Error) -> DataError {
    if let csv::ErrorKind::UnequalLengths { pos, .. } = e.kind() {
        let row = pos.as_ref().map(|p| p.line() as usize).unwrap_or(0);
        return DataError::RaggedRows { row };
    }
    DataError::Csv(e)
}

// ------------------------------------------------------------ embeddings

/// Fixed-dim feature records with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    features: Vec<Vector>,
    labels: Vec<u32>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, records: Vec<(Vector, u32)>) -> Result<Self, DataError> {
        if dim == 0 || records.is_empty() {
            return Err(DataError::EmptyTable);
        }
        let mut features = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for (record, (feature, label)) in records.into_iter().enumerate() {
            if feature.len() != dim {
                return Err(DataError::FeatureDimMismatch {
                    record,
                    expected: dim,
                    found: feature.len(),
                });
            }
            features.push(feature);
            labels.push(label);
        }
        Ok(EmbeddingTable {
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature(&self, i: usize) -> &Vector {
        &self.features[i]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(if bytes.get(..4) == Some(EMB_MAGIC.as_slice()) {
            DataError::TruncatedFile
        } else {
            DataError::BadMagic
        });
    }
    if &bytes[..4] != EMB_MAGIC {
        return Err(DataError::BadMagic);
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let record_bytes = 4 + 4 * d;
    let body = &bytes[12..];
    let expected = n * record_bytes;
    if body.len() < expected {
        return Err(DataError::TruncatedFile);
    }
    if body.len() > expected {
        return Err(DataError::CountMismatch {
            expected,
            found: body.len(),
        });
    }
    let mut records = Vec::with_capacity(n);
    for record in 0..n {
        let at = record * record_bytes;
        let label = u32::from_le_bytes(body[at..at + 4].try_into().unwrap());
        let mut feature = Vec::with_capacity(d);
        for j in 0..d {
            let off = at + 4 + 4 * j;
            let v = f32::from_le_bytes(body[off..off + 4].try_into().unwrap());
            feature.push(v as f64);
        }
        let feature =
            Vector::new(feature).map_err(|_| DataError::NonFiniteFeature { record })?;
        records.push((feature, label));
    }
    EmbeddingTable::new(d, records)
}

/// Values are truncated to single precision on the way out.
pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(EMB_MAGIC)?;
    out.write_all(&(table.len() as u32).to_le_bytes())?;
    out.write_all(&(table.dim() as u32).to_le_bytes())?;
    for i in 0..table.len() {
        out.write_all(&table.label(i).to_le_bytes())?;
        for v in table.feature(i).iter() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

// ------------------------------------------------------------ attributes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeLevel {
    /// One row per class, consumed verbatim.
    Category,
    /// One row per image, averaged into a per-class vector.
    Image,
}

/// Per-class attribute score vectors, all of width `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    m: usize,
    by_class: BTreeMap<u32, Vector>,
}

impl AttributeTable {
    /// Builds a table from `(class id, scores)` rows at the given level.
    /// Scores must be finite and nonnegative; no class may resolve to an
    /// all-zero vector.
    pub fn from_rows(level: AttributeLevel, rows: &[(u32, Vec<f64>)]) -> Result<Self, DataError> {
        let first = rows.first().ok_or(DataError::EmptyTable)?;
        let m = first.1.len();
        if m == 0 {
            return Err(DataError::EmptyTable);
        }
        for (row, (_, scores)) in rows.iter().enumerate() {
            if scores.len() != m {
                return Err(DataError::RaggedRows { row });
            }
            for (col, &s) in scores.iter().enumerate() {
                if !s.is_finite() {
                    return Err(DataError::NonFiniteScore { row, col });
                }
                if s < 0.0 {
                    return Err(DataError::NegativeScore { row, col });
                }
            }
        }

        let mut by_class = BTreeMap::new();
        match level {
            AttributeLevel::Category => {
                for (class, scores) in rows {
                    if by_class
                        .insert(*class, Vector::from_raw(scores.clone()))
                        .is_some()
                    {
                        return Err(DataError::DuplicateClassRow { class: *class });
                    }
                }
            }
            AttributeLevel::Image => {
                let mut grouped: BTreeMap<u32, Vec<&Vec<f64>>> = BTreeMap::new();
                for (class, scores) in rows {
                    grouped.entry(*class).or_default().push(scores);
                }
                for (class, group) in grouped {
                    let mut mean = vec![0.0; m];
                    let mut column = Vec::with_capacity(group.len());
                    for (j, slot) in mean.iter_mut().enumerate() {
                        // Summed in sorted order so the mean cannot depend
                        // on row order.
                        column.clear();
                        column.extend(group.iter().map(|r| r[j]));
                        column.sort_by(f64::total_cmp);
                        *slot = column.iter().sum::<f64>() / group.len() as f64;
                    }
                    by_class.insert(class, Vector::from_raw(mean));
                }
            }
        }

        for (class, v) in &by_class {
            if v.iter().all(|x| *x == 0.0) {
                return Err(DataError::AllZeroClassVector { class: *class });
            }
        }
        Ok(AttributeTable { m, by_class })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.by_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }

    pub fn get(&self, class: u32) -> Option<&Vector> {
        self.by_class.get(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_class.keys().copied()
    }

    /// Divides each class vector by its max entry. Cosine similarity makes
    /// per-class positive scaling irrelevant to the model; this exists for
    /// experimentation with raw score ranges.
    pub fn normalized_by_max(mut self) -> Self {
        for v in self.by_class.values_mut() {
            let max = v.iter().cloned().fold(0.0_f64, f64::max);
            for x in v.as_mut_slice() {
                *x /= max;
            }
        }
        self
    }
}

/// Loads an attribute CSV. With `labels = None` the first column is the
/// class id; with `labels = Some(ids)` every column is a score and `ids`
/// supplies one class id per data row.
pub fn load_attributes(
    path: &Path,
    level: AttributeLevel,
    labels: Option<&[u32]>,
) -> Result<AttributeTable, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(map_csv)?;
    let headers = reader.headers().map_err(map_csv)?.clone();
    let has_id_column = headers.get(0) == Some("class_id");
    match (labels.is_some(), has_id_column) {
        (false, false) => {
            return Err(DataError::BadHeader(
                "first column must be class_id when no label list is given".into(),
            ))
        }
        (true, true) => {
            return Err(DataError::BadHeader(
                "csv has a class_id column and an external label list".into(),
            ))
        }
        _ => {}
    }

    let mut rows: Vec<(u32, Vec<f64>)> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(map_csv)?;
        let (class, first_score_col) = match labels {
            Some(ids) => {
                let class = *ids
                    .get(row)
                    .ok_or(DataError::LabelCountMismatch {
                        rows: row + 1,
                        labels: ids.len(),
                    })?;
                (class, 0)
            }
            None => {
                let field = record.get(0).unwrap_or("");
                let class = field.trim().parse::<u32>().map_err(|_| DataError::BadNumber {
                    row,
                    field: field.to_string(),
                })?;
                (class, 1)
            }
        };
        let mut scores = Vec::with_capacity(record.len().saturating_sub(first_score_col));
        for field in record.iter().skip(first_score_col) {
            let v = field.trim().parse::<f64>().map_err(|_| DataError::BadNumber {
                row,
                field: field.to_string(),
            })?;
            scores.push(v);
        }
        rows.push((class, scores));
    }
    if let Some(ids) = labels {
        if ids.len() != rows.len() {
            return Err(DataError::LabelCountMismatch {
                rows: rows.len(),
                labels: ids.len(),
            });
        }
    }
    AttributeTable::from_rows(level, &rows)
}

/// Writes the table as a category-level CSV, one row per class in id order.
pub fn write_attributes(path: &Path, table: &AttributeTable) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut writer = csv::Writer::from_path(path).map_err(map_csv)?;
    let mut header = vec!["class_id".to_string()];
    header.extend((1..=table.m()).map(|j| format!("a_{j}")));
    writer.write_record(&header).map_err(map_csv)?;
    for class in table.classes() {
        let v = table.get(class).unwrap();
        let mut row = vec![class.to_string()];
        row.extend(v.iter().map(|x| x.to_string()));
        writer.write_record(&row).map_err(map_csv)?;
    }
    writer.flush()?;
    Ok(())
}

// ----------------------------------------------------------------- splits

/// Disjoint, non-empty base/val/novel class sets, stored sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    base: Vec<u32>,
    val: Vec<u32>,
    novel: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitManifest {
    base: Vec<u32>,
    val: Vec<u32>,
    novel: Vec<u32>,
}

impl SplitSpec {
    pub fn new(base: Vec<u32>, val: Vec<u32>, novel: Vec<u32>) -> Result<Self, DataError> {
        let mut sets = [base, val, novel];
        for (set, name) in sets.iter_mut().zip(["base", "val", "novel"]) {
            if set.is_empty() {
                return Err(DataError::EmptySplit(name));
            }
            set.sort_unstable();
            for pair in set.windows(2) {
                if pair[0] == pair[1] {
                    return Err(DataError::OverlappingSplits { class: pair[0] });
                }
            }
        }
        let [base, val, novel] = sets;
        let mut all: Vec<u32> = base.iter().chain(&val).chain(&novel).copied().collect();
        all.sort_unstable();
        for pair in all.windows(2) {
            if pair[0] == pair[1] {
                return Err(DataError::OverlappingSplits { class: pair[0] });
            }
        }
        Ok(SplitSpec { base, val, novel })
    }

    pub fn base(&self) -> &[u32] {
        &self.base
    }

    pub fn val(&self) -> &[u32] {
        &self.val
    }

    pub fn novel(&self) -> &[u32] {
        &self.novel
    }

    /// Which split holds `class`, if any.
    pub fn split_of(&self, class: u32) -> Option<&'static str> {
        if self.base.binary_search(&class).is_ok() {
            Some("base")
        } else if self.val.binary_search(&class).is_ok() {
            Some("val")
        } else if self.novel.binary_search(&class).is_ok() {
            Some("novel")
        } else {
            None
        }
    }
}

pub fn load_split(path: &Path) -> Result<SplitSpec, DataError> {
    let text = std::fs::read_to_string(path)?;
    let manifest: SplitManifest = serde_json::from_str(&text)?;
    SplitSpec::new(manifest.base, manifest.val, manifest.novel)
}

pub fn write_split(path: &Path, split: &SplitSpec) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let manifest = SplitManifest {
        base: split.base.clone(),
        val: split.val.clone(),
        novel: split.novel.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ----------------------------------------------------------------- bundle

/// Cross-validated dataset: every embedding label has an attribute vector
/// and a split assignment, and every split class has at least one record.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    embeddings: EmbeddingTable,
    attributes: AttributeTable,
    split: SplitSpec,
    class_records: BTreeMap<u32, Vec<usize>>,
}

impl DatasetBundle {
    pub fn validate(
        embeddings: EmbeddingTable,
        attributes: AttributeTable,
        split: SplitSpec,
    ) -> Result<Self, DataError> {
        let mut class_records: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in 0..embeddings.len() {
            class_records.entry(embeddings.label(i)).or_default().push(i);
        }
        for &class in class_records.keys() {
            if attributes.get(class).is_none() {
                return Err(DataError::MissingAttributeVector { class });
            }
            if split.split_of(class).is_none() {
                return Err(DataError::UnsplitClass { class });
            }
        }
        for &class in split
            .base()
            .iter()
            .chain(split.val())
            .chain(split.novel())
        {
            if !class_records.contains_key(&class) {
                return Err(DataError::EmptyClass { class });
            }
            if attributes.get(class).is_none() {
                return Err(DataError::MissingAttributeVector { class });
            }
        }
        Ok(DatasetBundle {
            embeddings,
            attributes,
            split,
            class_records,
        })
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn attributes(&self) -> &AttributeTable {
        &self.attributes
    }

    pub fn split(&self) -> &SplitSpec {
        &self.split
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn m(&self) -> usize {
        self.attributes.m()
    }

    /// Record indices of `class`, in file order. Empty for unknown classes.
    pub fn records_of(&self, class: u32) -> &[usize] {
        self.class_records
            .get(&class)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

/// Free-function spelling of [`DatasetBundle::validate`].
pub fn validate_bundle(
    embeddings: EmbeddingTable,
    attributes: AttributeTable,
    split: SplitSpec,
) -> Result<DatasetBundle, DataError> {
    DatasetBundle::validate(embeddings, attributes, split)
}

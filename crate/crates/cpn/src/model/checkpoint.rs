//! Parameter checkpoint files.
//!
//! Layout: one JSON header line (magic, shapes, generator mode, both
//! temperatures, and a section table with byte lengths), a newline, then
//! the concatenated payload sections as little-endian f32 values. Sections
//! are `r`, `gen_w`, `gen_b`, and, when the concat head exists, `concat_w`
//! and `concat_b`. Parameters therefore round-trip at single precision;
//! the temperatures live in the header at full precision.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Matrix, Vector};
use crate::model::{
    ComponentPrototypes, ConcatFusionHead, CpnParams, GenInputMode, ModelError, Temperatures,
    WeightGenerator,
};
use CheckpointError::BadSections;

const MAGIC: &str = "CPN1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },
    #[error("file has no header line")]
    MissingHeader,
    #[error("section {name} declares {declared} bytes, expected {expected}")]
    SectionSize {
        name: String,
        declared: usize,
        expected: usize,
    },
    #[error("unexpected section table: {0}")]
    BadSections(String),
    #[error("payload has {found} bytes, header declares {expected}")]
    PayloadSize { expected: usize, found: usize },
    #[error("payload holds a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<GradError> for CheckpointError {
    fn from(e: GradError) -> Self {
        match e {
            GradError::NonFinite(_) => CheckpointError::NonFinite,
            other => CheckpointError::Model(ModelError::Grad(other)),
        }
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct SectionDecl {
    pub name: String,
    pub bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    m: usize,
    d: usize,
    mode: GenInputMode,
    tau1: f64,
    tau2: f64,
    sections: Vec<SectionDecl>,
}

pub(crate) fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn f64_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect()
}

/// Writes a header line plus concatenated payload sections; shared by the
/// parameter checkpoint and the synthetic ground-truth file.
pub(crate) fn write_section_file<H: Serialize>(
    path: &Path,
    header: &H,
    payload: &[u8],
) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    out.write_all(payload)?;
    out.flush()?;
    Ok(())
}

/// Splits a section file into its header line and payload bytes.
pub(crate) fn read_section_file(path: &Path) -> Result<(String, Vec<u8>), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let split = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or(CheckpointError::MissingHeader)?;
    let header = String::from_utf8(bytes[..split].to_vec())
        .map_err(|_| CheckpointError::MissingHeader)?;
    Ok((header, bytes[split + 1..].to_vec()))
}

pub fn save_checkpoint(path: &Path, params: &CpnParams) -> Result<(), CheckpointError> {
    let mut sections: Vec<(String, Vec<u8>)> = vec![
        (
            "r".into(),
            f32_bytes(params.protos().matrix().as_slice().iter().copied()),
        ),
        (
            "gen_w".into(),
            f32_bytes(params.gen().w().iter().copied()),
        ),
        ("gen_b".into(), f32_bytes(std::iter::once(params.gen().b()))),
    ];
    if let Some(head) = params.concat_head() {
        sections.push((
            "concat_w".into(),
            f32_bytes(head.w().as_slice().iter().copied()),
        ));
        sections.push(("concat_b".into(), f32_bytes(head.b().iter().copied())));
    }
    let header = Header {
        magic: MAGIC.into(),
        m: params.m(),
        d: params.d(),
        mode: params.gen_input_mode(),
        tau1: params.temps().tau1(),
        tau2: params.temps().tau2(),
        sections: sections
            .iter()
            .map(|(name, bytes)| SectionDecl {
                name: name.clone(),
                bytes: bytes.len(),
            })
            .collect(),
    };
    let payload: Vec<u8> = sections.into_iter().flat_map(|(_, b)| b).collect();
    write_section_file(path, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<CpnParams, CheckpointError> {
    let (header_line, payload) = read_section_file(path)?;
    let header: Header = serde_json::from_str(&header_line)?;
    if header.magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: MAGIC.into(),
            found: header.magic,
        });
    }
    let declared: usize = header.sections.iter().map(|s| s.bytes).sum();
    if payload.len() != declared {
        return Err(CheckpointError::PayloadSize {
            expected: declared,
            found: payload.len(),
        });
    }

    let (m, d) = (header.m, header.d);
    let expected_sizes: &[(&str, usize)] = &[
        ("r", 4 * m * d),
        ("gen_w", 4 * header.mode.input_len(d)),
        ("gen_b", 4),
        ("concat_w", 4 * d * 2 * d),
        ("concat_b", 4 * d),
    ];

    let mut at = 0usize;
    let mut r = None;
    let mut gen_w = None;
    let mut gen_b = None;
    let mut concat_w = None;
    let mut concat_b = None;
    for decl in &header.sections {
        let expected = expected_sizes
            .iter()
            .find(|(name, _)| *name == decl.name)
            .map(|(_, size)| *size)
            .ok_or_else(|| BadSections(format!("unknown section {:?}", decl.name)))?;
        if decl.bytes != expected {
            return Err(CheckpointError::SectionSize {
                name: decl.name.clone(),
                declared: decl.bytes,
                expected,
            });
        }
        let values = f64_values(&payload[at..at + decl.bytes]);
        at += decl.bytes;
        match decl.name.as_str() {
            "r" => r = Some(Matrix::new(m, d, values)?),
            "gen_w" => gen_w = Some(Vector::new(values)?),
            "gen_b" => gen_b = Some(values[0]),
            "concat_w" => concat_w = Some(Matrix::new(d, 2 * d, values)?),
            "concat_b" => concat_b = Some(Vector::new(values)?),
            _ => unreachable!(),
        }
    }

    let r = r.ok_or_else(|| BadSections("missing section r".into()))?;
    let gen_w = gen_w.ok_or_else(|| BadSections("missing section gen_w".into()))?;
    let gen_b = gen_b.ok_or_else(|| BadSections("missing section gen_b".into()))?;
    if !gen_b.is_finite() {
        return Err(CheckpointError::NonFinite);
    }
    let temps = Temperatures::new(header.tau1, header.tau2)?;
    let mut params = CpnParams::new(
        ComponentPrototypes::new(r),
        WeightGenerator::new(gen_w, gen_b).map_err(CheckpointError::from)?,
        temps,
        header.mode,
    )?;
    match (concat_w, concat_b) {
        (Some(w), Some(b)) => {
            params = params.with_concat_head(ConcatFusionHead::new(w, b)?)?;
        }
        (None, None) => {}
        _ => {
            return Err(BadSections(
                "concat_w and concat_b must appear together".into(),
            ))
        }
    }
    Ok(params)
}

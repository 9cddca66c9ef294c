//! DEMB embedding container and its JSON layout sidecar.
//!
//! Binary layout (little-endian):
//!
//! | bytes  | content                                  |
//! |--------|------------------------------------------|
//! | 0–3    | magic `DEMB`                             |
//! | 4      | version, `0x01`                          |
//! | 5      | dtype code, `0x01` = f32, `0x02` = f64   |
//! | 6–7    | reserved, must be zero                   |
//! | 8–15   | M (rows) as u64                          |
//! | 16–23  | D (columns) as u64                       |
//! | 24–    | M·D values, row-major                    |
//!
//! A prompt matrix stored at `<name>.demb` carries its role assignment in a
//! UTF-8 JSON sidecar `<name>.layout.json` with keys `sot`, `identity`
//! (inclusive `[start, end]` pair), `frames` (list of pairs), `eot`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layout::{PromptLayout, TokenEmbeddingMatrix};
use crate::matrix::Matrix;
use crate::real::{Dtype, Real};

pub const MAGIC: [u8; 4] = *b"DEMB";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 24;

/// A matrix parsed from a DEMB container, in whichever precision the file
/// declares.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedMatrix {
    F32(Matrix<f32>),
    F64(Matrix<f64>),
}

impl ParsedMatrix {
    pub fn dtype(&self) -> Dtype {
        match self {
            ParsedMatrix::F32(_) => Dtype::F32,
            ParsedMatrix::F64(_) => Dtype::F64,
        }
    }

    pub fn nrows(&self) -> usize {
        match self {
            ParsedMatrix::F32(m) => m.nrows(),
            ParsedMatrix::F64(m) => m.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            ParsedMatrix::F32(m) => m.ncols(),
            ParsedMatrix::F64(m) => m.ncols(),
        }
    }

    /// Converts to f64 storage (exact for f32 sources).
    pub fn into_f64(self) -> Matrix<f64> {
        match self {
            ParsedMatrix::F32(m) => m.to_f64(),
            ParsedMatrix::F64(m) => m,
        }
    }

    /// Converts to f32 storage (rounds f64 sources).
    pub fn into_f32(self) -> Matrix<f32> {
        match self {
            ParsedMatrix::F32(m) => m,
            ParsedMatrix::F64(m) => {
                let mut out = Matrix::zeros(m.nrows(), m.ncols());
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        out.set(i, j, m.get(i, j) as f32);
                    }
                }
                out
            }
        }
    }
}

/// Embeddings loaded from disk, preserving the file's precision.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedEmbeddings {
    F32(TokenEmbeddingMatrix<f32>),
    F64(TokenEmbeddingMatrix<f64>),
}

impl LoadedEmbeddings {
    pub fn dtype(&self) -> Dtype {
        match self {
            LoadedEmbeddings::F32(_) => Dtype::F32,
            LoadedEmbeddings::F64(_) => Dtype::F64,
        }
    }

    pub fn n_tokens(&self) -> usize {
        match self {
            LoadedEmbeddings::F32(m) => m.n_tokens(),
            LoadedEmbeddings::F64(m) => m.n_tokens(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LoadedEmbeddings::F32(m) => m.dim(),
            LoadedEmbeddings::F64(m) => m.dim(),
        }
    }
}

/// Serializes a matrix into DEMB container bytes. Deterministic: identical
/// inputs produce identical bytes.
pub fn serialize_matrix<T: Real>(matrix: &Matrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.as_slice().len() * T::DTYPE.width());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&[0u8, 0u8]);
    out.extend_from_slice(&(matrix.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.ncols() as u64).to_le_bytes());
    for v in matrix.as_slice() {
        out.extend_from_slice(&v.to_le_bytes_vec());
    }
    out
}

/// Parses DEMB container bytes. The payload length must match the header
/// exactly, which also bounds allocations by the input size.
pub fn parse_matrix_bytes(bytes: &[u8]) -> Result<ParsedMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedFile(format!(
            "{} bytes is shorter than the {}-byte header",
            bytes.len(),
            HEADER_LEN
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::MalformedFile("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::MalformedFile(format!(
            "unsupported version 0x{:02x}",
            bytes[4]
        )));
    }
    let dtype = Dtype::from_code(bytes[5])
        .ok_or_else(|| Error::MalformedFile(format!("unknown dtype code 0x{:02x}", bytes[5])))?;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::MalformedFile("reserved bytes must be zero".into()));
    }
    let m = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = m
        .checked_mul(d)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::MalformedFile("element count overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::MalformedFile("payload size overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::MalformedFile(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            expected
        )));
    }
    let rows = usize::try_from(m).expect("checked above");
    let cols = usize::try_from(d).expect("checked above");
    match dtype {
        Dtype::F32 => {
            let values = payload
                .chunks_exact(4)
                .map(f32::from_le_slice)
                .collect::<Vec<_>>();
            Ok(ParsedMatrix::F32(Matrix::new(rows, cols, values)?))
        }
        Dtype::F64 => {
            let values = payload
                .chunks_exact(8)
                .map(f64::from_le_slice)
                .collect::<Vec<_>>();
            Ok(ParsedMatrix::F64(Matrix::new(rows, cols, values)?))
        }
    }
}

/// Parses and validates a layout sidecar (untrusted JSON).
pub fn parse_layout_json(bytes: &[u8]) -> Result<PromptLayout> {
    let layout: PromptLayout = serde_json::from_slice(bytes)
        .map_err(|e| Error::LayoutInconsistent(format!("sidecar JSON: {}", e)))?;
    layout.check_order()?;
    Ok(layout)
}

pub fn layout_to_json(layout: &PromptLayout) -> String {
    serde_json::to_string(layout).expect("layout serialization cannot fail")
}

/// Sidecar path for an embedding file: the `.demb` extension (or the last
/// extension, if different) is replaced by `.layout.json`; extensionless
/// paths get `.layout.json` appended.
pub fn layout_path_for(path: &Path) -> PathBuf {
    match path.file_stem() {
        Some(stem) if path.extension().is_some() => {
            path.with_file_name(format!("{}.layout.json", stem.to_string_lossy()))
        }
        _ => {
            let mut name = path.as_os_str().to_os_string();
            name.push(".layout.json");
            PathBuf::from(name)
        }
    }
}

/// Writes a prompt matrix and its layout sidecar. Byte output is
/// deterministic for identical inputs.
pub fn write_embeddings<T: Real>(
    matrix: &TokenEmbeddingMatrix<T>,
    layout: &PromptLayout,
    path: &Path,
) -> Result<()> {
    matrix.matrix().ensure_finite()?;
    layout.validate_rows(matrix.n_tokens())?;
    fs::write(path, serialize_matrix(matrix.matrix()))?;
    fs::write(layout_path_for(path), layout_to_json(layout))?;
    Ok(())
}

/// Loads a prompt matrix plus sidecar, validating every invariant the pair
/// must satisfy. Round-trips `write_embeddings` bit-exactly.
pub fn load_embeddings(path: &Path) -> Result<(LoadedEmbeddings, PromptLayout)> {
    let bytes = fs::read(path)?;
    let parsed = parse_matrix_bytes(&bytes)?;
    let sidecar = fs::read(layout_path_for(path))?;
    let layout = parse_layout_json(&sidecar)?;
    layout.validate_rows(parsed.nrows())?;
    let loaded = match parsed {
        ParsedMatrix::F32(m) => LoadedEmbeddings::F32(TokenEmbeddingMatrix::new(m)?),
        ParsedMatrix::F64(m) => LoadedEmbeddings::F64(TokenEmbeddingMatrix::new(m)?),
    };
    Ok((loaded, layout))
}

/// Writes a bare matrix (no sidecar) in the DEMB container; used for
/// derived artifacts such as attention outputs and decoded latents.
pub fn write_matrix_file<T: Real>(matrix: &Matrix<T>, path: &Path) -> Result<()> {
    fs::write(path, serialize_matrix(matrix))?;
    Ok(())
}

pub fn read_matrix_file(path: &Path) -> Result<ParsedMatrix> {
    parse_matrix_bytes(&fs::read(path)?)
}

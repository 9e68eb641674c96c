//! Binary model files: a fixed little-endian layout that round-trips
//! every parameter bit-exactly, written atomically via a temporary file.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! 8 bytes  magic "LDPPMDL\0"
//! u32      format version (currently 1)
//! u8       model kind tag (0 single-kernel, 1 per-target, 2 per-target
//!          without diagonal bias)
//! u64      item count p
//! u64      latent dimension count r
//! f64      score weight w
//! p x      token: u32 byte length, then that many UTF-8 bytes
//! p*r f64  embedding matrix V, row-major
//! p   f64  diagonal d
//! p*r f64  dimension weight matrix R, row-major (kinds 1 and 2 only)
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::data::ItemCatalog;
use crate::error::{Error, Result};
use crate::model::{LogisticDppModel, ModelKind, ModelParams, MultiTaskDppModel};

const MAGIC: &[u8; 8] = b"LDPPMDL\0";
const VERSION: u32 = 1;

/// A trained model together with its item vocabulary, ready to store or
/// load as one file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub kind: ModelKind,
    pub tokens: Vec<String>,
    pub params: ModelParams,
}

impl ModelArtifact {
    /// Bundles parameters with their vocabulary, checking that the kind
    /// tag matches the parameter family, that the no-bias kind really has
    /// a zero diagonal, and that tokens are unique and cover every item.
    pub fn new(kind: ModelKind, tokens: Vec<String>, params: ModelParams) -> Result<Self> {
        if tokens.len() != params.items() {
            return Err(Error::InvalidInput(format!(
                "{} tokens for {} items",
                tokens.len(),
                params.items()
            )));
        }
        let mut seen = HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate token '{t}'")));
            }
        }
        match (&params, kind) {
            (ModelParams::Logistic(_), ModelKind::Logistic) => {}
            (ModelParams::Multitask(_), ModelKind::Multitask) => {}
            (ModelParams::Multitask(m), ModelKind::MultitaskNobias) => {
                if m.diag().iter().any(|&x| x != 0.0) {
                    return Err(Error::InvalidInput(
                        "no-bias model has nonzero diagonal entries".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::InvalidInput(format!(
                    "parameter family does not match model kind '{kind}'"
                )));
            }
        }
        Ok(Self {
            kind,
            tokens,
            params,
        })
    }

    /// The vocabulary as a catalog (counts unknown, unit weights).
    pub fn catalog(&self) -> Result<ItemCatalog> {
        ItemCatalog::from_tokens(self.tokens.clone())
    }

    /// Writes the model file atomically: the bytes land in a temporary
    /// file in the target directory which is then renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    /// Reads and validates a model file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        decode(&bytes)
    }

    fn encode(&self) -> Vec<u8> {
        let p = self.params.items();
        let r = self.params.rank();
        let mut buf = Vec::with_capacity(64 + self.tokens.iter().map(|t| t.len() + 4).sum::<usize>() + 8 * (2 * p * r + p));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.kind.code());
        buf.extend_from_slice(&(p as u64).to_le_bytes());
        buf.extend_from_slice(&(r as u64).to_le_bytes());
        buf.extend_from_slice(&self.params.weight().to_le_bytes());
        for t in &self.tokens {
            buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.as_bytes());
        }
        match &self.params {
            ModelParams::Logistic(m) => {
                put_floats(&mut buf, m.embeddings().iter());
                put_floats(&mut buf, m.diag().iter());
            }
            ModelParams::Multitask(m) => {
                put_floats(&mut buf, m.embeddings().iter());
                put_floats(&mut buf, m.diag().iter());
                put_floats(&mut buf, m.task_weights().iter());
            }
        }
        buf
    }
}

fn put_floats<'a>(buf: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode(bytes: &[u8]) -> Result<ModelArtifact> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::InvalidInput(
            "not a model file (bad leading magic bytes)".into(),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported model file version {version} (expected {VERSION})"
        )));
    }
    let kind = ModelKind::from_code(r.u8()?)?;
    let p = r.len_field("item count")?;
    let rank = r.len_field("latent dimension count")?;
    let w = r.f64()?;
    let mut tokens = Vec::with_capacity(p);
    for _ in 0..p {
        let n = r.u32()? as usize;
        let raw = r.take(n)?;
        let token = std::str::from_utf8(raw)
            .map_err(|_| Error::InvalidInput("token is not valid UTF-8".into()))?;
        tokens.push(token.to_string());
    }
    let v = r.matrix(p, rank)?;
    let d = r.vector(p)?;
    let params = match kind {
        ModelKind::Logistic => ModelParams::Logistic(LogisticDppModel::new(v, d, w)?),
        ModelKind::Multitask | ModelKind::MultitaskNobias => {
            let weights = r.matrix(p, rank)?;
            ModelParams::Multitask(MultiTaskDppModel::new(v, d, weights, w)?)
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::InvalidInput(format!(
            "{} trailing bytes after the model payload",
            bytes.len() - r.pos
        )));
    }
    ModelArtifact::new(kind, tokens, params)
}

/// Writes `bytes` to `path` atomically: a uniquely named temporary file in
/// the same directory is filled, flushed, and renamed over the target, so
/// readers see either the old content or the new, never a partial write.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => parent,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.flush().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::InvalidInput(format!(
                "model file truncated at byte {} (needed {} more)",
                self.pos, n
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    /// A u64 size field that must fit in usize and stay small enough that
    /// byte-count arithmetic cannot overflow.
    fn len_field(&mut self, what: &str) -> Result<usize> {
        let raw = self.u64()?;
        let n = usize::try_from(raw)
            .ok()
            .filter(|&n| n <= (1 << 40))
            .ok_or_else(|| Error::InvalidInput(format!("implausible {what} {raw}")))?;
        Ok(n)
    }

    fn vector(&mut self, n: usize) -> Result<Array1<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::InvalidInput("vector byte count overflows".into())
        })?)?;
        Ok(Array1::from_iter(raw.chunks_exact(8).map(|c| {
            f64::from_le_bytes(c.try_into().unwrap())
        })))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let cells = rows.checked_mul(cols).ok_or_else(|| {
            Error::InvalidInput("matrix cell count overflows".into())
        })?;
        let flat = self.vector(cells)?;
        Array2::from_shape_vec((rows, cols), flat.to_vec())
            .map_err(|e| Error::InvalidInput(format!("bad matrix shape: {e}")))
    }
}

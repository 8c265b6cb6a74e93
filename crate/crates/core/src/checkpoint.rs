//! Flat named-tensor container for persisting trained state.
//!
//! A checkpoint is a single file holding string metadata plus any
//! number of named `f64` matrices. The layout is a UTF-8 header
//! followed by a raw binary payload:
//!
//! ```text
//! EVC1
//! meta <key> <value>            (zero or more, sorted by key)
//! tensor <name> <rows> <cols> f64   (zero or more, sorted by name)
//! end
//! <payload>
//! ```
//!
//! The payload concatenates every tensor in header order, row-major,
//! each entry written as a little-endian IEEE-754 `f64`. Identical
//! contents always serialize to identical bytes, so a rewritten
//! checkpoint is bit-equal to the original.
//!
//! Trainable parameters are stored under a `param.` name prefix; other
//! state (dimension gates, mask matrices, generated-sample libraries
//! grouped per timestamp) shares the container under its own prefixes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::tensor::{Mat, ParamStore};
use crate::{Error, Result};

const MAGIC: &str = "EVC1";
/// Name prefix for best-validation trainable parameters.
pub const PARAM_PREFIX: &str = "param.";
/// Name prefix for final-epoch trainable parameters.
pub const FINAL_PREFIX: &str = "final.";
/// Name under which the dimension-gate matrix is stored.
pub const GATES_TENSOR: &str = "gates";
/// Names of the stored invariant/variant mask matrices.
pub const MASK_INVARIANT_TENSOR: &str = "mask.invariant";
pub const MASK_VARIANT_TENSOR: &str = "mask.variant";

/// In-memory checkpoint: metadata plus named matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, Mat>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a named tensor. Names must be non-empty, single-token
    /// (no whitespace) and unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Contract(format!(
                "tensor name {name:?} must be a non-empty single token"
            )));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    /// Adds a metadata entry. Keys are single tokens; values are
    /// single-line strings.
    pub fn insert_meta(&mut self, key: impl Into<String>, value: impl ToString) -> Result<()> {
        let key = key.into();
        let value = value.to_string();
        if key.is_empty() || key.chars().any(char::is_whitespace) {
            return Err(Error::Contract(format!(
                "metadata key {key:?} must be a non-empty single token"
            )));
        }
        if value.contains('\n') {
            return Err(Error::Contract(format!(
                "metadata value for {key:?} must be single-line"
            )));
        }
        self.meta.insert(key, value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks metadata key {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Mat> {
        self.tensor(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Stores every trainable parameter under the `param.` prefix.
    pub fn insert_params(&mut self, params: &ParamStore) -> Result<()> {
        for (name, value) in params.iter() {
            self.insert(format!("{PARAM_PREFIX}{name}"), value.clone())?;
        }
        Ok(())
    }

    /// Reconstructs the parameter store held under a name prefix.
    pub fn params_with_prefix(&self, prefix: &str) -> Result<ParamStore> {
        let mut params = ParamStore::new();
        for (name, value) in &self.tensors {
            if let Some(stripped) = name.strip_prefix(prefix) {
                params.insert(stripped, value.clone());
            }
        }
        if params.is_empty() {
            return Err(Error::Contract(format!(
                "checkpoint holds no tensors under the {prefix:?} prefix"
            )));
        }
        Ok(params)
    }

    /// Reconstructs the best-validation trainable parameters.
    pub fn to_params(&self) -> Result<ParamStore> {
        self.params_with_prefix(PARAM_PREFIX)
    }

    /// Serializes to the documented container bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (key, value) in &self.meta {
            writeln!(header, "meta {key} {value}").expect("string write");
        }
        for (name, value) in &self.tensors {
            writeln!(header, "tensor {name} {} {} f64", value.nrows(), value.ncols())
                .expect("string write");
        }
        header.push_str("end\n");

        let mut bytes = header.into_bytes();
        for value in self.tensors.values() {
            for row in value.rows() {
                for &entry in row {
                    bytes.extend_from_slice(&entry.to_le_bytes());
                }
            }
        }
        bytes
    }

    /// Parses the documented container bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut ckpt = Checkpoint::new();
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        let mut offset = 0usize;
        let mut line_no = 0usize;
        let mut saw_end = false;
        while offset < bytes.len() {
            let rest = &bytes[offset..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Parse {
                    line: line_no + 1,
                    msg: "unterminated header line".into(),
                })?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Parse {
                line: line_no + 1,
                msg: "header is not UTF-8".into(),
            })?;
            offset += nl + 1;
            line_no += 1;

            if line_no == 1 {
                if line != MAGIC {
                    return Err(Error::Parse {
                        line: 1,
                        msg: format!("expected magic {MAGIC:?}, got {line:?}"),
                    });
                }
                continue;
            }
            if line == "end" {
                saw_end = true;
                break;
            }
            let mut fields = line.splitn(2, ' ');
            let directive = fields.next().unwrap_or_default();
            let rest = fields.next().unwrap_or_default();
            match directive {
                "meta" => {
                    let (key, value) = rest.split_once(' ').ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: format!("malformed meta line {line:?}"),
                    })?;
                    ckpt.insert_meta(key, value).map_err(|e| Error::Parse {
                        line: line_no,
                        msg: e.to_string(),
                    })?;
                }
                "tensor" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    if fields.len() != 4 || fields[3] != "f64" {
                        return Err(Error::Parse {
                            line: line_no,
                            msg: format!("malformed tensor line {line:?}"),
                        });
                    }
                    let rows = fields[1].parse::<usize>().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad row count {:?}", fields[1]),
                    })?;
                    let cols = fields[2].parse::<usize>().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad column count {:?}", fields[2]),
                    })?;
                    shapes.push((fields[0].to_string(), rows, cols));
                }
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unknown header directive {other:?}"),
                    });
                }
            }
        }
        if !saw_end {
            return Err(Error::Parse {
                line: line_no,
                msg: "header ended without an end marker".into(),
            });
        }

        let expected: usize = shapes.iter().map(|(_, r, c)| r * c * 8).sum();
        let payload = &bytes[offset..];
        if payload.len() != expected {
            return Err(Error::Contract(format!(
                "payload holds {} bytes but the header declares {expected}",
                payload.len()
            )));
        }
        let mut cursor = 0usize;
        for (name, rows, cols) in shapes {
            let mut m = Mat::zeros((rows, cols));
            for i in 0..rows {
                for j in 0..cols {
                    let mut buf = [0u8; 8];
                    buf.copy_from_slice(&payload[cursor..cursor + 8]);
                    m[(i, j)] = f64::from_le_bytes(buf);
                    cursor += 8;
                }
            }
            ckpt.insert(name, m)?;
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }
}

/// Renders a matrix as a plain text table (one row per line, entries
/// space-separated) for human inspection of masks and gates.
pub fn mat_to_text(m: &Mat) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

//! Binary model file.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! "LCE1" | version | graph length | graph JSON (no payloads)
//! then per constant, in ascending tensor id: id | byte length | raw bytes
//! ```

use crate::graph::{parse_document, Graph, GraphError, TensorData, TensorId};

pub const MAGIC: &[u8; 4] = b"LCE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {context} at byte offset {offset}")]
    Truncated { offset: usize, context: &'static str },
    #[error("graph section is not UTF-8 (offset {offset})")]
    Encoding { offset: usize },
    #[error("blob at byte offset {offset}: {reason}")]
    Blob { offset: usize, reason: String },
    #[error("invalid graph: {0}")]
    Graph(#[from] GraphError),
}

/// Serializes a graph. Output is deterministic for equal graphs.
pub fn write_model(graph: &Graph) -> Vec<u8> {
    let json = graph.to_json_structure();
    let mut out = Vec::with_capacity(12 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for t in graph.tensors.values() {
        if let Some(data) = &t.data {
            out.extend_from_slice(&t.id.to_le_bytes());
            out.extend_from_slice(&(data.byte_len() as u32).to_le_bytes());
            out.extend_from_slice(&data.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Truncated {
                offset: self.pos,
                context,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, ModelError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads and validates a model file.
pub fn read_model(bytes: &[u8]) -> Result<Graph, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let len = r.u32("graph length")? as usize;
    let start = r.pos;
    let text =
        std::str::from_utf8(r.take(len, "graph section")?).map_err(|_| ModelError::Encoding { offset: start })?;
    let mut graph = parse_document(text)?;
    let mut last: Option<TensorId> = None;
    while r.pos < bytes.len() {
        let offset = r.pos;
        let id = r.u32("blob header")?;
        let n = r.u32("blob header")? as usize;
        let payload = r.take(n, "weight blob")?;
        if last.is_some_and(|l| id <= l) {
            return Err(ModelError::Blob {
                offset,
                reason: format!("tensor {id} out of order"),
            });
        }
        last = Some(id);
        let def = graph.tensors.get_mut(&id).ok_or_else(|| ModelError::Blob {
            offset,
            reason: format!("unknown tensor {id}"),
        })?;
        let data = TensorData::from_le_bytes(def.dtype, payload).ok_or_else(|| ModelError::Blob {
            offset,
            reason: format!("{n} bytes is not a whole number of elements"),
        })?;
        if def.storage_len() != Some(data.len()) {
            return Err(ModelError::Blob {
                offset,
                reason: format!(
                    "tensor {id} expects {:?} elements, blob has {}",
                    def.storage_len(),
                    data.len()
                ),
            });
        }
        def.data = Some(data);
    }
    graph.check()?;
    Ok(graph)
}

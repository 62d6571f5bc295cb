//! Model file: a versioned container of named `f64` arrays behind a JSON
//! header.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MULTERMD"            8-byte magic
//! u32                    format version
//! u64                    header length in bytes
//! [u8; header length]    UTF-8 JSON header (config, class names, meta,
//!                        tensor table of names and shapes)
//! f64 ...                tensor data, in tensor-table order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, MulterConfig, MulterParams};
use crate::params::{named_tensors, Parameterized};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"MULTERMD";
pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "multer-model";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: MulterConfig,
    class_names: Vec<String>,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

pub fn write_model<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let tensors = named_tensors(&model.params);
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        config: model.params.config.clone(),
        class_names: model.class_names.clone(),
        meta: model.meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, _, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * tensors.iter().map(|(_, _, t)| t.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::Format(format!("writing model: {e}")))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("model file truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn read_model<R: Read>(mut input: R) -> Result<Model> {
    let mut all = Vec::new();
    input
        .read_to_end(&mut all)
        .map_err(|e| Error::Format(format!("reading model: {e}")))?;
    let mut bytes = &all[..];
    if take(&mut bytes, 8, "magic")? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().expect("8 bytes"));
    let header_bytes = take(&mut bytes, len as usize, "header")?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("model header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Format(format!("unexpected format tag {:?}", header.format)));
    }

    let mut stored = BTreeMap::new();
    for entry in header.tensors {
        let n = numel(&entry.shape);
        let raw = take(&mut bytes, n * 8, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        stored.insert(entry.name, Tensor::new(&entry.shape, data)?);
    }
    if !bytes.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor data",
            bytes.len()
        )));
    }

    let mut params = MulterParams::init(&header.config, 0)?;
    let mut problem = None;
    params.visit_mut("", &mut |name, _, t| match stored.remove(name) {
        Some(s) if s.shape() == t.shape() => *t = s,
        Some(s) => {
            problem.get_or_insert(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                s.shape(),
                t.shape()
            ));
        }
        None => {
            problem.get_or_insert(format!("tensor {name} missing"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Format(p));
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    let mut model = Model::new(params, header.class_names).map_err(|e| Error::Format(e.to_string()))?;
    model.meta = header.meta;
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes[..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::network::LevelSet;

    fn tiny_model() -> Model {
        let cfg = MulterConfig {
            backbone: BackboneConfig::with_widths(2, [2, 2, 3, 3]),
            levels: LevelSet::new(&[2, 4]).unwrap(),
            codewords: 2,
            branch_dim: 2,
            out_dim: 3,
            classes: 2,
        };
        let mut m = Model::new(MulterParams::init(&cfg, 11).unwrap(), vec!["a".into(), "b".into()]).unwrap();
        m.meta.insert("data".into(), "synth".into());
        m
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = tiny_model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(&buf[..]).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_model(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let m = tiny_model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_model(&buf[..buf.len() - 3]), Err(Error::Format(_))));
    }
}

//! Reader/writer for the `safetensors` container: an 8-byte little-endian
//! header length, a JSON header, then raw little-endian tensor bytes.
//!
//! Pretrained encoder weights are read from F32/F16/BF16/F64 files; checkpoints
//! written by this crate are always F64 so round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayD;
use serde_json::{json, Map, Value};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub type Metadata = BTreeMap<String, String>;

pub struct Loaded {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: Metadata,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read(path: &Path) -> Result<Loaded> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse(bytes: &[u8]) -> Result<Loaded> {
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {n} exceeds file size")))?;
    let header: Map<String, Value> = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| bad(format!("header json: {e}")))?;
    let data = &bytes[data_start..];

    let mut tensors = BTreeMap::new();
    let mut metadata = Metadata::new();
    for (name, info) in header {
        if name == "__metadata__" {
            if let Value::Object(m) = info {
                for (k, v) in m {
                    if let Value::String(s) = v {
                        metadata.insert(k, s);
                    }
                }
            }
            continue;
        }
        let dtype = info["dtype"]
            .as_str()
            .ok_or_else(|| bad(format!("{name}: missing dtype")))?;
        let shape: Vec<usize> = info["shape"]
            .as_array()
            .ok_or_else(|| bad(format!("{name}: missing shape")))?
            .iter()
            .map(|d| d.as_u64().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad(format!("{name}: bad shape")))?;
        let offs = info["data_offsets"]
            .as_array()
            .filter(|a| a.len() == 2)
            .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
            .ok_or_else(|| bad(format!("{name}: bad data_offsets")))?;
        if offs.0 > offs.1 || offs.1 > data.len() {
            return Err(bad(format!(
                "{name}: byte range {}..{} outside data section of {} bytes",
                offs.0,
                offs.1,
                data.len()
            )));
        }
        let raw = &data[offs.0..offs.1];
        let numel: usize = shape.iter().product();
        let values = decode(dtype, raw, numel).map_err(|m| bad(format!("{name}: {m}")))?;
        let t = ArrayD::from_shape_vec(shape, values).map_err(|e| bad(format!("{name}: {e}")))?;
        tensors.insert(name, t);
    }
    Ok(Loaded { tensors, metadata })
}

fn decode(dtype: &str, raw: &[u8], numel: usize) -> std::result::Result<Vec<f64>, String> {
    let width = match dtype {
        "F64" => 8,
        "F32" => 4,
        "F16" | "BF16" => 2,
        other => return Err(format!("unsupported dtype {other}")),
    };
    if raw.len() != numel * width {
        return Err(format!(
            "{} bytes for {numel} {dtype} values",
            raw.len()
        ));
    }
    let out = match dtype {
        "F64" => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        "F32" => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        "F16" => raw
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        _ => raw
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
    };
    Ok(out)
}

/// Serializes tensors as F64, sorted by name.
pub fn serialize<'a, I>(tensors: I, metadata: &Metadata) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));

    let mut header = Map::new();
    if !metadata.is_empty() {
        header.insert("__metadata__".into(), json!(metadata));
    }
    let mut offset = 0usize;
    for (name, t) in &sorted {
        let len = t.len() * 8;
        header.insert(
            (*name).to_string(),
            json!({ "dtype": "F64", "shape": t.shape(), "data_offsets": [offset, offset + len] }),
        );
        offset += len;
    }
    let mut head = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while head.len() % 8 != 0 {
        head.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + head.len() + offset);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for (_, t) in sorted {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes to a sibling temp file then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f =
            fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        f.write_all(bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let a = array![[1.0f64, -2.5e-300], [f64::MIN_POSITIVE, 3.25]].into_dyn();
        let b = array![0.1f64, 0.2, 0.3].into_dyn();
        let mut meta = Metadata::new();
        meta.insert("identity".into(), "tiny_test".into());
        let bytes = serialize([("w", &a), ("b", &b)], &meta);
        let back = parse(&bytes).unwrap();
        assert_eq!(back.tensors["w"], a);
        assert_eq!(back.tensors["b"], b);
        assert_eq!(back.metadata["identity"], "tiny_test");
    }

    #[test]
    fn reads_f32_and_half_precision() {
        let vals = [1.5f32, -0.25];
        let raw32: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let raw16: Vec<u8> = vals
            .iter()
            .flat_map(|v| half::f16::from_f32(*v).to_le_bytes())
            .collect();
        let header = json!({
            "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
            "h": {"dtype": "F16", "shape": [2], "data_offsets": [8, 12]},
        });
        let head = serde_json::to_vec(&header).unwrap();
        let mut bytes = (head.len() as u64).to_le_bytes().to_vec();
        bytes.extend(head);
        bytes.extend(raw32);
        bytes.extend(raw16);
        let l = parse(&bytes).unwrap();
        assert_eq!(l.tensors["a"].as_slice().unwrap(), &[1.5, -0.25]);
        assert_eq!(l.tensors["h"].as_slice().unwrap(), &[1.5, -0.25]);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let a = array![1.0f64, 2.0].into_dyn();
        let bytes = serialize([("a", &a)], &Metadata::new());
        assert!(parse(&bytes[..bytes.len() - 3]).is_err());
        assert!(parse(&bytes[..5]).is_err());
    }
}

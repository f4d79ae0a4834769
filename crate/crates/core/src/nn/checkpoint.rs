//! Checkpoint container.
//!
//! ```text
//! DCTNET-CKPT 1\n
//! {"meta": {...}, "tensors": [{"name": .., "shape": [..], "dtype": "f32", "trainable": ..}, ..]}\n
//! <raw little-endian f32 payloads, concatenated in header order>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::scalar::Scalar;

const MAGIC: &str = "DCTNET-CKPT 1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

pub fn write_checkpoint<S: Scalar, W: Write>(
    mut out: W,
    meta: &serde_json::Value,
    store: &ParamStore<S>,
) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        tensors: store
            .entries()
            .iter()
            .map(|e| TensorHeader {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                dtype: "f32".into(),
                trainable: e.trainable,
            })
            .collect(),
    };
    writeln!(out, "{MAGIC}")?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut buf = Vec::new();
    for e in store.entries() {
        buf.clear();
        for v in e.tensor.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar, R: Read>(input: R) -> Result<(serde_json::Value, ParamStore<S>)> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic line {:?}", line.trim_end())));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let header: Header =
        serde_json::from_str(line.trim_end_matches('\n')).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut store = ParamStore::new();
    for th in header.tensors {
        if th.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {} for {}", th.dtype, th.name)));
        }
        let n: usize = th.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        reader
            .read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("truncated payload for {}: {e}", th.name)))?;
        let data = raw.chunks_exact(4).map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        store.insert(th.name, Tensor::new(th.shape, data)?, th.trainable)?;
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after payload", rest.len())));
    }
    Ok((header.meta, store))
}

pub fn save_checkpoint<S: Scalar>(path: &Path, meta: &serde_json::Value, store: &ParamStore<S>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), meta, store)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(serde_json::Value, ParamStore<S>)> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap(), true).unwrap();
        s.insert("a.running_var", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), false).unwrap();
        s
    }

    #[test]
    fn byte_exact_round_trip() {
        let store = sample_store();
        let meta = serde_json::json!({"kind": "test", "n": 3});
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &meta, &store).unwrap();
        let (meta2, store2) = read_checkpoint::<f32, _>(&bytes[..]).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(store, store2);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &meta2, &store2).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let store = sample_store();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &serde_json::Value::Null, &store).unwrap();
        assert!(read_checkpoint::<f32, _>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint::<f32, _>(&extra[..]).is_err());
        assert!(read_checkpoint::<f32, _>(&b"nope\n{}\n"[..]).is_err());
    }
}

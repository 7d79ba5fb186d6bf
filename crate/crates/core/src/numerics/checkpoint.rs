//! Parameter container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as flat little-endian values in
//! header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VKTCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub seed: u64,
    pub tensors: Vec<TensorHeader>,
    /// Model descriptor and hyperparameters.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut out: W,
    store: &ParamStore<T>,
    seed: u64,
    meta: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        seed,
        tensors: store
            .entries()
            .iter()
            .map(|e| TensorHeader {
                name: e.name.clone(),
                group: e.group,
                shape: e.value.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(store.count() * T::BYTES);
    for e in store.entries() {
        for &v in e.value.data() {
            v.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(
    mut input: R,
) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {}, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let count: usize = t.shape.iter().product();
        let mut bytes = vec![0u8; count * T::BYTES];
        input
            .read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", t.name)))?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        store.add(t.name.clone(), t.group, Tensor::new(&t.shape, data)?);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, store))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    seed: u64,
    meta: serde_json::Value,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, store, seed, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), split in 1usize..40) {
            let split = split.min(values.len());
            let mut store = ParamStore::<f64>::new();
            store.add("a", ParamGroup::Encoder, Tensor::new(&[split], values[..split].to_vec()).unwrap());
            if split < values.len() {
                store.add("b", ParamGroup::Head, Tensor::new(&[values.len() - split], values[split..].to_vec()).unwrap());
            }
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &store, 7, serde_json::json!({"kind": "static"})).unwrap();
            let (header, back) = read_checkpoint::<f64, _>(buf.as_slice()).unwrap();
            prop_assert_eq!(header.seed, 7);
            for (x, y) in store.entries().iter().zip(back.entries()) {
                let xb: Vec<u64> = x.value.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.value.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
                prop_assert_eq!(x.group, y.group);
            }
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", ParamGroup::Head, Tensor::zeros(&[2, 2]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, 0, serde_json::Value::Null).unwrap();
        assert!(read_checkpoint::<f64, _>(buf.as_slice()).is_err());
        assert!(read_checkpoint::<f32, _>(&buf[..buf.len() - 1]).is_err());
    }
}

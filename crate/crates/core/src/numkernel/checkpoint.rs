//! Parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header listing
//! `{name, shape, offset}` for every parameter (offset in bytes from the
//! start of the payload), then the payload of little-endian `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    params: Vec<Entry>,
}

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut payload = Vec::with_capacity(store.num_scalars() * 8);
    for (_, p) in store.iter() {
        entries.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { params: entries })?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes a checkpoint into a fresh store, in file order.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| Error::corrupt(path, "truncated header length"))?
        .try_into()
        .expect("slice of 8");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(8..8usize.saturating_add(header_len))
        .ok_or_else(|| Error::corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::corrupt(path, format!("bad header: {e}")))?;
    let payload = &bytes[8 + header_len..];

    let mut store = ParamStore::new();
    let mut expected_end = 0;
    for e in header.params {
        let count: usize = e.shape.iter().product();
        let end = e.offset + count * 8;
        let raw = payload
            .get(e.offset..end)
            .ok_or_else(|| Error::corrupt(path, format!("payload of `{}` out of bounds", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let value = Tensor::new(e.shape, data)?;
        store.insert(e.name, value);
        expected_end = expected_end.max(end);
    }
    if expected_end != payload.len() {
        return Err(Error::corrupt(path, "trailing bytes after payload"));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

/// Loads values from `path` into an existing store with matching layout.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let loaded = load(path)?;
    store.copy_from(&loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.register("a.weight", &[3, 4], Init::TruncNormal(0.02), &mut rng);
        store.register("a.bias", &[1, 4], Init::Zeros, &mut rng);
        store.insert("odd", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        let bytes = encode(&store).unwrap();
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), store.len());
        for ((_, a), (_, b)) in store.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[4]));
        let bytes = encode(&store).unwrap();
        let err = decode(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }));
        assert!(decode(&bytes[..5], Path::new("mem")).is_err());
    }
}

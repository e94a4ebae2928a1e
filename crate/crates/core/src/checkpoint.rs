//! Binary model snapshots.
//!
//! Layout (little endian): magic `RAIDCKPT`, `u32` version, `u64` users, items and
//! dimension, then the user table and the item table as row-major `f64`.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{invalid, io_err, Result};
use crate::model::EmbeddingModel;

const MAGIC: &[u8; 8] = b"RAIDCKPT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 3 * 8;

pub fn encode(model: &EmbeddingModel) -> Vec<u8> {
    let (n, m, d) = (model.num_users(), model.num_items(), model.dim());
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * d * (n + m));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for x in [n, m, d] {
        out.extend_from_slice(&(x as u64).to_le_bytes());
    }
    for x in model.users.iter().chain(model.items.iter()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingModel> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(invalid("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(invalid(format!("unsupported checkpoint version {version}")));
    }
    let dims: Vec<usize> = bytes[12..HEADER_LEN]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let (n, m, d) = (dims[0], dims[1], dims[2]);
    let expected = n
        .checked_add(m)
        .and_then(|r| r.checked_mul(d))
        .and_then(|c| c.checked_mul(8))
        .and_then(|b| b.checked_add(HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(invalid("checkpoint length does not match its header"));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let users = Array2::from_shape_simple_fn((n, d), || values.next().expect("sized"));
    let items = Array2::from_shape_simple_fn((m, d), || values.next().expect("sized"));
    EmbeddingModel::new(users, items)
}

pub fn save(model: &EmbeddingModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(io_err(path))
}

pub fn load(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = EmbeddingModel::gaussian(3, 5, 4, 0.7, 9).unwrap();
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn corrupt_input_rejected() {
        let m = EmbeddingModel::gaussian(2, 2, 2, 1.0, 0).unwrap();
        let mut b = encode(&m);
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode(&b).is_err());
        let mut b = encode(&m);
        b[8] = 2;
        assert!(decode(&b).is_err());
    }
}

//! Parameter files: a text manifest (`name shape offset` per line) and a blob
//! of little-endian `f32` values in manifest order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{NumericsError, ParamStore, Scalar, Tensor};

pub fn encode<F: Scalar>(store: &ParamStore<F>) -> (String, Vec<u8>) {
    let mut manifest = String::new();
    let mut blob = Vec::with_capacity(store.count() * 4);
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        let shape = t
            .shape()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        writeln!(manifest, "{name} {shape} {offset}").unwrap();
        for &v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        offset += t.numel();
    }
    (manifest, blob)
}

pub fn decode(manifest: &str, blob: &[u8]) -> Result<ParamStore<f32>, NumericsError> {
    if blob.len() % 4 != 0 {
        return Err(NumericsError::Format("blob length is not a multiple of 4".into()));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut store = ParamStore::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| NumericsError::Format(format!("manifest line {}: {what}", lineno + 1));
        let mut parts = line.split_whitespace();
        let (Some(name), Some(shape), Some(offset), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad("expected `name shape offset`"));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| bad("bad shape"))?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let len: usize = shape.iter().product();
        let data = floats
            .get(offset..offset + len)
            .ok_or_else(|| bad("tensor extends past end of blob"))?
            .to_vec();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn save<F: Scalar>(store: &ParamStore<F>, manifest_path: &Path, blob_path: &Path) -> Result<(), NumericsError> {
    let (manifest, blob) = encode(store);
    fs::write(manifest_path, manifest)?;
    fs::write(blob_path, blob)?;
    Ok(())
}

pub fn load(manifest_path: &Path, blob_path: &Path) -> Result<ParamStore<f32>, NumericsError> {
    let manifest = fs::read_to_string(manifest_path)?;
    let blob = fs::read(blob_path)?;
    decode(&manifest, &blob)
}

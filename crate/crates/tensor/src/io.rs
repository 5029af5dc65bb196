//! `CVT1` tensor files and checkpoint directories.
//!
//! Layout: magic `CVT1`, `u32` rank, `rank x u64` dims, then row-major
//! little-endian `f32` values. All integers are little-endian. Values are
//! narrowed from `f64` on save.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CVT1";
pub const MANIFEST: &str = "manifest.txt";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let f = fs::File::create(path)?;
    write_tensor(std::io::BufWriter::new(f), t)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let f = fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(f))
}

/// Writes every parameter as `<name>.cvt` plus a manifest with one
/// `name dim0xdim1...` line per tensor.
pub fn save_checkpoint(dir: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (_, name, t) in store.iter() {
        save_tensor(dir.join(format!("{name}.cvt")), t)?;
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name} {}\n", dims.join("x")));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a checkpoint directory back into a fresh store, in manifest order.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ParamStore> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let mut store = ParamStore::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, dims) = line
            .split_once(' ')
            .ok_or_else(|| TensorError::Format(format!("manifest line {}: `{line}`", lineno + 1)))?;
        let t = load_tensor(dir.join(format!("{name}.cvt")))?;
        let expected: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| TensorError::Format(format!("manifest line {}: {e}", lineno + 1)))?;
        if expected != t.shape() {
            return Err(TensorError::Format(format!(
                "{name}: manifest says {expected:?}, file holds {:?}",
                t.shape()
            )));
        }
        store.add(name, t)?;
    }
    Ok(store)
}

//! Binary weight files.
//!
//! Layout, all little-endian: magic `MUNW`, version (u16), tensor count
//! (u32), then per tensor in sorted name order: name length (u32), UTF-8
//! name, ndim (u32), dims (u32 each), raw f32 data. The architecture is
//! not stored; it is recovered from the `in_conv.w` shape on load and the
//! full tensor set is validated against it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::neural::model::{Architecture, ModelWeights, NamedTensor};

const MAGIC: [u8; 4] = *b"MUNW";
const FORMAT_VERSION: u16 = 1;

// Sanity caps applied while parsing so corrupt headers fail with a format
// error instead of an absurd allocation.
const MAX_TENSORS: usize = 4096;
const MAX_NAME_BYTES: usize = 256;
const MAX_NDIM: usize = 8;
const MAX_NUMEL: usize = 1 << 28;

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&u32::try_from(weights.names().len()).unwrap().to_le_bytes())?;
    for (name, tensor) in weights.iter() {
        let bytes = name.as_bytes();
        out.write_all(&u32::try_from(bytes.len()).unwrap().to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&u32::try_from(tensor.dims.len()).unwrap().to_le_bytes())?;
        for &d in &tensor.dims {
            out.write_all(&u32::try_from(d).unwrap().to_le_bytes())?;
        }
        for &v in &tensor.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn truncated(err: std::io::Error) -> Error {
    if err.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("weight file is truncated")
    } else {
        Error::Io(err)
    }
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(truncated)?;
    if magic != MAGIC {
        return Err(Error::weights("bad magic, not a weight file"));
    }
    let mut version = [0u8; 2];
    reader.read_exact(&mut version).map_err(truncated)?;
    let version = u16::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(Error::weights(format!(
            "unsupported weight format version {version}"
        )));
    }

    let count = read_u32(&mut reader)? as usize;
    if count > MAX_TENSORS {
        return Err(Error::weights(format!("implausible tensor count {count}")));
    }
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut reader)? as usize;
        if name_len == 0 || name_len > MAX_NAME_BYTES {
            return Err(Error::weights(format!(
                "implausible tensor name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        reader.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::weights("tensor name is not UTF-8"))?;
        let ndim = read_u32(&mut reader)? as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::weights(format!("implausible rank {ndim} for {name}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut reader)? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_NUMEL)
            .ok_or_else(|| Error::weights(format!("implausible shape {dims:?} for {name}")))?;
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            reader.read_exact(&mut buf).map_err(truncated)?;
            data.push(f32::from_le_bytes(buf));
        }
        if tensors.insert(name.clone(), NamedTensor { dims, data }).is_some() {
            return Err(Error::weights(format!("duplicate tensor {name}")));
        }
    }
    let mut trailer = [0u8; 1];
    if reader.read(&mut trailer)? != 0 {
        return Err(Error::weights("trailing bytes after the last tensor"));
    }

    let head = tensors
        .get("in_conv.w")
        .ok_or_else(|| Error::weights("missing in_conv.w, cannot infer architecture"))?;
    if head.dims.len() != 4 {
        return Err(Error::weights("in_conv.w must be 4-dimensional"));
    }
    let arch = Architecture {
        base_width: head.dims[0],
        input_channels: head.dims[1],
    };
    ModelWeights::from_tensors(arch, tensors)
}
